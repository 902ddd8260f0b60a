#include "minimon/archive.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace minimon::archive {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'M', 'A', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kCodecDeflate = 1;

void put_be32(char* out, std::uint32_t v) {
  out[0] = static_cast<char>((v >> 24) & 0xff);
  out[1] = static_cast<char>((v >> 16) & 0xff);
  out[2] = static_cast<char>((v >> 8) & 0xff);
  out[3] = static_cast<char>(v & 0xff);
}

std::uint32_t get_be32(const unsigned char* in) {
  return (std::uint32_t(in[0]) << 24) | (std::uint32_t(in[1]) << 16) |
         (std::uint32_t(in[2]) << 8) | std::uint32_t(in[3]);
}

std::uint32_t payload_crc(std::string_view payload) {
  return static_cast<std::uint32_t>(::crc32(
      0, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
}

std::string deflate_block(const std::string& raw) {
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::string out(bound, '\0');
  if (::compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("deflate failed");
  out.resize(bound);
  return out;
}

std::string inflate_block(const std::string& compressed, std::size_t raw_size) {
  std::string out(raw_size, '\0');
  uLongf got = static_cast<uLongf>(raw_size);
  if (::uncompress(reinterpret_cast<Bytef*>(out.data()), &got,
                   reinterpret_cast<const Bytef*>(compressed.data()),
                   static_cast<uLong>(compressed.size())) != Z_OK ||
      got != raw_size)
    throw std::runtime_error("inflate failed");
  return out;
}

struct LittleEndianWriter {
  std::string buffer;
  void u32(std::uint32_t v) { buffer.append(reinterpret_cast<const char*>(&v), 4); }
  void u64(std::uint64_t v) { buffer.append(reinterpret_cast<const char*>(&v), 8); }
};

}  // namespace

void append_framed(const fs::path& file, const std::string& payload) {
  std::string frame(4 + payload.size() + 4, '\0');
  put_be32(frame.data(), static_cast<std::uint32_t>(payload.size()));
  std::memcpy(frame.data() + 4, payload.data(), payload.size());
  put_be32(frame.data() + 4 + payload.size(), payload_crc(payload));
  std::ofstream out(file, std::ios::binary | std::ios::app);
  out.write(frame.data(), static_cast<std::streamsize>(frame.size()));
}

std::vector<std::string> read_framed(const fs::path& file) {
  std::vector<std::string> records;
  std::ifstream in(file, std::ios::binary);
  if (!in) return records;
  while (true) {
    unsigned char header[4];
    if (!in.read(reinterpret_cast<char*>(header), 4)) break;
    std::uint32_t len = get_be32(header);
    std::string payload(len, '\0');
    if (!in.read(payload.data(), len)) break;
    unsigned char crc_bytes[4];
    if (!in.read(reinterpret_cast<char*>(crc_bytes), 4)) break;
    if (get_be32(crc_bytes) != payload_crc(payload)) break;
    records.push_back(std::move(payload));
  }
  return records;
}

const char* partition_state_name(PartitionState s) {
  switch (s) {
    case PartitionState::OPEN: return "OPEN";
    case PartitionState::COMPACTED: return "COMPACTED";
  }
  return "?";
}

const std::vector<std::string>& Archive::compaction_io_steps() {
  static const std::vector<std::string> steps = {
      "read_open_log", "write_tmp", "fsync_tmp", "rename_tmp", "remove_open_log"};
  return steps;
}

Archive::Archive(ArchiveOptions options) : options_(std::move(options)) {
  fs::create_directories(options_.dir);
  load_from_disk();
}

void Archive::set_compaction_fault_hook(std::function<void(const std::string&)> hook) {
  std::lock_guard lock(mutex_);
  fault_hook_ = std::move(hook);
}

void Archive::fault_point(const std::string& step) {
  std::function<void(const std::string&)> hook;
  {
    std::lock_guard lock(mutex_);
    hook = fault_hook_;
  }
  if (hook) hook(step);
}

fs::path Archive::partition_dir(const std::string& doc_type, Timestamp day) const {
  return options_.dir / doc_type / format_day(day);
}

Archive::Partition& Archive::partition_for(const std::string& doc_type, Timestamp day) {
  Timestamp start = day_start(day);
  auto key = std::make_pair(doc_type, start.ms);
  auto it = partitions_.find(key);
  if (it != partitions_.end()) return it->second;
  Partition p;
  p.doc_type = doc_type;
  p.day = start;
  return partitions_.emplace(key, std::move(p)).first->second;
}

std::vector<AppendDisposition> Archive::append(const std::string& doc_type,
                                               const std::vector<Document>& records) {
  std::vector<AppendDisposition> dispositions;
  dispositions.reserve(records.size());
  std::lock_guard lock(mutex_);
  for (const Document& doc : records) {
    Partition& partition = partition_for(doc_type, doc.timestamp);
    fs::path dir = partition_dir(doc_type, partition.day);
    fs::create_directories(dir);
    std::string encoded = doc.canonical_encoding();
    if (partition.state == PartitionState::COMPACTED) {
      append_framed(dir / "late.log", encoded);
      ++partition.late_count;
      dispositions.push_back(AppendDisposition::LATE_SIDECAR);
    } else {
      append_framed(dir / "open.log", encoded);
      ++partition.record_count;
      partition.raw_bytes += 4 + encoded.size() + 4;
      dispositions.push_back(AppendDisposition::MAIN);
    }
  }
  return dispositions;
}

CompactionReport Archive::compact(const std::string& doc_type, Timestamp day, Timestamp now) {
  Timestamp start = day_start(day);
  CompactionReport report;
  report.doc_type = doc_type;
  report.day = format_day(start);

  {
    std::lock_guard lock(mutex_);
    auto it = partitions_.find({doc_type, start.ms});
    if (it == partitions_.end())
      throw std::invalid_argument("no partition " + doc_type + "/" + format_day(start));
    if (it->second.state == PartitionState::COMPACTED) {
      report.already_compacted = true;
      report.bytes_before = it->second.compacted_bytes;
      report.bytes_after = it->second.compacted_bytes;
      return report;
    }
    Timestamp day_end = start + kMillisPerDay;
    if (day_end + options_.compact_after_ms > now)
      throw std::invalid_argument("partition " + report.day + " day has not elapsed yet");
  }

  fs::path dir = partition_dir(doc_type, start);
  fs::path open_log = dir / "open.log";
  fs::path tmp = dir / "part.bin.tmp";
  fs::path final_path = dir / "part.bin";

  fault_point("read_open_log");
  std::vector<std::string> records = read_framed(open_log);
  std::uint64_t bytes_before = fs::exists(open_log) ? fs::file_size(open_log) : 0;

  // First-arrival order among survivors; duplicate = byte-identical
  // canonical encoding.
  std::vector<const std::string*> survivors;
  std::unordered_map<std::uint64_t, std::vector<const std::string*>> seen;
  for (const std::string& record : records) {
    std::uint64_t hash = fnv1a64(record);
    auto& bucket = seen[hash];
    bool duplicate = false;
    for (const std::string* prior : bucket) {
      if (*prior == record) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) {
      ++report.duplicates_removed;
    } else {
      bucket.push_back(&record);
      survivors.push_back(&record);
    }
  }

  // Re-frame survivors into raw blocks of at most block_bytes.
  struct BlockEntry {
    std::string compressed;
    std::uint64_t raw_size = 0;
    std::uint32_t record_count = 0;
  };
  std::vector<BlockEntry> blocks;
  std::string current;
  std::uint32_t current_records = 0;
  auto seal_block = [&] {
    if (current.empty()) return;
    BlockEntry entry;
    entry.raw_size = current.size();
    entry.record_count = current_records;
    entry.compressed = deflate_block(current);
    blocks.push_back(std::move(entry));
    current.clear();
    current_records = 0;
  };
  for (const std::string* record : survivors) {
    std::string frame(4 + record->size() + 4, '\0');
    put_be32(frame.data(), static_cast<std::uint32_t>(record->size()));
    std::memcpy(frame.data() + 4, record->data(), record->size());
    put_be32(frame.data() + 4 + record->size(), payload_crc(*record));
    current += frame;
    ++current_records;
    if (current.size() >= options_.block_bytes) seal_block();
  }
  seal_block();

  LittleEndianWriter header;
  header.buffer.append(kMagic, 4);
  header.u32(kVersion);
  header.u32(kCodecDeflate);
  header.u32(static_cast<std::uint32_t>(blocks.size()));
  std::uint64_t data_offset = header.buffer.size() + blocks.size() * (8 + 8 + 8 + 4);
  std::uint64_t at = data_offset;
  for (const BlockEntry& block : blocks) {
    header.u64(at);
    header.u64(block.compressed.size());
    header.u64(block.raw_size);
    header.u32(block.record_count);
    at += block.compressed.size();
  }

  fault_point("write_tmp");
  {
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw std::runtime_error("cannot open " + tmp.string());
    auto write_all = [&](const std::string& bytes) {
      if (::write(fd, bytes.data(), bytes.size()) != static_cast<ssize_t>(bytes.size())) {
        ::close(fd);
        throw std::runtime_error("short write to " + tmp.string());
      }
    };
    write_all(header.buffer);
    for (const BlockEntry& block : blocks) write_all(block.compressed);
    fault_point("fsync_tmp");
    ::fsync(fd);
    ::close(fd);
  }

  fault_point("rename_tmp");
  fs::rename(tmp, final_path);
  fault_point("remove_open_log");
  std::error_code ec;
  fs::remove(open_log, ec);

  std::uint64_t bytes_after = fs::file_size(final_path);
  report.bytes_before = bytes_before;
  report.bytes_after = bytes_after;
  report.reduction_ratio =
      bytes_before == 0 ? 0.0 : 1.0 - static_cast<double>(bytes_after) / bytes_before;

  std::lock_guard lock(mutex_);
  Partition& partition = partitions_.at({doc_type, start.ms});
  partition.state = PartitionState::COMPACTED;
  partition.record_count = survivors.size();
  partition.raw_bytes = bytes_before;
  partition.compacted_bytes = bytes_after;
  return report;
}

std::vector<Document> Archive::read(const std::string& doc_type, Timestamp day,
                                    const std::vector<FieldMatcher>& matchers) const {
  Timestamp start = day_start(day);
  fs::path dir = partition_dir(doc_type, start);
  std::vector<std::string> encoded;

  if (fs::exists(dir / "part.bin")) {
    std::ifstream in(dir / "part.bin", std::ios::binary);
    char magic[4];
    std::uint32_t version = 0, codec = 0, block_count = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&codec), 4);
    in.read(reinterpret_cast<char*>(&block_count), 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0 || codec != kCodecDeflate)
      throw std::runtime_error("bad partition header in " + (dir / "part.bin").string());
    struct TableEntry {
      std::uint64_t offset, compressed_size, raw_size;
      std::uint32_t records;
    };
    std::vector<TableEntry> table(block_count);
    for (TableEntry& entry : table) {
      in.read(reinterpret_cast<char*>(&entry.offset), 8);
      in.read(reinterpret_cast<char*>(&entry.compressed_size), 8);
      in.read(reinterpret_cast<char*>(&entry.raw_size), 8);
      in.read(reinterpret_cast<char*>(&entry.records), 4);
    }
    for (const TableEntry& entry : table) {
      in.seekg(static_cast<std::streamoff>(entry.offset));
      std::string compressed(entry.compressed_size, '\0');
      in.read(compressed.data(), static_cast<std::streamsize>(entry.compressed_size));
      std::string raw = inflate_block(compressed, entry.raw_size);
      std::size_t pos = 0;
      while (pos + 8 <= raw.size()) {
        std::uint32_t len = get_be32(reinterpret_cast<const unsigned char*>(raw.data() + pos));
        if (pos + 4 + len + 4 > raw.size()) break;
        encoded.push_back(raw.substr(pos + 4, len));
        pos += 4 + len + 4;
      }
    }
  } else if (fs::exists(dir / "open.log")) {
    encoded = read_framed(dir / "open.log");
  }

  for (std::string& record : read_framed(dir / "late.log")) encoded.push_back(std::move(record));

  std::vector<Document> out;
  for (const std::string& bytes : encoded) {
    Json j = Json::parse(bytes, nullptr, false);
    auto doc = Document::from_json(j);
    if (!doc.has_value()) continue;
    bool ok = true;
    for (const FieldMatcher& m : matchers) {
      if (!m.matches(doc->payload)) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(std::move(*doc));
  }
  return out;
}

std::vector<PartitionInfo> Archive::partitions() const {
  std::lock_guard lock(mutex_);
  std::vector<PartitionInfo> out;
  for (const auto& [key, p] : partitions_) {
    out.push_back({p.doc_type, format_day(p.day), p.state, p.raw_bytes, p.compacted_bytes,
                   p.record_count, p.late_count});
  }
  return out;
}

std::vector<CompactionReport> Archive::compact_eligible(Timestamp now) {
  std::vector<std::pair<std::string, Timestamp>> eligible;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [key, p] : partitions_) {
      if (p.state != PartitionState::OPEN) continue;
      if (p.day + kMillisPerDay + options_.compact_after_ms <= now)
        eligible.push_back({p.doc_type, p.day});
    }
  }
  std::vector<CompactionReport> reports;
  for (const auto& [doc_type, day] : eligible) reports.push_back(compact(doc_type, day, now));
  return reports;
}

void Archive::load_from_disk() {
  for (const auto& type_entry : fs::directory_iterator(options_.dir)) {
    if (!type_entry.is_directory()) continue;
    std::string doc_type = type_entry.path().filename().string();
    for (const auto& day_entry : fs::directory_iterator(type_entry.path())) {
      if (!day_entry.is_directory()) continue;
      auto day = parse_day(day_entry.path().filename().string());
      if (!day.has_value()) continue;
      Partition p;
      p.doc_type = doc_type;
      p.day = *day;

      fs::path part_bin = day_entry.path() / "part.bin";
      fs::path open_log = day_entry.path() / "open.log";
      fs::path tmp = day_entry.path() / "part.bin.tmp";
      // A leftover tmp from a crashed compaction is garbage by contract.
      if (fs::exists(tmp)) fs::remove(tmp);

      if (fs::exists(part_bin)) {
        p.state = PartitionState::COMPACTED;
        p.compacted_bytes = fs::file_size(part_bin);
        // Crash after rename but before removing open.log: the partition
        // is sealed, the stale log has been superseded.
        if (fs::exists(open_log)) fs::remove(open_log);
        std::ifstream in(part_bin, std::ios::binary);
        char magic[4];
        std::uint32_t version = 0, codec = 0, block_count = 0;
        in.read(magic, 4);
        in.read(reinterpret_cast<char*>(&version), 4);
        in.read(reinterpret_cast<char*>(&codec), 4);
        in.read(reinterpret_cast<char*>(&block_count), 4);
        for (std::uint32_t i = 0; in && i < block_count; ++i) {
          std::uint64_t offset, compressed_size, raw_size;
          std::uint32_t records;
          in.read(reinterpret_cast<char*>(&offset), 8);
          in.read(reinterpret_cast<char*>(&compressed_size), 8);
          in.read(reinterpret_cast<char*>(&raw_size), 8);
          in.read(reinterpret_cast<char*>(&records), 4);
          if (in) p.record_count += records;
        }
      } else if (fs::exists(open_log)) {
        p.state = PartitionState::OPEN;
        p.record_count = read_framed(open_log).size();
        p.raw_bytes = fs::file_size(open_log);
      }
      p.late_count = read_framed(day_entry.path() / "late.log").size();
      partitions_[{doc_type, p.day.ms}] = std::move(p);
    }
  }
}

}  // namespace minimon::archive
