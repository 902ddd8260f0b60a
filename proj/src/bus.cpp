#include "minimon/bus.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace minimon::bus {

namespace fs = std::filesystem;

namespace {

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
  return static_cast<std::uint32_t>(
      ::crc32(0, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
}

void write_file_atomic(const fs::path& path, const std::string& content, bool do_fsync) {
  fs::path tmp = path;
  tmp += ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + tmp.string());
  ssize_t n = ::write(fd, content.data(), content.size());
  if (n != static_cast<ssize_t>(content.size())) {
    ::close(fd);
    throw std::runtime_error("short write to " + tmp.string());
  }
  if (do_fsync) ::fsync(fd);
  ::close(fd);
  fs::rename(tmp, path);
}

}  // namespace

bool valid_topic_name(std::string_view name) {
  if (name.empty()) return false;
  std::size_t start = 0;
  while (start <= name.size()) {
    std::size_t dot = name.find('.', start);
    std::string_view token =
        dot == std::string_view::npos ? name.substr(start) : name.substr(start, dot - start);
    if (!validate_name(token)) return false;
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return true;
}

struct Bus::Topic {
  std::string name;
  std::mutex append_mutex;
  std::vector<TopicRecord> records;  // records[i].offset == base + i
  std::uint64_t base = 0;
  int fd = -1;
  std::uint64_t file_size = 0;
  bool dirty = false;

  ~Topic() {
    if (fd >= 0) ::close(fd);
  }
};

Bus::Bus(fs::path dir, BusOptions options) : dir_(std::move(dir)), options_(std::move(options)) {
  if (!options_.clock) options_.clock = now_wall;
  fs::create_directories(dir_ / "topics");
  fs::create_directories(dir_ / "cursors");
  load_from_disk();
  if (options_.fsync_interval_ms > 0) {
    flusher_ = std::thread([this] { flusher_loop(); });
  }
}

Bus::~Bus() {
  {
    std::lock_guard lock(flusher_mutex_);
    stopping_ = true;
  }
  flusher_cv_.notify_all();
  if (flusher_.joinable()) flusher_.join();
  flush();
}

void Bus::flusher_loop() {
  std::unique_lock lock(flusher_mutex_);
  while (!stopping_) {
    flusher_cv_.wait_for(lock, std::chrono::milliseconds(options_.fsync_interval_ms),
                         [this] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    flush();
    lock.lock();
  }
}

void Bus::flush() {
  std::lock_guard lock(registry_mutex_);
  for (auto& [name, topic] : topics_) {
    std::lock_guard append_lock(topic->append_mutex);
    if (topic->dirty && topic->fd >= 0) {
      ::fsync(topic->fd);
      topic->dirty = false;
    }
  }
}

void Bus::load_from_disk() {
  Timestamp recovered_at = options_.clock();
  for (const auto& entry : fs::directory_iterator(dir_ / "topics")) {
    if (entry.path().extension() != ".log") continue;
    std::string name = entry.path().stem().string();
    auto topic = std::make_unique<Topic>();
    topic->name = name;

    fs::path meta = entry.path();
    meta.replace_extension(".meta");
    if (fs::exists(meta)) {
      std::ifstream in(meta);
      std::string line;
      while (std::getline(in, line)) {
        if (line.rfind("base_offset=", 0) == 0) topic->base = std::stoull(line.substr(12));
      }
    }

    std::ifstream log(entry.path(), std::ios::binary);
    std::uint64_t valid_size = 0;
    std::uint64_t offset = topic->base;
    while (true) {
      unsigned char header[4];
      if (!log.read(reinterpret_cast<char*>(header), 4)) break;
      std::uint32_t len = get_be32(header);
      std::string payload(len, '\0');
      if (!log.read(payload.data(), len)) break;
      unsigned char crc_bytes[4];
      if (!log.read(reinterpret_cast<char*>(crc_bytes), 4)) break;
      if (get_be32(crc_bytes) != payload_crc(payload)) break;  // torn tail
      topic->records.push_back(TopicRecord{name, offset++, std::move(payload), recovered_at});
      valid_size += 4ull + len + 4ull;
    }
    log.close();

    topic->fd = ::open(entry.path().c_str(), O_WRONLY | O_CREAT, 0644);
    if (topic->fd < 0) throw std::runtime_error("cannot open " + entry.path().string());
    if (fs::file_size(entry.path()) != valid_size) {
      if (::ftruncate(topic->fd, static_cast<off_t>(valid_size)) != 0)
        throw std::runtime_error("cannot truncate torn tail of " + entry.path().string());
    }
    ::lseek(topic->fd, static_cast<off_t>(valid_size), SEEK_SET);
    topic->file_size = valid_size;
    topics_[name] = std::move(topic);
  }

  for (const auto& entry : fs::directory_iterator(dir_ / "cursors")) {
    if (entry.path().extension() != ".cursors") continue;
    std::string group = entry.path().stem().string();
    std::ifstream in(entry.path());
    std::string line;
    auto& per_topic = cursors_[group];
    while (std::getline(in, line)) {
      auto eq = line.rfind('=');
      if (eq == std::string::npos) continue;
      per_topic[line.substr(0, eq)] = std::stoll(line.substr(eq + 1));
    }
    // Nothing has been delivered yet this process; redelivery starts after
    // the committed offset.
    delivered_[group] = per_topic;
  }
}

Bus::Topic& Bus::topic_state(const std::string& name) {
  std::lock_guard lock(registry_mutex_);
  auto it = topics_.find(name);
  if (it != topics_.end()) return *it->second;
  auto topic = std::make_unique<Topic>();
  topic->name = name;
  fs::path log = dir_ / "topics" / (name + ".log");
  topic->fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (topic->fd < 0) throw std::runtime_error("cannot open " + log.string());
  auto [inserted, ok] = topics_.emplace(name, std::move(topic));
  (void)ok;
  return *inserted->second;
}

const Bus::Topic* Bus::topic_state_if_exists(const std::string& name) const {
  std::lock_guard lock(registry_mutex_);
  auto it = topics_.find(name);
  return it == topics_.end() ? nullptr : it->second.get();
}

std::uint64_t Bus::publish(const std::string& topic_name, std::string_view payload) {
  if (!valid_topic_name(topic_name))
    throw std::invalid_argument("invalid topic name: '" + topic_name + "'");
  Topic& topic = topic_state(topic_name);
  std::lock_guard lock(topic.append_mutex);

  std::string frame(4 + payload.size() + 4, '\0');
  put_be32(frame.data(), static_cast<std::uint32_t>(payload.size()));
  std::memcpy(frame.data() + 4, payload.data(), payload.size());
  put_be32(frame.data() + 4 + payload.size(), payload_crc(payload));

  ssize_t n = ::write(topic.fd, frame.data(), frame.size());
  if (n != static_cast<ssize_t>(frame.size())) {
    // No partial append: roll the file back to the last record boundary.
    if (::ftruncate(topic.fd, static_cast<off_t>(topic.file_size)) != 0 ||
        ::lseek(topic.fd, static_cast<off_t>(topic.file_size), SEEK_SET) < 0)
      throw std::runtime_error("bus append failed and rollback failed on " + topic_name);
    throw std::runtime_error("bus append failed on " + topic_name);
  }
  topic.file_size += frame.size();
  topic.dirty = true;
  if (options_.fsync_interval_ms <= 0) {
    ::fsync(topic.fd);
    topic.dirty = false;
  }

  std::uint64_t offset = topic.base + topic.records.size();
  topic.records.push_back(
      TopicRecord{topic_name, offset, std::string(payload), options_.clock()});
  return offset;
}

std::vector<TopicRecord> Bus::poll(const std::string& group, const std::string& topic_name,
                                   std::size_t max) {
  if (max < 1) throw std::invalid_argument("poll: max must be >= 1");
  std::int64_t committed_offset;
  bool newly_registered = false;
  {
    std::lock_guard lock(registry_mutex_);
    auto& per_topic = cursors_[group];
    auto it = per_topic.find(topic_name);
    if (it == per_topic.end()) {
      per_topic[topic_name] = -1;
      newly_registered = true;
      it = per_topic.find(topic_name);
    }
    committed_offset = it->second;
  }
  if (newly_registered) persist_cursor_file(group);

  std::vector<TopicRecord> out;
  Topic* topic = nullptr;
  {
    std::lock_guard lock(registry_mutex_);
    auto it = topics_.find(topic_name);
    if (it == topics_.end()) return out;
    topic = it->second.get();
  }
  std::lock_guard lock(topic->append_mutex);
  std::uint64_t from =
      committed_offset < 0 ? topic->base
                           : std::max<std::uint64_t>(topic->base, committed_offset + 1);
  for (std::uint64_t off = from; off < topic->base + topic->records.size() && out.size() < max;
       ++off) {
    out.push_back(topic->records[off - topic->base]);
  }
  if (!out.empty()) {
    std::lock_guard reg(registry_mutex_);
    auto& highest = delivered_[group][topic_name];
    highest = std::max(highest, static_cast<std::int64_t>(out.back().offset));
  }
  return out;
}

void Bus::commit(const std::string& group, const std::string& topic_name, std::uint64_t offset) {
  {
    std::lock_guard lock(registry_mutex_);
    auto git = delivered_.find(group);
    std::int64_t highest = -1;
    if (git != delivered_.end()) {
      auto tit = git->second.find(topic_name);
      if (tit != git->second.end()) highest = tit->second;
    }
    if (static_cast<std::int64_t>(offset) > highest)
      throw std::invalid_argument("commit of undelivered offset " + std::to_string(offset) +
                                  " on " + topic_name + " by group " + group);
    auto& cursor = cursors_[group][topic_name];
    cursor = std::max(cursor, static_cast<std::int64_t>(offset));
  }
  persist_cursor_file(group);
}

std::int64_t Bus::committed(const std::string& group, const std::string& topic_name) const {
  std::lock_guard lock(registry_mutex_);
  auto git = cursors_.find(group);
  if (git == cursors_.end()) return -1;
  auto tit = git->second.find(topic_name);
  return tit == git->second.end() ? -1 : tit->second;
}

std::uint64_t Bus::next_offset(const std::string& topic_name) const {
  const Topic* topic = topic_state_if_exists(topic_name);
  if (topic == nullptr) return 0;
  std::lock_guard lock(const_cast<Topic*>(topic)->append_mutex);
  return topic->base + topic->records.size();
}

std::uint64_t Bus::base_offset(const std::string& topic_name) const {
  const Topic* topic = topic_state_if_exists(topic_name);
  if (topic == nullptr) return 0;
  std::lock_guard lock(const_cast<Topic*>(topic)->append_mutex);
  return topic->base;
}

std::vector<std::string> Bus::topics() const {
  std::lock_guard lock(registry_mutex_);
  std::vector<std::string> out;
  for (const auto& [name, topic] : topics_) out.push_back(name);
  return out;
}

std::vector<std::string> Bus::groups() const {
  std::lock_guard lock(registry_mutex_);
  std::vector<std::string> out;
  for (const auto& [name, cursor] : cursors_) out.push_back(name);
  return out;
}

void Bus::persist_cursor_file(const std::string& group) {
  std::string content;
  {
    std::lock_guard lock(registry_mutex_);
    auto it = cursors_.find(group);
    if (it == cursors_.end()) return;
    for (const auto& [topic, offset] : it->second)
      content += topic + "=" + std::to_string(offset) + "\n";
  }
  write_file_atomic(dir_ / "cursors" / (group + ".cursors"), content,
                    /*do_fsync=*/true);
}

std::size_t Bus::apply_retention(Timestamp now) {
  Timestamp cutoff = now - options_.retention_ms;
  std::size_t dropped_total = 0;

  std::vector<std::string> names = topics();
  for (const auto& name : names) {
    std::int64_t min_committed;
    Topic* topic;
    {
      std::lock_guard lock(registry_mutex_);
      auto it = topics_.find(name);
      if (it == topics_.end()) continue;
      topic = it->second.get();
      min_committed = std::numeric_limits<std::int64_t>::max();
      for (const auto& [group, per_topic] : cursors_) {
        auto tit = per_topic.find(name);
        std::int64_t committed_offset = tit == per_topic.end() ? -1 : tit->second;
        min_committed = std::min(min_committed, committed_offset);
      }
      if (cursors_.empty()) min_committed = std::numeric_limits<std::int64_t>::max();
    }

    std::lock_guard lock(topic->append_mutex);
    std::size_t drop = 0;
    while (drop < topic->records.size()) {
      const TopicRecord& record = topic->records[drop];
      if (record.enqueued_at >= cutoff) break;
      if (static_cast<std::int64_t>(record.offset) > min_committed) break;
      ++drop;
    }
    if (drop == 0) continue;

    // Rewrite the tail into a fresh log and swap it in.
    fs::path log = dir_ / "topics" / (name + ".log");
    fs::path tmp = log;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      for (std::size_t i = drop; i < topic->records.size(); ++i) {
        const std::string& payload = topic->records[i].payload;
        char header[4], crc_bytes[4];
        put_be32(header, static_cast<std::uint32_t>(payload.size()));
        put_be32(crc_bytes, payload_crc(payload));
        out.write(header, 4);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        out.write(crc_bytes, 4);
      }
    }
    ::close(topic->fd);
    fs::rename(tmp, log);
    topic->fd = ::open(log.c_str(), O_WRONLY | O_APPEND, 0644);
    if (topic->fd < 0) throw std::runtime_error("cannot reopen " + log.string());
    ::fsync(topic->fd);
    topic->file_size = fs::file_size(log);
    topic->base += drop;
    topic->records.erase(topic->records.begin(),
                         topic->records.begin() + static_cast<std::ptrdiff_t>(drop));
    write_file_atomic(dir_ / "topics" / (name + ".meta"),
                      "base_offset=" + std::to_string(topic->base) + "\n", true);
    dropped_total += drop;
  }
  return dropped_total;
}

}  // namespace minimon::bus
