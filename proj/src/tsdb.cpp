#include "minimon/tsdb.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <stdexcept>

namespace minimon::tsdb {

namespace fs = std::filesystem;

const char* write_error_name(WriteError err) {
  switch (err) {
    case WriteError::NONE: return "ok";
    case WriteError::NOT_FINITE: return "NOT_FINITE";
    case WriteError::OUT_OF_WINDOW: return "OUT_OF_WINDOW";
    case WriteError::DUPLICATE_TIMESTAMP: return "DUPLICATE_TIMESTAMP";
  }
  return "?";
}

namespace {

std::string posting_key(const std::string& tag, const std::string& value) {
  std::string key = tag;
  key.push_back('\0');
  key += value;
  return key;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

constexpr std::size_t kRawRecordSize = sizeof(std::int64_t) + sizeof(double);
constexpr std::size_t kBinRecordSize =
    1 + sizeof(std::int64_t) + sizeof(std::uint64_t) + 3 * sizeof(double);

void encode_raw(char* out, Timestamp ts, double value) {
  std::memcpy(out, &ts.ms, sizeof(ts.ms));
  std::memcpy(out + sizeof(ts.ms), &value, sizeof(value));
}

void encode_bin(char* out, const AggregateBin& bin) {
  out[0] = static_cast<char>(bin_slot(bin.resolution));
  std::size_t at = 1;
  std::memcpy(out + at, &bin.window_start.ms, 8);
  at += 8;
  std::memcpy(out + at, &bin.count, 8);
  at += 8;
  std::memcpy(out + at, &bin.sum, 8);
  at += 8;
  std::memcpy(out + at, &bin.min, 8);
  at += 8;
  std::memcpy(out + at, &bin.max, 8);
}

void erase_id(std::vector<SeriesId>& list, SeriesId id) {
  list.erase(std::remove(list.begin(), list.end(), id), list.end());
}

}  // namespace

struct Store::Series {
  SeriesId id = 0;
  SeriesKey key;
  std::string canonical;
  std::string dir_name;
  Timestamp first_seen;
  std::vector<std::pair<Timestamp, double>> raw;  // sorted by ts
  std::array<std::map<std::int64_t, AggregateBin>, 5> bins;
  std::array<Timestamp, 5> aggregated_upto{};
  // not yet flushed to the block files
  std::vector<std::pair<Timestamp, double>> pending_raw;
  std::vector<AggregateBin> pending_bins;
  bool meta_written = false;
  bool upto_initialized = false;
};

Store::Store(StoreOptions options) : options_(std::move(options)) {
  if (!options_.clock) options_.clock = now_wall;
  if (!options_.dir.empty()) {
    fs::create_directories(options_.dir / "series");
    load_from_disk();
  }
}

Store::~Store() {
  if (!options_.dir.empty()) checkpoint();
}

SeriesId Store::intern_series(const SeriesKey& key) {
  std::string canonical = key.canonical();
  auto it = by_canonical_.find(canonical);
  if (it != by_canonical_.end()) return it->second;

  auto series = std::make_unique<Series>();
  series->id = static_cast<SeriesId>(series_.size());
  series->key = key;
  series->canonical = canonical;

  auto seen = first_seen_.find(canonical);
  if (seen != first_seen_.end()) {
    series->first_seen = seen->second;
  } else {
    series->first_seen = options_.clock();
    first_seen_[canonical] = series->first_seen;
  }

  if (!options_.dir.empty()) {
    std::string base = hex64(fnv1a64(canonical));
    std::string candidate = base;
    int probe = 0;
    while (true) {
      fs::path meta = options_.dir / "series" / candidate / "meta.txt";
      if (!fs::exists(meta)) break;
      std::ifstream in(meta);
      std::string existing;
      std::getline(in, existing);
      if (existing == canonical) break;
      candidate = base + "-" + std::to_string(++probe);
    }
    series->dir_name = candidate;
  }

  name_index_[key.name].push_back(series->id);
  for (const auto& [tag, value] : key.tags) {
    inverted_index_[posting_key(tag, value)].push_back(series->id);
    ++posting_count_;
  }
  by_canonical_[canonical] = series->id;
  SeriesId id = series->id;
  series_.push_back(std::move(series));
  return id;
}

void Store::remove_series_postings(SeriesId id) {
  Series& s = *series_[id];
  auto nit = name_index_.find(s.key.name);
  if (nit != name_index_.end()) {
    erase_id(nit->second, id);
    if (nit->second.empty()) name_index_.erase(nit);
  }
  for (const auto& [tag, value] : s.key.tags) {
    auto pit = inverted_index_.find(posting_key(tag, value));
    if (pit != inverted_index_.end()) {
      erase_id(pit->second, id);
      --posting_count_;
      if (pit->second.empty()) inverted_index_.erase(pit);
    }
  }
  by_canonical_.erase(s.canonical);
}

WriteResult Store::write(const MetricPoint& p) {
  if (!std::isfinite(p.value)) return {WriteError::NOT_FINITE};

  std::unique_lock lock(mutex_);
  Timestamp now = options_.clock();
  Timestamp oldest = now - static_cast<std::int64_t>(options_.retention.raw_days) * kMillisPerDay;
  if (p.ts <= oldest || p.ts >= now + options_.future_skew_ms)
    return {WriteError::OUT_OF_WINDOW};

  Timestamp window = bin_start(p.ts, Resolution::M12);
  if (window + resolution_ms(Resolution::M12) <= frontier_[0])
    return {WriteError::OUT_OF_WINDOW};  // the M12 window was already finalized

  SeriesId id = intern_series(p.key);
  Series& s = *series_[id];

  for (std::size_t slot = 0; slot < kBinResolutions.size(); ++slot) {
    Timestamp start = bin_start(p.ts, kBinResolutions[slot]);
    if (!s.upto_initialized || start < s.aggregated_upto[slot]) s.aggregated_upto[slot] = start;
  }
  s.upto_initialized = true;

  auto pos = std::lower_bound(s.raw.begin(), s.raw.end(), p.ts,
                              [](const auto& entry, Timestamp t) { return entry.first < t; });
  if (pos != s.raw.end() && pos->first == p.ts) {
    if (pos->second == p.value) return {};  // idempotent replay
    return {WriteError::DUPLICATE_TIMESTAMP};
  }
  s.raw.insert(pos, {p.ts, p.value});
  s.pending_raw.push_back({p.ts, p.value});
  ++total_raw_points_;
  return {};
}

std::size_t Store::finalize_m12(Series& s, Timestamp frontier) {
  constexpr int slot = 0;
  Timestamp from = s.aggregated_upto[slot];
  if (from >= frontier) return 0;
  std::size_t created = 0;

  auto it = std::lower_bound(s.raw.begin(), s.raw.end(), from,
                             [](const auto& entry, Timestamp t) { return entry.first < t; });
  const std::int64_t width = resolution_ms(Resolution::M12);
  while (it != s.raw.end() && it->first < frontier) {
    Timestamp window = bin_start(it->first, Resolution::M12);
    Timestamp window_end = window + width;
    AggregateBin bin;
    bin.resolution = Resolution::M12;
    bin.window_start = window;
    for (; it != s.raw.end() && it->first < window_end; ++it) {
      double v = it->second;
      if (bin.count == 0) {
        bin.min = bin.max = v;
      } else {
        bin.min = std::min(bin.min, v);
        bin.max = std::max(bin.max, v);
      }
      ++bin.count;
      bin.sum += v;
    }
    if (s.bins[slot].emplace(window.ms, bin).second) {
      s.pending_bins.push_back(bin);
      ++created;
    }
  }
  s.aggregated_upto[slot] = std::max(s.aggregated_upto[slot], frontier);
  return created;
}

std::size_t Store::finalize_parent(Series& s, Resolution parent, Resolution child,
                                   Timestamp frontier) {
  const int pslot = bin_slot(parent);
  const int cslot = bin_slot(child);
  Timestamp from = s.aggregated_upto[pslot];
  if (from >= frontier) return 0;
  std::size_t created = 0;

  auto& children = s.bins[cslot];
  auto it = children.lower_bound(from.ms);
  while (it != children.end() && it->first < frontier.ms) {
    Timestamp window = bin_start(Timestamp{it->first}, parent);
    Timestamp window_end = window + resolution_ms(parent);
    AggregateBin bin;
    bin.resolution = parent;
    bin.window_start = window;
    for (; it != children.end() && it->first < window_end.ms; ++it) {
      const AggregateBin& c = it->second;
      if (bin.count == 0) {
        bin.min = c.min;
        bin.max = c.max;
      } else {
        bin.min = std::min(bin.min, c.min);
        bin.max = std::max(bin.max, c.max);
      }
      bin.count += c.count;
      bin.sum += c.sum;
    }
    if (s.bins[pslot].emplace(window.ms, bin).second) {
      s.pending_bins.push_back(bin);
      ++created;
    }
  }
  s.aggregated_upto[pslot] = std::max(s.aggregated_upto[pslot], frontier);
  return created;
}

std::size_t Store::downsample_tick(Timestamp now) {
  std::unique_lock lock(mutex_);
  Timestamp graced = now - options_.grace_ms;
  for (std::size_t slot = 0; slot < kBinResolutions.size(); ++slot) {
    if (graced.ms < 0) break;
    Timestamp f = bin_start(graced, kBinResolutions[slot]);
    if (f > frontier_[slot]) frontier_[slot] = f;
  }

  std::size_t created = 0;
  for (auto& series : series_) {
    if (!series) continue;
    created += finalize_m12(*series, frontier_[0]);
    created += finalize_parent(*series, Resolution::H1, Resolution::M12, frontier_[1]);
    created += finalize_parent(*series, Resolution::D1, Resolution::H1, frontier_[2]);
    created += finalize_parent(*series, Resolution::D7, Resolution::D1, frontier_[3]);
    created += finalize_parent(*series, Resolution::D30, Resolution::D1, frontier_[4]);
  }
  return created;
}

RetentionCounts Store::apply_retention(Timestamp now) {
  std::unique_lock lock(mutex_);
  RetentionCounts counts;
  Timestamp raw_cut = now - static_cast<std::int64_t>(options_.retention.raw_days) * kMillisPerDay;
  Timestamp m12_cut = now - static_cast<std::int64_t>(options_.retention.m12_days) * kMillisPerDay;
  Timestamp coarse_cut =
      now - static_cast<std::int64_t>(options_.retention.coarse_days) * kMillisPerDay;

  for (auto& series_ptr : series_) {
    if (!series_ptr) continue;
    Series& s = *series_ptr;
    bool touched = false;

    auto keep_from = std::lower_bound(
        s.raw.begin(), s.raw.end(), raw_cut,
        [](const auto& entry, Timestamp t) { return entry.first < t; });
    std::size_t dropped_raw = static_cast<std::size_t>(keep_from - s.raw.begin());
    if (dropped_raw > 0) {
      s.raw.erase(s.raw.begin(), keep_from);
      total_raw_points_ -= dropped_raw;
      counts.raw_points += dropped_raw;
      touched = true;
    }

    for (std::size_t slot = 0; slot < kBinResolutions.size(); ++slot) {
      Timestamp cut = slot == 0 ? m12_cut : coarse_cut;
      auto& bins = s.bins[slot];
      auto keep = bins.lower_bound(cut.ms);
      std::size_t dropped = 0;
      for (auto it = bins.begin(); it != keep;) {
        it = bins.erase(it);
        ++dropped;
      }
      if (dropped > 0) {
        (slot == 0 ? counts.m12_bins : counts.coarse_bins) += dropped;
        touched = true;
      }
    }

    bool empty = s.raw.empty();
    for (const auto& bins : s.bins) empty = empty && bins.empty();

    if (!options_.dir.empty() && (touched || empty)) {
      fs::path dir = series_dir(s);
      if (empty) {
        std::error_code ec;
        fs::remove_all(dir, ec);
      } else {
        // Rewrite the block files from the surviving in-memory state.
        fs::create_directories(dir);
        {
          std::ofstream meta(dir / "meta.txt", std::ios::trunc);
          meta << s.canonical << "\n" << s.first_seen.ms << "\n";
          s.meta_written = true;
        }
        {
          std::ofstream raw(dir / "raw.blk.tmp", std::ios::binary | std::ios::trunc);
          char buf[kRawRecordSize];
          for (const auto& [ts, value] : s.raw) {
            encode_raw(buf, ts, value);
            raw.write(buf, sizeof(buf));
          }
        }
        fs::rename(dir / "raw.blk.tmp", dir / "raw.blk");
        {
          std::ofstream binsf(dir / "bins.blk.tmp", std::ios::binary | std::ios::trunc);
          char buf[kBinRecordSize];
          for (const auto& bins : s.bins) {
            for (const auto& [start, bin] : bins) {
              (void)start;
              encode_bin(buf, bin);
              binsf.write(buf, sizeof(buf));
            }
          }
        }
        fs::rename(dir / "bins.blk.tmp", dir / "bins.blk");
        s.pending_raw.clear();
        s.pending_bins.clear();
      }
    }

    if (empty) {
      remove_series_postings(s.id);
      series_ptr.reset();
      ++counts.series_removed;
    }
  }
  return counts;
}

CardinalityStats Store::cardinality() const {
  std::shared_lock lock(mutex_);
  CardinalityStats stats;
  for (const auto& s : series_)
    if (s) ++stats.active_series;
  stats.total_points = total_raw_points_;
  stats.inverted_index_entries = posting_count_;
  Timestamp day_ago = options_.clock() - kMillisPerDay;
  for (const auto& [key, seen] : first_seen_)
    if (seen >= day_ago) ++stats.daily_churn;
  return stats;
}

std::vector<SeriesId> Store::series_with_name(const std::string& metric) const {
  std::shared_lock lock(mutex_);
  auto it = name_index_.find(metric);
  return it == name_index_.end() ? std::vector<SeriesId>{} : it->second;
}

std::vector<SeriesId> Store::series_with_tag(const std::string& tag,
                                             const std::string& value) const {
  std::shared_lock lock(mutex_);
  auto it = inverted_index_.find(posting_key(tag, value));
  return it == inverted_index_.end() ? std::vector<SeriesId>{} : it->second;
}

std::optional<SeriesKey> Store::key_of(SeriesId id) const {
  std::shared_lock lock(mutex_);
  if (id >= series_.size() || !series_[id]) return std::nullopt;
  return series_[id]->key;
}

std::vector<std::pair<Timestamp, double>> Store::raw_in(SeriesId id, Timestamp from,
                                                        Timestamp to) const {
  std::shared_lock lock(mutex_);
  std::vector<std::pair<Timestamp, double>> out;
  if (id >= series_.size() || !series_[id]) return out;
  const auto& raw = series_[id]->raw;
  auto it = std::upper_bound(raw.begin(), raw.end(), from,
                             [](Timestamp t, const auto& entry) { return t < entry.first; });
  for (; it != raw.end() && it->first <= to; ++it) out.push_back(*it);
  return out;
}

std::vector<AggregateBin> Store::bins_in(SeriesId id, Resolution res, Timestamp from,
                                         Timestamp to) const {
  std::shared_lock lock(mutex_);
  std::vector<AggregateBin> out;
  int slot = bin_slot(res);
  if (slot < 0 || id >= series_.size() || !series_[id]) return out;
  const auto& bins = series_[id]->bins[slot];
  for (auto it = bins.upper_bound(from.ms); it != bins.end() && it->first <= to.ms; ++it)
    out.push_back(it->second);
  return out;
}

std::vector<SeriesId> Store::all_series() const {
  std::shared_lock lock(mutex_);
  std::vector<SeriesId> out;
  for (const auto& s : series_)
    if (s) out.push_back(s->id);
  return out;
}

std::filesystem::path Store::series_dir(const Series& s) const {
  return options_.dir / "series" / s.dir_name;
}

void Store::flush_series(Series& s) {
  if (options_.dir.empty()) return;
  if (s.pending_raw.empty() && s.pending_bins.empty() && s.meta_written) return;
  fs::path dir = series_dir(s);
  fs::create_directories(dir);
  if (!s.meta_written) {
    std::ofstream meta(dir / "meta.txt", std::ios::trunc);
    meta << s.canonical << "\n" << s.first_seen.ms << "\n";
    s.meta_written = true;
  }
  if (!s.pending_raw.empty()) {
    std::ofstream raw(dir / "raw.blk", std::ios::binary | std::ios::app);
    char buf[kRawRecordSize];
    for (const auto& [ts, value] : s.pending_raw) {
      encode_raw(buf, ts, value);
      raw.write(buf, sizeof(buf));
    }
    s.pending_raw.clear();
  }
  if (!s.pending_bins.empty()) {
    std::ofstream bins(dir / "bins.blk", std::ios::binary | std::ios::app);
    char buf[kBinRecordSize];
    for (const AggregateBin& bin : s.pending_bins) {
      encode_bin(buf, bin);
      bins.write(buf, sizeof(buf));
    }
    s.pending_bins.clear();
  }
}

void Store::checkpoint() {
  if (options_.dir.empty()) return;
  std::unique_lock lock(mutex_);
  for (auto& s : series_)
    if (s) flush_series(*s);

  Json ckpt;
  Json first_seen = Json::object();
  for (const auto& [key, seen] : first_seen_) first_seen[key] = seen.ms;
  ckpt["first_seen"] = std::move(first_seen);
  Json series_list = Json::array();
  for (const auto& s : series_) {
    if (!s) continue;
    Json entry;
    entry["dir"] = s->dir_name;
    entry["key"] = s->canonical;
    entry["tags"] = Json::object();
    for (const auto& [tag, value] : s->key.tags) entry["tags"][tag] = value;
    series_list.push_back(std::move(entry));
  }
  ckpt["series"] = std::move(series_list);

  fs::path tmp = options_.dir / "index.ckpt.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << ckpt.dump();
  }
  fs::rename(tmp, options_.dir / "index.ckpt");
}

void Store::load_from_disk() {
  fs::path ckpt_path = options_.dir / "index.ckpt";
  if (fs::exists(ckpt_path)) {
    std::ifstream in(ckpt_path);
    Json ckpt = Json::parse(in, nullptr, false);
    if (ckpt.is_object() && ckpt.contains("first_seen") && ckpt["first_seen"].is_object()) {
      for (const auto& [key, seen] : ckpt["first_seen"].items())
        if (seen.is_number_integer()) first_seen_[key] = Timestamp{seen.get<std::int64_t>()};
    }
  }

  for (const auto& entry : fs::directory_iterator(options_.dir / "series")) {
    if (!entry.is_directory()) continue;
    fs::path meta_path = entry.path() / "meta.txt";
    if (!fs::exists(meta_path)) continue;
    std::ifstream meta(meta_path);
    std::string canonical, first_seen_line;
    if (!std::getline(meta, canonical) || canonical.empty()) continue;
    std::getline(meta, first_seen_line);

    // Parse the canonical key back into name + tags via the exposition
    // grammar shape: name{k="v",...}.
    SeriesKey key;
    auto brace = canonical.find('{');
    if (brace == std::string::npos) {
      key.name = canonical;
    } else {
      key.name = canonical.substr(0, brace);
      std::size_t pos = brace + 1;
      while (pos < canonical.size() && canonical[pos] != '}') {
        auto eq = canonical.find("=\"", pos);
        if (eq == std::string::npos) break;
        std::string tag = canonical.substr(pos, eq - pos);
        pos = eq + 2;
        std::string value;
        while (pos < canonical.size() && canonical[pos] != '"') {
          if (canonical[pos] == '\\' && pos + 1 < canonical.size()) ++pos;
          value.push_back(canonical[pos++]);
        }
        ++pos;  // closing quote
        key.tags.set(std::move(tag), std::move(value));
        if (pos < canonical.size() && canonical[pos] == ',') ++pos;
      }
    }

    SeriesId id = intern_series(key);
    Series& s = *series_[id];
    s.dir_name = entry.path().filename().string();
    s.meta_written = true;
    if (!first_seen_line.empty()) {
      s.first_seen = Timestamp{std::stoll(first_seen_line)};
      first_seen_[canonical] = s.first_seen;
    }

    fs::path raw_path = entry.path() / "raw.blk";
    if (fs::exists(raw_path)) {
      std::ifstream raw(raw_path, std::ios::binary);
      char buf[kRawRecordSize];
      while (raw.read(buf, sizeof(buf))) {
        std::int64_t ts;
        double value;
        std::memcpy(&ts, buf, 8);
        std::memcpy(&value, buf + 8, 8);
        s.raw.push_back({Timestamp{ts}, value});
        ++total_raw_points_;
      }
      std::sort(s.raw.begin(), s.raw.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
    }

    fs::path bins_path = entry.path() / "bins.blk";
    if (fs::exists(bins_path)) {
      std::ifstream bins(bins_path, std::ios::binary);
      char buf[kBinRecordSize];
      while (bins.read(buf, sizeof(buf))) {
        int slot = buf[0];
        if (slot < 0 || slot > 4) continue;
        AggregateBin bin;
        bin.resolution = kBinResolutions[static_cast<std::size_t>(slot)];
        std::int64_t start;
        std::memcpy(&start, buf + 1, 8);
        bin.window_start = Timestamp{start};
        std::memcpy(&bin.count, buf + 9, 8);
        std::memcpy(&bin.sum, buf + 17, 8);
        std::memcpy(&bin.min, buf + 25, 8);
        std::memcpy(&bin.max, buf + 33, 8);
        s.bins[static_cast<std::size_t>(slot)][start] = bin;
      }
    }
  }

  // A window that was finalized before the restart must stay closed to
  // writes, so restore each frontier to cover every recovered bin. Loaded
  // series keep aggregated_upto at 0: the first tick rescans their whole
  // history and the per-window membership check keeps that idempotent.
  for (const auto& s : series_) {
    if (!s) continue;
    s->upto_initialized = true;
    for (std::size_t slot = 0; slot < kBinResolutions.size(); ++slot) {
      if (s->bins[slot].empty()) continue;
      Timestamp end{s->bins[slot].rbegin()->first +
                    resolution_ms(kBinResolutions[slot])};
      if (end > frontier_[slot]) frontier_[slot] = end;
    }
  }
}

}  // namespace minimon::tsdb
