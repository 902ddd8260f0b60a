#include "minimon/docstore.hpp"

#include <algorithm>
#include <fstream>

namespace minimon::docstore {

namespace fs = std::filesystem;

const char* derived_mode_name(DerivedMode m) {
  switch (m) {
    case DerivedMode::LATEST_BY_TIMESTAMP: return "LATEST_BY_TIMESTAMP";
    case DerivedMode::NUMERIC_SUM: return "NUMERIC_SUM";
  }
  return "?";
}

std::string DocStore::index_name(const std::string& doc_type, Timestamp ts) {
  return doc_type + "-" + format_day(ts);
}

DocStore::DocStore(DocStoreOptions options) : options_(std::move(options)) {
  if (!options_.dir.empty()) {
    fs::create_directories(options_.dir / "indexes");
    fs::create_directories(options_.dir / "derived");
    load_from_disk();
  }
}

DocStore::~DocStore() {
  if (!options_.dir.empty()) checkpoint();
}

DocStore::DailyIndex& DocStore::index_for(const Document& doc) {
  std::string name = index_name(doc.doc_type, doc.timestamp);
  auto it = indexes_.find(name);
  if (it != indexes_.end()) return *it->second;
  auto index = std::make_unique<DailyIndex>();
  index->name = name;
  index->doc_type = doc.doc_type;
  index->day = day_start(doc.timestamp);
  auto [inserted, ok] = indexes_.emplace(name, std::move(index));
  (void)ok;
  return *inserted->second;
}

bool DocStore::index_document(const Document& doc) {
  std::unique_lock lock(mutex_);
  DailyIndex& index = index_for(doc);
  std::string encoded = doc.canonical_encoding();
  std::uint64_t hash = fnv1a64(encoded);

  auto hit = index.by_hash.find(hash);
  if (hit != index.by_hash.end()) {
    for (std::size_t at : hit->second) {
      if (index.docs[at].canonical_encoding() == encoded) return false;  // replayed
    }
  }

  std::uint64_t seq = next_seq_++;
  index.by_hash[hash].push_back(index.docs.size());
  index.docs.push_back(doc);
  index.store_seq.push_back(seq);
  index.bytes += encoded.size();
  ++total_docs_;

  for (auto& [name, state] : derived_) {
    if (state.spec.source_doc_type == doc.doc_type) apply_derived(state, doc, seq, hash);
  }
  persist_document(index, doc);
  return true;
}

void DocStore::apply_derived(DerivedState& state, const Document& doc, std::uint64_t seq,
                             std::uint64_t hash) {
  if (state.folded_hashes.count(hash)) return;
  state.folded_hashes.insert(hash);

  if (!doc.payload.contains(state.spec.key_field)) {
    ++state.skipped;
    return;
  }
  const Json& key_value = doc.payload[state.spec.key_field];
  std::string key = key_value.is_string() ? key_value.get<std::string>() : key_value.dump();

  DerivedEntry& entry = state.entries[key];
  entry.key = key;
  ++entry.doc_count;

  if (state.spec.mode == DerivedMode::LATEST_BY_TIMESTAMP) {
    auto rank = std::make_pair(doc.timestamp.ms, seq);
    auto it = state.latest_rank.find(key);
    if (it == state.latest_rank.end() || rank >= it->second) {
      state.latest_rank[key] = rank;
      entry.latest = doc;
    }
  } else {
    for (const std::string& field : state.spec.value_fields) {
      if (!doc.payload.contains(field) || !doc.payload[field].is_number()) continue;
      entry.sums[field] += doc.payload[field].get<double>();
    }
  }
}

std::vector<Document> DocStore::search(const DocQuery& query) const {
  std::shared_lock lock(mutex_);
  std::size_t limit = std::clamp<std::size_t>(query.limit, 1, 10000);

  // Only daily indexes intersecting the time range are scanned.
  Timestamp from_day = day_start(query.from);
  std::string low = query.doc_type + "-" + format_day(from_day);
  std::string high = query.doc_type + "-" + format_day(query.to);

  struct Hit {
    const Document* doc;
    std::uint64_t seq;
  };
  std::vector<Hit> hits;
  for (auto it = indexes_.lower_bound(low); it != indexes_.end() && it->first <= high; ++it) {
    const DailyIndex& index = *it->second;
    if (index.doc_type != query.doc_type) continue;
    for (std::size_t i = 0; i < index.docs.size(); ++i) {
      const Document& doc = index.docs[i];
      if (doc.timestamp < query.from || doc.timestamp > query.to) continue;
      bool ok = true;
      for (const FieldMatcher& m : query.matchers) {
        if (!m.matches(doc.payload)) {
          ok = false;
          break;
        }
      }
      if (ok) hits.push_back({&doc, index.store_seq[i]});
    }
  }

  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.doc->timestamp != b.doc->timestamp) return a.doc->timestamp > b.doc->timestamp;
    return a.seq > b.seq;  // newest first, later arrival breaking ties
  });
  std::vector<Document> out;
  for (const Hit& hit : hits) {
    if (out.size() >= limit) break;
    out.push_back(*hit.doc);
  }
  return out;
}

bool query_matches(const DocQuery& query, const Document& doc) {
  if (doc.doc_type != query.doc_type) return false;
  if (doc.timestamp < query.from || doc.timestamp > query.to) return false;
  for (const FieldMatcher& m : query.matchers)
    if (!m.matches(doc.payload)) return false;
  return true;
}

std::vector<std::string> DocStore::apply_retention(Timestamp now) {
  std::unique_lock lock(mutex_);
  std::vector<std::string> dropped;
  Timestamp today = day_start(now);

  for (auto it = indexes_.begin(); it != indexes_.end();) {
    const DailyIndex& index = *it->second;
    int retention_days = options_.default_retention_days;
    auto override_it = options_.retention_days_by_type.find(index.doc_type);
    if (override_it != options_.retention_days_by_type.end())
      retention_days = override_it->second;

    std::int64_t age_days = (today - index.day) / kMillisPerDay;
    if (age_days > retention_days) {
      dropped.push_back(index.name);
      total_docs_ -= index.docs.size();
      if (!options_.dir.empty()) {
        std::error_code ec;
        fs::remove_all(options_.dir / "indexes" / index.name, ec);
      }
      it = indexes_.erase(it);
    } else {
      ++it;
    }
  }
  if (!dropped.empty() && !options_.dir.empty()) persist_derived_locked();
  return dropped;
}

void DocStore::register_derived(const DerivedIndexSpec& spec) {
  std::unique_lock lock(mutex_);
  auto it = derived_.find(spec.name);
  if (it != derived_.end()) return;
  DerivedState state;
  state.spec = spec;
  derived_[spec.name] = std::move(state);
  // Fold in anything already stored.
  DerivedState& fresh = derived_[spec.name];
  for (const auto& [name, index] : indexes_) {
    if (index->doc_type != spec.source_doc_type) continue;
    for (std::size_t i = 0; i < index->docs.size(); ++i) {
      const Document& doc = index->docs[i];
      apply_derived(fresh, doc, index->store_seq[i], doc.content_hash());
    }
  }
}

std::vector<DerivedIndexSpec> DocStore::derived_specs() const {
  std::shared_lock lock(mutex_);
  std::vector<DerivedIndexSpec> out;
  for (const auto& [name, state] : derived_) out.push_back(state.spec);
  return out;
}

DocStore::RebuildResult DocStore::rebuild_derived(const std::string& spec_name, Timestamp from,
                                                  Timestamp to) {
  std::unique_lock lock(mutex_);
  auto it = derived_.find(spec_name);
  if (it == derived_.end()) return {};
  DerivedState& state = it->second;
  state.entries.clear();
  state.latest_rank.clear();
  state.folded_hashes.clear();
  state.skipped = 0;

  for (const auto& [name, index] : indexes_) {
    if (index->doc_type != state.spec.source_doc_type) continue;
    for (std::size_t i = 0; i < index->docs.size(); ++i) {
      const Document& doc = index->docs[i];
      if (doc.timestamp < from || doc.timestamp > to) continue;
      apply_derived(state, doc, index->store_seq[i], doc.content_hash());
    }
  }
  return {static_cast<std::uint64_t>(state.entries.size()), state.skipped};
}

std::vector<DerivedEntry> DocStore::derived_entries(const std::string& spec_name) const {
  std::shared_lock lock(mutex_);
  std::vector<DerivedEntry> out;
  auto it = derived_.find(spec_name);
  if (it == derived_.end()) return out;
  for (const auto& [key, entry] : it->second.entries) out.push_back(entry);
  return out;
}

std::uint64_t DocStore::derived_skipped(const std::string& spec_name) const {
  std::shared_lock lock(mutex_);
  auto it = derived_.find(spec_name);
  return it == derived_.end() ? 0 : it->second.skipped;
}

std::vector<IndexInfo> DocStore::indexes() const {
  std::shared_lock lock(mutex_);
  std::vector<IndexInfo> out;
  for (const auto& [name, index] : indexes_)
    out.push_back({name, index->docs.size(), index->bytes});
  return out;
}

std::uint64_t DocStore::total_documents() const {
  std::shared_lock lock(mutex_);
  return total_docs_;
}

void DocStore::persist_document(const DailyIndex& index, const Document& doc) {
  if (options_.dir.empty()) return;
  fs::path dir = options_.dir / "indexes" / index.name;
  fs::create_directories(dir);
  std::ofstream out(dir / "docs.log", std::ios::app);
  out << doc.canonical_encoding() << "\n";
}

void DocStore::persist_derived_locked() const {
  for (const auto& [name, state] : derived_) {
    Json j;
    Json spec;
    spec["name"] = state.spec.name;
    spec["source_doc_type"] = state.spec.source_doc_type;
    spec["key_field"] = state.spec.key_field;
    spec["mode"] = derived_mode_name(state.spec.mode);
    spec["value_fields"] = state.spec.value_fields;
    j["spec"] = std::move(spec);
    j["skipped"] = state.skipped;
    Json entries = Json::array();
    for (const auto& [key, entry] : state.entries) {
      Json e;
      e["key"] = key;
      e["doc_count"] = entry.doc_count;
      if (state.spec.mode == DerivedMode::LATEST_BY_TIMESTAMP) {
        e["latest"] = entry.latest.to_json();
        auto rank = state.latest_rank.find(key);
        if (rank != state.latest_rank.end()) {
          e["rank_ts"] = rank->second.first;
          e["rank_seq"] = rank->second.second;
        }
      } else {
        Json sums = Json::object();
        for (const auto& [field, sum] : entry.sums) sums[field] = sum;
        e["sums"] = std::move(sums);
      }
      entries.push_back(std::move(e));
    }
    j["entries"] = std::move(entries);
    Json folded = Json::array();
    for (std::uint64_t h : state.folded_hashes) folded.push_back(h);
    j["folded"] = std::move(folded);

    fs::path path = options_.dir / "derived" / (name + ".json");
    fs::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << j.dump();
    }
    fs::rename(tmp, path);
  }
}

void DocStore::checkpoint() {
  std::unique_lock lock(mutex_);
  if (options_.dir.empty()) return;
  persist_derived_locked();
  // Field-value sidecar per index: inspectable and rebuildable by rescan.
  for (const auto& [name, index] : indexes_) {
    Json sidecar = Json::object();
    for (std::size_t i = 0; i < index->docs.size(); ++i) {
      for (const auto& [field, value] : index->docs[i].payload.items()) {
        if (!value.is_object()) sidecar[field][value.dump()].push_back(i);
      }
    }
    fs::path path = options_.dir / "indexes" / name / "fields.idx";
    fs::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << sidecar.dump();
    }
    fs::rename(tmp, path);
  }
}

void DocStore::load_from_disk() {
  // Derived snapshots first, then replay any docs their folded sets miss.
  for (const auto& entry : fs::directory_iterator(options_.dir / "derived")) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    Json j = Json::parse(in, nullptr, false);
    if (!j.is_object() || !j.contains("spec")) continue;
    DerivedState state;
    const Json& spec = j["spec"];
    state.spec.name = spec.value("name", "");
    state.spec.source_doc_type = spec.value("source_doc_type", "");
    state.spec.key_field = spec.value("key_field", "");
    state.spec.mode = spec.value("mode", "") == "NUMERIC_SUM" ? DerivedMode::NUMERIC_SUM
                                                              : DerivedMode::LATEST_BY_TIMESTAMP;
    if (spec.contains("value_fields"))
      state.spec.value_fields = spec["value_fields"].get<std::vector<std::string>>();
    state.skipped = j.value("skipped", 0ull);
    if (j.contains("entries")) {
      for (const Json& e : j["entries"]) {
        DerivedEntry parsed;
        parsed.key = e.value("key", "");
        parsed.doc_count = e.value("doc_count", 0ull);
        if (e.contains("latest")) {
          auto doc = Document::from_json(e["latest"]);
          if (doc.has_value()) parsed.latest = std::move(*doc);
        }
        if (e.contains("sums")) {
          for (const auto& [field, sum] : e["sums"].items())
            parsed.sums[field] = sum.get<double>();
        }
        if (e.contains("rank_ts"))
          state.latest_rank[parsed.key] = {e["rank_ts"].get<std::int64_t>(),
                                           e.value("rank_seq", 0ull)};
        state.entries[parsed.key] = std::move(parsed);
      }
    }
    if (j.contains("folded")) {
      for (const Json& h : j["folded"]) state.folded_hashes.insert(h.get<std::uint64_t>());
    }
    if (!state.spec.name.empty()) derived_[state.spec.name] = std::move(state);
  }

  std::vector<fs::path> index_dirs;
  for (const auto& entry : fs::directory_iterator(options_.dir / "indexes")) {
    if (entry.is_directory()) index_dirs.push_back(entry.path());
  }
  std::sort(index_dirs.begin(), index_dirs.end());

  for (const fs::path& dir : index_dirs) {
    fs::path log = dir / "docs.log";
    if (!fs::exists(log)) continue;
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      Json j = Json::parse(line, nullptr, false);
      auto doc = Document::from_json(j);
      if (!doc.has_value()) continue;

      DailyIndex& index = index_for(*doc);
      std::uint64_t hash = fnv1a64(line);
      std::uint64_t seq = next_seq_++;
      index.by_hash[hash].push_back(index.docs.size());
      index.docs.push_back(*doc);
      index.store_seq.push_back(seq);
      index.bytes += line.size();
      ++total_docs_;
      for (auto& [name, state] : derived_) {
        if (state.spec.source_doc_type == doc->doc_type) apply_derived(state, *doc, seq, hash);
      }
    }
  }
}

}  // namespace minimon::docstore
