#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "minimon/archive.hpp"
#include "minimon/bus.hpp"
#include "minimon/core.hpp"
#include "minimon/docstore.hpp"
#include "minimon/exposition.hpp"
#include "minimon/pubsub.hpp"
#include "minimon/query.hpp"
#include "minimon/tsdb.hpp"

namespace py = pybind11;
using namespace minimon;

namespace {

Json json_from_pyobject(const py::object& obj) {
  py::module_ json_mod = py::module_::import("json");
  std::string dumped = py::cast<std::string>(json_mod.attr("dumps")(obj));
  return Json::parse(dumped);
}

py::object json_to_pyobject(const Json& j) {
  py::module_ json_mod = py::module_::import("json");
  return json_mod.attr("loads")(j.dump());
}

TagSet tags_from_dict(const py::dict& d) {
  TagSet tags;
  for (const auto& item : d)
    tags.set(py::cast<std::string>(item.first), py::cast<std::string>(item.second));
  return tags;
}

py::dict tags_to_dict(const TagSet& tags) {
  py::dict out;
  for (const auto& [k, v] : tags.pairs()) out[py::str(k)] = v;
  return out;
}

Document doc_from_args(const std::string& producer, const std::string& doc_type,
                       std::int64_t timestamp_ms, const py::object& payload) {
  Document doc;
  doc.producer = producer;
  doc.doc_type = doc_type;
  doc.timestamp = Timestamp{timestamp_ms};
  doc.payload = json_from_pyobject(payload);
  return doc;
}

}  // namespace

PYBIND11_MODULE(pyminimon, m) {
  m.doc() = "Desk-scale monitoring pipeline: core operations";

  m.def("validate_name", [](const std::string& s) { return validate_name(s); });
  m.def("canonical_series_key", [](const std::string& name, const py::dict& tags) {
    return canonical_series_key(name, tags_from_dict(tags));
  });
  m.def("bin_start", [](std::int64_t ts_ms, const std::string& res) {
    auto resolution = resolution_from_name(res);
    if (!resolution.has_value()) throw std::invalid_argument("unknown resolution " + res);
    return bin_start(Timestamp{ts_ms}, *resolution).ms;
  });
  m.def("format_iso8601", [](std::int64_t ts_ms) { return format_iso8601(Timestamp{ts_ms}); });
  m.def("parse_iso8601", [](const std::string& text) -> py::object {
    auto ts = parse_iso8601(text);
    if (!ts.has_value()) return py::none();
    return py::int_(ts->ms);
  });

  m.def("parse_exposition", [](const std::string& body) {
    auto result = exposition::parse(body);
    if (!result.ok())
      throw std::invalid_argument("line " + std::to_string(result.error->line) + ": " +
                                  result.error->detail);
    py::list out;
    for (const auto& sample : result.samples) {
      py::dict d;
      d["name"] = sample.key.name;
      d["tags"] = tags_to_dict(sample.key.tags);
      d["value"] = sample.value;
      d["ts"] = sample.ts.has_value() ? py::object(py::int_(sample.ts->ms)) : py::none();
      out.append(std::move(d));
    }
    return out;
  });
  m.def("render_exposition", [](const py::list& samples) {
    std::vector<exposition::Sample> parsed;
    for (const auto& item : samples) {
      py::dict d = py::cast<py::dict>(item);
      exposition::Sample sample;
      sample.key.name = py::cast<std::string>(d["name"]);
      if (d.contains("tags")) sample.key.tags = tags_from_dict(py::cast<py::dict>(d["tags"]));
      sample.value = py::cast<double>(d["value"]);
      if (d.contains("ts") && !d["ts"].is_none())
        sample.ts = Timestamp{py::cast<std::int64_t>(d["ts"])};
      parsed.push_back(std::move(sample));
    }
    return exposition::render(parsed);
  });

  m.def("match_subject", [](const std::string& pattern, const std::string& subject) {
    return pubsub::match_subject(pattern, subject);
  });

  m.def("parse_query", [](const std::string& text) {
    auto outcome = query::parse_query(text);
    if (!outcome.ok()) throw std::invalid_argument(outcome.error->to_string());
    return outcome.ast->canonical();
  });

  py::class_<tsdb::Store>(m, "Store")
      .def(py::init([](std::int64_t clock_ms) {
             tsdb::StoreOptions options;
             auto shared = std::make_shared<std::int64_t>(clock_ms);
             options.clock = [shared] { return Timestamp{*shared}; };
             auto store = std::make_unique<tsdb::Store>(std::move(options));
             return store;
           }),
           py::arg("clock_ms") = 1577836800000ll)
      .def("write",
           [](tsdb::Store& store, const std::string& name, const py::dict& tags, double value,
              std::int64_t ts_ms) {
             tsdb::MetricPoint point{SeriesKey{name, tags_from_dict(tags)}, value,
                                     Timestamp{ts_ms}};
             auto result = store.write(point);
             return std::string(tsdb::write_error_name(result.error));
           })
      .def("downsample_tick",
           [](tsdb::Store& store, std::int64_t now_ms) {
             return store.downsample_tick(Timestamp{now_ms});
           })
      .def("cardinality",
           [](const tsdb::Store& store) {
             auto stats = store.cardinality();
             py::dict out;
             out["active_series"] = stats.active_series;
             out["total_points"] = stats.total_points;
             out["inverted_index_entries"] = stats.inverted_index_entries;
             out["daily_churn"] = stats.daily_churn;
             return out;
           })
      .def("eval", [](const tsdb::Store& store, const std::string& text, std::int64_t from_ms,
                      std::int64_t to_ms, std::int64_t step_ms) {
        auto outcome = query::parse_query(text);
        if (!outcome.ok()) throw std::invalid_argument(outcome.error->to_string());
        auto matrix =
            query::eval(store, *outcome.ast, Timestamp{from_ms}, Timestamp{to_ms}, step_ms);
        py::list out;
        for (const auto& series : matrix) {
          py::dict sj;
          sj["key"] = series.key.canonical();
          py::list points;
          for (const auto& [ts, value] : series.points)
            points.append(py::make_tuple(ts.ms, value));
          sj["points"] = std::move(points);
          out.append(std::move(sj));
        }
        return out;
      });

  py::class_<docstore::DocStore>(m, "DocStore")
      .def(py::init([]() { return std::make_unique<docstore::DocStore>(); }))
      .def("index_document",
           [](docstore::DocStore& store, const std::string& producer, const std::string& doc_type,
              std::int64_t timestamp_ms, const py::object& payload) {
             return store.index_document(doc_from_args(producer, doc_type, timestamp_ms, payload));
           })
      .def("search",
           [](const docstore::DocStore& store, const std::string& doc_type, std::int64_t from_ms,
              std::int64_t to_ms, std::size_t limit) {
             docstore::DocQuery query;
             query.doc_type = doc_type;
             query.from = Timestamp{from_ms};
             query.to = Timestamp{to_ms};
             query.limit = limit;
             py::list out;
             for (const Document& doc : store.search(query))
               out.append(json_to_pyobject(doc.to_json()));
             return out;
           },
           py::arg("doc_type"), py::arg("from_ms"), py::arg("to_ms"), py::arg("limit") = 100)
      .def("indexes", [](const docstore::DocStore& store) {
        py::list out;
        for (const auto& info : store.indexes()) {
          py::dict d;
          d["name"] = info.name;
          d["docs"] = info.doc_count;
          d["bytes"] = info.bytes;
          out.append(std::move(d));
        }
        return out;
      });

  py::class_<bus::Bus>(m, "Bus")
      .def(py::init([](const std::string& dir) {
        bus::BusOptions options;
        options.fsync_interval_ms = 0;  // synchronous, keeps smoke tests simple
        return std::make_unique<bus::Bus>(dir, options);
      }))
      .def("publish",
           [](bus::Bus& b, const std::string& topic, const std::string& payload) {
             return b.publish(topic, payload);
           })
      .def("poll",
           [](bus::Bus& b, const std::string& group, const std::string& topic, std::size_t max) {
             py::list out;
             for (const auto& record : b.poll(group, topic, max))
               out.append(py::make_tuple(record.offset, py::bytes(record.payload)));
             return out;
           })
      .def("commit", [](bus::Bus& b, const std::string& group, const std::string& topic,
                        std::uint64_t offset) { b.commit(group, topic, offset); });
}
