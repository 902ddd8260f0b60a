#include "minimon/sim.hpp"

namespace minimon::sim {

SpiderSim::SpiderSim(JobSimSpec spec) : spec_(std::move(spec)), rng_(spec_.seed) {
  if (spec_.sites.empty()) spec_.sites = {"T1_US"};
  for (int i = 0; i < spec_.job_count_per_tick; ++i) slots_.push_back(fresh_job());
}

SpiderSim::Job SpiderSim::fresh_job() {
  Job job;
  job.id = next_job_id_++;
  job.site = spec_.sites[rng_() % spec_.sites.size()];
  job.phase = Phase::PENDING;
  job.running_ticks_left = 1 + static_cast<int>(rng_() % 2);
  job.memory_mb = 1000 + static_cast<int>(rng_() % 3000);
  return job;
}

TickOutput SpiderSim::tick() {
  TickOutput out;
  out.at = spec_.base_time + static_cast<std::int64_t>(ticks_) * spec_.tick_interval_ms;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (Job& job : slots_) {
    std::string status;
    bool terminal = false;
    bool failed = false;

    switch (job.phase) {
      case Phase::PENDING:
        job.phase = Phase::RUNNING;
        status = "pending";
        break;
      case Phase::RUNNING: {
        double hours = spec_.tick_interval_ms / static_cast<double>(kMillisPerHour);
        job.wallclock_hours += hours;
        job.cpu_hours += hours * (0.5 + 0.5 * unit(rng_));
        if (--job.running_ticks_left > 0) {
          status = "running";
        } else {
          failed = unit(rng_) < spec_.failure_rate;
          terminal = true;
          status = failed ? "failed" : "completed";
          job.phase = Phase::DONE;
        }
        break;
      }
      case Phase::DONE:
        // replaced below; unreachable mid-tick
        status = "completed";
        break;
    }

    Document doc;
    doc.producer = "spider";
    doc.doc_type = "condor_job";
    doc.timestamp = out.at;
    doc.payload["job_id"] = "job" + std::to_string(job.id);
    doc.payload["site"] = job.site;
    doc.payload["status"] = status;
    doc.payload["retry_index"] = job.retry_index;
    doc.payload["cpu_hours"] = job.cpu_hours;
    doc.payload["wallclock_hours"] = job.wallclock_hours;
    doc.payload["memory_mb"] = job.memory_mb;
    out.documents.push_back(std::move(doc));

    if (terminal) {
      bool retrying = failed && job.retry_index < spec_.retry_max;
      if (!retrying) {
        ExitMessage msg;
        msg.subject = "cms.jobs." + job.site;
        Json payload;
        payload["name"] = "exitCode";
        Json tags;
        tags["site"] = job.site;
        tags["job_id"] = "job" + std::to_string(job.id);
        payload["tags"] = std::move(tags);
        payload["value"] = failed ? 1.0 : 0.0;
        payload["ts"] = out.at.ms;
        msg.payload = std::move(payload);
        out.messages.push_back(std::move(msg));
      }
      if (retrying) {
        // Same job comes back with the next retry index.
        job.phase = Phase::PENDING;
        job.running_ticks_left = 1 + static_cast<int>(rng_() % 2);
        ++job.retry_index;
        job.cpu_hours = 0.0;
        job.wallclock_hours = 0.0;
      } else {
        job = fresh_job();
      }
    }
  }

  ++ticks_;
  return out;
}

ingest::SchemaDef condor_job_schema() {
  ingest::SchemaDef schema;
  schema.producer = "spider";
  schema.doc_type = "condor_job";
  schema.fields = {
      {"job_id", ingest::FieldType::String, true},
      {"site", ingest::FieldType::String, true},
      {"status", ingest::FieldType::String, true},
      {"retry_index", ingest::FieldType::Int, true},
      {"cpu_hours", ingest::FieldType::Float, false},
      {"wallclock_hours", ingest::FieldType::Float, false},
      {"memory_mb", ingest::FieldType::Int, false},
  };
  return schema;
}

ingest::ProducerRegistration condor_job_registration(std::int64_t daily_quota_bytes) {
  ingest::ProducerRegistration reg;
  reg.producer = "spider";
  reg.doc_type = "condor_job";
  reg.schema = condor_job_schema();
  reg.daily_quota_bytes = daily_quota_bytes;
  reg.route.to_docstore = true;
  reg.route.to_tsdb = true;
  reg.route.to_archive = true;
  reg.route.tag_fields = {"site", "status", "job_id"};
  reg.route.value_fields = {"cpu_hours", "wallclock_hours"};
  return reg;
}

}  // namespace minimon::sim
