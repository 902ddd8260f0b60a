#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "minimon/core.hpp"
#include "minimon/ingest.hpp"

namespace minimon::sim {

/// Deterministic synthetic HTCondor-style job producer. One document per
/// job slot per tick; terminal jobs publish an exit message on
/// `cms.jobs.<site>`. The whole emission sequence is a pure function of
/// (spec, tick count).
struct JobSimSpec {
  std::vector<std::string> sites = {"T1_US", "T2_CH", "T2_DE"};
  int job_count_per_tick = 10;
  std::int64_t tick_interval_ms = 12 * kMillisPerMinute;
  double failure_rate = 0.2;
  int retry_max = 2;
  std::uint64_t seed = 42;
  Timestamp base_time{1577836800000};  // 2020-01-01T00:00:00Z
};

struct ExitMessage {
  std::string subject;  // cms.jobs.<site>
  Json payload;         // {"name":"exitCode","tags":{...},"value":...,"ts":...}
};

struct TickOutput {
  Timestamp at;
  std::vector<Document> documents;  // exactly job_count_per_tick of them
  std::vector<ExitMessage> messages;
};

class SpiderSim {
 public:
  explicit SpiderSim(JobSimSpec spec);

  TickOutput tick();
  int ticks_done() const { return ticks_; }

 private:
  enum class Phase { PENDING, RUNNING, DONE };

  struct Job {
    std::uint64_t id;
    std::string site;
    Phase phase = Phase::PENDING;
    int running_ticks_left = 0;
    int retry_index = 0;
    double cpu_hours = 0.0;
    double wallclock_hours = 0.0;
    int memory_mb = 0;
  };

  Job fresh_job();

  JobSimSpec spec_;
  std::mt19937_64 rng_;
  std::vector<Job> slots_;
  std::uint64_t next_job_id_ = 1;
  int ticks_ = 0;
};

/// The synthetic schema the simulator emits (job_id, site, status,
/// retry_index, cpu_hours, wallclock_hours, memory_mb) and the matching
/// producer registration routing cpu_hours/wallclock_hours to the tsdb
/// tagged by site, status and job_id.
ingest::SchemaDef condor_job_schema();
ingest::ProducerRegistration condor_job_registration(std::int64_t daily_quota_bytes = 64 * 1024 *
                                                                                      1024);

}  // namespace minimon::sim
