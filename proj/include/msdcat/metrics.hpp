#pragma once

// Detectability measurement at desk scale.
//
// External: a probe responder stands in for the attacker-facing service on
// the compromised host. The harness times a fixed probe command n times at
// a fixed interval, under a baseline and under each toolset scenario, and
// asks whether the toolset shifts the mean by more than one baseline sigma.
//
// Internal: I/O, CPU and memory counters read from /proc for a process.

#include "msdcat/console.hpp"
#include "msdcat/implant.hpp"
#include "msdcat/payload_host.hpp"
#include "msdcat/transport.hpp"

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

namespace msdcat::metrics {

enum class Scenario : std::uint8_t {
  Baseline,
  ToolsetIdle,
  ToolsetDirProbe,
  ToolsetFileTransfer,
  ToolsetBlockingPayload,
};

const char* to_string(Scenario s);
/// Throws std::invalid_argument for an unknown name.
Scenario parse_scenario(std::string_view name);

struct TimingSample {
  std::string scenario_id;
  std::uint32_t iteration = 0;
  std::chrono::microseconds rtt{};

  friend bool operator==(const TimingSample&, const TimingSample&) = default;
};

/// All durations in milliseconds.
struct ScenarioReport {
  std::string scenario_id;
  std::size_t n = 0;
  double mean = 0;
  double min = 0;
  double max = 0;
  double stddev = 0;  // sample (n - 1) standard deviation
  double p50 = 0;
  double p95 = 0;
  std::string probe;
  std::chrono::milliseconds interval{};
};

/// Nearest-rank percentile of an ascending-sorted, non-empty range.
double percentile_sorted(std::span<const double> sorted, double pct);

ScenarioReport summarize(std::string scenario_id, std::span<const TimingSample> samples);

/// CSV header "scenario_id,iteration,rtt_us".
void write_csv(std::ostream& out, std::span<const TimingSample> samples);
void write_csv(const std::filesystem::path& path, std::span<const TimingSample> samples);
/// Throws Error{BadCsv}.
std::vector<TimingSample> read_csv(std::istream& in);
std::vector<TimingSample> read_csv(const std::filesystem::path& path);

enum class Verdict : std::uint8_t { WithinOneSigma, Distinguishable };

const char* to_string(Verdict v);

/// WithinOneSigma iff |mean_b - mean_a| <= stddev_a. Reports must share probe
/// and interval (empty probe / zero interval match anything); otherwise
/// throws Error{IncompatibleScenarios}.
Verdict compare_reports(const ScenarioReport& baseline, const ScenarioReport& candidate);

/// Plain TCP service: reads one command line, runs it, returns its output
/// and closes. Requests are served under a shared "target" lock; holding
/// the lock exclusively models a payload that suspends the host process.
class ProbeResponder {
 public:
  ProbeResponder(std::filesystem::path working_dir, std::string host = "127.0.0.1",
                 std::uint16_t port = 0);
  ~ProbeResponder();

  ProbeResponder(const ProbeResponder&) = delete;
  ProbeResponder& operator=(const ProbeResponder&) = delete;

  std::uint16_t port() const { return port_; }
  std::string endpoint() const;
  std::uint64_t served() const { return served_.load(); }

  /// Blocks request handling while the returned lock is held.
  std::unique_lock<std::shared_mutex> hold_target() { return std::unique_lock(target_); }

  void stop();

 private:
  void accept_loop();
  void serve(int fd);

  std::filesystem::path working_dir_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> served_{0};
  std::shared_mutex target_;
  std::thread acceptor_;
};

/// Runs `command_line` to completion in `working_dir`, capturing stdout and stderr.
std::string run_and_capture(const std::string& command_line,
                            const std::filesystem::path& working_dir);

struct ExperimentConfig {
  std::size_t n = 100;
  std::chrono::milliseconds interval{3000};
  std::string probe = "ls -la";
  Scenario scenario = Scenario::Baseline;
  std::string responder;  // tcp://host:port
  std::size_t warmup = 3;
};

struct ExperimentResult {
  ScenarioReport report;
  std::vector<TimingSample> samples;
};

/// Issues the probe n times, strictly serially, at the configured interval.
/// Throws Error{ResponderUnreachable}.
ExperimentResult run_external_experiment(const ExperimentConfig& cfg);

/// Builds a deterministic directory tree for the default probe.
void make_fixture_tree(const std::filesystem::path& root);

struct RigOptions {
  std::filesystem::path work_dir;
  std::chrono::milliseconds poll_interval{500};
  std::chrono::milliseconds delay{40};
  std::chrono::milliseconds margin{20};
  /// Cadence of analyst activity in the dir-probe and file-transfer scenarios.
  std::chrono::milliseconds activity_interval{3000};
  std::string activity_command = "ls -la";
  std::size_t transfer_bytes = 1u << 20;
  /// Blocking payload: the target lock is held for `block_hold` out of every
  /// `block_hold + block_release`.
  std::chrono::milliseconds block_hold{150};
  std::chrono::milliseconds block_release{50};
};

/// Background activity for one scenario, running in this process beside the
/// responder: an emulator and console, an implant polling over loopback, and
/// a driver thread issuing the scenario's analyst work.
class ScenarioRig {
 public:
  ScenarioRig(Scenario scenario, ProbeResponder& responder, RigOptions options);
  ~ScenarioRig();

  ScenarioRig(const ScenarioRig&) = delete;
  ScenarioRig& operator=(const ScenarioRig&) = delete;

  Scenario scenario() const { return scenario_; }
  /// Analyst operations completed by the driver so far.
  std::uint64_t activities() const { return activities_.load(); }
  /// Null in the baseline scenario.
  Console* console() { return console_.get(); }
  /// True if the driver stopped early on a channel error.
  bool driver_failed() const { return driver_failed_.load(); }

 private:
  void drive(std::stop_token stop);
  void drive_scenario(std::stop_token stop);

  Scenario scenario_;
  ProbeResponder& responder_;
  RigOptions options_;
  std::atomic<std::uint64_t> activities_{0};
  std::atomic<bool> driver_failed_{false};
  std::unique_ptr<PayloadHost> payloads_;
  std::shared_ptr<Emulator> emulator_;
  std::unique_ptr<Console> console_;
  std::unique_ptr<Implant> implant_;
  std::jthread implant_thread_;
  std::jthread driver_;
};

struct InternalCounters {
  std::uint64_t io_read_ops = 0;
  std::uint64_t io_write_ops = 0;
  std::uint64_t io_read_bytes = 0;
  std::uint64_t io_write_bytes = 0;
  std::uint64_t io_bytes = 0;  // read + write
  std::chrono::microseconds cpu_time_consumed{};
  std::uint64_t resident_bytes = 0;
  std::int64_t resident_memory_delta = 0;  // set by delta()
};

/// Reads /proc/<pid>/{io,stat,statm}; pid 0 means this process.
InternalCounters sample_internal_counters(int pid = 0);

/// later - earlier, with resident_memory_delta filled in.
InternalCounters delta(const InternalCounters& earlier, const InternalCounters& later);

}  // namespace msdcat::metrics
