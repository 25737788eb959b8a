#include "msdcat/metrics.hpp"

#include "msdcat/error.hpp"
#include "net.hpp"

#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace msdcat::metrics {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::pair<Scenario, std::string_view>, 5> kScenarioNames{{
    {Scenario::Baseline, "baseline"},
    {Scenario::ToolsetIdle, "toolset_idle"},
    {Scenario::ToolsetDirProbe, "toolset_dir_probe"},
    {Scenario::ToolsetFileTransfer, "toolset_file_transfer"},
    {Scenario::ToolsetBlockingPayload, "toolset_blocking_payload"},
}};

double to_ms(std::chrono::microseconds us) { return static_cast<double>(us.count()) / 1000.0; }

}  // namespace

const char* to_string(Scenario s) {
  for (const auto& [value, name] : kScenarioNames) {
    if (value == s) {
      return name.data();
    }
  }
  return "?";
}

Scenario parse_scenario(std::string_view name) {
  for (const auto& [value, n] : kScenarioNames) {
    if (n == name) {
      return value;
    }
  }
  throw std::invalid_argument("unknown scenario: " + std::string(name));
}

const char* to_string(Verdict v) {
  return v == Verdict::WithinOneSigma ? "WithinOneSigma" : "Distinguishable";
}

double percentile_sorted(std::span<const double> sorted, double pct) {
  if (sorted.empty()) {
    return 0.0;
  }
  const double rank = std::ceil(pct / 100.0 * static_cast<double>(sorted.size()));
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, double(sorted.size()))) - 1;
  return sorted[idx];
}

ScenarioReport summarize(std::string scenario_id, std::span<const TimingSample> samples) {
  ScenarioReport r;
  r.scenario_id = std::move(scenario_id);
  r.n = samples.size();
  if (samples.empty()) {
    return r;
  }
  std::vector<double> ms;
  ms.reserve(samples.size());
  for (const auto& s : samples) {
    ms.push_back(to_ms(s.rtt));
  }
  std::sort(ms.begin(), ms.end());
  r.min = ms.front();
  r.max = ms.back();
  r.mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  if (ms.size() > 1) {
    double ss = 0.0;
    for (double x : ms) {
      ss += (x - r.mean) * (x - r.mean);
    }
    r.stddev = std::sqrt(ss / static_cast<double>(ms.size() - 1));
  }
  r.p50 = percentile_sorted(ms, 50.0);
  r.p95 = percentile_sorted(ms, 95.0);
  return r;
}

void write_csv(std::ostream& out, std::span<const TimingSample> samples) {
  out << "scenario_id,iteration,rtt_us\n";
  for (const auto& s : samples) {
    out << s.scenario_id << ',' << s.iteration << ',' << s.rtt.count() << '\n';
  }
}

void write_csv(const fs::path& path, std::span<const TimingSample> samples) {
  std::ofstream out(path);
  if (!out) {
    throw Error(ErrorCode::BadCsv, "cannot write " + path.string());
  }
  write_csv(out, samples);
}

std::vector<TimingSample> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("scenario_id,iteration,rtt_us", 0) != 0) {
    throw Error(ErrorCode::BadCsv, "missing header");
  }
  std::vector<TimingSample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos) {
      throw Error(ErrorCode::BadCsv, "line " + std::to_string(lineno));
    }
    TimingSample s;
    s.scenario_id = line.substr(0, c1);
    try {
      std::size_t used = 0;
      const auto iter_text = line.substr(c1 + 1, c2 - c1 - 1);
      s.iteration = static_cast<std::uint32_t>(std::stoul(iter_text, &used));
      if (used != iter_text.size()) throw std::invalid_argument("iteration");
      const auto rtt_text = line.substr(c2 + 1);
      s.rtt = std::chrono::microseconds(std::stoll(rtt_text, &used));
      if (used != rtt_text.size()) throw std::invalid_argument("rtt");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::BadCsv, "line " + std::to_string(lineno));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TimingSample> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::BadCsv, "cannot read " + path.string());
  }
  return read_csv(in);
}

Verdict compare_reports(const ScenarioReport& baseline, const ScenarioReport& candidate) {
  const bool probe_ok =
      baseline.probe.empty() || candidate.probe.empty() || baseline.probe == candidate.probe;
  const bool interval_ok = baseline.interval.count() == 0 || candidate.interval.count() == 0 ||
                           baseline.interval == candidate.interval;
  if (!probe_ok || !interval_ok) {
    throw Error(ErrorCode::IncompatibleScenarios,
                baseline.scenario_id + " vs " + candidate.scenario_id);
  }
  return std::abs(candidate.mean - baseline.mean) <= baseline.stddev ? Verdict::WithinOneSigma
                                                                     : Verdict::Distinguishable;
}

std::string run_and_capture(const std::string& command_line, const fs::path& working_dir) {
  PayloadProcess proc(0, command_line, working_dir);
  proc.close_stdin();
  std::string out;
  for (;;) {
    proc.wait_readable(std::chrono::seconds(1));
    auto chunk = proc.drain_stdout(SIZE_MAX);
    out.append(chunk.bytes.begin(), chunk.bytes.end());
    if (chunk.end_of_stream) {
      break;
    }
  }
  proc.wait_exit(std::chrono::seconds(5));
  return out;
}

ProbeResponder::ProbeResponder(fs::path working_dir, std::string host, std::uint16_t port)
    : working_dir_(std::move(working_dir)) {
  listen_fd_ = net::listen_tcp(host, port, &port_);
  if (listen_fd_ < 0) {
    throw Error(ErrorCode::BadEndpoint, "probe responder cannot listen: " +
                                            std::string(std::strerror(errno)));
  }
  acceptor_ = std::thread([this] { accept_loop(); });
}

ProbeResponder::~ProbeResponder() { stop(); }

std::string ProbeResponder::endpoint() const {
  return "tcp://127.0.0.1:" + std::to_string(port_);
}

void ProbeResponder::stop() {
  if (stopping_.exchange(true)) {
    return;
  }
  ::shutdown(listen_fd_, SHUT_RDWR);
  if (acceptor_.joinable()) {
    acceptor_.join();
  }
  ::close(listen_fd_);
}

void ProbeResponder::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) {
        continue;
      }
      return;
    }
    // One probe at a time, as the measurement is strictly serial.
    serve(fd);
  }
}

void ProbeResponder::serve(int fd) {
  net::UniqueFd conn(fd);
  net::set_nodelay(fd);
  std::string command;
  char c = 0;
  while (command.size() < 4096) {
    const ssize_t n = ::recv(fd, &c, 1, 0);
    if (n <= 0 || c == '\n') {
      break;
    }
    command += c;
  }
  std::string output;
  {
    std::shared_lock lock(target_);
    try {
      output = run_and_capture(command, working_dir_);
    } catch (const Error& e) {
      output = e.what();
    }
  }
  net::write_all(fd, as_bytes(output));
  ++served_;
}

ExperimentResult run_external_experiment(const ExperimentConfig& cfg) {
  const auto addr = parse_tcp_endpoint(cfg.responder);
  auto probe_once = [&]() -> std::chrono::microseconds {
    const auto start = Clock::now();
    net::UniqueFd fd(net::connect_tcp(addr.host, addr.port));
    if (!fd) {
      throw Error(ErrorCode::ResponderUnreachable, cfg.responder);
    }
    const std::string request = cfg.probe + "\n";
    if (net::write_all(fd.get(), as_bytes(request)) != net::IoResult::Ok) {
      throw Error(ErrorCode::ResponderUnreachable, cfg.responder);
    }
    std::array<std::uint8_t, 4096> buf{};
    for (;;) {
      const ssize_t n = ::recv(fd.get(), buf.data(), buf.size(), 0);
      if (n < 0 && errno == EINTR) {
        continue;
      }
      if (n <= 0) {
        break;
      }
    }
    return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - start);
  };

  for (std::size_t i = 0; i < cfg.warmup; ++i) {
    probe_once();
  }
  ExperimentResult result;
  const std::string id = to_string(cfg.scenario);
  const auto origin = Clock::now();
  for (std::size_t i = 0; i < cfg.n; ++i) {
    std::this_thread::sleep_until(origin + cfg.interval * static_cast<long>(i));
    auto rtt = probe_once();
    result.samples.push_back({id, static_cast<std::uint32_t>(i), std::max(rtt, 1us)});
  }
  result.report = summarize(id, result.samples);
  result.report.probe = cfg.probe;
  result.report.interval = cfg.interval;
  return result;
}

void make_fixture_tree(const fs::path& root) {
  fs::create_directories(root);
  for (int d = 0; d < 4; ++d) {
    const auto dir = root / ("dir" + std::to_string(d));
    fs::create_directories(dir);
    for (int f = 0; f < 8; ++f) {
      std::ofstream out(dir / ("file" + std::to_string(f) + ".dat"), std::ios::binary);
      out << std::string(static_cast<std::size_t>(64 * (d + 1) + f), static_cast<char>('a' + f));
    }
  }
}

ScenarioRig::ScenarioRig(Scenario scenario, ProbeResponder& responder, RigOptions options)
    : scenario_(scenario), responder_(responder), options_(std::move(options)) {
  if (scenario_ == Scenario::Baseline) {
    return;
  }
  const auto drop = options_.work_dir / "drop";
  fs::create_directories(drop);
  payloads_ = std::make_unique<PayloadHost>(drop);
  PollConfig poll;
  poll.delay = options_.delay;
  poll.poll_interval = options_.poll_interval;
  poll.detect_margin = options_.margin;
  emulator_ = std::make_shared<Emulator>(1u << 16, poll);
  console_ = std::make_unique<Console>(emulator_);
  ChannelConfig channel;
  channel.poll_interval = options_.poll_interval;
  channel.detect_margin = options_.margin;
  implant_ = std::make_unique<Implant>(connect("loopback", emulator_), *payloads_, channel);
  implant_thread_ = std::jthread([this](std::stop_token stop) { implant_->run(stop); });
  driver_ = std::jthread([this](std::stop_token stop) { drive(stop); });
}

ScenarioRig::~ScenarioRig() {
  driver_ = {};
  implant_thread_ = {};
  if (emulator_) {
    emulator_->shutdown();
  }
}

void ScenarioRig::drive(std::stop_token stop) {
  try {
    drive_scenario(stop);
  } catch (const Error&) {
    // Channel trouble ends the background activity; the probe carries on.
    driver_failed_ = true;
  }
}

void ScenarioRig::drive_scenario(std::stop_token stop) {
  auto pause = [&](Duration d) {
    std::mutex m;
    std::condition_variable_any cv;
    std::unique_lock lock(m);
    cv.wait_for(lock, stop, d, [] { return false; });
    return !stop.stop_requested();
  };
  while (!console_->implant_alive()) {
    if (!pause(10ms)) {
      return;
    }
  }
  switch (scenario_) {
    case Scenario::Baseline:
    case Scenario::ToolsetIdle:
      return;
    case Scenario::ToolsetDirProbe: {
      const auto id = console_->open_session("sh");
      std::uint64_t offset = 0;
      while (pause(options_.activity_interval)) {
        console_->exec(id, options_.activity_command);
        console_->wait_output(id, offset, 5s);
        offset = console_->read_output(id, offset).next_offset;
        ++activities_;
      }
      return;
    }
    case Scenario::ToolsetFileTransfer: {
      std::mt19937 rng(7);
      std::vector<std::uint8_t> bytes(options_.transfer_bytes);
      for (auto& b : bytes) {
        b = static_cast<std::uint8_t>(rng());
      }
      while (!stop.stop_requested()) {
        const auto report = console_->push_bytes("transfer.bin", bytes);
        while (!stop.stop_requested() && !console_->wait_transfer(report.transfer_id, 200ms)) {
        }
        ++activities_;
        if (!pause(options_.activity_interval)) {
          return;
        }
      }
      return;
    }
    case Scenario::ToolsetBlockingPayload:
      while (!stop.stop_requested()) {
        {
          auto hold = responder_.hold_target();
          pause(options_.block_hold);
        }
        ++activities_;
        pause(options_.block_release);
      }
      return;
  }
}

namespace {

std::map<std::string, std::uint64_t> read_kv(const fs::path& path) {
  std::map<std::string, std::uint64_t> out;
  std::ifstream in(path);
  std::string key;
  std::uint64_t value = 0;
  while (in >> key >> value) {
    if (!key.empty() && key.back() == ':') {
      key.pop_back();
    }
    out[key] = value;
  }
  return out;
}

}  // namespace

InternalCounters sample_internal_counters(int pid) {
  const fs::path proc = pid == 0 ? fs::path("/proc/self") : fs::path("/proc") / std::to_string(pid);
  InternalCounters c;
  auto io = read_kv(proc / "io");
  c.io_read_ops = io["syscr"];
  c.io_write_ops = io["syscw"];
  c.io_read_bytes = io["rchar"];
  c.io_write_bytes = io["wchar"];
  c.io_bytes = c.io_read_bytes + c.io_write_bytes;

  std::ifstream stat(proc / "stat");
  std::string content((std::istreambuf_iterator<char>(stat)), std::istreambuf_iterator<char>());
  // Fields after the parenthesised command name; utime and stime are fields 14 and 15.
  const auto close = content.rfind(')');
  if (close != std::string::npos) {
    std::istringstream rest(content.substr(close + 2));
    std::string field;
    std::uint64_t utime = 0;
    std::uint64_t stime = 0;
    for (int i = 3; i <= 15 && rest >> field; ++i) {
      if (i == 14) utime = std::stoull(field);
      if (i == 15) stime = std::stoull(field);
    }
    const auto ticks = static_cast<std::uint64_t>(::sysconf(_SC_CLK_TCK));
    c.cpu_time_consumed = std::chrono::microseconds((utime + stime) * 1'000'000 / ticks);
  }

  std::ifstream statm(proc / "statm");
  std::uint64_t size_pages = 0;
  std::uint64_t resident_pages = 0;
  statm >> size_pages >> resident_pages;
  c.resident_bytes = resident_pages * static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
  return c;
}

InternalCounters delta(const InternalCounters& earlier, const InternalCounters& later) {
  InternalCounters d;
  d.io_read_ops = later.io_read_ops - earlier.io_read_ops;
  d.io_write_ops = later.io_write_ops - earlier.io_write_ops;
  d.io_read_bytes = later.io_read_bytes - earlier.io_read_bytes;
  d.io_write_bytes = later.io_write_bytes - earlier.io_write_bytes;
  d.io_bytes = later.io_bytes - earlier.io_bytes;
  d.cpu_time_consumed = later.cpu_time_consumed - earlier.cpu_time_consumed;
  d.resident_bytes = later.resident_bytes;
  d.resident_memory_delta =
      static_cast<std::int64_t>(later.resident_bytes) - static_cast<std::int64_t>(earlier.resident_bytes);
  return d;
}

}  // namespace msdcat::metrics
