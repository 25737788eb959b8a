// msdcat: covert mass-storage channel testbed.
//
//   msdcat serve      emulator device listener + analyst HTTP API
//   msdcat implant    compromised-side channel loop
//   msdcat open|exec|tail|push|stats|sessions|close|repl   analyst commands (via the API)
//   msdcat experiment detectability run for one scenario
//   msdcat analyze    report/verdict from raw CSV
//   msdcat responder  standalone probe responder

#include "msdcat/api.hpp"
#include "msdcat/console.hpp"
#include "msdcat/emulator.hpp"
#include "msdcat/error.hpp"
#include "msdcat/implant.hpp"
#include "msdcat/metrics.hpp"
#include "msdcat/payload_host.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace std::chrono_literals;
using namespace msdcat;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

void wait_for_interrupt() {
  while (!g_interrupted) {
    std::this_thread::sleep_for(100ms);
  }
}

struct ApiTarget {
  std::string host = "127.0.0.1";
  int port = 8750;
};

ApiTarget parse_api(const std::string& url) {
  std::string rest = url;
  if (rest.starts_with("http://")) {
    rest = rest.substr(7);
  }
  while (!rest.empty() && rest.back() == '/') {
    rest.pop_back();
  }
  ApiTarget t;
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos) {
    t.host = rest;
  } else {
    t.host = rest.substr(0, colon);
    t.port = std::stoi(rest.substr(colon + 1));
  }
  return t;
}

/// Thin JSON client for the analyst API. Exits non-zero on API errors.
class ApiClient {
 public:
  explicit ApiClient(const std::string& url) : target_(parse_api(url)), http_(target_.host, target_.port) {
    http_.set_read_timeout(30, 0);
  }

  json get(const std::string& path) { return check(http_.Get(path)); }
  json post(const std::string& path, const json& body) {
    return check(http_.Post(path, body.dump(), "application/json"));
  }
  json post_bytes(const std::string& path, const std::string& bytes) {
    return check(http_.Post(path, bytes, "application/octet-stream"));
  }
  json del(const std::string& path) { return check(http_.Delete(path)); }

 private:
  json check(const httplib::Result& res) {
    if (!res) {
      throw std::runtime_error("API unreachable at " + target_.host + ":" +
                               std::to_string(target_.port));
    }
    auto body = json::parse(res->body, nullptr, false);
    if (res->status >= 400) {
      const std::string msg = body.is_object() && body.contains("message")
                                  ? body["message"].get<std::string>()
                                  : res->body;
      throw std::runtime_error(msg);
    }
    return body;
  }

  ApiTarget target_;
  httplib::Client http_;
};

struct PollOptions {
  int delay_ms = 40;
  int poll_interval_ms = 500;
  int margin_ms = 20;
};

void add_poll_options(CLI::App* cmd, PollOptions& o) {
  cmd->add_option("--delay-ms", o.delay_ms, "Delayed-ACK hold for pending commands")
      ->capture_default_str();
  cmd->add_option("--poll-interval-ms", o.poll_interval_ms, "Covert poll cadence")
      ->capture_default_str();
  cmd->add_option("--margin-ms", o.margin_ms, "Detection margin above the RTT baseline")
      ->capture_default_str();
}

int cmd_serve(const std::string& listen, const std::string& api, std::uint64_t capacity,
              const std::string& image, const PollOptions& poll, std::uint64_t max_file_mb) {
  PollConfig cfg;
  cfg.delay = std::chrono::milliseconds(poll.delay_ms);
  cfg.poll_interval = std::chrono::milliseconds(poll.poll_interval_ms);
  cfg.detect_margin = std::chrono::milliseconds(poll.margin_ms);
  auto emulator = std::make_shared<Emulator>(capacity, cfg);
  if (!image.empty() && fs::exists(image)) {
    emulator->store().load_image(image);
  }
  ConsoleConfig console_cfg;
  console_cfg.max_file_bytes = max_file_mb << 20;
  Console console(emulator, console_cfg);
  TcpDeviceServer device(emulator, listen);
  const auto target = parse_api(api);
  ApiServer server(console, target.host, static_cast<std::uint16_t>(target.port));
  std::cerr << "msdcat: device on port " << device.port() << ", API on http://" << target.host
            << ":" << server.port() << std::endl;
  wait_for_interrupt();
  server.stop();
  device.stop();
  emulator->shutdown();
  if (!image.empty()) {
    emulator->store().save_image(image);
  }
  return 0;
}

int cmd_implant(const std::string& endpoint, const PollOptions& poll, int fetch_blocks,
                const std::string& drop_dir, std::size_t max_sessions) {
  PayloadHost payloads(drop_dir.empty() ? make_temp_drop_dir() : fs::path(drop_dir), max_sessions);
  ChannelConfig cfg;
  cfg.poll_interval = std::chrono::milliseconds(poll.poll_interval_ms);
  cfg.detect_margin = std::chrono::milliseconds(poll.margin_ms);
  cfg.fetch_blocks = static_cast<std::uint16_t>(fetch_blocks);
  Implant implant(connect(endpoint), payloads, cfg);
  std::jthread loop([&](std::stop_token stop) {
    if (implant.run(stop) == LoopExit::ChannelDown) {
      g_interrupted = true;
    }
  });
  wait_for_interrupt();
  loop.request_stop();
  loop.join();
  return implant.transport().closed() ? 3 : 0;
}

void print_output_json(const json& out) {
  const auto bytes = base64_decode(out.at("data_b64").get<std::string>());
  std::fwrite(bytes.data(), 1, bytes.size(), stdout);
  std::fflush(stdout);
}

int cmd_tail(ApiClient& api, int id, std::uint64_t since, bool follow, int wait_ms) {
  const auto deadline = Clock::now() + std::chrono::milliseconds(wait_ms);
  for (;;) {
    const auto out = api.get("/sessions/" + std::to_string(id) + "/output?since=" + std::to_string(since));
    print_output_json(out);
    since = out.at("next_offset").get<std::uint64_t>();
    const auto sessions = api.get("/sessions");
    bool closed = false;
    for (const auto& s : sessions) {
      if (s.at("session_id") == id && s.at("state") == "closed") {
        closed = s.at("output_offset").get<std::uint64_t>() <= since;
      }
    }
    if (closed || g_interrupted || (!follow && Clock::now() >= deadline)) {
      break;
    }
    std::this_thread::sleep_for(100ms);
  }
  std::cerr << "next_offset " << since << std::endl;
  return 0;
}

int cmd_repl(ApiClient& api, int id) {
  std::atomic<bool> done{false};
  std::thread reader([&] {
    std::uint64_t since = 0;
    try {
      while (!done) {
        const auto out =
            api.get("/sessions/" + std::to_string(id) + "/output?since=" + std::to_string(since));
        print_output_json(out);
        since = out.at("next_offset").get<std::uint64_t>();
        std::this_thread::sleep_for(100ms);
      }
    } catch (const std::exception& e) {
      std::cerr << "msdcat: " << e.what() << std::endl;
    }
  });
  std::string line;
  while (!g_interrupted && std::getline(std::cin, line)) {
    try {
      api.post("/sessions/" + std::to_string(id) + "/input", {{"line", line}});
    } catch (const std::exception& e) {
      std::cerr << "msdcat: " << e.what() << std::endl;
      break;
    }
  }
  std::this_thread::sleep_for(500ms);
  done = true;
  reader.join();
  return 0;
}

void print_report(const metrics::ScenarioReport& r) {
  std::cout << std::fixed << std::setprecision(3) << r.scenario_id << ": n=" << r.n
            << " mean=" << r.mean << "ms stddev=" << r.stddev << "ms min=" << r.min
            << "ms p50=" << r.p50 << "ms p95=" << r.p95 << "ms max=" << r.max << "ms\n";
}

/// Exit 0 only when the requested verdict holds.
int verdict_exit(const metrics::ScenarioReport& baseline, const metrics::ScenarioReport& report,
                 const std::string& expect) {
  const auto verdict = metrics::compare_reports(baseline, report);
  std::cout << "verdict vs " << baseline.scenario_id << ": " << metrics::to_string(verdict)
            << " (|delta mean|=" << std::abs(report.mean - baseline.mean)
            << "ms, baseline stddev=" << baseline.stddev << "ms)\n";
  if (expect.empty()) {
    return 0;
  }
  const auto wanted = expect == "within" ? metrics::Verdict::WithinOneSigma
                                         : metrics::Verdict::Distinguishable;
  return verdict == wanted ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msdcat: covert mass-storage channel testbed"};
  app.require_subcommand(1);

  std::string api_url = "http://127.0.0.1:8750";
  auto add_api = [&](CLI::App* cmd) {
    cmd->add_option("--api", api_url, "Analyst API base URL")->capture_default_str();
  };

  // serve
  auto* serve = app.add_subcommand("serve", "Run the emulator device listener and analyst API");
  std::string listen = "tcp://127.0.0.1:7750";
  std::string api_listen = "127.0.0.1:8750";
  std::uint64_t capacity = 1u << 16;
  std::string image;
  std::uint64_t max_file_mb = 64;
  PollOptions serve_poll;
  serve->add_option("--listen", listen, "Device endpoint tcp://host:port")->capture_default_str();
  serve->add_option("--api-listen", api_listen, "API host:port")->capture_default_str();
  serve->add_option("--capacity", capacity, "Capacity in 512-byte blocks")->capture_default_str();
  serve->add_option("--image", image, "Raw disk image loaded at start, saved at exit");
  serve->add_option("--max-file-mb", max_file_mb, "Push size cap")->capture_default_str();
  add_poll_options(serve, serve_poll);

  // implant
  auto* implant = app.add_subcommand("implant", "Run the compromised-side channel loop");
  std::string connect_to = "tcp://127.0.0.1:7750";
  PollOptions implant_poll;
  int fetch_blocks = 8;
  std::string drop_dir;
  std::size_t max_sessions = PayloadHost::kDefaultMaxSessions;
  implant->add_option("--connect", connect_to, "Emulator endpoint")->capture_default_str();
  implant->add_option("--fetch-blocks", fetch_blocks, "Blocks per covert READ(10)")
      ->check(CLI::Range(1, 0xFFFF))
      ->capture_default_str();
  implant->add_option("--drop-dir", drop_dir, "Directory for received files (default: temp)");
  implant->add_option("--max-sessions", max_sessions, "Concurrent payload limit")
      ->capture_default_str();
  add_poll_options(implant, implant_poll);

  // analyst commands
  auto* open = app.add_subcommand("open", "Open a session running a payload");
  std::string payload_spec;
  open->add_option("payload", payload_spec, "Payload command line")->required();
  add_api(open);

  auto* exec = app.add_subcommand("exec", "Send one input line to a session");
  int session_id = 0;
  std::string line;
  exec->add_option("session", session_id)->required();
  exec->add_option("line", line)->required();
  add_api(exec);

  auto* tail = app.add_subcommand("tail", "Print session output");
  std::uint64_t since = 0;
  bool follow = false;
  int wait_ms = 0;
  tail->add_option("session", session_id)->required();
  tail->add_option("--since", since, "Output offset to start from");
  tail->add_flag("-f,--follow", follow, "Keep following until the session closes");
  tail->add_option("--wait-ms", wait_ms, "Keep polling for this long");
  add_api(tail);

  auto* push = app.add_subcommand("push", "Transfer a file to the implant drop directory");
  std::string local_path;
  std::string remote_name;
  bool push_wait = false;
  push->add_option("file", local_path)->required()->check(CLI::ExistingFile);
  push->add_option("--name", remote_name, "Name under the drop directory");
  push->add_flag("--wait", push_wait, "Wait for the implant's CRC confirmation");
  add_api(push);

  auto* stats = app.add_subcommand("stats", "Show channel counters");
  add_api(stats);
  auto* sessions = app.add_subcommand("sessions", "List sessions");
  add_api(sessions);
  auto* close = app.add_subcommand("close", "Terminate a session's payload");
  close->add_option("session", session_id)->required();
  add_api(close);

  auto* repl = app.add_subcommand("repl", "Interactive mode bound to one session");
  std::string repl_open;
  repl->add_option("--session", session_id, "Existing session id");
  repl->add_option("--open", repl_open, "Open a new session with this payload first");
  add_api(repl);

  // metrics
  auto* experiment = app.add_subcommand("experiment", "External round-trip experiment");
  std::string scenario_name = "baseline";
  metrics::ExperimentConfig exp;
  int interval_ms = 3000;
  int activity_ms = 3000;
  std::string csv_out;
  std::string baseline_csv;
  std::string expect;
  std::string work_dir;
  PollOptions exp_poll;
  experiment->add_option("--scenario", scenario_name)
      ->check(CLI::IsMember({"baseline", "toolset_idle", "toolset_dir_probe",
                             "toolset_file_transfer", "toolset_blocking_payload"}))
      ->capture_default_str();
  experiment->add_option("-n,--count", exp.n, "Number of probes")->capture_default_str();
  experiment->add_option("--interval-ms", interval_ms, "Probe spacing")->capture_default_str();
  experiment->add_option("--probe", exp.probe, "Probe command line")->capture_default_str();
  experiment->add_option("--responder", exp.responder,
                         "External responder tcp://host:port (default: in-process)");
  experiment->add_option("--activity-interval-ms", activity_ms, "Scenario activity cadence")
      ->capture_default_str();
  experiment->add_option("--csv", csv_out, "Write raw samples here");
  experiment->add_option("--baseline-csv", baseline_csv, "Compare against this baseline");
  experiment->add_option("--expect", expect, "Required verdict")
      ->check(CLI::IsMember({"within", "distinguishable"}));
  experiment->add_option("--work-dir", work_dir, "Fixture and drop directory root");
  add_poll_options(experiment, exp_poll);

  auto* analyze = app.add_subcommand("analyze", "Summarise raw samples");
  std::string analyze_csv;
  analyze->add_option("csv", analyze_csv)->required()->check(CLI::ExistingFile);
  analyze->add_option("--baseline-csv", baseline_csv);
  analyze->add_option("--expect", expect)->check(CLI::IsMember({"within", "distinguishable"}));

  auto* responder = app.add_subcommand("responder", "Standalone probe responder");
  std::string responder_listen = "tcp://127.0.0.1:7760";
  responder->add_option("--listen", responder_listen)->capture_default_str();
  responder->add_option("--work-dir", work_dir, "Directory probes run in");

  CLI11_PARSE(app, argc, argv);
  install_signal_handlers();

  try {
    if (*serve) {
      return cmd_serve(listen, api_listen, capacity, image, serve_poll, max_file_mb);
    }
    if (*implant) {
      return cmd_implant(connect_to, implant_poll, fetch_blocks, drop_dir, max_sessions);
    }
    if (*open) {
      ApiClient api(api_url);
      std::cout << api.post("/sessions", {{"payload_spec", payload_spec}}).at("session_id") << "\n";
      return 0;
    }
    if (*exec) {
      ApiClient api(api_url);
      api.post("/sessions/" + std::to_string(session_id) + "/input", {{"line", line}});
      return 0;
    }
    if (*tail) {
      ApiClient api(api_url);
      return cmd_tail(api, session_id, since, follow, wait_ms);
    }
    if (*push) {
      ApiClient api(api_url);
      std::ifstream in(local_path, std::ios::binary);
      const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      const auto name = remote_name.empty() ? fs::path(local_path).filename().string() : remote_name;
      auto report = api.post_bytes("/files?name=" + httplib::detail::encode_query_param(name), bytes);
      if (push_wait) {
        const auto id = report.at("transfer_id").get<int>();
        while (!g_interrupted) {
          report = api.get("/files/" + std::to_string(id));
          if (report.at("state") != "sending") {
            break;
          }
          std::this_thread::sleep_for(200ms);
        }
      }
      std::cout << report.dump(2) << "\n";
      return report.value("state", "sending") == "failed" ? 1 : 0;
    }
    if (*stats) {
      ApiClient api(api_url);
      std::cout << api.get("/stats").dump(2) << "\n";
      return 0;
    }
    if (*sessions) {
      ApiClient api(api_url);
      std::cout << api.get("/sessions").dump(2) << "\n";
      return 0;
    }
    if (*close) {
      ApiClient api(api_url);
      api.del("/sessions/" + std::to_string(session_id));
      return 0;
    }
    if (*repl) {
      ApiClient api(api_url);
      if (!repl_open.empty()) {
        session_id = api.post("/sessions", {{"payload_spec", repl_open}}).at("session_id").get<int>();
        std::cerr << "session " << session_id << std::endl;
      }
      if (session_id == 0) {
        std::cerr << "msdcat: repl needs --session or --open" << std::endl;
        return 2;
      }
      return cmd_repl(api, session_id);
    }
    if (*experiment) {
      exp.scenario = metrics::parse_scenario(scenario_name);
      exp.interval = std::chrono::milliseconds(interval_ms);
      const fs::path root = work_dir.empty() ? make_temp_drop_dir() : fs::path(work_dir);
      std::optional<metrics::ProbeResponder> local;
      std::optional<metrics::ScenarioRig> rig;
      if (exp.responder.empty()) {
        metrics::make_fixture_tree(root / "fixture");
        local.emplace(root / "fixture");
        exp.responder = local->endpoint();
        metrics::RigOptions opts;
        opts.work_dir = root;
        opts.poll_interval = std::chrono::milliseconds(exp_poll.poll_interval_ms);
        opts.delay = std::chrono::milliseconds(exp_poll.delay_ms);
        opts.margin = std::chrono::milliseconds(exp_poll.margin_ms);
        opts.activity_interval = std::chrono::milliseconds(activity_ms);
        opts.activity_command = exp.probe;
        rig.emplace(exp.scenario, *local, opts);
      }
      const auto result = metrics::run_external_experiment(exp);
      if (!csv_out.empty()) {
        metrics::write_csv(fs::path(csv_out), result.samples);
      }
      print_report(result.report);
      if (!baseline_csv.empty()) {
        auto base = metrics::summarize("baseline", metrics::read_csv(fs::path(baseline_csv)));
        return verdict_exit(base, result.report, expect);
      }
      return 0;
    }
    if (*analyze) {
      const auto samples = metrics::read_csv(fs::path(analyze_csv));
      const auto id = samples.empty() ? std::string("empty") : samples.front().scenario_id;
      const auto report = metrics::summarize(id, samples);
      print_report(report);
      if (!baseline_csv.empty()) {
        auto base = metrics::summarize("baseline", metrics::read_csv(fs::path(baseline_csv)));
        return verdict_exit(base, report, expect);
      }
      return 0;
    }
    if (*responder) {
      const auto addr = parse_tcp_endpoint(responder_listen);
      metrics::ProbeResponder r(work_dir.empty() ? fs::current_path() : fs::path(work_dir),
                                addr.host, addr.port);
      std::cerr << "msdcat: probe responder on port " << r.port() << std::endl;
      wait_for_interrupt();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "msdcat: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
