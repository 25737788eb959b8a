// Python bindings: frame and datagram codecs, the emulator, console, implant
// loop, HTTP API and the metrics harness.

#include "msdcat/api.hpp"
#include "msdcat/console.hpp"
#include "msdcat/datagram.hpp"
#include "msdcat/emulator.hpp"
#include "msdcat/error.hpp"
#include "msdcat/implant.hpp"
#include "msdcat/metrics.hpp"
#include "msdcat/payload_host.hpp"
#include "msdcat/scsi_frame.hpp"
#include "msdcat/transport.hpp"

#include <pybind11/chrono.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <thread>

namespace py = pybind11;
using namespace msdcat;
using Bytes = std::vector<std::uint8_t>;
using release_gil = py::call_guard<py::gil_scoped_release>;

namespace {

py::bytes to_py(const Bytes& b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

Bytes from_py(const py::bytes& b) {
  const std::string_view view = b;
  return {view.begin(), view.end()};
}

std::chrono::milliseconds ms(double v) {
  return std::chrono::milliseconds(static_cast<long long>(v));
}

double to_ms(Duration d) { return std::chrono::duration<double, std::milli>(d).count(); }

/// Owns a payload host and an implant loop on a background thread.
class ImplantRunner {
 public:
  ImplantRunner(std::unique_ptr<Transport> transport, const std::string& drop_dir,
                ChannelConfig cfg)
      : host_(drop_dir.empty() ? make_temp_drop_dir() : std::filesystem::path(drop_dir)),
        implant_(std::move(transport), host_, cfg) {
    loop_ = std::jthread([this](std::stop_token st) { exit_ = implant_.run(st); });
  }
  ~ImplantRunner() { stop(); }

  void stop() {
    if (loop_.joinable()) {
      loop_.request_stop();
      loop_.join();
    }
  }
  bool running() const { return loop_.joinable() && !exit_.load().has_value(); }
  std::optional<std::string> exit_reason() const {
    const auto e = exit_.load();
    if (!e) return std::nullopt;
    return *e == LoopExit::Stopped ? "stopped" : "channel_down";
  }
  std::filesystem::path drop_dir() const { return host_.drop_dir(); }
  std::vector<std::uint16_t> payload_sessions() const { return host_.sessions(); }
  ChannelCounters counters() { return implant_.channel().counters(); }

 private:
  PayloadHost host_;
  Implant implant_;
  std::atomic<std::optional<LoopExit>> exit_{};
  std::jthread loop_;
};

py::dict stats_dict(const ChannelStats& s) {
  py::dict d;
  d["polls_observed"] = s.polls_observed;
  d["pending_signals_sent"] = s.pending_signals_sent;
  d["covert_reads"] = s.covert_reads;
  d["covert_writes"] = s.covert_writes;
  d["normal_frames"] = s.normal_frames;
  d["queue_depth"] = s.queue_depth;
  d["last_delay_applied_ms"] = s.last_delay_applied_ms;
  return d;
}

ChannelConfig channel_config(double poll_interval_ms, double margin_ms, int fetch_blocks) {
  ChannelConfig cfg;
  cfg.poll_interval = ms(poll_interval_ms);
  cfg.detect_margin = ms(margin_ms);
  cfg.fetch_blocks = static_cast<std::uint16_t>(fetch_blocks);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Covert SCSI mass-storage channel testbed";

  // Leaked on purpose: must outlive interpreter teardown.
  static auto* error_type = new py::exception<Error>(m, "MsdcatError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const auto type = py::reinterpret_borrow<py::object>(error_type->ptr());
      py::object err = type(py::str(e.what()));
      err.attr("code") = to_string(e.code());
      PyErr_SetObject(error_type->ptr(), err.ptr());
    }
  });

  // --- frames -------------------------------------------------------------
  py::enum_<scsi::CdbKind>(m, "CdbKind")
      .value("TEST_UNIT_READY", scsi::CdbKind::TestUnitReady)
      .value("READ10", scsi::CdbKind::Read10)
      .value("WRITE10", scsi::CdbKind::Write10);

  py::class_<scsi::Cdb>(m, "Cdb")
      .def_static("test_unit_ready",
                  [](std::uint8_t control) {
                    return scsi::Cdb::test_unit_ready(scsi::ControlByte{control});
                  },
                  py::arg("control") = 0)
      .def_static("read10",
                  [](std::uint32_t lba, std::uint16_t blocks, std::uint8_t control) {
                    return scsi::Cdb::read10(lba, blocks, scsi::ControlByte{control});
                  },
                  py::arg("lba"), py::arg("blocks"), py::arg("control") = 0)
      .def_static("write10",
                  [](std::uint32_t lba, std::uint16_t blocks, std::uint8_t control) {
                    return scsi::Cdb::write10(lba, blocks, scsi::ControlByte{control});
                  },
                  py::arg("lba"), py::arg("blocks"), py::arg("control") = 0)
      .def_readonly("kind", &scsi::Cdb::kind)
      .def_readonly("lba", &scsi::Cdb::lba)
      .def_readonly("transfer_length", &scsi::Cdb::transfer_length)
      .def_property_readonly("control", [](const scsi::Cdb& c) { return c.control.raw(); })
      .def_property_readonly("covert", [](const scsi::Cdb& c) { return c.control.covert(); })
      .def("__eq__", [](const scsi::Cdb& a, const scsi::Cdb& b) { return a == b; })
      .def("__repr__", [](const scsi::Cdb& c) {
        return std::string("Cdb(") + scsi::to_string(c.kind) + ", lba=" + std::to_string(c.lba) +
               ", blocks=" + std::to_string(c.transfer_length) +
               ", control=" + std::to_string(c.control.raw()) + ")";
      });

  m.def("parse_cdb", [](const py::bytes& b) { return scsi::parse_cdb(from_py(b)); });
  m.def("serialize_cdb", [](const scsi::Cdb& c) { return to_py(scsi::serialize_cdb(c)); });
  m.def("mark_covert", &scsi::mark_covert);
  m.def("is_covert", [](const scsi::Cdb& c) { return scsi::classify(c) == scsi::FrameClass::Covert; });

  // --- datagrams ----------------------------------------------------------
  py::enum_<DatagramType>(m, "DatagramType")
      .value("PAD", DatagramType::Pad)
      .value("OPEN", DatagramType::Open)
      .value("DATA", DatagramType::Data)
      .value("CLOSE", DatagramType::Close)
      .value("FILE_BEGIN", DatagramType::FileBegin)
      .value("FILE_CHUNK", DatagramType::FileChunk)
      .value("FILE_END", DatagramType::FileEnd)
      .value("ERROR", DatagramType::Error);

  py::class_<Datagram>(m, "Datagram")
      .def(py::init([](DatagramType type, std::uint16_t session_id, std::uint16_t seq,
                       const py::bytes& payload) {
             return Datagram::make(type, session_id, seq, from_py(payload));
           }),
           py::arg("type"), py::arg("session_id"), py::arg("seq") = 0,
           py::arg("payload") = py::bytes())
      .def_readonly("version", &Datagram::version)
      .def_readonly("type", &Datagram::type)
      .def_readonly("session_id", &Datagram::session_id)
      .def_readonly("seq", &Datagram::seq)
      .def_property_readonly("payload", [](const Datagram& d) { return to_py(d.payload); })
      .def("__eq__", [](const Datagram& a, const Datagram& b) { return a == b; })
      .def("__repr__", [](const Datagram& d) {
        return std::string("Datagram(") + to_string(d.type) + ", session=" +
               std::to_string(d.session_id) + ", seq=" + std::to_string(d.seq) +
               ", len=" + std::to_string(d.payload.size()) + ")";
      });
  m.attr("MAX_PAYLOAD") = Datagram::kMaxPayload;
  m.attr("BLOCK_SIZE") = scsi::kBlockSize;

  m.def("encode_datagram", [](const Datagram& d) {
    Bytes out;
    encode_datagram(d, out);
    return to_py(out);
  });
  m.def("pack_blocks", [](const std::vector<Datagram>& ds) { return to_py(pack_blocks(ds)); });
  m.def("unpack_datagrams", [](const py::bytes& b) { return unpack_datagrams(from_py(b)); });
  m.def("crc32", [](const py::bytes& b) { return crc32(from_py(b)); });

  // --- device and transport ----------------------------------------------
  py::class_<Emulator, std::shared_ptr<Emulator>>(m, "Emulator")
      .def(py::init([](std::uint64_t capacity, double delay_ms, double poll_interval_ms,
                       double margin_ms) {
             PollConfig cfg;
             cfg.delay = ms(delay_ms);
             cfg.poll_interval = ms(poll_interval_ms);
             cfg.detect_margin = ms(margin_ms);
             return std::make_shared<Emulator>(capacity, cfg);
           }),
           py::arg("capacity_blocks") = 1u << 16, py::arg("delay_ms") = 40.0,
           py::arg("poll_interval_ms") = 500.0, py::arg("margin_ms") = 20.0)
      .def("enqueue", &Emulator::enqueue_command)
      .def("drain_results", &Emulator::drain_results)
      .def("queue_depth", &Emulator::queue_depth)
      .def("stats", [](const Emulator& e) { return stats_dict(e.stats()); })
      .def("read_blocks", [](Emulator& e, std::uint64_t lba, std::uint32_t count) {
        return to_py(e.store().read(lba, count));
      })
      .def("save_image", [](Emulator& e, const std::filesystem::path& p) { e.store().save_image(p); })
      .def("load_image", [](Emulator& e, const std::filesystem::path& p) { e.store().load_image(p); });

  py::class_<TcpDeviceServer>(m, "DeviceServer")
      .def(py::init([](std::shared_ptr<Emulator> emulator, const std::string& endpoint) {
             return std::make_unique<TcpDeviceServer>(std::move(emulator), endpoint);
           }),
           py::arg("emulator"),
           py::arg("endpoint") = "tcp://127.0.0.1:0")
      .def_property_readonly("port", &TcpDeviceServer::port)
      .def("stop", &TcpDeviceServer::stop, release_gil());

  py::class_<Transport>(m, "Transport")
      .def("submit",
           [](Transport& t, const scsi::Cdb& cdb, const py::bytes& data_out) {
             auto x = ScsiExchange::write(cdb, from_py(data_out));
             SubmitResult r;
             {
               py::gil_scoped_release release;
               r = t.submit(x);
             }
             return py::make_tuple(static_cast<int>(r.response.status), to_py(r.response.data_in),
                                   to_ms(r.elapsed));
           },
           py::arg("cdb"), py::arg("data_out") = py::bytes(),
           "Returns (status, data_in, elapsed_ms).")
      .def("close", &Transport::close);

  m.def("connect",
        [](const std::string& endpoint, std::shared_ptr<Emulator> device) {
          return connect(endpoint, std::move(device));
        },
        py::arg("endpoint"), py::arg("emulator") = nullptr);

  // --- implant ------------------------------------------------------------
  py::class_<ChannelCounters>(m, "ChannelCounters")
      .def_readonly("polls", &ChannelCounters::polls)
      .def_readonly("pending", &ChannelCounters::pending)
      .def_readonly("reads", &ChannelCounters::reads)
      .def_readonly("writes", &ChannelCounters::writes)
      .def_readonly("datagrams_in", &ChannelCounters::datagrams_in)
      .def_readonly("datagrams_out", &ChannelCounters::datagrams_out);

  py::class_<ImplantRunner>(m, "Implant")
      .def(py::init([](const std::string& endpoint, std::shared_ptr<Emulator> emulator,
                       const std::string& drop_dir, double poll_interval_ms, double margin_ms,
                       int fetch_blocks) {
             return std::make_unique<ImplantRunner>(
                 connect(endpoint, std::move(emulator)), drop_dir,
                 channel_config(poll_interval_ms, margin_ms, fetch_blocks));
           }),
           py::arg("endpoint") = "loopback", py::arg("emulator") = nullptr,
           py::arg("drop_dir") = "", py::arg("poll_interval_ms") = 500.0,
           py::arg("margin_ms") = 20.0, py::arg("fetch_blocks") = 8)
      .def("stop", &ImplantRunner::stop, release_gil())
      .def_property_readonly("running", &ImplantRunner::running)
      .def_property_readonly("exit_reason", &ImplantRunner::exit_reason)
      .def_property_readonly("drop_dir", &ImplantRunner::drop_dir)
      .def("payload_sessions", &ImplantRunner::payload_sessions)
      .def("counters", &ImplantRunner::counters);

  // --- console ------------------------------------------------------------
  py::class_<SessionView>(m, "SessionView")
      .def_readonly("session_id", &SessionView::session_id)
      .def_readonly("payload_spec", &SessionView::payload_spec)
      .def_property_readonly("state", [](const SessionView& v) { return to_string(v.state); })
      .def_readonly("bytes_in", &SessionView::bytes_in)
      .def_readonly("bytes_out", &SessionView::bytes_out)
      .def_readonly("output_offset", &SessionView::output_offset)
      .def_readonly("exit_status", &SessionView::exit_status)
      .def_readonly("last_error", &SessionView::last_error);

  py::class_<OutputSlice>(m, "OutputSlice")
      .def_property_readonly("data", [](const OutputSlice& s) { return to_py(s.bytes); })
      .def_property_readonly("text", &OutputSlice::text)
      .def_readonly("next_offset", &OutputSlice::next_offset)
      .def_readonly("base_offset", &OutputSlice::base_offset);

  py::class_<TransferReport>(m, "TransferReport")
      .def_readonly("transfer_id", &TransferReport::transfer_id)
      .def_readonly("name", &TransferReport::remote_name)
      .def_readonly("bytes", &TransferReport::bytes)
      .def_readonly("chunks", &TransferReport::chunks)
      .def_readonly("crc32", &TransferReport::crc32);

  py::class_<TransferStatus>(m, "TransferStatus")
      .def_readonly("report", &TransferStatus::report)
      .def_property_readonly("state", [](const TransferStatus& s) { return to_string(s.state); })
      .def_readonly("remote_crc32", &TransferStatus::remote_crc32)
      .def_readonly("remote_bytes", &TransferStatus::remote_bytes)
      .def_readonly("error", &TransferStatus::error);

  py::class_<Console>(m, "Console")
      .def(py::init([](std::shared_ptr<Emulator> emulator, std::size_t ring_bytes,
                       std::uint64_t max_file_bytes) {
             ConsoleConfig cfg;
             cfg.ring_bytes = ring_bytes;
             cfg.max_file_bytes = max_file_bytes;
             return std::make_unique<Console>(std::move(emulator), cfg);
           }),
           py::arg("emulator"), py::arg("ring_bytes") = 64 * 1024,
           py::arg("max_file_bytes") = 64ull << 20, py::keep_alive<1, 2>())
      .def("open_session", &Console::open_session, py::arg("payload_spec"))
      .def("exec", &Console::exec, py::arg("session_id"), py::arg("line"))
      .def("send_input",
           [](Console& c, std::uint16_t id, const py::bytes& b) { c.send_input(id, from_py(b)); })
      .def("close_session", &Console::close_session)
      .def("read_output", &Console::read_output, py::arg("session_id"), py::arg("since") = 0)
      .def("wait_output",
           [](const Console& c, std::uint16_t id, std::uint64_t since, double timeout_ms) {
             py::gil_scoped_release release;
             return c.wait_output(id, since, ms(timeout_ms));
           },
           py::arg("session_id"), py::arg("since"), py::arg("timeout_ms") = 1000.0)
      .def("wait_state_change",
           [](const Console& c, std::uint16_t id, double timeout_ms) {
             py::gil_scoped_release release;
             return std::string(to_string(c.wait_state_change(id, ms(timeout_ms))));
           },
           py::arg("session_id"), py::arg("timeout_ms") = 5000.0)
      .def("push_file", &Console::push_file, py::arg("path"), py::arg("name") = "")
      .def("push_bytes",
           [](Console& c, const std::string& name, const py::bytes& b) {
             return c.push_bytes(name, from_py(b));
           })
      .def("transfer_status", &Console::transfer_status)
      .def("wait_transfer",
           [](const Console& c, std::uint16_t id, double timeout_ms) {
             py::gil_scoped_release release;
             return c.wait_transfer(id, ms(timeout_ms));
           },
           py::arg("transfer_id"), py::arg("timeout_ms") = 60000.0)
      .def("stats", [](const Console& c) { return stats_dict(c.stats()); })
      .def("sessions", &Console::sessions)
      .def("session", &Console::session)
      .def("implant_alive", &Console::implant_alive);

  py::class_<ApiServer>(m, "ApiServer")
      .def(py::init<Console&, std::string, std::uint16_t>(), py::arg("console"),
           py::arg("host") = "127.0.0.1", py::arg("port") = 0, py::keep_alive<1, 2>())
      .def_property_readonly("port", &ApiServer::port)
      .def("stop", &ApiServer::stop, release_gil());

  // --- metrics ------------------------------------------------------------
  auto mm = m.def_submodule("metrics", "Detectability measurement");
  py::enum_<metrics::Verdict>(mm, "Verdict")
      .value("WITHIN_ONE_SIGMA", metrics::Verdict::WithinOneSigma)
      .value("DISTINGUISHABLE", metrics::Verdict::Distinguishable);

  py::class_<metrics::TimingSample>(mm, "TimingSample")
      .def(py::init([](std::string id, std::uint32_t iteration, std::int64_t rtt_us) {
             return metrics::TimingSample{std::move(id), iteration,
                                          std::chrono::microseconds(rtt_us)};
           }),
           py::arg("scenario_id"), py::arg("iteration"), py::arg("rtt_us"))
      .def_readonly("scenario_id", &metrics::TimingSample::scenario_id)
      .def_readonly("iteration", &metrics::TimingSample::iteration)
      .def_property_readonly("rtt_us",
                             [](const metrics::TimingSample& s) { return s.rtt.count(); });

  py::class_<metrics::ScenarioReport>(mm, "ScenarioReport")
      .def(py::init<>())
      .def_readwrite("scenario_id", &metrics::ScenarioReport::scenario_id)
      .def_readwrite("n", &metrics::ScenarioReport::n)
      .def_readwrite("mean", &metrics::ScenarioReport::mean)
      .def_readwrite("min", &metrics::ScenarioReport::min)
      .def_readwrite("max", &metrics::ScenarioReport::max)
      .def_readwrite("stddev", &metrics::ScenarioReport::stddev)
      .def_readwrite("p50", &metrics::ScenarioReport::p50)
      .def_readwrite("p95", &metrics::ScenarioReport::p95)
      .def_readwrite("probe", &metrics::ScenarioReport::probe)
      .def_property(
          "interval_ms",
          [](const metrics::ScenarioReport& r) { return r.interval.count(); },
          [](metrics::ScenarioReport& r, long long v) { r.interval = std::chrono::milliseconds(v); });

  mm.def("summarize", [](const std::string& id, const std::vector<metrics::TimingSample>& s) {
    return metrics::summarize(id, s);
  });
  mm.def("compare_reports", &metrics::compare_reports, py::arg("baseline"), py::arg("candidate"));
  mm.def("write_csv", [](const std::filesystem::path& p, const std::vector<metrics::TimingSample>& s) {
    metrics::write_csv(p, s);
  });
  mm.def("read_csv", [](const std::filesystem::path& p) { return metrics::read_csv(p); });
  mm.def("make_fixture_tree", &metrics::make_fixture_tree);

  py::class_<metrics::ProbeResponder>(mm, "ProbeResponder")
      .def(py::init<std::filesystem::path, std::string, std::uint16_t>(), py::arg("work_dir"),
           py::arg("host") = "127.0.0.1", py::arg("port") = 0)
      .def_property_readonly("endpoint", &metrics::ProbeResponder::endpoint)
      .def_property_readonly("served", &metrics::ProbeResponder::served)
      .def("stop", &metrics::ProbeResponder::stop, release_gil());

  mm.def(
      "run_external_experiment",
      [](const std::string& responder, std::size_t n, double interval_ms, const std::string& probe,
         const std::string& scenario, std::size_t warmup) {
        metrics::ExperimentConfig cfg;
        cfg.responder = responder;
        cfg.n = n;
        cfg.interval = ms(interval_ms);
        cfg.probe = probe;
        cfg.scenario = metrics::parse_scenario(scenario);
        cfg.warmup = warmup;
        py::gil_scoped_release release;
        auto r = metrics::run_external_experiment(cfg);
        return std::make_pair(r.report, r.samples);
      },
      py::arg("responder"), py::arg("n") = 100, py::arg("interval_ms") = 3000.0,
      py::arg("probe") = "ls -la", py::arg("scenario") = "baseline", py::arg("warmup") = 3,
      "Returns (report, samples).");

  mm.def("sample_internal_counters", [](int pid) {
    const auto c = metrics::sample_internal_counters(pid);
    py::dict d;
    d["io_read_ops"] = c.io_read_ops;
    d["io_write_ops"] = c.io_write_ops;
    d["io_read_bytes"] = c.io_read_bytes;
    d["io_write_bytes"] = c.io_write_bytes;
    d["io_bytes"] = c.io_bytes;
    d["cpu_time_us"] = c.cpu_time_consumed.count();
    d["resident_bytes"] = c.resident_bytes;
    return d;
  }, py::arg("pid") = 0);
}
