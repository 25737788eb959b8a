#include "msdcat/emulator.hpp"
#include "msdcat/error.hpp"
#include "msdcat/implant.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <functional>
#include <thread>

using namespace msdcat;
using namespace std::chrono_literals;
using Bytes = std::vector<std::uint8_t>;

namespace {

/// Records every exchange and answers from a script.
class ScriptedTransport : public Transport {
 public:
  std::function<ScsiResponse(const ScsiExchange&)> answer = [](const ScsiExchange&) {
    return ScsiResponse{};
  };
  std::vector<ScsiExchange> seen;

 protected:
  ScsiResponse round_trip(const ScsiExchange& x) override {
    seen.push_back(x);
    return answer(x);
  }
};

ChannelConfig fast_config() {
  ChannelConfig cfg;
  cfg.poll_interval = 100ms;
  return cfg;
}

struct Rig {
  std::shared_ptr<Emulator> emu = std::make_shared<Emulator>();
  PayloadHost host;
  Implant implant;
  std::jthread loop;
  std::vector<Datagram> results;

  explicit Rig(ChannelConfig cfg = fast_config())
      : implant(connect("loopback", emu), host, cfg),
        loop([this](std::stop_token st) { implant.run(st); }) {}

  /// Collects inbound datagrams until `pred` holds over everything seen so far.
  bool collect_until(const std::function<bool(const std::vector<Datagram>&)>& pred,
                     Duration timeout = 10s) {
    const auto deadline = Clock::now() + timeout;
    while (!pred(results)) {
      if (Clock::now() >= deadline) return false;
      for (auto& d : emu->wait_results(50ms)) results.push_back(std::move(d));
    }
    return true;
  }

  std::string output_of(std::uint16_t id) const {
    std::string out;
    for (const auto& d : results) {
      if (d.session_id == id && d.type == DatagramType::Data) out += d.text();
    }
    return out;
  }
};

bool has(const std::vector<Datagram>& ds, DatagramType type, std::uint16_t id) {
  return std::any_of(ds.begin(), ds.end(),
                     [&](const Datagram& d) { return d.type == type && d.session_id == id; });
}

}  // namespace

TEST_CASE("pending threshold") {
  CHECK(is_pending(45ms, 2ms, 20ms));
  CHECK_FALSE(is_pending(3ms, 2ms, 20ms));
  CHECK_FALSE(is_pending(22ms, 2ms, 20ms));
  CHECK(is_pending(22ms + 1ns, 2ms, 20ms));
}

TEST_CASE("baseline tracks non-pending polls only") {
  ScriptedTransport t;
  Duration sleep = 2ms;
  t.answer = [&](const ScsiExchange&) {
    std::this_thread::sleep_for(sleep);
    return ScsiResponse{};
  };
  Channel ch(t, {});
  auto first = ch.poll_once();
  CHECK_FALSE(first.pending);
  CHECK(ch.baseline() == first.rtt);

  sleep = 60ms;
  const auto before = ch.baseline();
  auto slow = ch.poll_once();
  CHECK(slow.pending);
  CHECK(slow.baseline_ewma == before);
  CHECK(ch.baseline() == before);

  ch.note_false_alarm(slow);
  const double expected = 0.2 * static_cast<double>(slow.rtt.count()) +
                          0.8 * static_cast<double>(before.count());
  CHECK(static_cast<double>(ch.baseline().count()) == doctest::Approx(expected).epsilon(1e-6));
  CHECK(ch.counters().polls == 2);
  CHECK(ch.counters().pending == 1);

  REQUIRE(t.seen.size() == 2);
  const auto cdb = t.seen[0].cdb;
  CHECK(cdb.kind == scsi::CdbKind::TestUnitReady);
  CHECK(cdb.control.covert());
}

TEST_CASE("100 polls against an empty queue raise no pending") {
  auto emu = std::make_shared<Emulator>();
  auto transport = connect("loopback", emu);
  Channel ch(*transport, {});
  int pending = 0;
  for (int i = 0; i < 100; ++i) pending += ch.poll_once().pending ? 1 : 0;
  CHECK(pending == 0);
  CHECK(emu->stats().polls_observed == 100);
}

TEST_CASE("queued command is detected and fetched") {
  auto emu = std::make_shared<Emulator>();
  auto transport = connect("loopback", emu);
  Channel ch(*transport, {});
  ch.poll_once();
  emu->enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "sh"));
  CHECK(ch.poll_once().pending);
  const auto ds = ch.fetch_commands();
  REQUIRE(ds.size() == 1);
  CHECK(ds[0] == Datagram::make(DatagramType::Open, 1, 0, "sh"));

  for (std::uint16_t i = 0; i < 10; ++i) {
    emu->enqueue_command(Datagram::make(DatagramType::Data, 1, i, "line " + std::to_string(i)));
  }
  const auto ten = ch.fetch_commands();
  REQUIRE(ten.size() == 10);
  for (std::uint16_t i = 0; i < 10; ++i) CHECK(ten[i].seq == i);
  CHECK(ch.fetch_commands().empty());
}

TEST_CASE("malformed fetch") {
  ScriptedTransport t;
  t.answer = [](const ScsiExchange&) {
    ScsiResponse r;
    r.data_in.assign(8 * 512, 0);
    r.data_in[0] = 1;
    r.data_in[1] = 2;
    r.data_in[6] = 0x02;  // length 0x0200 > 504
    return r;
  };
  Channel ch(t, {});
  try {
    ch.fetch_commands();
    FAIL("expected MalformedDatagram");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedDatagram);
  }
}

TEST_CASE("send_results packing") {
  ScriptedTransport t;
  Channel ch(t, {});

  SUBCASE("single small datagram is one block") {
    ch.send_results(std::vector{Datagram::make(DatagramType::Data, 1, 0, "ok")});
    REQUIRE(t.seen.size() == 1);
    const auto cdb = t.seen[0].cdb;
    CHECK(cdb.kind == scsi::CdbKind::Write10);
    CHECK(cdb.control.covert());
    CHECK(cdb.transfer_length == 1);
    CHECK(t.seen[0].data_out.size() == 512);
  }
  SUBCASE("600 bytes of output chunk into two datagrams") {
    std::uint16_t seq = 0;
    const auto ds = chunk_payload(DatagramType::Data, 1, seq, oracle::random_bytes(600, 3));
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].payload.size() == 504);
    CHECK(ds[1].payload.size() == 96);
    ch.send_results(ds);
    REQUIRE(t.seen.size() == 1);
    CHECK(unpack_datagrams(t.seen[0].data_out) == ds);
  }
  SUBCASE("oversized payload sends nothing") {
    Datagram big;
    big.type = DatagramType::Data;
    big.payload.assign(505, 'x');
    try {
      ch.send_results(std::vector{big});
      FAIL("expected OversizedPayload");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::OversizedPayload);
    }
    CHECK(t.seen.empty());
  }
  SUBCASE("writes are capped at max_write_blocks") {
    std::vector<Datagram> ds;
    for (std::uint16_t i = 0; i < 100; ++i) {
      ds.push_back(Datagram::make(DatagramType::Data, 1, i, std::string(504, 'a')));
    }
    ch.send_results(ds);
    REQUIRE(t.seen.size() == 2);
    CHECK(t.seen[0].cdb.transfer_length == 64);
    CHECK(t.seen[1].cdb.transfer_length == 36);
  }
}

TEST_CASE("session lifecycle over loopback") {
  Rig rig;
  rig.emu->enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "cat"));
  const auto opened = Clock::now();
  REQUIRE(rig.collect_until([](auto& ds) { return has(ds, DatagramType::Open, 1); }));
  CHECK(Clock::now() - opened < 2 * 100ms + 100ms);
  CHECK(rig.results.front().text().starts_with("pid "));
  CHECK(rig.implant.sessions().at(1).state == SessionState::Active);

  rig.emu->enqueue_command(Datagram::make(DatagramType::Data, 1, 1, "hello\n"));
  rig.emu->enqueue_command(Datagram::make(DatagramType::Data, 1, 2, "world\n"));
  REQUIRE(rig.collect_until([&](auto&) { return rig.output_of(1) == "hello\nworld\n"; }));

  rig.emu->enqueue_command(Datagram::make(DatagramType::Close, 1, 3));
  REQUIRE(rig.collect_until([](auto& ds) { return has(ds, DatagramType::Close, 1); }));
  CHECK(rig.results.back().text().starts_with("exit "));
  CHECK(rig.implant.sessions().at(1).state == SessionState::Closed);
  CHECK(rig.host.sessions().empty());

  // Outbound sequence numbers are contiguous from zero.
  std::uint16_t seq = 0;
  for (const auto& d : rig.results) CHECK(d.seq == seq++);
}

TEST_CASE("payload that exits on its own reports CLOSE") {
  Rig rig;
  rig.emu->enqueue_command(Datagram::make(DatagramType::Open, 2, 0, "sh -c 'echo done; exit 3'"));
  REQUIRE(rig.collect_until([](auto& ds) { return has(ds, DatagramType::Close, 2); }));
  CHECK(rig.output_of(2) == "done\n");
  CHECK(rig.results.back().text() == "exit 3");
}

TEST_CASE("errors are reported, not fatal") {
  Rig rig;
  rig.emu->enqueue_command(Datagram::make(DatagramType::Close, 9, 0));
  rig.emu->enqueue_command(Datagram::make(DatagramType::Data, 8, 0, "x"));
  rig.emu->enqueue_command(Datagram::make(DatagramType::Open, 7, 0, "nonexistent-tool-xyz"));
  REQUIRE(rig.collect_until([](auto& ds) {
    return has(ds, DatagramType::Error, 9) && has(ds, DatagramType::Error, 8) &&
           has(ds, DatagramType::Error, 7);
  }));
  CHECK(rig.results[0].text() == "unknown session");
}

TEST_CASE("file transfer is acknowledged with crc and size") {
  Rig rig;
  const auto data = oracle::random_bytes(5000, 11);
  std::uint16_t seq = 1;
  rig.emu->enqueue_command(make_file_begin(40, data.size(), "drop/f.bin"));
  for (auto& d : chunk_payload(DatagramType::FileChunk, 40, seq, data)) {
    rig.emu->enqueue_command(std::move(d));
  }
  rig.emu->enqueue_command(make_file_end(40, seq, oracle::crc32(data)));
  REQUIRE(rig.collect_until([](auto& ds) { return has(ds, DatagramType::FileEnd, 40); }));
  const auto& ack = rig.results.back().payload;
  REQUIRE(ack.size() == 12);
  std::uint32_t crc = 0;
  std::uint64_t size = 0;
  for (int i = 0; i < 4; ++i) crc = crc << 8 | ack[i];
  for (int i = 4; i < 12; ++i) size = size << 8 | ack[i];
  CHECK(crc == oracle::crc32(data));
  CHECK(size == 5000);
  CHECK(std::filesystem::file_size(rig.host.drop_dir() / "drop/f.bin") == 5000);
}

TEST_CASE("idle channel only polls") {
  Rig rig;
  std::this_thread::sleep_for(1s);
  const auto s = rig.emu->stats();
  CHECK(s.polls_observed >= 8);
  CHECK(s.polls_observed <= 12);
  CHECK(s.covert_reads == 0);
  CHECK(s.covert_writes == 0);
  CHECK(s.pending_signals_sent == 0);
}

TEST_CASE("per-session output ordering under concurrency") {
  Rig rig;
  constexpr std::uint16_t kSessions = 4;
  for (std::uint16_t id = 1; id <= kSessions; ++id) {
    rig.emu->enqueue_command(Datagram::make(DatagramType::Open, id, 0, "cat"));
  }
  std::map<std::uint16_t, std::string> expected;
  for (int line = 0; line < 20; ++line) {
    for (std::uint16_t id = 1; id <= kSessions; ++id) {
      const auto text = "s" + std::to_string(id) + "-" + std::to_string(line) + "\n";
      expected[id] += text;
      rig.emu->enqueue_command(
          Datagram::make(DatagramType::Data, id, static_cast<std::uint16_t>(line + 1), text));
    }
  }
  REQUIRE(rig.collect_until([&](auto&) {
    for (auto& [id, text] : expected) {
      if (rig.output_of(id).size() < text.size()) return false;
    }
    return true;
  }));
  for (auto& [id, text] : expected) CHECK(rig.output_of(id) == text);
}

TEST_CASE("transport loss ends the loop and leaves payloads running") {
  auto emu = std::make_shared<Emulator>();
  PayloadHost host;
  Implant implant(connect("loopback", emu), host, fast_config());
  emu->enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "cat"));
  std::atomic<bool> done{false};
  LoopExit exit_reason = LoopExit::Stopped;
  std::jthread loop([&](std::stop_token st) {
    exit_reason = implant.run(st);
    done = true;
  });
  REQUIRE(oracle::eventually([&] { return !host.sessions().empty(); }, 3000ms));
  implant.transport().close();
  REQUIRE(oracle::eventually([&] { return done.load(); }, 3000ms));
  CHECK(exit_reason == LoopExit::ChannelDown);
  CHECK_FALSE(host.find(1)->exited());
}
