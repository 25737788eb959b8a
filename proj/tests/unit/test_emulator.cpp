#include "msdcat/emulator.hpp"
#include "msdcat/error.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <set>

using namespace msdcat;
using namespace std::chrono_literals;
using Bytes = std::vector<std::uint8_t>;

namespace {

const scsi::ControlByte kCovert{0x80};

ScsiExchange covert_poll() { return ScsiExchange::command(scsi::Cdb::test_unit_ready(kCovert)); }
ScsiExchange covert_read(std::uint16_t blocks) {
  return ScsiExchange::command(scsi::Cdb::read10(0, blocks, kCovert));
}

Duration timed(Emulator& emu, const ScsiExchange& x, ScsiResponse* out = nullptr) {
  const auto start = Clock::now();
  auto r = emu.handle_exchange(x);
  const auto elapsed = Clock::now() - start;
  if (out != nullptr) *out = std::move(r);
  return elapsed;
}

}  // namespace

TEST_CASE("block store") {
  BlockStore store(100);
  CHECK(store.read(5, 2) == Bytes(1024, 0));
  const auto data = oracle::random_bytes(1024, 1);
  store.write(10, data);
  CHECK(store.read(10, 2) == data);
  CHECK(store.read(11, 1) == Bytes(data.begin() + 512, data.end()));
  CHECK_THROWS_AS(store.read(99, 2), Error);
  CHECK_THROWS_AS(store.write(100, Bytes(512, 1)), Error);
  CHECK_NOTHROW(store.read(99, 1));

  const auto path = std::filesystem::temp_directory_path() / "msdcat-store-test.img";
  store.write(99, Bytes(512, 0x5A));
  store.save_image(path);
  CHECK(std::filesystem::file_size(path) == 100 * 512);
  BlockStore copy(100);
  copy.load_image(path);
  CHECK(copy.snapshot() == store.snapshot());
  std::filesystem::remove(path);
}

TEST_CASE("normal frames use the block store") {
  Emulator emu(64);
  const auto block = oracle::random_bytes(512, 2);
  auto w = emu.handle_exchange(ScsiExchange::write(scsi::Cdb::write10(7, 1), block));
  CHECK(w.status == ScsiStatus::Good);
  auto r = emu.handle_exchange(ScsiExchange::command(scsi::Cdb::read10(7, 1)));
  CHECK(r.status == ScsiStatus::Good);
  CHECK(r.data_in == block);

  CHECK(emu.handle_exchange(ScsiExchange::command(scsi::Cdb::read10(64, 1))).status ==
        ScsiStatus::CheckCondition);
  CHECK(emu.handle_exchange(ScsiExchange::write(scsi::Cdb::write10(1, 2), block)).status ==
        ScsiStatus::CheckCondition);
  CHECK(emu.stats().normal_frames == 4);
}

TEST_CASE("normal TEST UNIT READY is never delayed") {
  Emulator emu;
  emu.enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "sh"));
  CHECK(timed(emu, ScsiExchange::command(scsi::Cdb::test_unit_ready())) < 20ms);
  CHECK(emu.stats().polls_observed == 0);
}

TEST_CASE("covert poll delay discipline") {
  Emulator emu;
  ScsiResponse r;
  CHECK(timed(emu, covert_poll(), &r) < 20ms);
  CHECK(r.status == ScsiStatus::Good);
  CHECK(emu.stats().pending_signals_sent == 0);

  emu.enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "sh"));
  CHECK(timed(emu, covert_poll(), &r) >= 40ms);
  CHECK(r.status == ScsiStatus::Good);
  const auto s = emu.stats();
  CHECK(s.polls_observed == 2);
  CHECK(s.pending_signals_sent == 1);
  CHECK(s.last_delay_applied_ms == doctest::Approx(40.0));
  CHECK(emu.last_poll().has_value());
}

TEST_CASE("covert READ(10) returns a hand-packed OPEN then PAD fill") {
  Emulator emu;
  emu.enqueue_command(Datagram::make(DatagramType::Open, 1, 0, "shell"));
  const auto r = emu.handle_exchange(covert_read(1));
  Bytes expected(512, 0);
  const Bytes head{0x01, 0x01, 0x00, 0x01, 0x00, 0x00, 0x00, 0x05, 's', 'h', 'e', 'l', 'l'};
  std::copy(head.begin(), head.end(), expected.begin());
  CHECK(r.data_in == expected);
  CHECK(emu.queue_depth() == 0);
}

TEST_CASE("covert READ(10) with an empty queue returns PAD only") {
  Emulator emu;
  const auto r = emu.handle_exchange(covert_read(2));
  CHECK(r.status == ScsiStatus::Good);
  CHECK(r.data_in == Bytes(1024, 0));
}

TEST_CASE("enqueue x3 then one large covert read: FIFO") {
  Emulator emu;
  for (std::uint16_t i = 0; i < 3; ++i) {
    emu.enqueue_command(Datagram::make(DatagramType::Data, 4, i, "cmd" + std::to_string(i)));
  }
  const auto ds = unpack_datagrams(emu.handle_exchange(covert_read(8)).data_in);
  REQUIRE(ds.size() == 3);
  for (std::uint16_t i = 0; i < 3; ++i) {
    CHECK(ds[i].seq == i);
    CHECK(ds[i].text() == "cmd" + std::to_string(i));
  }
}

TEST_CASE("queue bound") {
  Emulator emu;
  for (std::size_t i = 0; i < Emulator::kQueueBound; ++i) {
    emu.enqueue_command(Datagram::make(DatagramType::Data, 1, static_cast<std::uint16_t>(i)));
  }
  try {
    emu.enqueue_command(Datagram::make(DatagramType::Data, 1, 0));
    FAIL("expected QueueFull");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::QueueFull);
  }
  CHECK_FALSE(emu.enqueue_when_below(Datagram::make(DatagramType::Data, 1, 0), 10, 20ms));
}

TEST_CASE("covert WRITE(10) collects results; drain removes them") {
  Emulator emu;
  CHECK(emu.drain_results().empty());
  const std::vector<Datagram> ds{Datagram::make(DatagramType::Data, 1, 0, "one"),
                                 Datagram::make(DatagramType::Data, 1, 1, "two")};
  const auto data = pack_blocks(ds);
  auto r = emu.handle_exchange(ScsiExchange::write(scsi::Cdb::write10(0, 1, kCovert), data));
  CHECK(r.status == ScsiStatus::Good);
  CHECK(emu.drain_results() == ds);
  CHECK(emu.drain_results().empty());

  Bytes junk(512, 0);
  junk[0] = 9;
  junk[1] = 2;
  CHECK(emu.handle_exchange(ScsiExchange::write(scsi::Cdb::write10(0, 1, kCovert), junk)).status ==
        ScsiStatus::CheckCondition);
  CHECK(emu.stats().covert_writes == 2);
}

TEST_CASE("covert frames never touch the block store") {
  Emulator emu(16);
  const auto data = pack_blocks(std::vector{Datagram::make(DatagramType::Data, 1, 0, "x")});
  emu.handle_exchange(ScsiExchange::write(scsi::Cdb::write10(0, 1, kCovert), data));
  emu.handle_exchange(covert_read(1));
  CHECK(emu.store().snapshot().empty());
}

TEST_CASE("concurrent console enqueue with serial polling loses nothing") {
  Emulator emu;
  constexpr int kProducers = 4;
  constexpr int kEach = 500;
  std::vector<std::thread> producers;
  for (int p = 0; p < kProducers; ++p) {
    producers.emplace_back([&, p] {
      for (int i = 0; i < kEach; ++i) {
        emu.enqueue_when_below(
            Datagram::make(DatagramType::Data, static_cast<std::uint16_t>(p),
                           static_cast<std::uint16_t>(i)),
            256, 10s);
      }
    });
  }
  std::multiset<std::pair<int, int>> seen;
  std::map<int, int> last;
  while (seen.size() < kProducers * kEach) {
    for (const auto& d : unpack_datagrams(emu.handle_exchange(covert_read(4)).data_in)) {
      seen.insert({d.session_id, d.seq});
      auto [it, fresh] = last.try_emplace(d.session_id, -1);
      CHECK(d.seq == it->second + 1);
      it->second = d.seq;
    }
  }
  for (auto& t : producers) t.join();
  CHECK(seen.size() == kProducers * kEach);
  for (const auto& key : seen) CHECK(seen.count(key) == 1);
}
