#include "msdcat/console.hpp"
#include "msdcat/error.hpp"
#include "support/oracles.hpp"
#include "support/rig.hpp"

#include <doctest.h>

#include <fstream>

using namespace msdcat;
using namespace std::chrono_literals;
using testrig::LiveChannel;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no Error thrown");
  return ErrorCode::BadCsv;
}

bool ends_with_nl(const std::string& s) { return !s.empty() && s.back() == '\n'; }

}  // namespace

TEST_CASE("no implant") {
  auto emu = std::make_shared<Emulator>();
  Console console(emu);
  CHECK_FALSE(console.implant_alive());
  CHECK(code_of([&] { console.open_session("sh"); }) == ErrorCode::NoImplant);
  CHECK(code_of([&] { console.read_output(1, 0); }) == ErrorCode::UnknownSession);
}

TEST_CASE("liveness window follows the last poll") {
  auto emu = std::make_shared<Emulator>(16, testrig::poll_config(20ms));
  Console console(emu);
  emu->handle_exchange(ScsiExchange::command(scsi::Cdb::test_unit_ready(scsi::ControlByte{0x80})));
  CHECK(console.implant_alive());
  std::this_thread::sleep_for(250ms);
  CHECK_FALSE(console.implant_alive());
}

TEST_CASE("sessions get consecutive ids and carry output") {
  LiveChannel ch;
  const auto a = ch.console.open_session("/bin/sh");
  const auto b = ch.console.open_session("/bin/sh");
  CHECK(a == 1);
  CHECK(b == 2);
  CHECK(ch.console.wait_state_change(a, 5s) == SessionState::Active);
  CHECK(ch.console.wait_state_change(b, 5s) == SessionState::Active);

  ch.console.exec(a, "echo hi");
  CHECK(ch.read_until(a, ends_with_nl) == "hi\n");
  CHECK(ch.console.read_output(b, 0).bytes.empty());

  ch.console.close_session(a);
  REQUIRE(oracle::eventually(
      [&] { return ch.console.session(a).state == SessionState::Closed; }, 5000ms));
  CHECK(ch.console.session(a).exit_status.has_value());
  CHECK(code_of([&] { ch.console.exec(a, "echo again"); }) == ErrorCode::SessionClosed);
  CHECK(code_of([&] { ch.console.exec(99, "x"); }) == ErrorCode::UnknownSession);
  CHECK(ch.console.sessions().size() == 2);
}

TEST_CASE("output offsets compose") {
  LiveChannel ch;
  const auto id = ch.console.open_session("/bin/sh");
  ch.console.exec(id, "printf 'abcdefgh\\n'");
  ch.read_until(id, ends_with_nl);
  const auto all = ch.console.read_output(id, 0);
  CHECK(all.text() == "abcdefgh\n");
  CHECK(all.next_offset == 9);
  const auto head = ch.console.read_output(id, 0).text().substr(0, 4);
  const auto tail = ch.console.read_output(id, 4);
  CHECK(head + tail.text() == all.text());
  CHECK(tail.next_offset == all.next_offset);
  CHECK(ch.console.read_output(id, all.next_offset).bytes.empty());
  CHECK(ch.console.read_output(id, 1000).bytes.empty());
}

TEST_CASE("ring retains the newest bytes") {
  ConsoleConfig cfg;
  cfg.ring_bytes = 1000;
  LiveChannel ch(100ms, cfg);
  const auto id = ch.console.open_session("head -c 5000 /dev/zero");
  REQUIRE(oracle::eventually(
      [&] { return ch.console.session(id).state == SessionState::Closed; }, 5000ms));
  const auto slice = ch.console.read_output(id, 0);
  CHECK(slice.bytes.size() == 1000);
  CHECK(slice.base_offset == 4000);
  CHECK(slice.next_offset == 5000);
  CHECK(ch.console.session(id).bytes_out == 5000);
}

TEST_CASE("file push") {
  LiveChannel ch;
  const auto dir = make_temp_drop_dir();

  SUBCASE("1 MiB with matching crc") {
    const auto data = oracle::random_bytes(1 << 20, 21);
    std::ofstream(dir / "src.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    const auto report = ch.console.push_file(dir / "src.bin", "up/dst.bin");
    CHECK(report.bytes == data.size());
    CHECK(report.chunks == (data.size() + 503) / 504);
    CHECK(report.crc32 == oracle::crc32(data));
    const auto status = ch.console.wait_transfer(report.transfer_id, 60s);
    REQUIRE(status.has_value());
    CHECK(status->state == TransferState::Delivered);
    CHECK(status->remote_crc32 == oracle::crc32(data));
    CHECK(status->remote_bytes == data.size());
    CHECK(std::filesystem::file_size(ch.host.drop_dir() / "up/dst.bin") == data.size());
  }
  SUBCASE("zero-byte file") {
    std::ofstream(dir / "empty");
    const auto report = ch.console.push_file(dir / "empty", "");
    CHECK(report.chunks == 0);
    CHECK(report.remote_name == "empty");
    const auto status = ch.console.wait_transfer(report.transfer_id, 10s);
    REQUIRE(status.has_value());
    CHECK(status->state == TransferState::Delivered);
    CHECK(std::filesystem::exists(ch.host.drop_dir() / "empty"));
  }
  SUBCASE("transfer ids share the session id space") {
    const auto s = ch.console.open_session("cat");
    const auto t = ch.console.push_bytes("x", {1, 2, 3});
    CHECK(t.transfer_id == s + 1);
    CHECK(ch.console.wait_transfer(t.transfer_id, 10s).has_value());
  }
  SUBCASE("rejections") {
    CHECK(code_of([&] { ch.console.push_file(dir / "missing", ""); }) == ErrorCode::FileNotFound);
    CHECK(code_of([&] { ch.console.push_bytes("../x", {1}); }) == ErrorCode::PathRejected);
  }
}

TEST_CASE("file size cap") {
  auto emu = std::make_shared<Emulator>();
  ConsoleConfig cfg;
  cfg.max_file_bytes = 100;
  Console console(emu, cfg);
  CHECK(code_of([&] { console.push_bytes("big", std::vector<std::uint8_t>(101)); }) ==
        ErrorCode::TooLarge);
  CHECK_NOTHROW(console.push_bytes("ok", std::vector<std::uint8_t>(100)));
}

TEST_CASE("stats are monotonic and the idle cadence matches the poll interval") {
  LiveChannel ch(500ms);
  auto prev = ch.console.stats();
  const auto start_polls = prev.polls_observed;
  const auto start = Clock::now();
  while (Clock::now() - start < 10s) {
    std::this_thread::sleep_for(250ms);
    const auto s = ch.console.stats();
    CHECK(s.polls_observed >= prev.polls_observed);
    CHECK(s.covert_reads >= prev.covert_reads);
    CHECK(s.covert_writes >= prev.covert_writes);
    prev = s;
  }
  const auto polls = prev.polls_observed - start_polls;
  CHECK(polls >= 18);
  CHECK(polls <= 22);
  CHECK(prev.covert_reads == 0);
}

TEST_CASE("version advances on change") {
  LiveChannel ch;
  const auto v0 = ch.console.version();
  ch.console.open_session("cat");
  CHECK(ch.console.wait_version(v0, 1s) > v0);
}
