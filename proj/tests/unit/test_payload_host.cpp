#include "msdcat/error.hpp"
#include "msdcat/payload_host.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <fstream>

using namespace msdcat;
using namespace std::chrono_literals;
using Bytes = std::vector<std::uint8_t>;

namespace {

std::string read_all(PayloadProcess& p, Duration timeout = 10s) {
  std::string out;
  const auto deadline = Clock::now() + timeout;
  while (Clock::now() < deadline) {
    p.wait_readable(50ms);
    auto d = p.drain_stdout(1 << 20);
    out.append(d.bytes.begin(), d.bytes.end());
    if (d.end_of_stream) break;
  }
  return out;
}

std::string popen_output(const std::string& cmd) {
  std::string out;
  FILE* f = ::popen(cmd.c_str(), "r");
  REQUIRE(f != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  ::pclose(f);
  return out;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no Error thrown");
  return ErrorCode::BadCsv;
}

std::size_t zombie_children() {
  std::size_t zombies = 0;
  const auto self = std::to_string(::getpid());
  for (const auto& entry : std::filesystem::directory_iterator("/proc")) {
    std::ifstream status(entry.path() / "status");
    std::string line, state, ppid;
    while (std::getline(status, line)) {
      if (line.rfind("State:", 0) == 0) state = line;
      if (line.rfind("PPid:", 0) == 0) ppid = line.substr(line.find_first_not_of(" \t", 5));
    }
    if (ppid == self && state.find('Z') != std::string::npos) ++zombies;
  }
  return zombies;
}

Bytes bytes_of(std::string_view s) { return Bytes(s.begin(), s.end()); }

}  // namespace

TEST_CASE("command line splitting") {
  CHECK(split_command_line("ls -la /tmp") == std::vector<std::string>{"ls", "-la", "/tmp"});
  CHECK(split_command_line(R"(sh -c 'echo a  b' "x y" z\ w)") ==
        std::vector<std::string>{"sh", "-c", "echo a  b", "x y", "z w"});
  CHECK(split_command_line("   ").empty());
  CHECK(resolve_executable("sh").has_value());
  CHECK_FALSE(resolve_executable("nonexistent-tool-xyz").has_value());
}

TEST_CASE("shell payload relays stdin to stdout") {
  const auto dir = make_temp_drop_dir();
  PayloadProcess p(1, "/bin/sh", dir);
  p.write_stdin(bytes_of("echo hi\n"));
  p.close_stdin();
  CHECK(read_all(p) == "hi\n");
  CHECK(p.wait_exit(5s) == 0);
}

TEST_CASE("stderr is merged into stdout") {
  PayloadProcess p(1, "sh -c 'echo out; echo err 1>&2'", make_temp_drop_dir());
  CHECK(read_all(p) == "out\nerr\n");
}

TEST_CASE("spawn failure") {
  CHECK(code_of([] { PayloadProcess p(1, "nonexistent-tool-xyz", "/tmp"); }) ==
        ErrorCode::SpawnFailed);
  CHECK(code_of([] { PayloadProcess p(1, "", "/tmp"); }) == ErrorCode::SpawnFailed);
}

TEST_CASE("directory listing is byte-equal to local execution") {
  const auto dir = make_temp_drop_dir();
  std::ofstream(dir / "a.txt") << "alpha";
  std::filesystem::create_directory(dir / "sub");
  PayloadProcess p(3, "ls -1a", dir);
  CHECK(read_all(p) == popen_output("cd '" + dir.string() + "' && ls -1a"));
}

TEST_CASE("split writes compose") {
  PayloadProcess p(1, "/bin/sh", "/tmp");
  p.write_stdin(bytes_of("ec"));
  p.write_stdin(bytes_of("ho A\n"));
  p.close_stdin();
  CHECK(read_all(p) == "A\n");
}

TEST_CASE("write after exit") {
  PayloadProcess p(1, "true", "/tmp");
  REQUIRE(p.wait_exit(5s).has_value());
  CHECK(code_of([&] {
          for (int i = 0; i < 100; ++i) {
            p.write_stdin(bytes_of("x\n"));
            std::this_thread::sleep_for(5ms);
          }
        }) == ErrorCode::ProcessExited);
}

TEST_CASE("large stdin and stdout") {
  SUBCASE("1 MiB into wc -c") {
    PayloadProcess p(1, "wc -c", "/tmp");
    p.write_stdin(oracle::random_bytes(1 << 20, 9));
    p.close_stdin();
    CHECK(std::stoul(read_all(p)) == 1048576u);
  }
  SUBCASE("10000 bytes out") {
    PayloadProcess p(1, "head -c 10000 /dev/zero", "/tmp");
    const auto out = read_all(p);
    CHECK(out == std::string(10000, '\0'));
  }
}

TEST_CASE("drain with nothing buffered") {
  PayloadProcess p(1, "cat", "/tmp");
  const auto d = p.drain_stdout(4096);
  CHECK(d.bytes.empty());
  CHECK_FALSE(d.end_of_stream);
  CHECK_FALSE(p.wait_readable(30ms));
}

TEST_CASE("terminate reaches the process group") {
  PayloadProcess p(1, "sh -c 'sleep 30 & sleep 30; wait'", "/tmp");
  std::this_thread::sleep_for(50ms);
  const auto start = Clock::now();
  p.terminate();
  CHECK(Clock::now() - start < 3s);
  CHECK(p.exited());
  // The grandchild's write end of stdout must be closed too.
  CHECK(oracle::eventually([&] { return p.drain_stdout(16).end_of_stream; }, 3000ms));
}

TEST_CASE("file reassembly") {
  const auto dir = make_temp_drop_dir();
  const auto data = oracle::random_bytes(1500, 4);
  std::uint16_t seq = 1;
  std::vector<Datagram> ds{make_file_begin(7, data.size(), "in/box.bin")};
  auto chunks = chunk_payload(DatagramType::FileChunk, 7, seq, data);
  CHECK(chunks.size() == 3);
  ds.insert(ds.end(), chunks.begin(), chunks.end());
  ds.push_back(make_file_end(7, seq, oracle::crc32(data)));

  SUBCASE("complete") {
    const auto r = receive_file(dir, ds);
    CHECK(r.complete);
    CHECK(r.bytes_written == 1500);
    CHECK(r.crc32 == oracle::crc32(data));
    std::ifstream in(dir / "in/box.bin", std::ios::binary);
    CHECK(Bytes(std::istreambuf_iterator<char>(in), {}) == data);
  }
  SUBCASE("sequence gap") {
    ds.erase(ds.begin() + 2);
    CHECK(code_of([&] { receive_file(dir, ds); }) == ErrorCode::OutOfOrderChunk);
  }
  SUBCASE("crc mismatch removes partial file") {
    ds.back() = make_file_end(7, seq, oracle::crc32(data) ^ 1);
    CHECK(code_of([&] { receive_file(dir, ds); }) == ErrorCode::CrcMismatch);
    CHECK_FALSE(std::filesystem::exists(dir / "in/box.bin"));
  }
  SUBCASE("path escape") {
    ds.front() = make_file_begin(7, data.size(), "../evil");
    CHECK(code_of([&] { receive_file(dir, ds); }) == ErrorCode::PathRejected);
    CHECK_FALSE(std::filesystem::exists(dir.parent_path() / "evil"));
  }
}

TEST_CASE("drop path checks") {
  const std::filesystem::path dir = "/srv/drop";
  CHECK(checked_drop_path(dir, "a/b.txt") == dir / "a/b.txt");
  for (const char* bad : {"", "/etc/passwd", "..", "a/../../b", "./x", "a//b", "a/"}) {
    CHECK_MESSAGE(code_of([&] { checked_drop_path(dir, bad); }) == ErrorCode::PathRejected, std::string(bad));
  }
}

TEST_CASE("payload host sessions") {
  PayloadHost host(make_temp_drop_dir(), 2);
  host.launch("cat", 1);
  CHECK(code_of([&] { host.launch("cat", 1); }) == ErrorCode::DuplicateSession);
  host.launch("cat", 2);
  CHECK(code_of([&] { host.launch("cat", 3); }) == ErrorCode::TooManySessions);
  CHECK(host.sessions() == std::vector<std::uint16_t>{1, 2});
  host.write_stdin(2, bytes_of("two\n"));
  CHECK(oracle::eventually([&] { return host.find(2)->wait_readable(0ms); }, 2000ms));
  CHECK(host.drain_stdout(2, 100).bytes == bytes_of("two\n"));
  host.terminate(1);
  CHECK(code_of([&] { host.terminate(1); }) == ErrorCode::UnknownSession);
  CHECK(code_of([&] { host.write_stdin(9, bytes_of("x")); }) == ErrorCode::UnknownSession);
}

TEST_CASE("1000 launch/terminate cycles leave no zombies") {
  PayloadHost host;
  for (int i = 0; i < 1000; ++i) {
    host.launch("cat", static_cast<std::uint16_t>(i % 8 + 1));
    host.terminate(static_cast<std::uint16_t>(i % 8 + 1));
  }
  CHECK(host.sessions().empty());
  CHECK(zombie_children() == 0);
}
