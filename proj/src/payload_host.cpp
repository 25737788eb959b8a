#include "msdcat/payload_host.hpp"

#include "msdcat/error.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace msdcat {

namespace fs = std::filesystem;

std::vector<std::string> split_command_line(std::string_view line) {
  std::vector<std::string> args;
  std::string current;
  bool in_token = false;
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote != 0) {
      if (c == quote) {
        quote = 0;
      } else if (c == '\\' && quote == '"' && i + 1 < line.size()) {
        current += line[++i];
      } else {
        current += c;
      }
    } else if (c == '\'' || c == '"') {
      quote = c;
      in_token = true;
    } else if (c == '\\' && i + 1 < line.size()) {
      current += line[++i];
      in_token = true;
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (in_token) {
        args.push_back(std::move(current));
        current.clear();
        in_token = false;
      }
    } else {
      current += c;
      in_token = true;
    }
  }
  if (in_token) {
    args.push_back(std::move(current));
  }
  return args;
}

std::optional<fs::path> resolve_executable(const std::string& name) {
  if (name.empty()) {
    return std::nullopt;
  }
  auto executable = [](const fs::path& p) {
    struct stat st {};
    return ::stat(p.c_str(), &st) == 0 && S_ISREG(st.st_mode) && ::access(p.c_str(), X_OK) == 0;
  };
  if (name.find('/') != std::string::npos) {
    return executable(name) ? std::optional<fs::path>(fs::absolute(name)) : std::nullopt;
  }
  const char* env = std::getenv("PATH");
  const std::string path = env != nullptr ? env : "/usr/local/bin:/usr/bin:/bin";
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto end = std::min(path.find(':', start), path.size());
    const fs::path dir = end > start ? fs::path(path.substr(start, end - start)) : fs::path(".");
    if (executable(dir / name)) {
      return fs::absolute(dir / name);
    }
    start = end + 1;
  }
  return std::nullopt;
}

namespace {

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

int decode_wait_status(int status) {
  if (WIFEXITED(status)) {
    return WEXITSTATUS(status);
  }
  if (WIFSIGNALED(status)) {
    return 128 + WTERMSIG(status);
  }
  return -1;
}

[[noreturn]] void spawn_failed(const std::string& what) {
  throw Error(ErrorCode::SpawnFailed, what);
}

}  // namespace

PayloadProcess::PayloadProcess(std::uint16_t session_id, std::string command_line,
                               const fs::path& working_dir)
    : session_id_(session_id), command_line_(std::move(command_line)) {
  ignore_sigpipe();
  const auto args = split_command_line(command_line_);
  if (args.empty()) {
    spawn_failed("empty command line");
  }
  const auto exe = resolve_executable(args[0]);
  if (!exe) {
    spawn_failed(args[0] + ": command not found");
  }

  // Everything the child touches is prepared before fork.
  std::vector<char*> argv;
  for (const auto& a : args) {
    argv.push_back(const_cast<char*>(a.c_str()));
  }
  argv.push_back(nullptr);
  const std::string exe_path = exe->string();
  const std::string cwd = working_dir.string();

  int in_pipe[2];
  int out_pipe[2];
  int err_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) {
    spawn_failed(std::strerror(errno));
  }
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    spawn_failed(std::strerror(errno));
  }
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) {
      ::close(fd);
    }
    spawn_failed(std::strerror(errno));
  }

  const pid_t pid = ::fork();
  if (pid < 0) {
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) {
      ::close(fd);
    }
    spawn_failed(std::strerror(errno));
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    ::signal(SIGPIPE, SIG_DFL);
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(out_pipe[1], STDERR_FILENO);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) {
      const int e = errno;
      [[maybe_unused]] auto n = ::write(err_pipe[1], &e, sizeof(e));
      ::_exit(127);
    }
    ::execv(exe_path.c_str(), argv.data());
    const int e = errno;
    [[maybe_unused]] auto n = ::write(err_pipe[1], &e, sizeof(e));
    ::_exit(127);
  }

  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);
  int child_errno = 0;
  ssize_t n = 0;
  do {
    n = ::read(err_pipe[0], &child_errno, sizeof(child_errno));
  } while (n < 0 && errno == EINTR);
  ::close(err_pipe[0]);
  if (n > 0) {
    int status = 0;
    ::waitpid(pid, &status, 0);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    spawn_failed(args[0] + ": " + std::strerror(child_errno));
  }

  pid_ = pid;
  reaper_ = std::thread([this] { reaper_loop(); });
  reader_ = std::thread([this, fd = out_pipe[0]] { reader_loop(fd); });
  writer_ = std::thread([this, fd = in_pipe[1]] { writer_loop(fd); });
}

PayloadProcess::~PayloadProcess() {
  if (!exited()) {
    terminate();
  }
  {
    std::lock_guard lock(mu_);
    closing_ = true;
  }
  close_stdin();
  if (writer_.joinable()) {
    writer_.join();
  }
  if (reader_.joinable()) {
    reader_.join();
  }
  if (reaper_.joinable()) {
    reaper_.join();
  }
}

void PayloadProcess::reaper_loop() {
  int status = 0;
  pid_t r = 0;
  do {
    r = ::waitpid(pid_, &status, 0);
  } while (r < 0 && errno == EINTR);
  {
    std::lock_guard lock(mu_);
    exit_status_ = r == pid_ ? decode_wait_status(status) : -1;
  }
  cv_.notify_all();
}

void PayloadProcess::reader_loop(int fd) {
  std::vector<std::uint8_t> buf(64 * 1024);
  for (;;) {
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return closing_ || stdout_buf_.size() < kStdoutBufferLimit; });
    }
    const ssize_t n = ::read(fd, buf.data(), buf.size());
    if (n < 0 && errno == EINTR) {
      continue;
    }
    if (n <= 0) {
      break;
    }
    {
      std::lock_guard lock(mu_);
      stdout_buf_.insert(stdout_buf_.end(), buf.begin(), buf.begin() + n);
    }
    cv_.notify_all();
  }
  ::close(fd);
  {
    std::lock_guard lock(mu_);
    stdout_eof_ = true;
  }
  cv_.notify_all();
}

void PayloadProcess::writer_loop(int fd) {
  for (;;) {
    std::vector<std::uint8_t> chunk;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return !stdin_queue_.empty() || stdin_closing_ || stdin_broken_; });
      if (stdin_queue_.empty() || stdin_broken_) {
        break;
      }
      chunk = std::move(stdin_queue_.front());
      stdin_queue_.pop_front();
      stdin_queued_bytes_ -= chunk.size();
    }
    cv_.notify_all();
    std::span<const std::uint8_t> rest(chunk);
    while (!rest.empty()) {
      const ssize_t n = ::write(fd, rest.data(), rest.size());
      if (n < 0 && errno == EINTR) {
        continue;
      }
      if (n < 0) {
        std::lock_guard lock(mu_);
        stdin_broken_ = true;
        stdin_queue_.clear();
        stdin_queued_bytes_ = 0;
        break;
      }
      rest = rest.subspan(static_cast<std::size_t>(n));
    }
  }
  ::close(fd);
  cv_.notify_all();
}

void PayloadProcess::write_stdin(std::span<const std::uint8_t> data) {
  std::unique_lock lock(mu_);
  auto gone = [&] { return exit_status_.has_value() || stdin_broken_ || stdin_closing_; };
  if (gone()) {
    throw Error(ErrorCode::ProcessExited, "session " + std::to_string(session_id_));
  }
  cv_.wait(lock, [&] { return gone() || stdin_queued_bytes_ < kStdinQueueLimit; });
  if (gone()) {
    throw Error(ErrorCode::ProcessExited, "session " + std::to_string(session_id_));
  }
  stdin_queue_.emplace_back(data.begin(), data.end());
  stdin_queued_bytes_ += data.size();
  lock.unlock();
  cv_.notify_all();
}

void PayloadProcess::close_stdin() {
  {
    std::lock_guard lock(mu_);
    stdin_closing_ = true;
  }
  cv_.notify_all();
}

DrainResult PayloadProcess::drain_stdout(std::size_t max) {
  DrainResult out;
  {
    std::lock_guard lock(mu_);
    const std::size_t n = std::min(max, stdout_buf_.size());
    out.bytes.assign(stdout_buf_.begin(), stdout_buf_.begin() + static_cast<std::ptrdiff_t>(n));
    stdout_buf_.erase(stdout_buf_.begin(), stdout_buf_.begin() + static_cast<std::ptrdiff_t>(n));
    out.end_of_stream = stdout_eof_ && stdout_buf_.empty();
  }
  cv_.notify_all();
  return out;
}

bool PayloadProcess::wait_readable(Duration timeout) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return !stdout_buf_.empty() || stdout_eof_; });
}

int PayloadProcess::terminate(Duration grace) {
  close_stdin();
  if (auto status = wait_exit(Duration::zero())) {
    return *status;
  }
  // The reaper has not collected the child yet, so the pid cannot be reused.
  ::kill(-pid_, SIGTERM);
  ::kill(pid_, SIGTERM);
  if (auto status = wait_exit(grace)) {
    return *status;
  }
  ::kill(-pid_, SIGKILL);
  ::kill(pid_, SIGKILL);
  return wait_exit(std::chrono::hours(1)).value_or(-1);
}

bool PayloadProcess::exited() const {
  std::lock_guard lock(mu_);
  return exit_status_.has_value();
}

std::optional<int> PayloadProcess::exit_status() const {
  std::lock_guard lock(mu_);
  return exit_status_;
}

std::optional<int> PayloadProcess::wait_exit(Duration timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return exit_status_.has_value(); });
  return exit_status_;
}

Datagram make_file_begin(std::uint16_t transfer_id, std::uint64_t size, std::string_view name) {
  std::vector<std::uint8_t> payload;
  for (int shift = 56; shift >= 0; shift -= 8) {
    payload.push_back(static_cast<std::uint8_t>(size >> shift));
  }
  payload.insert(payload.end(), name.begin(), name.end());
  return Datagram::make(DatagramType::FileBegin, transfer_id, 0, payload);
}

Datagram make_file_end(std::uint16_t transfer_id, std::uint16_t seq, std::uint32_t crc) {
  const std::array<std::uint8_t, 4> payload{
      static_cast<std::uint8_t>(crc >> 24), static_cast<std::uint8_t>(crc >> 16),
      static_cast<std::uint8_t>(crc >> 8), static_cast<std::uint8_t>(crc)};
  return Datagram::make(DatagramType::FileEnd, transfer_id, seq, payload);
}

fs::path checked_drop_path(const fs::path& drop_dir, std::string_view name) {
  const fs::path rel(name);
  if (name.empty() || name.find('\0') != std::string_view::npos ||
      name.find("//") != std::string_view::npos || name.back() == '/' || rel.is_absolute() ||
      rel.has_root_name() || rel.has_root_directory()) {
    throw Error(ErrorCode::PathRejected, std::string(name));
  }
  for (const auto& part : rel) {
    if (part == ".." || part == "." || part.empty()) {
      throw Error(ErrorCode::PathRejected, std::string(name));
    }
  }
  return drop_dir / rel;
}

FileAssembler::FileAssembler(const fs::path& drop_dir, const Datagram& begin)
    : expected_seq_(static_cast<std::uint16_t>(begin.seq + 1)) {
  if (begin.type != DatagramType::FileBegin || begin.payload.size() < 8) {
    throw Error(ErrorCode::MalformedDatagram, "expected FILE_BEGIN");
  }
  const std::string_view name(reinterpret_cast<const char*>(begin.payload.data()) + 8,
                              begin.payload.size() - 8);
  receipt_.path = checked_drop_path(drop_dir, name);
  fs::create_directories(receipt_.path.parent_path());
  out_.open(receipt_.path, std::ios::binary | std::ios::trunc);
  if (!out_) {
    throw Error(ErrorCode::PathRejected, "cannot create " + receipt_.path.string());
  }
}

void FileAssembler::chunk(const Datagram& d) {
  if (d.seq != expected_seq_) {
    throw Error(ErrorCode::OutOfOrderChunk, "expected seq " + std::to_string(expected_seq_) +
                                                ", got " + std::to_string(d.seq));
  }
  ++expected_seq_;
  out_.write(reinterpret_cast<const char*>(d.payload.data()),
             static_cast<std::streamsize>(d.payload.size()));
  receipt_.crc32 = crc32(d.payload, receipt_.crc32);
  receipt_.bytes_written += d.payload.size();
}

FileReceipt FileAssembler::finish(const Datagram& end) {
  if (end.seq != expected_seq_) {
    throw Error(ErrorCode::OutOfOrderChunk, "FILE_END out of order");
  }
  if (end.payload.size() != 4) {
    throw Error(ErrorCode::MalformedDatagram, "FILE_END without CRC");
  }
  out_.close();
  const std::uint32_t expected = (std::uint32_t{end.payload[0]} << 24) |
                                 (std::uint32_t{end.payload[1]} << 16) |
                                 (std::uint32_t{end.payload[2]} << 8) | end.payload[3];
  if (expected != receipt_.crc32) {
    std::error_code ec;
    fs::remove(receipt_.path, ec);
    throw Error(ErrorCode::CrcMismatch, receipt_.path.filename().string());
  }
  receipt_.complete = true;
  return receipt_;
}

FileReceipt receive_file(const fs::path& drop_dir, std::span<const Datagram> datagrams) {
  if (datagrams.empty()) {
    throw Error(ErrorCode::MalformedDatagram, "empty transfer");
  }
  FileAssembler assembler(drop_dir, datagrams.front());
  for (const auto& d : datagrams.subspan(1)) {
    switch (d.type) {
      case DatagramType::FileChunk:
        assembler.chunk(d);
        break;
      case DatagramType::FileEnd:
        return assembler.finish(d);
      default:
        throw Error(ErrorCode::MalformedDatagram, std::string("unexpected ") + to_string(d.type));
    }
  }
  throw Error(ErrorCode::OutOfOrderChunk, "transfer ended without FILE_END");
}

fs::path make_temp_drop_dir() {
  std::string tmpl = (fs::temp_directory_path() / "msdcat-drop-XXXXXX").string();
  if (::mkdtemp(tmpl.data()) == nullptr) {
    throw Error(ErrorCode::PathRejected, "mkdtemp failed: " + std::string(std::strerror(errno)));
  }
  return tmpl;
}

PayloadHost::PayloadHost(fs::path drop_dir, std::size_t max_sessions)
    : drop_dir_(std::move(drop_dir)), max_sessions_(max_sessions) {
  fs::create_directories(drop_dir_);
}

PayloadHost::~PayloadHost() {
  std::map<std::uint16_t, std::unique_ptr<PayloadProcess>> doomed;
  {
    std::lock_guard lock(mu_);
    doomed.swap(processes_);
  }
  doomed.clear();
}

PayloadProcess& PayloadHost::launch(const std::string& command_line, std::uint16_t session_id) {
  std::lock_guard lock(mu_);
  if (processes_.contains(session_id)) {
    throw Error(ErrorCode::DuplicateSession, "session " + std::to_string(session_id));
  }
  if (processes_.size() >= max_sessions_) {
    throw Error(ErrorCode::TooManySessions, std::to_string(max_sessions_) + " sessions running");
  }
  auto proc = std::make_unique<PayloadProcess>(session_id, command_line, drop_dir_);
  auto& ref = *proc;
  processes_.emplace(session_id, std::move(proc));
  return ref;
}

PayloadProcess* PayloadHost::find(std::uint16_t session_id) {
  std::lock_guard lock(mu_);
  const auto it = processes_.find(session_id);
  return it == processes_.end() ? nullptr : it->second.get();
}

void PayloadHost::write_stdin(std::uint16_t session_id, std::span<const std::uint8_t> data) {
  auto* p = find(session_id);
  if (p == nullptr) {
    throw Error(ErrorCode::UnknownSession, "session " + std::to_string(session_id));
  }
  p->write_stdin(data);
}

DrainResult PayloadHost::drain_stdout(std::uint16_t session_id, std::size_t max) {
  auto* p = find(session_id);
  if (p == nullptr) {
    throw Error(ErrorCode::UnknownSession, "session " + std::to_string(session_id));
  }
  return p->drain_stdout(max);
}

int PayloadHost::terminate(std::uint16_t session_id) {
  std::unique_ptr<PayloadProcess> proc;
  {
    std::lock_guard lock(mu_);
    const auto it = processes_.find(session_id);
    if (it == processes_.end()) {
      throw Error(ErrorCode::UnknownSession, "session " + std::to_string(session_id));
    }
    proc = std::move(it->second);
    processes_.erase(it);
  }
  return proc->terminate();
}

std::vector<std::uint16_t> PayloadHost::sessions() const {
  std::lock_guard lock(mu_);
  std::vector<std::uint16_t> ids;
  for (const auto& [id, _] : processes_) {
    ids.push_back(id);
  }
  return ids;
}

std::optional<FileReceipt> PayloadHost::receive_file_datagram(const Datagram& d) {
  std::lock_guard lock(mu_);
  switch (d.type) {
    case DatagramType::FileBegin:
      transfers_[d.session_id] = std::make_unique<FileAssembler>(drop_dir_, d);
      return std::nullopt;
    case DatagramType::FileChunk:
    case DatagramType::FileEnd: {
      const auto it = transfers_.find(d.session_id);
      if (it == transfers_.end()) {
        throw Error(ErrorCode::OutOfOrderChunk, "no FILE_BEGIN for transfer " +
                                                    std::to_string(d.session_id));
      }
      try {
        if (d.type == DatagramType::FileChunk) {
          it->second->chunk(d);
          return std::nullopt;
        }
        auto receipt = it->second->finish(d);
        transfers_.erase(it);
        return receipt;
      } catch (...) {
        transfers_.erase(it);
        throw;
      }
    }
    default:
      throw Error(ErrorCode::MalformedDatagram, std::string("not a file datagram: ") +
                                                    to_string(d.type));
  }
}

}  // namespace msdcat
