#pragma once

// Spawns console payloads as child processes and relays their stdin/stdout
// through pipes, netcat style. stderr is merged into stdout. Each payload
// owns a stdin writer, a stdout reader and a reaper thread; hand-off to
// the channel goes through bounded buffers.

#include "msdcat/datagram.hpp"
#include "msdcat/transport.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace msdcat {

/// Splits a command line on whitespace, honouring '…' and "…" quoting and
/// backslash escapes.
std::vector<std::string> split_command_line(std::string_view line);

/// Resolves argv[0] against PATH the way execvp would. Empty if not found.
std::optional<std::filesystem::path> resolve_executable(const std::string& name);

struct DrainResult {
  std::vector<std::uint8_t> bytes;
  bool end_of_stream = false;
};

class PayloadProcess {
 public:
  static constexpr std::size_t kStdoutBufferLimit = 1u << 20;
  static constexpr std::size_t kStdinQueueLimit = 4u << 20;
  static constexpr Duration kTerminateGrace = std::chrono::seconds(2);

  /// Throws Error{SpawnFailed}.
  PayloadProcess(std::uint16_t session_id, std::string command_line,
                 const std::filesystem::path& working_dir);
  ~PayloadProcess();

  PayloadProcess(const PayloadProcess&) = delete;
  PayloadProcess& operator=(const PayloadProcess&) = delete;

  std::uint16_t session_id() const { return session_id_; }
  const std::string& command_line() const { return command_line_; }
  int pid() const { return pid_; }

  /// Queues bytes for the child's stdin; throws Error{ProcessExited}.
  void write_stdin(std::span<const std::uint8_t> data);
  /// Delivers EOF to the child once queued input has been written.
  void close_stdin();

  /// Non-blocking; returns at most `max` buffered bytes.
  DrainResult drain_stdout(std::size_t max);

  /// Blocks until output is buffered, the stream ends, or `timeout` passes.
  bool wait_readable(Duration timeout);

  /// Graceful termination of the payload's process group, escalating to
  /// SIGKILL after the grace period. Returns the exit status.
  int terminate(Duration grace = kTerminateGrace);

  bool exited() const;
  std::optional<int> exit_status() const;
  /// Returns the exit status, or nullopt on timeout.
  std::optional<int> wait_exit(Duration timeout);

 private:
  void reader_loop(int fd);
  void writer_loop(int fd);
  void reaper_loop();

  std::uint16_t session_id_;
  std::string command_line_;
  int pid_ = -1;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::uint8_t> stdout_buf_;
  bool stdout_eof_ = false;
  std::deque<std::vector<std::uint8_t>> stdin_queue_;
  std::size_t stdin_queued_bytes_ = 0;
  bool stdin_closing_ = false;
  bool stdin_broken_ = false;
  bool closing_ = false;
  std::optional<int> exit_status_;

  std::thread reader_;
  std::thread writer_;
  std::thread reaper_;
};

struct FileReceipt {
  std::filesystem::path path;
  std::uint64_t bytes_written = 0;
  std::uint32_t crc32 = 0;
  bool complete = false;
};

/// FILE_BEGIN payload: size(8, BE) | relative name.  FILE_END payload: crc32(4, BE).
Datagram make_file_begin(std::uint16_t transfer_id, std::uint64_t size, std::string_view name);
Datagram make_file_end(std::uint16_t transfer_id, std::uint16_t seq, std::uint32_t crc);

/// Accepts a relative path with no "..", "." or absolute components.
std::filesystem::path checked_drop_path(const std::filesystem::path& drop_dir,
                                        std::string_view name);

/// Reassembles one FILE_BEGIN / FILE_CHUNK... / FILE_END transfer.
class FileAssembler {
 public:
  /// Throws PathRejected.
  FileAssembler(const std::filesystem::path& drop_dir, const Datagram& begin);

  /// Throws OutOfOrderChunk.
  void chunk(const Datagram& d);
  /// Throws CrcMismatch (the partial file is removed) or OutOfOrderChunk.
  FileReceipt finish(const Datagram& end);

  const FileReceipt& receipt() const { return receipt_; }

 private:
  std::ofstream out_;
  FileReceipt receipt_;
  std::uint16_t expected_seq_;
};

/// Assembles a complete transfer in one call.
FileReceipt receive_file(const std::filesystem::path& drop_dir, std::span<const Datagram> datagrams);

/// Creates a fresh per-run directory under the system temp dir.
std::filesystem::path make_temp_drop_dir();

class PayloadHost {
 public:
  static constexpr std::size_t kDefaultMaxSessions = 16;

  explicit PayloadHost(std::filesystem::path drop_dir = make_temp_drop_dir(),
                       std::size_t max_sessions = kDefaultMaxSessions);
  ~PayloadHost();

  /// Throws DuplicateSession, TooManySessions or SpawnFailed.
  PayloadProcess& launch(const std::string& command_line, std::uint16_t session_id);

  /// Throws UnknownSession / ProcessExited.
  void write_stdin(std::uint16_t session_id, std::span<const std::uint8_t> data);
  DrainResult drain_stdout(std::uint16_t session_id, std::size_t max);

  /// Terminates and forgets the session; throws UnknownSession.
  int terminate(std::uint16_t session_id);

  PayloadProcess* find(std::uint16_t session_id);
  std::vector<std::uint16_t> sessions() const;

  /// Feeds one FILE_* datagram. Returns a receipt when the transfer ends.
  std::optional<FileReceipt> receive_file_datagram(const Datagram& d);

  const std::filesystem::path& drop_dir() const { return drop_dir_; }

 private:
  std::filesystem::path drop_dir_;
  std::size_t max_sessions_;
  mutable std::mutex mu_;
  std::map<std::uint16_t, std::unique_ptr<PayloadProcess>> processes_;
  std::map<std::uint16_t, std::unique_ptr<FileAssembler>> transfers_;
};

}  // namespace msdcat
