#pragma once

// Analyst control plane. Embeds the emulator, allocates session ids,
// enqueues commands and routes implant results into per-session output
// rings. The CLI and the HTTP API are both thin frontends over this class.

#include "msdcat/emulator.hpp"
#include "msdcat/implant.hpp"

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace msdcat {

struct ConsoleConfig {
  std::size_t ring_bytes = 64 * 1024;
  std::uint64_t max_file_bytes = 64ull << 20;
  /// Missed polls before the implant is declared gone.
  unsigned liveness_polls = 10;
  /// File chunks are fed into the outbound queue only while it is shallower than this.
  std::size_t file_high_water = 256;
};

struct SessionView {
  std::uint16_t session_id = 0;
  std::string payload_spec;
  SessionState state = SessionState::Opening;
  std::uint64_t bytes_in = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t output_offset = 0;  // next_offset of a full read
  std::optional<int> exit_status;
  std::string last_error;
};

struct OutputSlice {
  std::vector<std::uint8_t> bytes;
  std::uint64_t next_offset = 0;
  /// Oldest offset still retained; above `since` when the ring wrapped.
  std::uint64_t base_offset = 0;

  std::string text() const { return {bytes.begin(), bytes.end()}; }
};

struct TransferReport {
  std::uint16_t transfer_id = 0;
  std::string remote_name;
  std::uint64_t bytes = 0;
  std::size_t chunks = 0;
  std::uint32_t crc32 = 0;
};

enum class TransferState : std::uint8_t { Sending, Delivered, Failed };

const char* to_string(TransferState state);

struct TransferStatus {
  TransferReport report;
  TransferState state = TransferState::Sending;
  std::optional<std::uint32_t> remote_crc32;
  std::optional<std::uint64_t> remote_bytes;
  std::string error;
};

class Console {
 public:
  explicit Console(std::shared_ptr<Emulator> emulator, ConsoleConfig config = {});
  ~Console();

  Console(const Console&) = delete;
  Console& operator=(const Console&) = delete;

  /// Throws NoImplant or QueueFull.
  std::uint16_t open_session(const std::string& payload_spec);
  /// Sends `line` plus a newline; throws UnknownSession, SessionClosed or QueueFull.
  void exec(std::uint16_t session_id, const std::string& line);
  /// Raw bytes to the payload's stdin, split into DATA datagrams.
  void send_input(std::uint16_t session_id, std::span<const std::uint8_t> bytes);
  void close_session(std::uint16_t session_id);

  /// Non-blocking; throws UnknownSession.
  OutputSlice read_output(std::uint16_t session_id, std::uint64_t since) const;
  /// Waits until output beyond `since` exists or the session closes.
  bool wait_output(std::uint16_t session_id, std::uint64_t since, Duration timeout) const;
  /// Waits until the session leaves the Opening state.
  SessionState wait_state_change(std::uint16_t session_id, Duration timeout) const;

  /// Throws FileNotFound or TooLarge. Chunks are fed in the background.
  TransferReport push_file(const std::filesystem::path& local_path, const std::string& remote_name);
  TransferReport push_bytes(const std::string& remote_name, std::vector<std::uint8_t> bytes);
  TransferStatus transfer_status(std::uint16_t transfer_id) const;
  std::optional<TransferStatus> wait_transfer(std::uint16_t transfer_id, Duration timeout) const;

  ChannelStats stats() const;
  std::vector<SessionView> sessions() const;
  SessionView session(std::uint16_t session_id) const;
  bool implant_alive() const;

  /// Bumped on every state or output change; for event streams.
  std::uint64_t version() const;
  std::uint64_t wait_version(std::uint64_t seen, Duration timeout) const;

  Emulator& emulator() { return *emulator_; }
  std::shared_ptr<Emulator> emulator_ptr() { return emulator_; }

 private:
  struct SessionRecord {
    SessionView view;
    std::uint16_t next_seq_out = 0;
    std::uint16_t expected_seq_in = 0;
    std::uint64_t base_offset = 0;
    std::deque<std::uint8_t> ring;
  };

  void pump(std::stop_token stop);
  void route(const Datagram& d);
  void feed_transfer(std::stop_token stop, TransferReport report, std::vector<std::uint8_t> bytes);
  std::uint16_t allocate_id();
  SessionRecord& record(std::uint16_t session_id);
  const SessionRecord& record(std::uint16_t session_id) const;
  void touch();

  std::shared_ptr<Emulator> emulator_;
  ConsoleConfig config_;

  mutable std::mutex mu_;
  mutable std::condition_variable changed_;
  std::uint16_t next_id_ = 1;
  std::uint64_t version_ = 0;
  std::map<std::uint16_t, SessionRecord> sessions_;
  std::map<std::uint16_t, TransferStatus> transfers_;

  struct Feeder {
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread thread;
  };
  std::list<Feeder> feeders_;
  std::jthread pump_;
};

}  // namespace msdcat
