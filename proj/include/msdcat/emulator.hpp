#pragma once

// Analyst-side mass-storage emulator. Normal frames are serviced from a
// block store; frames whose control byte carries the covert bit are routed
// to the covert endpoint:
//
//   covert TEST UNIT READY  -> Good, held back by `delay` while commands wait
//   covert READ(10)         -> queued datagrams packed into the data phase
//   covert WRITE(10)        -> datagrams unpacked into the inbound sink

#include "msdcat/datagram.hpp"
#include "msdcat/transport.hpp"

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <vector>

namespace msdcat {

using namespace std::chrono_literals;

struct PollConfig {
  Duration delay = 40ms;
  Duration poll_interval = 500ms;
  Duration detect_margin = 20ms;
};

/// Sparse LBA -> block map; unwritten blocks read as zeros.
class BlockStore {
 public:
  using Block = std::array<std::uint8_t, scsi::kBlockSize>;

  explicit BlockStore(std::uint64_t capacity_blocks) : capacity_(capacity_blocks) {}

  std::uint64_t capacity_blocks() const { return capacity_; }
  bool in_range(std::uint64_t lba, std::uint64_t count) const {
    return lba <= capacity_ && count <= capacity_ - lba;
  }

  /// Both throw Error{LbaOutOfRange}.
  std::vector<std::uint8_t> read(std::uint64_t lba, std::uint32_t count) const;
  void write(std::uint64_t lba, std::span<const std::uint8_t> data);

  /// Raw LBA-ordered image, capacity_blocks x 512 bytes.
  void load_image(const std::filesystem::path& path);
  void save_image(const std::filesystem::path& path) const;

  /// Written blocks that are not all-zero, keyed by LBA.
  std::map<std::uint64_t, Block> snapshot() const;

 private:
  std::uint64_t capacity_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, Block> blocks_;
};

struct ChannelStats {
  std::uint64_t polls_observed = 0;
  std::uint64_t pending_signals_sent = 0;
  std::uint64_t covert_reads = 0;
  std::uint64_t covert_writes = 0;
  std::uint64_t normal_frames = 0;
  std::uint64_t queue_depth = 0;
  double last_delay_applied_ms = 0.0;
};

class Emulator final : public ExchangeHandler {
 public:
  static constexpr std::size_t kQueueBound = 4096;

  explicit Emulator(std::uint64_t capacity_blocks = 1u << 16, PollConfig config = {});

  ScsiResponse handle_exchange(const ScsiExchange& exchange) override;

  /// Throws Error{QueueFull} once 4096 datagrams are waiting.
  void enqueue_command(Datagram d);

  /// Waits until the queue holds fewer than `high_water` datagrams, then
  /// enqueues. Returns false on timeout.
  bool enqueue_when_below(Datagram d, std::size_t high_water, Duration timeout);

  /// Removes and returns every collected implant datagram in arrival order.
  std::vector<Datagram> drain_results();

  /// As drain_results, but waits up to `timeout` for at least one datagram.
  std::vector<Datagram> wait_results(Duration timeout);

  ChannelStats stats() const;
  std::size_t queue_depth() const;

  /// Time of the most recent covert poll, if any.
  std::optional<Clock::time_point> last_poll() const;

  const PollConfig& config() const { return config_; }
  BlockStore& store() { return store_; }
  const BlockStore& store() const { return store_; }

  /// Wakes every waiter in wait_results/enqueue_when_below.
  void shutdown();

 private:
  ScsiResponse handle_normal(const ScsiExchange& exchange);
  ScsiResponse handle_covert(const ScsiExchange& exchange);

  PollConfig config_;
  BlockStore store_;

  mutable std::mutex mu_;
  std::condition_variable queue_space_;
  std::condition_variable results_ready_;
  std::deque<Datagram> outbound_;
  std::vector<Datagram> inbound_;
  std::optional<Clock::time_point> last_poll_;
  bool shutting_down_ = false;

  std::atomic<std::uint64_t> polls_{0};
  std::atomic<std::uint64_t> pending_signals_{0};
  std::atomic<std::uint64_t> covert_reads_{0};
  std::atomic<std::uint64_t> covert_writes_{0};
  std::atomic<std::uint64_t> normal_frames_{0};
  std::atomic<std::int64_t> last_delay_us_{0};
};

}  // namespace msdcat
