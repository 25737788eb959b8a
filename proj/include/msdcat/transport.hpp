#pragma once

// Carries SCSI exchanges between the host role (implant side) and the
// device role (emulator side).
//
// TCP framing, all lengths big-endian:
//   request  = "UCAT" | cdb_len(1) | cdb | data_out_len(4) | data_out
//   response = status(1) | data_in_len(4) | data_in
//
// The loopback substrate runs the same codec in-process.

#include "msdcat/scsi_frame.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace msdcat {

using Clock = std::chrono::steady_clock;
using Duration = std::chrono::nanoseconds;

enum class ScsiStatus : std::uint8_t { Good = 0x00, CheckCondition = 0x02 };

struct ScsiExchange {
  scsi::Cdb cdb;
  std::vector<std::uint8_t> data_out;  // WRITE(10) only

  static ScsiExchange command(const scsi::Cdb& cdb) { return {cdb, {}}; }
  static ScsiExchange write(const scsi::Cdb& cdb, std::vector<std::uint8_t> data) {
    return {cdb, std::move(data)};
  }
};

struct ScsiResponse {
  ScsiStatus status = ScsiStatus::Good;
  std::vector<std::uint8_t> data_in;  // Good READ(10) only

  static ScsiResponse good() { return {}; }
  static ScsiResponse check_condition() { return {ScsiStatus::CheckCondition, {}}; }
};

struct SubmitResult {
  ScsiResponse response;
  Duration elapsed{};
};

/// Largest data phase accepted by the framing codec.
inline constexpr std::size_t kMaxDataPhase = std::size_t{0xFFFF} * scsi::kBlockSize;

namespace framing {

inline constexpr std::array<std::uint8_t, 4> kMagic{'U', 'C', 'A', 'T'};

std::vector<std::uint8_t> encode_request(const ScsiExchange& exchange);
std::vector<std::uint8_t> encode_response(const ScsiResponse& response);

/// Both decoders throw Error{FramingError} on malformed or trailing bytes.
ScsiExchange decode_request(std::span<const std::uint8_t> bytes);
ScsiResponse decode_response(std::span<const std::uint8_t> bytes);

}  // namespace framing

/// Device-side consumer of exchanges. Implementations may sleep before
/// returning; the host measures that as response latency.
class ExchangeHandler {
 public:
  virtual ~ExchangeHandler() = default;
  virtual ScsiResponse handle_exchange(const ScsiExchange& exchange) = 0;
};

/// Host-side handle. Exchanges on one handle are strictly serial.
class Transport {
 public:
  static constexpr Duration kDefaultTimeout = std::chrono::seconds(5);

  virtual ~Transport() = default;

  /// Throws TransportClosed or Timeout.
  SubmitResult submit(const ScsiExchange& exchange);
  void close();
  bool closed() const { return closed_.load(); }

  void set_timeout(Duration timeout) { timeout_ = timeout; }
  Duration timeout() const { return timeout_; }

 protected:
  virtual ScsiResponse round_trip(const ScsiExchange& exchange) = 0;
  virtual void do_close() {}

 private:
  std::mutex serial_;
  std::atomic<bool> closed_{false};
  Duration timeout_ = kDefaultTimeout;
};

/// Opens "loopback" (bound to `loopback_device`) or "tcp://host:port".
/// Throws BadEndpoint or ConnectionRefused.
std::unique_ptr<Transport> connect(std::string_view endpoint,
                                   std::shared_ptr<ExchangeHandler> loopback_device = nullptr);

struct TcpAddress {
  std::string host;
  std::uint16_t port = 0;
};

/// Parses "tcp://host:port"; throws BadEndpoint.
TcpAddress parse_tcp_endpoint(std::string_view endpoint);

/// Device-side TCP listener. Each connection is served on its own thread;
/// exchanges within a connection are handled serially.
class TcpDeviceServer {
 public:
  TcpDeviceServer(std::shared_ptr<ExchangeHandler> device, std::string_view endpoint);
  ~TcpDeviceServer();

  TcpDeviceServer(const TcpDeviceServer&) = delete;
  TcpDeviceServer& operator=(const TcpDeviceServer&) = delete;

  /// Bound port; useful with port 0.
  std::uint16_t port() const { return port_; }
  void stop();

 private:
  void accept_loop();
  void serve(int fd);

  std::shared_ptr<ExchangeHandler> device_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex conns_mu_;
  std::vector<int> conn_fds_;
  std::list<std::thread> workers_;
  std::thread acceptor_;
};

}  // namespace msdcat
