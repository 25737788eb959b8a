#include "msdcat/transport.hpp"

#include "msdcat/error.hpp"
#include "net.hpp"

#include <sys/socket.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>

namespace msdcat {

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(std::span<const std::uint8_t> b) {
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

[[noreturn]] void framing_error(const std::string& what) {
  throw Error(ErrorCode::FramingError, what);
}

}  // namespace

namespace framing {

std::vector<std::uint8_t> encode_request(const ScsiExchange& exchange) {
  const auto cdb = scsi::serialize_cdb(exchange.cdb);
  if (exchange.data_out.size() > kMaxDataPhase) {
    framing_error("data phase too large");
  }
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.reserve(4 + 1 + cdb.size() + 4 + exchange.data_out.size());
  out.push_back(static_cast<std::uint8_t>(cdb.size()));
  out.insert(out.end(), cdb.begin(), cdb.end());
  put_be32(out, static_cast<std::uint32_t>(exchange.data_out.size()));
  out.insert(out.end(), exchange.data_out.begin(), exchange.data_out.end());
  return out;
}

std::vector<std::uint8_t> encode_response(const ScsiResponse& response) {
  if (response.data_in.size() > kMaxDataPhase) {
    framing_error("data phase too large");
  }
  std::vector<std::uint8_t> out;
  out.reserve(5 + response.data_in.size());
  out.push_back(static_cast<std::uint8_t>(response.status));
  put_be32(out, static_cast<std::uint32_t>(response.data_in.size()));
  out.insert(out.end(), response.data_in.begin(), response.data_in.end());
  return out;
}

ScsiExchange decode_request(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    framing_error("missing UCAT magic");
  }
  const std::size_t cdb_len = bytes[4];
  if (bytes.size() < 5 + cdb_len + 4) {
    framing_error("truncated request");
  }
  ScsiExchange exchange;
  exchange.cdb = scsi::parse_cdb(bytes.subspan(5, cdb_len));
  const std::size_t data_len = get_be32(bytes.subspan(5 + cdb_len, 4));
  const auto rest = bytes.subspan(5 + cdb_len + 4);
  if (rest.size() != data_len) {
    framing_error("data_out length mismatch");
  }
  exchange.data_out.assign(rest.begin(), rest.end());
  return exchange;
}

ScsiResponse decode_response(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5) {
    framing_error("truncated response");
  }
  if (bytes[0] != static_cast<std::uint8_t>(ScsiStatus::Good) &&
      bytes[0] != static_cast<std::uint8_t>(ScsiStatus::CheckCondition)) {
    framing_error("unknown status byte");
  }
  ScsiResponse response;
  response.status = static_cast<ScsiStatus>(bytes[0]);
  const std::size_t data_len = get_be32(bytes.subspan(1, 4));
  const auto rest = bytes.subspan(5);
  if (rest.size() != data_len) {
    framing_error("data_in length mismatch");
  }
  response.data_in.assign(rest.begin(), rest.end());
  return response;
}

}  // namespace framing

SubmitResult Transport::submit(const ScsiExchange& exchange) {
  std::lock_guard lock(serial_);
  if (closed_) {
    throw Error(ErrorCode::TransportClosed);
  }
  const auto start = Clock::now();
  SubmitResult result;
  result.response = round_trip(exchange);
  result.elapsed = std::max(Duration::zero(), Clock::now() - start);
  return result;
}

void Transport::close() {
  if (!closed_.exchange(true)) {
    std::lock_guard lock(serial_);
    do_close();
  }
}

namespace {

class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(std::shared_ptr<ExchangeHandler> device) : device_(std::move(device)) {}

 protected:
  ScsiResponse round_trip(const ScsiExchange& exchange) override {
    const auto request = framing::encode_request(exchange);
    const auto response = device_->handle_exchange(framing::decode_request(request));
    return framing::decode_response(framing::encode_response(response));
  }

 private:
  std::shared_ptr<ExchangeHandler> device_;
};

class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(net::UniqueFd fd) : fd_(std::move(fd)) {}
  ~TcpTransport() override { close(); }

 protected:
  ScsiResponse round_trip(const ScsiExchange& exchange) override {
    if (!fd_) {
      throw Error(ErrorCode::TransportClosed);
    }
    const auto request = framing::encode_request(exchange);
    if (net::write_all(fd_.get(), request) != net::IoResult::Ok) {
      fail(ErrorCode::TransportClosed, "send failed");
    }
    const auto deadline = Clock::now() + timeout();
    std::vector<std::uint8_t> head(5);
    check(net::read_exact(fd_.get(), head, deadline));
    const std::size_t data_len = (std::size_t{head[1]} << 24) | (std::size_t{head[2]} << 16) |
                                 (std::size_t{head[3]} << 8) | head[4];
    if (data_len > kMaxDataPhase) {
      fail(ErrorCode::FramingError, "oversized data_in");
    }
    head.resize(5 + data_len);
    check(net::read_exact(fd_.get(), std::span(head).subspan(5), deadline));
    return framing::decode_response(head);
  }

  void do_close() override {
    if (fd_) {
      ::shutdown(fd_.get(), SHUT_RDWR);
      fd_.reset();
    }
  }

 private:
  void check(net::IoResult r) {
    if (r == net::IoResult::TimedOut) {
      // the stream is desynchronised once a response is abandoned
      fail(ErrorCode::Timeout, "no response within timeout");
    }
    if (r != net::IoResult::Ok) {
      fail(ErrorCode::TransportClosed, "peer closed the connection");
    }
  }

  [[noreturn]] void fail(ErrorCode code, const std::string& what) {
    fd_.reset();
    throw Error(code, what);
  }

  net::UniqueFd fd_;
};

}  // namespace

TcpAddress parse_tcp_endpoint(std::string_view endpoint) {
  constexpr std::string_view kScheme = "tcp://";
  if (!endpoint.starts_with(kScheme)) {
    throw Error(ErrorCode::BadEndpoint, std::string(endpoint));
  }
  const auto rest = endpoint.substr(kScheme.size());
  const auto colon = rest.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == rest.size()) {
    throw Error(ErrorCode::BadEndpoint, std::string(endpoint));
  }
  TcpAddress addr;
  addr.host = std::string(rest.substr(0, colon));
  const auto port_text = rest.substr(colon + 1);
  unsigned port = 0;
  const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535) {
    throw Error(ErrorCode::BadEndpoint, std::string(endpoint));
  }
  addr.port = static_cast<std::uint16_t>(port);
  return addr;
}

std::unique_ptr<Transport> connect(std::string_view endpoint,
                                   std::shared_ptr<ExchangeHandler> loopback_device) {
  if (endpoint == "loopback") {
    if (!loopback_device) {
      throw Error(ErrorCode::BadEndpoint, "loopback requires an in-process device");
    }
    return std::make_unique<LoopbackTransport>(std::move(loopback_device));
  }
  const auto addr = parse_tcp_endpoint(endpoint);
  net::UniqueFd fd(net::connect_tcp(addr.host, addr.port));
  if (!fd) {
    throw Error(ErrorCode::ConnectionRefused,
                std::string(endpoint) + ": " + std::strerror(errno));
  }
  return std::make_unique<TcpTransport>(std::move(fd));
}

TcpDeviceServer::TcpDeviceServer(std::shared_ptr<ExchangeHandler> device,
                                 std::string_view endpoint)
    : device_(std::move(device)) {
  const auto addr = parse_tcp_endpoint(endpoint);
  listen_fd_ = net::listen_tcp(addr.host, addr.port, &port_);
  if (listen_fd_ < 0) {
    throw Error(ErrorCode::BadEndpoint,
                "cannot listen on " + std::string(endpoint) + ": " + std::strerror(errno));
  }
  acceptor_ = std::thread([this] { accept_loop(); });
}

TcpDeviceServer::~TcpDeviceServer() { stop(); }

void TcpDeviceServer::stop() {
  if (stopping_.exchange(true)) {
    return;
  }
  ::shutdown(listen_fd_, SHUT_RDWR);
  if (acceptor_.joinable()) {
    acceptor_.join();
  }
  ::close(listen_fd_);
  {
    std::lock_guard lock(conns_mu_);
    for (int fd : conn_fds_) {
      ::shutdown(fd, SHUT_RDWR);
    }
  }
  for (auto& w : workers_) {
    w.join();
  }
}

void TcpDeviceServer::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) {
        continue;
      }
      return;
    }
    net::set_nodelay(fd);
    std::lock_guard lock(conns_mu_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    conn_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve(fd); });
  }
}

void TcpDeviceServer::serve(int fd) {
  std::vector<std::uint8_t> buf;
  while (!stopping_) {
    std::array<std::uint8_t, 5> head{};
    if (net::read_exact(fd, head) != net::IoResult::Ok ||
        !std::equal(framing::kMagic.begin(), framing::kMagic.end(), head.begin())) {
      break;
    }
    std::vector<std::uint8_t> cdb_bytes(head[4]);
    std::array<std::uint8_t, 4> len_bytes{};
    if (net::read_exact(fd, cdb_bytes) != net::IoResult::Ok ||
        net::read_exact(fd, len_bytes) != net::IoResult::Ok) {
      break;
    }
    const std::size_t data_len = get_be32(len_bytes);
    if (data_len > kMaxDataPhase) {
      break;
    }
    ScsiExchange exchange;
    exchange.data_out.resize(data_len);
    if (net::read_exact(fd, exchange.data_out) != net::IoResult::Ok) {
      break;
    }
    ScsiResponse response;
    try {
      exchange.cdb = scsi::parse_cdb(cdb_bytes);
      response = device_->handle_exchange(exchange);
    } catch (const Error&) {
      response = ScsiResponse::check_condition();
    }
    if (net::write_all(fd, framing::encode_response(response)) != net::IoResult::Ok) {
      break;
    }
  }
  std::lock_guard lock(conns_mu_);
  std::erase(conn_fds_, fd);
  ::close(fd);
}

}  // namespace msdcat
