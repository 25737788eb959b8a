#pragma once

// Small POSIX socket helpers shared by the transport and the probe responder.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>

namespace msdcat::net {

class UniqueFd {
 public:
  UniqueFd() = default;
  explicit UniqueFd(int fd) : fd_(fd) {}
  ~UniqueFd() { reset(); }
  UniqueFd(UniqueFd&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  UniqueFd& operator=(UniqueFd&& other) noexcept {
    if (this != &other) {
      reset(std::exchange(other.fd_, -1));
    }
    return *this;
  }
  UniqueFd(const UniqueFd&) = delete;
  UniqueFd& operator=(const UniqueFd&) = delete;

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  int release() { return std::exchange(fd_, -1); }
  void reset(int fd = -1);

 private:
  int fd_ = -1;
};

using Deadline = std::optional<std::chrono::steady_clock::time_point>;

enum class IoResult { Ok, Closed, TimedOut };

IoResult write_all(int fd, std::span<const std::uint8_t> bytes);
IoResult read_exact(int fd, std::span<std::uint8_t> out, Deadline deadline = std::nullopt);

/// Returns -1 with errno set on failure.
int connect_tcp(const std::string& host, std::uint16_t port);
int listen_tcp(const std::string& host, std::uint16_t port, std::uint16_t* bound_port);

void set_nodelay(int fd);

}  // namespace msdcat::net
