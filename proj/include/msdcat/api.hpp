#pragma once

// HTTP/JSON frontend over Console.
//
//   GET    /sessions                    list of session views
//   POST   /sessions          {payload_spec}          -> {session_id}
//   POST   /sessions/{id}/input  {line}               -> 202
//   DELETE /sessions/{id}                             -> 202 (CLOSE)
//   GET    /sessions/{id}/output?since=N              -> {data, data_b64, next_offset, base_offset}
//   POST   /files?name=NAME   body = raw bytes        -> transfer report
//   GET    /files/{id}                                -> transfer status
//   GET    /stats                                     -> channel counters
//   GET    /events            text/event-stream of "session", "output" and "stats" events

#include "msdcat/console.hpp"

#include <memory>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace msdcat {

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

class ApiServer {
 public:
  ApiServer(Console& console, std::string host, std::uint16_t port);
  ~ApiServer();

  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  std::uint16_t port() const { return port_; }
  void stop();

 private:
  void install_routes();

  Console& console_;
  std::unique_ptr<httplib::Server> server_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
};

}  // namespace msdcat
