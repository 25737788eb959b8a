#include "msdcat/api.hpp"

#include "msdcat/error.hpp"

#include <httplib.h>
#include <json.hpp>

#include <charconv>

namespace msdcat {

using nlohmann::json;

namespace {

constexpr std::string_view kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

json to_json(const SessionView& v) {
  return {{"session_id", v.session_id},
          {"payload_spec", v.payload_spec},
          {"state", to_string(v.state)},
          {"bytes_in", v.bytes_in},
          {"bytes_out", v.bytes_out},
          {"output_offset", v.output_offset},
          {"exit_status", v.exit_status ? json(*v.exit_status) : json(nullptr)},
          {"last_error", v.last_error}};
}

json to_json(const ChannelStats& s) {
  return {{"polls_observed", s.polls_observed},
          {"pending_signals_sent", s.pending_signals_sent},
          {"covert_reads", s.covert_reads},
          {"covert_writes", s.covert_writes},
          {"normal_frames", s.normal_frames},
          {"queue_depth", s.queue_depth},
          {"last_delay_applied_ms", s.last_delay_applied_ms}};
}

json to_json(const TransferReport& r) {
  return {{"transfer_id", r.transfer_id},
          {"name", r.remote_name},
          {"bytes", r.bytes},
          {"chunks", r.chunks},
          {"crc32", r.crc32}};
}

json to_json(const TransferStatus& s) {
  json j = to_json(s.report);
  j["state"] = to_string(s.state);
  j["remote_crc32"] = s.remote_crc32 ? json(*s.remote_crc32) : json(nullptr);
  j["remote_bytes"] = s.remote_bytes ? json(*s.remote_bytes) : json(nullptr);
  j["error"] = s.error;
  return j;
}

json output_json(std::uint16_t id, const OutputSlice& slice, std::uint64_t since) {
  return {{"session_id", id},
          {"offset", std::max(since, slice.base_offset)},
          {"data", slice.text()},
          {"data_b64", base64_encode(slice.bytes)},
          {"next_offset", slice.next_offset},
          {"base_offset", slice.base_offset}};
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownSession: return 404;
    case ErrorCode::SessionClosed: return 409;
    case ErrorCode::NoImplant:
    case ErrorCode::QueueFull: return 503;
    case ErrorCode::TooLarge: return 413;
    default: return 400;
  }
}

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(dump(body), "application/json");
}

void reply_error(httplib::Response& res, int status, std::string_view code, std::string_view msg) {
  reply_json(res, status, {{"error", code}, {"message", msg}});
}

/// Runs `fn`, translating library errors and bad input into JSON errors.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    reply_error(res, http_status(e.code()), to_string(e.code()), e.what());
  } catch (const json::exception& e) {
    reply_error(res, 400, "BadRequest", e.what());
  } catch (const std::invalid_argument& e) {
    reply_error(res, 400, "BadRequest", e.what());
  }
}

std::uint16_t path_id(const httplib::Request& req) {
  const auto& text = req.matches[1].str();
  unsigned id = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), id);
  if (ec != std::errc{} || id > 0xFFFF) {
    throw std::invalid_argument("bad id " + text);
  }
  return static_cast<std::uint16_t>(id);
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8) |
                            bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = std::uint32_t{bytes[i]} << 16;
    if (i + 1 < bytes.size()) {
      v |= std::uint32_t{bytes[i + 1]} << 8;
    }
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (const char c : text) {
    if (c == '=') {
      break;
    }
    const auto pos = kB64.find(c);
    if (pos == std::string_view::npos) {
      throw std::invalid_argument("invalid base64");
    }
    acc = (acc << 6) | static_cast<std::uint32_t>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>(acc >> bits));
    }
  }
  return out;
}

ApiServer::ApiServer(Console& console, std::string host, std::uint16_t port)
    : console_(console), server_(std::make_unique<httplib::Server>()) {
  install_routes();
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) {
      throw Error(ErrorCode::BadEndpoint, "cannot bind API on " + host);
    }
    port_ = static_cast<std::uint16_t>(bound);
  } else {
    if (!server_->bind_to_port(host, port)) {
      throw Error(ErrorCode::BadEndpoint,
                  "cannot bind API on " + host + ":" + std::to_string(port));
    }
    port_ = port;
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::stop() {
  if (stopping_.exchange(true)) {
    return;
  }
  server_->stop();
  if (thread_.joinable()) {
    thread_.join();
  }
}

void ApiServer::install_routes() {
  auto& srv = *server_;

  srv.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    for (const auto& v : console_.sessions()) {
      list.push_back(to_json(v));
    }
    reply_json(res, 200, list);
  });

  srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = json::parse(req.body);
      const auto spec = body.at("payload_spec").get<std::string>();
      const auto id = console_.open_session(spec);
      reply_json(res, 201, {{"session_id", id}});
    });
  });

  srv.Post(R"(/sessions/(\d+)/input)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto id = path_id(req);
      const auto body = json::parse(req.body);
      if (body.contains("data_b64")) {
        console_.send_input(id, base64_decode(body.at("data_b64").get<std::string>()));
      } else {
        console_.exec(id, body.at("line").get<std::string>());
      }
      reply_json(res, 202, json::object());
    });
  });

  srv.Delete(R"(/sessions/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      console_.close_session(path_id(req));
      reply_json(res, 202, json::object());
    });
  });

  srv.Get(R"(/sessions/(\d+)/output)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto id = path_id(req);
      std::uint64_t since = 0;
      if (req.has_param("since")) {
        since = std::stoull(req.get_param_value("since"));
      }
      reply_json(res, 200, output_json(id, console_.read_output(id, since), since));
    });
  });

  srv.Post("/files", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("name")) {
        throw std::invalid_argument("missing ?name=");
      }
      std::vector<std::uint8_t> bytes(req.body.begin(), req.body.end());
      const auto report = console_.push_bytes(req.get_param_value("name"), std::move(bytes));
      reply_json(res, 202, to_json(report));
    });
  });

  srv.Get(R"(/files/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply_json(res, 200, to_json(console_.transfer_status(path_id(req)))); });
  });

  srv.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    json j = to_json(console_.stats());
    j["implant_alive"] = console_.implant_alive();
    reply_json(res, 200, j);
  });

  srv.Get("/events", [this](const httplib::Request&, httplib::Response& res) {
    struct StreamState {
      std::uint64_t version = ~std::uint64_t{0};
      std::map<std::uint16_t, std::uint64_t> offsets;
      std::map<std::uint16_t, std::string> states;
      Clock::time_point last_stats{};
    };
    auto state = std::make_shared<StreamState>();
    for (const auto& v : console_.sessions()) {
      state->offsets[v.session_id] = v.output_offset;
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, state](std::size_t, httplib::DataSink& sink) {
          auto emit = [&](std::string_view event, const json& data) {
            const std::string frame =
                "event: " + std::string(event) + "\ndata: " + dump(data) + "\n\n";
            return sink.write(frame.data(), frame.size());
          };
          if (stopping_) {
            sink.done();
            return false;
          }
          state->version = console_.wait_version(state->version, 500ms);
          for (const auto& v : console_.sessions()) {
            const std::string st = to_string(v.state);
            if (state->states[v.session_id] != st) {
              state->states[v.session_id] = st;
              if (!emit("session", to_json(v))) return false;
            }
            auto& offset = state->offsets[v.session_id];
            if (v.output_offset > offset) {
              const auto slice = console_.read_output(v.session_id, offset);
              if (!emit("output", output_json(v.session_id, slice, offset))) return false;
              offset = slice.next_offset;
            }
          }
          if (Clock::now() - state->last_stats >= 1s) {
            state->last_stats = Clock::now();
            if (!emit("stats", to_json(console_.stats()))) return false;
          }
          return sink.is_writable();
        });
  });
}

}  // namespace msdcat
