#include "msdcat/emulator.hpp"

#include "msdcat/error.hpp"

#include <algorithm>
#include <fstream>
#include <thread>

namespace msdcat {

namespace {

bool all_zero(std::span<const std::uint8_t> bytes) {
  return std::all_of(bytes.begin(), bytes.end(), [](std::uint8_t b) { return b == 0; });
}

}  // namespace

std::vector<std::uint8_t> BlockStore::read(std::uint64_t lba, std::uint32_t count) const {
  if (!in_range(lba, count)) {
    throw Error(ErrorCode::LbaOutOfRange, "read past capacity");
  }
  std::vector<std::uint8_t> out(std::size_t{count} * scsi::kBlockSize, 0);
  std::lock_guard lock(mu_);
  for (auto it = blocks_.lower_bound(lba); it != blocks_.end() && it->first < lba + count; ++it) {
    std::copy(it->second.begin(), it->second.end(),
              out.begin() + static_cast<std::ptrdiff_t>((it->first - lba) * scsi::kBlockSize));
  }
  return out;
}

void BlockStore::write(std::uint64_t lba, std::span<const std::uint8_t> data) {
  const std::uint64_t count = data.size() / scsi::kBlockSize;
  if (data.size() % scsi::kBlockSize != 0 || !in_range(lba, count)) {
    throw Error(ErrorCode::LbaOutOfRange, "write past capacity");
  }
  std::lock_guard lock(mu_);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto block = data.subspan(i * scsi::kBlockSize, scsi::kBlockSize);
    if (all_zero(block)) {
      blocks_.erase(lba + i);
    } else {
      std::copy(block.begin(), block.end(), blocks_[lba + i].begin());
    }
  }
}

void BlockStore::load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::FileNotFound, path.string());
  }
  std::lock_guard lock(mu_);
  blocks_.clear();
  Block block{};
  for (std::uint64_t lba = 0; lba < capacity_; ++lba) {
    block.fill(0);
    in.read(reinterpret_cast<char*>(block.data()), block.size());
    if (in.gcount() == 0) {
      break;
    }
    if (!all_zero(block)) {
      blocks_[lba] = block;
    }
  }
}

void BlockStore::save_image(const std::filesystem::path& path) const {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error(ErrorCode::FileNotFound, path.string());
    }
    std::lock_guard lock(mu_);
    for (const auto& [lba, block] : blocks_) {
      out.seekp(static_cast<std::streamoff>(lba * scsi::kBlockSize));
      out.write(reinterpret_cast<const char*>(block.data()), block.size());
    }
  }
  std::filesystem::resize_file(path, capacity_ * scsi::kBlockSize);
}

std::map<std::uint64_t, BlockStore::Block> BlockStore::snapshot() const {
  std::lock_guard lock(mu_);
  return blocks_;
}

Emulator::Emulator(std::uint64_t capacity_blocks, PollConfig config)
    : config_(config), store_(capacity_blocks) {}

ScsiResponse Emulator::handle_exchange(const ScsiExchange& exchange) {
  if (scsi::classify(exchange.cdb) == scsi::FrameClass::Covert) {
    return handle_covert(exchange);
  }
  normal_frames_.fetch_add(1);
  return handle_normal(exchange);
}

ScsiResponse Emulator::handle_normal(const ScsiExchange& exchange) {
  const auto& cdb = exchange.cdb;
  try {
    switch (cdb.kind) {
      case scsi::CdbKind::TestUnitReady:
        return ScsiResponse::good();
      case scsi::CdbKind::Read10: {
        ScsiResponse r;
        r.data_in = store_.read(cdb.lba, cdb.transfer_length);
        return r;
      }
      case scsi::CdbKind::Write10:
        if (exchange.data_out.size() != cdb.data_bytes()) {
          return ScsiResponse::check_condition();
        }
        store_.write(cdb.lba, exchange.data_out);
        return ScsiResponse::good();
    }
  } catch (const Error&) {
  }
  return ScsiResponse::check_condition();
}

ScsiResponse Emulator::handle_covert(const ScsiExchange& exchange) {
  const auto& cdb = exchange.cdb;
  switch (cdb.kind) {
    case scsi::CdbKind::TestUnitReady: {
      bool pending = false;
      {
        std::lock_guard lock(mu_);
        last_poll_ = Clock::now();
        pending = !outbound_.empty();
      }
      polls_.fetch_add(1);
      if (pending) {
        pending_signals_.fetch_add(1);
        last_delay_us_ =
            std::chrono::duration_cast<std::chrono::microseconds>(config_.delay).count();
        std::this_thread::sleep_for(config_.delay);
      }
      return ScsiResponse::good();
    }
    case scsi::CdbKind::Read10: {
      covert_reads_.fetch_add(1);
      ScsiResponse r;
      {
        std::lock_guard lock(mu_);
        r.data_in = pack_from_queue(outbound_, cdb.data_bytes());
      }
      queue_space_.notify_all();
      return r;
    }
    case scsi::CdbKind::Write10: {
      covert_writes_.fetch_add(1);
      if (exchange.data_out.size() != cdb.data_bytes()) {
        return ScsiResponse::check_condition();
      }
      std::vector<Datagram> arrived;
      try {
        arrived = unpack_datagrams(exchange.data_out);
      } catch (const Error&) {
        return ScsiResponse::check_condition();
      }
      {
        std::lock_guard lock(mu_);
        inbound_.insert(inbound_.end(), std::make_move_iterator(arrived.begin()),
                        std::make_move_iterator(arrived.end()));
      }
      results_ready_.notify_all();
      return ScsiResponse::good();
    }
  }
  return ScsiResponse::check_condition();
}

void Emulator::enqueue_command(Datagram d) {
  validate(d);
  std::lock_guard lock(mu_);
  if (outbound_.size() >= kQueueBound) {
    throw Error(ErrorCode::QueueFull, "outbound queue holds 4096 datagrams");
  }
  outbound_.push_back(std::move(d));
}

bool Emulator::enqueue_when_below(Datagram d, std::size_t high_water, Duration timeout) {
  validate(d);
  high_water = std::clamp<std::size_t>(high_water, 1, kQueueBound);
  std::unique_lock lock(mu_);
  if (!queue_space_.wait_for(lock, timeout, [&] {
        return shutting_down_ || outbound_.size() < high_water;
      }) ||
      shutting_down_) {
    return false;
  }
  outbound_.push_back(std::move(d));
  return true;
}

std::vector<Datagram> Emulator::drain_results() {
  std::lock_guard lock(mu_);
  return std::exchange(inbound_, {});
}

std::vector<Datagram> Emulator::wait_results(Duration timeout) {
  std::unique_lock lock(mu_);
  results_ready_.wait_for(lock, timeout, [&] { return shutting_down_ || !inbound_.empty(); });
  return std::exchange(inbound_, {});
}

ChannelStats Emulator::stats() const {
  ChannelStats s;
  s.polls_observed = polls_.load();
  s.pending_signals_sent = pending_signals_.load();
  s.covert_reads = covert_reads_.load();
  s.covert_writes = covert_writes_.load();
  s.normal_frames = normal_frames_.load();
  s.queue_depth = queue_depth();
  s.last_delay_applied_ms = static_cast<double>(last_delay_us_.load()) / 1000.0;
  return s;
}

std::size_t Emulator::queue_depth() const {
  std::lock_guard lock(mu_);
  return outbound_.size();
}

std::optional<Clock::time_point> Emulator::last_poll() const {
  std::lock_guard lock(mu_);
  return last_poll_;
}

void Emulator::shutdown() {
  {
    std::lock_guard lock(mu_);
    shutting_down_ = true;
  }
  queue_space_.notify_all();
  results_ready_.notify_all();
}

}  // namespace msdcat
