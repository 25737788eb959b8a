#include "msdcat/datagram.hpp"

#include "msdcat/error.hpp"
#include "msdcat/scsi_frame.hpp"

#include <zlib.h>

#include <algorithm>

namespace msdcat {

const char* to_string(DatagramType type) {
  switch (type) {
    case DatagramType::Pad: return "PAD";
    case DatagramType::Open: return "OPEN";
    case DatagramType::Data: return "DATA";
    case DatagramType::Close: return "CLOSE";
    case DatagramType::FileBegin: return "FILE_BEGIN";
    case DatagramType::FileChunk: return "FILE_CHUNK";
    case DatagramType::FileEnd: return "FILE_END";
    case DatagramType::Error: return "ERROR";
  }
  return "?";
}

Datagram Datagram::make(DatagramType type, std::uint16_t session_id, std::uint16_t seq,
                        std::span<const std::uint8_t> payload) {
  Datagram d;
  d.type = type;
  d.session_id = session_id;
  d.seq = seq;
  d.payload.assign(payload.begin(), payload.end());
  return d;
}

Datagram Datagram::make(DatagramType type, std::uint16_t session_id, std::uint16_t seq,
                        std::string_view text) {
  return make(type, session_id, seq, as_bytes(text));
}

void validate(const Datagram& d) {
  if (d.payload.size() > Datagram::kMaxPayload) {
    throw Error(ErrorCode::OversizedPayload,
                std::to_string(d.payload.size()) + " byte payload exceeds 504");
  }
  if (d.type == DatagramType::Pad && !d.payload.empty()) {
    throw Error(ErrorCode::MalformedDatagram, "PAD carries a payload");
  }
  if (static_cast<std::uint8_t>(d.type) > static_cast<std::uint8_t>(DatagramType::Error)) {
    throw Error(ErrorCode::MalformedDatagram, "unknown datagram type");
  }
}

void encode_datagram(const Datagram& d, std::vector<std::uint8_t>& out) {
  validate(d);
  const auto len = static_cast<std::uint16_t>(d.payload.size());
  out.push_back(d.version);
  out.push_back(static_cast<std::uint8_t>(d.type));
  out.push_back(static_cast<std::uint8_t>(d.session_id >> 8));
  out.push_back(static_cast<std::uint8_t>(d.session_id));
  out.push_back(static_cast<std::uint8_t>(d.seq >> 8));
  out.push_back(static_cast<std::uint8_t>(d.seq));
  out.push_back(static_cast<std::uint8_t>(len >> 8));
  out.push_back(static_cast<std::uint8_t>(len));
  out.insert(out.end(), d.payload.begin(), d.payload.end());
}

std::vector<std::uint8_t> pack_from_queue(std::deque<Datagram>& queue, std::size_t capacity) {
  std::vector<std::uint8_t> out;
  out.reserve(capacity);
  while (!queue.empty() && out.size() + queue.front().wire_size() <= capacity) {
    encode_datagram(queue.front(), out);
    queue.pop_front();
  }
  out.resize(capacity, 0);
  return out;
}

std::vector<std::uint8_t> pack_blocks(std::span<const Datagram> datagrams) {
  std::vector<std::uint8_t> out;
  for (const auto& d : datagrams) {
    encode_datagram(d, out);
  }
  const std::size_t blocks = (out.size() + scsi::kBlockSize - 1) / scsi::kBlockSize;
  out.resize(blocks * scsi::kBlockSize, 0);
  return out;
}

std::vector<std::vector<Datagram>> batch_by_blocks(std::span<const Datagram> datagrams,
                                                   std::size_t max_blocks) {
  const std::size_t capacity = std::max<std::size_t>(max_blocks, 1) * scsi::kBlockSize;
  std::vector<std::vector<Datagram>> batches;
  std::size_t used = capacity;  // forces a new batch on the first datagram
  for (const auto& d : datagrams) {
    if (used + d.wire_size() > capacity) {
      batches.emplace_back();
      used = 0;
    }
    batches.back().push_back(d);
    used += d.wire_size();
  }
  return batches;
}

std::vector<Datagram> unpack_datagrams(std::span<const std::uint8_t> bytes) {
  std::vector<Datagram> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto rest = bytes.subspan(pos);
    if (rest.size() < Datagram::kHeaderSize) {
      if (std::any_of(rest.begin(), rest.end(), [](std::uint8_t b) { return b != 0; })) {
        throw Error(ErrorCode::MalformedDatagram, "truncated header");
      }
      break;
    }
    if (rest[1] == static_cast<std::uint8_t>(DatagramType::Pad)) {
      break;
    }
    if (rest[0] != Datagram::kVersion) {
      throw Error(ErrorCode::MalformedDatagram, "version " + std::to_string(rest[0]));
    }
    if (rest[1] > static_cast<std::uint8_t>(DatagramType::Error)) {
      throw Error(ErrorCode::MalformedDatagram, "type " + std::to_string(rest[1]));
    }
    const std::size_t len = (std::size_t{rest[6]} << 8) | rest[7];
    if (len > Datagram::kMaxPayload || Datagram::kHeaderSize + len > rest.size()) {
      throw Error(ErrorCode::MalformedDatagram,
                  "length " + std::to_string(len) + " overruns the buffer");
    }
    Datagram d;
    d.version = rest[0];
    d.type = static_cast<DatagramType>(rest[1]);
    d.session_id = static_cast<std::uint16_t>((rest[2] << 8) | rest[3]);
    d.seq = static_cast<std::uint16_t>((rest[4] << 8) | rest[5]);
    d.payload.assign(rest.begin() + Datagram::kHeaderSize,
                     rest.begin() + static_cast<std::ptrdiff_t>(Datagram::kHeaderSize + len));
    out.push_back(std::move(d));
    pos += Datagram::kHeaderSize + len;
  }
  return out;
}

std::vector<Datagram> chunk_payload(DatagramType type, std::uint16_t session_id,
                                    std::uint16_t& next_seq, std::span<const std::uint8_t> bytes) {
  std::vector<Datagram> out;
  for (std::size_t off = 0; off < bytes.size(); off += Datagram::kMaxPayload) {
    const std::size_t n = std::min(Datagram::kMaxPayload, bytes.size() - off);
    out.push_back(Datagram::make(type, session_id, next_seq++, bytes.subspan(off, n)));
  }
  return out;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed) {
  uLong crc = seed;
  // zlib takes uInt lengths
  while (!bytes.empty()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size(), 1u << 30));
    crc = ::crc32(crc, bytes.data(), n);
    bytes = bytes.subspan(n);
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace msdcat
