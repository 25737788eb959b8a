#pragma once

// Covert-channel message unit. Datagrams are laid back-to-back inside the
// data phase of a covert READ(10)/WRITE(10); zero fill (a PAD type byte)
// terminates the sequence.
//
//   +---------+-------+------------+---------+------------+-----------------+
//   | version | dtype | session_id |   seq   |   length   | payload[length] |
//   |   (1)   |  (1)  |  (2, BE)   | (2, BE) |  (2, BE)   |    <= 504       |
//   +---------+-------+------------+---------+------------+-----------------+

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msdcat {

enum class DatagramType : std::uint8_t {
  Pad = 0x00,
  Open = 0x01,
  Data = 0x02,
  Close = 0x03,
  FileBegin = 0x04,
  FileChunk = 0x05,
  FileEnd = 0x06,
  Error = 0x07,
};

const char* to_string(DatagramType type);

struct Datagram {
  static constexpr std::uint8_t kVersion = 1;
  static constexpr std::size_t kHeaderSize = 8;
  static constexpr std::size_t kMaxPayload = 504;
  static constexpr std::size_t kMaxSize = kHeaderSize + kMaxPayload;

  std::uint8_t version = kVersion;
  DatagramType type = DatagramType::Pad;
  std::uint16_t session_id = 0;
  std::uint16_t seq = 0;
  std::vector<std::uint8_t> payload;

  std::size_t wire_size() const { return kHeaderSize + payload.size(); }
  std::string_view text() const {
    return {reinterpret_cast<const char*>(payload.data()), payload.size()};
  }

  static Datagram make(DatagramType type, std::uint16_t session_id, std::uint16_t seq,
                       std::span<const std::uint8_t> payload = {});
  static Datagram make(DatagramType type, std::uint16_t session_id, std::uint16_t seq,
                       std::string_view text);

  friend bool operator==(const Datagram&, const Datagram&) = default;
};

/// Throws OversizedPayload if the payload exceeds 504 bytes, and
/// MalformedDatagram for a PAD that carries bytes.
void validate(const Datagram& d);

/// Appends the wire form of `d` to `out`.
void encode_datagram(const Datagram& d, std::vector<std::uint8_t>& out);

/// Packs datagrams from the front of `queue` while they fit in `capacity`
/// bytes, removing them from the queue. The result is exactly `capacity`
/// bytes long, zero-filled after the last datagram.
std::vector<std::uint8_t> pack_from_queue(std::deque<Datagram>& queue, std::size_t capacity);

/// Packs every datagram into the fewest whole 512-byte blocks.
std::vector<std::uint8_t> pack_blocks(std::span<const Datagram> datagrams);

/// Splits datagrams into groups whose packed size is at most `max_blocks`.
std::vector<std::vector<Datagram>> batch_by_blocks(std::span<const Datagram> datagrams,
                                                   std::size_t max_blocks);

/// Decodes datagrams until the first PAD type byte or the end of the buffer.
/// Throws MalformedDatagram on a bad version or a length overrunning the buffer.
std::vector<Datagram> unpack_datagrams(std::span<const std::uint8_t> bytes);

/// Splits `bytes` into DATA-style datagrams of at most 504 payload bytes,
/// numbering them from `next_seq` (advanced in place, wrapping mod 2^16).
std::vector<Datagram> chunk_payload(DatagramType type, std::uint16_t session_id,
                                    std::uint16_t& next_seq, std::span<const std::uint8_t> bytes);

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0);

inline std::span<const std::uint8_t> as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

}  // namespace msdcat
