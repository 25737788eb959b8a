#pragma once

// Wire codec for the three SCSI commands carried by the channel:
// TEST UNIT READY (6 bytes), READ(10) and WRITE(10).
//
//   TEST UNIT READY   00 | 00 00 00 00 | control
//   READ(10)          28 | flags | lba[4] BE | group | len[2] BE | control
//   WRITE(10)         2A | flags | lba[4] BE | group | len[2] BE | control
//
// Reserved/flag/group bytes are always emitted as zero.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace msdcat::scsi {

inline constexpr std::size_t kBlockSize = 512;

inline constexpr std::uint8_t kOpTestUnitReady = 0x00;
inline constexpr std::uint8_t kOpRead10 = 0x28;
inline constexpr std::uint8_t kOpWrite10 = 0x2A;

inline constexpr std::size_t kShortCdbLength = 6;
inline constexpr std::size_t kLongCdbLength = 10;

/// Final byte of every CDB. Bits 6 and 7 are vendor specific; bit 7 marks
/// covert-channel frames and bit 6 is left clear.
class ControlByte {
 public:
  static constexpr std::uint8_t kCovertBit = 0x80;
  static constexpr std::uint8_t kVendorMask = 0xC0;

  constexpr ControlByte() = default;
  constexpr explicit ControlByte(std::uint8_t raw) : raw_(raw) {}

  constexpr std::uint8_t raw() const { return raw_; }
  constexpr std::uint8_t vendor_bits() const { return raw_ & kVendorMask; }
  constexpr bool covert() const { return (raw_ & kCovertBit) != 0; }

  friend constexpr bool operator==(ControlByte, ControlByte) = default;

 private:
  std::uint8_t raw_ = 0;
};

enum class CdbKind : std::uint8_t { TestUnitReady, Read10, Write10 };

enum class FrameClass : std::uint8_t { Normal, Covert };

struct Cdb {
  CdbKind kind = CdbKind::TestUnitReady;
  std::uint32_t lba = 0;              // Read10/Write10 only
  std::uint16_t transfer_length = 0;  // Read10/Write10 only
  ControlByte control{};

  static Cdb test_unit_ready(ControlByte control = ControlByte{}) {
    return Cdb{CdbKind::TestUnitReady, 0, 0, control};
  }
  static Cdb read10(std::uint32_t lba, std::uint16_t blocks, ControlByte control = ControlByte{}) {
    return Cdb{CdbKind::Read10, lba, blocks, control};
  }
  static Cdb write10(std::uint32_t lba, std::uint16_t blocks, ControlByte control = ControlByte{}) {
    return Cdb{CdbKind::Write10, lba, blocks, control};
  }

  bool has_data_phase() const { return kind != CdbKind::TestUnitReady; }
  std::size_t data_bytes() const {
    return has_data_phase() ? std::size_t{transfer_length} * kBlockSize : 0;
  }

  friend bool operator==(const Cdb&, const Cdb&) = default;
};

/// Throws Error{UnknownOpcode} or Error{WrongLength}.
Cdb parse_cdb(std::span<const std::uint8_t> bytes);

/// Throws Error{InvalidTransferLength} for a zero-block READ/WRITE.
std::vector<std::uint8_t> serialize_cdb(const Cdb& cdb);

Cdb mark_covert(Cdb cdb);

FrameClass classify(const Cdb& cdb);

const char* to_string(CdbKind kind);

}  // namespace msdcat::scsi
