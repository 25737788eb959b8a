#include "msdcat/scsi_frame.hpp"

#include "msdcat/error.hpp"

#include <string>

namespace msdcat::scsi {

namespace {

std::uint32_t load_be32(std::span<const std::uint8_t> b) {
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

std::uint16_t load_be16(std::span<const std::uint8_t> b) {
  return static_cast<std::uint16_t>((b[0] << 8) | b[1]);
}

std::size_t expected_length(std::uint8_t opcode) {
  return opcode == kOpTestUnitReady ? kShortCdbLength : kLongCdbLength;
}

}  // namespace

Cdb parse_cdb(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) {
    throw Error(ErrorCode::WrongLength, "empty CDB");
  }
  const std::uint8_t opcode = bytes[0];
  if (opcode != kOpTestUnitReady && opcode != kOpRead10 && opcode != kOpWrite10) {
    throw Error(ErrorCode::UnknownOpcode, "opcode " + std::to_string(opcode));
  }
  if (bytes.size() != expected_length(opcode)) {
    throw Error(ErrorCode::WrongLength, std::to_string(bytes.size()) + " bytes for opcode " +
                                            std::to_string(opcode));
  }
  const ControlByte control{bytes.back()};
  if (opcode == kOpTestUnitReady) {
    return Cdb::test_unit_ready(control);
  }
  Cdb cdb;
  cdb.kind = opcode == kOpRead10 ? CdbKind::Read10 : CdbKind::Write10;
  cdb.lba = load_be32(bytes.subspan(2, 4));
  cdb.transfer_length = load_be16(bytes.subspan(7, 2));
  cdb.control = control;
  return cdb;
}

std::vector<std::uint8_t> serialize_cdb(const Cdb& cdb) {
  if (cdb.kind == CdbKind::TestUnitReady) {
    return {kOpTestUnitReady, 0, 0, 0, 0, cdb.control.raw()};
  }
  if (cdb.transfer_length == 0) {
    throw Error(ErrorCode::InvalidTransferLength, "zero blocks requested");
  }
  const std::uint8_t opcode = cdb.kind == CdbKind::Read10 ? kOpRead10 : kOpWrite10;
  return {opcode,
          0,
          static_cast<std::uint8_t>(cdb.lba >> 24),
          static_cast<std::uint8_t>(cdb.lba >> 16),
          static_cast<std::uint8_t>(cdb.lba >> 8),
          static_cast<std::uint8_t>(cdb.lba),
          0,
          static_cast<std::uint8_t>(cdb.transfer_length >> 8),
          static_cast<std::uint8_t>(cdb.transfer_length),
          cdb.control.raw()};
}

Cdb mark_covert(Cdb cdb) {
  cdb.control = ControlByte{static_cast<std::uint8_t>(cdb.control.raw() | ControlByte::kCovertBit)};
  return cdb;
}

FrameClass classify(const Cdb& cdb) {
  return cdb.control.covert() ? FrameClass::Covert : FrameClass::Normal;
}

const char* to_string(CdbKind kind) {
  switch (kind) {
    case CdbKind::TestUnitReady: return "TEST UNIT READY";
    case CdbKind::Read10: return "READ(10)";
    case CdbKind::Write10: return "WRITE(10)";
  }
  return "?";
}

}  // namespace msdcat::scsi
