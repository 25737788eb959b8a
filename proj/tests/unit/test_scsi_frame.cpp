#include "msdcat/error.hpp"
#include "msdcat/scsi_frame.hpp"

#include <doctest.h>

#include <random>

using namespace msdcat;
using namespace msdcat::scsi;
using Bytes = std::vector<std::uint8_t>;

namespace {

ErrorCode parse_error(const Bytes& b) {
  try {
    parse_cdb(b);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected a parse error");
  return ErrorCode::BadCsv;
}

Cdb random_cdb(std::mt19937& rng) {
  const auto kind = static_cast<CdbKind>(rng() % 3);
  const ControlByte control{static_cast<std::uint8_t>(rng())};
  if (kind == CdbKind::TestUnitReady) {
    return Cdb::test_unit_ready(control);
  }
  const auto blocks = static_cast<std::uint16_t>(1 + rng() % 0xFFFF);
  return kind == CdbKind::Read10 ? Cdb::read10(static_cast<std::uint32_t>(rng()), blocks, control)
                                 : Cdb::write10(static_cast<std::uint32_t>(rng()), blocks, control);
}

}  // namespace

TEST_CASE("golden vectors") {
  SUBCASE("all-zero TEST UNIT READY") {
    CHECK(parse_cdb(Bytes{0, 0, 0, 0, 0, 0}) == Cdb::test_unit_ready());
  }
  SUBCASE("READ(10) lba 4000, 2 blocks") {
    const Bytes wire{0x28, 0x00, 0x00, 0x00, 0x0F, 0xA0, 0x00, 0x00, 0x02, 0x00};
    const auto cdb = parse_cdb(wire);
    CHECK(cdb.kind == CdbKind::Read10);
    CHECK(cdb.lba == 4000);
    CHECK(cdb.transfer_length == 2);
    CHECK(cdb.control.raw() == 0x00);
    CHECK(serialize_cdb(cdb) == wire);
  }
  SUBCASE("covert WRITE(10) lba 0, 1 block") {
    CHECK(serialize_cdb(Cdb::write10(0, 1, ControlByte{0x80})) ==
          Bytes{0x2A, 0, 0, 0, 0, 0, 0, 0, 0x01, 0x80});
  }
  SUBCASE("covert TEST UNIT READY") {
    CHECK(serialize_cdb(Cdb::test_unit_ready(ControlByte{0x80})) == Bytes{0, 0, 0, 0, 0, 0x80});
  }
  SUBCASE("field positions") {
    const auto wire = serialize_cdb(Cdb::read10(0x01020304, 0x0506, ControlByte{0x07}));
    CHECK(wire == Bytes{0x28, 0, 0x01, 0x02, 0x03, 0x04, 0, 0x05, 0x06, 0x07});
  }
}

TEST_CASE("parse errors") {
  CHECK(parse_error({0x99, 0, 0, 0, 0, 0, 0, 0, 0, 0}) == ErrorCode::UnknownOpcode);
  CHECK(parse_error({0x12, 0, 0, 0, 0, 0}) == ErrorCode::UnknownOpcode);
  CHECK(parse_error({0x28, 0, 0, 0, 0, 0}) == ErrorCode::WrongLength);
  CHECK(parse_error({0x00, 0, 0, 0, 0, 0, 0, 0, 0, 0}) == ErrorCode::WrongLength);
  CHECK(parse_error({}) == ErrorCode::WrongLength);
}

TEST_CASE("zero-block READ/WRITE cannot be serialized") {
  CHECK_THROWS_AS(serialize_cdb(Cdb::read10(5, 0)), Error);
  try {
    serialize_cdb(Cdb::write10(5, 0));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidTransferLength);
  }
}

TEST_CASE("mark_covert and classify") {
  CHECK(mark_covert(Cdb::test_unit_ready(ControlByte{0x00})).control.raw() == 0x80);
  CHECK(mark_covert(Cdb::test_unit_ready(ControlByte{0x80})).control.raw() == 0x80);
  CHECK(mark_covert(Cdb::test_unit_ready(ControlByte{0x01})).control.raw() == 0x81);
  CHECK(classify(Cdb::test_unit_ready(ControlByte{0x80})) == FrameClass::Covert);
  CHECK(classify(Cdb::test_unit_ready(ControlByte{0x00})) == FrameClass::Normal);
  CHECK(classify(Cdb::test_unit_ready(ControlByte{0x40})) == FrameClass::Normal);
  CHECK(ControlByte{0xFF}.vendor_bits() == 0xC0);
  CHECK(ControlByte{0x3F}.vendor_bits() == 0x00);
}

TEST_CASE("property: round trip and covert marking over random CDBs") {
  std::mt19937 rng(1234);
  for (int i = 0; i < 20000; ++i) {
    const auto cdb = random_cdb(rng);
    const auto wire = serialize_cdb(cdb);
    CHECK(wire.size() == (cdb.kind == CdbKind::TestUnitReady ? 6u : 10u));
    REQUIRE(parse_cdb(wire) == cdb);
    REQUIRE(serialize_cdb(parse_cdb(wire)) == wire);

    const auto covert = mark_covert(cdb);
    REQUIRE(classify(covert) == FrameClass::Covert);
    const auto covert_wire = serialize_cdb(covert);
    REQUIRE(std::equal(wire.begin(), wire.end() - 1, covert_wire.begin()));
  }
}

TEST_CASE("property: parsing is total over 6- and 10-byte inputs") {
  std::mt19937 rng(99);
  for (int i = 0; i < 20000; ++i) {
    Bytes b(rng() % 2 == 0 ? 6 : 10);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    // bias the opcode towards the supported ones
    if (rng() % 2 == 0) b[0] = std::array<std::uint8_t, 3>{0x00, 0x28, 0x2A}[rng() % 3];
    try {
      const auto cdb = parse_cdb(b);
      CHECK(cdb.control.raw() == b.back());
    } catch (const Error& e) {
      const bool typed = e.code() == ErrorCode::UnknownOpcode || e.code() == ErrorCode::WrongLength;
      REQUIRE(typed);
    }
  }
}
