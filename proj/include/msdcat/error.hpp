#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace msdcat {

enum class ErrorCode {
  // scsi frames
  UnknownOpcode,
  WrongLength,
  InvalidTransferLength,
  // transport
  BadEndpoint,
  ConnectionRefused,
  TransportClosed,
  Timeout,
  FramingError,
  // emulator
  LbaOutOfRange,
  QueueFull,
  // datagrams / channel
  MalformedDatagram,
  OversizedPayload,
  // payloads
  SpawnFailed,
  DuplicateSession,
  ProcessExited,
  TooManySessions,
  CrcMismatch,
  PathRejected,
  OutOfOrderChunk,
  // console
  NoImplant,
  UnknownSession,
  SessionClosed,
  FileNotFound,
  TooLarge,
  // metrics
  ResponderUnreachable,
  IncompatibleScenarios,
  BadCsv,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  explicit Error(ErrorCode code) : std::runtime_error(std::string(to_string(code))), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace msdcat
