#include "msdcat/error.hpp"

namespace msdcat {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::UnknownOpcode: return "UnknownOpcode";
    case ErrorCode::WrongLength: return "WrongLength";
    case ErrorCode::InvalidTransferLength: return "InvalidTransferLength";
    case ErrorCode::BadEndpoint: return "BadEndpoint";
    case ErrorCode::ConnectionRefused: return "ConnectionRefused";
    case ErrorCode::TransportClosed: return "TransportClosed";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::FramingError: return "FramingError";
    case ErrorCode::LbaOutOfRange: return "LbaOutOfRange";
    case ErrorCode::QueueFull: return "QueueFull";
    case ErrorCode::MalformedDatagram: return "MalformedDatagram";
    case ErrorCode::OversizedPayload: return "OversizedPayload";
    case ErrorCode::SpawnFailed: return "SpawnFailed";
    case ErrorCode::DuplicateSession: return "DuplicateSession";
    case ErrorCode::ProcessExited: return "ProcessExited";
    case ErrorCode::TooManySessions: return "TooManySessions";
    case ErrorCode::CrcMismatch: return "CrcMismatch";
    case ErrorCode::PathRejected: return "PathRejected";
    case ErrorCode::OutOfOrderChunk: return "OutOfOrderChunk";
    case ErrorCode::NoImplant: return "NoImplant";
    case ErrorCode::UnknownSession: return "UnknownSession";
    case ErrorCode::SessionClosed: return "SessionClosed";
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::ResponderUnreachable: return "ResponderUnreachable";
    case ErrorCode::IncompatibleScenarios: return "IncompatibleScenarios";
    case ErrorCode::BadCsv: return "BadCsv";
  }
  return "Unknown";
}

}  // namespace msdcat
