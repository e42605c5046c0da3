#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splatreg {

enum class ErrorCode {
    InvalidArgument,
    AllOpacitiesZero,
    EmptyMixture,
    NotSymmetric,
    NotPositiveDefinite,
    DimensionMismatch,
    NotConverged,
    TooLarge,
    BehindCamera,
    MissingCameras,
    EmptyMask,
    Diverged,
    LengthMismatch,
    ParseError,
    UnsupportedLayout,
    SchemaError,
    IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::AllOpacitiesZero: return "AllOpacitiesZero";
        case ErrorCode::EmptyMixture: return "EmptyMixture";
        case ErrorCode::NotSymmetric: return "NotSymmetric";
        case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::NotConverged: return "NotConverged";
        case ErrorCode::TooLarge: return "TooLarge";
        case ErrorCode::BehindCamera: return "BehindCamera";
        case ErrorCode::MissingCameras: return "MissingCameras";
        case ErrorCode::EmptyMask: return "EmptyMask";
        case ErrorCode::Diverged: return "Diverged";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::UnsupportedLayout: return "UnsupportedLayout";
        case ErrorCode::SchemaError: return "SchemaError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a stable code so callers
/// (and the CLI exit-code mapping) can dispatch without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace splatreg
