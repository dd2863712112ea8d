#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cbmkit {

enum class ErrorCode {
    ZeroNorm,
    Shape,
    NonFinite,
    BadTau,
    Io,
    LabelRange,
    ZeroRow,
    BadSpec,
    Http,
    Parse,
    NotNormalized,
    Diverged,
    Version,
    Corrupt,
};

/// Stable identifier printed by the CLI, e.g. "E_SHAPE".
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

}  // namespace cbmkit
