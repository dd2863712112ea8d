#include "cbmkit/error.hpp"

namespace cbmkit {

std::string_view error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::ZeroNorm: return "E_ZERO_NORM";
        case ErrorCode::Shape: return "E_SHAPE";
        case ErrorCode::NonFinite: return "E_NONFINITE";
        case ErrorCode::BadTau: return "E_BAD_TAU";
        case ErrorCode::Io: return "E_IO";
        case ErrorCode::LabelRange: return "E_LABEL_RANGE";
        case ErrorCode::ZeroRow: return "E_ZERO_ROW";
        case ErrorCode::BadSpec: return "E_BAD_SPEC";
        case ErrorCode::Http: return "E_HTTP";
        case ErrorCode::Parse: return "E_PARSE";
        case ErrorCode::NotNormalized: return "E_NOT_NORMALIZED";
        case ErrorCode::Diverged: return "E_DIVERGED";
        case ErrorCode::Version: return "E_VERSION";
        case ErrorCode::Corrupt: return "E_CORRUPT";
    }
    return "E_UNKNOWN";
}

}  // namespace cbmkit
