#include "lmf/error.hpp"

namespace lmf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kVocabMismatch: return "vocab_mismatch";
    case ErrorCode::kDuplicateId: return "duplicate_id";
    case ErrorCode::kLayoutMismatch: return "layout_mismatch";
    case ErrorCode::kUnsupportedDtype: return "unsupported_dtype";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kOffSimplex: return "off_simplex";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kDegenerate: return "degenerate";
    case ErrorCode::kNonConvergence: return "non_convergence";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kMissingInput: return "missing_input";
  }
  return "unknown";
}

}  // namespace lmf
