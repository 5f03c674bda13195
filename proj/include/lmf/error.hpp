#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmf {

enum class ErrorCode {
  kInvalidArgument,
  kParse,
  kOutOfRange,
  kVocabMismatch,
  kDuplicateId,
  kLayoutMismatch,
  kUnsupportedDtype,
  kTruncated,
  kChecksum,
  kVersion,
  kOffSimplex,
  kDimensionMismatch,
  kDegenerate,
  kNonConvergence,
  kNonFinite,
  kIo,
  kMissingInput,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace lmf
