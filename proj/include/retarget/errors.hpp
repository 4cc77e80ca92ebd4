#pragma once

#include <stdexcept>
#include <string>

namespace retarget {

// Every failure raised by the library derives from Error. The kind tag lets
// callers (notably the CLI) map failures onto exit codes without RTTI chains.
enum class ErrorKind {
  kInvalidArgument,
  kRankDeficient,
  kBehindCamera,
  kRegistrationFailure,
  kParse,
  kStructure,
  kValidation,
  kConfig,
  kUnsupportedFormat,
  kInvalidStart,
  kLossUndefined,
  kAlignmentFailure,
  kRetargetFailure,
  kRefineFailure,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // True for failures that stem from bad inputs/configuration rather than
  // numerical non-convergence.
  bool is_input_error() const noexcept {
    switch (kind_) {
      case ErrorKind::kInvalidArgument:
      case ErrorKind::kParse:
      case ErrorKind::kStructure:
      case ErrorKind::kValidation:
      case ErrorKind::kConfig:
      case ErrorKind::kUnsupportedFormat:
      case ErrorKind::kIo:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorKind kind_;
};

#define RETARGET_DEFINE_ERROR(Name, Kind)                             \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Kind, what) {}     \
  };

RETARGET_DEFINE_ERROR(InvalidArgument, ErrorKind::kInvalidArgument)
RETARGET_DEFINE_ERROR(RankDeficientError, ErrorKind::kRankDeficient)
RETARGET_DEFINE_ERROR(BehindCameraError, ErrorKind::kBehindCamera)
RETARGET_DEFINE_ERROR(StructureError, ErrorKind::kStructure)
RETARGET_DEFINE_ERROR(ValidationError, ErrorKind::kValidation)
RETARGET_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
RETARGET_DEFINE_ERROR(UnsupportedFormatError, ErrorKind::kUnsupportedFormat)
RETARGET_DEFINE_ERROR(InvalidStartError, ErrorKind::kInvalidStart)
RETARGET_DEFINE_ERROR(LossUndefinedError, ErrorKind::kLossUndefined)
RETARGET_DEFINE_ERROR(AlignmentFailure, ErrorKind::kAlignmentFailure)
RETARGET_DEFINE_ERROR(RetargetFailure, ErrorKind::kRetargetFailure)
RETARGET_DEFINE_ERROR(RefineFailure, ErrorKind::kRefineFailure)
RETARGET_DEFINE_ERROR(IoError, ErrorKind::kIo)

#undef RETARGET_DEFINE_ERROR

// Parse errors carry a location. line/column are 1-based; 0 means unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line = 0, int column = 0)
      : Error(ErrorKind::kParse, format(what, line, column)),
        line_(line),
        column_(column) {}

  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& what, int line, int column) {
    if (line <= 0) return what;
    return "line " + std::to_string(line) + ", column " +
           std::to_string(column) + ": " + what;
  }

  int line_;
  int column_;
};

}  // namespace retarget
