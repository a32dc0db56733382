#pragma once

#include <stdexcept>
#include <string>

namespace xmlwf {

enum class Errc {
  InvalidArgument,
  // dataset
  MissingTarget,
  ParseError,
  NonBinaryTarget,
  EmptyData,
  DegenerateSplit,
  TooFewPerClass,
  // pipeline
  NaNWithoutImputer,
  SingleClassTrain,
  NonFiniteLoss,
  DimensionMismatch,
  BadMagic,
  UnsupportedVersion,
  TruncatedBlob,
  HashMismatch,
  // search
  OneClassAUC,
  LengthMismatch,
  EmptyGrid,
  EmptySpace,
  // tracking
  BadSlug,
  Conflict,
  StoreIO,
  StateError,
  NotFound,
  // explain / report
  TooManyFeatures,
  SingularSystem,
  EmptySelection,
  // cli
  ConfigError,
};

const char* to_string(Errc code) noexcept;

/// Every failure surfaced by the library carries one of the codes above so
/// that the CLI can map it onto a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace xmlwf
