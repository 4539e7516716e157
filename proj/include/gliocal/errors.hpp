#pragma once

#include <stdexcept>
#include <string>

namespace gliocal {

// Two failure categories drive the CLI exit codes: bad inputs (exit 1)
// and numerical breakdown during an otherwise valid run (exit 2).
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionMismatch : ValidationError {
  using ValidationError::ValidationError;
};
struct GridMismatch : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyMask : ValidationError {
  using ValidationError::ValidationError;
};
struct DisconnectedMask : ValidationError {
  using ValidationError::ValidationError;
};
struct NotAPartition : ValidationError {
  using ValidationError::ValidationError;
};
struct FormatError : ValidationError {
  using ValidationError::ValidationError;
};
struct GeometryOutOfBounds : ValidationError {
  using ValidationError::ValidationError;
};
struct UnknownLabelValue : ValidationError {
  using ValidationError::ValidationError;
};
struct DegenerateImage : ValidationError {
  using ValidationError::ValidationError;
};
struct NonpositiveHyper : ValidationError {
  using ValidationError::ValidationError;
};
struct MissingRegionHyper : ValidationError {
  using ValidationError::ValidationError;
};
struct StepSizeError : ValidationError {
  using ValidationError::ValidationError;
};
struct TrajectoryMismatch : ValidationError {
  using ValidationError::ValidationError;
};
struct DegenerateData : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyBrain : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyReference : ValidationError {
  using ValidationError::ValidationError;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};
struct NoValidPoints : ValidationError {
  using ValidationError::ValidationError;
};

struct LinearSolveFailure : NumericalError {
  using NumericalError::NumericalError;
};
struct LineSearchFailure : NumericalError {
  using NumericalError::NumericalError;
};
struct NonFiniteCost : NumericalError {
  using NumericalError::NumericalError;
};
struct RankDeficiency : NumericalError {
  using NumericalError::NumericalError;
};
struct MaxIterationsReached : NumericalError {
  using NumericalError::NumericalError;
};

}  // namespace gliocal
