#pragma once

#include <stdexcept>
#include <string>

namespace smoke {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Geometry.
struct NonPositiveDepth : Error {
  explicit NonPositiveDepth(const std::string& what = "non-positive depth") : Error(what) {}
};
struct NonPositiveDimension : Error {
  explicit NonPositiveDimension(const std::string& what = "non-positive dimension") : Error(what) {}
};
struct DegenerateVector : Error {
  explicit DegenerateVector(const std::string& what = "degenerate vector") : Error(what) {}
};
struct BehindCamera : Error {
  explicit BehindCamera(const std::string& what = "corner behind camera") : Error(what) {}
};

// Codec.
struct OutOfBounds : Error {
  explicit OutOfBounds(const std::string& what = "index out of bounds") : Error(what) {}
};
struct UnknownPolicy : Error {
  explicit UnknownPolicy(const std::string& what = "unknown augmentation policy") : Error(what) {}
};

// Losses.
struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& what = "shape mismatch") : Error(what) {}
};
struct NonFiniteLoss : Error {
  explicit NonFiniteLoss(const std::string& what = "loss is not finite") : Error(what) {}
};

// KITTI file I/O.
struct MalformedLine : Error {
  int line_no;
  explicit MalformedLine(int line, const std::string& what = "malformed label line")
      : Error(what + " at line " + std::to_string(line)), line_no(line) {}
};
struct MissingKey : Error {
  explicit MissingKey(const std::string& key) : Error("missing key: " + key) {}
};
struct MalformedMatrix : Error {
  explicit MalformedMatrix(const std::string& what = "malformed projection matrix") : Error(what) {}
};
struct InsufficientSamples : Error {
  explicit InsufficientSamples(const std::string& what = "not enough samples") : Error(what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(what) {}
};

// Metrics.
struct DegenerateBox : Error {
  explicit DegenerateBox(const std::string& what = "degenerate box footprint") : Error(what) {}
};

// Toy training.
struct GenerationExhausted : Error {
  explicit GenerationExhausted(const std::string& what = "scene generation exhausted") : Error(what) {}
};
struct GradientGateFailure : Error {
  explicit GradientGateFailure(const std::string& what) : Error(what) {}
};

// CLI.
struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(what) {}
};

}  // namespace smoke
