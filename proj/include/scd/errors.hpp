#pragma once

#include <stdexcept>
#include <string>

namespace scd {

// Base class for everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents or axis arguments do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A convolution or resize would produce an empty output.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (hyperparameters, split ratios, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Out-of-range labels, empty confusion matrices and similar bad inputs.
class ValueError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. running backward twice on the same record.
class StateError : public Error {
 public:
  using Error::Error;
};

// File could not be read/written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File exists but its contents are not what the codec expects.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Label maps disagree about which pixels changed.
class AnnotationError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// The synthetic generator could not place a feasible region.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace scd
