#pragma once

#include <stdexcept>
#include <string>

namespace intrafusion {

// Graph topology or shape contract violated (cycles, bad edges, mismatched dims).
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller-supplied values are out of range or inconsistent.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On-disk data could not be decoded (model files, IDX, CSV).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace intrafusion
