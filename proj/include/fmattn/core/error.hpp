// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fmattn {

/// Inconsistent extents between operands.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration that violates a structural invariant (group sizes, ranks, ...).
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced by (or fed into) a primitive.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A backward pass asked for an activation the forward pass did not record.
class MissingActivation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

}  // namespace fmattn
