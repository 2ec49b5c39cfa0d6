// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace skillnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Unknown skill ids, empty active sets, out-of-range skill indices.
struct RoutingError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Malformed datasets, corpora, checkpoints and label values.
struct DataError : Error {
  using Error::Error;
};

// Raised when training produces a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace skillnet
