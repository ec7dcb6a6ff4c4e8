// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "surgeon/rng.hpp"
#include "surgeon/tensor.hpp"

namespace surgeon::testing {

template <typename T>
TensorT<T> random_tensor(std::vector<std::size_t> shape, Rng& rng,
                         double lo = -1.0, double hi = 1.0) {
  TensorT<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline bool approx(double a, double b, double tol) {
  double d = a - b;
  return (d < 0 ? -d : d) <= tol;
}

}  // namespace surgeon::testing
