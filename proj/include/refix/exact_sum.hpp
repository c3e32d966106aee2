/**
 * Copyright 2026 The ReFix Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <vector>

namespace refix {

// Correctly rounded floating-point summation (Shewchuk partials). The result
// does not depend on the order in which terms are added, so batch reductions
// and mergeable metric accumulators stay bit-identical under reordering,
// sharding and duplication.
class ExactSum {
 public:
  ExactSum() = default;

  void add(double x) {
    if (!std::isfinite(x)) {
      nonfinite_ += x;
      return;
    }
    std::size_t used = 0;
    for (double y : partials_) {
      if (std::fabs(x) < std::fabs(y)) {
        std::swap(x, y);
      }
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) {
        partials_[used++] = lo;
      }
      x = hi;
    }
    partials_.resize(used);
    partials_.push_back(x);
  }

  void merge(const ExactSum& other) {
    for (double p : other.partials_) {
      add(p);
    }
    nonfinite_ += other.nonfinite_;
  }

  // Correctly rounded value of the exact sum of every added term.
  double value() const {
    if (nonfinite_ != 0.0 || std::isnan(nonfinite_)) {
      return nonfinite_;
    }
    if (partials_.empty()) {
      return 0.0;
    }
    std::size_t n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      const double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) {
        break;
      }
    }
    // Half-way case: the remaining partials decide the rounding direction.
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                  (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) {
        hi = x;
      }
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
  double nonfinite_ = 0.0;
};

}  // namespace refix
