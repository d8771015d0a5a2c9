// Copyright (c) the KeyFort Project Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace keyfort {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  size_t worst_index = 0;
  std::string note;
};

// Central finite differences against an analytic gradient. Per coordinate:
//   fd_i  = (f(x + h e_i) - f(x - h e_i)) / 2h
//   err_i = |a_i - fd_i| / max(1, |a_i|, |fd_i|)
// The report carries the max over coordinates; pass iff below tolerance.
// value_at must evaluate the same fp32 computation whose gradient is being
// checked (the value itself may be accumulated in double).
template <typename ValueFn>
GradCheckReport grad_check(ValueFn&& value_at, const std::vector<float>& point,
                           const std::vector<float>& analytic_grad,
                           double tolerance, double step = 1e-3) {
  GradCheckReport rep;
  if (analytic_grad.size() != point.size()) {
    rep.note = "gradient size does not match point size";
    return rep;
  }
  std::vector<float> x = point;
  for (size_t i = 0; i < x.size(); ++i) {
    const float keep = x[i];
    x[i] = float(double(keep) + step);
    const double fp = value_at(x);
    x[i] = float(double(keep) - step);
    const double fm = value_at(x);
    x[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.note = "non-finite value while probing coordinate " +
                 std::to_string(i);
      rep.pass = false;
      return rep;
    }
    const double fd = (fp - fm) / (2.0 * step);
    const double a = double(analytic_grad[i]);
    const double denom = std::max({1.0, std::fabs(a), std::fabs(fd)});
    const double err = std::fabs(a - fd) / denom;
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_index = i;
    }
  }
  rep.pass = rep.max_rel_err < tolerance;
  return rep;
}

}  // namespace keyfort
