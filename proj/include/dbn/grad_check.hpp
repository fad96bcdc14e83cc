#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dbn/tensor.hpp"

namespace dbn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  long coords_checked = 0;
};

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  double denom = std::max({floor, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

/// Central finite-difference check of a scalar-valued tensor function.
/// f is evaluated twice up front; any bitwise difference means f is not
/// deterministic and the harness refuses to continue. If max_coords > 0
/// only that many evenly spread coordinates are probed.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x0, double step = 1e-5,
                                  double err_floor = 1e-6, long max_coords = 0) {
  {
    NoGradGuard ng;
    Tensor a = f(x0), b = f(x0);
    if (a.data() != b.data())
      throw UsageError("grad_check: function is not deterministic under repeated evaluation");
    if (a.size() != 1) throw UsageError("grad_check: function must be scalar-valued");
  }

  Tensor x = Tensor::param(x0.shape(), x0.data());
  Tensor loss = f(x);
  backward(loss);
  std::vector<double> analytic = x.grad();

  long n = x.size();
  long stride = 1;
  if (max_coords > 0 && n > max_coords) stride = (n + max_coords - 1) / max_coords;

  GradCheckReport report;
  Tensor probe = Tensor::from(x0.shape(), x0.data());
  NoGradGuard ng;
  for (long i = 0; i < n; i += stride) {
    double keep = probe.data()[i];
    probe.data()[i] = keep + step;
    double fp = f(probe).item();
    probe.data()[i] = keep - step;
    double fm = f(probe).item();
    probe.data()[i] = keep;
    double numeric = (fp - fm) / (2.0 * step);
    report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[i], numeric, err_floor));
    ++report.coords_checked;
  }
  return report;
}

}  // namespace dbn
