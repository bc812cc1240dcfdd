#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "psdepth/tensor.hpp"

// Independent gradient oracle: central finite differences at 64-bit with a
// fixed step. Lives in test code only; it never touches the tape.
namespace oracle {

inline std::vector<double> central_diff(
    const std::function<double(std::span<const double>)>& f, std::vector<double> x,
    double step = 1e-5) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = f(x);
    x[i] = saved - step;
    const double lo = f(x);
    x[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

// Relative error with a unit floor, the usual gradcheck metric.
inline double max_rel_error(std::span<const double> got, std::span<const double> want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double scale = std::max({1.0, std::abs(got[i]), std::abs(want[i])});
    worst = std::max(worst, std::abs(got[i] - want[i]) / scale);
  }
  return worst;
}

// Runs a scalar-valued tensor program twice: once for the analytic gradient
// of `inputs[check]`, once through finite differences on its raw values.
inline double gradcheck(
    const std::function<psd::Tensor(const std::vector<psd::Tensor>&)>& program,
    std::vector<psd::Tensor> inputs, std::size_t check, double step = 1e-5) {
  psd::Tensor loss = program(inputs);
  psd::backward(loss);
  std::vector<double> analytic(inputs[check].grad().begin(), inputs[check].grad().end());
  if (analytic.empty()) analytic.assign(inputs[check].size(), 0.0);

  auto f = [&](std::span<const double> xs) {
    std::vector<psd::Tensor> probe = inputs;
    probe[check] = psd::Tensor::from(inputs[check].shape(),
                                     std::vector<double>(xs.begin(), xs.end()));
    return program(probe).item();
  };
  std::vector<double> base(inputs[check].values().begin(), inputs[check].values().end());
  std::vector<double> numeric = central_diff(f, base, step);
  return max_rel_error(analytic, numeric);
}

}  // namespace oracle
