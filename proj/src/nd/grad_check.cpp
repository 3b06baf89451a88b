#include "tabscope/nd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace tabscope::nd {
namespace {

double evaluate(const std::function<Tensor<double>()>& loss_fn) {
  const double value = loss_fn().item();
  if (!std::isfinite(value)) throw NumericError("grad_check: loss is not finite");
  return value;
}

}  // namespace

double grad_check(const std::function<Tensor<double>()>& loss_fn,
                  std::vector<Tensor<double>> params, const GradCheckOptions& options) {
  if (options.eps < 1e-6 || options.eps > 1e-3) {
    throw ContractError("grad_check: eps must lie in [1e-6, 1e-3]");
  }
  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter without requires_grad");
    p.zero_grad();
  }
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
    tape.backward(loss);
  }

  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coords_per_param != 0 && coords.size() > options.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_param);
    }
    auto values = p.mutable_data();
    for (const std::size_t i : coords) {
      const double saved = values[i];
      const auto diff = [&](double k) {
        values[i] = saved + k * options.eps;
        const double up = evaluate(loss_fn);
        values[i] = saved - k * options.eps;
        const double down = evaluate(loss_fn);
        return up - down;
      };
      // sixth-order central stencil
      const double fd = (45.0 * diff(1) - 9.0 * diff(2) + diff(3)) / (60.0 * options.eps);
      values[i] = saved;
      const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
  }
  return worst;
}

}  // namespace tabscope::nd
