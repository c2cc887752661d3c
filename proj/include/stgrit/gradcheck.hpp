#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stgrit/ops.hpp"
#include "stgrit/tensor.hpp"

namespace stgrit::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool passes(double tol = 1e-4) const { return max_rel_err < tol; }
};

inline double rel_err(double analytic, double fd) {
  const double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
  return std::fabs(analytic - fd) / denom;
}

/// Compares tape gradients of a scalar-valued function against central finite
/// differences, elementwise over every leaf. `forward` must be a pure
/// function of the current leaf values; stochastic ops have to re-seed
/// internally so repeated calls see identical draws.
inline double max_rel_error(std::vector<Tensor>& leaves, const std::function<Tensor()>& forward,
                            double h = 1e-5) {
  for (Tensor& t : leaves) t.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = forward();
    tape.backward(loss);
  }
  for (Tensor& t : leaves) {
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));
    t.zero_grad();
  }
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    std::vector<double>& vals = leaves[li].mutable_value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double f_plus = forward().item();
      vals[i] = orig - h;
      const double f_minus = forward().item();
      vals[i] = orig;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[li][i], fd));
    }
  }
  return worst;
}

namespace detail {

/// Projects an op output to a scalar through a fixed random weighting, so
/// every output element influences the loss.
inline Tensor project(const Tensor& out, const Tensor& weights) {
  return mean_all(mul(out, weights));
}

inline Tensor rand_signed(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    x = rng.uniform(lo, hi);
    if (rng.uniform() < 0.5) x = -x;
  }
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace detail

/// Finite-difference check for every differentiable op, each probed through a
/// random scalar projection. Returns one result per op.
inline std::vector<CheckResult> run_op_suite(std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng(seed);
  auto weights_for = [&rng](const Shape& s) {
    return Tensor::uniform(s, rng, 0.5, 1.5, false);
  };

  {
    Tensor a = detail::rand_signed({2, 3}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({2, 3}, rng, 0.2, 1.0);
    Tensor w = weights_for({2, 3});
    std::vector<Tensor> leaves{a, b};
    results.push_back({"add", max_rel_error(leaves, [&] { return detail::project(add(a, b), w); })});
    results.push_back({"sub", max_rel_error(leaves, [&] { return detail::project(sub(a, b), w); })});
    results.push_back({"mul", max_rel_error(leaves, [&] { return detail::project(mul(a, b), w); })});
    std::vector<Tensor> one{a};
    results.push_back(
        {"mul_scalar", max_rel_error(one, [&] { return detail::project(mul_scalar(a, 1.7), w); })});
  }
  {
    Tensor x = detail::rand_signed({4, 3}, rng, 0.2, 1.0);
    Tensor v = detail::rand_signed({3}, rng, 0.2, 1.0);
    Tensor w = weights_for({4, 3});
    std::vector<Tensor> leaves{x, v};
    results.push_back(
        {"add_rowvec", max_rel_error(leaves, [&] { return detail::project(add_rowvec(x, v), w); })});
  }
  {
    // keep |x| well above the step size: relu is non-smooth at 0
    Tensor x = detail::rand_signed({3, 4}, rng, 0.1, 1.0);
    Tensor w = weights_for({3, 4});
    std::vector<Tensor> leaves{x};
    results.push_back({"relu", max_rel_error(leaves, [&] { return detail::project(relu(x), w); })});
  }
  {
    Tensor a = detail::rand_signed({5, 4}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({4, 3}, rng, 0.2, 1.0);
    Tensor w = weights_for({5, 3});
    std::vector<Tensor> leaves{a, b};
    results.push_back(
        {"matmul", max_rel_error(leaves, [&] { return detail::project(matmul(a, b), w); })});
  }
  {
    Tensor a = detail::rand_signed({2, 3, 4}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({2, 4, 2}, rng, 0.2, 1.0);
    Tensor w = weights_for({2, 3, 2});
    std::vector<Tensor> leaves{a, b};
    results.push_back({"bmm", max_rel_error(leaves, [&] { return detail::project(bmm(a, b), w); })});
  }
  {
    Tensor x = detail::rand_signed({2, 3, 4}, rng, 0.2, 1.0);
    Tensor w = weights_for({3, 2, 4});
    std::vector<Tensor> leaves{x};
    results.push_back({"transpose", max_rel_error(leaves, [&] {
                         return detail::project(transpose(x, {1, 0, 2}), w);
                       })});
  }
  {
    Tensor x = detail::rand_signed({2, 6}, rng, 0.2, 1.0);
    Tensor w = weights_for({3, 4});
    std::vector<Tensor> leaves{x};
    results.push_back(
        {"reshape", max_rel_error(leaves, [&] { return detail::project(reshape(x, {3, 4}), w); })});
  }
  {
    Tensor a = detail::rand_signed({2, 3}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({2, 2}, rng, 0.2, 1.0);
    Tensor w = weights_for({2, 5});
    std::vector<Tensor> leaves{a, b};
    results.push_back({"concat", max_rel_error(leaves, [&] {
                         return detail::project(concat({a, b}, 1), w);
                       })});
  }
  {
    Tensor x = detail::rand_signed({3, 4}, rng, 0.2, 1.0);
    Tensor w = weights_for({3});
    std::vector<Tensor> leaves{x};
    results.push_back(
        {"mean", max_rel_error(leaves, [&] { return detail::project(mean(x, 1), w); })});
    results.push_back({"mean_all", max_rel_error(leaves, [&] { return mean_all(x); })});
  }
  {
    Tensor x = detail::rand_signed({2, 3, 4}, rng, 0.2, 1.0);
    Tensor w = weights_for({2, 3, 4});
    std::vector<Tensor> leaves{x};
    results.push_back({"softmax", max_rel_error(leaves, [&] {
                         return detail::project(softmax(x, 2), w);
                       })});
  }
  {
    Tensor x = detail::rand_signed({3, 6}, rng, 0.3, 1.2);
    Tensor gamma = Tensor::uniform({6}, rng, 0.5, 1.5, true);
    Tensor beta = detail::rand_signed({6}, rng, 0.1, 0.5);
    Tensor w = weights_for({3, 6});
    std::vector<Tensor> leaves{x, gamma, beta};
    results.push_back({"layer_norm", max_rel_error(leaves, [&] {
                         return detail::project(layer_norm(x, gamma, beta), w);
                       })});
  }
  {
    Tensor x = detail::rand_signed({4, 5}, rng, 0.2, 1.0);
    Tensor w = weights_for({4, 5});
    std::vector<Tensor> leaves{x};
    const std::uint64_t mask_seed = seed ^ 0x9e3779b97f4a7c15ull;
    results.push_back({"dropout", max_rel_error(leaves, [&, mask_seed] {
                         Rng mask_rng(mask_seed);
                         return detail::project(dropout(x, 0.3, mask_rng, true), w);
                       })});
  }
  {
    // mse as an op composition: mean((a-b)^2)
    Tensor a = detail::rand_signed({3, 4}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({3, 4}, rng, 0.2, 1.0);
    std::vector<Tensor> leaves{a, b};
    results.push_back({"mse", max_rel_error(leaves, [&] {
                         Tensor d = sub(a, b);
                         return mean_all(mul(d, d));
                       })});
  }
  {
    // deep composition across the op suite
    Tensor a = detail::rand_signed({4, 3}, rng, 0.2, 1.0);
    Tensor b = detail::rand_signed({3, 6}, rng, 0.2, 1.0);
    Tensor bias = detail::rand_signed({6}, rng, 0.1, 0.5);
    Tensor gamma = Tensor::uniform({6}, rng, 0.5, 1.5, true);
    Tensor beta = detail::rand_signed({6}, rng, 0.1, 0.5);
    Tensor w = weights_for({4, 6});
    std::vector<Tensor> leaves{a, b, bias, gamma, beta};
    results.push_back({"composition", max_rel_error(leaves, [&] {
                         Tensor h = add_rowvec(matmul(a, b), bias);
                         Tensor n = layer_norm(h, gamma, beta);
                         Tensor s = softmax(n, 1);
                         return detail::project(add(s, relu(n)), w);
                       })});
  }
  return results;
}

}  // namespace stgrit::gradcheck
