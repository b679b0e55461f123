#pragma once

// Hand-rolled generators and helpers shared by the test suites.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "indiformer/autograd.hpp"
#include "indiformer/grad_check.hpp"
#include "indiformer/ops.hpp"

namespace testing_support {

using indiformer::Parameter;
using indiformer::ParameterList;
using indiformer::Rng;
using indiformer::Tensor;
using indiformer::Var;

inline Tensor<double> random_tensor(indiformer::Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

inline std::vector<double> random_signal(std::size_t n, Rng& rng, double amp = 1.0) {
  std::vector<double> x(n);
  std::normal_distribution<double> g(0.0, amp);
  for (auto& v : x) v = g(rng);
  return x;
}

inline std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Gradient check of a loss over freshly made leaf parameters.
inline double check_op(std::vector<Tensor<double>> inputs,
                       const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                       double eps = 1e-6) {
  std::vector<Parameter<double>> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    params.emplace_back("in" + std::to_string(i), inputs[i]);
  }
  ParameterList<double> list;
  for (auto& p : params) list.push_back(&p);
  auto loss = [&] {
    std::vector<Var<double>> vars;
    for (auto& p : params) vars.push_back(p.var());
    return f(vars);
  };
  return indiformer::grad_check<double>(loss, list, eps).max_relative_error;
}

/// Weighted sum with fixed random weights: turns any tensor into a scalar
/// whose gradient exercises every output entry.
inline Var<double> probe_sum(const Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Var<double> w(random_tensor(y.shape(), rng));
  return indiformer::sum(indiformer::mul(y, w));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("indiformer_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
