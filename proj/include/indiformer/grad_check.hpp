#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "indiformer/autograd.hpp"

namespace indiformer {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

namespace detail {

template <typename T>
void analytic_gradients(const std::function<Var<T>()>& loss, const ParameterList<T>& params,
                        const std::function<void(ParameterList<T>&)>& tamper) {
  for (auto* p : params) p->zero_grad();
  Var<T> out = loss();
  if (!std::isfinite(static_cast<double>(out.value().item()))) {
    throw NumericError("grad_check: loss is not finite");
  }
  out.backward();
  ParameterList<T> mutable_params = params;
  if (tamper) tamper(mutable_params);
}

// Central differences of `loss` over `probe`, compared with the gradients
// held by `reference` (same names and shapes, same order).
template <typename T, typename U>
GradCheckResult compare(const ParameterList<T>& reference, const std::function<Var<U>()>& loss,
                        const ParameterList<U>& probe, double eps) {
  auto evaluate = [&]() {
    NoGradGuard guard;
    const U v = loss().value().item();
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError("grad_check: perturbed loss is not finite");
    }
    return v;
  };
  GradCheckResult result;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    auto& values = probe[k]->tensor();
    const auto& grads = reference[k]->gradient();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const U original = values[i];
      values[i] = original + static_cast<U>(eps);
      const U up = evaluate();
      values[i] = original - static_cast<U>(eps);
      const U down = evaluate();
      values[i] = original;
      const double numeric = static_cast<double>((up - down) / (U{2} * static_cast<U>(eps)));
      const double analytic = static_cast<double>(grads[i]);
      const double rel = std::abs(analytic - numeric) /
                         (std::abs(analytic) + std::abs(numeric) + 1e-12);
      ++result.entries_checked;
      if (rel > result.max_relative_error || result.entries_checked == 1) {
        result.max_relative_error = rel;
        result.worst_parameter = probe[k]->name();
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace detail

/// Compares reverse-mode gradients of every parameter entry with central
/// finite differences (f(p+eps) - f(p-eps)) / (2 eps). The relative error of
/// an entry is |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12); the worst is
/// reported.
///
/// `loss` rebuilds the graph on every call and must be a deterministic
/// function of the parameter values. `tamper`, if set, is applied to the
/// analytic gradients before comparison (used to prove the check can fail).
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>()>& loss,
                           const ParameterList<T>& params, double eps = 1e-5,
                           const std::function<void(ParameterList<T>&)>& tamper = {}) {
  if constexpr (!std::is_same_v<T, double>) {
    throw ConfigError("gradient checking requires 64-bit precision");
  } else {
    detail::analytic_gradients(loss, params, tamper);
    return detail::compare<T, T>(params, loss, params, eps);
  }
}

/// Same check, but the finite differences come from `probe_loss` evaluated
/// on a wider floating-point type. In double, the rounding of a loss of
/// magnitude ~10 limits central differences to roughly 1e-6 relative
/// accuracy on entries whose gradient is 1e-5; the wider probe removes that
/// floor while the gradients under test stay 64-bit. `probe` must mirror
/// `params` (names, shapes, order); its values are overwritten.
template <typename T, typename U>
GradCheckResult grad_check(const std::function<Var<T>()>& loss, const ParameterList<T>& params,
                           const std::function<Var<U>()>& probe_loss,
                           const ParameterList<U>& probe, double eps = 1e-5,
                           const std::function<void(ParameterList<T>&)>& tamper = {}) {
  if constexpr (!std::is_same_v<T, double>) {
    throw ConfigError("gradient checking requires 64-bit precision");
  } else {
    static_assert(sizeof(U) >= sizeof(T), "the probe type must not be narrower");
    if (probe.size() != params.size()) {
      throw DimensionError("grad_check: probe has " + std::to_string(probe.size()) +
                           " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (probe[k]->name() != params[k]->name() || probe[k]->shape() != params[k]->shape()) {
        throw DimensionError("grad_check: probe parameter '" + probe[k]->name() +
                             "' does not mirror '" + params[k]->name() + "'");
      }
      probe[k]->tensor() = params[k]->tensor().template cast<U>();
    }
    detail::analytic_gradients(loss, params, tamper);
    return detail::compare<T, U>(params, probe_loss, probe, eps);
  }
}

}  // namespace indiformer
