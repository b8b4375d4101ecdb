#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sundae/autodiff.hpp"
#include "sundae/errors.hpp"
#include "sundae/rng.hpp"
#include "sundae/tensor.hpp"

namespace sundae {

/// Temperature softmax of one row into `out`, computed in double with the
/// row maximum subtracted first.
template <class T>
void softmax_row(std::span<const T> logits, double temperature, std::span<double> out) {
  if (!(temperature > 0.0)) throw ArgumentError("softmax: temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (auto x : logits) {
    if (!std::isfinite(static_cast<double>(x))) throw NumericError("softmax: non-finite logit");
    mx = std::max(mx, static_cast<double>(x));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    sum += out[i];
  }
  for (auto& p : out) p /= sum;
}

/// Softmax over the trailing axis at the given temperature.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature = 1.0) {
  Tensor<T> out(logits.shape());
  std::vector<double> row(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    softmax_row<T>(logits.row(r), temperature, row);
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

/// log softmax of one row (temperature 1), double precision.
template <class T>
void log_softmax_row(std::span<const T> logits, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto x : logits) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (auto x : logits) sum += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(logits[i]) - lse;
}

/// Index of the largest entry; the lowest index wins ties.
template <class T>
std::size_t argmax(std::span<const T> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Inverse-CDF draw from a normalized distribution; one uniform per call.
inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  // Rounding left u above the final partial sum: take the last nonzero entry.
  for (std::size_t k = probs.size(); k-- > 0;)
    if (probs[k] > 0.0) return k;
  return probs.size() - 1;
}

/// Mean label-smoothed cross-entropy of `logits` [N, v] against `targets`
/// over positions where `weight_mask` is 1 (all positions when empty).
template <class T>
double cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                     double label_smoothing = 0.0, std::span<const T> weight_mask = {}) {
  Graph<T> g(false);
  auto l = ops::cross_entropy<T>(
      g, make_var<T>(logits.detached_copy()),
      std::vector<std::int32_t>(targets.begin(), targets.end()), label_smoothing,
      std::vector<T>(weight_mask.begin(), weight_mask.end()));
  return static_cast<double>((*l)[0]);
}

struct GradCheckOptions {
  double step = 1e-3;
  /// Coordinates checked per tensor; ignored when `full` is set.
  std::size_t max_coords_per_tensor = 512;
  bool full = false;
  std::uint64_t seed = 0x5eed;
  /// Denominator floor, so gradients that are zero in exact arithmetic
  /// (e.g. attention key biases) compare on absolute error.
  double abs_floor = 1e-8;
  /// Fourth-order stencil (f(w-2h) - 8f(w-h) + 8f(w+h) - f(w+2h)) / 12h.
  bool four_point = false;
  /// Parameters whose name starts with one of these are not checked.
  std::vector<std::string> skip_prefixes;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients against central differences.
///
/// `analytic` receives `params`, must leave gradients in the parameter grad
/// slots. `loss` evaluates the same function on `probe`, which has the same
/// layout and may use a wider scalar type; probe values are overwritten with
/// the values of `params` before checking. Both callables must seed all
/// randomness internally.
template <class TA, class TN, class AnalyticFn, class LossFn>
GradCheckResult grad_check(ParamSet<TA>& params, AnalyticFn&& analytic, ParamSet<TN>& probe,
                           LossFn&& loss, const GradCheckOptions& opts = {}) {
  probe.assign_from(params);
  params.zero_grad();
  analytic(params);
  GradCheckResult res;
  Rng rng(opts.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& name = params[p].name;
    if (std::any_of(opts.skip_prefixes.begin(), opts.skip_prefixes.end(),
                    [&](const std::string& pre) { return name.rfind(pre, 0) == 0; }))
      continue;
    auto& tensor = *params[p].tensor;
    auto& probe_tensor = *probe[p].tensor;
    const std::size_t n = tensor.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (!opts.full && n > opts.max_coords_per_tensor) {
      for (std::size_t i = 0; i < opts.max_coords_per_tensor; ++i)
        std::swap(coords[i], coords[i + rng.uniform_int(n - i)]);
      coords.resize(opts.max_coords_per_tensor);
    }
    auto grad = tensor.grad();
    for (auto i : coords) {
      const TN saved = probe_tensor[i];
      auto at = [&](double k) {
        probe_tensor[i] = saved + static_cast<TN>(k * opts.step);
        return static_cast<double>(loss(probe));
      };
      double numeric;
      if (opts.four_point) {
        numeric = (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * opts.step);
      } else {
        const TN hi = saved + static_cast<TN>(opts.step);
        const TN lo = saved - static_cast<TN>(opts.step);
        const double up = at(1), down = at(-1);
        // Divide by the representable spread, not the nominal 2h.
        numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
      }
      probe_tensor[i] = saved;
      const double a = static_cast<double>(grad[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = params[p].name;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

/// Same-precision convenience: `loss(graph, params)` builds the scalar loss.
template <class T, class GraphLossFn>
GradCheckResult grad_check(GraphLossFn&& loss, ParamSet<T>& params,
                           const GradCheckOptions& opts = {}) {
  auto analytic = [&](ParamSet<T>& ps) {
    Graph<T> g(true);
    auto l = loss(g, ps);
    g.backward(l);
  };
  auto numeric = [&](ParamSet<T>& ps) {
    Graph<T> g(false);
    return (*loss(g, ps))[0];
  };
  // Shallow copy: coordinates are perturbed in place and restored.
  ParamSet<T> probe = params;
  return grad_check(params, analytic, probe, numeric, opts);
}

}  // namespace sundae
