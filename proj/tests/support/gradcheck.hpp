#pragma once

// Central finite-difference oracle for tape gradients, run on double replicas.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lico/ops.hpp"
#include "lico/params.hpp"
#include "lico/tensor.hpp"

namespace lico::testing {

struct GradCheck {
  std::string term;
  std::size_t checked = 0;
  std::size_t kink_skipped = 0;  // straddled a ReLU/floor boundary at every step size
  double max_rel_err = 0.0;
  double p90_rel_err = 0.0;
  double p99_rel_err = 0.0;
  std::string worst;
};

/// Gradients below this magnitude are compared in absolute terms.
inline constexpr double kRelErrFloor = 1e-6;
/// Initial probe step. Near-dead channels have tiny row norms whose
/// normalization is strongly curved, so 1e-3 is too coarse there.
inline constexpr double kProbeStep = 1e-5;
inline constexpr double kMinProbeStep = 1e-8;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kRelErrFloor});
}

/// Loose tensors presented with the parameters()/clone() shape of a model,
/// for checking single ops.
struct Leaves {
  ParamList<double> params;

  ParamList<double> parameters() const { return params; }
  Leaves clone() const {
    Leaves out;
    for (const auto& p : params) out.params.push_back({p.name, p.tensor.clone(true), p.group});
    return out;
  }
  const BasicTensor<double>& operator[](std::size_t i) const { return params.at(i).tensor; }
};

/// Compares d(term)/d(param) for several scalar terms of one forward pass
/// against central differences over every element of every parameter.
///
/// Model needs parameters() and clone(); terms(model) returns the scalar terms.
/// A probe whose branch pattern differs from the base point's is retried with
/// a tenth of the step; if it still crosses a kink it is counted as skipped.
/// Probes run in parallel, each thread on its own clone of the model.
template <class Model, class TermsFn>
std::vector<GradCheck> check_gradients(const Model& model, const std::vector<std::string>& names,
                                       TermsFn terms, double step = kProbeStep) {
  const auto params = model.parameters();
  std::vector<std::size_t> offsets{0};
  for (const auto& p : params) offsets.push_back(offsets.back() + p.tensor.size());
  const std::size_t total = offsets.back();
  const std::size_t k_terms = names.size();
  auto owner = [&](std::size_t j) {
    return static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), j) -
                                    offsets.begin() - 1);
  };

  // analytic[t][j]: gradient of term t w.r.t. flat parameter j.
  std::vector<std::vector<double>> analytic(k_terms, std::vector<double>(total, 0.0));
  std::vector<bool> base_bits;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    BranchRecorder rec;
    const auto values = terms(model);
    base_bits = rec.bits();
    for (std::size_t t = 0; t < k_terms; ++t) {
      for (auto p : params) p.tensor.zero_grad();
      tape.backward(values[t]);
      for (std::size_t k = 0; k < params.size(); ++k) {
        const auto g = params[k].tensor.grad();
        std::copy(g.begin(), g.end(), analytic[t].begin() + static_cast<long>(offsets[k]));
      }
    }
    for (auto p : params) p.tensor.zero_grad();
  }

  // numeric[t][j], NaN when every step straddled a kink.
  std::vector<std::vector<double>> numeric(k_terms, std::vector<double>(total, 0.0));
#pragma omp parallel
  {
    const Model local = model.clone();
    auto local_params = local.parameters();
    auto evaluate = [&](std::vector<bool>& bits) {
      NoGradScope<double> off;
      BranchRecorder rec;
      const auto values = terms(local);
      bits = rec.bits();
      std::vector<double> out(k_terms);
      for (std::size_t t = 0; t < k_terms; ++t) out[t] = values[t].item();
      return out;
    };
#pragma omp for schedule(dynamic, 16)
    for (std::size_t j = 0; j < total; ++j) {
      const std::size_t k = owner(j);
      auto data = local_params[k].tensor.mutable_data();
      const std::size_t i = j - offsets[k];
      const double x0 = data[i];
      bool done = false;
      for (double h = step; h >= kMinProbeStep && !done; h /= 10.0) {
        std::vector<bool> plus_bits, minus_bits;
        data[i] = x0 + h;
        const auto fp = evaluate(plus_bits);
        data[i] = x0 - h;
        const auto fm = evaluate(minus_bits);
        data[i] = x0;
        if (plus_bits != base_bits || minus_bits != base_bits) continue;
        for (std::size_t t = 0; t < k_terms; ++t) numeric[t][j] = (fp[t] - fm[t]) / (2.0 * h);
        done = true;
      }
      if (!done) {
        for (std::size_t t = 0; t < k_terms; ++t) numeric[t][j] = std::nan("");
      }
    }
  }

  std::vector<GradCheck> out(k_terms);
  for (std::size_t t = 0; t < k_terms; ++t) {
    auto& r = out[t];
    r.term = names[t];
    std::vector<double> errors;
    for (std::size_t j = 0; j < total; ++j) {
      if (std::isnan(numeric[t][j])) {
        ++r.kink_skipped;
        continue;
      }
      const double err = relative_error(analytic[t][j], numeric[t][j]);
      errors.push_back(err);
      if (err > r.max_rel_err) {
        const std::size_t k = owner(j);
        r.max_rel_err = err;
        r.worst = params[k].name + "[" + std::to_string(j - offsets[k]) + "] analytic " +
                  std::to_string(analytic[t][j]) + " numeric " + std::to_string(numeric[t][j]);
      }
    }
    r.checked = errors.size();
    if (!errors.empty()) {
      auto quantile = [&](double q) {
        const auto idx = static_cast<std::size_t>(q * static_cast<double>(errors.size() - 1));
        std::nth_element(errors.begin(), errors.begin() + static_cast<long>(idx), errors.end());
        return errors[idx];
      };
      r.p90_rel_err = quantile(0.90);
      r.p99_rel_err = quantile(0.99);
    }
  }
  return out;
}

}  // namespace lico::testing
