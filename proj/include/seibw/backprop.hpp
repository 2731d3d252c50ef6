#pragma once

#include <string>
#include <vector>

#include "seibw/losses.hpp"
#include "seibw/network.hpp"

namespace seibw {

template <class T>
struct GradReportT {
  struct LayerGrad {
    std::string layer;
    TensorT<T> grad;  // d L / d w_real (masters)
  };
  struct Diag {
    std::string layer;
    double cosine = 0.0;      // between the two engines' gradients
    double norm_ratio = 0.0;  // |sltt| / |sg_bptt|
  };
  std::vector<LayerGrad> layers;
  std::vector<Diag> diagnostics;
};

using GradReport = GradReportT<float>;

// Runs one backward sweep on the retained forward state and snapshots the
// per-layer master gradients. Accumulators are zeroed first.
template <class T>
GradReportT<T> backward(Network<T>& net, const TensorT<T>& loss_grads_per_step,
                        BackwardMode mode,
                        const std::vector<std::size_t>* sltt_time_order = nullptr);

// leak * (1 - v_threshold * g'(u)): reference form of the step-to-step
// temporal factor, for checking the engine against the formula.
template <class T>
TensorT<T> temporal_jacobian_term(const LifConfig& cfg, const TensorT<T>& u);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t sampled = 0;
  std::size_t skipped_kinks = 0;
};

// Central-difference verification of the analytic gradients on the relaxed
// (soft-step) network: runs forward in Phase::relaxed, computes sg_bptt
// gradients of the mean per-step cross entropy, then compares n_samples
// randomly chosen master weights against (L(w+h) - L(w-h)) / 2h. Samples
// whose two perturbed forwards cross a soft-step kink are excluded.
template <class T>
GradCheckResult relaxed_gradient_check(Network<T>& net, const TensorT<T>& input_seq,
                                       const std::vector<std::int32_t>& labels, double h,
                                       std::size_t n_samples, Rng& rng,
                                       bool corrupt_backward = false);

// Runs both engines on one retained forward state and reports per-layer
// cosine similarity and norm ratio between them.
template <class T>
GradReportT<T> compare_gradients(Network<T>& net, const TensorT<T>& loss_grads_per_step);

template <class T>
void write_gradient_csv(const GradReportT<T>& report, const std::string& path,
                        std::uint64_t seed);

}  // namespace seibw
