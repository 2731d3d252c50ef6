#include "seibw/backprop.hpp"

#include <cmath>
#include <fstream>

namespace seibw {

template <class T>
GradReportT<T> backward(Network<T>& net, const TensorT<T>& loss_grads_per_step,
                        BackwardMode mode, const std::vector<std::size_t>* sltt_time_order) {
  net.zero_grads();
  net.backward(loss_grads_per_step, mode, sltt_time_order);
  GradReportT<T> report;
  for (auto& [name, p] : net.named_params())
    report.layers.push_back({name, p->grad_w});
  return report;
}

template <class T>
TensorT<T> temporal_jacobian_term(const LifConfig& cfg, const TensorT<T>& u) {
  TensorT<T> eps(u.shape());
  for (std::size_t i = 0; i < u.numel(); ++i) {
    const double gp = triangle_derivative(cfg, static_cast<double>(u[i]));
    eps[i] = static_cast<T>(cfg.leak * (1.0 - cfg.v_threshold * gp));
  }
  return eps;
}

template <class T>
GradCheckResult relaxed_gradient_check(Network<T>& net, const TensorT<T>& input_seq,
                                       const std::vector<std::int32_t>& labels, double h,
                                       std::size_t n_samples, Rng& rng, bool corrupt_backward) {
  // Analytic gradients at the base point.
  TensorT<T> logits = net.forward(input_seq, Phase::relaxed);
  LossResult<T> base = tet_ce_loss(logits, labels);
  net.zero_grads();
  net.backward(base.grad, BackwardMode::sg_bptt);

  auto params = net.named_params();
  SEIBW_CHECK(!params.empty(), "gradient check: network has no parameters");
  std::vector<std::size_t> layer_of_sample;
  std::size_t total = 0;
  for (auto& [name, p] : params) total += p->w_real.numel();

  std::vector<TensorT<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) analytic.push_back(p->grad_w);
  if (corrupt_backward) {
    // Negative-control hook: skew every analytic gradient so any sampled
    // weight exposes the discrepancy.
    for (auto& g : analytic)
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = T(1.1) * g[i] + T(0.01);
  }

  auto loss_at = [&]() {
    TensorT<T> lg = net.forward(input_seq, Phase::relaxed);
    return tet_ce_loss(lg, labels).loss;
  };

  GradCheckResult result;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const std::size_t li = static_cast<std::size_t>(rng.uniform_index(params.size()));
    LayerParams<T>* p = params[li].second;
    if (p->w_real.numel() == 0) continue;
    const std::size_t wi = static_cast<std::size_t>(rng.uniform_index(p->w_real.numel()));

    const T w0 = p->w_real[wi];
    p->w_real[wi] = w0 + static_cast<T>(h);
    p->refresh();
    const double l_plus = loss_at();
    std::vector<std::int8_t> pieces_plus = net.piece_log();

    p->w_real[wi] = w0 - static_cast<T>(h);
    p->refresh();
    const double l_minus = loss_at();
    const bool kink = net.piece_log() != pieces_plus;

    p->w_real[wi] = w0;
    p->refresh();

    if (kink) {
      ++result.skipped_kinks;
      continue;
    }
    const double fd = (l_plus - l_minus) / (2.0 * h);
    const double an = static_cast<double>(analytic[li][wi]);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    result.max_rel_err = std::max(result.max_rel_err, std::abs(fd - an) / denom);
    ++result.sampled;
  }

  // Restore the base-point forward state for any follow-up inspection.
  net.forward(input_seq, Phase::relaxed);
  return result;
}

template <class T>
GradReportT<T> compare_gradients(Network<T>& net, const TensorT<T>& loss_grads_per_step) {
  GradReportT<T> a = backward(net, loss_grads_per_step, BackwardMode::sg_bptt);
  GradReportT<T> b = backward(net, loss_grads_per_step, BackwardMode::sltt);
  GradReportT<T> report = a;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const TensorT<T>& ga = a.layers[i].grad;
    const TensorT<T>& gb = b.layers[i].grad;
    const double na = std::sqrt(dot(ga, ga));
    const double nb = std::sqrt(dot(gb, gb));
    double cosine = 0.0;
    if (na > 0.0 && nb > 0.0) cosine = dot(ga, gb) / (na * nb);
    typename GradReportT<T>::Diag d;
    d.layer = a.layers[i].layer;
    d.cosine = cosine;
    d.norm_ratio = na > 0.0 ? nb / na : 0.0;
    report.diagnostics.push_back(d);
  }
  return report;
}

template <class T>
void write_gradient_csv(const GradReportT<T>& report, const std::string& path,
                        std::uint64_t seed) {
  std::ofstream f(path, std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  f << "layer,mode_a,mode_b,cosine,norm_ratio,seed\n";
  for (const auto& d : report.diagnostics)
    f << d.layer << ",sg_bptt,sltt," << d.cosine << "," << d.norm_ratio << "," << seed << "\n";
}

#define SEIBW_INSTANTIATE(T)                                                               \
  template GradReportT<T> backward<T>(Network<T>&, const TensorT<T>&, BackwardMode,        \
                                      const std::vector<std::size_t>*);                    \
  template TensorT<T> temporal_jacobian_term<T>(const LifConfig&, const TensorT<T>&);      \
  template GradCheckResult relaxed_gradient_check<T>(Network<T>&, const TensorT<T>&,       \
                                                     const std::vector<std::int32_t>&,     \
                                                     double, std::size_t, Rng&, bool);     \
  template GradReportT<T> compare_gradients<T>(Network<T>&, const TensorT<T>&);            \
  template void write_gradient_csv<T>(const GradReportT<T>&, const std::string&,           \
                                      std::uint64_t);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
