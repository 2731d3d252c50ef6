#include "seibw/ensemble.hpp"

#include <fstream>

namespace seibw {

template <class T>
NoiseTraceT<T> extract_noise(Network<T>& net) {
  if (!net.has_forward_state()) throw StateError("extract_noise: no recorded forward pass");
  NoiseTraceT<T> trace;
  trace.horizon = net.horizon;
  for (LifNode<T>* lif : net.lif_nodes()) {
    SEIBW_CHECK(lif->has_state(), "extract_noise: LIF layer missing state");
    std::vector<TensorT<T>> slices;
    slices.reserve(net.horizon);
    const T leak = static_cast<T>(lif->cfg.leak);
    for (std::size_t t = 1; t <= net.horizon; ++t) {
      // Same product the forward pass feeds into u[t].
      const TensorT<T>& v_prev = lif->state_v(t - 1);
      TensorT<T> n(v_prev.shape());
      for (std::size_t i = 0; i < n.numel(); ++i) n[i] = leak * v_prev[i];
      slices.push_back(std::move(n));
    }
    trace.per_lif.push_back(std::move(slices));
  }
  return trace;
}

template <class T>
TensorT<T> replay_member(Network<T>& net, const TensorT<T>& input_at_t, std::size_t t,
                         const NoiseTraceT<T>& noise) {
  SEIBW_CHECK_VALUE(t >= 1 && t <= noise.horizon, "replay_member: step out of range");
  return net.replay_member(input_at_t, t, noise);
}

template <class T>
std::size_t verify_decomposition(Network<T>& net, const TensorT<T>& input_seq) {
  net.forward(input_seq, Phase::eval);
  NoiseTraceT<T> noise = extract_noise(net);
  auto lifs = net.lif_nodes();

  // Snapshot the recorded spikes; replay does not touch the caches but a
  // copy keeps the comparison independent of them.
  std::vector<std::vector<TensorT<T>>> recorded(lifs.size());
  for (std::size_t li = 0; li < lifs.size(); ++li)
    for (std::size_t t = 1; t <= net.horizon; ++t)
      recorded[li].push_back(lifs[li]->spikes(t));

  std::size_t mismatches = 0;
  for (std::size_t t = 1; t <= net.horizon; ++t) {
    net.replay_member(slice_step(input_seq, t), t, noise);
    for (std::size_t li = 0; li < lifs.size(); ++li) {
      const TensorT<T>& member = lifs[li]->last_replay_spikes();
      const TensorT<T>& orig = recorded[li][t - 1];
      SEIBW_CHECK_DIM(member.same_shape(orig), "verify_decomposition: spike shape mismatch");
      for (std::size_t i = 0; i < member.numel(); ++i)
        if (member[i] != orig[i]) ++mismatches;
    }
  }
  return mismatches;
}

template <class T>
MemberResult ensemble_report(Network<T>& net, const TensorT<T>& input_seq,
                             const std::vector<std::int32_t>& labels) {
  const std::size_t B = input_seq.dim(1);
  SEIBW_CHECK_VALUE(labels.size() == B, "ensemble_report: label count mismatch");
  net.forward(input_seq, Phase::eval);
  NoiseTraceT<T> noise = extract_noise(net);

  MemberResult result;
  TensorT<T> mean_softmax({B, net.num_classes});
  for (std::size_t t = 1; t <= net.horizon; ++t) {
    TensorT<T> logits = net.replay_member(slice_step(input_seq, t), t, noise);
    TensorT<T> probs = softmax(logits);
    mean_softmax.add_(probs);

    auto preds = argmax_rows(logits);
    std::size_t correct = 0;
    double conf = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      if (preds[b] == static_cast<std::size_t>(labels[b])) ++correct;
      conf += static_cast<double>(probs[b * net.num_classes + preds[b]]);
    }
    MemberResult::Member m;
    m.index = t;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(B);
    m.mean_confidence = conf / static_cast<double>(B);
    result.members.push_back(m);
  }

  auto preds = argmax_rows(mean_softmax);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < B; ++b)
    if (preds[b] == static_cast<std::size_t>(labels[b])) ++correct;
  result.ensemble_accuracy = static_cast<double>(correct) / static_cast<double>(B);
  return result;
}

void write_member_csv(const MemberResult& result, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  f << "member_index,accuracy,mean_confidence\n";
  for (const auto& m : result.members)
    f << m.index << "," << m.accuracy << "," << m.mean_confidence << "\n";
  f << "ensemble," << result.ensemble_accuracy << ",-\n";
}

#define SEIBW_INSTANTIATE(T)                                                             \
  template NoiseTraceT<T> extract_noise<T>(Network<T>&);                                 \
  template TensorT<T> replay_member<T>(Network<T>&, const TensorT<T>&, std::size_t,      \
                                       const NoiseTraceT<T>&);                           \
  template std::size_t verify_decomposition<T>(Network<T>&, const TensorT<T>&);          \
  template MemberResult ensemble_report<T>(Network<T>&, const TensorT<T>&,               \
                                           const std::vector<std::int32_t>&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
