#pragma once

#include <string>
#include <vector>

#include "seibw/network.hpp"

namespace seibw {

// Per-member (per-time-step) accuracy of the decoupled binary-activation
// sub-networks plus the aggregate of their mean softmax.
struct MemberResult {
  struct Member {
    std::size_t index = 0;  // 1-based time step the member replays
    double accuracy = 0.0;
    double mean_confidence = 0.0;  // mean max-softmax over samples
  };
  std::vector<Member> members;
  double ensemble_accuracy = 0.0;
};

// Reads the injected pre-activation terms n^l[t] = leak * v^l[t-1] out of a
// recorded forward pass, for every LIF layer and step. Step 1 entries are
// zero because v[0] = 0. Throws StateError without a recorded pass.
template <class T>
NoiseTraceT<T> extract_noise(Network<T>& net);

// Stateless single-pass member evaluation: each LIF computes
// u = noise + weighted input and thresholds it; no membrane state is
// carried. With the noise extracted from a recorded eval-phase pass the
// member reproduces that pass's step-t spikes bit-exactly.
template <class T>
TensorT<T> replay_member(Network<T>& net, const TensorT<T>& input_at_t, std::size_t t,
                         const NoiseTraceT<T>& noise);

// Verifies the decomposition: replays every member and compares every LIF
// layer's spikes against the recorded forward. Returns the number of
// mismatched elements (0 = exact).
template <class T>
std::size_t verify_decomposition(Network<T>& net, const TensorT<T>& input_seq);

// Per-member and mean-softmax-ensemble accuracy over a labeled batch.
template <class T>
MemberResult ensemble_report(Network<T>& net, const TensorT<T>& input_seq,
                             const std::vector<std::int32_t>& labels);

// CSV: member_index,accuracy,mean_confidence with a final ensemble row.
void write_member_csv(const MemberResult& result, const std::string& path);

}  // namespace seibw
