// SPDX-License-Identifier: Apache-2.0
//
// Scale-invariant SNR, its improvement over the raw mixture, and the
// utterance-level permutation-invariant loss with a brute-force assignment
// search (N_S! stays tiny at desk scale).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "percep/errors.hpp"
#include "percep/tensor.hpp"

namespace percep {

constexpr double kSiSnrCapDb = 60.0;
constexpr double kSiSnrEps = 1e-8;
constexpr int kMaxSources = 6;

// 10*log10 of the projection/residual power ratio, both signals zero-meaned,
// capped to +/-60 dB. Differentiable; returns a scalar tensor.
template <typename S>
TensorT<S> si_snr(TensorT<S> est, TensorT<S> ref, S eps = static_cast<S>(kSiSnrEps)) {
  if (est.numel() != ref.numel()) {
    throw LengthMismatch("si_snr: estimate length " + std::to_string(est.numel()) +
                         " vs reference length " + std::to_string(ref.numel()));
  }
  TensorT<S> ref_zm = sub(ref, mean(ref));
  TensorT<S> ref_energy = sum(mul(ref_zm, ref_zm));
  if (ref_energy.value() == S(0)) {
    throw DegenerateReference("si_snr: reference is constant (zero energy after mean removal)");
  }
  TensorT<S> est_zm = sub(est, mean(est));
  TensorT<S> coeff = div(sum(mul(est_zm, ref_zm)), add_const(ref_energy, eps));
  TensorT<S> s_t = mul(ref_zm, coeff);
  TensorT<S> err = sub(est_zm, s_t);
  TensorT<S> ratio = div(add_const(sum(mul(s_t, s_t)), eps), add_const(sum(mul(err, err)), eps));
  TensorT<S> db = scale(log_op(ratio), static_cast<S>(10.0 / std::log(10.0)));
  return clamp(db, static_cast<S>(-kSiSnrCapDb), static_cast<S>(kSiSnrCapDb));
}

template <typename S>
TensorT<S> si_snr_improvement(TensorT<S> est, TensorT<S> ref, TensorT<S> mixture,
                              S eps = static_cast<S>(kSiSnrEps)) {
  return sub(si_snr(est, ref, eps), si_snr(mixture, ref, eps));
}

struct PermAssignment {
  std::vector<int> phi;  // estimate index -> reference index
  double score = 0.0;    // mean SI-SNR in dB under phi, the maximum over all phi
};

// Exhaustive argmax of mean(matrix[i][phi(i)]) over all permutations.
// Lexicographically first permutation wins ties, so the result is stable.
template <typename S>
PermAssignment perm_bruteforce(const std::vector<std::vector<S>>& score_matrix) {
  const size_t n = score_matrix.size();
  if (n == 0) throw TooFewItems("permutation search needs at least one source");
  if (n > kMaxSources) {
    throw TooManySources("permutation search over " + std::to_string(n) +
                         " sources exceeds the factorial guard of " + std::to_string(kMaxSources));
  }
  for (const auto& row : score_matrix) {
    if (row.size() != n) throw ShapeMismatch("permutation score matrix must be square");
  }
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  PermAssignment best;
  bool first = true;
  do {
    S acc = S(0);
    for (size_t i = 0; i < n; ++i) acc += score_matrix[i][static_cast<size_t>(perm[i])];
    const S score = acc / static_cast<S>(n);
    if (first || static_cast<double>(score) > best.score) {
      best.phi = perm;
      best.score = static_cast<double>(score);
      first = false;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Mean SI-SNR under a fixed assignment, differentiable through the tape.
template <typename S>
TensorT<S> matched_mean_si_snr(const std::vector<TensorT<S>>& ests,
                               const std::vector<TensorT<S>>& refs, const std::vector<int>& phi,
                               S eps = static_cast<S>(kSiSnrEps)) {
  if (ests.size() != refs.size() || ests.size() != phi.size() || ests.empty()) {
    throw LengthMismatch("matched mean: " + std::to_string(ests.size()) + " estimates vs " +
                         std::to_string(refs.size()) + " references vs assignment of " +
                         std::to_string(phi.size()));
  }
  TensorT<S> acc = si_snr(ests[0], refs[static_cast<size_t>(phi[0])], eps);
  for (size_t i = 1; i < ests.size(); ++i) {
    acc = add(acc, si_snr(ests[i], refs[static_cast<size_t>(phi[i])], eps));
  }
  return div(acc, TensorT<S>::scalar(static_cast<S>(ests.size())));
}

// Plain-valued metric: best-assignment mean SI-SNR improvement over the
// mixture, in dB. Never records on a tape.
template <typename S>
std::pair<double, PermAssignment> mean_si_snri(const std::vector<TensorT<S>>& ests,
                                               const std::vector<TensorT<S>>& refs,
                                               TensorT<S> mixture,
                                               S eps = static_cast<S>(kSiSnrEps)) {
  const size_t n = ests.size();
  if (n == 0 || refs.size() != n) {
    throw LengthMismatch("mean_si_snri: " + std::to_string(n) + " estimates vs " +
                         std::to_string(refs.size()) + " references");
  }
  const auto plain = [](const TensorT<S>& t) {
    return TensorT<S>::from_values(t.shape(), {t.values().begin(), t.values().end()});
  };
  TensorT<S> mix = plain(mixture);
  std::vector<std::vector<S>> m(n, std::vector<S>(n));
  for (size_t i = 0; i < n; ++i) {
    TensorT<S> e = plain(ests[i]);
    for (size_t j = 0; j < n; ++j) m[i][j] = si_snr(e, plain(refs[j]), eps).value();
  }
  PermAssignment best = perm_bruteforce(m);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const auto j = static_cast<size_t>(best.phi[i]);
    acc += static_cast<double>(m[i][j]) -
           static_cast<double>(si_snr(mix, plain(refs[j]), eps).value());
  }
  return {acc / static_cast<double>(n), best};
}

// Picks the assignment maximizing mean SI-SNR (evaluated off-tape), then
// builds the differentiable loss = -mean SI-SNR under that fixed assignment.
// The permutation is a constant of the forward pass.
template <typename S>
std::pair<TensorT<S>, PermAssignment> upit_loss(const std::vector<TensorT<S>>& ests,
                                                const std::vector<TensorT<S>>& refs,
                                                S eps = static_cast<S>(kSiSnrEps)) {
  const size_t n = ests.size();
  if (n == 0 || refs.size() != n) {
    throw LengthMismatch("upit_loss: " + std::to_string(n) + " estimates vs " +
                         std::to_string(refs.size()) + " references");
  }
  if (n > kMaxSources) {
    throw TooManySources("upit_loss over " + std::to_string(n) + " sources exceeds the factorial guard");
  }
  // Score matrix from plain value copies: never recorded, even under a tape.
  std::vector<std::vector<S>> m(n, std::vector<S>(n));
  for (size_t i = 0; i < n; ++i) {
    TensorT<S> e = TensorT<S>::from_values(ests[i].shape(),
                                           {ests[i].values().begin(), ests[i].values().end()});
    for (size_t j = 0; j < n; ++j) {
      TensorT<S> r = TensorT<S>::from_values(refs[j].shape(),
                                             {refs[j].values().begin(), refs[j].values().end()});
      m[i][j] = si_snr(e, r, eps).value();
    }
  }
  PermAssignment best = perm_bruteforce(m);
  TensorT<S> loss = scale(matched_mean_si_snr(ests, refs, best.phi, eps), S(-1));
  return {loss, best};
}

}  // namespace percep
