#pragma once

#include <occloff/params.hpp>
#include <occloff/rng.hpp>
#include <occloff/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace occloff {

// ---------------------------------------------------------------- plain helpers
// Double-precision reference implementations used by tests and oracles.

inline std::vector<double> to_distribution(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("to_distribution: empty vector");
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double denom = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    p[i] = std::exp(v[i] - mx);
    denom += p[i];
  }
  for (auto& x : p) x /= denom;
  return p;
}

/// Hellinger distance between two probability vectors: (1/sqrt(2)) * l2 norm
/// of the elementwise sqrt difference. Rejects non-distributions.
inline double hellinger(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty())
    throw std::invalid_argument("hellinger: dimension mismatch");
  double sp = 0.0, sq = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] < -1e-12 || q[i] < -1e-12)
      throw std::invalid_argument("hellinger: negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw std::invalid_argument("hellinger: input does not sum to 1");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    double d = std::sqrt(std::max(p[i], 0.0)) - std::sqrt(std::max(q[i], 0.0));
    acc += d * d;
  }
  return std::sqrt(acc / 2.0);
}

inline double logsumexp_plain(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Proxy loss evaluated from a precomputed distance matrix [n_vox, n_cat]
/// (row-major). The normalizer is the bank size n_cat.
inline double proxy_loss_from_distances(const std::vector<double>& dmat, int n_vox, int n_cat,
                                        const std::vector<int>& labels, double alpha,
                                        double beta) {
  if (static_cast<int>(labels.size()) != n_vox ||
      static_cast<int>(dmat.size()) != n_vox * n_cat)
    throw std::invalid_argument("proxy_loss_from_distances: shape mismatch");
  double loss = 0.0;
  for (int s = 0; s < n_cat; ++s) {
    std::vector<double> pos, neg;
    for (int v = 0; v < n_vox; ++v) {
      double d = dmat[v * n_cat + s];
      if (labels[v] == s)
        pos.push_back(alpha * d);
      else
        neg.push_back(-beta * d);
    }
    if (!pos.empty()) loss += logsumexp_plain(pos);
    if (!neg.empty()) loss += logsumexp_plain(neg);
  }
  return loss / n_cat;
}

/// Closed-form gradient of the proxy loss with respect to each distance
/// entry (the softmax-shaped expression); returned row-major [n_vox, n_cat].
inline std::vector<double> proxy_grad_wrt_distance(const std::vector<double>& dmat, int n_vox,
                                                   int n_cat, const std::vector<int>& labels,
                                                   double alpha, double beta) {
  std::vector<double> grad(static_cast<size_t>(n_vox) * n_cat, 0.0);
  for (int s = 0; s < n_cat; ++s) {
    double pos_max = -std::numeric_limits<double>::infinity();
    double neg_max = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < n_vox; ++v) {
      double d = dmat[v * n_cat + s];
      if (labels[v] == s)
        pos_max = std::max(pos_max, alpha * d);
      else
        neg_max = std::max(neg_max, -beta * d);
    }
    double pos_denom = 0.0, neg_denom = 0.0;
    for (int v = 0; v < n_vox; ++v) {
      double d = dmat[v * n_cat + s];
      if (labels[v] == s)
        pos_denom += std::exp(alpha * d - pos_max);
      else
        neg_denom += std::exp(-beta * d - neg_max);
    }
    for (int v = 0; v < n_vox; ++v) {
      double d = dmat[v * n_cat + s];
      if (labels[v] == s)
        grad[v * n_cat + s] = alpha * std::exp(alpha * d - pos_max) / pos_denom / n_cat;
      else
        grad[v * n_cat + s] = -beta * std::exp(-beta * d - neg_max) / neg_denom / n_cat;
    }
  }
  return grad;
}

// ---------------------------------------------------------------- proxy loss (tape)

/// Hellinger distance matrix between softmaxed voxel logits and softmaxed
/// proxies: d = sqrt(1 - sum_c sqrt(p_c q_c)).
template <typename T>
ad::Ptr<T> proxy_distance_matrix(ad::Tape<T>& tape, const ad::Ptr<T>& voxel_logits,
                                 const ad::Ptr<T>& bank) {
  if (voxel_logits->cols() != bank->cols())
    throw std::invalid_argument("proxy_distance_matrix: dimension mismatch");
  auto p = tape.sqrt_pos(tape.softmax_rows(voxel_logits));
  auto q = tape.sqrt_pos(tape.softmax_rows(bank));
  auto bc = tape.matmul_nt(p, q);  // Bhattacharyya coefficients [n_vox, n_cat]
  return tape.sqrt_pos(tape.const_minus(T(1), bc));
}

/// Eq-8-style loss from a distance tensor: per category, overflow-safe
/// log-sum-exp over the positive and negative voxel sets, averaged over the
/// full bank.
template <typename T>
ad::Ptr<T> proxy_loss_from_distance_tensor(ad::Tape<T>& tape, const ad::Ptr<T>& dmat,
                                           const std::vector<int>& labels, double alpha,
                                           double beta) {
  const ad::Index n_vox = dmat->rows(), n_cat = dmat->cols();
  if (static_cast<ad::Index>(labels.size()) != n_vox)
    throw std::invalid_argument("proxy_loss: label count mismatch");
  ad::Ptr<T> acc;
  auto flat = tape.reshape_copy(dmat, {n_vox * n_cat});
  for (ad::Index s = 0; s < n_cat; ++s) {
    std::vector<ad::Index> pos, neg;
    for (ad::Index v = 0; v < n_vox; ++v)
      (labels[v] == s ? pos : neg).push_back(v * n_cat + s);
    if (!pos.empty()) {
      auto term = tape.logsumexp(tape.scale(tape.gather_elems(flat, pos), static_cast<T>(alpha)));
      acc = acc ? tape.add(acc, term) : term;
    }
    if (!neg.empty()) {
      auto term = tape.logsumexp(tape.scale(tape.gather_elems(flat, neg), static_cast<T>(-beta)));
      acc = acc ? tape.add(acc, term) : term;
    }
  }
  return tape.scale(acc, static_cast<T>(1.0 / n_cat));
}

/// Deterministic stratified subsample: at most max_n voxel indices covering
/// every present category (proportional quotas, at least one each).
/// max_n == 0 disables subsampling.
inline std::vector<ad::Index> stratified_subsample(const std::vector<int>& labels, int max_n,
                                                   uint64_t seed) {
  const int n = static_cast<int>(labels.size());
  std::vector<ad::Index> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (max_n <= 0 || n <= max_n) return all;

  std::map<int, std::vector<ad::Index>> by_cat;
  for (int i = 0; i < n; ++i) by_cat[labels[i]].push_back(i);
  const int n_cats = static_cast<int>(by_cat.size());

  // proportional quotas with a floor of one per present category
  std::vector<std::pair<int, int>> quota;  // (cat, quota)
  int assigned = 0;
  for (auto& [cat, idxs] : by_cat) {
    int q = std::max<int>(1, static_cast<int>(static_cast<int64_t>(max_n) * idxs.size() / n));
    q = std::min<int>(q, static_cast<int>(idxs.size()));
    quota.push_back({cat, q});
    assigned += q;
  }
  // trim the largest quotas down (never below 1) if we overshot
  while (assigned > max_n) {
    auto it = std::max_element(quota.begin(), quota.end(),
                               [](auto& a, auto& b) { return a.second < b.second; });
    if (it->second <= 1) break;
    it->second--;
    assigned--;
  }
  (void)n_cats;

  std::vector<ad::Index> picked;
  Rng rng = Rng::fork(seed, 0x9c0ffee);
  for (auto& [cat, q] : quota) {
    auto idxs = by_cat[cat];
    // partial Fisher-Yates, deterministic in the seed
    for (int i = 0; i < q; ++i) {
      size_t j = i + rng.uniform_index(idxs.size() - i);
      std::swap(idxs[i], idxs[j]);
      picked.push_back(idxs[i]);
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

/// Full occupancy proxy loss from fine logits: optional stratified voxel
/// subsampling, Hellinger distances to the proxy bank, Eq-8 aggregation.
template <typename T>
ad::Ptr<T> proxy_loss(ad::Tape<T>& tape, const ad::Ptr<T>& fine_logits,
                      const std::vector<int>& labels, const ad::Ptr<T>& bank, double alpha,
                      double beta, int max_voxels, uint64_t subsample_seed) {
  auto keep = stratified_subsample(labels, max_voxels, subsample_seed);
  std::vector<int> sub_labels(keep.size());
  for (size_t i = 0; i < keep.size(); ++i) sub_labels[i] = labels[keep[i]];
  auto rows = tape.gather_rows(fine_logits, keep);
  auto dmat = proxy_distance_matrix(tape, rows, bank);
  return proxy_loss_from_distance_tensor(tape, dmat, sub_labels, alpha, beta);
}

// ---------------------------------------------------------------- common losses

/// Lovász-softmax surrogate of mIoU over the classes present in the labels.
template <typename T>
ad::Ptr<T> lovasz_softmax_loss(ad::Tape<T>& tape, const ad::Ptr<T>& probs,
                               const std::vector<int>& labels) {
  const ad::Index n = probs->rows(), c = probs->cols();
  if (static_cast<ad::Index>(labels.size()) != n)
    throw std::invalid_argument("lovasz_softmax_loss: label count mismatch");
  std::vector<char> present(static_cast<size_t>(c), 0);
  for (int y : labels) present[y] = 1;

  ad::Ptr<T> acc;
  int n_present = 0;
  for (ad::Index cls = 0; cls < c; ++cls) {
    if (!present[cls]) continue;
    n_present++;
    // errors: 1 - p for foreground voxels, p for background voxels
    std::vector<T> mult(static_cast<size_t>(n)), add(static_cast<size_t>(n));
    for (ad::Index i = 0; i < n; ++i) {
      bool fg = labels[i] == cls;
      mult[i] = fg ? T(-1) : T(1);
      add[i] = fg ? T(1) : T(0);
    }
    auto errors = tape.affine(tape.column(probs, cls), std::move(mult), std::move(add));

    std::vector<ad::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](ad::Index a, ad::Index b) {
      if (errors->val[a] != errors->val[b]) return errors->val[a] > errors->val[b];
      return a < b;
    });

    // Lovász extension gradient of the Jaccard loss along the sorted errors
    double gts = 0.0;
    for (ad::Index i = 0; i < n; ++i)
      if (labels[i] == cls) gts += 1.0;
    std::vector<T> w(static_cast<size_t>(n));
    double inter = gts, uni = gts, prev = 0.0;
    for (ad::Index i = 0; i < n; ++i) {
      bool fg = labels[order[i]] == cls;
      inter -= fg ? 1.0 : 0.0;
      uni += fg ? 0.0 : 1.0;
      double jac = 1.0 - inter / uni;
      w[i] = static_cast<T>(jac - prev);
      prev = jac;
    }
    auto sorted_errors = tape.gather_elems(errors, order);
    auto term = tape.dot_const(sorted_errors, std::move(w));
    acc = acc ? tape.add(acc, term) : term;
  }
  if (!acc) throw std::invalid_argument("lovasz_softmax_loss: no labels");
  return tape.scale(acc, static_cast<T>(1.0 / n_present));
}

namespace detail {

/// -log(numerator/denominator) as log(denominator) - log(numerator).
template <typename T>
ad::Ptr<T> neg_log_ratio(ad::Tape<T>& tape, const ad::Ptr<T>& numerator, const ad::Ptr<T>& denom) {
  return tape.sub(tape.log_elem(denom), tape.log_elem(numerator));
}

template <typename T>
ad::Ptr<T> affinity_terms(ad::Tape<T>& tape, const ad::Ptr<T>& p, const std::vector<char>& mask) {
  const ad::Index n = p->size();
  int64_t n_pos = 0;
  for (char m : mask) n_pos += m;
  const int64_t n_neg = n - n_pos;

  std::vector<T> mvec(static_cast<size_t>(n)), nvec(static_cast<size_t>(n));
  for (ad::Index i = 0; i < n; ++i) {
    mvec[i] = mask[i] ? T(1) : T(0);
    nvec[i] = mask[i] ? T(0) : T(1);
  }
  ad::Ptr<T> acc;
  if (n_pos > 0) {
    auto tp_soft = tape.dot_const(p, mvec);  // sum of p over true sites
    auto precision = detail::neg_log_ratio(tape, tp_soft, tape.sum(p));
    auto recall = detail::neg_log_ratio(
        tape, tp_soft, tape.scalar_const(static_cast<T>(static_cast<double>(n_pos))));
    acc = tape.add(precision, recall);
  }
  if (n_neg > 0) {
    auto not_p = tape.const_minus(T(1), p);
    auto tn_soft = tape.dot_const(not_p, nvec);
    auto specificity = detail::neg_log_ratio(
        tape, tn_soft, tape.scalar_const(static_cast<T>(static_cast<double>(n_neg))));
    acc = acc ? tape.add(acc, specificity) : specificity;
  }
  return acc;  // null only if mask is empty AND full, impossible together
}

}  // namespace detail

/// Scene-class affinity on the binary occupied/empty split: log precision,
/// recall and specificity of the soft occupancy probability.
template <typename T>
ad::Ptr<T> scal_loss_geometric(ad::Tape<T>& tape, const ad::Ptr<T>& probs,
                               const std::vector<int>& labels) {
  auto p_occupied = tape.const_minus(T(1), tape.column(probs, 0));
  std::vector<char> mask(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) mask[i] = labels[i] != 0;
  auto terms = detail::affinity_terms(tape, p_occupied, mask);
  if (!terms) throw std::invalid_argument("scal_loss_geometric: empty grid");
  return terms;
}

/// Same affinity computed per semantic category (present in the labels) and
/// averaged.
template <typename T>
ad::Ptr<T> scal_loss_semantic(ad::Tape<T>& tape, const ad::Ptr<T>& probs,
                              const std::vector<int>& labels) {
  const ad::Index c = probs->cols();
  ad::Ptr<T> acc;
  int counted = 0;
  for (ad::Index cls = 1; cls < c; ++cls) {
    std::vector<char> mask(labels.size());
    int64_t n_pos = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      mask[i] = labels[i] == cls;
      n_pos += mask[i];
    }
    if (n_pos == 0) continue;  // category absent from this sample
    auto terms = detail::affinity_terms(tape, tape.column(probs, cls), mask);
    acc = acc ? tape.add(acc, terms) : terms;
    counted++;
  }
  if (!acc) throw std::invalid_argument("scal_loss_semantic: no semantic category present");
  return tape.scale(acc, static_cast<T>(1.0 / counted));
}

}  // namespace occloff
