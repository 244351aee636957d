#pragma once

#include <occloff/backbones.hpp>
#include <occloff/config.hpp>
#include <occloff/params.hpp>
#include <occloff/volume.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace occloff {

// ---------------------------------------------------------------- query proposal

/// Shannon entropy (natural log) of the softmax of each logit row.
template <typename T>
std::vector<double> entropy_from_logits(const ad::Tensor<T>& logits) {
  const ad::Index n = logits.rows(), c = logits.cols();
  std::vector<double> entropy(static_cast<size_t>(n), 0.0);
  for (ad::Index r = 0; r < n; ++r) {
    const T* row = logits.val.data() + r * c;
    double mx = static_cast<double>(row[0]);
    for (ad::Index j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (ad::Index j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    double h = 0.0;
    for (ad::Index j = 0; j < c; ++j) {
      double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
      if (p > 0.0) h -= p * std::log(p);
    }
    entropy[r] = h;
  }
  return entropy;
}

/// Top-K% voxel selection by entropy.
struct EntropyMask {
  std::vector<int64_t> selected;  // exactly ceil(K/100 * V) indices
  std::vector<double> entropies;
};

inline int64_t top_k_count(double k_percent, int64_t total) {
  return static_cast<int64_t>(std::ceil(k_percent * static_cast<double>(total) / 100.0));
}

/// Exactly ceil(K/100 * V) voxels with the largest entropies; ties broken by
/// ascending voxel index. Requires 0 < K <= 100 and a finite entropy field.
inline EntropyMask select_queries(std::vector<double> entropies, double k_percent) {
  if (!(k_percent > 0.0 && k_percent <= 100.0))
    throw std::invalid_argument("select_queries: k_percent must be in (0, 100]");
  for (double e : entropies)
    if (!std::isfinite(e)) throw std::invalid_argument("select_queries: non-finite entropy");
  const int64_t total = static_cast<int64_t>(entropies.size());
  const int64_t count = std::min(top_k_count(k_percent, total), total);
  std::vector<int64_t> order(entropies.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (entropies[a] != entropies[b]) return entropies[a] > entropies[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(count));
  std::sort(order.begin(), order.end());
  EntropyMask mask;
  mask.selected = std::move(order);
  mask.entropies = std::move(entropies);
  return mask;
}

// ---------------------------------------------------------------- deformable attention

template <typename T>
struct DeformableAttentionParams {
  int n_heads = 4;
  int n_points = 8;
  int dim = 32;
  ad::Ptr<T> offset_w, offset_b;  // query -> n_heads*n_points 2-d offsets (normalized units)
  ad::Ptr<T> weight_w, weight_b;  // query -> n_heads*n_points attention logits
  std::vector<ad::Ptr<T>> value_w;  // per head, dim -> dim/n_heads
  std::vector<ad::Ptr<T>> out_w;    // per head, dim/n_heads -> dim

  DeformableAttentionParams() = default;
  DeformableAttentionParams(ParamStore<T>& params, int heads, int points, int d,
                            const std::string& prefix)
      : n_heads(heads), n_points(points), dim(d) {
    const ad::Index hd = d / heads;
    offset_w = params.add(prefix + ".offset.w", {d, static_cast<ad::Index>(heads) * points * 2},
                          Init::kZero);
    offset_b = params.add(prefix + ".offset.b", {static_cast<ad::Index>(heads) * points * 2},
                          Init::kNormalSmall);
    weight_w = params.add(prefix + ".weight.w", {d, static_cast<ad::Index>(heads) * points},
                          Init::kXavier);
    weight_b = params.add(prefix + ".weight.b", {static_cast<ad::Index>(heads) * points},
                          Init::kZero);
    for (int m = 0; m < heads; ++m) {
      value_w.push_back(
          params.add(prefix + ".value" + std::to_string(m) + ".w", {d, hd}, Init::kXavier));
      out_w.push_back(
          params.add(prefix + ".out" + std::to_string(m) + ".w", {hd, d}, Init::kXavier));
    }
  }
};

/// DA(z, p, x): per head, attention-weighted sum of value-projected bilinear
/// samples at learned offsets around the normalized reference point, mapped
/// back through the head output projection and summed over heads.
template <typename T>
ad::Ptr<T> deformable_attention(ad::Tape<T>& tape, const ad::Ptr<T>& queries,
                                const std::vector<std::array<double, 2>>& ref_norm,
                                const PyramidLevel<T>& level,
                                const DeformableAttentionParams<T>& p) {
  const ad::Index nq = queries->rows();
  if (nq != static_cast<ad::Index>(ref_norm.size()))
    throw std::invalid_argument("deformable_attention: query/reference count mismatch");
  const ad::Index hk = static_cast<ad::Index>(p.n_heads) * p.n_points;

  auto offsets = tape.linear(queries, p.offset_w, p.offset_b);              // [Nq, hk*2]
  auto logits = tape.linear(queries, p.weight_w, p.weight_b);               // [Nq, hk]
  auto weights = tape.softmax_rows(
      tape.reshape_copy(logits, {nq * p.n_heads, p.n_points}));             // per-head over k
  auto wflat = tape.reshape_copy(weights, {nq * hk});

  // absolute sampling positions in level pixel coordinates
  auto off2 = tape.reshape_copy(offsets, {nq * hk, 2});
  std::vector<T> ref_rep(static_cast<size_t>(nq) * hk * 2);
  for (ad::Index q = 0; q < nq; ++q)
    for (ad::Index s = 0; s < hk; ++s) {
      ref_rep[(q * hk + s) * 2 + 0] = static_cast<T>(ref_norm[q][0]);
      ref_rep[(q * hk + s) * 2 + 1] = static_cast<T>(ref_norm[q][1]);
    }
  auto pos_norm = tape.add(off2, tape.constant({nq * hk, 2}, ref_rep));
  std::vector<T> scale_px(static_cast<size_t>(nq) * hk * 2), shift_px(scale_px.size());
  for (size_t i = 0; i < scale_px.size(); i += 2) {
    scale_px[i] = static_cast<T>(level.width);
    scale_px[i + 1] = static_cast<T>(level.height);
    shift_px[i] = shift_px[i + 1] = static_cast<T>(-0.5);
  }
  auto pos_px = tape.affine(pos_norm, std::move(scale_px), std::move(shift_px));
  auto sampled = tape.bilinear_sample(level.map, level.height, level.width, pos_px);  // [Nq*hk, D]

  ad::Ptr<T> out;
  for (int m = 0; m < p.n_heads; ++m) {
    std::vector<ad::Index> rows(static_cast<size_t>(nq) * p.n_points);
    for (ad::Index q = 0; q < nq; ++q)
      for (ad::Index k = 0; k < p.n_points; ++k)
        rows[q * p.n_points + k] = q * hk + m * p.n_points + k;
    auto head_samples = tape.gather_rows(sampled, rows);            // [Nq*Nk, D]
    auto head_vals = tape.linear(head_samples, p.value_w[m], nullptr);
    auto head_weights = tape.gather_elems(wflat, rows);             // [Nq*Nk]
    auto weighted = tape.mul_rows(head_vals, head_weights);
    auto pooled = tape.sum_groups(weighted, p.n_points);            // [Nq, D/Nh]
    auto head_out = tape.linear(pooled, p.out_w[m], nullptr);       // [Nq, D]
    out = out ? tape.add(out, head_out) : head_out;
  }
  return out;
}

// ---------------------------------------------------------------- point preprocessing

/// Greedy farthest point sampling: each pick maximizes the minimum distance
/// to the already-selected set; ties break to the lowest point index.
inline std::vector<int> farthest_point_sample(const std::vector<Vec3>& pts, int k,
                                              int seed_index) {
  if (k <= 0 || pts.empty()) return {};
  k = std::min<int>(k, static_cast<int>(pts.size()));
  std::vector<int> picked;
  picked.reserve(k);
  std::vector<double> dist(pts.size(), std::numeric_limits<double>::infinity());
  std::vector<char> taken(pts.size(), 0);
  int cur = seed_index;
  for (int step = 0; step < k; ++step) {
    picked.push_back(cur);
    taken[cur] = 1;
    for (size_t i = 0; i < pts.size(); ++i)
      dist[i] = std::min(dist[i], (pts[i] - pts[cur]).norm());
    int best = -1;
    double best_d = -1.0;
    for (size_t i = 0; i < pts.size(); ++i) {
      if (taken[i]) continue;
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    cur = best;
  }
  return picked;
}

/// Bound the per-voxel point count to [min_points, max_points]: farthest
/// point sampling (seeded at the point nearest the voxel center) when over,
/// unchanged when in range, uniform in-voxel padding when under.
inline std::vector<Vec3> preprocess_points(const std::vector<Vec3>& pts, int min_points,
                                           int max_points, const Vec3& lo, const Vec3& hi,
                                           const Vec3& center, Rng& rng) {
  if (min_points < 1 || min_points > max_points)
    throw std::invalid_argument("preprocess_points: need 1 <= min_points <= max_points");
  std::vector<Vec3> out;
  if (static_cast<int>(pts.size()) > max_points) {
    int seed = 0;
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < pts.size(); ++i) {
      double d = (pts[i] - center).norm();
      if (d < best) {
        best = d;
        seed = static_cast<int>(i);
      }
    }
    for (int idx : farthest_point_sample(pts, max_points, seed)) out.push_back(pts[idx]);
    return out;
  }
  out = pts;
  while (static_cast<int>(out.size()) < min_points)
    out.emplace_back(rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()),
                     rng.uniform(lo.z(), hi.z()));
  return out;
}

// ---------------------------------------------------------------- semantic attention

/// Keys sampled from the shallow pyramid levels at point projections.
/// segments[j] is the query-voxel slot the key belongs to.
template <typename T>
struct KeySet {
  ad::Ptr<T> rows;  // [n_keys, D]; null when no key exists
  std::vector<ad::Index> segments;
  int64_t n_keys() const { return rows ? rows->rows() : 0; }
};

/// Project every preprocessed point into every hit view and bilinearly
/// sample the shallow levels. Points hitting no view contribute no keys.
template <typename T>
KeySet<T> gather_keys(ad::Tape<T>& tape, const std::vector<std::vector<Vec3>>& voxel_points,
                      const ImagePyramid<T>& pyramid, const std::vector<CameraModel>& rig,
                      const std::vector<int>& shallow_levels) {
  KeySet<T> keys;
  std::vector<ad::Ptr<T>> chunks;
  for (size_t view = 0; view < rig.size(); ++view) {
    const auto& cam = rig[view];
    // projections of every (voxel, point) hitting this view
    std::vector<std::array<double, 2>> uv_norm;
    std::vector<ad::Index> segs;
    for (size_t v = 0; v < voxel_points.size(); ++v) {
      for (const auto& pt : voxel_points[v]) {
        auto pr = project(pt, cam);
        if (!pr) continue;
        uv_norm.push_back({pr->u / cam.width, pr->v / cam.height});
        segs.push_back(static_cast<ad::Index>(v));
      }
    }
    if (uv_norm.empty()) continue;
    for (int level : shallow_levels) {
      const auto& lvl = pyramid.views[view][level];
      auto pos = tape.tensor({static_cast<ad::Index>(uv_norm.size()), 2}, false);
      for (size_t i = 0; i < uv_norm.size(); ++i) {
        pos->val[i * 2 + 0] = static_cast<T>(uv_norm[i][0] * lvl.width - 0.5);
        pos->val[i * 2 + 1] = static_cast<T>(uv_norm[i][1] * lvl.height - 0.5);
      }
      chunks.push_back(tape.bilinear_sample(lvl.map, lvl.height, lvl.width, pos));
      keys.segments.insert(keys.segments.end(), segs.begin(), segs.end());
    }
  }
  if (!chunks.empty())
    keys.rows = chunks.size() == 1 ? chunks[0] : tape.concat_rows(chunks);
  return keys;
}

template <typename T>
struct SemanticAttentionParams {
  int n_heads = 4;
  int dim = 32;
  std::vector<ad::Ptr<T>> q_score_w;  // per head, D -> D/M
  std::vector<ad::Ptr<T>> k_score_w;  // per head, D -> D/M
  std::vector<ad::Ptr<T>> value_w;    // per head, D -> D/M
  std::vector<ad::Ptr<T>> out_w;      // per head, D/M -> D

  SemanticAttentionParams() = default;
  SemanticAttentionParams(ParamStore<T>& params, int heads, int d, const std::string& prefix)
      : n_heads(heads), dim(d) {
    const ad::Index hd = d / heads;
    for (int m = 0; m < heads; ++m) {
      std::string h = std::to_string(m);
      q_score_w.push_back(params.add(prefix + ".qscore" + h + ".w", {d, hd}, Init::kXavier));
      k_score_w.push_back(params.add(prefix + ".kscore" + h + ".w", {d, hd}, Init::kXavier));
      value_w.push_back(params.add(prefix + ".value" + h + ".w", {d, hd}, Init::kXavier));
      out_w.push_back(params.add(prefix + ".out" + h + ".w", {hd, d}, Init::kXavier));
    }
  }
};

/// Scaled dot-product cross attention from each query voxel to its key set;
/// weights normalize over all of the voxel's keys (levels x views x points).
/// Queries with an empty key set receive a zero row.
template <typename T>
ad::Ptr<T> semantic_attention(ad::Tape<T>& tape, const ad::Ptr<T>& queries, const KeySet<T>& keys,
                              const SemanticAttentionParams<T>& p) {
  const ad::Index nq = queries->rows();
  if (keys.n_keys() == 0) return tape.tensor({nq, queries->cols()}, queries->needs_grad);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dim) / p.n_heads);

  ad::Ptr<T> out;
  for (int m = 0; m < p.n_heads; ++m) {
    auto q_proj = tape.linear(queries, p.q_score_w[m], nullptr);     // [Nq, D/M]
    auto q_rows = tape.gather_rows(q_proj, keys.segments);           // [M, D/M]
    auto k_proj = tape.linear(keys.rows, p.k_score_w[m], nullptr);   // [M, D/M]
    auto scores = tape.scale(tape.rowwise_dot(q_rows, k_proj), static_cast<T>(scale));
    auto attn = tape.segment_softmax(scores, keys.segments, nq);
    auto vals = tape.linear(keys.rows, p.value_w[m], nullptr);       // [M, D/M]
    auto pooled = tape.segment_sum_rows(tape.mul_rows(vals, attn), keys.segments, nq);
    auto head_out = tape.linear(pooled, p.out_w[m], nullptr);
    out = out ? tape.add(out, head_out) : head_out;
  }
  return out;
}

// ---------------------------------------------------------------- sparse blend

template <typename T>
struct BlendParams {
  ad::Ptr<T> conv_w, conv_b;  // submanifold 3x3x3 over the residual field
  ad::Ptr<T> ln_gain, ln_bias;

  BlendParams() = default;
  BlendParams(ParamStore<T>& params, int d, const std::string& prefix) {
    conv_w = params.add(prefix + ".conv.w", {27 * static_cast<ad::Index>(d), d}, Init::kXavier,
                        27.0 * d, d);
    conv_b = params.add(prefix + ".conv.b", {d}, Init::kZero);
    ln_gain = params.add(prefix + ".ln.gain", {d}, Init::kOne);
    ln_bias = params.add(prefix + ".ln.bias", {d}, Init::kZero);
  }
};

/// Submanifold 3x3x3 blend of the residual field at the masked voxels, then
/// add & layer-normalize with the input features at those voxels only.
/// Unmasked voxels are bit-identical to the input.
template <typename T>
FeatureVolume<T> sparse_blend(ad::Tape<T>& tape, const FeatureVolume<T>& volume,
                              const ad::Ptr<T>& residual, const std::vector<int64_t>& selected,
                              const BlendParams<T>& p, double eps) {
  FeatureVolume<T> out = volume;
  if (selected.empty()) return out;
  auto nbr = neighbor_table_27(volume.grid, selected);
  auto gathered = tape.gather_rows_padded(residual, nbr, 27);
  auto blended = tape.linear(gathered, p.conv_w, p.conv_b);
  std::vector<ad::Index> rows(selected.begin(), selected.end());
  auto current = tape.gather_rows(volume.features, rows);
  auto updated = tape.layernorm_rows(tape.add(current, blended), p.ln_gain, p.ln_bias,
                                     static_cast<T>(eps));
  out.features = tape.scatter_replace_rows(volume.features, rows, updated);
  return out;
}

// ---------------------------------------------------------------- fusion layer

/// G-SCA over the deep pyramid level: per masked voxel, the average of
/// per-view deformable attention across the views that capture its center;
/// voxels with an empty hit set keep a zero residual row. Returns a
/// full-grid residual field, zero off-mask.
template <typename T>
ad::Ptr<T> geometric_cross_attention_residual(ad::Tape<T>& tape, const FeatureVolume<T>& volume,
                                              const ImagePyramid<T>& pyramid,
                                              const std::vector<CameraModel>& rig,
                                              const std::vector<int64_t>& selected,
                                              const DeformableAttentionParams<T>& da) {
  const ad::Index n = volume.features->rows();
  auto residual = tape.tensor({n, volume.features->cols()}, false);
  if (selected.empty()) return residual;

  std::vector<ad::Index> sel_rows(selected.begin(), selected.end());
  auto queries = tape.gather_rows(volume.features, sel_rows);

  std::vector<Vec3> centers(selected.size());
  std::vector<int> hit_count(selected.size(), 0);
  for (size_t i = 0; i < selected.size(); ++i) {
    auto [h, w, z] = volume.grid.unflatten(selected[i]);
    centers[i] = voxel_center(volume.grid, h, w, z);
    for (const auto& cam : rig)
      if (project(centers[i], cam)) hit_count[i]++;
  }

  const int top = pyramid.levels() - 1;
  for (size_t view = 0; view < rig.size(); ++view) {
    const auto& cam = rig[view];
    std::vector<ad::Index> local_rows;
    std::vector<std::array<double, 2>> refs;
    std::vector<T> inv_hits;
    for (size_t i = 0; i < selected.size(); ++i) {
      auto pr = project(centers[i], cam);
      if (!pr) continue;
      local_rows.push_back(static_cast<ad::Index>(i));
      refs.push_back({pr->u / cam.width, pr->v / cam.height});
      inv_hits.push_back(static_cast<T>(1.0 / hit_count[i]));
    }
    if (local_rows.empty()) continue;
    auto view_queries = tape.gather_rows(queries, local_rows);
    auto attended = deformable_attention(tape, view_queries, refs, pyramid.views[view][top], da);
    auto scaled = tape.scale_rows_const(attended, std::move(inv_hits));
    std::vector<ad::Index> target_rows;
    target_rows.reserve(local_rows.size());
    for (ad::Index i : local_rows) target_rows.push_back(sel_rows[i]);
    residual = tape.scatter_add_rows(residual, target_rows, scaled);
  }
  return residual;
}

/// S-SCA: preprocess each masked voxel's points into [min_points,
/// max_points], gather shallow-level keys at their projections, and run the
/// per-voxel cross attention. Returns a full-grid residual field.
template <typename T>
ad::Ptr<T> semantic_cross_attention_residual(
    ad::Tape<T>& tape, const FeatureVolume<T>& volume, const ImagePyramid<T>& pyramid,
    const std::vector<CameraModel>& rig, const VoxelBuckets& buckets,
    const std::vector<int64_t>& selected, const SemanticAttentionParams<T>& ssca, int min_points,
    int max_points, uint64_t fps_seed) {
  const ad::Index n = volume.features->rows();
  auto residual = tape.tensor({n, volume.features->cols()}, false);
  if (selected.empty()) return residual;

  std::vector<std::vector<Vec3>> voxel_points(selected.size());
  static const std::vector<Vec3> kNoPoints;
  for (size_t i = 0; i < selected.size(); ++i) {
    auto it = buckets.points.find(selected[i]);
    const auto& raw = it == buckets.points.end() ? kNoPoints : it->second;
    auto [h, w, z] = volume.grid.unflatten(selected[i]);
    Vec3 lo = volume.grid.origin + Vec3(h, w, z) * volume.grid.voxel_size;
    Vec3 hi = lo + Vec3::Constant(volume.grid.voxel_size);
    Rng rng = Rng::fork(fps_seed, static_cast<uint64_t>(selected[i]));
    voxel_points[i] = preprocess_points(raw, min_points, max_points, lo, hi,
                                        voxel_center(volume.grid, h, w, z), rng);
  }

  std::vector<int> shallow(pyramid.levels() > 1 ? pyramid.levels() - 1 : 1);
  std::iota(shallow.begin(), shallow.end(), 0);
  auto keys = gather_keys(tape, voxel_points, pyramid, rig, shallow);

  std::vector<ad::Index> sel_rows(selected.begin(), selected.end());
  auto queries = tape.gather_rows(volume.features, sel_rows);
  auto attended = semantic_attention(tape, queries, keys, ssca);
  return tape.scatter_add_rows(residual, sel_rows, attended);
}

struct FusionWork {
  int64_t attention_calls_gsca = 0;
  int64_t attention_calls_ssca = 0;
  int64_t blend_sites = 0;
};

/// One sparse fusion layer: entropy-masked geometric cross attention over the
/// deep pyramid level, then entropy-masked semantic cross attention over the
/// shallow levels guided by in-voxel points; each block ends in a sparse
/// blend. The two query proposals are independent, with their own heads.
template <typename T>
class FusionLayer {
 public:
  struct Result {
    FeatureVolume<T> volume;
    ad::Ptr<T> aux_loss;  // sum of the two head cross-entropies; null w/o labels
    EntropyMask mask_gsca, mask_ssca;
    FusionWork work;
  };

  FusionLayer(ParamStore<T>& params, const ModelConfig& cfg, int n_classes,
              const std::string& prefix)
      : cfg_(cfg),
        n_classes_(n_classes),
        head_g_w_(params.add(prefix + ".head_g.w",
                             {cfg.feature_dim, static_cast<ad::Index>(n_classes) + 1},
                             Init::kXavier)),
        head_g_b_(params.add(prefix + ".head_g.b", {static_cast<ad::Index>(n_classes) + 1},
                             Init::kZero)),
        head_s_w_(params.add(prefix + ".head_s.w",
                             {cfg.feature_dim, static_cast<ad::Index>(n_classes) + 1},
                             Init::kXavier)),
        head_s_b_(params.add(prefix + ".head_s.b", {static_cast<ad::Index>(n_classes) + 1},
                             Init::kZero)),
        da_(params, cfg.da_heads, cfg.da_points, cfg.feature_dim, prefix + ".gsca"),
        ssca_(params, cfg.ssca_heads, cfg.feature_dim, prefix + ".ssca"),
        blend_g_(params, cfg.feature_dim, prefix + ".blend_g"),
        blend_s_(params, cfg.feature_dim, prefix + ".blend_s") {}

  Result forward(ad::Tape<T>& tape, const FeatureVolume<T>& volume,
                 const ImagePyramid<T>& pyramid, const std::vector<CameraModel>& rig,
                 const VoxelBuckets& buckets, const std::vector<int>* coarse_labels,
                 double k_percent, bool enable_gsca, bool enable_ssca, uint64_t fps_seed) const {
    Result res;
    res.volume = volume;
    if (k_percent <= 0.0) return res;  // dense-off override: pass through

    // --- geometric block
    if (enable_gsca) {
      auto logits = tape.linear(res.volume.features, head_g_w_, head_g_b_);
      res.mask_gsca = select_queries(entropy_from_logits(*logits), k_percent);
      if (coarse_labels) {
        auto aux = tape.cross_entropy_mean(logits, *coarse_labels);
        res.aux_loss = res.aux_loss ? tape.add(res.aux_loss, aux) : aux;
      }
      auto residual = geometric_cross_attention_residual(tape, res.volume, pyramid, rig,
                                                         res.mask_gsca.selected, da_);
      res.work.attention_calls_gsca += static_cast<int64_t>(res.mask_gsca.selected.size());
      res.work.blend_sites += static_cast<int64_t>(res.mask_gsca.selected.size());
      res.volume = sparse_blend(tape, res.volume, residual, res.mask_gsca.selected, blend_g_,
                                cfg_.layernorm_eps);
    }

    // --- semantic block (fresh proposal on the updated volume)
    if (enable_ssca) {
      auto logits = tape.linear(res.volume.features, head_s_w_, head_s_b_);
      res.mask_ssca = select_queries(entropy_from_logits(*logits), k_percent);
      if (coarse_labels) {
        auto aux = tape.cross_entropy_mean(logits, *coarse_labels);
        res.aux_loss = res.aux_loss ? tape.add(res.aux_loss, aux) : aux;
      }
      auto residual = semantic_cross_attention_residual(tape, res.volume, pyramid, rig, buckets,
                                                        res.mask_ssca.selected, ssca_,
                                                        cfg_.min_points, cfg_.max_points, fps_seed);
      res.work.attention_calls_ssca += static_cast<int64_t>(res.mask_ssca.selected.size());
      res.work.blend_sites += static_cast<int64_t>(res.mask_ssca.selected.size());
      res.volume = sparse_blend(tape, res.volume, residual, res.mask_ssca.selected, blend_s_,
                                cfg_.layernorm_eps);
    }
    return res;
  }

 private:
  ModelConfig cfg_;
  int n_classes_;
  ad::Ptr<T> head_g_w_, head_g_b_, head_s_w_, head_s_b_;
  DeformableAttentionParams<T> da_;
  SemanticAttentionParams<T> ssca_;
  BlendParams<T> blend_g_, blend_s_;
};

}  // namespace occloff
