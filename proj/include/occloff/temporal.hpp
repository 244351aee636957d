#pragma once

#include <occloff/params.hpp>
#include <occloff/volume.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace occloff {

/// Per-voxel cross-frame attention: the current voxel feature is the query,
/// the ego-aligned features of all available frames are keys and values, and
/// the softmax runs over frames. Missing history frames are simply absent
/// from the key set.
template <typename T>
class TemporalFuser {
 public:
  TemporalFuser(ParamStore<T>& params, int dim, int heads, const std::string& prefix = "temporal")
      : dim_(dim), heads_(heads) {
    const ad::Index hd = dim / heads;
    for (int m = 0; m < heads; ++m) {
      std::string h = std::to_string(m);
      q_w_.push_back(params.add(prefix + ".q" + h + ".w", {dim_, hd}, Init::kXavier));
      k_w_.push_back(params.add(prefix + ".k" + h + ".w", {dim_, hd}, Init::kXavier));
      v_w_.push_back(params.add(prefix + ".v" + h + ".w", {dim_, hd}, Init::kXavier));
      o_w_.push_back(params.add(prefix + ".o" + h + ".w", {hd, dim_}, Init::kXavier));
    }
  }

  /// `volumes` are chronological with the current frame last; each entry
  /// carries the ego pose it was computed in.
  FeatureVolume<T> forward(ad::Tape<T>& tape, const std::vector<FeatureVolume<T>>& volumes,
                           const std::vector<EgoPose>& poses) const {
    if (volumes.empty() || volumes.size() != poses.size())
      throw std::invalid_argument("TemporalFuser: volumes/poses mismatch");
    const auto& current = volumes.back();
    const EgoPose& pose_now = poses.back();

    std::vector<FeatureVolume<T>> aligned;
    aligned.reserve(volumes.size());
    for (size_t f = 0; f < volumes.size(); ++f) {
      if (volumes[f].grid.dims != current.grid.dims)
        throw std::invalid_argument("TemporalFuser: grid mismatch across frames");
      aligned.push_back(f + 1 == volumes.size() ? current
                                                : align_volume(tape, volumes[f], poses[f], pose_now));
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dim_) / heads_);
    ad::Ptr<T> out;
    for (int m = 0; m < heads_; ++m) {
      auto q = tape.linear(current.features, q_w_[m], nullptr);
      std::vector<ad::Ptr<T>> scores, values;
      for (const auto& vol : aligned) {
        auto k = tape.linear(vol.features, k_w_[m], nullptr);
        scores.push_back(tape.scale(tape.rowwise_dot(q, k), static_cast<T>(scale)));
        values.push_back(tape.linear(vol.features, v_w_[m], nullptr));
      }
      auto weights = tape.softmax_rows(tape.concat_cols(scores));  // [N, frames]
      auto pooled = tape.blend_frames(values, weights);
      auto head_out = tape.linear(pooled, o_w_[m], nullptr);
      out = out ? tape.add(out, head_out) : head_out;
    }

    FeatureVolume<T> fused;
    fused.grid = current.grid;
    fused.features = out;
    fused.occupancy = current.occupancy;
    return fused;
  }

 private:
  int dim_, heads_;
  std::vector<ad::Ptr<T>> q_w_, k_w_, v_w_, o_w_;
};

/// Trilinear x-ratio upsampling followed by two 3x3x3 convolutions and a
/// linear head producing per-voxel category logits at fine resolution.
template <typename T>
class Decoder {
 public:
  Decoder(ParamStore<T>& params, int dim, int hidden, int n_classes,
          const std::string& prefix = "decoder")
      : dim_(dim), hidden_(hidden), n_classes_(n_classes) {
    conv1_w_ = params.add(prefix + ".conv1.w", {27 * static_cast<ad::Index>(dim), hidden},
                          Init::kXavier, 27.0 * dim, hidden);
    conv1_b_ = params.add(prefix + ".conv1.b", {hidden}, Init::kZero);
    conv2_w_ = params.add(prefix + ".conv2.w", {27 * static_cast<ad::Index>(hidden), hidden},
                          Init::kXavier, 27.0 * hidden, hidden);
    conv2_b_ = params.add(prefix + ".conv2.b", {hidden}, Init::kZero);
    head_w_ = params.add(prefix + ".head.w", {hidden, static_cast<ad::Index>(n_classes) + 1},
                         Init::kXavier);
    head_b_ = params.add(prefix + ".head.b", {static_cast<ad::Index>(n_classes) + 1}, Init::kZero);
  }

  struct Out {
    FeatureVolume<T> fine;
    ad::Ptr<T> logits;  // [n_fine_voxels, n_classes + 1]
  };

  Out forward(ad::Tape<T>& tape, const FeatureVolume<T>& coarse, int ratio) const {
    auto table = build_upsample_table(coarse.grid, ratio);
    VoxelGridSpec fine_grid(
        {coarse.grid.dims[0] * ratio, coarse.grid.dims[1] * ratio, coarse.grid.dims[2] * ratio},
        coarse.grid.voxel_size / ratio, coarse.grid.origin);

    std::vector<ad::Index> idx(table.indices.begin(), table.indices.end());
    std::vector<T> w(table.weights.size());
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(table.weights[i]);
    auto up = tape.gather_blend(coarse.features, std::move(idx), std::move(w), 8);

    auto h1 = tape.silu(tape.conv3(up, fine_grid.dims[0], fine_grid.dims[1], fine_grid.dims[2], 3,
                                   conv1_w_, conv1_b_));
    auto h2 = tape.silu(tape.conv3(h1, fine_grid.dims[0], fine_grid.dims[1], fine_grid.dims[2], 3,
                                   conv2_w_, conv2_b_));

    Out out;
    out.fine.grid = fine_grid;
    out.fine.features = h2;
    out.fine.occupancy.assign(static_cast<size_t>(fine_grid.num_voxels()), 0);
    for (int64_t v = 0; v < fine_grid.num_voxels(); ++v) {
      auto [h, wv, z] = fine_grid.unflatten(v);
      out.fine.occupancy[v] = coarse.occupancy[coarse.grid.flatten(h / ratio, wv / ratio, z / ratio)];
    }
    out.logits = tape.linear(h2, head_w_, head_b_);
    return out;
  }

  int hidden() const { return hidden_; }

 private:
  int dim_, hidden_, n_classes_;
  ad::Ptr<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_, head_w_, head_b_;
};

}  // namespace occloff
