#pragma once

#include <occloff/backbones.hpp>
#include <occloff/config.hpp>
#include <occloff/fusion.hpp>
#include <occloff/losses.hpp>
#include <occloff/temporal.hpp>

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace occloff {

inline std::vector<int> labels_as_int(const std::vector<uint8_t>& labels) {
  return std::vector<int>(labels.begin(), labels.end());
}

/// Unweighted sum of the named loss terms; aborts on a non-finite term with
/// the offending name.
template <typename T>
ad::Ptr<T> total_loss(ad::Tape<T>& tape,
                      const std::vector<std::pair<std::string, ad::Ptr<T>>>& terms) {
  ad::Ptr<T> acc;
  for (const auto& [name, term] : terms) {
    if (!term) continue;
    if (!std::isfinite(static_cast<double>(term->val[0])))
      throw std::runtime_error("total_loss: non-finite term '" + name + "'");
    acc = acc ? tape.add(acc, term) : term;
  }
  if (!acc) throw std::invalid_argument("total_loss: no terms");
  return acc;
}

/// The full occupancy pipeline: per-frame encoders and sparse fusion layers,
/// cross-frame temporal fusion, trilinear decoding, and the training losses.
template <typename T>
class OccupancyPipeline {
 public:
  explicit OccupancyPipeline(const RunConfig& config)
      : cfg_(config),
        coarse_grid_(config.scene.grid.coarsened(config.scene.upsample_ratio)),
        n_classes_(config.scene.n_classes),
        params_(config.seed),
        img_enc_(params_, config.model.feature_dim),
        lidar_enc_(params_, config.model.feature_dim),
        temporal_(params_, config.model.feature_dim, config.model.da_heads),
        decoder_(params_, config.model.feature_dim, config.model.decoder_channels, n_classes_) {
    for (int l = 0; l < config.model.layers(); ++l)
      layers_.emplace_back(params_, config.model, n_classes_, "fusion" + std::to_string(l));
    proxies_ = params_.add("proxies",
                           {static_cast<ad::Index>(n_classes_) + 1,
                            static_cast<ad::Index>(n_classes_) + 1},
                           Init::kNormalSmall);
  }

  struct ForwardOptions {
    bool want_loss = true;
    uint64_t step_seed = 0;  // drives FPS padding and proxy subsampling
  };

  struct LayerMasks {
    EntropyMask gsca, ssca;
  };

  struct ForwardResult {
    ad::Ptr<T> logits;  // [n_fine_voxels, n_classes + 1]
    FeatureVolume<T> fine;
    ad::Ptr<T> loss_proxy, loss_ce, loss_lovasz, loss_scal_geo, loss_scal_sem, loss_aux, total;
    std::vector<std::vector<FusionWork>> work;  // [frame][layer]
    std::vector<LayerMasks> final_frame_masks;  // [layer]
    double fusion_seconds = 0.0;
    // fingerprint of every query proposal in the pass; identical signatures
    // mean the discrete selections did not change (used by gradient checks)
    uint64_t mask_signature = 0xcbf29ce484222325ull;

    std::vector<uint8_t> predicted_labels() const {
      const ad::Index n = logits->rows(), c = logits->cols();
      std::vector<uint8_t> pred(static_cast<size_t>(n));
      for (ad::Index r = 0; r < n; ++r) {
        const T* row = logits->val.data() + r * c;
        int best = 0;
        for (ad::Index j = 1; j < c; ++j)
          if (row[j] > row[best]) best = static_cast<int>(j);
        pred[r] = static_cast<uint8_t>(best);
      }
      return pred;
    }
  };

  /// `window`: chronological frames ending at the frame being predicted.
  ForwardResult forward(ad::Tape<T>& tape, const std::vector<const SceneSample*>& window,
                        const std::vector<CameraModel>& rig, const ForwardOptions& opts) {
    if (window.empty()) throw std::invalid_argument("forward: empty window");
    const double k_percent = cfg_.model.effective_k_percent();
    ForwardResult res;

    std::vector<FeatureVolume<T>> frame_volumes;
    std::vector<EgoPose> frame_poses;
    ad::Ptr<T> aux_acc;
    for (size_t f = 0; f < window.size(); ++f) {
      const SceneSample& frame = *window[f];
      auto pyramid = img_enc_.forward(tape, frame.images);
      auto buckets = bucket_points(frame.points, coarse_grid_);
      auto volume = lidar_enc_.forward(tape, buckets, coarse_grid_);

      std::vector<int> coarse_labels;
      if (opts.want_loss) {
        auto coarse = downsample_labels(frame.gt, cfg_.scene.upsample_ratio);
        coarse_labels = labels_as_int(coarse);
      }

      auto t0 = std::chrono::steady_clock::now();
      std::vector<FusionWork> frame_work;
      std::vector<LayerMasks> frame_masks;
      for (size_t l = 0; l < layers_.size(); ++l) {
        uint64_t fps_seed =
            Rng::fork(opts.step_seed, 0xF00D + f * 64 + l).next_u64();
        auto out = layers_[l].forward(tape, volume, pyramid, rig, buckets,
                                      opts.want_loss ? &coarse_labels : nullptr, k_percent,
                                      cfg_.ablation.gsca, cfg_.ablation.ssca, fps_seed);
        volume = out.volume;
        frame_work.push_back(out.work);
        for (const auto* mask : {&out.mask_gsca, &out.mask_ssca})
          for (int64_t idx : mask->selected) {
            res.mask_signature ^= static_cast<uint64_t>(idx) + 0x9e3779b97f4a7c15ull;
            res.mask_signature *= 0x100000001b3ull;
          }
        frame_masks.push_back({std::move(out.mask_gsca), std::move(out.mask_ssca)});
        if (out.aux_loss) aux_acc = aux_acc ? tape.add(aux_acc, out.aux_loss) : out.aux_loss;
      }
      res.fusion_seconds +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.work.push_back(std::move(frame_work));
      if (f + 1 == window.size()) res.final_frame_masks = std::move(frame_masks);

      frame_volumes.push_back(std::move(volume));
      frame_poses.push_back(frame.pose);
    }

    FeatureVolume<T> fused = cfg_.ablation.temporal
                                 ? temporal_.forward(tape, frame_volumes, frame_poses)
                                 : frame_volumes.back();
    auto decoded = decoder_.forward(tape, fused, cfg_.scene.upsample_ratio);
    res.fine = decoded.fine;
    res.logits = decoded.logits;

    if (opts.want_loss) {
      const SceneSample& target = *window.back();
      auto labels = labels_as_int(target.gt.labels);
      auto probs = tape.softmax_rows(res.logits);
      res.loss_ce = tape.cross_entropy_mean(res.logits, labels);
      res.loss_lovasz = lovasz_softmax_loss(tape, probs, labels);
      res.loss_scal_geo = scal_loss_geometric(tape, probs, labels);
      res.loss_scal_sem = scal_loss_semantic(tape, probs, labels);
      if (cfg_.ablation.proxy_loss)
        res.loss_proxy = proxy_loss(tape, res.logits, labels, proxies_, cfg_.loss.alpha,
                                    cfg_.loss.beta, cfg_.loss.proxy_max_voxels,
                                    Rng::fork(opts.step_seed, 0xBEEF).next_u64());
      if (aux_acc)
        res.loss_aux = tape.scale(aux_acc, static_cast<T>(cfg_.model.aux_head_weight));
      res.total = total_loss<T>(tape, {{"proxy", res.loss_proxy},
                                       {"ce", res.loss_ce},
                                       {"lovasz", res.loss_lovasz},
                                       {"scal_geo", res.loss_scal_geo},
                                       {"scal_sem", res.loss_scal_sem},
                                       {"aux", res.loss_aux}});
    }
    return res;
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const RunConfig& config() const { return cfg_; }
  const VoxelGridSpec& coarse_grid() const { return coarse_grid_; }
  ad::Ptr<T> proxies() const { return proxies_; }

 private:
  RunConfig cfg_;
  VoxelGridSpec coarse_grid_;
  int n_classes_;
  ParamStore<T> params_;
  ImageEncoder<T> img_enc_;
  LidarEncoder<T> lidar_enc_;
  std::vector<FusionLayer<T>> layers_;
  TemporalFuser<T> temporal_;
  Decoder<T> decoder_;
  ad::Ptr<T> proxies_;
};

}  // namespace occloff
