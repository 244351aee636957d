#pragma once

#include <occloff/synthdata.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace occloff {

enum class Precision { kFloat32, kFloat64 };
enum class ModelScale { kSmall, kBase, kDense };

struct ModelConfig {
  int feature_dim = 32;
  ModelScale scale = ModelScale::kBase;
  int n_layers = 0;  // 0 = derived from scale (small: 2, base/dense: 3)
  int da_heads = 4;
  int da_points = 8;
  int ssca_heads = 4;
  double k_percent = 35.0;
  int min_points = 5;   // per-voxel lower bound before S-SCA (pad up to this)
  int max_points = 20;  // upper bound (farthest point sampling down to this)
  int temporal_frames = 3;  // past frames fused with the current one
  int decoder_channels = 16;
  double aux_head_weight = 0.25;
  double layernorm_eps = 1e-5;

  int layers() const {
    if (n_layers > 0) return n_layers;
    return scale == ModelScale::kSmall ? 2 : 3;
  }
  double effective_k_percent() const { return scale == ModelScale::kDense ? 100.0 : k_percent; }
};

struct LossConfig {
  double alpha = 6.0;
  double beta = 12.0;
  int proxy_max_voxels = 4096;  // stratified subsample cap; 0 = exact
};

struct AhswConfig {
  int warmup_epochs = 10;
  double sample_percent = 70.0;
  double amplification = 5.0;
  double decay = 0.5;
};

struct AblationFlags {
  bool proxy_loss = true;
  bool ahsw = true;
  bool gsca = true;
  bool ssca = true;
  bool temporal = true;
};

struct TrainSettings {
  int epochs = 12;
  double learning_rate = 2e-4;
  double weight_decay = 0.01;
  int batch_size = 2;
  int threads = 1;
  int train_sequences = 64;
  int val_sequences = 16;
};

struct RigConfig {
  int n_cameras = 4;
  int image_width = 160;
  int image_height = 120;
  double hfov_deg = 100.0;
};

struct RunConfig {
  uint64_t seed = 1;
  Precision precision = Precision::kFloat32;
  int n_sequences = 80;
  SceneSpec scene;  // template; per-sequence seeds are derived from `seed`
  RigConfig rig;
  ModelConfig model;
  LossConfig loss;
  AhswConfig ahsw;
  AblationFlags ablation;
  TrainSettings train;

  /// Scene spec for sequence `index` (seeded, rig attached).
  SceneSpec scene_for_sequence(int index) const;
};

/// Parse and validate a config file. Unknown keys are rejected with the
/// offending dotted path in the exception message; all values are
/// range-checked before any work starts.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config_json(const std::string& text);

/// Canonical serialization (stable key order) and its FNV-1a hash, stored in
/// checkpoints to tie them to the producing configuration.
std::string canonical_config(const RunConfig& config);
uint64_t config_hash(const RunConfig& config);

/// Apply a dotted-path override like "ablation.proxy_loss=false" or
/// "model.scale=dense" onto a parsed config (used by the ablation driver).
RunConfig apply_override(const RunConfig& config, const std::string& dotted_key,
                         const std::string& value);

}  // namespace occloff
