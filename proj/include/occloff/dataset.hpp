#pragma once

#include <occloff/synthdata.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace occloff {

/// On-disk dataset layout: one directory per sequence holding raw
/// little-endian arrays, plus a single manifest.json recording the scene
/// spec, camera rig, per-frame poses and every array's dtype/shape.
///
///   <root>/manifest.json
///   <root>/seq_000/images.u8     uint8  [T, V, 3, H, W]
///   <root>/seq_000/labels.u8     uint8  [T, H, W, Z]
///   <root>/seq_000/points_00.f32 float32 [N_0, 3]   (one file per frame)

struct SequenceMeta {
  std::string name;
  uint64_t seed = 0;
  std::vector<Mat4> poses;
  std::vector<int64_t> point_counts;
};

struct DatasetManifest {
  SceneSpec spec;  // includes grid + rig
  std::vector<SequenceMeta> sequences;
};

/// Write a generated sequence (arrays + its manifest entry data).
void write_sequence(const std::filesystem::path& root, const std::string& name,
                    const std::vector<SceneSample>& samples, const SceneSpec& spec,
                    SequenceMeta& meta_out);

void write_manifest(const std::filesystem::path& root, const DatasetManifest& manifest);

/// Loads the manifest eagerly and sequences on demand (cached).
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }
  int num_sequences() const { return static_cast<int>(manifest_.sequences.size()); }

  /// Full sequence contents; loaded from disk on first access.
  const std::vector<SceneSample>& sequence(int index);

 private:
  std::filesystem::path root_;
  DatasetManifest manifest_;
  std::vector<std::optional<std::vector<SceneSample>>> cache_;
};

}  // namespace occloff
