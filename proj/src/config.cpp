#include <occloff/config.hpp>

#include <json.hpp>

#include <fstream>
#include <initializer_list>
#include <stdexcept>

namespace occloff {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& prefix,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw std::invalid_argument("config: '" + prefix + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw std::invalid_argument("config: unknown key '" + prefix + it.key() + "'");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("config: " + msg);
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision == Precision::kFloat64 ? "f64" : "f32";
  j["scene"] = {
      {"n_sequences", c.n_sequences},
      {"n_objects", c.scene.n_objects},
      {"n_classes", c.scene.n_classes},
      {"class_frequencies", c.scene.class_frequencies},
      {"sequence_length", c.scene.sequence_length},
      {"lidar_rays", c.scene.lidar_rays},
      {"sweeps_per_frame", c.scene.sweeps_per_frame},
      {"sensor_height", c.scene.sensor_height},
      {"frame_dt", c.scene.frame_dt},
      {"speed", c.scene.speed},
      {"yaw_rate", c.scene.yaw_rate},
  };
  j["grid"] = {
      {"dims", c.scene.grid.dims},
      {"voxel_size", c.scene.grid.voxel_size},
      {"origin", {c.scene.grid.origin.x(), c.scene.grid.origin.y(), c.scene.grid.origin.z()}},
      {"upsample_ratio", c.scene.upsample_ratio},
  };
  j["rig"] = {
      {"n_cameras", c.rig.n_cameras},
      {"image_width", c.rig.image_width},
      {"image_height", c.rig.image_height},
      {"hfov_deg", c.rig.hfov_deg},
  };
  const char* scale = c.model.scale == ModelScale::kSmall  ? "small"
                      : c.model.scale == ModelScale::kBase ? "base"
                                                           : "dense";
  j["model"] = {
      {"feature_dim", c.model.feature_dim},
      {"scale", scale},
      {"n_layers", c.model.n_layers},
      {"da_heads", c.model.da_heads},
      {"da_points", c.model.da_points},
      {"ssca_heads", c.model.ssca_heads},
      {"k_percent", c.model.k_percent},
      {"min_points", c.model.min_points},
      {"max_points", c.model.max_points},
      {"temporal_frames", c.model.temporal_frames},
      {"decoder_channels", c.model.decoder_channels},
      {"aux_head_weight", c.model.aux_head_weight},
  };
  j["loss"] = {
      {"alpha", c.loss.alpha},
      {"beta", c.loss.beta},
      {"proxy_max_voxels", c.loss.proxy_max_voxels},
  };
  j["ahsw"] = {
      {"warmup_epochs", c.ahsw.warmup_epochs},
      {"sample_percent", c.ahsw.sample_percent},
      {"amplification", c.ahsw.amplification},
      {"decay", c.ahsw.decay},
  };
  j["ablation"] = {
      {"proxy_loss", c.ablation.proxy_loss}, {"ahsw", c.ablation.ahsw},
      {"gsca", c.ablation.gsca},             {"ssca", c.ablation.ssca},
      {"temporal", c.ablation.temporal},
  };
  j["train"] = {
      {"epochs", c.train.epochs},
      {"learning_rate", c.train.learning_rate},
      {"weight_decay", c.train.weight_decay},
      {"batch_size", c.train.batch_size},
      {"threads", c.train.threads},
      {"train_sequences", c.train.train_sequences},
      {"val_sequences", c.train.val_sequences},
  };
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  check_keys(j, "", {"seed", "precision", "scene", "grid", "rig", "model", "loss", "ahsw",
                     "ablation", "train"});
  get_if(j, "seed", c.seed);
  if (j.contains("precision")) {
    std::string p = j.at("precision").get<std::string>();
    require(p == "f32" || p == "f64", "precision must be 'f32' or 'f64'");
    c.precision = p == "f64" ? Precision::kFloat64 : Precision::kFloat32;
  }
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    check_keys(s, "scene.",
               {"n_sequences", "n_objects", "n_classes", "class_frequencies", "sequence_length",
                "lidar_rays", "sweeps_per_frame", "sensor_height", "frame_dt", "speed",
                "yaw_rate"});
    get_if(s, "n_sequences", c.n_sequences);
    get_if(s, "n_objects", c.scene.n_objects);
    get_if(s, "n_classes", c.scene.n_classes);
    get_if(s, "class_frequencies", c.scene.class_frequencies);
    get_if(s, "sequence_length", c.scene.sequence_length);
    get_if(s, "lidar_rays", c.scene.lidar_rays);
    get_if(s, "sweeps_per_frame", c.scene.sweeps_per_frame);
    get_if(s, "sensor_height", c.scene.sensor_height);
    get_if(s, "frame_dt", c.scene.frame_dt);
    get_if(s, "speed", c.scene.speed);
    get_if(s, "yaw_rate", c.scene.yaw_rate);
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    check_keys(g, "grid.", {"dims", "voxel_size", "origin", "upsample_ratio"});
    auto dims = c.scene.grid.dims;
    double vs = c.scene.grid.voxel_size;
    auto origin = c.scene.grid.origin;
    if (g.contains("dims")) dims = g.at("dims").get<std::array<int, 3>>();
    get_if(g, "voxel_size", vs);
    if (g.contains("origin")) {
      auto o = g.at("origin").get<std::array<double, 3>>();
      origin = Vec3(o[0], o[1], o[2]);
    }
    c.scene.grid = VoxelGridSpec(dims, vs, origin);
    get_if(g, "upsample_ratio", c.scene.upsample_ratio);
  }
  if (j.contains("rig")) {
    const auto& r = j.at("rig");
    check_keys(r, "rig.", {"n_cameras", "image_width", "image_height", "hfov_deg"});
    get_if(r, "n_cameras", c.rig.n_cameras);
    get_if(r, "image_width", c.rig.image_width);
    get_if(r, "image_height", c.rig.image_height);
    get_if(r, "hfov_deg", c.rig.hfov_deg);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model.",
               {"feature_dim", "scale", "n_layers", "da_heads", "da_points", "ssca_heads",
                "k_percent", "min_points", "max_points", "temporal_frames", "decoder_channels",
                "aux_head_weight"});
    get_if(m, "feature_dim", c.model.feature_dim);
    if (m.contains("scale")) {
      std::string s = m.at("scale").get<std::string>();
      require(s == "small" || s == "base" || s == "dense",
              "model.scale must be small, base or dense");
      c.model.scale = s == "small"  ? ModelScale::kSmall
                      : s == "base" ? ModelScale::kBase
                                    : ModelScale::kDense;
    }
    get_if(m, "n_layers", c.model.n_layers);
    get_if(m, "da_heads", c.model.da_heads);
    get_if(m, "da_points", c.model.da_points);
    get_if(m, "ssca_heads", c.model.ssca_heads);
    get_if(m, "k_percent", c.model.k_percent);
    get_if(m, "min_points", c.model.min_points);
    get_if(m, "max_points", c.model.max_points);
    get_if(m, "temporal_frames", c.model.temporal_frames);
    get_if(m, "decoder_channels", c.model.decoder_channels);
    get_if(m, "aux_head_weight", c.model.aux_head_weight);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, "loss.", {"alpha", "beta", "proxy_max_voxels"});
    get_if(l, "alpha", c.loss.alpha);
    get_if(l, "beta", c.loss.beta);
    get_if(l, "proxy_max_voxels", c.loss.proxy_max_voxels);
  }
  if (j.contains("ahsw")) {
    const auto& a = j.at("ahsw");
    check_keys(a, "ahsw.", {"warmup_epochs", "sample_percent", "amplification", "decay"});
    get_if(a, "warmup_epochs", c.ahsw.warmup_epochs);
    get_if(a, "sample_percent", c.ahsw.sample_percent);
    get_if(a, "amplification", c.ahsw.amplification);
    get_if(a, "decay", c.ahsw.decay);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    check_keys(a, "ablation.", {"proxy_loss", "ahsw", "gsca", "ssca", "temporal"});
    get_if(a, "proxy_loss", c.ablation.proxy_loss);
    get_if(a, "ahsw", c.ablation.ahsw);
    get_if(a, "gsca", c.ablation.gsca);
    get_if(a, "ssca", c.ablation.ssca);
    get_if(a, "temporal", c.ablation.temporal);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train.",
               {"epochs", "learning_rate", "weight_decay", "batch_size", "threads",
                "train_sequences", "val_sequences"});
    get_if(t, "epochs", c.train.epochs);
    get_if(t, "learning_rate", c.train.learning_rate);
    get_if(t, "weight_decay", c.train.weight_decay);
    get_if(t, "batch_size", c.train.batch_size);
    get_if(t, "threads", c.train.threads);
    get_if(t, "train_sequences", c.train.train_sequences);
    get_if(t, "val_sequences", c.train.val_sequences);
  }

  // range validation
  require(c.n_sequences >= 1, "scene.n_sequences must be >= 1");
  c.scene.validate();
  require(c.model.feature_dim >= 4, "model.feature_dim must be >= 4");
  require(c.model.feature_dim % c.model.da_heads == 0,
          "model.feature_dim must be divisible by model.da_heads");
  require(c.model.feature_dim % c.model.ssca_heads == 0,
          "model.feature_dim must be divisible by model.ssca_heads");
  require(c.model.k_percent > 0.0 && c.model.k_percent <= 100.0,
          "model.k_percent must be in (0, 100]");
  require(c.model.min_points >= 1 && c.model.min_points <= c.model.max_points,
          "model point bounds must satisfy 1 <= min_points <= max_points");
  require(c.model.temporal_frames >= 0, "model.temporal_frames must be >= 0");
  require(c.model.da_points >= 1, "model.da_points must be >= 1");
  require(c.model.decoder_channels >= 1, "model.decoder_channels must be >= 1");
  require(c.loss.alpha > 0.0 && c.loss.beta > 0.0, "loss.alpha and loss.beta must be > 0");
  require(c.loss.proxy_max_voxels >= 0, "loss.proxy_max_voxels must be >= 0");
  require(c.ahsw.warmup_epochs >= 0, "ahsw.warmup_epochs must be >= 0");
  require(c.ahsw.sample_percent > 0.0 && c.ahsw.sample_percent <= 100.0,
          "ahsw.sample_percent must be in (0, 100]");
  require(c.ahsw.amplification > 1.0, "ahsw.amplification must be > 1");
  require(c.ahsw.decay > 0.0 && c.ahsw.decay < 1.0, "ahsw.decay must be in (0, 1)");
  require(c.train.epochs >= 1, "train.epochs must be >= 1");
  require(c.train.learning_rate > 0.0, "train.learning_rate must be > 0");
  require(c.train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  require(c.train.batch_size >= 1, "train.batch_size must be >= 1");
  require(c.train.threads >= 1, "train.threads must be >= 1");
  require(c.train.train_sequences >= 1 && c.train.val_sequences >= 0,
          "train sequence counts invalid");
  require(c.rig.n_cameras >= 1, "rig.n_cameras must be >= 1");
  require(c.rig.image_width >= 8 && c.rig.image_height >= 8, "rig image size too small");
  require(c.rig.hfov_deg > 10.0 && c.rig.hfov_deg < 180.0, "rig.hfov_deg out of range");
  return c;
}

}  // namespace

SceneSpec RunConfig::scene_for_sequence(int index) const {
  SceneSpec s = scene;
  Rng fork = Rng::fork(seed, 7000 + static_cast<uint64_t>(index));
  s.seed = fork.next_u64();
  s.rig = make_ring_rig(rig.n_cameras, rig.image_width, rig.image_height, rig.hfov_deg,
                        scene.sensor_height);
  return s;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_json(text);
}

RunConfig parse_config_json(const std::string& text) {
  json j = json::parse(text);
  return from_json(j);
}

std::string canonical_config(const RunConfig& config) {
  return to_json(config).dump(2);  // nlohmann objects are key-sorted
}

uint64_t config_hash(const RunConfig& config) {
  std::string s = canonical_config(config);
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

RunConfig apply_override(const RunConfig& config, const std::string& dotted_key,
                         const std::string& value) {
  json j = to_json(config);
  json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = dotted_key.find('.', start);
    std::string part = dotted_key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw std::invalid_argument("override: empty key segment");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      break;
    }
    if (!node->contains(part))
      throw std::invalid_argument("override: unknown section '" + part + "'");
    node = &(*node)[part];
    start = dot + 1;
  }
  return from_json(j);
}

}  // namespace occloff
