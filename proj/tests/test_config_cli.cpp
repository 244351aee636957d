#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/config.hpp>
#include <occloff/driver.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace occloff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(OCCLOFF_BIN) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("empty object yields the documented defaults") {
    auto cfg = parse_config_json("{}");
    CHECK(cfg.model.feature_dim == 32);
    CHECK(cfg.model.k_percent == 35.0);
    CHECK(cfg.model.da_points == 8);
    CHECK(cfg.model.min_points == 5);
    CHECK(cfg.model.max_points == 20);
    CHECK(cfg.loss.alpha == 6.0);
    CHECK(cfg.loss.beta == 12.0);
    CHECK(cfg.ahsw.warmup_epochs == 10);
    CHECK(cfg.ahsw.sample_percent == 70.0);
    CHECK(cfg.ahsw.amplification == 5.0);
    CHECK(cfg.ahsw.decay == 0.5);
    CHECK(cfg.train.learning_rate == 2e-4);
    CHECK(cfg.train.weight_decay == 0.01);
    CHECK(cfg.scene.grid.dims == std::array<int, 3>{64, 64, 16});
    CHECK(cfg.model.temporal_frames == 3);
  }
  SUBCASE("unknown keys are rejected with the offending path") {
    CHECK_THROWS_WITH_AS(parse_config_json(R"({"bogus": 1})"),
                         "config: unknown key 'bogus'", std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config_json(R"({"model": {"nope": 1}})"),
                         "config: unknown key 'model.nope'", std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config_json(R"({"ahsw": {"lambda": 2}})"),
                         "config: unknown key 'ahsw.lambda'", std::invalid_argument);
  }
  SUBCASE("value ranges are validated") {
    CHECK_THROWS_AS(parse_config_json(R"({"model": {"k_percent": 0}})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"model": {"k_percent": 101}})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"ahsw": {"decay": 1.0}})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"ahsw": {"amplification": 1.0}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"loss": {"alpha": -1}})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"model": {"min_points": 9, "max_points": 3}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"grid": {"dims": [63, 64, 16]}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_json(R"({"precision": "f16"})"), std::invalid_argument);
  }
  SUBCASE("overrides re-validate through the same parser") {
    auto cfg = parse_config_json("{}");
    auto dense = apply_override(cfg, "model.scale", "dense");
    CHECK(dense.model.scale == ModelScale::kDense);
    auto off = apply_override(cfg, "ablation.proxy_loss", "false");
    CHECK_FALSE(off.ablation.proxy_loss);
    CHECK_THROWS_AS(apply_override(cfg, "model.k_percent", "0"), std::invalid_argument);
    CHECK_THROWS_AS(apply_override(cfg, "nonexistent.key", "1"), std::invalid_argument);
  }
  SUBCASE("canonical form and hash are stable") {
    auto a = parse_config_json("{}");
    auto b = parse_config_json(R"({"model": {}})");
    CHECK(canonical_config(a) == canonical_config(b));
    CHECK(config_hash(a) == config_hash(b));
    auto c = apply_override(a, "seed", "99");
    CHECK(config_hash(a) != config_hash(c));
  }
}

TEST_CASE("per-sequence scene specs derive distinct seeds and carry the rig") {
  auto cfg = parse_config_json("{}");
  auto s0 = cfg.scene_for_sequence(0);
  auto s1 = cfg.scene_for_sequence(1);
  CHECK(s0.seed != s1.seed);
  CHECK(s0.rig.size() == 4);
  CHECK(cfg.scene_for_sequence(0).seed == s0.seed);  // stable
}

TEST_CASE("gen is idempotent: identical bytes on rerun") {
  RunConfig cfg = parse_config_json(R"({
    "seed": 3,
    "scene": {"n_sequences": 2, "n_objects": 4, "sequence_length": 1,
               "lidar_rays": 128, "sweeps_per_frame": 1},
    "grid": {"dims": [16, 16, 4], "voxel_size": 2.0, "origin": [-16, -16, -0.5]},
    "rig": {"n_cameras": 1, "image_width": 32, "image_height": 24}
  })");
  auto d1 = fresh_dir("occloff_gen_idem1");
  auto d2 = fresh_dir("occloff_gen_idem2");
  run_gen(cfg, d1);
  run_gen(cfg, d2);
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  CHECK(slurp(d1 / "seq_000" / "images.u8") == slurp(d2 / "seq_000" / "images.u8"));
  CHECK(slurp(d1 / "seq_000" / "labels.u8") == slurp(d2 / "seq_000" / "labels.u8"));
  CHECK(slurp(d1 / "seq_001" / "points_00.f32") == slurp(d2 / "seq_001" / "points_00.f32"));
}

TEST_CASE("command line exit codes") {
  auto dir = fresh_dir("occloff_cli");
  std::ofstream bad(dir / "bad.json");
  bad << R"({"definitely_not_a_key": 1})";
  bad.close();
  std::ofstream ok(dir / "ok.json");
  ok << R"({"scene": {"n_sequences": 1, "n_objects": 2, "sequence_length": 1,
             "lidar_rays": 64, "sweeps_per_frame": 1},
            "grid": {"dims": [16, 16, 4], "voxel_size": 2.0, "origin": [-16, -16, -0.5]},
            "rig": {"n_cameras": 1, "image_width": 16, "image_height": 12},
            "model": {"feature_dim": 8, "da_heads": 2, "ssca_heads": 2, "min_points": 2,
                      "max_points": 4, "temporal_frames": 0, "decoder_channels": 4},
            "train": {"epochs": 1, "train_sequences": 1, "val_sequences": 0}})";
  ok.close();

  CHECK(run_cli("gen --config " + (dir / "bad.json").string() + " --out " +
                (dir / "d").string()) == 1);
  CHECK(run_cli("train --config " + (dir / "ok.json").string() + " --data " +
                (dir / "missing").string() + " --out " + (dir / "o").string()) == 2);
  CHECK(run_cli("definitely-not-a-subcommand") == 1);
  CHECK(run_cli("gen --config " + (dir / "ok.json").string() + " --out " +
                (dir / "data").string()) == 0);
  CHECK(run_cli("train --config " + (dir / "ok.json").string() + " --data " +
                (dir / "data").string() + " --out " + (dir / "run").string()) == 0);
  CHECK(run_cli("eval --checkpoint " + (dir / "run" / "ckpt_epoch_001.bin").string() +
                " --data " + (dir / "data").string() + " --split train") == 0);
  CHECK(run_cli("viz --checkpoint " + (dir / "run" / "ckpt_epoch_001.bin").string() +
                " --data " + (dir / "data").string() + " --sample 0 --out " +
                (dir / "viz").string() + " --z 1") == 0);
  CHECK(fs::exists(dir / "viz" / "gt_z01.ppm"));
  CHECK(fs::exists(dir / "viz" / "pred_z01.ppm"));
  CHECK(fs::exists(dir / "viz" / "mask_layer0_gsca_z01.ppm"));
}

TEST_CASE("viz mask overlays mark exactly the selected voxels") {
  // checked through the driver: total white blocks across slices = mask size
  auto dir = fresh_dir("occloff_vizcheck");
  RunConfig cfg = parse_config_json(R"({
    "seed": 17,
    "scene": {"n_sequences": 1, "n_objects": 3, "sequence_length": 1,
               "lidar_rays": 128, "sweeps_per_frame": 1},
    "grid": {"dims": [16, 16, 4], "voxel_size": 2.0, "origin": [-16, -16, -0.5]},
    "rig": {"n_cameras": 1, "image_width": 16, "image_height": 12},
    "model": {"feature_dim": 8, "da_heads": 2, "ssca_heads": 2, "min_points": 2,
              "max_points": 4, "temporal_frames": 0, "decoder_channels": 4, "k_percent": 25},
    "train": {"epochs": 1, "train_sequences": 1, "val_sequences": 0}
  })");
  run_gen(cfg, dir / "data");
  auto out = run_train(cfg, dir / "data", dir / "run");
  run_viz(out.final_checkpoint, dir / "data", 0, dir / "viz");

  // coarse grid is 8x8x2 = 128 voxels; K=25% -> 32 selected per mask
  int64_t white_blocks = 0;
  for (int z = 0; z < 2; ++z) {
    char name[64];
    std::snprintf(name, sizeof(name), "mask_layer0_gsca_z%02d.ppm", z);
    auto bytes = slurp(dir / "viz" / name);
    // header "P6\n64 64\n255\n" then raw rgb; count white 8x8 blocks
    size_t header = std::string(bytes.data(), bytes.size()).find("255\n") + 4;
    for (int by = 0; by < 8; ++by)
      for (int bx = 0; bx < 8; ++bx) {
        size_t px = header + ((static_cast<size_t>(by) * 8) * 64 + bx * 8) * 3;
        if (static_cast<uint8_t>(bytes[px]) == 255) white_blocks++;
      }
  }
  CHECK(white_blocks == 32);
}
