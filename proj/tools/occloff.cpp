#include <occloff/driver.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>

namespace {

// exit codes: 0 success, 1 usage/config error, 2 runtime failure
constexpr int kOk = 0;
constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct GridFlag {
  std::string key;
  std::vector<std::string> values;
};

GridFlag parse_grid_flag(const std::string& raw) {
  auto eq = raw.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= raw.size())
    throw std::invalid_argument("ablate: --grid expects key=v1,v2 (got '" + raw + "')");
  GridFlag flag;
  flag.key = raw.substr(0, eq);
  std::string values = raw.substr(eq + 1);
  size_t start = 0;
  while (start <= values.size()) {
    auto comma = values.find(',', start);
    std::string v = values.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!v.empty()) flag.values.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (flag.values.empty())
    throw std::invalid_argument("ablate: --grid '" + raw + "' has no values");
  return flag;
}

void print_metrics(const occloff::EvalMetrics& m) {
  std::printf("IoU (occupied/empty): %.4f\n", m.iou);
  std::printf("mIoU: %.4f\n", m.miou);
  for (size_t c = 1; c < m.per_category_iou.size(); ++c)
    if (m.category_counted[c])
      std::printf("  category %zu IoU: %.4f\n", c, m.per_category_iou[c]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occloff: sparse multi-modal occupancy prediction on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint, resume, split = "val";
  std::vector<std::string> grid_flags;
  int sample_index = 0, z_slice = -1;
  int proxy_instances = 100, e2e_params = 16;
  bool inject_error = false;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "run config (json)")->required();
  gen->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the occupancy model");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", out_dir)->required();
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out_dir, "metrics json path");
  eval->add_option("--split", split, "train | val | all");

  auto* ablate = app.add_subcommand("ablate", "train the cross product of flag settings");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--out", out_dir)->required();
  ablate->add_option("--grid", grid_flags, "repeatable key=v1,v2 override axis")->required();

  auto* viz = app.add_subcommand("viz", "write occupancy slice images");
  viz->add_option("--checkpoint", checkpoint)->required();
  viz->add_option("--data", data_dir)->required();
  viz->add_option("--sample", sample_index, "sequence index");
  viz->add_option("--out", out_dir)->required();
  viz->add_option("--z", z_slice, "single z slice (default: all)");

  auto* gradcheck = app.add_subcommand("gradcheck", "gradient verification report");
  gradcheck->add_option("--config", config_path)->required();
  gradcheck->add_option("--proxy-instances", proxy_instances);
  gradcheck->add_option("--e2e-params", e2e_params);
  gradcheck->add_flag("--inject-sign-error", inject_error,
                      "self-test: corrupt the oracle and expect a failure");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (gen->parsed()) {
      auto config = occloff::load_config(config_path);
      occloff::run_gen(config, out_dir);
      std::printf("wrote %d sequences to %s\n", config.n_sequences, out_dir.c_str());
    } else if (train->parsed()) {
      auto config = occloff::load_config(config_path);
      auto out = occloff::run_train(config, data_dir, out_dir, resume);
      std::printf("trained %d epochs; final val loss %.6f; checkpoint %s\n",
                  config.train.epochs, out.report.final_val_loss,
                  out.final_checkpoint.string().c_str());
      print_metrics(out.report.final_metrics);
    } else if (eval->parsed()) {
      auto metrics = occloff::run_eval(checkpoint, data_dir, split,
                                       std::filesystem::path(out_dir));
      print_metrics(metrics);
    } else if (ablate->parsed()) {
      std::vector<std::pair<std::string, std::vector<std::string>>> grid;
      for (const auto& raw : grid_flags) {
        auto flag = parse_grid_flag(raw);
        grid.push_back({flag.key, flag.values});
      }
      auto config = occloff::load_config(config_path);
      auto rows = occloff::run_ablate(config, data_dir, out_dir, grid);
      std::printf("%-40s %8s %8s %12s %12s %10s\n", "combo", "mIoU", "IoU", "gsca_calls",
                  "ssca_calls", "train_s");
      for (const auto& r : rows) {
        int64_t g = 0, s = 0;
        for (auto v : r.gsca_calls) g += v;
        for (auto v : r.ssca_calls) s += v;
        std::printf("%-40s %8.4f %8.4f %12lld %12lld %10.1f\n", r.combo.c_str(), r.metrics.miou,
                    r.metrics.iou, static_cast<long long>(g), static_cast<long long>(s),
                    r.train_seconds);
      }
    } else if (viz->parsed()) {
      occloff::run_viz(checkpoint, data_dir, sample_index, out_dir, z_slice);
      std::printf("wrote slices to %s\n", out_dir.c_str());
    } else if (gradcheck->parsed()) {
      auto config = occloff::load_config(config_path);
      if (config.precision != occloff::Precision::kFloat64)
        std::printf("warning: 64-bit precision is off; gradcheck tolerances are loosened\n");
      auto report = occloff::run_gradcheck(config, proxy_instances, e2e_params, inject_error);
      std::printf("proxy-gradient oracle: %s (max relative error %.3e over %d instances, %.1f s)\n",
                  report.proxy_pass ? "PASS" : "FAIL", report.proxy_max_rel,
                  report.proxy_instances, report.proxy_seconds);
      std::printf("end-to-end gradients:  %s (max relative error %.3e over %d parameters, %.1f s)\n",
                  report.e2e_pass ? "PASS" : "FAIL", report.e2e_max_rel, report.e2e_params,
                  report.e2e_seconds);
      if (!report.failure.empty()) std::printf("failure: %s\n", report.failure.c_str());
      if (!report.pass()) return kRuntimeError;
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}
