#pragma once

#include <occloff/trainer.hpp>
#include <occloff/viz.hpp>

#include <json.hpp>

#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace occloff {

// ---------------------------------------------------------------- gen

inline void run_gen(const RunConfig& config, const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec || !std::filesystem::is_directory(out))
    throw std::runtime_error("gen: cannot create output directory " + out.string());
  {
    std::ofstream probe(out / ".write_probe");
    if (!probe) throw std::runtime_error("gen: output directory is not writable: " + out.string());
  }
  std::filesystem::remove(out / ".write_probe");

  DatasetManifest manifest;
  manifest.spec = config.scene_for_sequence(0);
  for (int i = 0; i < config.n_sequences; ++i) {
    SceneSpec spec = config.scene_for_sequence(i);
    auto samples = generate_sequence(spec);
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03d", i);
    SequenceMeta meta;
    write_sequence(out, name, samples, spec, meta);
    manifest.sequences.push_back(std::move(meta));
  }
  write_manifest(out, manifest);
}

// ---------------------------------------------------------------- reports

inline nlohmann::json metrics_to_json(const EvalMetrics& m) {
  nlohmann::json j;
  j["iou"] = m.iou;
  j["miou"] = m.miou;
  j["per_category_iou"] = m.per_category_iou;
  std::vector<int> counted;
  for (size_t c = 0; c < m.category_counted.size(); ++c)
    if (m.category_counted[c]) counted.push_back(static_cast<int>(c));
  j["counted_categories"] = counted;
  return j;
}

inline nlohmann::json report_to_json(const TrainReport& report, const RunConfig& config) {
  nlohmann::json j;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(config_hash(config)));
  j["config_hash"] = hash;
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    nlohmann::json je;
    je["epoch"] = e.epoch;
    je["train"] = {{"total", e.train_total},       {"proxy", e.train_proxy},
                   {"ce", e.train_ce},             {"lovasz", e.train_lovasz},
                   {"scal_geo", e.train_scal_geo}, {"scal_sem", e.train_scal_sem},
                   {"aux", e.train_aux}};
    je["val_loss"] = e.val_loss;
    je["participants"] = e.participants;
    je["weight_min"] = e.weight_min;
    je["weight_max"] = e.weight_max;
    je["gsca_calls_per_layer"] = e.gsca_calls_per_layer;
    je["ssca_calls_per_layer"] = e.ssca_calls_per_layer;
    epochs.push_back(je);
  }
  j["epochs"] = epochs;
  j["final_eval"] = metrics_to_json(report.final_metrics);
  j["final_val_loss"] = report.final_val_loss;
  return j;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- train / eval

struct TrainOutput {
  TrainReport report;
  std::filesystem::path final_checkpoint;
};

template <typename T>
TrainOutput run_train_t(const RunConfig& config, const std::filesystem::path& data_dir,
                        const std::filesystem::path& out_dir,
                        const std::filesystem::path& resume) {
  DatasetReader reader(data_dir);
  Trainer<T> trainer(config);
  TrainOutput out;
  out.report = trainer.train(reader, out_dir, resume);
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_epoch_%03d.bin", config.train.epochs);
  out.final_checkpoint = out_dir / name;

  write_json_file(out_dir / "report.json", report_to_json(out.report, config));
  nlohmann::json timings;
  timings["epoch_seconds"] = out.report.epoch_seconds;
  write_json_file(out_dir / "timings.json", timings);
  return out;
}

inline TrainOutput run_train(const RunConfig& config, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir,
                             const std::filesystem::path& resume = {}) {
  return config.precision == Precision::kFloat64
             ? run_train_t<double>(config, data_dir, out_dir, resume)
             : run_train_t<float>(config, data_dir, out_dir, resume);
}

template <typename T>
EvalMetrics run_eval_t(const RunConfig& config, const std::filesystem::path& ckpt,
                       const std::filesystem::path& data_dir, const std::string& split) {
  DatasetReader reader(data_dir);
  Trainer<T> trainer(config);
  std::vector<SampleLossHistory> histories;
  load_checkpoint(ckpt, trainer.pipeline(), trainer.optimizer(), histories);
  std::vector<int> indices;
  int n_train = config.train.train_sequences;
  int n_val = config.train.val_sequences;
  if (split == "train") {
    for (int i = 0; i < std::min(n_train, reader.num_sequences()); ++i) indices.push_back(i);
  } else if (split == "val") {
    for (int i = n_train; i < std::min(n_train + n_val, reader.num_sequences()); ++i)
      indices.push_back(i);
  } else if (split == "all") {
    for (int i = 0; i < reader.num_sequences(); ++i) indices.push_back(i);
  } else {
    throw std::invalid_argument("eval: unknown split '" + split + "'");
  }
  if (indices.empty()) throw std::runtime_error("eval: split '" + split + "' is empty");
  return trainer.evaluate(reader, indices);
}

inline EvalMetrics run_eval(const std::filesystem::path& ckpt,
                            const std::filesystem::path& data_dir, const std::string& split,
                            const std::filesystem::path& out_json = {}) {
  RunConfig config = checkpoint_config(ckpt);
  EvalMetrics metrics = config.precision == Precision::kFloat64
                            ? run_eval_t<double>(config, ckpt, data_dir, split)
                            : run_eval_t<float>(config, ckpt, data_dir, split);
  if (!out_json.empty()) write_json_file(out_json, metrics_to_json(metrics));
  return metrics;
}

// ---------------------------------------------------------------- viz

template <typename T>
void run_viz_t(const RunConfig& config, const std::filesystem::path& ckpt,
               const std::filesystem::path& data_dir, int sample_index,
               const std::filesystem::path& out_dir, int z_slice) {
  DatasetReader reader(data_dir);
  if (sample_index < 0 || sample_index >= reader.num_sequences())
    throw std::runtime_error("viz: sample index out of range");
  Trainer<T> trainer(config);
  std::vector<SampleLossHistory> histories;
  load_checkpoint(ckpt, trainer.pipeline(), trainer.optimizer(), histories);

  std::filesystem::create_directories(out_dir);
  const auto& seq = reader.sequence(sample_index);
  ad::Tape<T> tape;
  tape.recording = false;
  typename OccupancyPipeline<T>::ForwardOptions opts;
  opts.want_loss = false;
  auto res = trainer.pipeline().forward(tape, trainer.window_for(seq),
                                        reader.manifest().spec.rig, opts);

  const auto& gt = seq.back().gt;
  OccupancyGrid pred;
  pred.grid = gt.grid;
  pred.labels = res.predicted_labels();

  auto slice_range = [&](int dims_z) {
    std::vector<int> zs;
    if (z_slice >= 0)
      zs.push_back(z_slice);
    else
      for (int z = 0; z < dims_z; ++z) zs.push_back(z);
    return zs;
  };

  for (int z : slice_range(gt.grid.dims[2])) {
    char name[64];
    std::snprintf(name, sizeof(name), "gt_z%02d.ppm", z);
    write_ppm(out_dir / name, render_label_slice(gt, z, 4));
    std::snprintf(name, sizeof(name), "pred_z%02d.ppm", z);
    write_ppm(out_dir / name, render_label_slice(pred, z, 4));
  }
  const auto& coarse = trainer.pipeline().coarse_grid();
  for (size_t l = 0; l < res.final_frame_masks.size(); ++l)
    for (int z : slice_range(coarse.dims[2])) {
      char name[64];
      std::snprintf(name, sizeof(name), "mask_layer%zu_gsca_z%02d.ppm", l, z);
      write_ppm(out_dir / name,
                render_mask_slice(coarse, res.final_frame_masks[l].gsca.selected, z, 8));
      std::snprintf(name, sizeof(name), "mask_layer%zu_ssca_z%02d.ppm", l, z);
      write_ppm(out_dir / name,
                render_mask_slice(coarse, res.final_frame_masks[l].ssca.selected, z, 8));
    }
}

inline void run_viz(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir,
                    int sample_index, const std::filesystem::path& out_dir, int z_slice = -1) {
  RunConfig config = checkpoint_config(ckpt);
  if (config.precision == Precision::kFloat64)
    run_viz_t<double>(config, ckpt, data_dir, sample_index, out_dir, z_slice);
  else
    run_viz_t<float>(config, ckpt, data_dir, sample_index, out_dir, z_slice);
}

// ---------------------------------------------------------------- ablate

struct AblateRow {
  std::string combo;
  EvalMetrics metrics;
  double train_seconds = 0;
  std::vector<int64_t> gsca_calls, ssca_calls;
};

/// Cross product of the requested flag settings, trained sequentially on the
/// same dataset and seed, one table row per combination.
inline std::vector<AblateRow> run_ablate(
    const RunConfig& base, const std::filesystem::path& data_dir,
    const std::filesystem::path& out_dir,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& grid) {
  std::vector<std::vector<std::pair<std::string, std::string>>> combos = {{}};
  for (const auto& [key, values] : grid) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& combo : combos)
      for (const auto& v : values) {
        auto c = combo;
        c.push_back({key, v});
        next.push_back(c);
      }
    combos = next;
  }

  std::filesystem::create_directories(out_dir);
  std::vector<AblateRow> rows;
  for (size_t i = 0; i < combos.size(); ++i) {
    RunConfig cfg = base;
    std::string label;
    for (const auto& [k, v] : combos[i]) {
      cfg = apply_override(cfg, k, v);
      label += (label.empty() ? "" : " ") + k + "=" + v;
    }
    if (label.empty()) label = "(base)";

    char sub[32];
    std::snprintf(sub, sizeof(sub), "run_%02zu", i);
    auto t0 = std::chrono::steady_clock::now();
    auto out = run_train(cfg, data_dir, out_dir / sub);
    AblateRow row;
    row.combo = label;
    row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.metrics = out.report.final_metrics;
    if (!out.report.epochs.empty()) {
      row.gsca_calls = out.report.epochs.back().gsca_calls_per_layer;
      row.ssca_calls = out.report.epochs.back().ssca_calls_per_layer;
    }
    rows.push_back(std::move(row));
  }

  // comparison table: text + json
  std::ostringstream table;
  table << "combo | mIoU | IoU | gsca_calls | ssca_calls | train_s\n";
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows) {
    int64_t g = 0, s = 0;
    for (auto v : r.gsca_calls) g += v;
    for (auto v : r.ssca_calls) s += v;
    table << r.combo << " | " << r.metrics.miou << " | " << r.metrics.iou << " | " << g << " | "
          << s << " | " << r.train_seconds << "\n";
    nlohmann::json jr;
    jr["combo"] = r.combo;
    jr["metrics"] = metrics_to_json(r.metrics);
    jr["gsca_calls_per_layer"] = r.gsca_calls;
    jr["ssca_calls_per_layer"] = r.ssca_calls;
    jr["train_seconds"] = r.train_seconds;
    jrows.push_back(jr);
  }
  std::ofstream tf(out_dir / "ablation_table.txt");
  tf << table.str();
  write_json_file(out_dir / "ablation.json", jrows);
  return rows;
}

// ---------------------------------------------------------------- gradcheck

struct GradCheckReport {
  bool proxy_pass = false;
  double proxy_max_rel = 0.0;
  int proxy_instances = 0;
  bool e2e_pass = false;
  double e2e_max_rel = 0.0;
  int e2e_params = 0;
  bool loosened_tolerance = false;  // set when run at 32-bit
  std::string failure;              // names the offending operation
  double proxy_seconds = 0.0, e2e_seconds = 0.0;

  bool pass() const { return proxy_pass && e2e_pass; }
};

/// Eq-9 oracle suite: random (features, labels, alpha, beta) instances,
/// Hellinger distances, analytic gradient vs a fourth-order central stencil.
/// Includes single-positive and single-negative degenerate cases.
inline double proxy_gradient_suite(int n_instances, uint64_t seed, bool inject_sign_error,
                                   std::string* failure) {
  double max_rel = 0.0;
  Rng rng(seed);
  const int n_cat = 9;
  for (int inst = 0; inst < n_instances; ++inst) {
    int n_vox = inst % 10 == 0 ? 1 : (inst % 10 == 1 ? 2 : 3 + static_cast<int>(rng.uniform_index(60)));
    double alpha = rng.uniform(2.0, 12.0);
    double beta = rng.uniform(2.0, 12.0);
    std::vector<int> labels(n_vox);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(n_cat));

    // distances from softmaxed random features and proxies
    std::vector<double> dmat(static_cast<size_t>(n_vox) * n_cat);
    std::vector<std::vector<double>> proxies(n_cat);
    for (auto& h : proxies) {
      h.resize(n_cat);
      for (auto& x : h) x = rng.normal(0.0, 1.0);
    }
    for (int v = 0; v < n_vox; ++v) {
      std::vector<double> feat(n_cat);
      for (auto& x : feat) x = rng.normal(0.0, 1.5);
      auto pv = to_distribution(feat);
      for (int s = 0; s < n_cat; ++s)
        dmat[v * n_cat + s] = hellinger(pv, to_distribution(proxies[s]));
    }

    auto analytic = proxy_grad_wrt_distance(dmat, n_vox, n_cat, labels, alpha, beta);
    if (inject_sign_error)
      for (int v = 0; v < n_vox; ++v)
        for (int s = 0; s < n_cat; ++s)
          if (labels[v] != s) analytic[v * n_cat + s] = -analytic[v * n_cat + s];

    const double h = 3e-4;
    double err2 = 0.0, norm2 = 0.0;
    for (size_t e = 0; e < dmat.size(); ++e) {
      auto at = [&](double delta) {
        auto d2 = dmat;
        d2[e] += delta;
        return proxy_loss_from_distances(d2, n_vox, n_cat, labels, alpha, beta);
      };
      double fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      err2 += (fd - analytic[e]) * (fd - analytic[e]);
      norm2 += analytic[e] * analytic[e];
    }
    double rel = std::sqrt(err2 / norm2);
    if (rel > max_rel) max_rel = rel;
    if (inject_sign_error && rel > 1e-6 && failure && failure->empty())
      *failure = "proxy_loss negative-branch gradient (injected sign error detected)";
  }
  return max_rel;
}

/// End-to-end finite-difference check through the whole pipeline on a
/// single-sample batch: encoders, fusion layers, temporal fusion, decoder
/// and the total loss.
template <typename T>
double end_to_end_gradient_check(const RunConfig& config, int n_params, uint64_t seed,
                                 double fd_step) {
  SceneSpec spec = config.scene_for_sequence(0);
  auto sequence = generate_sequence(spec);
  OccupancyPipeline<T> pipeline(config);

  std::vector<const SceneSample*> window;
  int span = std::min<int>(config.model.temporal_frames + 1, static_cast<int>(sequence.size()));
  for (size_t f = sequence.size() - span; f < sequence.size(); ++f) window.push_back(&sequence[f]);

  typename OccupancyPipeline<T>::ForwardOptions opts;
  opts.want_loss = true;
  opts.step_seed = 12345;

  auto eval = [&](bool record, uint64_t* signature) {
    ad::Tape<T> tape;
    tape.recording = record;
    auto res = pipeline.forward(tape, window, spec.rig, opts);
    if (record) tape.backward(res.total);
    if (signature) *signature = res.mask_signature;
    return static_cast<double>(res.total->val[0]);
  };
  pipeline.params().zero_grads();
  uint64_t base_signature = 0;
  eval(true, &base_signature);

  Rng pick(seed);
  double max_rel = 0.0;
  int checked = 0;
  while (checked < n_params) {
    size_t pi = pick.uniform_index(pipeline.params().count());
    auto t = pipeline.params().tensor(pi);
    ad::Index e = static_cast<ad::Index>(pick.uniform_index(t->size()));
    double keep = static_cast<double>(t->val[e]);

    // Top-K query proposals make the loss piecewise smooth: the analytic
    // gradient differentiates the current selection branch, so the finite
    // difference must stay on it. Shrink the step until the masks match;
    // re-draw the parameter in the (measure-zero) case of sitting on a
    // selection boundary.
    double fd = 0.0;
    bool stable = false;
    for (double h = fd_step * std::max(1.0, std::abs(keep)); h >= 1e-9; h /= 10.0) {
      uint64_t sig_plus = 0, sig_minus = 0;
      t->val[e] = static_cast<T>(keep + h);
      double fp = eval(false, &sig_plus);
      t->val[e] = static_cast<T>(keep - h);
      double fm = eval(false, &sig_minus);
      t->val[e] = static_cast<T>(keep);
      if (sig_plus == base_signature && sig_minus == base_signature) {
        fd = (fp - fm) / (2 * h);
        stable = true;
        break;
      }
    }
    if (!stable) continue;

    double an = static_cast<double>(t->grad[e]);
    double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    max_rel = std::max(max_rel, rel);
    checked++;
  }
  return max_rel;
}

inline GradCheckReport run_gradcheck(const RunConfig& config, int proxy_instances = 100,
                                     int e2e_params = 16, bool inject_sign_error = false) {
  GradCheckReport report;
  report.proxy_instances = proxy_instances;
  report.e2e_params = e2e_params;
  report.loosened_tolerance = config.precision == Precision::kFloat32;
  const double proxy_tol = report.loosened_tolerance ? 1e-2 : 1e-6;
  const double e2e_tol = report.loosened_tolerance ? 1e-1 : 1e-4;

  auto t0 = std::chrono::steady_clock::now();
  report.proxy_max_rel =
      proxy_gradient_suite(proxy_instances, config.seed, inject_sign_error, &report.failure);
  report.proxy_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.proxy_pass = report.proxy_max_rel < proxy_tol;

  t0 = std::chrono::steady_clock::now();
  report.e2e_max_rel =
      config.precision == Precision::kFloat64
          ? end_to_end_gradient_check<double>(config, e2e_params, config.seed ^ 0xE2E, 1e-5)
          : end_to_end_gradient_check<float>(config, e2e_params, config.seed ^ 0xE2E, 1e-2);
  report.e2e_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.e2e_pass = report.e2e_max_rel < e2e_tol;
  return report;
}

}  // namespace occloff
