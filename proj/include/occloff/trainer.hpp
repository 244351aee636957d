#pragma once

#include <occloff/ahsw.hpp>
#include <occloff/dataset.hpp>
#include <occloff/metrics.hpp>
#include <occloff/model.hpp>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <thread>
#include <vector>

namespace occloff {

struct EpochRecord {
  int epoch = 0;
  double train_total = 0, train_proxy = 0, train_ce = 0, train_lovasz = 0, train_scal_geo = 0,
         train_scal_sem = 0, train_aux = 0;
  double val_loss = 0;
  int participants = 0;
  double weight_min = 1.0, weight_max = 1.0;
  // per-layer attention calls for one frame of one forward pass
  std::vector<int64_t> gsca_calls_per_layer, ssca_calls_per_layer;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  EvalMetrics final_metrics;
  double final_val_loss = 0;
  std::vector<double> epoch_seconds;  // diagnostics only, kept out of report.json
};

// ---------------------------------------------------------------- checkpoints

/// Versioned binary container: parameters, optimizer moments, sample loss
/// histories and the canonical config (hash + full text) for exact resume.
namespace ckpt {

inline void write_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_i64(std::ofstream& out, int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint64_t read_u64(std::ifstream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline int64_t read_i64(std::ifstream& in) {
  int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void write_string(std::ofstream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::ifstream& in) {
  uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

constexpr uint32_t kMagic = 0x4c43434f;  // "OCCL"
constexpr uint32_t kVersion = 1;

}  // namespace ckpt

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const OccupancyPipeline<T>& pipeline,
                     const AdamW<T>& opt, const std::vector<SampleLossHistory>& histories,
                     int epoch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto& params = pipeline.params();

  out.write(reinterpret_cast<const char*>(&ckpt::kMagic), 4);
  out.write(reinterpret_cast<const char*>(&ckpt::kVersion), 4);
  uint8_t dtype = sizeof(T);
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  ckpt::write_u64(out, config_hash(pipeline.config()));
  ckpt::write_string(out, canonical_config(pipeline.config()));
  ckpt::write_i64(out, epoch);
  ckpt::write_i64(out, opt.step_count());

  ckpt::write_u64(out, params.count());
  for (size_t i = 0; i < params.count(); ++i) {
    ckpt::write_string(out, params.name(i));
    const auto& t = *params.tensor(i);
    ckpt::write_u64(out, t.shape.size());
    for (auto d : t.shape) ckpt::write_i64(out, d);
    out.write(reinterpret_cast<const char*>(t.val.data()),
              static_cast<std::streamsize>(t.val.size() * sizeof(T)));
    out.write(reinterpret_cast<const char*>(opt.moment1()[i].data()),
              static_cast<std::streamsize>(t.val.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(opt.moment2()[i].data()),
              static_cast<std::streamsize>(t.val.size() * sizeof(double)));
  }

  ckpt::write_u64(out, histories.size());
  for (const auto& h : histories) {
    ckpt::write_u64(out, h.losses.size());
    out.write(reinterpret_cast<const char*>(h.losses.data()),
              static_cast<std::streamsize>(h.losses.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write to checkpoint " + path.string());
}

struct CheckpointHeader {
  uint8_t dtype = 0;
  uint64_t config_hash = 0;
  std::string config_json;
  int epoch = 0;
  int64_t adam_steps = 0;
};

inline CheckpointHeader read_checkpoint_header(std::ifstream& in,
                                               const std::filesystem::path& path) {
  uint32_t magic = 0, version = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  if (magic != ckpt::kMagic || version != ckpt::kVersion)
    throw std::runtime_error("bad checkpoint header in " + path.string());
  CheckpointHeader hdr;
  in.read(reinterpret_cast<char*>(&hdr.dtype), 1);
  hdr.config_hash = ckpt::read_u64(in);
  hdr.config_json = ckpt::read_string(in);
  hdr.epoch = static_cast<int>(ckpt::read_i64(in));
  hdr.adam_steps = ckpt::read_i64(in);
  return hdr;
}

/// The config stored inside a checkpoint (peek without loading tensors).
inline RunConfig checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return parse_config_json(read_checkpoint_header(in, path).config_json);
}

template <typename T>
int load_checkpoint(const std::filesystem::path& path, OccupancyPipeline<T>& pipeline,
                    AdamW<T>& opt, std::vector<SampleLossHistory>& histories) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  auto hdr = read_checkpoint_header(in, path);
  if (hdr.dtype != sizeof(T))
    throw std::runtime_error("checkpoint precision mismatch in " + path.string());
  opt.set_step_count(hdr.adam_steps);

  auto& params = pipeline.params();
  uint64_t count = ckpt::read_u64(in);
  if (count != params.count()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (size_t i = 0; i < count; ++i) {
    std::string name = ckpt::read_string(in);
    if (name != params.name(i)) throw std::runtime_error("checkpoint layout mismatch at " + name);
    auto& t = *params.tensor(i);
    uint64_t ndim = ckpt::read_u64(in);
    std::vector<ad::Index> shape(ndim);
    for (auto& d : shape) d = ckpt::read_i64(in);
    if (shape != t.shape) throw std::runtime_error("checkpoint shape mismatch at " + name);
    in.read(reinterpret_cast<char*>(t.val.data()),
            static_cast<std::streamsize>(t.val.size() * sizeof(T)));
    in.read(reinterpret_cast<char*>(opt.moment1()[i].data()),
            static_cast<std::streamsize>(t.val.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(opt.moment2()[i].data()),
            static_cast<std::streamsize>(t.val.size() * sizeof(double)));
  }
  histories.clear();
  uint64_t n_hist = ckpt::read_u64(in);
  histories.resize(n_hist);
  for (auto& h : histories) {
    uint64_t n = ckpt::read_u64(in);
    h.losses.resize(n);
    in.read(reinterpret_cast<char*>(h.losses.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  return hdr.epoch;
}

// ---------------------------------------------------------------- trainer

template <typename T>
class Trainer {
 public:
  explicit Trainer(const RunConfig& config)
      : cfg_(config),
        pipeline_(config),
        opt_(config.train.learning_rate, config.train.weight_decay) {
    opt_.attach(pipeline_.params());
  }

  OccupancyPipeline<T>& pipeline() { return pipeline_; }
  AdamW<T>& optimizer() { return opt_; }
  std::vector<SampleLossHistory>& histories() { return histories_; }

  /// Chronological window ending at the sequence's last frame; temporal
  /// ablation shrinks it to the single target frame.
  std::vector<const SceneSample*> window_for(const std::vector<SceneSample>& seq) const {
    int span = cfg_.ablation.temporal ? cfg_.model.temporal_frames + 1 : 1;
    span = std::min<int>(span, static_cast<int>(seq.size()));
    std::vector<const SceneSample*> window;
    for (size_t f = seq.size() - span; f < seq.size(); ++f) window.push_back(&seq[f]);
    return window;
  }

  /// Forward-only mean total loss over a list of sequence indices.
  double mean_loss(DatasetReader& data, const std::vector<int>& indices, int epoch) {
    double acc = 0;
    for (int idx : indices) {
      ad::Tape<T> tape;
      tape.recording = false;
      typename OccupancyPipeline<T>::ForwardOptions opts;
      opts.want_loss = true;
      opts.step_seed = step_seed(epoch, idx);
      auto res = pipeline_.forward(tape, window_for(data.sequence(idx)),
                                   data.manifest().spec.rig, opts);
      acc += static_cast<double>(res.total->val[0]);
    }
    return indices.empty() ? 0.0 : acc / static_cast<double>(indices.size());
  }

  EvalMetrics evaluate(DatasetReader& data, const std::vector<int>& indices) {
    if (data.manifest().spec.grid.dims != cfg_.scene.grid.dims)
      throw std::runtime_error("evaluate: dataset grid shape does not match the model");
    ConfusionAccumulator acc(cfg_.scene.n_classes);
    for (int idx : indices) {
      ad::Tape<T> tape;
      tape.recording = false;
      typename OccupancyPipeline<T>::ForwardOptions opts;
      opts.want_loss = false;
      auto res = pipeline_.forward(tape, window_for(data.sequence(idx)),
                                   data.manifest().spec.rig, opts);
      acc.add(data.sequence(idx).back().gt.labels, res.predicted_labels());
    }
    return acc.compute();
  }

  TrainReport train(DatasetReader& data, const std::filesystem::path& out_dir,
                    const std::filesystem::path& resume_from = {}) {
    std::filesystem::create_directories(out_dir);
    const int n_train = cfg_.train.train_sequences;
    const int n_val = cfg_.train.val_sequences;
    if (data.num_sequences() < n_train + n_val)
      throw std::runtime_error("dataset has " + std::to_string(data.num_sequences()) +
                               " sequences, need " + std::to_string(n_train + n_val));
    std::vector<int> train_idx(n_train), val_idx(n_val);
    std::iota(train_idx.begin(), train_idx.end(), 0);
    std::iota(val_idx.begin(), val_idx.end(), n_train);

    histories_.assign(n_train, {});
    int start_epoch = 0;
    if (!resume_from.empty())
      start_epoch = load_checkpoint(resume_from, pipeline_, opt_, histories_);

    TrainReport report;
    for (int epoch = start_epoch + 1; epoch <= cfg_.train.epochs; ++epoch) {
      auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec = run_epoch(data, train_idx, epoch);
      rec.val_loss = mean_loss(data, val_idx, epoch);
      report.epochs.push_back(rec);
      report.epoch_seconds.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%03d.bin", epoch);
      save_checkpoint(out_dir / name, pipeline_, opt_, histories_, epoch);
    }
    report.final_metrics = evaluate(data, val_idx.empty() ? train_idx : val_idx);
    report.final_val_loss = report.epochs.empty() ? 0.0 : report.epochs.back().val_loss;
    return report;
  }

  uint64_t step_seed(int epoch, int sample) const {
    return Rng::fork(cfg_.seed, 0x57EB + static_cast<uint64_t>(epoch) * 100000 +
                                    static_cast<uint64_t>(sample))
        .next_u64();
  }

 private:
  RunConfig cfg_;
  OccupancyPipeline<T> pipeline_;
  AdamW<T> opt_;
  std::vector<SampleLossHistory> histories_;
  std::vector<std::unique_ptr<OccupancyPipeline<T>>> workers_;  // thread clones

  EpochRecord run_epoch(DatasetReader& data, const std::vector<int>& train_idx, int epoch) {
    const int n = static_cast<int>(train_idx.size());
    EpochRecord rec;
    rec.epoch = epoch;

    // participation + weights from decayed cumulative losses
    std::vector<EpochPlanEntry> plan(n);
    const AhswConfig& acfg = cfg_.ahsw;
    bool weighting_active = cfg_.ablation.ahsw && epoch > std::max(acfg.warmup_epochs, 1);
    if (weighting_active) {
      std::vector<double> cumulative(n);
      for (int i = 0; i < n; ++i)
        cumulative[i] = cumulative_loss(histories_[i].losses, acfg.decay, epoch);
      plan = plan_epoch(cumulative, acfg, epoch);
    }
    rec.weight_min = 1e300;
    rec.weight_max = -1e300;
    for (const auto& e : plan) {
      rec.participants += e.participates;
      rec.weight_min = std::min(rec.weight_min, e.weight);
      rec.weight_max = std::max(rec.weight_max, e.weight);
    }

    // fixed per-epoch sample order
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng perm_rng = Rng::fork(cfg_.seed, 500 + static_cast<uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[perm_rng.uniform_index(static_cast<uint64_t>(i) + 1)]);

    std::vector<double> sample_losses(n, 0.0);
    double term_sums[7] = {0, 0, 0, 0, 0, 0, 0};
    bool counters_recorded = false;

    const int bs = cfg_.train.batch_size;
    for (int at = 0; at < n; at += bs) {
      std::vector<int> batch(order.begin() + at,
                             order.begin() + std::min(n, at + bs));
      int batch_participants = 0;
      for (int pos : batch) batch_participants += plan[pos].participates;

      auto run_sample = [&](OccupancyPipeline<T>& pipe, int pos) {
        int seq = train_idx[pos];
        ad::Tape<T> tape;
        tape.recording = plan[pos].participates;
        typename OccupancyPipeline<T>::ForwardOptions opts;
        opts.want_loss = true;
        opts.step_seed = step_seed(epoch, seq);
        auto res = pipe.forward(tape, window_for(data.sequence(seq)),
                                data.manifest().spec.rig, opts);
        sample_losses[pos] = static_cast<double>(res.total->val[0]);
        if (plan[pos].participates && batch_participants > 0) {
          T scale = static_cast<T>(plan[pos].weight / batch_participants);
          tape.backward(tape.scale(res.total, scale));
        }
        return res;
      };

      if (cfg_.train.threads <= 1 || batch.size() <= 1) {
        for (int pos : batch) {
          auto res = run_sample(pipeline_, pos);
          if (!counters_recorded) {
            for (const auto& lw : res.work.back()) {
              rec.gsca_calls_per_layer.push_back(lw.attention_calls_gsca);
              rec.ssca_calls_per_layer.push_back(lw.attention_calls_ssca);
            }
            counters_recorded = true;
          }
          accumulate_terms(res, term_sums);
        }
      } else {
        run_batch_parallel(data, batch, plan, epoch, train_idx, sample_losses, term_sums,
                           batch_participants, rec, counters_recorded);
      }
      if (batch_participants > 0) opt_.step(pipeline_.params());
    }

    for (int i = 0; i < n; ++i) histories_[i].losses.push_back(sample_losses[i]);

    rec.train_total = term_sums[0] / n;
    rec.train_proxy = term_sums[1] / n;
    rec.train_ce = term_sums[2] / n;
    rec.train_lovasz = term_sums[3] / n;
    rec.train_scal_geo = term_sums[4] / n;
    rec.train_scal_sem = term_sums[5] / n;
    rec.train_aux = term_sums[6] / n;
    return rec;
  }

  void accumulate_terms(const typename OccupancyPipeline<T>::ForwardResult& res,
                        double sums[7]) {
    auto val = [](const ad::Ptr<T>& t) { return t ? static_cast<double>(t->val[0]) : 0.0; };
    sums[0] += val(res.total);
    sums[1] += val(res.loss_proxy);
    sums[2] += val(res.loss_ce);
    sums[3] += val(res.loss_lovasz);
    sums[4] += val(res.loss_scal_geo);
    sums[5] += val(res.loss_scal_sem);
    sums[6] += val(res.loss_aux);
  }

  /// Data-parallel batch: per-thread pipeline clones, per-sample gradient
  /// buffers merged in batch order so results are run-to-run reproducible.
  void run_batch_parallel(DatasetReader& data, const std::vector<int>& batch,
                          const std::vector<EpochPlanEntry>& plan, int epoch,
                          const std::vector<int>& train_idx, std::vector<double>& sample_losses,
                          double term_sums[7], int batch_participants, EpochRecord& rec,
                          bool& counters_recorded) {
    const int n_threads = std::min<int>(cfg_.train.threads, static_cast<int>(batch.size()));
    while (static_cast<int>(workers_.size()) < n_threads)
      workers_.push_back(std::make_unique<OccupancyPipeline<T>>(cfg_));
    // preload sequences serially (the reader cache is not thread-safe)
    for (int pos : batch) data.sequence(train_idx[pos]);

    std::vector<std::vector<std::vector<T>>> grad_buffers(batch.size());
    std::vector<typename OccupancyPipeline<T>::ForwardResult> results(batch.size());
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) {
      workers_[t]->params().copy_values_from(pipeline_.params());
      workers_[t]->params().zero_grads();
      threads.emplace_back([&, t] {
        for (size_t b = t; b < batch.size(); b += n_threads) {
          int pos = batch[b];
          int seq = train_idx[pos];
          ad::Tape<T> tape;
          tape.recording = plan[pos].participates;
          typename OccupancyPipeline<T>::ForwardOptions opts;
          opts.want_loss = true;
          opts.step_seed = step_seed(epoch, seq);
          auto res = workers_[t]->forward(tape, window_for(data.sequence(seq)),
                                          data.manifest().spec.rig, opts);
          sample_losses[pos] = static_cast<double>(res.total->val[0]);
          if (plan[pos].participates && batch_participants > 0) {
            T scale = static_cast<T>(plan[pos].weight / batch_participants);
            tape.backward(tape.scale(res.total, scale));
            auto& params = workers_[t]->params();
            grad_buffers[b].resize(params.count());
            for (size_t i = 0; i < params.count(); ++i) {
              grad_buffers[b][i] = params.tensor(i)->grad;
              std::fill(params.tensor(i)->grad.begin(), params.tensor(i)->grad.end(), T(0));
            }
          }
          results[b] = std::move(res);
        }
      });
    }
    for (auto& th : threads) th.join();

    auto& params = pipeline_.params();
    for (size_t b = 0; b < batch.size(); ++b) {  // fixed reduction order
      if (!grad_buffers[b].empty())
        for (size_t i = 0; i < params.count(); ++i)
          for (ad::Index e = 0; e < params.tensor(i)->size(); ++e)
            params.tensor(i)->grad[e] += grad_buffers[b][i][e];
      if (!counters_recorded && !results[b].work.empty()) {
        for (const auto& lw : results[b].work.back()) {
          rec.gsca_calls_per_layer.push_back(lw.attention_calls_gsca);
          rec.ssca_calls_per_layer.push_back(lw.attention_calls_ssca);
        }
        counters_recorded = true;
      }
      accumulate_terms(results[b], term_sums);
    }
  }
};

}  // namespace occloff
