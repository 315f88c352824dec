#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "meshnet/autograd.hpp"
#include "meshnet/metrics.hpp"
#include "meshnet/model.hpp"
#include "meshnet/ops.hpp"
#include "meshnet/optim.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/sampling.hpp"
#include "meshnet/thread_pool.hpp"
#include "meshnet/volume.hpp"

namespace meshnet {

// ---------------------------------------------------------------------------
// Voting
// ---------------------------------------------------------------------------

/// Per-voxel, per-class vote tallies. A voxel's vote total equals the
/// number of sampled windows covering it.
struct VoteGrid {
  std::array<int, 3> dims{0, 0, 0};
  int classes = 0;
  std::vector<std::uint16_t> votes;  // voxel-major: voxel * classes + class

  VoteGrid() = default;
  VoteGrid(std::array<int, 3> d, int c) : dims(d), classes(c) {
    votes.assign(static_cast<std::size_t>(d[0]) * d[1] * d[2] * c, 0);
  }

  std::size_t voxel_index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  int coverage_at(int x, int y, int z) const {
    const std::uint16_t* v = &votes[voxel_index(x, y, z) * classes];
    int total = 0;
    for (int c = 0; c < classes; ++c) total += v[c];
    return total;
  }

  int votes_at(int x, int y, int z, int cls) const {
    return votes[voxel_index(x, y, z) * classes + cls];
  }

  /// Majority label per voxel; ties go to the smallest class index.
  /// Throws if any voxel never received a vote.
  LabelVolume argmax_labels() const {
    LabelVolume out(dims, VolumeKind::labels, 0);
    const std::size_t n = out.voxel_count();
    for (std::size_t v = 0; v < n; ++v) {
      const std::uint16_t* row = &votes[v * classes];
      std::uint16_t best = 0;
      std::int32_t best_c = 0;
      std::uint32_t total = 0;
      for (int c = 0; c < classes; ++c) {
        total += row[c];
        if (row[c] > best) {
          best = row[c];
          best_c = c;
        }
      }
      if (total == 0)
        throw ShapeError("vote grid: voxel " + std::to_string(v) +
                         " received no votes");
      out.data[v] = best_c;
    }
    return out;
  }
};

enum class VoteRule { majority, logprob };

struct SegmentResult {
  LabelVolume labels;
  VoteGrid votes;               // filled in majority mode
  std::vector<Corner> corners;  // grid windows first, then Gaussian draws
};

// ---------------------------------------------------------------------------
// Full-volume segmentation
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> gather_input(const std::vector<const Volume*>& inputs,
                       const Corner& corner, int side) {
  const std::int64_t m = static_cast<std::int64_t>(inputs.size());
  Tensor<T> x({1, m, side, side, side});
  const std::size_t slab = static_cast<std::size_t>(side) * side * side;
  for (std::int64_t c = 0; c < m; ++c) {
    const Volume& v = *inputs[c];
    std::size_t o = c * slab;
    for (int z = 0; z < side; ++z)
      for (int y = 0; y < side; ++y) {
        const float* src = &v.at(corner[0], corner[1] + y, corner[2] + z);
        for (int i = 0; i < side; ++i)
          x.values[o + i] = static_cast<T>(src[i]);
        o += side;
      }
  }
  return x;
}

/// Per-voxel argmax over the channel axis of a (1, C, s, s, s) tensor;
/// ties go to the smallest channel.
template <typename T>
std::vector<std::int32_t> channel_argmax(const Tensor<T>& t) {
  const std::int64_t ch = t.shape[1];
  const std::int64_t slab = t.shape[2] * t.shape[3] * t.shape[4];
  std::vector<std::int32_t> out(slab, 0);
  std::vector<T> best(t.values.begin(), t.values.begin() + slab);
  for (std::int64_t c = 1; c < ch; ++c) {
    const T* tb = t.data() + c * slab;
    for (std::int64_t i = 0; i < slab; ++i)
      if (tb[i] > best[i]) {
        best[i] = tb[i];
        out[i] = static_cast<std::int32_t>(c);
      }
  }
  return out;
}

}  // namespace detail

/// Segments aligned intensity volumes with a sliding-subvolume model.
/// The corner set always starts with the full nonoverlap grid, so every
/// voxel receives at least one vote; windows beyond the grid size are
/// Gaussian draws from cfg. Each window is classified independently
/// (argmax of LogSoftMax per voxel) and fused voxel-wise: majority voting
/// by default, or accumulated log-probabilities under VoteRule::logprob.
template <typename T>
SegmentResult segment(const std::vector<const Volume*>& inputs,
                      const Model<T>& model, SamplerConfig cfg,
                      int n_subvolumes, VoteRule rule = VoteRule::majority,
                      ThreadPool* pool = nullptr) {
  if (inputs.empty() || inputs.size() > 2)
    throw ConfigError("segment: expected 1 or 2 input volumes");
  if (static_cast<int>(inputs.size()) != model.spec.modalities)
    throw ConfigError("segment: model expects " +
                      std::to_string(model.spec.modalities) +
                      " modalities, got " + std::to_string(inputs.size()));
  for (const auto* v : inputs)
    if (v->dims != inputs[0]->dims)
      throw ShapeError("segment: input volumes must share dimensions");
  if (n_subvolumes < 1) throw ConfigError("segment: n_subvolumes must be >= 1");

  const int side = model.spec.subvolume_side;
  cfg.volume_dims = inputs[0]->dims;
  cfg.side = side;
  cfg.validate();

  std::vector<Corner> corners = grid_nonoverlap(cfg);
  const int extra = n_subvolumes - static_cast<int>(corners.size());
  for (int i = 0; i < extra; ++i)
    corners.push_back(gaussian_corner(cfg, static_cast<std::uint64_t>(i)));

  const int classes = model.spec.classes;
  const std::array<int, 3>& dims = cfg.volume_dims;
  const std::size_t slab = static_cast<std::size_t>(side) * side * side;
  auto voxel_index = [&dims](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  };

  SegmentResult result;
  result.corners = corners;

  std::vector<double> logprob_acc;
  if (rule == VoteRule::majority)
    result.votes = VoteGrid(dims, classes);
  else
    logprob_acc.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] *
                           classes,
                       0.0);

  // Workers classify blocks of windows in parallel; vote scatter stays on
  // this thread in corner order, so accumulation order is fixed no matter
  // how many threads run.
  const std::size_t block =
      std::max<std::size_t>(1, (pool ? pool->thread_count() : 1) * 8);
  std::vector<std::vector<std::int32_t>> label_patches(block);
  std::vector<Tensor<T>> logprob_patches(block);

  for (std::size_t start = 0; start < corners.size(); start += block) {
    const std::size_t n = std::min(block, corners.size() - start);
    maybe_parallel_for(pool, static_cast<std::int64_t>(n), [&](std::int64_t i) {
      const Corner& c = corners[start + i];
      Tensor<T> x = detail::gather_input<T>(inputs, c, side);
      Tensor<T> logp = logsoftmax_forward(model.infer(x));
      if (rule == VoteRule::majority)
        label_patches[i] = detail::channel_argmax(logp);
      else
        logprob_patches[i] = std::move(logp);
    });
    for (std::size_t i = 0; i < n; ++i) {
      const Corner& c = corners[start + i];
      if (rule == VoteRule::majority) {
        const auto& patch = label_patches[i];
        std::size_t o = 0;
        for (int z = 0; z < side; ++z)
          for (int y = 0; y < side; ++y) {
            std::uint16_t* row =
                &result.votes.votes[voxel_index(c[0], c[1] + y, c[2] + z) *
                                    classes];
            for (int x = 0; x < side; ++x) ++row[x * classes + patch[o + x]];
            o += side;
          }
      } else {
        const Tensor<T>& lp = logprob_patches[i];
        for (int z = 0; z < side; ++z)
          for (int y = 0; y < side; ++y) {
            double* row =
                &logprob_acc[voxel_index(c[0], c[1] + y, c[2] + z) * classes];
            const std::size_t o = (static_cast<std::size_t>(z) * side + y) * side;
            for (int x = 0; x < side; ++x)
              for (int cls = 0; cls < classes; ++cls)
                row[x * classes + cls] +=
                    static_cast<double>(lp.values[cls * slab + o + x]);
          }
      }
    }
  }

  if (rule == VoteRule::majority) {
    result.labels = result.votes.argmax_labels();
  } else {
    LabelVolume out(dims, VolumeKind::labels, 0);
    const std::size_t nvox = out.voxel_count();
    for (std::size_t v = 0; v < nvox; ++v) {
      const double* row = &logprob_acc[v * classes];
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      out.data[v] = best;
    }
    result.labels = std::move(out);
  }
  result.labels.spacing = inputs[0]->spacing;
  return result;
}

// ---------------------------------------------------------------------------
// Training and fine-tuning
// ---------------------------------------------------------------------------

/// One training example: 1 or 2 aligned, preprocessed intensity volumes
/// plus the reference labeling.
struct TrainingCase {
  std::vector<const Volume*> inputs;
  const LabelVolume* labels = nullptr;
};

struct TrainConfig {
  int epochs = 1;
  int subvolumes_per_epoch = 30720;
  int val_subvolumes = 27648;
  int batch_size = 1;  // subvolumes accumulated per optimizer step
  double lr = 1e-3;
  double finetune_lr = 1e-5;
  SamplerConfig sampler;  // gaussian mean/std; dims and side are derived
  /// Fraction of training windows drawn from the Gaussian sampler; the
  /// rest walk the coverage grid. 0.5 alternates strictly.
  double gaussian_mix = 0.5;
  std::uint64_t seed = 0;
  /// Case used for the per-epoch macro-DICE check; -1 means the last case.
  int val_case = -1;
  /// Window count for the per-epoch DICE segmentation; 0 = grid only.
  int dice_subvolumes = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (subvolumes_per_epoch < 1 || val_subvolumes < 1 || batch_size < 1)
      throw ConfigError("train: counts must be positive");
    if (lr < 0 || finetune_lr < 0)
      throw ConfigError("train: learning rates must be >= 0");
    if (finetune_lr >= lr && lr > 0)
      throw ConfigError("train: finetune_lr must be below lr");
    if (gaussian_mix < 0.0 || gaussian_mix > 1.0)
      throw ConfigError("train: gaussian_mix must be in [0, 1]");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double macro_dice = 0;
};

template <typename T>
struct TrainResult {
  Model<T> model;        // best-validation checkpoint
  Model<T> final_model;  // state after the last epoch
  std::vector<EpochRecord> log;
  int best_epoch = 0;
};

/// Line-delimited training log: epoch, train_loss, val_loss, macro_dice.
inline void write_train_log(std::ostream& os,
                            const std::vector<EpochRecord>& log) {
  os << "epoch\ttrain_loss\tval_loss\tmacro_dice\n";
  os.precision(17);
  for (const auto& r : log)
    os << r.epoch << "\t" << r.train_loss << "\t" << r.val_loss << "\t"
       << r.macro_dice << "\n";
}

namespace detail {

/// Deterministic corner stream interleaving the coverage grid with
/// Gaussian draws at a configurable fraction: a tick yields a Gaussian
/// corner whenever floor((tick+1)*mix) advances, so mix 0.5 alternates
/// strictly, 0 walks the grid only, 1 draws only.
class MixedSampler {
 public:
  MixedSampler(const SamplerConfig& cfg, double gaussian_mix = 0.5)
      : cfg_(cfg), mix_(gaussian_mix), grid_(grid_nonoverlap(cfg)) {}

  Corner next() {
    const std::uint64_t tick = tick_++;
    const auto before = static_cast<std::uint64_t>(
        std::floor(static_cast<double>(tick) * mix_));
    const auto after = static_cast<std::uint64_t>(
        std::floor(static_cast<double>(tick + 1) * mix_));
    if (after > before) return gaussian_corner(cfg_, before);
    return grid_[grid_cursor_++ % grid_.size()];
  }

 private:
  SamplerConfig cfg_;
  double mix_;
  std::vector<Corner> grid_;
  std::uint64_t tick_ = 0;
  std::uint64_t grid_cursor_ = 0;
};

inline Tensor<std::int32_t> gather_labels(const LabelVolume& labels,
                                          const Corner& c, int side) {
  Tensor<std::int32_t> out({1, side, side, side});
  std::size_t o = 0;
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y) {
      const std::int32_t* src = &labels.at(c[0], c[1] + y, c[2] + z);
      std::copy(src, src + side, out.values.begin() + o);
      o += side;
    }
  return out;
}

}  // namespace detail

/// Minimizes voxel-wise cross-entropy with Adam over mixed nonoverlap and
/// Gaussian subvolume samples. Each epoch reports train loss, validation
/// loss on a fixed deterministic sample set, and macro DICE of a full
/// segmentation of the validation case; the best-validation model is
/// checkpointed. Single optimizer stream; fully reproducible from cfg.seed.
template <typename T>
TrainResult<T> train(Model<T> model, const std::vector<TrainingCase>& data,
                     TrainConfig cfg, ThreadPool* pool = nullptr,
                     std::ostream* progress = nullptr) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  for (const auto& d : data) {
    if (d.inputs.empty() ||
        static_cast<int>(d.inputs.size()) != model.spec.modalities)
      throw ConfigError("train: case modality count does not match model");
    if (!d.labels) throw ConfigError("train: case has no labels");
    if (d.labels->dims != d.inputs[0]->dims)
      throw ShapeError("train: label dims do not match inputs");
  }

  const int side = model.spec.subvolume_side;
  const int val_case =
      cfg.val_case >= 0 ? cfg.val_case : static_cast<int>(data.size()) - 1;
  if (val_case >= static_cast<int>(data.size()))
    throw ConfigError("train: val_case out of range");

  // Independent per-purpose streams under the one user seed.
  Rng seed_root(cfg.seed);
  Rng dropout_rng = seed_root.fork(0x64726F70ULL);  // dropout draws
  const std::uint64_t train_sample_seed = seed_root.fork(0x7472ULL).seed();
  const std::uint64_t val_sample_seed = seed_root.fork(0x76616CULL).seed();

  std::vector<detail::MixedSampler> samplers;
  std::vector<detail::MixedSampler> val_samplers;
  for (std::size_t i = 0; i < data.size(); ++i) {
    SamplerConfig sc = cfg.sampler;
    sc.volume_dims = data[i].inputs[0]->dims;
    sc.side = side;
    sc.seed = splitmix64(train_sample_seed ^ i);
    samplers.emplace_back(sc, cfg.gaussian_mix);
    sc.seed = splitmix64(val_sample_seed ^ i);
    val_samplers.emplace_back(sc, cfg.gaussian_mix);
  }

  AdamState<T> adam;
  adam.lr = static_cast<T>(cfg.lr);
  auto params = model.parameters();
  std::vector<Tensor<T>> grad_acc;
  for (auto* p : params) grad_acc.emplace_back(p->shape);

  TrainResult<T> result;
  double best_val = std::numeric_limits<double>::infinity();

  const auto evaluate = [&](int epoch) {
    // Validation loss over a fixed subvolume set.
    double val_loss = 0;
    std::vector<detail::MixedSampler> vs = val_samplers;  // replay from start
    for (int s = 0; s < cfg.val_subvolumes; ++s) {
      const std::size_t ci = s % data.size();
      const TrainingCase& tc = data[ci];
      const Corner corner = vs[ci].next();
      Tensor<T> x = detail::gather_input<T>(tc.inputs, corner, side);
      Tensor<std::int32_t> y = detail::gather_labels(*tc.labels, corner, side);
      Tensor<T> logp = logsoftmax_forward(model.infer(x));
      val_loss += static_cast<double>(cross_entropy_forward(logp, y));
    }
    val_loss /= cfg.val_subvolumes;

    // Macro DICE of a full segmentation of the validation case.
    SamplerConfig sc = cfg.sampler;
    sc.seed = splitmix64(val_sample_seed ^ 0x64696365ULL);
    SegmentResult seg =
        segment(data[val_case].inputs, model, sc,
                std::max(1, cfg.dice_subvolumes), VoteRule::majority, pool);
    const ConfusionCounts cc =
        confusion(seg.labels, *data[val_case].labels, model.spec.classes);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.val_loss = val_loss;
    rec.macro_dice = macro_dice(cc);
    return rec;
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.training = true;
    double train_loss = 0;
    int in_batch = 0;
    for (int s = 0; s < cfg.subvolumes_per_epoch; ++s) {
      const std::size_t ci = s % data.size();
      const TrainingCase& tc = data[ci];
      const Corner corner = samplers[ci].next();
      Tensor<T> x = detail::gather_input<T>(tc.inputs, corner, side);
      Tensor<std::int32_t> y = detail::gather_labels(*tc.labels, corner, side);

      Graph<T> g;
      auto rec = model.forward_train(g, x, dropout_rng);
      Var<T> logp = logsoftmax(rec.logits);
      auto labels = std::make_shared<const Tensor<std::int32_t>>(std::move(y));
      Var<T> loss = cross_entropy(logp, labels);
      train_loss += static_cast<double>(loss.value().values[0]);
      g.backward(loss.id);

      for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor<T>& gp = g.grad(rec.param_ids[p]);
        for (std::size_t j = 0; j < grad_acc[p].values.size(); ++j)
          grad_acc[p].values[j] += gp.values[j];
      }
      if (++in_batch == cfg.batch_size || s + 1 == cfg.subvolumes_per_epoch) {
        const T scale = T(1) / static_cast<T>(in_batch);
        std::vector<const Tensor<T>*> grads;
        for (auto& ga : grad_acc) {
          for (auto& v : ga.values) v *= scale;
          grads.push_back(&ga);
        }
        if (cfg.lr > 0) adam_step(params, grads, adam);
        for (auto& ga : grad_acc)
          std::fill(ga.values.begin(), ga.values.end(), T(0));
        in_batch = 0;
      }
    }
    model.training = false;

    EpochRecord rec = evaluate(epoch);
    rec.train_loss = train_loss / cfg.subvolumes_per_epoch;
    result.log.push_back(rec);
    if (progress)
      *progress << "epoch " << rec.epoch << " train_loss " << rec.train_loss
                << " val_loss " << rec.val_loss << " macro_dice "
                << rec.macro_dice << "\n";
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.model = model;
      result.best_epoch = epoch;
    }
  }

  result.final_model = model;
  if (result.log.empty()) result.model = std::move(model);  // 0-epoch run
  return result;
}

/// Same loop as train() at the reduced fine-tuning rate; no layers are
/// frozen. Callers typically also shrink the epoch to 7168 subvolumes.
template <typename T>
TrainResult<T> finetune(Model<T> model, const std::vector<TrainingCase>& data,
                        TrainConfig cfg, ThreadPool* pool = nullptr,
                        std::ostream* progress = nullptr) {
  cfg.lr = cfg.finetune_lr;
  cfg.finetune_lr = cfg.lr / 2;  // keep the validate() ordering intact
  return train(std::move(model), data, cfg, pool, progress);
}

// ---------------------------------------------------------------------------
// Subvolume-count benchmark
// ---------------------------------------------------------------------------

struct BenchmarkRow {
  int count = 0;
  double mean_s = 0;
  double min_s = 0;
  double macro_dice = 0;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  int reference_count = 0;
  // least-squares fit of mean time against subvolume count
  double slope = 0, intercept = 0, r2 = 0;
};

inline void write_benchmark_report(std::ostream& os, const BenchmarkReport& r) {
  os << "count\tmean_s\tmin_s\tmacro_dice\n";
  for (const auto& row : r.rows)
    os << row.count << "\t" << row.mean_s << "\t" << row.min_s << "\t"
       << row.macro_dice << "\n";
  os << "# time fit: slope " << r.slope << " s/subvolume, intercept "
     << r.intercept << " s, r2 " << r.r2 << "\n";
}

/// Times full-volume segmentation across subvolume counts and scores each
/// against reference labels (ground truth when given, otherwise the
/// segmentation at `reference_count` windows). Absolute seconds are
/// hardware-bound; the linear fit captures the scaling behavior.
template <typename T>
BenchmarkReport benchmark(const std::vector<const Volume*>& inputs,
                          const Model<T>& model, SamplerConfig cfg,
                          const LabelVolume* reference,
                          const std::vector<int>& counts, int repeats,
                          int reference_count = 8192,
                          ThreadPool* pool = nullptr) {
  if (counts.empty()) throw ConfigError("benchmark: no subvolume counts");
  if (repeats < 1) throw ConfigError("benchmark: repeats must be >= 1");

  BenchmarkReport report;
  report.reference_count = reference_count;
  LabelVolume ref_labels;
  if (reference) {
    ref_labels = *reference;
  } else {
    ref_labels =
        segment(inputs, model, cfg, reference_count, VoteRule::majority, pool)
            .labels;
  }

  for (int count : counts) {
    BenchmarkRow row;
    row.count = count;
    row.min_s = std::numeric_limits<double>::infinity();
    LabelVolume labels;
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto seg = segment(inputs, model, cfg, count, VoteRule::majority, pool);
      const auto t1 = std::chrono::steady_clock::now();
      const double s = std::chrono::duration<double>(t1 - t0).count();
      row.mean_s += s;
      row.min_s = std::min(row.min_s, s);
      if (r == 0) labels = std::move(seg.labels);
    }
    row.mean_s /= repeats;
    const ConfusionCounts cc = confusion(labels, ref_labels, model.spec.classes);
    row.macro_dice = macro_dice(cc);
    report.rows.push_back(row);
  }

  // y = a*x + b over (count, mean_s)
  const double n = static_cast<double>(report.rows.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (const auto& row : report.rows) {
    const double x = row.count, y = row.mean_s;
    sx += x; sy += y; sxx += x * x; sxy += x * y; syy += y * y;
  }
  const double denom = n * sxx - sx * sx;
  if (denom > 0) {
    report.slope = (n * sxy - sx * sy) / denom;
    report.intercept = (sy - report.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double ymean = sy / n;
    for (const auto& row : report.rows) {
      const double fit = report.slope * row.count + report.intercept;
      ss_res += (row.mean_s - fit) * (row.mean_s - fit);
      ss_tot += (row.mean_s - ymean) * (row.mean_s - ymean);
    }
    report.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  }
  return report;
}

}  // namespace meshnet
