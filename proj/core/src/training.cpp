#include "wotlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "wotlab/attacks.hpp"
#include "wotlab/baselines.hpp"
#include "wotlab/checkpoint.hpp"
#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"

namespace wotlab {

namespace {

Dataset load_source(const TrainConfig& c, bool train) {
  const auto& d = c.dataset;
  switch (d.format) {
    case DatasetFormat::Idx:
      return train ? load_idx(d.train_images, d.train_labels, d.name + "-train")
                   : load_idx(d.test_images, d.test_labels, d.name + "-test");
    case DatasetFormat::Cifar: {
      const auto& names = train ? d.train_files : d.test_files;
      std::vector<std::filesystem::path> paths(names.begin(), names.end());
      return load_cifar_binary(paths, d.name + (train ? "-train" : "-test"));
    }
    case DatasetFormat::Blobs:
      return synth_blobs(derive_key(d.split.seed, train ? 1 : 2), d.blobs_per_class, d.blobs_classes, d.blobs_shape,
                         d.blobs_spread);
  }
  throw ContractError("unknown dataset format");
}

Dataset fit_to_model(const Dataset& data, const ModelSpec& spec) {
  if (data.classes() != spec.classes) {
    throw ConfigError("dataset '" + data.name() + "' has " + std::to_string(data.classes()) +
                      " classes but model.classes is " + std::to_string(spec.classes));
  }
  if (data.sample_shape() == spec.input_shape) return data;
  if (data.sample_size() != shape_size(spec.input_shape)) {
    throw ConfigError("dataset '" + data.name() + "' samples have shape " + shape_str(data.sample_shape()) +
                      " which cannot feed model.input_shape " + shape_str(spec.input_shape));
  }
  std::vector<float> pixels(data.pixels().begin(), data.pixels().end());
  return Dataset(data.name(), spec.input_shape, std::move(pixels), data.labels(), data.classes());
}

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

DataBundle load_data(const TrainConfig& c) {
  const auto& d = c.dataset;
  const Dataset source = fit_to_model(load_source(c, true), c.model);
  const Dataset test_source = fit_to_model(load_source(c, false), c.model);

  const std::size_t n = source.size();
  if (d.validation_size >= n) throw ConfigError("dataset.validation_size must be smaller than the training file");
  const std::size_t pool_n = d.train_subset ? d.train_subset : n - d.validation_size;
  if (pool_n + d.validation_size > n) {
    throw ConfigError("dataset.train_subset + dataset.validation_size (" + std::to_string(pool_n + d.validation_size) +
                      ") exceeds the " + std::to_string(n) + " training samples");
  }
  CounterRng rng(derive_key(d.split.seed, 0x5e1));
  const auto perm = permutation(n, rng);
  const std::vector<std::size_t> pool_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(pool_n));
  const std::vector<std::size_t> val_idx(perm.begin() + static_cast<std::ptrdiff_t>(pool_n),
                                         perm.begin() + static_cast<std::ptrdiff_t>(pool_n + d.validation_size));
  const Dataset pool = source.subset(pool_idx, source.name());

  DataBundle out;
  if (d.split.holdout_size > 0) {
    Split split = holdout_split(pool, d.split);
    out.train = std::move(split.train);
    out.holdout = std::move(split.holdout);
  } else {
    out.train = pool;
  }

  const std::size_t test_n = d.test_subset ? std::min(d.test_subset, test_source.size()) : test_source.size();
  const auto test_idx = iota_indices(0, test_n);
  out.test = test_source.subset(test_idx, test_source.name());
  out.validation = d.validation_size ? source.subset(val_idx, source.name() + "-val") : out.test;
  if (out.train.empty()) throw ConfigError("training set is empty after splitting");
  if (out.test.empty()) throw DataError("test set is empty");
  return out;
}

double learning_rate(const TrainConfig& c, std::size_t epoch) {
  double lr = c.optimizer.lr;
  for (double f : c.optimizer.decay_at) {
    if (epoch >= static_cast<std::size_t>(std::floor(f * static_cast<double>(c.epochs)))) lr *= c.optimizer.decay_factor;
  }
  return lr;
}

void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << kMetricsHeader << "\n";
  for (const auto& r : metrics) {
    f << r.epoch << ',' << r.step << ',' << fmt(r.clean_train_acc) << ',' << fmt(r.clean_test_acc) << ','
      << fmt(r.robust_val_acc) << ',' << fmt(r.robust_test_acc) << ',' << fmt(r.train_loss) << ','
      << fmt(r.mean_alpha) << ',' << fmt(r.lr) << "\n";
  }
}

void write_alpha_trace_csv(const std::vector<AlphaTraceRow>& trace, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << "round,step,block,gap_index,alpha,grad_norm\n";
  for (const auto& r : trace) {
    f << r.round << ',' << r.step << ',' << r.block << ',' << r.gap_index << ',' << fmt(r.alpha) << ','
      << fmt(r.grad_norm) << "\n";
  }
}

TrainResult run_training(const TrainConfig& config, TrainObserver* observer) {
  validate(config);
  const DataBundle data = load_data(config);
  return run_training(config, data, observer);
}

TrainResult run_training(const TrainConfig& config, const DataBundle& data, TrainObserver* observer) {
  validate(config);
  const auto& c = config;
  if (data.train.empty()) throw ConfigError("training set is empty");
  if (c.wot.enabled && data.holdout.empty()) throw ConfigError("wot.enabled needs a non-empty holdout set");
  if (data.train.sample_shape() != c.model.input_shape) {
    throw ConfigError("training samples have shape " + shape_str(data.train.sample_shape()) +
                      " but model.input_shape is " + shape_str(c.model.input_shape));
  }

  TrainObserver noop;
  TrainObserver& obs = observer ? *observer : noop;

  Model model = build_model(c.model, derive_key(c.seed, 0x1417));
  const std::size_t n_train = data.train.size();
  const std::size_t batch = std::min(c.batch_size, n_train);
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;

  TrainResult result;
  result.spec = c.model;
  result.steps_per_epoch = steps_per_epoch;
  result.total_steps = steps_per_epoch * c.epochs;

  // WOT state.
  const std::size_t p_steps = wot_start_epoch(c) * steps_per_epoch;
  result.wot_start_step = p_steps;
  const std::size_t m = c.wot.m, window = c.wot.m * c.wot.k;
  if (c.wot.enabled && result.total_steps < p_steps + window) {
    throw ConfigError("wot: m * k = " + std::to_string(window) + " exceeds the " +
                      std::to_string(result.total_steps - p_steps) + " optimizer steps after the start epoch");
  }
  const BlockPartition partition = block_partition(model, c.wot.mode);
  TrajectoryBuffer buffer(c.wot.k, c.wot.m);
  AlphaState alpha_state;
  alpha_state.lr = c.wot.alpha_lr;
  alpha_state.gamma = c.wot.alpha_gamma;
  alpha_state.n_steps = c.wot.alpha_steps;
  Objective holdout_objective = c.loss;
  holdout_objective.attack = c.wot.holdout_attack;
  std::size_t round = 0;

  // Baselines.
  WeightAverager averager;
  const std::size_t swa_start = c.baseline.swa_start_epoch.value_or(first_decay_epoch(c));
  BestTracker<ParamVector> tracker;

  std::vector<float> velocity(model.params().size(), 0.0f);
  const std::uint64_t val_seed = derive_key(c.seed, 0x7a1);
  const std::uint64_t test_seed = derive_key(c.seed, 0x7e57);
  const std::size_t train_eval_n = std::min(c.eval.train_eval_size, n_train);
  const Dataset train_eval = data.train.subset(iota_indices(0, train_eval_n), data.train.name());

  std::size_t t = 0;
  if (c.wot.enabled && p_steps == 0) buffer.clear(model.params());

  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    const double lr = learning_rate(c, epoch);
    CounterRng shuffle(derive_key(derive_key(c.seed, 0xe90c), epoch));
    const auto order = permutation(n_train, shuffle);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<double> epoch_alpha;

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t b = s * batch, e = std::min(n_train, b + batch);
      const std::span<const std::size_t> idx(order.data() + b, e - b);
      const Tensor x = data.train.batch(idx);
      const auto y = data.train.batch_labels(idx);
      const Tensor x_adv = generate_adversarial(model, x, y, c.loss, derive_key(derive_key(c.seed, 0xa77), t));
      const auto lg = objective_gradient(model, x, x_adv, y, c.loss);
      if (!std::isfinite(lg.loss)) ++result.nan_losses;
      loss_sum += lg.loss * static_cast<double>(e - b);
      loss_count += e - b;

      auto w = model.params().values();
      const auto g = lg.gradient.values();
      const float wd = static_cast<float>(c.optimizer.weight_decay), mu = static_cast<float>(c.optimizer.momentum);
      const float lr_f = static_cast<float>(lr);
      for (std::size_t q = 0; q < w.size(); ++q) {
        const float gq = g[q] + wd * w[q];
        velocity[q] = mu * velocity[q] + gq;
        w[q] -= lr_f * velocity[q];
      }
      ++t;
      obs.on_step(t, lg.loss);

      if (c.wot.enabled) {
        if (t == p_steps) {
          buffer.clear(model.params());
        } else if (t > p_steps && (t - p_steps) % m == 0) {
          buffer.record(model.params());
          if ((t - p_steps) % window == 0) {
            obs.before_refine(round, buffer, model.params(), partition);
            RefineOptions opts;
            opts.batch_size = c.wot.holdout_batch_size;
            opts.regenerate_per_step = c.wot.regenerate_per_step;
            opts.objective = holdout_objective;
            opts.seed = derive_key(c.seed, 0x2ef1);
            opts.round = round;
            RefineResult rr = refine(model, buffer, alpha_state, partition, data.holdout, opts);
            const RefineEvent ev{round, epoch + 1, t, rr.alpha.mean()};
            result.rounds.push_back(ev);
            epoch_alpha.push_back(ev.mean_alpha);
            result.alpha_trace.insert(result.alpha_trace.end(), rr.trace.begin(), rr.trace.end());
            obs.after_refine(ev, rr);
            if (c.wot.reset_momentum_on_refine) std::fill(velocity.begin(), velocity.end(), 0.0f);
            ++round;
          }
        }
      }
      obs.after_step(t, model.params());
      if (c.baseline.kind == BaselineKind::Ema) averager.ema_update(model.params(), c.baseline.ema_decay);
    }
    if (c.baseline.kind == BaselineKind::Swa && epoch >= swa_start) averager.swa_update(model.params());

    Model deployed = model;
    if (c.baseline.kind != BaselineKind::None && !averager.empty()) deployed.set_params(averager.average());

    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.step = t;
    rec.lr = lr;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.clean_train_acc = clean_accuracy(deployed, train_eval, c.eval.batch_size);
    rec.robust_val_acc = robust_accuracy(deployed, data.validation, c.eval.validation_attack, val_seed, c.eval.batch_size);
    if (c.eval.per_epoch_test || epoch + 1 == c.epochs) {
      rec.clean_test_acc = clean_accuracy(deployed, data.test, c.eval.batch_size);
      rec.robust_test_acc = robust_accuracy(deployed, data.test, c.eval.validation_attack, test_seed, c.eval.batch_size);
    }
    if (c.wot.enabled && !epoch_alpha.empty()) {
      rec.mean_alpha = std::accumulate(epoch_alpha.begin(), epoch_alpha.end(), 0.0) / static_cast<double>(epoch_alpha.size());
    }
    tracker.update(epoch + 1, rec.robust_val_acc, deployed.params());
    result.metrics.push_back(rec);
    obs.on_epoch(rec);

    if (epoch + 1 == c.epochs) result.final_weights = deployed.params();
  }

  result.raw_weights = model.params();
  result.best_weights = tracker.best();
  result.best_epoch = tracker.best_epoch();
  result.best_val_acc = tracker.best_accuracy();
  result.final_val_acc = tracker.final_accuracy();

  if (!c.output_dir.empty()) {
    const std::filesystem::path dir(c.output_dir);
    std::filesystem::create_directories(dir);
    write_metrics_csv(result.metrics, dir / "metrics.csv");
    if (c.wot.enabled) write_alpha_trace_csv(result.alpha_trace, dir / "alpha_trace.csv");
    save_checkpoint(dir / "final.wotc", result.final_weights, CheckpointMeta{c.model, c.seed, c.epochs, "final"});
    save_checkpoint(dir / "best.wotc", result.best_weights, CheckpointMeta{c.model, c.seed, result.best_epoch, "best"});
    std::ofstream(dir / "config.json") << serialize_config(c);
  }
  return result;
}

}  // namespace wotlab
