#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wotlab/config.hpp"
#include "wotlab/data.hpp"
#include "wotlab/models.hpp"
#include "wotlab/trajectory.hpp"

namespace wotlab {

// The four disjoint roles a run's data plays.
struct DataBundle {
  Dataset train;
  Dataset holdout;     // WOT's alpha-fitting set
  Dataset validation;  // best-checkpoint selection
  Dataset test;
};

// Loads the configured source files, draws the training subset and the
// validation set from the training file, splits off the holdout and reshapes
// samples to the model's input shape. Throws DataError for unreadable data and
// ConfigError when the data cannot feed the configured model.
DataBundle load_data(const TrainConfig& config);

struct MetricsRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;
  double clean_train_acc = 0.0;
  std::optional<double> clean_test_acc;
  double robust_val_acc = 0.0;
  std::optional<double> robust_test_acc;
  double train_loss = 0.0;
  std::optional<double> mean_alpha;
  double lr = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,clean_train_acc,clean_test_acc,robust_val_acc,robust_test_acc,train_loss,mean_alpha,lr";

struct RefineEvent {
  std::size_t round = 0;
  std::size_t epoch = 0;  // 1-based epoch the round ran in
  std::size_t step = 0;   // optimizer step t at which it ran
  double mean_alpha = 0.0;
};

// Hooks into a run; all default to no-ops.
class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  virtual void on_step(std::size_t /*step*/, double /*loss*/) {}
  // Weights after step `step` is complete, refinement included.
  virtual void after_step(std::size_t /*step*/, const ParamVector& /*weights*/) {}
  // Called with the full buffer and the current weights right before refine.
  virtual void before_refine(std::size_t /*round*/, const TrajectoryBuffer& /*buffer*/,
                             const ParamVector& /*current*/, const BlockPartition& /*partition*/) {}
  virtual void after_refine(const RefineEvent& /*event*/, const RefineResult& /*result*/) {}
  virtual void on_epoch(const MetricsRecord& /*record*/) {}
};

struct TrainResult {
  ModelSpec spec;
  ParamVector final_weights;  // the deployed model (averaged when a baseline is set)
  ParamVector raw_weights;    // the optimizer's own weights
  ParamVector best_weights;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  double final_val_acc = 0.0;
  std::vector<MetricsRecord> metrics;
  std::vector<AlphaTraceRow> alpha_trace;
  std::vector<RefineEvent> rounds;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  std::size_t wot_start_step = 0;
  std::size_t nan_losses = 0;

  double diff() const noexcept { return final_val_acc - best_val_acc; }
};

// Runs the configured training. With a non-empty output_dir it writes
// metrics.csv, alpha_trace.csv (WOT runs), final.wotc, best.wotc and
// config.json there.
TrainResult run_training(const TrainConfig& config, TrainObserver* observer = nullptr);
TrainResult run_training(const TrainConfig& config, const DataBundle& data, TrainObserver* observer = nullptr);

void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::filesystem::path& path);
void write_alpha_trace_csv(const std::vector<AlphaTraceRow>& trace, const std::filesystem::path& path);

// Learning rate in effect during the 0-based epoch.
double learning_rate(const TrainConfig& config, std::size_t epoch);

}  // namespace wotlab
