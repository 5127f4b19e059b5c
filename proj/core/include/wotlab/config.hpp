#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wotlab/attacks.hpp"
#include "wotlab/data.hpp"
#include "wotlab/losses.hpp"
#include "wotlab/models.hpp"

namespace wotlab {

enum class DatasetFormat { Idx, Cifar, Blobs };

std::string to_string(DatasetFormat format);

struct DatasetConfig {
  std::string name = "blobs";
  DatasetFormat format = DatasetFormat::Blobs;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar
  std::vector<std::string> train_files, test_files;
  // blobs
  std::size_t blobs_per_class = 200;
  std::size_t blobs_classes = 3;
  std::vector<std::size_t> blobs_shape{16};
  double blobs_spread = 0.15;

  // Samples drawn (seeded) from the training file for train + holdout; 0 = all.
  std::size_t train_subset = 0;
  // Disjoint validation samples drawn from the rest of the training file.
  std::size_t validation_size = 0;
  // Leading test samples used; 0 = all.
  std::size_t test_subset = 0;
  SplitSpec split{};

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Epoch fractions at which lr is multiplied by decay_factor.
  std::vector<double> decay_at{0.5, 0.75};
  double decay_factor = 0.1;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct WotConfig {
  bool enabled = false;
  WotMode mode = WotMode::Blockwise;
  std::size_t m = 400;
  std::size_t k = 4;
  // WOT start epoch p; unset means the first lr decay epoch.
  std::optional<std::size_t> start_epoch;
  double alpha_lr = 0.01;
  double alpha_gamma = 0.9;
  std::size_t alpha_steps = 10;
  std::size_t holdout_batch_size = 128;
  AttackConfig holdout_attack{};
  bool regenerate_per_step = true;
  bool reset_momentum_on_refine = false;

  friend bool operator==(const WotConfig&, const WotConfig&) = default;
};

enum class BaselineKind { None, Swa, Ema };

std::string to_string(BaselineKind kind);

struct BaselineConfig {
  BaselineKind kind = BaselineKind::None;
  double ema_decay = 0.999;
  // SWA start epoch; unset means the first lr decay epoch.
  std::optional<std::size_t> swa_start_epoch;

  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

struct EvalConfig {
  // Per-epoch robust accuracy (validation and test) uses this attack; the
  // validation number drives best-checkpoint selection.
  AttackConfig validation_attack{};
  // Test-set attacks reported by eval_suite. Default: FGSM, PGD-20, PGD-100.
  std::vector<AttackConfig> attacks{fgsm_config(8.0f / 255.0f), pgd_config(8.0f / 255.0f, 20, false),
                                    pgd_config(8.0f / 255.0f, 100, false)};
  // Per-epoch test metrics; off keeps long runs cheap.
  bool per_epoch_test = true;
  // Training-set samples used for clean_train_acc.
  std::size_t train_eval_size = 1000;
  std::size_t batch_size = 256;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  DatasetConfig dataset{};
  ModelSpec model{};
  Objective loss{};  // loss kind, beta, lambda and the training attack
  OptimizerConfig optimizer{};
  WotConfig wot{};
  BaselineConfig baseline{};
  EvalConfig eval{};
  std::string output_dir;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Parses JSON text. Missing keys take defaults; unknown keys and type
// mismatches raise ConfigError naming the key path.
TrainConfig parse_config_text(const std::string& text);
TrainConfig parse_config(const std::filesystem::path& path);

// Full JSON rendering (every key, defaults included).
std::string serialize_config(const TrainConfig& config);

// Semantic checks that need the whole config (e.g. m * k fits after p).
void validate(const TrainConfig& config);

// Sets a dotted key (e.g. "wot.m") from a JSON-literal or bare string value.
TrainConfig with_override(const TrainConfig& config, const std::string& dotted_key, const std::string& value);

// Epoch index of the first lr decay.
std::size_t first_decay_epoch(const TrainConfig& config);
std::size_t wot_start_epoch(const TrainConfig& config);

}  // namespace wotlab
