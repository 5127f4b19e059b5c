#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "wotlab/attacks.hpp"
#include "wotlab/config.hpp"
#include "wotlab/data.hpp"
#include "wotlab/models.hpp"

namespace wotlab {

struct EvalRow {
  std::string label;  // e.g. "clean", "fgsm-linf-eps0.0314", "pgd20-linf-eps0.0314"
  std::optional<AttackConfig> attack;
  double accuracy = 0.0;
};

struct EvalReport {
  std::size_t samples = 0;
  std::vector<EvalRow> rows;  // clean first, then one row per configured attack

  double clean_accuracy() const { return rows.front().accuracy; }
};

std::string attack_label(const AttackConfig& attack);

// Clean accuracy plus robust accuracy for every attack in config.eval.attacks
// on `data`. Attack i uses seed derive_key(config.seed, 0xe7a1 + i).
EvalReport eval_suite(const Model& model, const Dataset& data, const TrainConfig& config);

// Loads the checkpoint (layout checked against config.model) and the
// configured test set.
EvalReport eval_suite(const std::filesystem::path& checkpoint, const TrainConfig& config);

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
void print_report(const EvalReport& report, std::ostream& out);

struct SweepRow {
  std::string value;
  double best_val_acc = 0.0;
  double final_val_acc = 0.0;
  double final_test_robust_acc = 0.0;
  double final_test_clean_acc = 0.0;
  std::size_t refine_rounds = 0;
};

// One training run per value of the dotted `param`; each run writes into
// <output_dir>/<param>=<value> when output_dir is set.
std::vector<SweepRow> run_sweep(const TrainConfig& config, const std::string& param,
                                const std::vector<std::string>& values);

void write_sweep_csv(const std::string& param, const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace wotlab
