#include "wotlab/evaluation.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "wotlab/checkpoint.hpp"
#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"
#include "wotlab/training.hpp"

namespace wotlab {

std::string attack_label(const AttackConfig& a) {
  std::ostringstream os;
  if (a.steps == 1 && !a.random_start && a.step_size == a.epsilon) {
    os << "fgsm";
  } else {
    os << "pgd" << a.steps << (a.random_start ? "-rs" : "");
  }
  os << '-' << to_string(a.norm) << "-eps" << std::setprecision(4) << a.epsilon;
  return os.str();
}

EvalReport eval_suite(const Model& model, const Dataset& data, const TrainConfig& config) {
  if (data.empty()) throw DataError("evaluation set is empty");
  EvalReport report;
  report.samples = data.size();
  report.rows.push_back(EvalRow{"clean", std::nullopt, clean_accuracy(model, data, config.eval.batch_size)});
  for (std::size_t i = 0; i < config.eval.attacks.size(); ++i) {
    const auto& a = config.eval.attacks[i];
    const double acc = robust_accuracy(model, data, a, derive_key(config.seed, 0xe7a1 + i), config.eval.batch_size);
    report.rows.push_back(EvalRow{attack_label(a), a, acc});
  }
  return report;
}

EvalReport eval_suite(const std::filesystem::path& checkpoint, const TrainConfig& config) {
  const Checkpoint ck = load_checkpoint(checkpoint, config.model);
  const DataBundle data = load_data(config);
  return eval_suite(Model(config.model, ck.weights), data.test, config);
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << "attack,norm,epsilon,steps,step_size,random_start,accuracy\n";
  f << std::setprecision(10);
  for (const auto& r : report.rows) {
    if (r.attack) {
      f << r.label << ',' << to_string(r.attack->norm) << ',' << r.attack->epsilon << ',' << r.attack->steps << ','
        << r.attack->step_size << ',' << (r.attack->random_start ? 1 : 0) << ',' << r.accuracy << "\n";
    } else {
      f << r.label << ",,0,0,0,0," << r.accuracy << "\n";
    }
  }
}

void print_report(const EvalReport& report, std::ostream& out) {
  std::size_t width = 6;
  for (const auto& r : report.rows) width = std::max(width, r.label.size());
  out << std::left << std::setw(static_cast<int>(width)) << "attack" << "  accuracy   (" << report.samples
      << " samples)\n";
  out << std::string(width + 12, '-') << "\n";
  for (const auto& r : report.rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.label << "  " << std::right << std::fixed
        << std::setprecision(2) << std::setw(7) << 100.0 * r.accuracy << "%\n";
    out.unsetf(std::ios::fixed);
  }
}

std::vector<SweepRow> run_sweep(const TrainConfig& config, const std::string& param,
                                const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<TrainConfig> runs;
  for (const auto& v : values) {
    TrainConfig c = with_override(config, param, v);
    if (!config.output_dir.empty()) c.output_dir = (std::filesystem::path(config.output_dir) / (param + "=" + v)).string();
    runs.push_back(std::move(c));
  }
  const bool shared_data = param.rfind("dataset.", 0) != 0 && param.rfind("model.", 0) != 0;
  std::optional<DataBundle> data;
  if (shared_data) data = load_data(config);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const TrainResult r = shared_data ? run_training(runs[i], *data) : run_training(runs[i]);
    const auto& last = r.metrics.back();
    rows.push_back(SweepRow{values[i], r.best_val_acc, r.final_val_acc, last.robust_test_acc.value_or(0.0),
                            last.clean_test_acc.value_or(0.0), r.rounds.size()});
  }
  return rows;
}

void write_sweep_csv(const std::string& param, const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << param << ",best_val_acc,final_val_acc,final_test_robust_acc,final_test_clean_acc,refine_rounds\n";
  f << std::setprecision(10);
  for (const auto& r : rows) {
    f << r.value << ',' << r.best_val_acc << ',' << r.final_val_acc << ',' << r.final_test_robust_acc << ','
      << r.final_test_clean_acc << ',' << r.refine_rounds << "\n";
  }
}

}  // namespace wotlab
