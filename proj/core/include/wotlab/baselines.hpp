#pragma once

#include <cstddef>
#include <optional>

#include "wotlab/tensor.hpp"

namespace wotlab {

// Running weight average. SWA keeps an arithmetic mean (count-based); EMA a
// decayed mean. Averages accumulate in double and are rounded on read.
class WeightAverager {
 public:
  WeightAverager() = default;

  // avg <- avg + (w - avg) / (count + 1)
  void swa_update(const ParamVector& w);
  // avg <- decay * avg + (1 - decay) * w; the first update copies w.
  void ema_update(const ParamVector& w, double decay);

  bool empty() const noexcept { return count_ == 0; }
  std::size_t count() const noexcept { return count_; }
  ParamVector average() const;

 private:
  void check(const ParamVector& w);

  ParamLayout layout_;
  std::vector<double> avg_;
  std::size_t count_ = 0;
};

// Keeps the epoch with the highest validation robust accuracy; ties keep the
// earlier epoch.
template <class Checkpoint>
class BestTracker {
 public:
  void update(std::size_t epoch, double robust_acc, const Checkpoint& checkpoint) {
    if (!best_epoch_ || robust_acc > best_acc_) {
      best_epoch_ = epoch;
      best_acc_ = robust_acc;
      best_ = checkpoint;
    }
    final_epoch_ = epoch;
    final_acc_ = robust_acc;
  }

  bool empty() const noexcept { return !best_epoch_.has_value(); }
  std::size_t best_epoch() const { return best_epoch_.value(); }
  double best_accuracy() const noexcept { return best_acc_; }
  const Checkpoint& best() const { return best_.value(); }
  std::size_t final_epoch() const noexcept { return final_epoch_; }
  double final_accuracy() const noexcept { return final_acc_; }
  // Final minus best accuracy; <= 0 by construction, 0 without overfitting.
  double diff() const noexcept { return final_acc_ - best_acc_; }

 private:
  std::optional<std::size_t> best_epoch_;
  double best_acc_ = 0.0;
  std::optional<Checkpoint> best_;
  std::size_t final_epoch_ = 0;
  double final_acc_ = 0.0;
};

}  // namespace wotlab
