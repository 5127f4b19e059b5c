#include "wotlab/baselines.hpp"

#include "wotlab/errors.hpp"

namespace wotlab {

void WeightAverager::check(const ParamVector& w) {
  if (count_ == 0) {
    layout_ = w.layout();
    avg_.assign(w.size(), 0.0);
    return;
  }
  if (w.layout() != layout_) throw ContractError("weight averager: layout mismatch");
}

void WeightAverager::swa_update(const ParamVector& w) {
  check(w);
  const double inv = 1.0 / static_cast<double>(count_ + 1);
  for (std::size_t i = 0; i < avg_.size(); ++i) avg_[i] += (static_cast<double>(w[i]) - avg_[i]) * inv;
  ++count_;
}

void WeightAverager::ema_update(const ParamVector& w, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema decay must lie in [0, 1)");
  check(w);
  if (count_ == 0) {
    for (std::size_t i = 0; i < avg_.size(); ++i) avg_[i] = w[i];
  } else {
    for (std::size_t i = 0; i < avg_.size(); ++i) avg_[i] = decay * avg_[i] + (1.0 - decay) * static_cast<double>(w[i]);
  }
  ++count_;
}

ParamVector WeightAverager::average() const {
  if (count_ == 0) throw StateError("weight averager has no updates");
  std::vector<float> v(avg_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(avg_[i]);
  return ParamVector(layout_, std::move(v));
}

}  // namespace wotlab
