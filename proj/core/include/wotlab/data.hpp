#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wotlab/tensor.hpp"

namespace wotlab {

// Labelled samples with pixels in [0, 1]. Immutable once built.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, Shape sample_shape, std::vector<float> pixels, std::vector<int> labels,
          std::size_t classes);

  const std::string& name() const noexcept { return name_; }
  const Shape& sample_shape() const noexcept { return sample_shape_; }
  std::size_t sample_size() const noexcept { return sample_size_; }
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t classes() const noexcept { return classes_; }

  std::span<const float> pixels() const noexcept { return pixels_; }
  std::span<const float> sample(std::size_t i) const;
  const std::vector<int>& labels() const noexcept { return labels_; }

  // N x sample_shape batch of the given rows.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  // Rows [begin, end).
  Tensor range(std::size_t begin, std::size_t end) const;
  std::vector<int> range_labels(std::size_t begin, std::size_t end) const;

  Dataset subset(std::span<const std::size_t> indices, std::string name) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::string name_;
  Shape sample_shape_;
  std::size_t sample_size_ = 0;
  std::vector<float> pixels_;
  std::vector<int> labels_;
  std::size_t classes_ = 0;
};

// Big-endian IDX pair: images magic 0x00000803, labels magic 0x00000801.
// Samples have shape 1 x rows x cols; classes = 10.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string name = "idx");

// CIFAR-10 binary batches: 3073-byte records (label byte + 3x32x32 planar).
Dataset load_cifar_binary(std::span<const std::filesystem::path> files, std::string name = "cifar10");

// Gaussian clusters around fixed per-class centers in [0.2, 0.8]^d, clipped to
// [0, 1]. Centers depend only on (class, sample_shape); noise on `seed`.
Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, Shape sample_shape,
                    double spread);
Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, std::size_t dim,
                    double spread);

enum class HoldoutSource { Unseen, Seen };

std::string to_string(HoldoutSource source);
HoldoutSource parse_holdout_source(const std::string& s);

struct SplitSpec {
  std::size_t holdout_size = 500;
  std::uint64_t seed = 0;
  HoldoutSource source = HoldoutSource::Unseen;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

struct Split {
  Dataset train;
  Dataset holdout;
  std::vector<std::size_t> train_indices;    // into the source dataset
  std::vector<std::size_t> holdout_indices;  // into the source dataset
};

// Unseen: disjoint, covering. Seen: holdout drawn from the full training set.
Split holdout_split(const Dataset& dataset, const SplitSpec& spec);

// Raw binary cache ("WOTD" + header + float pixels + int32 labels).
void save_cache(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_cache(const std::filesystem::path& path);

}  // namespace wotlab
