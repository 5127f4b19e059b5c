#include "wotlab/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"

namespace wotlab {

Dataset::Dataset(std::string name, Shape sample_shape, std::vector<float> pixels, std::vector<int> labels,
                 std::size_t classes)
    : name_(std::move(name)),
      sample_shape_(std::move(sample_shape)),
      sample_size_(shape_size(sample_shape_)),
      pixels_(std::move(pixels)),
      labels_(std::move(labels)),
      classes_(classes) {
  if (pixels_.size() != labels_.size() * sample_size_) {
    throw DataError("dataset '" + name_ + "': " + std::to_string(pixels_.size()) + " pixels for " +
                    std::to_string(labels_.size()) + " samples of " + shape_str(sample_shape_));
  }
  for (float p : pixels_) {
    if (!(p >= 0.0f && p <= 1.0f)) throw DataError("dataset '" + name_ + "': pixel outside [0,1]");
  }
  for (int y : labels_) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes_) {
      throw DataError("dataset '" + name_ + "': label " + std::to_string(y) + " outside [0," +
                      std::to_string(classes_) + ")");
    }
  }
}

std::span<const float> Dataset::sample(std::size_t i) const {
  if (i >= size()) throw IndexError("sample index " + std::to_string(i) + " out of range");
  return std::span<const float>(pixels_).subspan(i * sample_size_, sample_size_);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  std::vector<float> data;
  data.reserve(indices.size() * sample_size_);
  for (auto i : indices) {
    auto s = sample(i);
    data.insert(data.end(), s.begin(), s.end());
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_.at(i));
  return out;
}

Tensor Dataset::range(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw IndexError("dataset range out of bounds");
  Shape shape{end - begin};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  return Tensor(std::move(shape), std::vector<float>(pixels_.begin() + static_cast<std::ptrdiff_t>(begin * sample_size_),
                                                     pixels_.begin() + static_cast<std::ptrdiff_t>(end * sample_size_)));
}

std::vector<int> Dataset::range_labels(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw IndexError("dataset range out of bounds");
  return std::vector<int>(labels_.begin() + static_cast<std::ptrdiff_t>(begin),
                          labels_.begin() + static_cast<std::ptrdiff_t>(end));
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string name) const {
  std::vector<float> px;
  px.reserve(indices.size() * sample_size_);
  for (auto i : indices) {
    auto s = sample(i);
    px.insert(px.end(), s.begin(), s.end());
  }
  return Dataset(std::move(name), sample_shape_, std::move(px), batch_labels(indices), classes_);
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > buf.size()) throw DataError("'" + path.string() + "': truncated header");
  return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) | (std::uint32_t{buf[at + 2]} << 8) |
         std::uint32_t{buf[at + 3]};
}

std::string hex32(std::uint32_t v) {
  char s[11];
  std::snprintf(s, sizeof s, "0x%08x", v);
  return s;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::string name) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != 0x00000803u) {
    throw DataError("'" + images.string() + "': bad image magic " + hex32(img_magic) + ", expected 0x00000803");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != 0x00000801u) {
    throw DataError("'" + labels.string() + "': bad label magic " + hex32(lab_magic) + ", expected 0x00000801");
  }
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_labels = read_be32(lab, 4, labels);
  if (n != n_labels) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  const std::size_t pixels = n * rows * cols;
  if (img.size() != 16 + pixels) {
    throw DataError("'" + images.string() + "': expected " + std::to_string(16 + pixels) + " bytes, found " +
                    std::to_string(img.size()));
  }
  if (lab.size() != 8 + n) {
    throw DataError("'" + labels.string() + "': expected " + std::to_string(8 + n) + " bytes, found " +
                    std::to_string(lab.size()));
  }
  std::vector<float> px(pixels);
  for (std::size_t i = 0; i < pixels; ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<int> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = lab[8 + i];
    if (ys[i] >= 10) throw DataError("'" + labels.string() + "': label " + std::to_string(ys[i]) + " >= 10");
  }
  return Dataset(std::move(name), {1, rows, cols}, std::move(px), std::move(ys), 10);
}

Dataset load_cifar_binary(std::span<const std::filesystem::path> files, std::string name) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<float> px;
  std::vector<int> ys;
  for (const auto& path : files) {
    const auto buf = read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0) {
      throw DataError("'" + path.string() + "': length " + std::to_string(buf.size()) +
                      " is not a positive multiple of 3073");
    }
    const std::size_t n = buf.size() / kRecord;
    px.reserve(px.size() + n * kPixels);
    for (std::size_t r = 0; r < n; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      if (rec[0] >= 10) {
        throw DataError("'" + path.string() + "': record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]));
      }
      ys.push_back(rec[0]);
      for (std::size_t i = 0; i < kPixels; ++i) px.push_back(static_cast<float>(rec[1 + i]) / 255.0f);
    }
  }
  if (ys.empty()) throw DataError("no CIFAR-10 batch files given");
  return Dataset(std::move(name), {3, 32, 32}, std::move(px), std::move(ys), 10);
}

Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, Shape sample_shape,
                    double spread) {
  if (classes < 2) throw ConfigError("synth_blobs: classes must be >= 2");
  const std::size_t dim = shape_size(sample_shape);
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
  for (std::size_t c = 0; c < classes; ++c) {
    CounterRng rng(derive_key(0x5eed'b10b'5ULL + dim, c));
    for (auto& v : centers[c]) v = rng.uniform(0.2, 0.8);
  }
  CounterRng noise(derive_key(seed, 0xb10b5));
  std::vector<float> px;
  std::vector<int> ys;
  px.reserve(classes * n_per_class * dim);
  // Classes interleaved so any prefix is roughly balanced.
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = centers[c][d] + spread * noise.normal();
        px.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
      ys.push_back(static_cast<int>(c));
    }
  }
  return Dataset("blobs", std::move(sample_shape), std::move(px), std::move(ys), classes);
}

Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, std::size_t dim,
                    double spread) {
  return synth_blobs(seed, n_per_class, classes, Shape{dim}, spread);
}

std::string to_string(HoldoutSource source) { return source == HoldoutSource::Unseen ? "unseen" : "seen"; }

HoldoutSource parse_holdout_source(const std::string& s) {
  if (s == "unseen") return HoldoutSource::Unseen;
  if (s == "seen") return HoldoutSource::Seen;
  throw ConfigError("split.source: expected 'unseen' or 'seen', got '" + s + "'");
}

Split holdout_split(const Dataset& dataset, const SplitSpec& spec) {
  if (spec.holdout_size >= dataset.size()) {
    throw ConfigError("holdout_size " + std::to_string(spec.holdout_size) + " must be smaller than dataset size " +
                      std::to_string(dataset.size()));
  }
  CounterRng rng(derive_key(spec.seed, 0x5b117));
  const auto perm = permutation(dataset.size(), rng);
  Split out;
  out.holdout_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spec.holdout_size));
  if (spec.source == HoldoutSource::Unseen) {
    out.train_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(spec.holdout_size), perm.end());
  } else {
    out.train_indices.resize(dataset.size());
    std::iota(out.train_indices.begin(), out.train_indices.end(), std::size_t{0});
  }
  std::sort(out.train_indices.begin(), out.train_indices.end());
  std::sort(out.holdout_indices.begin(), out.holdout_indices.end());
  out.train = dataset.subset(out.train_indices, dataset.name() + "/train");
  out.holdout = dataset.subset(out.holdout_indices, dataset.name() + "/holdout");
  return out;
}

namespace {

template <class T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("'" + path.string() + "': truncated cache");
  return v;
}

}  // namespace

void save_cache(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write("WOTD", 4);
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.name().size()));
  out.write(dataset.name().data(), static_cast<std::streamsize>(dataset.name().size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.sample_shape().size()));
  for (auto d : dataset.sample_shape()) put<std::uint64_t>(out, d);
  put<std::uint64_t>(out, dataset.size());
  put<std::uint64_t>(out, dataset.classes());
  out.write(reinterpret_cast<const char*>(dataset.pixels().data()),
            static_cast<std::streamsize>(dataset.pixels().size() * sizeof(float)));
  for (int y : dataset.labels()) put<std::int32_t>(out, y);
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Dataset load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "WOTD", 4) != 0) throw DataError("'" + path.string() + "': bad magic");
  if (get<std::uint32_t>(in, path) != 1) throw DataError("'" + path.string() + "': unsupported cache version");
  std::string name(get<std::uint32_t>(in, path), '\0');
  if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw DataError("truncated cache");
  Shape shape(get<std::uint32_t>(in, path));
  for (auto& d : shape) d = get<std::uint64_t>(in, path);
  const auto n = get<std::uint64_t>(in, path);
  const auto classes = get<std::uint64_t>(in, path);
  std::vector<float> px(n * shape_size(shape));
  if (!in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size() * sizeof(float)))) {
    throw DataError("'" + path.string() + "': truncated cache");
  }
  std::vector<int> ys(n);
  for (auto& y : ys) y = get<std::int32_t>(in, path);
  return Dataset(std::move(name), std::move(shape), std::move(px), std::move(ys), classes);
}

}  // namespace wotlab
