#include "wotlab/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "json.hpp"
#include "wotlab/errors.hpp"

namespace wotlab {

namespace {

using json = nlohmann::ordered_json;

constexpr std::array<char, 4> kMagic{'W', 'O', 'T', 'C'};

template <class T>
void put_le(std::vector<char>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xffu));
}

template <class T>
T get_le(const std::vector<char>& in, std::size_t& pos, const char* what) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

json spec_json(const ModelSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"hidden", s.hidden},
              {"channels", s.channels},
              {"input_shape", s.input_shape},
              {"classes", s.classes}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.kind = parse_model_kind(j.at("kind").get<std::string>());
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.channels = j.at("channels").get<std::vector<std::size_t>>();
  s.input_shape = j.at("input_shape").get<Shape>();
  s.classes = j.at("classes").get<std::size_t>();
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamVector& weights, const CheckpointMeta& meta) {
  const ParamLayout expected = make_layout(meta.spec);
  if (expected != weights.layout()) throw CheckpointError("weights do not match the layout of the model spec");

  json layout = json::array();
  for (const auto& e : weights.layout()) {
    layout.push_back(json{{"name", e.name}, {"offset", e.offset}, {"length", e.length}, {"shape", e.shape}});
  }
  const std::string text = json{{"spec", spec_json(meta.spec)},
                                {"seed", meta.seed},
                                {"epoch", meta.epoch},
                                {"tag", meta.tag},
                                {"layout", layout}}
                               .dump();

  std::vector<char> out(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_le<std::uint64_t>(out, weights.size());
  for (float v : weights.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<char> in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (in.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), in.begin())) {
    throw CheckpointError(path.string() + ": bad magic, not a WOTC checkpoint");
  }
  std::size_t pos = kMagic.size();
  const auto version = get_le<std::uint32_t>(in, pos, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta_len = get_le<std::uint32_t>(in, pos, "metadata length");
  if (pos + meta_len > in.size()) throw CheckpointError(path.string() + ": checkpoint truncated in metadata");
  const std::string text(in.begin() + static_cast<std::ptrdiff_t>(pos),
                         in.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
  pos += meta_len;

  Checkpoint ck;
  json meta;
  try {
    meta = json::parse(text);
    ck.meta.spec = spec_from_json(meta.at("spec"));
    ck.meta.seed = meta.at("seed").get<std::uint64_t>();
    ck.meta.epoch = meta.at("epoch").get<std::size_t>();
    ck.meta.tag = meta.at("tag").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": malformed model spec: " + e.what());
  }

  ParamLayout layout;
  try {
    layout = make_layout(ck.meta.spec);
  } catch (const Error& e) {
    throw CheckpointError(path.string() + ": stored model spec is invalid: " + e.what());
  }
  std::size_t expected = 0;
  for (const auto& e : layout) expected += e.length;

  const auto count = get_le<std::uint64_t>(in, pos, "parameter count");
  if (count != expected) {
    throw CheckpointError(path.string() + ": parameter count " + std::to_string(count) + " does not match layout (" +
                          std::to_string(expected) + ")");
  }
  const auto& table = meta.contains("layout") ? meta.at("layout") : json::array();
  if (table.size() != layout.size()) throw CheckpointError(path.string() + ": layout table does not match model spec");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (table[i].value("name", std::string()) != layout[i].name || table[i].value("length", std::size_t{0}) != layout[i].length) {
      throw CheckpointError(path.string() + ": layout entry " + std::to_string(i) + " does not match model spec");
    }
  }
  if (in.size() - pos != count * 4) {
    throw CheckpointError(path.string() + ": expected " + std::to_string(count * 4) + " bytes of weights, found " +
                          std::to_string(in.size() - pos));
  }
  std::vector<float> values(count);
  for (auto& v : values) v = std::bit_cast<float>(get_le<std::uint32_t>(in, pos, "weights"));
  ck.weights = ParamVector(std::move(layout), std::move(values));
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  Checkpoint ck = load_checkpoint(path);
  if (make_layout(spec) != ck.weights.layout()) {
    throw CheckpointError(path.string() + ": checkpoint layout does not match the configured model");
  }
  return ck;
}

}  // namespace wotlab
