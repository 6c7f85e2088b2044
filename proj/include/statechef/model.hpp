#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "statechef/digest.hpp"
#include "statechef/errors.hpp"
#include "statechef/image.hpp"
#include "statechef/io.hpp"
#include "statechef/matrix.hpp"
#include "statechef/nn/layers.hpp"
#include "statechef/nn/tensor.hpp"
#include "statechef/rng.hpp"

namespace statechef {

inline constexpr std::string_view kProductionProvider = "production-pretrained";
inline constexpr std::string_view kTinyProvider = "tiny-random-test";

/// Pretrained residual feature extractor, cut after `truncation` ReLU
/// activations counted from the input.
struct BackboneSpec {
  std::string family = "resnet50";
  int truncation = 46;
  bool pretrained = false;
  std::string provider = std::string(kProductionProvider);
  std::string weights_path;  // production weights archive; empty = $STATECHEF_DATA_DIR/weights/resnet50.sckpt
  int tiny_channels = 4;     // tiny-random-test only
  int tiny_blocks = 2;

  bool operator==(const BackboneSpec&) const = default;
};

/// Layers added on top of the backbone: 1×1 conv, two k×k convs, global
/// average pooling and a softmax layer of `class_count` units.
struct HeadSpec {
  int pointwise_channels = 512;
  int conv_channels = 512;
  int kernel = 3;
  int class_count = 11;

  void validate() const {
    if (class_count < 2) throw DataError("head: class_count must be at least 2, got " + std::to_string(class_count));
    if (pointwise_channels < 1 || conv_channels < 1) throw DataError("head: channel counts must be at least 1");
    if (kernel < 1 || kernel % 2 == 0) throw DataError("head: kernel must be a positive odd size");
  }

  bool operator==(const HeadSpec&) const = default;
};

struct ModelSpec {
  BackboneSpec backbone;
  HeadSpec head;
  int input_size = 224;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;  // optional; size must equal class_count when present
  std::array<float, 3> mean = {0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev = {0.229f, 0.224f, 0.225f};

  bool operator==(const ModelSpec&) const = default;

  /// Small randomly initialized model used by tests and desk-scale runs.
  static ModelSpec tiny(int class_count = 11, std::uint64_t seed = 0) {
    ModelSpec s;
    s.backbone.provider = std::string(kTinyProvider);
    s.backbone.family = "resnet-tiny";
    s.backbone.truncation = 7;
    s.head = HeadSpec{8, 8, 3, class_count};
    s.input_size = 32;
    s.seed = seed;
    s.mean = {0.5f, 0.5f, 0.5f};
    s.stddev = {0.25f, 0.25f, 0.25f};
    return s;
  }
};

// ---------------------------------------------------------------- topology

struct StageTopology {
  int mid = 0;
  int out = 0;
  int blocks = 0;
  int stride = 1;
};

struct ResidualTopology {
  int stem_channels = 64;
  int stem_kernel = 7;
  int stem_stride = 2;
  bool stem_pool = true;
  std::vector<StageTopology> stages;

  int block_count() const {
    int n = 0;
    for (const auto& s : stages) n += s.blocks;
    return n;
  }
  int activation_count() const { return 1 + 3 * block_count(); }
};

inline ResidualTopology topology_for(const BackboneSpec& b) {
  if (b.provider == kProductionProvider) {
    if (b.family != "resnet50") throw DataError("backbone: unsupported family '" + b.family + "'");
    return ResidualTopology{64, 7, 2, true, {{64, 256, 3, 1}, {128, 512, 4, 2}, {256, 1024, 6, 2}, {512, 2048, 3, 2}}};
  }
  if (b.provider == kTinyProvider) {
    if (b.tiny_channels < 1 || b.tiny_blocks < 1) throw DataError("backbone: tiny channels/blocks must be positive");
    ResidualTopology t{b.tiny_channels, 3, 1, false, {}};
    for (int i = 0; i < b.tiny_blocks; ++i) t.stages.push_back({b.tiny_channels, b.tiny_channels, 1, i == 0 ? 1 : 2});
    return t;
  }
  throw DataError("backbone: unknown provider '" + b.provider + "'");
}

/// Where a truncation index lands in the topology.
struct CutPoint {
  int activation = 0;
  int total_activations = 0;
  int full_blocks = 0;       // complete residual blocks kept
  int partial_depth = 0;     // ReLUs kept from the next block (0 = none)
  int output_channels = 0;
  std::string description;
};

inline CutPoint locate_cut(const BackboneSpec& b) {
  const ResidualTopology topo = topology_for(b);
  CutPoint cut;
  cut.activation = b.truncation;
  cut.total_activations = topo.activation_count();
  if (b.truncation < 1 || b.truncation > cut.total_activations)
    throw DataError("backbone: truncation " + std::to_string(b.truncation) + " out of range 1.." +
                    std::to_string(cut.total_activations));
  if (b.truncation == 1) {
    cut.output_channels = topo.stem_channels;
    cut.description = "stem";
    return cut;
  }
  const int r = b.truncation - 1;
  cut.full_blocks = r / 3;
  cut.partial_depth = r % 3;
  // Locate the block that holds the last kept activation.
  const int last_block = cut.partial_depth == 0 ? cut.full_blocks - 1 : cut.full_blocks;
  int seen = 0;
  for (std::size_t s = 0; s < topo.stages.size(); ++s) {
    const auto& st = topo.stages[s];
    if (last_block < seen + st.blocks) {
      const int within = last_block - seen;
      cut.output_channels = cut.partial_depth == 0 ? st.out : st.mid;
      cut.description = "stage" + std::to_string(s + 1) + ".block" + std::to_string(within + 1) +
                        (cut.partial_depth == 0 ? std::string(" (block output)")
                                                : " (after unit " + std::to_string(cut.partial_depth) + ")");
      break;
    }
    seen += st.blocks;
  }
  return cut;
}

/// Closed-form learnable-parameter count (weights, biases, batch-norm scale
/// and shift; running statistics excluded).
inline std::size_t count_parameters(const ModelSpec& spec) {
  spec.head.validate();
  const ResidualTopology topo = topology_for(spec.backbone);
  const CutPoint cut = locate_cut(spec.backbone);
  auto conv_bn = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + 2 * out; };
  std::size_t total = conv_bn(3, static_cast<std::size_t>(topo.stem_channels), static_cast<std::size_t>(topo.stem_kernel));
  std::size_t in = static_cast<std::size_t>(topo.stem_channels);
  int block = 0;
  for (const auto& st : topo.stages) {
    for (int i = 0; i < st.blocks; ++i, ++block) {
      if (block > cut.full_blocks || (block == cut.full_blocks && cut.partial_depth == 0)) break;
      const auto mid = static_cast<std::size_t>(st.mid), out = static_cast<std::size_t>(st.out);
      const int depth = block < cut.full_blocks ? 3 : cut.partial_depth;
      const int stride = i == 0 ? st.stride : 1;
      total += conv_bn(in, mid, 1);
      if (depth >= 2) total += conv_bn(mid, mid, 3);
      if (depth == 3) {
        total += conv_bn(mid, out, 1);
        if (in != out || stride != 1) total += conv_bn(in, out, 1);
        in = out;
      }
    }
  }
  const auto c = static_cast<std::size_t>(cut.output_channels);
  const auto pw = static_cast<std::size_t>(spec.head.pointwise_channels);
  const auto cc = static_cast<std::size_t>(spec.head.conv_channels);
  const auto k = static_cast<std::size_t>(spec.head.kernel);
  total += conv_bn(c, pw, 1) + conv_bn(pw, cc, k) + conv_bn(cc, cc, k);
  total += cc * static_cast<std::size_t>(spec.head.class_count) + static_cast<std::size_t>(spec.head.class_count);
  return total;
}

// --------------------------------------------------------------------- JSON

inline json to_json(const ModelSpec& s) {
  return json{{"backbone",
               {{"family", s.backbone.family},
                {"truncation", s.backbone.truncation},
                {"pretrained", s.backbone.pretrained},
                {"provider", s.backbone.provider},
                {"weights_path", s.backbone.weights_path},
                {"tiny_channels", s.backbone.tiny_channels},
                {"tiny_blocks", s.backbone.tiny_blocks}}},
              {"head",
               {{"pointwise_channels", s.head.pointwise_channels},
                {"conv_channels", s.head.conv_channels},
                {"kernel", s.head.kernel},
                {"class_count", s.head.class_count}}},
              {"input_size", s.input_size},
              {"seed", s.seed},
              {"class_names", s.class_names},
              {"mean", s.mean},
              {"stddev", s.stddev}};
}

/// Reads a spec; absent fields keep their defaults.
inline ModelSpec model_spec_from_json(const json& j, ModelSpec s = {}) {
  try {
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      s.backbone.family = b.value("family", s.backbone.family);
      s.backbone.truncation = b.value("truncation", s.backbone.truncation);
      s.backbone.pretrained = b.value("pretrained", s.backbone.pretrained);
      s.backbone.provider = b.value("provider", s.backbone.provider);
      s.backbone.weights_path = b.value("weights_path", s.backbone.weights_path);
      s.backbone.tiny_channels = b.value("tiny_channels", s.backbone.tiny_channels);
      s.backbone.tiny_blocks = b.value("tiny_blocks", s.backbone.tiny_blocks);
    }
    if (j.contains("head")) {
      const auto& h = j.at("head");
      s.head.pointwise_channels = h.value("pointwise_channels", s.head.pointwise_channels);
      s.head.conv_channels = h.value("conv_channels", s.head.conv_channels);
      s.head.kernel = h.value("kernel", s.head.kernel);
      s.head.class_count = h.value("class_count", s.head.class_count);
    }
    s.input_size = j.value("input_size", s.input_size);
    s.seed = j.value("seed", s.seed);
    s.class_names = j.value("class_names", s.class_names);
    s.mean = j.value("mean", s.mean);
    s.stddev = j.value("stddev", s.stddev);
  } catch (const json::exception& e) {
    throw DataError(std::string("model spec: ") + e.what());
  }
  return s;
}

inline std::string spec_hash(const ModelSpec& s) { return sha256_hex(to_json(s).dump()); }

// -------------------------------------------------------------------- Model

/// Per-parameter content digests (values and shape).
struct ParameterDigest {
  std::map<std::string, std::string> tensors;

  bool operator==(const ParameterDigest&) const = default;
  const std::string& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw NotFoundError("no parameter named '" + name + "'");
    return it->second;
  }
};

template <typename T>
class Model {
 public:
  struct Unit {
    std::unique_ptr<nn::Layer<T>> layer;
    nn::ParamGroup group;
  };

  Model() = default;
  Model(ModelSpec spec, CutPoint cut, std::vector<Unit> units)
      : spec_(std::move(spec)), cut_(std::move(cut)), units_(std::move(units)) {
    tag_groups();
  }

  Model(const Model& other) : spec_(other.spec_), cut_(other.cut_) {
    for (const auto& u : other.units_) units_.push_back({u.layer->clone(), u.group});
  }
  Model& operator=(const Model& other) {
    if (this != &other) {
      Model tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const CutPoint& cut() const { return cut_; }
  int class_count() const { return spec_.head.class_count; }
  int input_size() const { return spec_.input_size; }

  std::vector<nn::Parameter<T>*> parameters() {
    std::vector<nn::Parameter<T>*> out;
    for (auto& u : units_) u.layer->visit(typename nn::Layer<T>::Visitor([&](nn::Parameter<T>& p) { out.push_back(&p); }));
    return out;
  }
  std::vector<const nn::Parameter<T>*> parameters() const {
    std::vector<const nn::Parameter<T>*> out;
    for (const auto& u : units_)
      std::as_const(*u.layer).visit(
          typename nn::Layer<T>::ConstVisitor([&](const nn::Parameter<T>& p) { out.push_back(&p); }));
    return out;
  }

  const nn::Parameter<T>& parameter(const std::string& name) const {
    for (const auto* p : parameters())
      if (p->name == name) return *p;
    throw NotFoundError("no parameter named '" + name + "'");
  }

  /// Learnable scalars (running statistics excluded).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters())
      if (p->learnable()) n += p->size();
    return n;
  }
  std::size_t buffer_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters())
      if (!p->learnable()) n += p->size();
    return n;
  }

  /// Logits, N×classes×1×1.
  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Pass<T> pass) const {
    nn::Tensor<T> h = x;
    for (const auto& u : units_) h = u.layer->forward(h, pass);
    return h;
  }

  /// Backpropagates dLoss/dLogits. Units below the lowest trainable unit are skipped.
  void backward(const nn::Tensor<T>& dlogits, const nn::Tape<T>& tape) {
    std::size_t lowest = units_.size();
    for (std::size_t i = 0; i < units_.size(); ++i) {
      bool trainable = false;
      std::as_const(*units_[i].layer)
          .visit(typename nn::Layer<T>::ConstVisitor([&](const nn::Parameter<T>& p) { trainable |= p.trainable(); }));
      if (trainable) {
        lowest = i;
        break;
      }
    }
    nn::Tensor<T> g = dlogits;
    for (std::size_t i = units_.size(); i-- > lowest;) g = units_[i].layer->backward(g, tape);
  }

  void commit_statistics(const nn::Tape<T>& tape) {
    for (auto& u : units_) u.layer->commit_statistics(tape);
  }

  nn::Tensor<T> to_tensor(std::span<const Image> batch) const {
    const int s = spec_.input_size;
    nn::Tensor<T> x(static_cast<int>(batch.size()), 3, s, s);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Image& img = batch[i];
      img.check_shape();
      if (img.height != s || img.width != s)
        throw DataError("input shape mismatch: image " + std::to_string(i) + " is " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + ", model expects " + std::to_string(s) + "x" + std::to_string(s));
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
          for (int xx = 0; xx < s; ++xx)
            x.at(static_cast<int>(i), c, y, xx) =
                static_cast<T>((img.at(y, xx, c) - spec_.mean[static_cast<std::size_t>(c)]) /
                               spec_.stddev[static_cast<std::size_t>(c)]);
    }
    return x;
  }

  /// Inference-mode class probabilities. Safe to call concurrently.
  ProbMatrix predict(std::span<const Image> batch) const {
    const auto n = batch.size();
    ProbMatrix out(n, static_cast<std::size_t>(class_count()));
    if (n == 0) return out;
    const nn::Tensor<T> logits = forward(to_tensor(batch), {});
    for (std::size_t i = 0; i < n; ++i) softmax_row(logits, i, out.row(i));
    return out;
  }

  static void softmax_row(const nn::Tensor<T>& logits, std::size_t i, std::span<double> out) {
    const auto c = static_cast<std::size_t>(logits.c());
    const T* z = logits.sample(static_cast<int>(i));
    double mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max<double>(mx, z[j]);
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += (out[j] = std::exp(static_cast<double>(z[j]) - mx));
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }

  /// Swaps the final softmax layer. Used by replace_head.
  void set_final_layer(std::unique_ptr<nn::Layer<T>> layer, int class_count, std::vector<std::string> class_names) {
    units_.back() = {std::move(layer), nn::ParamGroup::final_layer};
    spec_.head.class_count = class_count;
    spec_.class_names = std::move(class_names);
    tag_groups();
  }

 private:
  void tag_groups() {
    for (auto& u : units_) {
      const auto g = u.group;
      u.layer->visit(typename nn::Layer<T>::Visitor([g](nn::Parameter<T>& p) { p.group = g; }));
    }
  }

  ModelSpec spec_;
  CutPoint cut_;
  std::vector<Unit> units_;
};

namespace detail {

template <typename T>
std::unique_ptr<nn::Layer<T>> make_final_layer(int in, int classes, Rng& rng) {
  return std::make_unique<nn::Dense<T>>("final.dense", in, classes, rng);
}

}  // namespace detail

template <typename T>
void load_weights_archive(Model<T>& model, const std::filesystem::path& path, bool require_all);

/// Builds the classifier: truncated residual backbone, then 1×1 conv, two k×k
/// convs (each with batch norm and ReLU), global average pooling and a dense
/// softmax layer.
template <typename T = float>
Model<T> build_model(const ModelSpec& spec, bool load_pretrained = true) {
  spec.head.validate();
  if (spec.input_size < 1) throw DataError("model: input size must be positive");
  if (!spec.class_names.empty() && static_cast<int>(spec.class_names.size()) != spec.head.class_count)
    throw DataError("model: class_names has " + std::to_string(spec.class_names.size()) + " entries for " +
                    std::to_string(spec.head.class_count) + " classes");
  const ResidualTopology topo = topology_for(spec.backbone);
  const CutPoint cut = locate_cut(spec.backbone);
  using Unit = typename Model<T>::Unit;
  std::vector<Unit> units;
  Rng backbone_rng(derive_seed(spec.seed, 1));
  Rng head_rng(derive_seed(spec.seed, 2));
  Rng final_rng(derive_seed(spec.seed, 3));

  units.push_back({std::make_unique<nn::ConvBnRelu<T>>("backbone.stem", 3, topo.stem_channels, topo.stem_kernel,
                                                      topo.stem_stride, true, backbone_rng),
                   nn::ParamGroup::backbone});
  if (spec.backbone.truncation > 1) {
    if (topo.stem_pool) units.push_back({std::make_unique<nn::MaxPool2d<T>>(3, 2, 1), nn::ParamGroup::backbone});
    int in = topo.stem_channels;
    int block = 0;
    for (std::size_t s = 0; s < topo.stages.size(); ++s) {
      const auto& st = topo.stages[s];
      for (int i = 0; i < st.blocks; ++i, ++block) {
        if (block > cut.full_blocks || (block == cut.full_blocks && cut.partial_depth == 0)) break;
        const int depth = block < cut.full_blocks ? 3 : cut.partial_depth;
        const std::string name = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(i + 1);
        units.push_back({std::make_unique<nn::Bottleneck<T>>(name, in, st.mid, st.out, i == 0 ? st.stride : 1, depth,
                                                            backbone_rng),
                         nn::ParamGroup::backbone});
        if (depth == 3) in = st.out;
      }
    }
  }

  const auto& h = spec.head;
  units.push_back({std::make_unique<nn::ConvBnRelu<T>>("head.pointwise", cut.output_channels, h.pointwise_channels, 1, 1,
                                                      true, head_rng),
                   nn::ParamGroup::added});
  units.push_back({std::make_unique<nn::ConvBnRelu<T>>("head.conv1", h.pointwise_channels, h.conv_channels, h.kernel, 1,
                                                      true, head_rng),
                   nn::ParamGroup::added});
  units.push_back({std::make_unique<nn::ConvBnRelu<T>>("head.conv2", h.conv_channels, h.conv_channels, h.kernel, 1, true,
                                                      head_rng),
                   nn::ParamGroup::added});
  units.push_back({std::make_unique<nn::GlobalAvgPool<T>>(), nn::ParamGroup::added});
  units.push_back({detail::make_final_layer<T>(h.conv_channels, h.class_count, final_rng), nn::ParamGroup::final_layer});

  Model<T> model(spec, cut, std::move(units));
  if (spec.backbone.pretrained && load_pretrained) {
    if (spec.backbone.provider != kProductionProvider)
      throw DataError("backbone: provider '" + spec.backbone.provider + "' has no pretrained weights");
    std::filesystem::path weights = spec.backbone.weights_path;
    if (weights.empty()) {
      const char* root = std::getenv("STATECHEF_DATA_DIR");
      weights = std::filesystem::path(root ? root : ".") / "weights" / "resnet50.sckpt";
    }
    if (!std::filesystem::exists(weights))
      throw DataError("backbone: pretrained weights not found at '" + weights.string() + "'");
    load_weights_archive(model, weights, false);
  }
  return model;
}

/// Copy of `model` whose final softmax layer has `new_class_count` freshly
/// initialized units; every other parameter is carried over unchanged.
template <typename T>
Model<T> replace_head(const Model<T>& model, int new_class_count, std::uint64_t seed = 0,
                      std::vector<std::string> class_names = {}) {
  if (new_class_count < 2) throw DataError("replace_head: class count must be at least 2");
  if (!class_names.empty() && static_cast<int>(class_names.size()) != new_class_count)
    throw DataError("replace_head: class_names size does not match class count");
  Model<T> out = model;
  Rng rng(derive_seed(seed, 0xf1a1ULL, static_cast<std::uint64_t>(new_class_count)));
  out.set_final_layer(detail::make_final_layer<T>(model.spec().head.conv_channels, new_class_count, rng), new_class_count,
                      std::move(class_names));
  return out;
}

template <typename T>
std::string tensor_digest(const nn::Parameter<T>& p) {
  Sha256 h;
  h.update(p.name);
  for (int d : p.shape) h.update(std::to_string(d) + ",");
  h.update_values(std::span<const T>(p.value));
  return h.hex();
}

template <typename T>
ParameterDigest snapshot_parameters(const Model<T>& model) {
  ParameterDigest d;
  for (const auto* p : model.parameters()) d.tensors[p->name] = tensor_digest(*p);
  return d;
}

// --------------------------------------------------------------- checkpoint
//
// Archive layout (little-endian):
//   "SCKPT001" | u32 tensor count | per tensor:
//     u32 name length | name | u8 role | u8 group | u32 rank | i32 dims[rank] |
//     u8 scalar width (4 or 8) | values
// A sidecar `<archive>.json` carries the spec, spec hash, cut point, class
// list and training references.

inline constexpr char kArchiveMagic[8] = {'S', 'C', 'K', 'P', 'T', '0', '0', '1'};

namespace detail {

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::string& where) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw DataError(where + ": truncated archive");
  return v;
}

}  // namespace detail

template <typename T>
void save_weights_archive(const Model<T>& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(kArchiveMagic, sizeof(kArchiveMagic));
    const auto params = model.parameters();
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
      out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p->role));
      detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p->group));
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->shape.size()));
      for (int d : p->shape) detail::put<std::int32_t>(out, d);
      detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T)));
      out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(T)));
    }
    if (!out) throw Error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Loads tensors by name. With `require_all`, every model parameter must be
/// present; otherwise only matching names are overwritten. Shapes must agree.
template <typename T>
void load_weights_archive(Model<T>& model, const std::filesystem::path& path, bool require_all) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read archive '" + where + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0) throw DataError(where + ": not a weights archive");
  std::map<std::string, nn::Parameter<T>*> by_name;
  for (auto* p : model.parameters()) by_name[p->name] = p;
  std::map<std::string, bool> seen;
  const auto count = detail::get<std::uint32_t>(in, where);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = detail::get<std::uint32_t>(in, where);
    if (len > 4096) throw DataError(where + ": corrupt tensor name");
    std::string name(len, '\0');
    in.read(name.data(), len);
    detail::get<std::uint8_t>(in, where);
    detail::get<std::uint8_t>(in, where);
    const auto rank = detail::get<std::uint32_t>(in, where);
    if (rank > 8) throw DataError(where + ": corrupt tensor rank");
    std::vector<int> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = detail::get<std::int32_t>(in, where);
      if (d < 0) throw DataError(where + ": negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    const auto width = detail::get<std::uint8_t>(in, where);
    std::vector<T> values(n);
    if (width == 4) {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
      std::transform(buf.begin(), buf.end(), values.begin(), [](float v) { return static_cast<T>(v); });
    } else if (width == 8) {
      std::vector<double> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
      std::transform(buf.begin(), buf.end(), values.begin(), [](double v) { return static_cast<T>(v); });
    } else {
      throw DataError(where + ": unsupported scalar width " + std::to_string(width));
    }
    if (!in) throw DataError(where + ": truncated archive");
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (require_all) throw DataError(where + ": unexpected tensor '" + name + "'");
      continue;
    }
    if (it->second->shape != shape) throw DataError(where + ": shape mismatch for '" + name + "'");
    it->second->value = std::move(values);
    seen[name] = true;
  }
  if (require_all) {
    for (const auto& [name, p] : by_name)
      if (!seen.contains(name)) throw DataError(where + ": missing tensor '" + name + "'");
  }
}

inline std::filesystem::path checkpoint_meta_path(const std::filesystem::path& archive) {
  return archive.string() + ".json";
}

template <typename T>
json checkpoint_metadata(const Model<T>& model, const json& extra = {}) {
  const auto& cut = model.cut();
  json meta = {{"format", "statechef-checkpoint/1"},
               {"spec", to_json(model.spec())},
               {"spec_hash", spec_hash(model.spec())},
               {"truncation",
                {{"index", cut.activation},
                 {"total_activations", cut.total_activations},
                 {"cut", cut.description},
                 {"output_channels", cut.output_channels},
                 {"counting", "ReLU activations from the input"}}},
               {"class_names", model.spec().class_names},
               {"class_count", model.class_count()},
               {"parameter_count", model.parameter_count()},
               {"batch_norm_policy", "frozen layers normalize with running statistics and do not update them"}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) meta[k] = v;
  return meta;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path, const json& extra = {}) {
  save_weights_archive(model, path);
  write_json_file(checkpoint_meta_path(path), checkpoint_metadata(model, extra));
}

template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  const json meta = read_json_file(checkpoint_meta_path(path));
  if (!meta.contains("spec")) throw DataError(path.string() + ": metadata has no spec");
  const ModelSpec spec = model_spec_from_json(meta.at("spec"));
  Model<T> model = build_model<T>(spec, false);  // weights come from the archive
  load_weights_archive(model, path, true);
  return model;
}

}  // namespace statechef
