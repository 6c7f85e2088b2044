#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "statechef/augment.hpp"
#include "statechef/dataset.hpp"
#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/model.hpp"
#include "statechef/rng.hpp"
#include "statechef/taxonomy.hpp"

namespace statechef {

/// Parameters excluded from updates during a stage.
///   all_but_final          backbone and added layers frozen; only the softmax layer trains
///   backbone_only          backbone frozen; added layers and softmax layer train
///   added_layers_unfrozen  same mask as backbone_only, named for the fine-tuning stage
///                          that releases the added layers
///   none                   everything trains
enum class FreezeScope { all_but_final, backbone_only, added_layers_unfrozen, none };

inline std::string_view to_string(FreezeScope s) {
  switch (s) {
    case FreezeScope::all_but_final: return "all_but_final";
    case FreezeScope::backbone_only: return "backbone_only";
    case FreezeScope::added_layers_unfrozen: return "added_layers_unfrozen";
    case FreezeScope::none: break;
  }
  return "none";
}

inline FreezeScope parse_freeze_scope(std::string_view s) {
  if (s == "all_but_final") return FreezeScope::all_but_final;
  if (s == "backbone_only") return FreezeScope::backbone_only;
  if (s == "added_layers_unfrozen") return FreezeScope::added_layers_unfrozen;
  if (s == "none") return FreezeScope::none;
  throw DataError("unknown freeze scope '" + std::string(s) + "'");
}

inline bool is_frozen(FreezeScope scope, nn::ParamGroup group) {
  switch (scope) {
    case FreezeScope::all_but_final: return group != nn::ParamGroup::final_layer;
    case FreezeScope::backbone_only:
    case FreezeScope::added_layers_unfrozen: return group == nn::ParamGroup::backbone;
    case FreezeScope::none: break;
  }
  return false;
}

struct TrainingStage {
  FreezeScope freeze_scope = FreezeScope::none;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  int epochs = 1;
  double l2_coefficient = 1e-4;
  AugmentationConfig augmentation;
  int batch_size = 32;

  /// A zero learning rate is accepted (a no-op stage); schedules loaded from
  /// files additionally require it to be positive.
  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw DataError("stage: learning rate must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw DataError("stage: betas must lie in (0, 1)");
    if (epochs < 1) throw DataError("stage: epochs must be at least 1");
    if (!(l2_coefficient >= 0.0)) throw DataError("stage: l2 coefficient must be non-negative");
    if (batch_size < 1) throw DataError("stage: batch size must be positive");
    if (!(epsilon > 0.0)) throw DataError("stage: epsilon must be positive");
    augmentation.validate();
  }

  bool operator==(const TrainingStage&) const = default;
};

struct Schedule {
  std::string name;
  std::vector<TrainingStage> stages;

  int total_epochs() const {
    int n = 0;
    for (const auto& s : stages) n += s.epochs;
    return n;
  }

  void validate() const {
    if (stages.empty()) throw DataError("schedule '" + name + "' has no stages");
    for (const auto& s : stages) s.validate();
  }

  bool operator==(const Schedule&) const = default;
};

inline json to_json(const TrainingStage& s) {
  return json{{"freeze_scope", to_string(s.freeze_scope)},
              {"learning_rate", s.learning_rate},
              {"beta1", s.beta1},
              {"beta2", s.beta2},
              {"epsilon", s.epsilon},
              {"epochs", s.epochs},
              {"l2_coefficient", s.l2_coefficient},
              {"augmentation", s.augmentation},
              {"batch_size", s.batch_size}};
}

inline TrainingStage stage_from_json(const json& j) {
  TrainingStage s;
  try {
    s.freeze_scope = parse_freeze_scope(j.at("freeze_scope").get<std::string>());
    s.learning_rate = j.at("learning_rate").get<double>();
    s.beta1 = j.value("beta1", s.beta1);
    s.beta2 = j.value("beta2", s.beta2);
    s.epsilon = j.value("epsilon", s.epsilon);
    s.epochs = j.at("epochs").get<int>();
    s.l2_coefficient = j.value("l2_coefficient", s.l2_coefficient);
    if (j.contains("augmentation")) s.augmentation = j.at("augmentation").get<AugmentationConfig>();
    s.batch_size = j.value("batch_size", s.batch_size);
  } catch (const json::exception& e) {
    throw DataError(std::string("stage: ") + e.what());
  }
  s.validate();
  return s;
}

inline json to_json(const Schedule& s) {
  json stages = json::array();
  for (const auto& st : s.stages) stages.push_back(to_json(st));
  return json{{"name", s.name}, {"stages", stages}};
}

inline Schedule schedule_from_json(const json& j) {
  Schedule s;
  if (!j.is_object() || !j.contains("stages") || !j.at("stages").is_array())
    throw DataError("schedule: expected an object with a 'stages' array");
  s.name = j.value("name", std::string("custom"));
  for (const auto& st : j.at("stages")) {
    s.stages.push_back(stage_from_json(st));
    if (!(s.stages.back().learning_rate > 0.0)) throw DataError("schedule: learning rates must be positive");
  }
  s.validate();
  return s;
}

inline Schedule load_schedule(const std::filesystem::path& path) { return schedule_from_json(read_json_file(path)); }

/// Whole-dataset transfer learning: added layers only (backbone frozen) for
/// 100 epochs at 1e-3, then every layer for 250 epochs at 5e-6. Adam, β=(0.9, 0.999).
inline Schedule whole_dataset_schedule() {
  TrainingStage head;
  head.freeze_scope = FreezeScope::backbone_only;
  head.learning_rate = 0.001;
  head.epochs = 100;
  TrainingStage full = head;
  full.freeze_scope = FreezeScope::none;
  full.learning_rate = 0.000005;
  full.epochs = 250;
  return Schedule{"whole_dataset", {head, full}};
}

/// Per-object fine-tuning after head replacement, four stages.
inline Schedule object_finetune_schedule() {
  const FreezeScope scopes[4] = {FreezeScope::all_but_final, FreezeScope::all_but_final,
                                 FreezeScope::added_layers_unfrozen, FreezeScope::none};
  const double rates[4] = {0.01, 0.001, 0.00001, 0.000005};
  const int epochs[4] = {40, 80, 120, 160};
  Schedule s{"object_finetune", {}};
  for (int i = 0; i < 4; ++i) {
    TrainingStage st;
    st.freeze_scope = scopes[i];
    st.learning_rate = rates[i];
    st.epochs = epochs[i];
    s.stages.push_back(st);
  }
  return s;
}

/// Same stages with different epoch counts (for desk-scale runs).
inline Schedule with_epochs(Schedule s, const std::vector<int>& epochs) {
  if (epochs.size() != s.stages.size()) throw DataError("with_epochs: one epoch count per stage required");
  for (std::size_t i = 0; i < epochs.size(); ++i) s.stages[i].epochs = epochs[i];
  s.validate();
  return s;
}

// -------------------------------------------------------------------- history

struct EpochRecord {
  int stage = 0;
  int epoch = 0;  // within the stage, from 1
  double train_loss = 0;
  double train_accuracy = 0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
  double seconds = 0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;

  void append(const TrainingHistory& other) { epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end()); }

  /// One line per epoch, without wall-clock time.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
      json j = {{"stage", e.stage},
                {"epoch", e.epoch},
                {"train_loss", e.train_loss},
                {"train_accuracy", e.train_accuracy}};
      j["val_loss"] = e.val_loss ? json(*e.val_loss) : json(nullptr);
      j["val_accuracy"] = e.val_accuracy ? json(*e.val_accuracy) : json(nullptr);
      out += j.dump() + "\n";
    }
    return out;
  }
};

// ------------------------------------------------------------------ optimizer

template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double epsilon) : lr_(lr), b1_(beta1), b2_(beta2), eps_(epsilon) {}

  void step(const std::vector<nn::Parameter<T>*>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto* p : params) {
      auto& [m, v] = moments_[p->name];
      if (m.size() != p->size()) {
        m.assign(p->size(), 0.0);
        v.assign(p->size(), 0.0);
      }
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = p->grad[i];
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        p->value[i] = static_cast<T>(p->value[i] - update);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// ------------------------------------------------------------------- training

template <typename T>
void apply_freeze(Model<T>& model, FreezeScope scope) {
  for (auto* p : model.parameters()) p->frozen = is_frozen(scope, p->group);
}

/// Mean cross-entropy and top-1 accuracy; fills dlogits with dLoss/dLogits when given.
template <typename T>
std::pair<double, std::size_t> softmax_cross_entropy(const nn::Tensor<T>& logits, std::span<const int> labels,
                                                     nn::Tensor<T>* dlogits) {
  const auto n = static_cast<std::size_t>(logits.n());
  const auto c = static_cast<std::size_t>(logits.c());
  std::vector<double> p(c);
  double loss = 0;
  std::size_t correct = 0;
  if (dlogits) *dlogits = nn::Tensor<T>(logits.n(), logits.c(), 1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    Model<T>::softmax_row(logits, i, p);
    const auto y = static_cast<std::size_t>(labels[i]);
    loss -= std::log(std::max(p[y], 1e-300));
    const auto arg = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    if (arg == y) ++correct;
    if (dlogits) {
      T* d = dlogits->sample(static_cast<int>(i));
      for (std::size_t j = 0; j < c; ++j) d[j] = static_cast<T>((p[j] - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  return {n ? loss / static_cast<double>(n) : 0.0, correct};
}

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};

/// Inference-mode loss and accuracy over a labeled set.
template <typename T>
Evaluation evaluate(const Model<T>& model, const LabeledImages& data, int batch_size = 64) {
  if (data.empty()) return {};
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    const auto logits = model.forward(model.to_tensor(std::span(data.images).subspan(start, end - start)), {});
    const auto [l, c] = softmax_cross_entropy<T>(logits, std::span(data.labels).subspan(start, end - start), nullptr);
    loss += l * static_cast<double>(end - start);
    correct += c;
  }
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

struct RunOptions {
  int workers = 1;                              // augmentation threads
  int stage_index = 0;                          // recorded in the history
  const LabeledImages* validation = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
struct StageResult {
  Model<T> model;
  TrainingHistory history;
  std::optional<Model<T>> best;  // highest validation accuracy, earliest on ties
  std::optional<EpochRecord> best_epoch;
};

/// Trains `model` for one stage with Adam, L2 on kernels, and online
/// augmentation. Parameters outside the stage's trainable set are left
/// bit-identical. Augmentation draws come from per-sample streams keyed on
/// (seed, epoch, sample), so results do not depend on `workers`.
template <typename T>
StageResult<T> run_stage(Model<T> model, const LabeledImages& data, const TrainingStage& stage, std::uint64_t seed,
                         const RunOptions& options = {}) {
  stage.validate();
  if (data.empty()) throw DataError("run_stage: empty training split");
  if (data.class_count != model.class_count())
    throw DataError("run_stage: class-count mismatch (model " + std::to_string(model.class_count()) + ", data " +
                    std::to_string(data.class_count) + ")");
  for (int y : data.labels)
    if (y < 0 || y >= model.class_count()) throw DataError("run_stage: label out of range");

  apply_freeze(model, stage.freeze_scope);
  std::vector<nn::Parameter<T>*> trainable;
  for (auto* p : model.parameters())
    if (p->trainable()) trainable.push_back(p);

  Adam<T> adam(stage.learning_rate, stage.beta1, stage.beta2, stage.epsilon);
  TrainingHistory history;
  const std::uint64_t aug_seed = derive_seed(seed, stage.augmentation.seed);
  const auto batch = static_cast<std::size_t>(stage.batch_size);
  const int workers = std::max(1, options.workers);
  std::optional<Model<T>> best;
  std::optional<EpochRecord> best_epoch;

  for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng(derive_seed(seed, 0x0de5, static_cast<std::uint64_t>(epoch))).shuffle(order);

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<Image> views(end - start);
      std::vector<int> labels(end - start);
      auto augment_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
          const std::size_t idx = order[start + k];
          Rng draw(derive_seed(aug_seed, static_cast<std::uint64_t>(epoch), idx));
          views[k] = augment_view(data.images[idx], stage.augmentation, draw);
        }
      };
      if (workers == 1 || views.size() < 2) {
        augment_range(0, views.size());
      } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (views.size() + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
        for (std::size_t lo = 0; lo < views.size(); lo += chunk)
          pool.emplace_back(augment_range, lo, std::min(views.size(), lo + chunk));
      }
      for (std::size_t k = 0; k < labels.size(); ++k) labels[k] = data.labels[order[start + k]];

      nn::Tape<T> tape;
      const auto logits = model.forward(model.to_tensor(views), {true, &tape});
      nn::Tensor<T> dlogits;
      const auto [loss, hits] = softmax_cross_entropy<T>(logits, labels, &dlogits);
      loss_sum += loss * static_cast<double>(labels.size());
      correct += hits;

      for (auto* p : trainable) p->zero_grad();
      model.backward(dlogits, tape);
      if (stage.l2_coefficient > 0) {
        const auto l2 = static_cast<T>(2.0 * stage.l2_coefficient);
        for (auto* p : trainable)
          if (p->decays())
            for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += l2 * p->value[i];
      }
      adam.step(trainable);
      model.commit_statistics(tape);
    }

    EpochRecord rec;
    rec.stage = options.stage_index;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(data.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (options.validation && !options.validation->empty()) {
      const auto ev = evaluate(model, *options.validation);
      rec.val_loss = ev.loss;
      rec.val_accuracy = ev.accuracy;
      if (!best_epoch || ev.accuracy > *best_epoch->val_accuracy) {
        best = model;
        best_epoch = rec;
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (options.on_epoch) options.on_epoch(rec);
    history.epochs.push_back(rec);
  }
  return {std::move(model), std::move(history), std::move(best), std::move(best_epoch)};
}

template <typename T>
StageResult<T> run_schedule(Model<T> model, const LabeledImages& data, const Schedule& schedule, std::uint64_t seed,
                            RunOptions options = {},
                            const std::type_identity_t<std::function<void(const Model<T>&, int stage)>>& on_stage_end = {}) {
  schedule.validate();
  StageResult<T> out{Model<T>(), {}, std::nullopt, std::nullopt};
  for (std::size_t i = 0; i < schedule.stages.size(); ++i) {
    options.stage_index = static_cast<int>(i + 1);
    auto result = run_stage(std::move(model), data, schedule.stages[i], derive_seed(seed, i + 1), options);
    model = std::move(result.model);
    out.history.append(result.history);
    if (result.best_epoch && (!out.best_epoch || *result.best_epoch->val_accuracy > *out.best_epoch->val_accuracy)) {
      out.best = std::move(result.best);
      out.best_epoch = result.best_epoch;
    }
    if (on_stage_end) on_stage_end(model, options.stage_index);
  }
  out.model = std::move(model);
  return out;
}

// ------------------------------------------------------ per-object fine-tuning

inline const std::vector<std::string>& default_excluded_objects() {
  static const std::vector<std::string> excluded = {"dough"};
  return excluded;
}

struct ObjectTrainingOptions {
  Schedule schedule = object_finetune_schedule();
  std::uint64_t seed = 0;
  std::vector<std::string> excluded = default_excluded_objects();
  RunOptions run;
};

template <typename T>
struct ObjectModel {
  std::string object;
  Model<T> model;
  TrainingHistory history;
};

/// Fine-tunes one model per object (excluded objects skipped): the base
/// model's softmax layer is replaced by one with a unit per admissible state,
/// then trained on the object's train split under `options.schedule`.
template <typename T>
std::vector<ObjectModel<T>> train_object_models(const Model<T>& base, const std::map<std::string, DatasetManifest>& manifests,
                                                const Taxonomy& taxonomy, const ImageLoader& loader,
                                                const ObjectTrainingOptions& options = {}) {
  options.schedule.validate();
  if (base.class_count() != static_cast<int>(taxonomy.class_count()))
    throw DataError("train_object_models: base model must be trained on the " + std::to_string(taxonomy.class_count()) +
                    "-class problem");
  std::vector<ObjectModel<T>> out;
  for (const auto& object : taxonomy.objects()) {
    if (std::find(options.excluded.begin(), options.excluded.end(), object.name) != options.excluded.end()) continue;
    auto it = manifests.find(object.name);
    if (it == manifests.end()) throw DataError("train_object_models: missing manifest for object '" + object.name + "'");
    if (object.state_count() < 2)
      throw DataError("train_object_models: object '" + object.name + "' has fewer than 2 states");
    const auto& names = object.admissible;
    for (const auto& r : it->second.records) {
      if (!taxonomy.is_admissible(object.name, r.state))
        throw DataError("train_object_models: record '" + r.id + "' has state '" + r.state +
                        "' outside the admissible states of '" + object.name + "'");
    }
    const LabeledImages train =
        load_labeled(it->second.in_split(Split::train), names, taxonomy, loader, base.input_size());
    if (train.empty()) throw DataError("train_object_models: object '" + object.name + "' has an empty training split");
    const std::uint64_t seed = derive_seed(options.seed, hash_string(object.name));
    Model<T> model = replace_head(base, static_cast<int>(names.size()), seed, names);
    auto result = run_schedule(std::move(model), train, options.schedule, seed, options.run);
    out.push_back({object.name, std::move(result.model), std::move(result.history)});
  }
  return out;
}

}  // namespace statechef
