#pragma once

// Episodic sampling, episode-based fine-tuning and the evaluation protocol.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecer/backbone.hpp"
#include "ecer/data.hpp"
#include "ecer/entity_selection.hpp"
#include "ecer/providers.hpp"
#include "ecer/pvsa.hpp"

namespace ecer {

struct EpisodeProtocol {
  std::size_t way = 5;
  std::size_t shots = 1;
  std::size_t queries = 15;  // per class
  std::size_t tasks = 600;

  void validate() const;
  nlohmann::json to_json() const;
};

struct EpisodeItem {
  std::string image_id;
  std::size_t label = 0;
  std::string class_name;
};

struct Episode {
  std::size_t way = 0;
  std::size_t shots = 0;
  std::size_t queries_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;  // index = label
  std::vector<EpisodeItem> support;       // class-major, `shots` per class
  std::vector<EpisodeItem> query;         // class-major
};

/// Seed of task `t` under root seed `root`. Independent of the task count.
std::uint64_t episode_seed(std::uint64_t root, std::size_t t);

/// Uniformly samples `way` classes, then `shots + queries` distinct images
/// per class. Throws kInsufficientClasses / kInsufficientImages (naming the
/// class) when the split cannot supply an episode.
Episode sample_episode(const SplitView& split, std::size_t way, std::size_t shots,
                       std::size_t queries, std::uint64_t seed);

struct AccuracyStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample (n − 1)
  double ci95 = 0.0;    // 1.96 · stddev / √n
};
AccuracyStats summarize_accuracies(std::span<const double> accuracies);

struct EvalReport {
  EpisodeProtocol protocol;
  std::uint64_t root_seed = 0;
  std::vector<double> accuracies;
  double mean_acc = 0.0;
  double ci95 = 0.0;
  nlohmann::json config = nullptr;
  nlohmann::json domain_tags = nlohmann::json::object();

  /// "mean ± ci" in percent with two decimals.
  std::string summary() const;
  nlohmann::json to_json() const;
};

/// Frozen backbone features per image id, computed once in eval mode.
class FeatureBank {
 public:
  struct Entry {
    std::vector<std::vector<double>> maps;  // per block [HW_i · C_i]
    std::vector<double> global;             // [C_N]
  };

  static FeatureBank build(const Backbone& backbone, const Dataset& dataset,
                           std::span<const std::string> image_ids, std::size_t batch_size = 64);

  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  const Entry& at(const std::string& id) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t num_blocks() const { return channels_.size(); }
  const std::vector<std::size_t>& channels() const { return channels_; }
  const std::vector<std::size_t>& locations() const { return locations_; }

  /// Shot-averaged per-class support features for an episode.
  SupportFeatures support(const Episode& ep) const;
  /// Query global vectors [M, C_N].
  Tensor queries(const Episode& ep) const;

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::size_t> channels_;
  std::vector<std::size_t> locations_;
};

/// Prompted-class embedding plus the top entities of every class.
class SemanticTable {
 public:
  static SemanticTable build(std::span<const std::string> class_names, const EntityStore& entities,
                             EmbeddingProvider& embedder, std::size_t max_entities);

  std::size_t dim() const { return dim_; }
  std::size_t entities_available(const std::string& class_name) const;
  /// Rows for the given classes with exactly `k` entities each.
  SemanticBatch batch(std::span<const std::string> class_names, std::size_t k) const;
  /// Largest k every listed class can supply, capped at `k_max`.
  std::size_t common_k(std::span<const std::string> class_names, std::size_t k_max) const;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<std::vector<double>>> rows_;  // [0] = class
};

/// Logits [M, N] for the episode's queries.
Tensor episode_logits(const PvsaModel& model, const FeatureBank& bank, const SemanticTable& sem,
                      const Episode& ep);
double episode_accuracy(const Tensor& logits, const Episode& ep);

struct FinetuneConfig {
  std::size_t epochs = 10;
  std::size_t episodes_per_epoch = 100;
  double lr = 1e-3;
  std::size_t way = 5;
  std::size_t shots = 1;
  std::size_t queries = 15;
  double val_fraction = 0.2;
  std::size_t val_episodes = 100;
  bool unfreeze_last_block = false;

  void validate() const;
  nlohmann::json to_json() const;
};

struct FinetuneEpoch {
  std::size_t epoch = 0;
  double loss_mean = 0.0;  // per-query mean cross-entropy
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct FinetuneResult {
  double val_acc_before = 0.0;
  double best_val_acc = 0.0;
  std::size_t best_epoch = 0;  // 0 = initial parameters kept
  std::vector<FinetuneEpoch> history;
  std::string validation_source;  // "val-split", "base-classes" or "base-images"
};

/// Training and validation views carved from the base split (or taken from
/// the manifest's val split when it can host `way`-way episodes).
struct FinetuneSplits {
  SplitView train;
  SplitView val;
  std::string source;
};
FinetuneSplits carve_validation(const Dataset& dataset, const FinetuneConfig& config, std::uint64_t seed);

/// Episode-based fine-tuning of the PVSA parameters on base-split episodes.
/// The backbone stays frozen unless `unfreeze_last_block`. The parameters
/// with the best validation accuracy (including the initial ones) are kept.
FinetuneResult finetune(Backbone& backbone, PvsaModel& model, const Dataset& dataset,
                        const EntityStore& entities, EmbeddingProvider& embedder,
                        const FinetuneConfig& config, std::uint64_t seed,
                        const std::function<void(const FinetuneEpoch&)>& on_epoch = {});

struct EvalOptions {
  EpisodeProtocol protocol;
  std::uint64_t root_seed = 0;
  std::size_t workers = 1;
};

/// Evaluation over precomputed features. Read-only with respect to `model`.
EvalReport evaluate_episodes(const PvsaModel& model, const FeatureBank& bank, const SemanticTable& sem,
                             const SplitView& split, const EvalOptions& options);

/// Full in-domain evaluation on `split_name` (default novel).
EvalReport evaluate(const Backbone& backbone, const PvsaModel& model, const Dataset& dataset,
                    const EntityStore& entities, EmbeddingProvider& embedder, const EvalOptions& options,
                    const std::string& split_name = "novel");

/// Same protocol on another domain's novel split; tags source/target.
EvalReport evaluate_cross_domain(const Backbone& backbone, const PvsaModel& model,
                                 const std::string& source_domain, const Dataset& target,
                                 const EntityStore& target_entities, EmbeddingProvider& embedder,
                                 const EvalOptions& options);

}  // namespace ecer
