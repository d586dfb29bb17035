#pragma once

// Run configuration and the end-to-end commands behind the `ecer` CLI.
// Every command reads a RunConfig, writes its artifacts under
// {output_dir}/{run_id}/ and embeds the config echo in each of them.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecer/backbone.hpp"
#include "ecer/data.hpp"
#include "ecer/episodes_eval.hpp"
#include "ecer/error.hpp"
#include "ecer/pretrain.hpp"
#include "ecer/providers.hpp"
#include "ecer/pvsa.hpp"

namespace ecer {

/// Layered configuration: built-in defaults, then a preset, then an optional
/// JSON file, then dotted-key overrides. Keys not present in the defaults are
/// rejected.
class RunConfig {
 public:
  RunConfig();

  static nlohmann::json defaults();
  static std::vector<std::string> preset_names();

  void apply_preset(const std::string& name);
  /// Deep-merges a JSON object; unknown keys throw kConfig.
  void merge(const nlohmann::json& overrides, const std::string& origin = "config");
  void merge_file(const std::filesystem::path& path);
  /// `value` is parsed as JSON when possible (numbers, booleans, arrays),
  /// otherwise taken as a string. The type must match the default's.
  void set(const std::string& dotted_key, const std::string& value);
  bool has_key(const std::string& dotted_key) const;

  const nlohmann::json& tree() const { return tree_; }
  /// What gets written into artifacts (same as tree; secrets never live here).
  const nlohmann::json& echo() const { return tree_; }

  std::filesystem::path run_dir() const;
  std::uint64_t seed() const;
  std::size_t workers() const;

  BackboneConfig backbone(std::size_t num_base_classes) const;
  PretrainConfig pretrain() const;
  PvsaConfig pvsa() const;
  FinetuneConfig finetune() const;
  EpisodeProtocol protocol() const;
  ProviderConfig providers() const;
  SyntheticSpec synthetic() const;
  std::size_t entity_k() const;
  std::size_t entity_n_gen() const;

 private:
  nlohmann::json tree_;
};

/// CLI exit status for a library error: 2 bad input/config, 3 missing
/// prerequisite, 4 provider failure.
int exit_code_for(ErrorCode code);

/// Remediation hint for a missing prerequisite (empty when none applies).
std::string remediation_hint(const Error& e);

// Seeds derived from the root seed, one per consumer.
std::uint64_t backbone_seed(std::uint64_t root);
std::uint64_t pvsa_seed(std::uint64_t root);
std::uint64_t eval_seed(std::uint64_t root);

// Artifact paths inside a run directory.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path backbone_ckpt() const { return dir / "backbone.ckpt"; }
  std::filesystem::path model_ckpt() const { return dir / "model.ckpt"; }
  std::filesystem::path entities_dir() const { return dir / "entities"; }
  std::filesystem::path pretrain_csv() const { return dir / "pretrain_metrics.csv"; }
  std::filesystem::path finetune_csv() const { return dir / "finetune_metrics.csv"; }
  std::filesystem::path eval_report() const { return dir / "eval_report.json"; }
  std::filesystem::path xdomain_report() const { return dir / "eval_xdomain_report.json"; }
  std::filesystem::path maps_dir() const { return dir / "maps"; }
  std::filesystem::path ablation_dir() const { return dir / "ablation"; }
};

struct GenSynthResult {
  std::filesystem::path manifest_path;
  std::size_t images = 0;
  std::size_t classes = 0;
};
GenSynthResult cmd_gen_synth(const RunConfig& config);

struct PretrainResult {
  std::vector<EpochMetrics> epochs;
  std::filesystem::path checkpoint;
};
PretrainResult cmd_pretrain(const RunConfig& config);

struct GenEntitiesResult {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> failed;  // class names whose request failed
  std::size_t cache_hits = 0;
  std::size_t provider_calls = 0;
  std::size_t warnings = 0;
};
/// Writes one EntitySet per class of the dataset (and of the cross-domain
/// target when configured). Per-class provider failures are logged and the
/// remaining classes still run; the first failure is rethrown at the end.
GenEntitiesResult cmd_gen_entities(const RunConfig& config);

struct FinetuneCommandResult {
  FinetuneResult result;
  std::filesystem::path checkpoint;
};
FinetuneCommandResult cmd_finetune(const RunConfig& config);

EvalReport cmd_eval(const RunConfig& config);
EvalReport cmd_eval_xdomain(const RunConfig& config);

struct ExportMapsResult {
  std::filesystem::path dir;
  std::vector<SimilarityGrid> grids;
  std::filesystem::path features_csv;  // set when export.features_split is given
};
ExportMapsResult cmd_export_maps(const RunConfig& config);

/// One row of an ablation table.
struct AblationRow {
  std::string name;
  nlohmann::json flags;
  nlohmann::json config;
  EvalReport report;
};
struct AblationResult {
  std::vector<AblationRow> pretrain_rows;  // loss/adapter switches
  std::vector<AblationRow> finetune_rows;  // SVPE/PC/entity switches
};
/// `tables` ⊆ {"pretrain", "finetune"}. Fine-tuning rows reuse the run's
/// backbone checkpoint; pre-training rows each train their own backbone.
AblationResult cmd_ablate(const RunConfig& config, const std::vector<std::string>& tables);

/// The switch settings of each ablation row, in table order.
std::vector<std::pair<std::string, nlohmann::json>> pretrain_ablation_rows();
std::vector<std::pair<std::string, nlohmann::json>> finetune_ablation_rows();

}  // namespace ecer
