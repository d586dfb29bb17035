#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecer/providers.hpp"

namespace ecer {

struct EntityCandidate {
  std::string text;
  SemanticEmbedding embedding;
  double similarity = 0.0;
};

/// Strict ranking order: similarity descending, then text ascending.
bool ranks_before(const EntityCandidate& a, const EntityCandidate& b);

struct EntitySet {
  std::string class_name;
  std::string prompt;
  SemanticEmbedding prompted_embedding;
  std::size_t k = 0;
  std::vector<EntityCandidate> selected;
  std::vector<EntityCandidate> rejected;
  std::vector<std::string> warnings;
};

/// "a photo of a {class_name}".
std::string prompt_class(const std::string& class_name);

/// Drops repeats, comparing case-insensitively with whitespace collapsed.
/// First occurrence wins; order is otherwise preserved.
std::vector<std::string> dedupe_candidates(std::span<const std::string> candidates);

struct ScoreOptions {
  /// Score against "a photo of a {class}" (true) or the bare class name.
  bool against_prompt = true;
};

std::vector<EntityCandidate> score_candidates(std::span<const std::string> candidates,
                                              const std::string& class_name,
                                              EmbeddingProvider& provider,
                                              const ScoreOptions& options = {});

/// Keeps the top-k candidates under `ranks_before`. Candidates below the
/// optional similarity floor are always rejected. Fewer than k survivors is
/// reported as a warning, not an error.
EntitySet select_top_k(std::span<const EntityCandidate> scored, std::size_t k,
                       std::optional<double> min_similarity = std::nullopt);

/// dedupe → score → select, filling in class/prompt metadata.
EntitySet build_entity_set(const std::string& class_name, std::span<const std::string> candidates,
                           EmbeddingProvider& provider, std::size_t k,
                           const ScoreOptions& options = {},
                           std::optional<double> min_similarity = std::nullopt);

nlohmann::json to_json(const EntitySet& set);
/// Embedding vectors are not persisted; they are empty after loading.
EntitySet entity_set_from_json(const nlohmann::json& j);

/// File-system safe stem for a class name.
std::string class_file_stem(const std::string& class_name);

/// Persisted entity sets, one JSON file per class.
class EntityStore {
 public:
  static EntityStore load_dir(const std::filesystem::path& dir);

  void put(EntitySet set);
  bool contains(const std::string& class_name) const { return sets_.count(class_name) != 0; }
  const EntitySet& at(const std::string& class_name) const;
  std::size_t size() const { return sets_.size(); }
  const std::map<std::string, EntitySet>& sets() const { return sets_; }

  /// Throws kMissingEntities naming every absent class.
  void require_classes(std::span<const std::string> class_names) const;

  static std::filesystem::path write(const std::filesystem::path& dir, const EntitySet& set,
                                     const nlohmann::json& config_echo = nullptr);

 private:
  std::map<std::string, EntitySet> sets_;
};

}  // namespace ecer
