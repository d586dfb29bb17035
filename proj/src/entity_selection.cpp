#include "ecer/entity_selection.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "ecer/error.hpp"

namespace ecer {

using nlohmann::json;
namespace fs = std::filesystem;

bool ranks_before(const EntityCandidate& a, const EntityCandidate& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.text < b.text;
}

std::string prompt_class(const std::string& class_name) {
  require(!class_name.empty(), ErrorCode::kInvalidArgument, "prompt_class: empty class name");
  return "a photo of a " + class_name;
}

namespace {

std::string canonical(const std::string& s) {
  std::string out;
  bool space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<std::string> dedupe_candidates(std::span<const std::string> candidates) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& c : candidates) {
    if (seen.insert(canonical(c)).second) out.push_back(c);
  }
  return out;
}

std::vector<EntityCandidate> score_candidates(std::span<const std::string> candidates,
                                              const std::string& class_name,
                                              EmbeddingProvider& provider,
                                              const ScoreOptions& options) {
  require(!candidates.empty(), ErrorCode::kInvalidArgument, "score_candidates: no candidates");
  const auto target = options.against_prompt
                          ? provider.embed_text(prompt_class(class_name), EmbeddingKind::kPromptedClass)
                          : provider.embed_text(class_name, EmbeddingKind::kClassName);
  std::vector<EntityCandidate> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    auto e = provider.embed_text(c, EmbeddingKind::kEntity);
    // Both vectors are unit norm, so the dot product is the cosine.
    const double sim = std::clamp(dot(e.vector, target.vector), -1.0, 1.0);
    out.push_back({c, std::move(e), sim});
  }
  return out;
}

EntitySet select_top_k(std::span<const EntityCandidate> scored, std::size_t k,
                       std::optional<double> min_similarity) {
  require(k >= 1, ErrorCode::kInvalidArgument, "select_top_k: k must be >= 1");
  std::vector<EntityCandidate> ranked(scored.begin(), scored.end());
  std::sort(ranked.begin(), ranked.end(), ranks_before);
  EntitySet set;
  set.k = k;
  for (auto& c : ranked) {
    const bool passes_floor = !min_similarity || c.similarity >= *min_similarity;
    if (passes_floor && set.selected.size() < k) {
      set.selected.push_back(std::move(c));
    } else {
      set.rejected.push_back(std::move(c));
    }
  }
  if (set.selected.size() < k) {
    set.warnings.push_back("only " + std::to_string(set.selected.size()) +
                           " candidate(s) available for k=" + std::to_string(k));
  }
  return set;
}

EntitySet build_entity_set(const std::string& class_name, std::span<const std::string> candidates,
                           EmbeddingProvider& provider, std::size_t k, const ScoreOptions& options,
                           std::optional<double> min_similarity) {
  const auto unique = dedupe_candidates(candidates);
  auto set = select_top_k(score_candidates(unique, class_name, provider, options), k, min_similarity);
  set.class_name = class_name;
  set.prompt = prompt_class(class_name);
  set.prompted_embedding = options.against_prompt
                               ? provider.embed_text(set.prompt, EmbeddingKind::kPromptedClass)
                               : provider.embed_text(class_name, EmbeddingKind::kClassName);
  if (unique.size() < candidates.size()) {
    set.warnings.push_back("dropped " + std::to_string(candidates.size() - unique.size()) +
                           " duplicate candidate(s)");
  }
  return set;
}

json to_json(const EntitySet& set) {
  auto list = [](const std::vector<EntityCandidate>& cs) {
    json a = json::array();
    for (const auto& c : cs) a.push_back({{"text", c.text}, {"similarity", c.similarity}});
    return a;
  };
  return json{{"class_name", set.class_name},
              {"prompt", set.prompt},
              {"k", set.k},
              {"selected", list(set.selected)},
              {"rejected", list(set.rejected)},
              {"warnings", set.warnings}};
}

EntitySet entity_set_from_json(const json& j) {
  EntitySet set;
  set.class_name = j.at("class_name").get<std::string>();
  set.prompt = j.value("prompt", prompt_class(set.class_name));
  set.k = j.at("k").get<std::size_t>();
  auto read = [](const json& a, std::vector<EntityCandidate>& out) {
    for (const auto& c : a) {
      EntityCandidate e;
      e.text = c.at("text").get<std::string>();
      e.similarity = c.value("similarity", 0.0);
      out.push_back(std::move(e));
    }
  };
  read(j.at("selected"), set.selected);
  if (j.contains("rejected")) read(j.at("rejected"), set.rejected);
  if (j.contains("warnings")) set.warnings = j.at("warnings").get<std::vector<std::string>>();
  return set;
}

std::string class_file_stem(const std::string& class_name) {
  std::string out;
  for (unsigned char c : class_name) {
    out.push_back(std::isalnum(c) || c == '-' ? static_cast<char>(c) : '_');
  }
  return out.empty() ? "_" : out;
}

EntityStore EntityStore::load_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    fail(ErrorCode::kMissingPrerequisite, "entity directory not found: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  EntityStore store;
  for (const auto& f : files) {
    std::ifstream in(f);
    store.put(entity_set_from_json(json::parse(in)));
  }
  return store;
}

void EntityStore::put(EntitySet set) {
  auto name = set.class_name;
  sets_[std::move(name)] = std::move(set);
}

const EntitySet& EntityStore::at(const std::string& class_name) const {
  auto it = sets_.find(class_name);
  if (it == sets_.end()) fail(ErrorCode::kMissingEntities, "no entities for class '" + class_name + "'");
  return it->second;
}

void EntityStore::require_classes(std::span<const std::string> class_names) const {
  std::string missing;
  for (const auto& c : class_names) {
    if (!contains(c)) missing += (missing.empty() ? "" : ", ") + c;
  }
  if (!missing.empty()) fail(ErrorCode::kMissingEntities, "missing entities for class(es): " + missing);
}

fs::path EntityStore::write(const fs::path& dir, const EntitySet& set, const json& config_echo) {
  fs::create_directories(dir);
  auto j = to_json(set);
  if (!config_echo.is_null()) j["config"] = config_echo;
  const auto path = dir / (class_file_stem(set.class_name) + ".json");
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  return path;
}

}  // namespace ecer
