#pragma once

// External-interface layer: text embeddings, LLM entity generation and
// caption ingestion. Every provider has a deterministic offline mode so the
// rest of the pipeline can run without network access.

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ecer {

enum class ProviderMode { kFixture, kReplay, kLive };
ProviderMode parse_provider_mode(const std::string& s);
std::string to_string(ProviderMode mode);

enum class EmbeddingKind { kClassName, kEntity, kCaption, kPromptedClass };
std::string to_string(EmbeddingKind kind);

struct SemanticEmbedding {
  std::vector<double> vector;  // unit L2 norm
  std::string source_text;
  EmbeddingKind kind = EmbeddingKind::kEntity;
};

/// Lower-cased alphanumeric tokens.
std::vector<std::string> tokenize(const std::string& text);

struct HttpOptions {
  std::string base_url = "https://api.openai.com";
  std::string api_key{};
  std::string model;
  int retries = 3;
  std::chrono::milliseconds backoff{500};
  int max_in_flight = 4;
  int timeout_seconds = 60;
};

/// Shared text-embedding front end: validation, normalization and a
/// synchronized cache keyed by (provider id, text). Subclasses supply raw
/// vectors.
class EmbeddingProvider {
 public:
  EmbeddingProvider(std::string id, std::size_t dim,
                    std::optional<std::filesystem::path> cache_file);
  virtual ~EmbeddingProvider() = default;
  EmbeddingProvider(const EmbeddingProvider&) = delete;
  EmbeddingProvider& operator=(const EmbeddingProvider&) = delete;

  SemanticEmbedding embed_text(const std::string& text, EmbeddingKind kind);

  const std::string& id() const { return id_; }
  std::size_t dim() const { return dim_; }
  std::size_t cache_size() const;
  /// Number of times `compute` was invoked (cache misses).
  std::size_t compute_calls() const;

 protected:
  virtual std::vector<double> compute(const std::string& text) = 0;

 private:
  std::string id_;
  std::size_t dim_;
  std::optional<std::filesystem::path> cache_file_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<double>> cache_;
  std::size_t compute_calls_ = 0;
};

/// Offline embedder: each token gets a seeded Gaussian anchor; a text maps to
/// the normalized sum of its token anchors plus small text-seeded noise.
/// Texts sharing tokens are therefore similar.
class FixtureEmbeddingProvider : public EmbeddingProvider {
 public:
  FixtureEmbeddingProvider(std::size_t dim = 512, std::uint64_t seed = 0, double noise = 0.1,
                           std::optional<std::filesystem::path> cache_file = std::nullopt);

  /// Unnormalized anchor for a token (exposed for test oracles).
  std::vector<double> token_anchor(const std::string& token) const;

 protected:
  std::vector<double> compute(const std::string& text) override;

 private:
  std::uint64_t seed_;
  double noise_;
};

/// Serves only what is already in the on-disk cache.
class ReplayEmbeddingProvider : public EmbeddingProvider {
 public:
  ReplayEmbeddingProvider(std::string id, std::size_t dim, std::filesystem::path cache_file);

 protected:
  std::vector<double> compute(const std::string& text) override;
};

/// OpenAI-compatible /v1/embeddings client.
class LiveEmbeddingProvider : public EmbeddingProvider {
 public:
  LiveEmbeddingProvider(HttpOptions http, std::size_t dim,
                        std::optional<std::filesystem::path> cache_file);

 protected:
  std::vector<double> compute(const std::string& text) override;

 private:
  HttpOptions http_;
  std::counting_semaphore<256> in_flight_;
};

// ---------------------------------------------------------------------------
// Entity generation

inline constexpr const char* kDefaultEntityTemplate =
    "List {n_gen} distinctive visual attributes, parts, or characteristics of a "
    "{class_name}. Answer with short noun phrases, one per line.";

std::string render_entity_prompt(const std::string& templ, const std::string& class_name,
                                 std::size_t n_gen);
std::string template_hash(const std::string& templ);

struct LlmResponse {
  std::string class_name;
  std::vector<std::string> raw_candidates;
  std::string provider_id;
  bool cached = false;
};

/// Splits a model answer into candidate phrases: one per line, list markers
/// and surrounding quotes stripped. Throws MalformedResponseError when
/// nothing usable remains.
std::vector<std::string> parse_candidate_lines(const std::string& raw);

/// Directory of JSON files, one per request key
/// (template hash, class name, n_gen), named by the key's hash.
class ReplayCache {
 public:
  explicit ReplayCache(std::filesystem::path dir);

  static std::string key(const std::string& templ_hash, const std::string& class_name,
                         std::size_t n_gen);
  std::filesystem::path file_for(const std::string& key) const;

  std::optional<LlmResponse> find(const std::string& templ_hash, const std::string& class_name,
                                  std::size_t n_gen) const;
  void store(const std::string& templ_hash, std::size_t n_gen, const LlmResponse& response);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

class EntityGenerator {
 public:
  EntityGenerator(std::string id, std::string templ, std::optional<std::filesystem::path> cache_dir);
  virtual ~EntityGenerator() = default;
  EntityGenerator(const EntityGenerator&) = delete;
  EntityGenerator& operator=(const EntityGenerator&) = delete;

  LlmResponse generate_entities(const std::string& class_name, std::size_t n_gen);

  const std::string& id() const { return id_; }
  const std::string& prompt_template() const { return template_; }
  std::size_t cache_hits() const;
  std::size_t provider_calls() const;

 protected:
  virtual std::vector<std::string> produce(const std::string& class_name, std::size_t n_gen,
                                           const std::string& prompt) = 0;

 private:
  std::string id_;
  std::string template_;
  std::optional<ReplayCache> cache_;
  mutable std::mutex mu_;
  std::size_t hits_ = 0;
  std::size_t calls_ = 0;
};

/// Deterministic stand-in for an LLM. Known classes answer with their
/// recorded attribute phrases; the remainder of the requested count is
/// filled with unrelated "hallucinated" phrases chosen by a class-seeded RNG.
class FixtureEntityGenerator : public EntityGenerator {
 public:
  FixtureEntityGenerator(std::map<std::string, std::vector<std::string>> knowledge,
                         std::uint64_t seed = 0, std::string templ = kDefaultEntityTemplate,
                         std::optional<std::filesystem::path> cache_dir = std::nullopt);

  /// Fraction of n_gen drawn from known phrases (rest are distractors).
  static constexpr double kRelevantFraction = 0.6;

 protected:
  std::vector<std::string> produce(const std::string& class_name, std::size_t n_gen,
                                   const std::string& prompt) override;

 private:
  std::map<std::string, std::vector<std::string>> knowledge_;
  std::uint64_t seed_;
};

/// Cache-only generator; a miss is a provider-unavailable error.
class ReplayEntityGenerator : public EntityGenerator {
 public:
  ReplayEntityGenerator(std::filesystem::path cache_dir, std::string templ = kDefaultEntityTemplate);

 protected:
  std::vector<std::string> produce(const std::string& class_name, std::size_t n_gen,
                                   const std::string& prompt) override;
};

/// OpenAI-compatible chat-completions client with retry/backoff and an
/// in-flight request limit.
class LiveEntityGenerator : public EntityGenerator {
 public:
  LiveEntityGenerator(HttpOptions http, std::string templ, std::filesystem::path cache_dir);

 protected:
  std::vector<std::string> produce(const std::string& class_name, std::size_t n_gen,
                                   const std::string& prompt) override;

 private:
  HttpOptions http_;
  std::counting_semaphore<256> in_flight_;
};

// ---------------------------------------------------------------------------
// Captions

struct CaptionRecord {
  std::string image_id;
  std::string caption_text;
};

class CaptionStore {
 public:
  void insert(CaptionRecord record);
  std::size_t size() const { return records_.size(); }
  bool contains(const std::string& image_id) const { return records_.count(image_id) != 0; }
  const CaptionRecord& at(const std::string& image_id) const;
  const std::map<std::string, CaptionRecord>& records() const { return records_; }

 private:
  std::map<std::string, CaptionRecord> records_;
};

/// Reads a JSON-lines manifest ({"image_id", "caption"} per line). When
/// `required_ids` is non-empty, every listed id must have a caption.
CaptionStore load_captions(const std::filesystem::path& path,
                           std::span<const std::string> required_ids = {});
void write_captions(const std::filesystem::path& path, std::span<const CaptionRecord> records);

// ---------------------------------------------------------------------------

struct ProviderConfig {
  ProviderMode mode = ProviderMode::kFixture;
  std::size_t embed_dim = 512;
  std::uint64_t seed = 0;
  double fixture_noise = 0.1;
  std::filesystem::path cache_dir = "cache";
  std::string entity_template = kDefaultEntityTemplate;
  /// Directory of entity fixture files (EntitySet JSON) that seeds the
  /// fixture LLM's knowledge. Optional.
  std::filesystem::path fixture_entities_dir;
  HttpOptions llm_http{.api_key = {}, .model = "gpt-4o"};
  HttpOptions embed_http{.api_key = {}, .model = "text-embedding-3-small"};
};

struct Providers {
  std::unique_ptr<EmbeddingProvider> embedder;
  std::unique_ptr<EntityGenerator> llm;
};

Providers make_providers(const ProviderConfig& config);

/// Reads class → phrase lists from a directory of EntitySet JSON files.
std::map<std::string, std::vector<std::string>> load_entity_knowledge(
    const std::filesystem::path& dir);

}  // namespace ecer
