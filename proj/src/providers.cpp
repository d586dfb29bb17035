#include "ecer/providers.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "ecer/error.hpp"
#include "ecer/rng.hpp"

namespace ecer {

using nlohmann::json;
namespace fs = std::filesystem;

ProviderMode parse_provider_mode(const std::string& s) {
  if (s == "fixture") return ProviderMode::kFixture;
  if (s == "replay") return ProviderMode::kReplay;
  if (s == "live") return ProviderMode::kLive;
  fail(ErrorCode::kConfig, "unknown provider mode '" + s + "' (expected live, replay or fixture)");
}

std::string to_string(ProviderMode mode) {
  switch (mode) {
    case ProviderMode::kFixture: return "fixture";
    case ProviderMode::kReplay: return "replay";
    case ProviderMode::kLive: return "live";
  }
  return "?";
}

std::string to_string(EmbeddingKind kind) {
  switch (kind) {
    case EmbeddingKind::kClassName: return "class_name";
    case EmbeddingKind::kEntity: return "entity";
    case EmbeddingKind::kCaption: return "caption";
    case EmbeddingKind::kPromptedClass: return "prompted_class";
  }
  return "?";
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

void normalize_in_place(std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double n = std::sqrt(s);
  if (n == 0.0) fail(ErrorCode::kZeroVector, "provider produced a zero embedding");
  for (double& x : v) x /= n;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Semaphore hold for one request.
class InFlight {
 public:
  explicit InFlight(std::counting_semaphore<256>& sem) : sem_(sem) { sem_.acquire(); }
  ~InFlight() { sem_.release(); }
  InFlight(const InFlight&) = delete;
  InFlight& operator=(const InFlight&) = delete;

 private:
  std::counting_semaphore<256>& sem_;
};

// POSTs JSON with retries and exponential backoff. Returns the parsed body.
json post_json(const HttpOptions& http, const std::string& path, const json& body) {
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt < std::max(http.retries, 1); ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(http.backoff * (1 << (attempt - 1)));
    httplib::Client cli(http.base_url);
    cli.set_connection_timeout(http.timeout_seconds, 0);
    cli.set_read_timeout(http.timeout_seconds, 0);
    if (!http.api_key.empty()) cli.set_bearer_token_auth(http.api_key);
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
    } else if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
    } else {
      try {
        return json::parse(res->body);
      } catch (const json::parse_error&) {
        throw MalformedResponseError("response body is not JSON", res->body);
      }
    }
    spdlog::warn("{}{}: attempt {} failed ({})", http.base_url, path, attempt + 1, last_error);
  }
  fail(ErrorCode::kProviderUnavailable,
       http.base_url + path + " unavailable after " + std::to_string(http.retries) +
           " attempts: " + last_error);
}

}  // namespace

// ---------------------------------------------------------------------------

EmbeddingProvider::EmbeddingProvider(std::string id, std::size_t dim,
                                     std::optional<fs::path> cache_file)
    : id_(std::move(id)), dim_(dim), cache_file_(std::move(cache_file)) {
  require(dim_ > 0, ErrorCode::kInvalidArgument, "embedding dimension must be positive");
  if (!cache_file_ || !fs::exists(*cache_file_)) return;
  std::ifstream in(*cache_file_);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = json::parse(line);
    auto v = j.at("vector").get<std::vector<double>>();
    if (v.size() != dim_) {
      fail(ErrorCode::kDimensionMismatch, "embedding cache " + cache_file_->string() + " holds " +
                                              std::to_string(v.size()) + "-d vectors, provider is " +
                                              std::to_string(dim_) + "-d");
    }
    cache_.emplace(j.at("text").get<std::string>(), std::move(v));
  }
}

SemanticEmbedding EmbeddingProvider::embed_text(const std::string& text, EmbeddingKind kind) {
  require(!text.empty(), ErrorCode::kInvalidArgument, "embed_text: empty text");
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(text); it != cache_.end()) return {it->second, text, kind};
  }
  auto v = compute(text);
  if (v.size() != dim_) {
    fail(ErrorCode::kDimensionMismatch, id_ + " returned a " + std::to_string(v.size()) +
                                            "-d vector, expected " + std::to_string(dim_));
  }
  normalize_in_place(v);
  std::lock_guard lock(mu_);
  ++compute_calls_;
  auto [it, inserted] = cache_.emplace(text, std::move(v));
  if (inserted && cache_file_) {
    fs::create_directories(cache_file_->parent_path());
    std::ofstream out(*cache_file_, std::ios::app);
    out << json{{"text", text}, {"vector", it->second}}.dump() << '\n';
  }
  return {it->second, text, kind};
}

std::size_t EmbeddingProvider::cache_size() const {
  std::lock_guard lock(mu_);
  return cache_.size();
}

std::size_t EmbeddingProvider::compute_calls() const {
  std::lock_guard lock(mu_);
  return compute_calls_;
}

FixtureEmbeddingProvider::FixtureEmbeddingProvider(std::size_t dim, std::uint64_t seed, double noise,
                                                   std::optional<fs::path> cache_file)
    : EmbeddingProvider("fixture-d" + std::to_string(dim) + "-s" + std::to_string(seed),
                        dim, std::move(cache_file)),
      seed_(seed),
      noise_(noise) {}

std::vector<double> FixtureEmbeddingProvider::token_anchor(const std::string& token) const {
  Rng rng(derive_seed(seed_, fnv1a64(token)));
  const double s = 1.0 / std::sqrt(static_cast<double>(dim()));
  std::vector<double> v(dim());
  for (double& x : v) x = rng.normal() * s;
  return v;
}

std::vector<double> FixtureEmbeddingProvider::compute(const std::string& text) {
  std::vector<double> v(dim(), 0.0);
  for (const auto& tok : tokenize(text)) {
    const auto a = token_anchor(tok);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += a[i];
  }
  Rng rng(derive_seed(seed_ ^ 0x5EEDF00DULL, fnv1a64(text)));
  const double s = noise_ / std::sqrt(static_cast<double>(dim()));
  for (double& x : v) x += rng.normal() * s;
  return v;
}

ReplayEmbeddingProvider::ReplayEmbeddingProvider(std::string id, std::size_t dim, fs::path cache_file)
    : EmbeddingProvider(std::move(id), dim, std::move(cache_file)) {}

std::vector<double> ReplayEmbeddingProvider::compute(const std::string& text) {
  fail(ErrorCode::kProviderUnavailable, "replay embedder has no cached vector for '" + text + "'");
}

LiveEmbeddingProvider::LiveEmbeddingProvider(HttpOptions http, std::size_t dim,
                                             std::optional<fs::path> cache_file)
    : EmbeddingProvider("live-" + http.model, dim, std::move(cache_file)),
      http_(std::move(http)),
      in_flight_(std::clamp(http_.max_in_flight, 1, 256)) {}

std::vector<double> LiveEmbeddingProvider::compute(const std::string& text) {
  InFlight hold(in_flight_);
  const auto body = post_json(http_, "/v1/embeddings",
                              {{"model", http_.model}, {"input", text}, {"dimensions", dim()}});
  try {
    return body.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const json::exception&) {
    throw MalformedResponseError("embedding response lacks data[0].embedding", body.dump());
  }
}

// ---------------------------------------------------------------------------

std::string render_entity_prompt(const std::string& templ, const std::string& class_name,
                                 std::size_t n_gen) {
  std::string out;
  for (std::size_t i = 0; i < templ.size();) {
    if (templ.compare(i, 12, "{class_name}") == 0) {
      out += class_name;
      i += 12;
    } else if (templ.compare(i, 7, "{n_gen}") == 0) {
      out += std::to_string(n_gen);
      i += 7;
    } else {
      out.push_back(templ[i++]);
    }
  }
  return out;
}

std::string template_hash(const std::string& templ) { return hex64(fnv1a64(templ)); }

std::vector<std::string> parse_candidate_lines(const std::string& raw) {
  std::vector<std::string> out;
  std::istringstream in(raw);
  std::string line;
  while (std::getline(in, line)) {
    std::string s = trim(line);
    // "1." / "2)" numbering
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')')) s = s.substr(i + 1);
    s = trim(s);
    while (!s.empty() && (s[0] == '-' || s[0] == '*' || s[0] == '#')) s = trim(s.substr(1));
    if (s.rfind("\xE2\x80\xA2", 0) == 0) s = trim(s.substr(3));  // bullet
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
      s = s.substr(1, s.size() - 2);
    }
    while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) s.pop_back();
    s = trim(s);
    if (!s.empty()) out.push_back(std::move(s));
  }
  if (out.empty()) throw MalformedResponseError("model output contains no candidate lines", raw);
  return out;
}

ReplayCache::ReplayCache(fs::path dir) : dir_(std::move(dir)) {}

std::string ReplayCache::key(const std::string& templ_hash, const std::string& class_name,
                             std::size_t n_gen) {
  return hex64(fnv1a64(templ_hash + '\n' + class_name + '\n' + std::to_string(n_gen)));
}

fs::path ReplayCache::file_for(const std::string& key) const { return dir_ / (key + ".json"); }

std::optional<LlmResponse> ReplayCache::find(const std::string& templ_hash,
                                             const std::string& class_name,
                                             std::size_t n_gen) const {
  std::lock_guard lock(mu_);
  const auto path = file_for(key(templ_hash, class_name, n_gen));
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  const auto j = json::parse(in);
  if (j.at("class_name") != class_name || j.at("n_gen") != n_gen ||
      j.at("template_hash") != templ_hash) {
    return std::nullopt;  // hash collision
  }
  LlmResponse r;
  r.class_name = class_name;
  r.raw_candidates = j.at("candidates").get<std::vector<std::string>>();
  r.provider_id = j.value("provider_id", "replay");
  r.cached = true;
  return r;
}

void ReplayCache::store(const std::string& templ_hash, std::size_t n_gen, const LlmResponse& response) {
  std::lock_guard lock(mu_);
  fs::create_directories(dir_);
  const json j{{"template_hash", templ_hash},
               {"class_name", response.class_name},
               {"n_gen", n_gen},
               {"provider_id", response.provider_id},
               {"candidates", response.raw_candidates}};
  const auto path = file_for(key(templ_hash, response.class_name, n_gen));
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

EntityGenerator::EntityGenerator(std::string id, std::string templ, std::optional<fs::path> cache_dir)
    : id_(std::move(id)), template_(std::move(templ)) {
  if (cache_dir) cache_.emplace(*cache_dir);
}

LlmResponse EntityGenerator::generate_entities(const std::string& class_name, std::size_t n_gen) {
  require(!class_name.empty(), ErrorCode::kInvalidArgument, "generate_entities: empty class name");
  require(n_gen >= 1, ErrorCode::kInvalidArgument, "generate_entities: n_gen must be >= 1");
  const auto th = template_hash(template_);
  if (cache_) {
    if (auto hit = cache_->find(th, class_name, n_gen)) {
      std::lock_guard lock(mu_);
      ++hits_;
      spdlog::debug("entity cache hit for '{}'", class_name);
      return *hit;
    }
  }
  const auto prompt = render_entity_prompt(template_, class_name, n_gen);
  LlmResponse r;
  r.class_name = class_name;
  r.provider_id = id_;
  r.raw_candidates = produce(class_name, n_gen, prompt);
  for (auto& c : r.raw_candidates) c = trim(c);
  std::erase_if(r.raw_candidates, [](const std::string& c) { return c.empty(); });
  if (r.raw_candidates.empty()) {
    throw MalformedResponseError("no candidates produced for '" + class_name + "'", "");
  }
  {
    std::lock_guard lock(mu_);
    ++calls_;
  }
  if (cache_) cache_->store(th, n_gen, r);
  return r;
}

std::size_t EntityGenerator::cache_hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t EntityGenerator::provider_calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

namespace {

const std::vector<std::string>& distractor_vocabulary() {
  static const std::vector<std::string> words = {
      "steering wheel",  "stock market",    "violin string",   "cloud storage",
      "tax return",      "parking ticket",  "jet engine",      "coffee grinder",
      "spreadsheet",     "elevator button", "power outlet",    "traffic cone",
      "keyboard shortcut", "fire hydrant",  "passport stamp",  "satellite dish",
      "shopping cart",   "radio antenna",   "subway map",      "bank vault",
      "printer toner",   "wedding cake",    "vacuum cleaner",  "chess clock",
      "lighthouse lamp", "ceiling fan",     "credit card",     "garden hose",
      "microwave oven",  "train schedule",  "umbrella handle", "baseball glove",
      "door hinge",      "kitchen sink",    "laptop charger",  "mailbox flag",
      "desk lamp",       "paper clip",      "tennis racket",   "water meter",
  };
  return words;
}

const std::vector<std::string>& generic_parts() {
  static const std::vector<std::string> parts = {
      "body", "shape", "color", "texture", "outline", "head", "tail", "pattern",
      "size", "surface", "edge", "silhouette", "markings", "legs", "base", "top"};
  return parts;
}

}  // namespace

FixtureEntityGenerator::FixtureEntityGenerator(std::map<std::string, std::vector<std::string>> knowledge,
                                               std::uint64_t seed, std::string templ,
                                               std::optional<fs::path> cache_dir)
    : EntityGenerator("fixture-llm-s" + std::to_string(seed), std::move(templ), std::move(cache_dir)),
      knowledge_(std::move(knowledge)),
      seed_(seed) {}

std::vector<std::string> FixtureEntityGenerator::produce(const std::string& class_name,
                                                         std::size_t n_gen, const std::string&) {
  Rng rng(derive_seed(seed_, fnv1a64(class_name)));
  std::vector<std::string> relevant;
  if (auto it = knowledge_.find(class_name); it != knowledge_.end()) {
    relevant = it->second;
  } else {
    for (const auto& p : generic_parts()) relevant.push_back(class_name + " " + p);
  }
  const auto n_rel = std::min(relevant.size(),
                              static_cast<std::size_t>(std::ceil(kRelevantFraction * n_gen)));
  std::vector<std::string> out(relevant.begin(), relevant.begin() + static_cast<long>(n_rel));

  std::vector<std::string> pool = distractor_vocabulary();
  rng.shuffle(std::span(pool));
  for (std::size_t i = 0; out.size() < n_gen; ++i) {
    const auto& base = pool[i % pool.size()];
    out.push_back(i < pool.size() ? base : base + " " + std::to_string(i / pool.size() + 1));
  }
  rng.shuffle(std::span(out));
  return out;
}

ReplayEntityGenerator::ReplayEntityGenerator(fs::path cache_dir, std::string templ)
    : EntityGenerator("replay", std::move(templ), std::move(cache_dir)) {}

std::vector<std::string> ReplayEntityGenerator::produce(const std::string& class_name, std::size_t n_gen,
                                                        const std::string&) {
  fail(ErrorCode::kProviderUnavailable, "replay cache has no entry for class '" + class_name +
                                            "' with n_gen=" + std::to_string(n_gen));
}

LiveEntityGenerator::LiveEntityGenerator(HttpOptions http, std::string templ, fs::path cache_dir)
    : EntityGenerator("live-" + http.model, std::move(templ), std::move(cache_dir)),
      http_(std::move(http)),
      in_flight_(std::clamp(http_.max_in_flight, 1, 256)) {}

std::vector<std::string> LiveEntityGenerator::produce(const std::string&, std::size_t,
                                                      const std::string& prompt) {
  InFlight hold(in_flight_);
  const json req{{"model", http_.model},
                 {"temperature", 0},
                 {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  const auto body = post_json(http_, "/v1/chat/completions", req);
  std::string content;
  try {
    content = body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw MalformedResponseError("chat response lacks choices[0].message.content", body.dump());
  }
  return parse_candidate_lines(content);
}

// ---------------------------------------------------------------------------

void CaptionStore::insert(CaptionRecord record) {
  if (records_.count(record.image_id)) {
    fail(ErrorCode::kDuplicateImageId, "duplicate image id in caption manifest: " + record.image_id);
  }
  auto id = record.image_id;
  records_.emplace(std::move(id), std::move(record));
}

const CaptionRecord& CaptionStore::at(const std::string& image_id) const {
  auto it = records_.find(image_id);
  if (it == records_.end()) fail(ErrorCode::kMissingCaption, "no caption for image " + image_id);
  return it->second;
}

CaptionStore load_captions(const fs::path& path, std::span<const std::string> required_ids) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kMissingFile, "caption manifest not found: " + path.string());
  CaptionStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kInvalidArgument,
           path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    store.insert({j.at("image_id").get<std::string>(), j.at("caption").get<std::string>()});
  }
  std::vector<std::string> missing;
  for (const auto& id : required_ids) {
    if (!store.contains(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " image(s) lack captions:";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    fail(ErrorCode::kMissingCaption, msg);
  }
  return store;
}

void write_captions(const fs::path& path, std::span<const CaptionRecord> records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& r : records) out << json{{"image_id", r.image_id}, {"caption", r.caption_text}}.dump() << '\n';
}

// ---------------------------------------------------------------------------

std::map<std::string, std::vector<std::string>> load_entity_knowledge(const fs::path& dir) {
  std::map<std::string, std::vector<std::string>> out;
  if (dir.empty() || !fs::exists(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    const auto j = json::parse(in);
    auto& phrases = out[j.at("class_name").get<std::string>()];
    for (const char* field : {"selected", "rejected"}) {
      if (!j.contains(field)) continue;
      for (const auto& c : j.at(field)) phrases.push_back(c.at("text").get<std::string>());
    }
  }
  return out;
}

Providers make_providers(const ProviderConfig& config) {
  Providers p;
  const auto emb_cache = config.cache_dir / "embeddings";
  const auto llm_cache = config.cache_dir / "entities";
  switch (config.mode) {
    case ProviderMode::kFixture: {
      p.embedder = std::make_unique<FixtureEmbeddingProvider>(config.embed_dim, config.seed,
                                                              config.fixture_noise);
      p.llm = std::make_unique<FixtureEntityGenerator>(
          load_entity_knowledge(config.fixture_entities_dir), config.seed, config.entity_template,
          llm_cache);
      break;
    }
    case ProviderMode::kReplay: {
      const std::string id = "live-" + config.embed_http.model;
      p.embedder = std::make_unique<ReplayEmbeddingProvider>(id, config.embed_dim,
                                                             emb_cache / (id + ".jsonl"));
      p.llm = std::make_unique<ReplayEntityGenerator>(llm_cache, config.entity_template);
      break;
    }
    case ProviderMode::kLive: {
      auto llm_http = config.llm_http;
      auto embed_http = config.embed_http;
      if (const char* key = std::getenv("ECER_LLM_API_KEY")) {
        if (llm_http.api_key.empty()) llm_http.api_key = key;
        if (embed_http.api_key.empty()) embed_http.api_key = key;
      }
      const std::string id = "live-" + embed_http.model;
      p.embedder = std::make_unique<LiveEmbeddingProvider>(embed_http, config.embed_dim,
                                                           emb_cache / (id + ".jsonl"));
      p.llm = std::make_unique<LiveEntityGenerator>(llm_http, config.entity_template, llm_cache);
      break;
    }
  }
  return p;
}

}  // namespace ecer
