#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <thread>

#include "ecer/entity_selection.hpp"
#include "ecer/error.hpp"
#include "ecer/providers.hpp"
#include "ecer/rng.hpp"

using namespace ecer;
namespace fs = std::filesystem;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ecer_test_providers_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Anchor-sum oracle for the fixture embedder, without its noise term.
std::vector<double> anchor_sum(const FixtureEmbeddingProvider& p, const std::string& text) {
  std::vector<double> v(p.dim(), 0.0);
  for (const auto& tok : tokenize(text)) {
    const auto a = p.token_anchor(tok);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += a[i];
  }
  return v;
}

}  // namespace

TEST(FixtureEmbedding, Deterministic) {
  FixtureEmbeddingProvider p;
  const auto a = p.embed_text("dog", EmbeddingKind::kClassName);
  const auto b = p.embed_text("dog", EmbeddingKind::kClassName);
  EXPECT_EQ(a.vector, b.vector);
  EXPECT_NEAR(cosine(a.vector, b.vector), 1.0, 1e-12);
  FixtureEmbeddingProvider fresh;
  EXPECT_EQ(fresh.embed_text("dog", EmbeddingKind::kClassName).vector, a.vector);
}

TEST(FixtureEmbedding, UnitNorm) {
  FixtureEmbeddingProvider p;
  for (const char* t : {"dog", "a photo of a Newfoundland", "x", "thick coat of newfoundland"}) {
    const auto e = p.embed_text(t, EmbeddingKind::kEntity);
    EXPECT_EQ(e.vector.size(), 512u);
    EXPECT_NEAR(std::sqrt(dot(e.vector, e.vector)), 1.0, 1e-6) << t;
  }
}

TEST(FixtureEmbedding, SharedTokensAreCloser) {
  FixtureEmbeddingProvider p;
  const auto cls = p.embed_text("newfoundland", EmbeddingKind::kClassName).vector;
  const auto ent = p.embed_text("thick coat of newfoundland", EmbeddingKind::kEntity).vector;
  const auto far = p.embed_text("steering wheel", EmbeddingKind::kEntity).vector;
  // Oracle: the same ordering from the raw anchor sums.
  const double o_ent = cosine(anchor_sum(p, "thick coat of newfoundland"), anchor_sum(p, "newfoundland"));
  const double o_far = cosine(anchor_sum(p, "steering wheel"), anchor_sum(p, "newfoundland"));
  ASSERT_GT(o_ent, o_far);
  EXPECT_GT(dot(ent, cls), dot(far, cls));
  // Embeddings stay close to their anchor sums (noise is small).
  EXPECT_GT(cosine(ent, anchor_sum(p, "thick coat of newfoundland")), 0.9);
}

TEST(FixtureEmbedding, EmptyTextRejected) {
  FixtureEmbeddingProvider p;
  try {
    p.embed_text("", EmbeddingKind::kEntity);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(FixtureEmbedding, PureUnderRandomTexts) {
  FixtureEmbeddingProvider p(64, 3);
  Rng rng(11);
  const std::string alphabet = "abcdefgh ";
  for (int t = 0; t < 50; ++t) {
    std::string s = "w";
    for (int i = 0; i < 12; ++i) s += alphabet[rng.index(alphabet.size())];
    FixtureEmbeddingProvider other(64, 3);
    EXPECT_EQ(p.embed_text(s, EmbeddingKind::kCaption).vector, other.embed_text(s, EmbeddingKind::kCaption).vector);
  }
}

TEST(FixtureEmbedding, ConcurrentCallsAgree) {
  FixtureEmbeddingProvider p(128, 1);
  const auto ref = FixtureEmbeddingProvider(128, 1).embed_text("black fur", EmbeddingKind::kEntity).vector;
  std::vector<std::thread> pool;
  std::vector<int> ok(8, 0);
  for (int w = 0; w < 8; ++w) {
    pool.emplace_back([&, w] {
      bool all = true;
      for (int i = 0; i < 50; ++i) all &= p.embed_text("black fur", EmbeddingKind::kEntity).vector == ref;
      ok[w] = all;
    });
  }
  for (auto& t : pool) t.join();
  for (int v : ok) EXPECT_TRUE(v);
  EXPECT_EQ(p.compute_calls(), 1u);
}

TEST(EmbeddingCache, RoundTripAndDimensionMismatch) {
  const auto dir = temp_dir("cache");
  const auto file = dir / "emb.jsonl";
  std::vector<double> v;
  {
    FixtureEmbeddingProvider p(32, 0, 0.1, file);
    v = p.embed_text("thick coat", EmbeddingKind::kEntity).vector;
  }
  ReplayEmbeddingProvider replay("fixture-d32-s0", 32, file);
  EXPECT_EQ(replay.embed_text("thick coat", EmbeddingKind::kEntity).vector, v);
  EXPECT_EQ(replay.compute_calls(), 0u);
  try {
    replay.embed_text("unseen", EmbeddingKind::kEntity);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProviderUnavailable);
  }
  try {
    FixtureEmbeddingProvider wrong(64, 0, 0.1, file);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(EntityGeneration, ReplayFixtureNewfoundland) {
  ReplayEntityGenerator gen(fs::path(ECER_TEST_DATA_DIR) / "replay");
  const auto r = gen.generate_entities("Newfoundland", 20);
  EXPECT_TRUE(r.cached);
  const auto has = [&](const std::string& s) {
    return std::find(r.raw_candidates.begin(), r.raw_candidates.end(), s) != r.raw_candidates.end();
  };
  EXPECT_TRUE(has("Thick Coat"));
  EXPECT_TRUE(has("Black Fur"));
  const auto again = gen.generate_entities("Newfoundland", 20);
  EXPECT_EQ(again.raw_candidates, r.raw_candidates);
  EXPECT_EQ(gen.provider_calls(), 0u);
}

TEST(EntityGeneration, ReplayMissIsProviderUnavailable) {
  ReplayEntityGenerator gen(fs::path(ECER_TEST_DATA_DIR) / "replay");
  try {
    gen.generate_entities("Newfoundland", 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProviderUnavailable);
  }
}

TEST(EntityGeneration, FixtureCountAndCache) {
  const auto dir = temp_dir("llm");
  FixtureEntityGenerator gen({{"Newfoundland", {"Thick Coat", "Black Fur"}}}, 0, kDefaultEntityTemplate, dir);
  const auto r = gen.generate_entities("Newfoundland", 20);
  EXPECT_EQ(r.raw_candidates.size(), 20u);
  for (const auto& c : r.raw_candidates) {
    EXPECT_FALSE(c.empty());
    EXPECT_EQ(c.front() != ' ' && c.back() != ' ', true);
  }
  EXPECT_FALSE(r.cached);
  const auto again = gen.generate_entities("Newfoundland", 20);
  EXPECT_TRUE(again.cached);
  EXPECT_EQ(again.raw_candidates, r.raw_candidates);
  EXPECT_EQ(gen.provider_calls(), 1u);
  EXPECT_EQ(gen.cache_hits(), 1u);

  // Replay mode serves what fixture mode recorded.
  ReplayEntityGenerator replay(dir);
  EXPECT_EQ(replay.generate_entities("Newfoundland", 20).raw_candidates, r.raw_candidates);
}

TEST(EntityGeneration, PromptTemplate) {
  EXPECT_EQ(render_entity_prompt(kDefaultEntityTemplate, "Newfoundland", 20),
            "List 20 distinctive visual attributes, parts, or characteristics of a Newfoundland. "
            "Answer with short noun phrases, one per line.");
  EXPECT_NE(template_hash("a"), template_hash("b"));
}

TEST(EntityGeneration, ParseCandidateLines) {
  const auto c = parse_candidate_lines("1. Thick Coat\n2) Black Fur\n- \"Webbed Feet\"\n\n* Large Paws  \n");
  EXPECT_EQ(c, (std::vector<std::string>{"Thick Coat", "Black Fur", "Webbed Feet", "Large Paws"}));
  try {
    parse_candidate_lines("\n  \n-\n");
    FAIL();
  } catch (const MalformedResponseError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMalformedResponse);
    EXPECT_EQ(e.raw_text(), "\n  \n-\n");
  }
}

TEST(EntityGeneration, LiveUnreachableIsProviderUnavailable) {
  const auto dir = temp_dir("live");
  HttpOptions http;
  http.base_url = "http://127.0.0.1:9";
  http.model = "test";
  http.retries = 2;
  http.backoff = std::chrono::milliseconds(1);
  http.timeout_seconds = 2;
  LiveEntityGenerator gen(http, kDefaultEntityTemplate, dir);
  try {
    gen.generate_entities("Newfoundland", 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProviderUnavailable);
  }
}

TEST(Captions, LoadAndErrors) {
  const auto dir = temp_dir("captions");
  const std::vector<CaptionRecord> recs{{"a", "a red circle"}, {"b", "a blue square"}, {"c", "a green star"}};
  write_captions(dir / "ok.jsonl", recs);
  EXPECT_EQ(load_captions(dir / "ok.jsonl").size(), 3u);

  {
    std::ofstream out(dir / "dup.jsonl");
    out << R"({"image_id": "a", "caption": "x"})" << "\n" << R"({"image_id": "a", "caption": "y"})" << "\n";
  }
  try {
    load_captions(dir / "dup.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicateImageId);
    EXPECT_NE(std::string(e.what()).find("manifest: a"), std::string::npos) << e.what();
  }

  const std::vector<std::string> need{"a", "z"};
  try {
    load_captions(dir / "ok.jsonl", need);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCaption);
    EXPECT_NE(std::string(e.what()).find("z"), std::string::npos);
  }
  try {
    load_captions(dir / "nope.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
  }
}

TEST(Providers, ModeParsing) {
  EXPECT_EQ(parse_provider_mode("replay"), ProviderMode::kReplay);
  EXPECT_EQ(to_string(ProviderMode::kLive), "live");
  EXPECT_THROW(parse_provider_mode("cloud"), Error);
}
