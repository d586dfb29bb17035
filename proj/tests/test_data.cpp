#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ecer/data.hpp"
#include "ecer/entity_selection.hpp"
#include "ecer/error.hpp"

using namespace ecer;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ecer_test_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_base = 5;
  s.num_novel = 5;
  s.images_per_class = 40;
  s.seed = 4;
  return s;
}

// Shared across tests; rendering is the slow part.
const SyntheticResult& shared_synth() {
  static const SyntheticResult r = [] {
    FixtureEmbeddingProvider emb(64, 0);
    return generate_synthetic(small_spec(), fresh_dir("shared"), emb);
  }();
  return r;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST(Synthetic, Counts) {
  const auto& r = shared_synth();
  const auto dir = r.manifest_path.parent_path();
  EXPECT_EQ(count_files(dir / "images", ".png"), 400u);
  EXPECT_EQ(load_captions(dir / "captions.jsonl").size(), 400u);
  EXPECT_EQ(count_files(dir / "entities", ".json"), 10u);
  EXPECT_EQ(r.manifest.splits.base.size(), 5u);
  EXPECT_EQ(r.manifest.splits.novel.size(), 5u);
  EXPECT_TRUE(r.manifest.splits.val.empty());
}

TEST(Synthetic, EntitiesDescribeTheirClass) {
  const auto& r = shared_synth();
  const auto store = EntityStore::load_dir(r.manifest_path.parent_path() / "entities");
  for (std::size_t i = 0; i < r.attributes.size(); ++i) {
    const auto name = synthetic_class_name(r.attributes[i]);
    ASSERT_TRUE(store.contains(name));
    EXPECT_EQ(store.at(name).selected.size(), synthetic_entities(r.attributes[i]).size());
  }
}

TEST(Synthetic, Deterministic) {
  FixtureEmbeddingProvider emb(64, 0);
  auto spec = small_spec();
  spec.images_per_class = 3;
  const auto a = generate_synthetic(spec, fresh_dir("det_a"), emb);
  const auto b = generate_synthetic(spec, fresh_dir("det_b"), emb);
  EXPECT_EQ(to_json(a.manifest), to_json(b.manifest));
  const auto ia = read_png(a.manifest_path.parent_path() / "images" / "c03_002.png");
  const auto ib = read_png(b.manifest_path.parent_path() / "images" / "c03_002.png");
  EXPECT_EQ(ia.pixels, ib.pixels);
  spec.seed += 1;
  const auto c = generate_synthetic(spec, fresh_dir("det_c"), emb);
  EXPECT_NE(read_png(c.manifest_path.parent_path() / "images" / "c03_002.png").pixels, ia.pixels);
}

TEST(Synthetic, CompositionalHeldOutClasses) {
  const auto& r = shared_synth();
  std::set<std::string> colors, shapes;
  for (std::size_t i = 0; i < 5; ++i) {
    colors.insert(r.attributes[i].color);
    shapes.insert(r.attributes[i].shape);
  }
  for (std::size_t i = 5; i < 10; ++i) {
    EXPECT_TRUE(colors.count(r.attributes[i].color)) << r.attributes[i].color;
    EXPECT_TRUE(shapes.count(r.attributes[i].shape)) << r.attributes[i].shape;
  }
}

TEST(Dataset, DecodeRange) {
  const auto& r = shared_synth();
  const auto ds = Dataset::load(r.manifest_path);
  EXPECT_EQ(ds.num_images(), 400u);
  const auto raw = ds.decode_raw("c00_000");
  ASSERT_EQ(raw.size(), 3u * 32 * 32);
  for (double v : raw) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  const std::vector<std::string> ids{"c00_000", "c07_001"};
  const auto t = ds.load_images(ids);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 32, 32}));
  const auto& m = ds.manifest();
  EXPECT_NEAR(t.at(0), (raw[0] - m.mean[0]) / m.std[0], 1e-12);
}

TEST(Dataset, NearestCentroidBeatsChance) {
  const auto& r = shared_synth();
  const auto ds = Dataset::load(r.manifest_path);
  const auto split = ds.split("novel");
  const std::size_t n = split.num_classes(), dim = 3 * 32 * 32;
  std::vector<std::vector<double>> centroids(n, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < 20; ++i) {
      const auto x = ds.decode_raw(split.image_ids[c][i]);
      for (std::size_t d = 0; d < dim; ++d) centroids[c][d] += x[d] / 20.0;
    }
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 20; i < split.image_ids[c].size(); ++i) {
      const auto x = ds.decode_raw(split.image_ids[c][i]);
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < n; ++k) {
        double d = 0;
        for (std::size_t j = 0; j < dim; ++j) d += (x[j] - centroids[k][j]) * (x[j] - centroids[k][j]);
        if (d < best_d) best_d = d, best = k;
      }
      correct += best == c;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(correct) / total, 2.0 / n);
}

TEST(Dataset, OverlappingSplitsRejected) {
  const auto& r = shared_synth();
  auto m = r.manifest;
  m.splits.novel.push_back(m.splits.base.front());
  m.image_root = fs::absolute(r.manifest_path.parent_path() / "images");
  const auto path = fresh_dir("overlap") / "manifest.json";
  fs::create_directories(path.parent_path());
  write_manifest(path, m);
  try {
    Dataset::load(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOverlappingSplits);
    EXPECT_NE(std::string(e.what()).find(m.splits.base.front()), std::string::npos);
  }
}

TEST(Dataset, MissingImageAndUnknownClass) {
  const auto& r = shared_synth();
  const auto dir = fresh_dir("broken");
  fs::create_directories(dir);
  auto m = r.manifest;
  m.image_root = fs::absolute(r.manifest_path.parent_path() / "images");
  m.classes[0].image_ids.push_back("nope_000");
  write_manifest(dir / "a.json", m);
  try {
    Dataset::load(dir / "a.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingImage);
  }
  m = r.manifest;
  m.image_root = fs::absolute(r.manifest_path.parent_path() / "images");
  m.splits.novel.push_back("purple moon");
  write_manifest(dir / "b.json", m);
  try {
    Dataset::load(dir / "b.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownClass);
  }
  try {
    Dataset::load(dir / "absent.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
  }
}

TEST(Png, RoundTrip) {
  RgbImage img{3, 2, {0, 1, 2, 3, 4, 5, 250, 251, 252, 9, 8, 7, 100, 0, 255, 1, 1, 1}};
  const auto path = fresh_dir("png") / "x.png";
  fs::create_directories(path.parent_path());
  write_png(path, img);
  const auto back = read_png(path);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Captions, SyntheticCaptionsRoundTrip) {
  const auto& r = shared_synth();
  const auto dir = r.manifest_path.parent_path();
  const auto store = load_captions(dir / "captions.jsonl");
  EXPECT_EQ(store.at("c02_005").caption_text, synthetic_caption(r.attributes[2]));
  std::vector<CaptionRecord> recs;
  for (const auto& [id, rec] : store.records()) recs.push_back(rec);
  write_captions(dir / "copy.jsonl", recs);
  EXPECT_EQ(load_captions(dir / "copy.jsonl").records().size(), store.size());
}
