#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ecer/providers.hpp"
#include "ecer/tensor.hpp"

namespace ecer {

// ---------------------------------------------------------------------------
// PNG

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifest

struct ClassEntry {
  std::string class_name;
  std::vector<std::string> image_ids;
};

struct SplitLists {
  std::vector<std::string> base;
  std::vector<std::string> val;
  std::vector<std::string> novel;
};

struct DatasetManifest {
  std::string name;
  std::string domain;
  std::filesystem::path image_root;  // relative paths resolve against the manifest dir
  std::size_t image_size = 32;
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> std{0.25, 0.25, 0.25};
  std::vector<ClassEntry> classes;
  SplitLists splits;
  std::optional<std::filesystem::path> caption_manifest;
  std::optional<std::filesystem::path> entity_dir;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

/// Class names and their image ids for one split.
struct SplitView {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<std::vector<std::string>> image_ids;

  std::size_t num_classes() const { return class_names.size(); }
  std::vector<std::string> all_image_ids() const;
};

/// Immutable view over a manifest. Images decode lazily into a synchronized
/// cache; validation (split disjointness, class resolution, image presence)
/// happens at load.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& manifest_path);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& manifest_dir() const { return dir_; }

  SplitView split(const std::string& name) const;
  std::size_t num_images() const;
  const std::string& class_of(const std::string& image_id) const;
  bool has_image(const std::string& image_id) const { return class_of_.count(image_id) != 0; }
  std::filesystem::path image_path(const std::string& image_id) const;
  std::optional<std::filesystem::path> caption_path() const;
  std::optional<std::filesystem::path> entity_path() const;

  /// [3, H, W] in [0, 1], channel-major.
  std::vector<double> decode_raw(const std::string& image_id) const;
  /// [B, 3, H, W] normalized with the manifest's mean/std.
  Tensor load_images(std::span<const std::string> image_ids) const;

 private:
  DatasetManifest manifest_;
  std::filesystem::path dir_;
  std::unordered_map<std::string, std::string> class_of_;
  struct Cache {
    std::mutex mu;
    std::unordered_map<std::string, std::vector<double>> raw;
  };
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticAttributes {
  std::string color;
  std::string shape;
  std::string texture;
};

const std::vector<std::string>& synthetic_colors();
const std::vector<std::string>& synthetic_shapes();
const std::vector<std::string>& synthetic_textures();

std::string synthetic_class_name(const SyntheticAttributes& a);
std::string synthetic_caption(const SyntheticAttributes& a);
std::vector<std::string> synthetic_entities(const SyntheticAttributes& a);

struct SyntheticSpec {
  std::string name = "synthetic";
  std::string domain = "synthetic";
  std::size_t num_base = 10;
  std::size_t num_val = 0;
  std::size_t num_novel = 5;
  std::size_t images_per_class = 40;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  /// Explicit class table; drawn from the attribute vocabularies when empty.
  std::vector<SyntheticAttributes> attributes;
  /// Domain-shift knobs: hue rotation (degrees) applied to every rendered
  /// color, and a multiplier on background texture contrast.
  double hue_shift_degrees = 0.0;
  double texture_contrast = 1.0;
  double pixel_noise = 0.06;
  /// Extra shapes per image whose color and shape differ from the class
  /// object; they make single exemplars ambiguous.
  std::size_t distractors = 1;
  /// Held-out classes only combine attributes that base classes show.
  bool compositional = true;

  std::size_t num_classes() const { return num_base + num_val + num_novel; }
};

struct SyntheticResult {
  DatasetManifest manifest;
  std::filesystem::path manifest_path;
  std::vector<SyntheticAttributes> attributes;  // per class, manifest order
};

/// Renders every image, the caption manifest, one entity fixture per class
/// (EntitySet JSON) and the dataset manifest under `out_dir`. Entity fixture
/// similarities are computed with `embedder`.
SyntheticResult generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir,
                                   EmbeddingProvider& embedder);

/// Renders a single image (exposed for tests).
RgbImage render_synthetic_image(const SyntheticAttributes& attrs, const SyntheticSpec& spec,
                                std::uint64_t seed);

}  // namespace ecer
