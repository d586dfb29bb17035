#include "ecer/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "ecer/entity_selection.hpp"
#include "ecer/error.hpp"
#include "ecer/rng.hpp"

namespace ecer {

using nlohmann::json;
namespace fs = std::filesystem;

void write_png(const fs::path& path, const RgbImage& image) {
  require(image.pixels.size() == image.width * image.height * 3, ErrorCode::kInvalidArgument,
          "write_png: pixel buffer does not match dimensions");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, "cannot write PNG " + path.string() + ": " + img.message);
  }
}

RgbImage read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorCode::kMissingImage, "cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(ErrorCode::kMissingImage, "cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

// ---------------------------------------------------------------------------

json to_json(const DatasetManifest& m) {
  json classes = json::array();
  for (const auto& c : m.classes) classes.push_back({{"class_name", c.class_name}, {"image_ids", c.image_ids}});
  json j{{"name", m.name},
         {"domain", m.domain},
         {"image_root", m.image_root.string()},
         {"image_size", m.image_size},
         {"normalization", {{"mean", m.mean}, {"std", m.std}}},
         {"classes", classes},
         {"splits", {{"base", m.splits.base}, {"val", m.splits.val}, {"novel", m.splits.novel}}}};
  if (m.caption_manifest) j["caption_manifest"] = m.caption_manifest->string();
  if (m.entity_dir) j["entity_dir"] = m.entity_dir->string();
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.domain = j.value("domain", m.name);
  m.image_root = j.at("image_root").get<std::string>();
  m.image_size = j.at("image_size").get<std::size_t>();
  if (j.contains("normalization")) {
    m.mean = j.at("normalization").at("mean").get<std::vector<double>>();
    m.std = j.at("normalization").at("std").get<std::vector<double>>();
  }
  for (const auto& c : j.at("classes")) {
    m.classes.push_back({c.at("class_name").get<std::string>(),
                         c.at("image_ids").get<std::vector<std::string>>()});
  }
  const auto& s = j.at("splits");
  m.splits.base = s.value("base", std::vector<std::string>{});
  m.splits.val = s.value("val", std::vector<std::string>{});
  m.splits.novel = s.value("novel", std::vector<std::string>{});
  if (j.contains("caption_manifest")) m.caption_manifest = j.at("caption_manifest").get<std::string>();
  if (j.contains("entity_dir")) m.entity_dir = j.at("entity_dir").get<std::string>();
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

std::vector<std::string> SplitView::all_image_ids() const {
  std::vector<std::string> out;
  for (const auto& ids : image_ids) out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

Dataset Dataset::load(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorCode::kMissingFile, "dataset manifest not found: " + manifest_path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kInvalidArgument, manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.manifest_ = manifest_from_json(j);
  ds.dir_ = fs::absolute(manifest_path).parent_path();
  const auto& m = ds.manifest_;
  require(m.mean.size() == 3 && m.std.size() == 3, ErrorCode::kInvalidArgument,
          "normalization needs three channel means and stds");

  std::set<std::string> names;
  for (const auto& c : m.classes) {
    if (!names.insert(c.class_name).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate class name '" + c.class_name + "'");
    }
    for (const auto& id : c.image_ids) {
      if (!ds.class_of_.emplace(id, c.class_name).second) {
        fail(ErrorCode::kDuplicateImageId, "image id '" + id + "' listed twice");
      }
    }
  }

  std::map<std::string, std::string> owner;
  std::string overlaps;
  auto claim = [&](const std::vector<std::string>& list, const std::string& split) {
    for (const auto& c : list) {
      if (!names.count(c)) {
        fail(ErrorCode::kUnknownClass, "split '" + split + "' names unknown class '" + c + "'");
      }
      auto [it, inserted] = owner.emplace(c, split);
      if (!inserted) overlaps += (overlaps.empty() ? "" : ", ") + c + " (" + it->second + "/" + split + ")";
    }
  };
  claim(m.splits.base, "base");
  claim(m.splits.val, "val");
  claim(m.splits.novel, "novel");
  if (!overlaps.empty()) fail(ErrorCode::kOverlappingSplits, "splits overlap on: " + overlaps);

  for (const auto& [id, cls] : ds.class_of_) {
    if (!fs::exists(ds.image_path(id))) {
      fail(ErrorCode::kMissingImage, "image '" + id + "' not found at " + ds.image_path(id).string());
    }
  }
  return ds;
}

SplitView Dataset::split(const std::string& name) const {
  const std::vector<std::string>* list = nullptr;
  if (name == "base") list = &manifest_.splits.base;
  else if (name == "val") list = &manifest_.splits.val;
  else if (name == "novel") list = &manifest_.splits.novel;
  else fail(ErrorCode::kInvalidArgument, "unknown split '" + name + "'");
  SplitView view;
  view.name = name;
  for (const auto& cls : *list) {
    for (const auto& c : manifest_.classes) {
      if (c.class_name == cls) {
        view.class_names.push_back(cls);
        view.image_ids.push_back(c.image_ids);
      }
    }
  }
  return view;
}

std::size_t Dataset::num_images() const { return class_of_.size(); }

const std::string& Dataset::class_of(const std::string& image_id) const {
  auto it = class_of_.find(image_id);
  if (it == class_of_.end()) fail(ErrorCode::kMissingImage, "unknown image id '" + image_id + "'");
  return it->second;
}

fs::path Dataset::image_path(const std::string& image_id) const {
  const auto root = manifest_.image_root.is_absolute() ? manifest_.image_root : dir_ / manifest_.image_root;
  return root / (image_id + ".png");
}

std::optional<fs::path> Dataset::caption_path() const {
  if (!manifest_.caption_manifest) return std::nullopt;
  const auto& p = *manifest_.caption_manifest;
  return p.is_absolute() ? p : dir_ / p;
}

std::optional<fs::path> Dataset::entity_path() const {
  if (!manifest_.entity_dir) return std::nullopt;
  const auto& p = *manifest_.entity_dir;
  return p.is_absolute() ? p : dir_ / p;
}

std::vector<double> Dataset::decode_raw(const std::string& image_id) const {
  {
    std::lock_guard lock(cache_->mu);
    if (auto it = cache_->raw.find(image_id); it != cache_->raw.end()) return it->second;
  }
  const auto img = read_png(image_path(image_id));
  const std::size_t s = manifest_.image_size;
  if (img.width != s || img.height != s) {
    fail(ErrorCode::kShapeMismatch, "image '" + image_id + "' is " + std::to_string(img.width) + "x" +
                                        std::to_string(img.height) + ", manifest says " +
                                        std::to_string(s));
  }
  std::vector<double> out(3 * s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[c * s * s + y * s + x] = img.pixels[(y * s + x) * 3 + c] / 255.0;
  std::lock_guard lock(cache_->mu);
  cache_->raw.emplace(image_id, out);
  return out;
}

Tensor Dataset::load_images(std::span<const std::string> image_ids) const {
  const std::size_t s = manifest_.image_size, plane = s * s;
  std::vector<double> out;
  out.reserve(image_ids.size() * 3 * plane);
  for (const auto& id : image_ids) {
    const auto raw = decode_raw(id);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < plane; ++k)
        out.push_back((raw[c * plane + k] - manifest_.mean[c]) / manifest_.std[c]);
  }
  return Tensor::from({image_ids.size(), 3, s, s}, std::move(out));
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& synthetic_colors() {
  static const std::vector<std::string> v = {"red", "green", "blue", "yellow", "purple", "orange"};
  return v;
}

const std::vector<std::string>& synthetic_shapes() {
  static const std::vector<std::string> v = {"circle", "square", "triangle", "cross", "ring", "diamond"};
  return v;
}

const std::vector<std::string>& synthetic_textures() {
  static const std::vector<std::string> v = {"striped", "dotted", "checkered", "plain", "wavy", "grid"};
  return v;
}

std::string synthetic_class_name(const SyntheticAttributes& a) {
  return a.texture + " " + a.color + " " + a.shape;
}

std::string synthetic_caption(const SyntheticAttributes& a) {
  return "a " + a.color + " " + a.shape + " on " + a.texture + " background";
}

std::vector<std::string> synthetic_entities(const SyntheticAttributes& a) {
  return {a.color + " color",
          a.shape + " shape",
          a.texture + " background",
          a.color + " " + a.shape,
          a.texture + " texture",
          a.shape + " on " + a.texture,
          a.color + " object",
          a.texture + " pattern",
          a.color + " " + a.shape + " silhouette",
          a.shape + " outline",
          a.color + " tint",
          a.texture + " " + a.color + " scene"};
}

namespace {

std::array<double, 3> base_rgb(const std::string& color) {
  if (color == "red") return {0.85, 0.15, 0.15};
  if (color == "green") return {0.20, 0.72, 0.25};
  if (color == "blue") return {0.18, 0.32, 0.90};
  if (color == "yellow") return {0.95, 0.85, 0.20};
  if (color == "purple") return {0.58, 0.22, 0.75};
  if (color == "orange") return {0.95, 0.52, 0.10};
  fail(ErrorCode::kInvalidArgument, "unknown synthetic color '" + color + "'");
}

std::array<double, 3> rotate_hue(std::array<double, 3> rgb, double degrees) {
  if (degrees == 0.0) return rgb;
  // Rotation about the gray axis in RGB space.
  const double th = degrees * std::acos(-1.0) / 180.0;
  const double c = std::cos(th), s = std::sin(th), k = (1.0 - c) / 3.0, r3 = std::sqrt(1.0 / 3.0) * s;
  const double m[3][3] = {{c + k, k - r3, k + r3}, {k + r3, c + k, k - r3}, {k - r3, k + r3, c + k}};
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = std::clamp(m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2], 0.0, 1.0);
  }
  return out;
}

bool texture_on(const std::string& texture, double x, double y, double period, double phase) {
  if (texture == "plain") return false;
  if (texture == "striped") return std::fmod(y + phase, period) < period / 2;
  if (texture == "checkered") {
    const auto a = static_cast<long>(std::floor((x + phase) / (period / 2)));
    const auto b = static_cast<long>(std::floor((y + phase) / (period / 2)));
    return ((a + b) & 1) != 0;
  }
  if (texture == "dotted") {
    const double dx = std::fmod(x + phase, period) - period / 2;
    const double dy = std::fmod(y + phase, period) - period / 2;
    return dx * dx + dy * dy <= 1.6;
  }
  if (texture == "wavy") {
    return std::fmod(y + 1.5 * std::sin((x + phase) * 0.7) + 64.0, period) < period / 2;
  }
  if (texture == "grid") {
    return std::fmod(x + phase, period) < 1.0 || std::fmod(y + phase, period) < 1.0;
  }
  fail(ErrorCode::kInvalidArgument, "unknown synthetic texture '" + texture + "'");
}

bool shape_on(const std::string& shape, double dx, double dy, double r) {
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
  if (shape == "triangle") return dy >= -r && dy <= 0.8 * r && std::abs(dx) <= 0.62 * (dy + r);
  if (shape == "cross") {
    const double w = 0.32 * r;
    return (std::abs(dx) <= w && std::abs(dy) <= r) || (std::abs(dy) <= w && std::abs(dx) <= r);
  }
  if (shape == "ring") {
    const double d2 = dx * dx + dy * dy;
    return d2 <= r * r && d2 >= 0.3 * r * r;
  }
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= r;
  fail(ErrorCode::kInvalidArgument, "unknown synthetic shape '" + shape + "'");
}

}  // namespace

RgbImage render_synthetic_image(const SyntheticAttributes& attrs, const SyntheticSpec& spec,
                                std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t s = spec.image_size;
  const double scale = static_cast<double>(s) / 32.0;

  const double gray = rng.uniform(0.30, 0.60);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = std::clamp(gray + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  const double contrast = 0.22 * spec.texture_contrast * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  const double period = (4.0 + static_cast<double>(rng.index(3))) * scale;
  const double phase = rng.uniform(0.0, period);

  auto fg = rotate_hue(base_rgb(attrs.color), spec.hue_shift_degrees);
  for (auto& c : fg) c = std::clamp(c + rng.uniform(-0.08, 0.08), 0.0, 1.0);
  const double r = rng.uniform(6.0, 10.0) * scale;
  const double cx = rng.uniform(11.0, 21.0) * scale;
  const double cy = rng.uniform(11.0, 21.0) * scale;

  struct Extra {
    std::string shape;
    std::array<double, 3> rgb;
    double r, cx, cy;
  };
  std::vector<Extra> extras;
  for (std::size_t d = 0; d < spec.distractors; ++d) {
    const auto& shapes = synthetic_shapes();
    const auto& colors = synthetic_colors();
    std::string sh, co;
    do sh = shapes[rng.index(shapes.size())]; while (sh == attrs.shape);
    do co = colors[rng.index(colors.size())]; while (co == attrs.color);
    Extra e{sh, rotate_hue(base_rgb(co), spec.hue_shift_degrees), rng.uniform(3.5, 5.5) * scale, 0.0, 0.0};
    // Keep the distractor mostly clear of the class object.
    for (int tries = 0; tries < 32; ++tries) {
      e.cx = rng.uniform(4.0, 28.0) * scale;
      e.cy = rng.uniform(4.0, 28.0) * scale;
      if (std::hypot(e.cx - cx, e.cy - cy) > r + e.r) break;
    }
    extras.push_back(e);
  }

  RgbImage img{s, s, std::vector<std::uint8_t>(s * s * 3)};
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::array<double, 3> v = bg;
      if (texture_on(attrs.texture, px / scale, py / scale, period / scale, phase / scale)) {
        for (auto& c : v) c += contrast;
      }
      for (const auto& e : extras) {
        if (shape_on(e.shape, px - e.cx, py - e.cy, e.r)) v = e.rgb;
      }
      if (shape_on(attrs.shape, px - cx, py - cy, r)) v = fg;
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = std::clamp(v[c] + spec.pixel_noise * rng.normal(), 0.0, 1.0);
        img.pixels[(y * s + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(n * 255.0));
      }
    }
  }
  return img;
}

SyntheticResult generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir,
                                   EmbeddingProvider& embedder) {
  require(spec.num_classes() >= 1, ErrorCode::kInvalidArgument, "synthetic spec has no classes");
  require(spec.images_per_class >= 1, ErrorCode::kInvalidArgument, "images_per_class must be >= 1");
  require(spec.image_size >= 8, ErrorCode::kInvalidArgument, "image_size must be >= 8");

  std::vector<SyntheticAttributes> table = spec.attributes;
  if (table.empty()) {
    std::vector<SyntheticAttributes> all;
    for (const auto& c : synthetic_colors())
      for (const auto& s : synthetic_shapes())
        for (const auto& t : synthetic_textures()) all.push_back({c, s, t});
    require(spec.num_classes() <= all.size(), ErrorCode::kInvalidArgument,
            "at most " + std::to_string(all.size()) + " synthetic classes");
    Rng rng(derive_seed(spec.seed, 0xC1A55));
    // Redraw until every attribute of a held-out class also occurs in some
    // base class, so held-out classes are new combinations of known parts.
    for (int attempt = 0;; ++attempt) {
      rng.shuffle(std::span(all));
      table.assign(all.begin(), all.begin() + static_cast<long>(spec.num_classes()));
      if (!spec.compositional || spec.num_base == 0 || attempt == 10000) break;
      std::set<std::string> seen;
      for (std::size_t i = 0; i < spec.num_base; ++i) {
        seen.insert("c:" + table[i].color);
        seen.insert("s:" + table[i].shape);
        seen.insert("t:" + table[i].texture);
      }
      bool ok = true;
      for (std::size_t i = spec.num_base; i < table.size() && ok; ++i) {
        ok = seen.count("c:" + table[i].color) && seen.count("s:" + table[i].shape) &&
             seen.count("t:" + table[i].texture);
      }
      if (ok) break;
    }
  }
  require(table.size() == spec.num_classes(), ErrorCode::kInvalidArgument,
          "attribute table size does not match class counts");
  {
    std::set<std::string> rows;
    for (const auto& a : table) {
      if (!rows.insert(synthetic_class_name(a)).second) {
        fail(ErrorCode::kInvalidArgument, "duplicate attribute row " + synthetic_class_name(a));
      }
    }
  }

  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "entities");

  SyntheticResult result;
  auto& m = result.manifest;
  m.name = spec.name;
  m.domain = spec.domain;
  m.image_root = "images";
  m.image_size = spec.image_size;
  m.caption_manifest = "captions.jsonl";
  m.entity_dir = "entities";
  result.attributes = table;

  std::vector<CaptionRecord> captions;
  std::array<double, 3> sum{}, sum_sq{};
  double count = 0.0;
  for (std::size_t ci = 0; ci < table.size(); ++ci) {
    ClassEntry entry;
    entry.class_name = synthetic_class_name(table[ci]);
    const bool is_base = ci < spec.num_base;
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "c%02zu_%03zu", ci, i);
      const std::string id = buf;
      const auto img = render_synthetic_image(table[ci], spec, derive_seed(spec.seed, ci * 100003 + i));
      write_png(out_dir / "images" / (id + ".png"), img);
      entry.image_ids.push_back(id);
      captions.push_back({id, synthetic_caption(table[ci])});
      if (is_base) {
        for (std::size_t p = 0; p < img.width * img.height; ++p)
          for (std::size_t c = 0; c < 3; ++c) {
            const double v = img.pixels[p * 3 + c] / 255.0;
            sum[c] += v;
            sum_sq[c] += v * v;
          }
        count += static_cast<double>(img.width * img.height);
      }
    }
    if (ci < spec.num_base) m.splits.base.push_back(entry.class_name);
    else if (ci < spec.num_base + spec.num_val) m.splits.val.push_back(entry.class_name);
    else m.splits.novel.push_back(entry.class_name);

    const auto phrases = synthetic_entities(table[ci]);
    auto set = build_entity_set(entry.class_name, phrases, embedder, phrases.size());
    EntityStore::write(out_dir / "entities", set);
    m.classes.push_back(std::move(entry));
  }
  if (count > 0) {
    for (std::size_t c = 0; c < 3; ++c) {
      m.mean[c] = sum[c] / count;
      m.std[c] = std::sqrt(std::max(sum_sq[c] / count - m.mean[c] * m.mean[c], 1e-6));
    }
  }
  write_captions(out_dir / "captions.jsonl", captions);
  result.manifest_path = out_dir / "manifest.json";
  write_manifest(result.manifest_path, m);
  return result;
}

}  // namespace ecer
