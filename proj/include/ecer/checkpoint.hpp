#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecer/nn.hpp"

namespace ecer {

/// Self-describing parameter archive:
///   "ECERCKPT" | u32 version | u64 header bytes | JSON header | f64 payload
/// The header carries free-form metadata (config echo) and a tensor table
/// {name, shape, offset, count}; the payload is little-endian doubles.
struct Checkpoint {
  struct Entry {
    Shape shape;
    std::vector<double> values;
  };
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Entry> tensors;

  void add(const std::string& name, const Shape& shape, std::span<const double> values);
  void add(const nn::ParamList& params);
  const Entry& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  /// Copies stored values into `params`, validating names and shapes.
  void load_into(nn::ParamList& params) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace ecer
