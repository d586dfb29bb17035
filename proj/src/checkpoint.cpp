#include "ecer/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "ecer/error.hpp"

namespace ecer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host order");

namespace {
constexpr char kMagic[8] = {'E', 'C', 'E', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Checkpoint::add(const std::string& name, const Shape& shape, std::span<const double> values) {
  require(shape_numel(shape) == values.size(), ErrorCode::kShapeMismatch,
          "checkpoint entry " + name + " has inconsistent shape");
  tensors[name] = Entry{shape, std::vector<double>(values.begin(), values.end())};
}

void Checkpoint::add(const nn::ParamList& params) {
  for (const auto& p : params) add(p.name, p.tensor.shape(), p.tensor.data());
}

const Checkpoint::Entry& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorCode::kShapeMismatch, "checkpoint has no tensor '" + name + "'");
  return it->second;
}

void Checkpoint::load_into(nn::ParamList& params) const {
  for (auto& p : params) {
    const auto& e = at(p.name);
    if (e.shape != p.tensor.shape()) {
      fail(ErrorCode::kShapeMismatch, "checkpoint tensor '" + p.name + "' has shape " +
                                          shape_str(e.shape) + ", model expects " +
                                          shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : tensors) {
    header["tensors"].push_back(
        {{"name", name}, {"shape", e.shape}, {"offset", offset}, {"count", e.values.size()}});
    offset += e.values.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, e] : tensors) {
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!out) fail(ErrorCode::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kMissingPrerequisite, "checkpoint not found: " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    fail(ErrorCode::kIo, path.string() + " is not a checkpoint file");
  }
  if (version != kVersion) {
    fail(ErrorCode::kIo, "unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  const auto payload_start = in.tellg();

  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    Entry e;
    e.shape = t.at("shape").get<Shape>();
    const auto count = t.at("count").get<std::uint64_t>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    if (shape_numel(e.shape) != count) fail(ErrorCode::kIo, "corrupt tensor table in " + path.string());
    e.values.resize(count);
    in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
    in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) fail(ErrorCode::kIo, "truncated checkpoint " + path.string());
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(e));
  }
  return ck;
}

}  // namespace ecer
