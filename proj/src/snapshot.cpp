#include "biaslens/snapshot.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "biaslens/common.hpp"

namespace biaslens {

ModelSnapshot ModelSnapshot::capture(const Model& model, std::uint64_t seed, nlohmann::json config) {
  const auto p = model.parameters();
  return {model.architecture(), seed, std::move(config), std::vector<double>(p.begin(), p.end())};
}

std::unique_ptr<Model> ModelSnapshot::restore() const {
  auto model = make_model(architecture);
  if (model->parameters().size() != parameters.size()) {
    throw ValidationError("snapshot holds " + std::to_string(parameters.size()) + " parameters, architecture needs " +
                          std::to_string(model->parameters().size()));
  }
  std::copy(parameters.begin(), parameters.end(), model->parameters().begin());
  return model;
}

namespace {

static_assert(sizeof(double) == 8);

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace

void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  nlohmann::json header{{"format", "biaslens-snapshot/1"},
                        {"architecture", s.architecture},
                        {"seed", s.seed},
                        {"config", s.config},
                        {"param_count", s.parameters.size()}};
  out << header.dump() << '\n';
  for (double v : s.parameters) {
    const std::uint64_t le = to_le(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &le, 8);
    out.write(buf, 8);
  }
  if (!out) throw RuntimeFailure("failed writing " + path.string());
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open snapshot " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad snapshot header: " + e.what(), 1);
  }
  ModelSnapshot s;
  std::size_t n = 0;
  try {
    s.architecture = header.at("architecture");
    s.seed = header.at("seed").get<std::uint64_t>();
    s.config = header.value("config", nlohmann::json{});
    n = header.at("param_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad snapshot header: " + e.what(), 1);
  }
  s.parameters.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[8];
    if (!in.read(buf, 8)) throw ValidationError(path.string() + ": parameter blob is truncated");
    std::uint64_t le = 0;
    std::memcpy(&le, buf, 8);
    s.parameters[i] = std::bit_cast<double>(to_le(le));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ValidationError(path.string() + ": trailing bytes after the parameter blob");
  }
  return s;
}

}  // namespace biaslens
