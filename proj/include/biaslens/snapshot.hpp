#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "biaslens/model.hpp"
#include "json.hpp"

namespace biaslens {

// Parameters plus everything needed to rebuild the model.
struct ModelSnapshot {
  nlohmann::json architecture;
  std::uint64_t seed = 0;
  nlohmann::json config;  // training config, free-form
  std::vector<double> parameters;

  static ModelSnapshot capture(const Model& model, std::uint64_t seed, nlohmann::json config = {});
  std::unique_ptr<Model> restore() const;
};

// One JSON header line, then param_count little-endian float64 values.
void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& snapshot);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

}  // namespace biaslens
