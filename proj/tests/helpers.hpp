#pragma once

#include <atomic>
#include <cstdlib>
#include <unistd.h>
#include <filesystem>
#include <string>
#include <vector>

#include "biaslens/common.hpp"
#include "biaslens/dataset.hpp"

namespace testutil {

using namespace biaslens;

inline AnnotationRecord rec(std::string id, std::string label, Box box = {1, 1, 5, 5},
                            Condition cond = Condition::Normal, ImageSize size = {32, 32}) {
  AnnotationRecord r;
  r.sample_id = std::move(id);
  r.class_label = std::move(label);
  r.bbox = box;
  r.condition = cond;
  r.image_size = size;
  return r;
}

// n records per label, ids "<label>-<i>".
inline DatasetManifest counts_manifest(const std::vector<std::pair<std::string, std::size_t>>& counts,
                                       std::uint64_t seed = 0) {
  std::vector<AnnotationRecord> records;
  for (const auto& [label, n] : counts) {
    for (std::size_t i = 0; i < n; ++i) records.push_back(rec(label + "-" + std::to_string(i), label));
  }
  return make_manifest(std::move(records), seed);
}

// Fresh directory below the system temp dir, removed by the destructor.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("biaslens-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<double> normals(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = scale * standard_normal(rng);
  return v;
}

}  // namespace testutil
