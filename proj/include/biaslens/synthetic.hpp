#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "biaslens/dataset.hpp"
#include "biaslens/image.hpp"
#include "biaslens/train.hpp"

namespace biaslens {

// The three study classes, in taxonomy order.
inline const std::vector<std::string> kStudyClasses = {"human.pedestrian.adult", "vehicle.bicycle",
                                                       "vehicle.motorcycle"};

struct SyntheticSpec {
  std::string name = "imbalanced-90-5-5";
  std::vector<double> class_fractions = {0.90, 0.05, 0.05};  // aligned with kStudyClasses
  std::size_t samples = 3000;
  int side = 32;
  // Normal, Night, Weather, Rotated, Mixed.
  std::vector<double> condition_fractions = {0.55, 0.15, 0.12, 0.12, 0.06};
  double noise = 0.08;
};

// "balanced" or "imbalanced-<a>-<b>-<c>" with integer percentages summing
// to 100. Optional ":<n>" suffix sets the sample count.
SyntheticSpec parse_synthetic_spec(const std::string& text);

// Supplies the pixels of a record.
class ImageProvider {
 public:
  virtual ~ImageProvider() = default;
  virtual GrayImage image_for(const AnnotationRecord& record) const = 0;
};

// In-memory originals keyed by sample id. Ids carrying "#dup<k>" map to their
// source; each "~<op>" suffix replays that augmentation on the source pixels.
class SyntheticImages final : public ImageProvider {
 public:
  std::map<std::string, GrayImage> originals;
  GrayImage image_for(const AnnotationRecord& record) const override;
};

// Reads image_ref (relative paths resolve against base_dir).
class FileImages final : public ImageProvider {
 public:
  explicit FileImages(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) {}
  GrayImage image_for(const AnnotationRecord& record) const override;

 private:
  std::filesystem::path base_dir_;
};

struct SyntheticData {
  DatasetManifest manifest;
  SyntheticImages images;
};

// Class-distinct shapes on a noisy background: a tall bar (pedestrian), two
// rings (bicycle), two filled discs joined by a frame bar (motorcycle).
// Conditions are corruptions: Night darkens, Weather blurs and adds noise,
// Rotated turns the frame by 90 degrees, Mixed combines night and weather.
SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Images as N x 1 x S x S inputs, labels as indices into `classes`, box
// targets normalized by the image side.
LabeledSet to_labeled_set(const DatasetManifest& manifest, const ImageProvider& images,
                          const std::vector<std::string>& classes, int side);

}  // namespace biaslens
