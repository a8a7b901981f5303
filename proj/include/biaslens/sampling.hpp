#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "biaslens/dataset.hpp"
#include "biaslens/image.hpp"

namespace biaslens {

struct AttentionSummary;

// ---------------------------------------------------------------------------
// Random over/under-sampling

enum class ResampleMode { Oversample, Undersample, Combined };

std::string_view to_string(ResampleMode m);
ResampleMode parse_resample_mode(std::string_view text);

// Classes missing from target_counts are passed through unchanged.
struct ResamplePlan {
  std::map<std::string, std::uint64_t> target_counts;
  ResampleMode mode = ResampleMode::Oversample;
  std::uint64_t seed = 0;
};

// Index-level resampling. Output lists originals (in manifest order) first,
// then duplicates; the same index may appear more than once.
std::vector<std::size_t> random_oversample_indices(const DatasetManifest& manifest, const ResamplePlan& plan);
std::vector<std::size_t> random_undersample_indices(const DatasetManifest& manifest, const ResamplePlan& plan);
// Combined: undersample classes above target, then oversample those below.
std::vector<std::size_t> resample_indices(const DatasetManifest& manifest, const ResamplePlan& plan);

// Builds a manifest from an index list. Repeated indices get unique sample ids
// of the form "<id>#dup<k>".
DatasetManifest select_records(const DatasetManifest& manifest, std::span<const std::size_t> indices);

DatasetManifest random_oversample(const DatasetManifest& manifest, const ResamplePlan& plan);
DatasetManifest random_undersample(const DatasetManifest& manifest, const ResamplePlan& plan);
DatasetManifest apply_resample(const DatasetManifest& manifest, const ResamplePlan& plan);

// Every observed class targeted at the largest / smallest / median count.
// The median of an even number of classes is the floor of the middle pair's mean.
ResamplePlan plan_to_max(const ClassDistribution& dist, std::uint64_t seed);
ResamplePlan plan_to_min(const ClassDistribution& dist, std::uint64_t seed);
ResamplePlan plan_to_median(const ClassDistribution& dist, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dominant-share subset schedule

struct SubsetStep {
  std::string dominant_class;
  double dominant_share = 1.0;
  std::uint64_t budget = 0;
  std::map<std::string, std::uint64_t> allocation;
};

struct SubsetSchedule {
  std::vector<SubsetStep> steps;
};

// classes[0] is the dominant class. Its share moves linearly from
// start_share to end_share over n_steps; it receives floor(share * budget),
// the others split the rest equally (floor) and any leftover goes back to
// the dominant class.
SubsetSchedule build_subset_schedule(std::span<const std::string> classes, std::uint64_t budget,
                                     double start_share, double end_share, int n_steps);

// Draws the step's allocation without replacement from the manifest.
std::vector<std::size_t> draw_subset_indices(const DatasetManifest& manifest, const SubsetStep& step,
                                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentKind { Rot90CW, Rot180, Rot270CW, FlipH, FlipV, Brightness, Contrast, Zoom };

struct AugmentOp {
  AugmentKind kind = AugmentKind::FlipH;
  // Brightness: additive delta. Contrast and Zoom: positive factor.
  double param = 0.0;

  bool is_geometric() const;
  // Rotations and flips: exact bijections on boxes.
  bool is_invertible() const;
  std::string name() const;

  bool operator==(const AugmentOp&) const = default;
};

// Accepts "flip_h", "rot90", "brightness:0.2", "zoom:0.8", ...
AugmentOp parse_augment_op(std::string_view text);
AugmentOp inverse(const AugmentOp& op);

struct TransformedBox {
  Box box;
  ImageSize size;
};

TransformedBox transform_box(const Box& box, ImageSize size, const AugmentOp& op);
GrayImage transform_image(const GrayImage& image, const AugmentOp& op);

struct AugmentedRecord {
  AnnotationRecord record;
  std::optional<GrayImage> image;
};

// The new record keeps class and condition; its sample id gains "~<op>".
AugmentedRecord apply_augment(const AnnotationRecord& record, const AugmentOp& op,
                              const GrayImage* image = nullptr);

// ---------------------------------------------------------------------------
// Plans driven by behavior analysis

struct AugmentRequest {
  std::string class_label;
  Condition condition = Condition::Normal;
  AugmentOp op;
  std::uint64_t count = 0;
};

struct AttentionPlanOptions {
  double tau_att = 0.3;
  double kappa = 1.0;
};

// Operation used to emphasise a condition (night -> brightness, ...).
AugmentOp augment_for_condition(Condition c);

// For each (class, condition) whose mean attention mass on ground-truth boxes
// is below tau_att, request ceil(kappa * (tau_att - mass) / tau_att * n)
// augmented samples, n being that group's current count.
std::vector<AugmentRequest> attention_guided_augment_plan(const AttentionSummary& summary,
                                                          const ClassDistribution& dist,
                                                          const AttentionPlanOptions& options = {});

struct RelevanceStat {
  std::string sample_id;
  double inbox_fraction = 0.0;
  double loss = 0.0;
};

// Misclassified samples whose in-box relevance fraction is below tau_rel,
// highest loss first.
std::vector<std::string> lrp_informed_sample_plan(std::span<const RelevanceStat> relevances,
                                                  std::span<const std::string> misclassified,
                                                  double tau_rel = 0.5);

// Picks `count` source records per request (uniform, with replacement, seeded
// per group) and returns their indices paired with the op to apply.
std::vector<std::pair<std::size_t, AugmentOp>> expand_augment_requests(
    const DatasetManifest& manifest, std::span<const AugmentRequest> requests, std::uint64_t seed);

}  // namespace biaslens
