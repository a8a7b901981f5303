#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace biaslens {

// Axis-aligned box in pixel units, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  bool operator==(const Box&) const = default;
};

// Data-condition tags; the set is closed.
enum class Condition { Normal, Night, Weather, Rotated, Mixed };

inline constexpr Condition kAllConditions[] = {Condition::Normal, Condition::Night, Condition::Weather,
                                               Condition::Rotated, Condition::Mixed};

std::string_view to_string(Condition c);
// Throws ValidationError on anything outside the five tags.
Condition parse_condition(std::string_view text);

struct ImageSize {
  int width = 0;
  int height = 0;
  bool operator==(const ImageSize&) const = default;
};

struct AnnotationRecord {
  std::string sample_id;
  std::string class_label;
  Box bbox;
  Condition condition = Condition::Normal;
  std::optional<std::string> image_ref;
  ImageSize image_size;

  bool operator==(const AnnotationRecord&) const = default;
};

// Throws ValidationError naming the record when an invariant is broken.
void validate(const AnnotationRecord& record);

struct DatasetManifest {
  std::vector<AnnotationRecord> records;
  std::set<std::string> taxonomy;
  std::uint64_t seed = 0;

  // Records of one class, in canonical order.
  std::vector<std::size_t> indices_of(const std::string& label) const;
  // Labels in taxonomy order that have at least one record.
  std::vector<std::string> observed_labels() const;
};

// Builds a manifest whose taxonomy is the union of the records' labels.
DatasetManifest make_manifest(std::vector<AnnotationRecord> records, std::uint64_t seed = 0);

// JSON Lines. An optional header object {"taxonomy": [...], "seed": n} may
// appear on the first line; every other line is one record.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(std::istream& in);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
void write_manifest(std::ostream& out, const DatasetManifest& manifest);

struct ClassDistribution {
  std::map<std::string, std::uint64_t> counts;
  std::map<std::string, double> percentages;
  std::map<Condition, std::map<std::string, std::uint64_t>> per_condition;
  std::uint64_t total = 0;

  double fraction(const std::string& label) const;
};

ClassDistribution compute_distribution(const DatasetManifest& manifest);
// Same statistics from bare counts (no condition breakdown).
ClassDistribution distribution_from_counts(const std::map<std::string, std::uint64_t>& counts);

// Share of `label`'s instances per observed condition, in percent.
std::map<Condition, double> condition_breakdown(const ClassDistribution& dist, const std::string& label);

// Total count over labels that equal `prefix` or start with `prefix + "."`.
std::uint64_t count_with_prefix(const ClassDistribution& dist, std::string_view prefix);

}  // namespace biaslens
