#include "biaslens/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "biaslens/common.hpp"
#include "json.hpp"

namespace biaslens {

using nlohmann::json;

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::Normal: return "Normal";
    case Condition::Night: return "Night";
    case Condition::Weather: return "Weather";
    case Condition::Rotated: return "Rotated";
    case Condition::Mixed: return "Mixed";
  }
  return "?";
}

Condition parse_condition(std::string_view text) {
  for (Condition c : kAllConditions) {
    if (to_string(c) == text) return c;
  }
  throw ValidationError("unknown condition '" + std::string(text) +
                        "' (expected Normal, Night, Weather, Rotated or Mixed)");
}

void validate(const AnnotationRecord& r) {
  const std::string who = "record '" + r.sample_id + "': ";
  if (r.class_label.empty()) throw ValidationError(who + "class_label is empty");
  if (r.image_size.width <= 0 || r.image_size.height <= 0) {
    throw ValidationError(who + "image_size must be positive");
  }
  const Box& b = r.bbox;
  if (!std::isfinite(b.x1) || !std::isfinite(b.y1) || !std::isfinite(b.x2) || !std::isfinite(b.y2)) {
    throw ValidationError(who + "bbox has non-finite coordinates");
  }
  if (!(b.x1 < b.x2)) throw ValidationError(who + "bbox requires x1 < x2");
  if (!(b.y1 < b.y2)) throw ValidationError(who + "bbox requires y1 < y2");
  if (b.x1 < 0 || b.y1 < 0 || b.x2 > r.image_size.width || b.y2 > r.image_size.height) {
    throw ValidationError(who + "bbox outside image bounds");
  }
}

std::vector<std::size_t> DatasetManifest::indices_of(const std::string& label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].class_label == label) out.push_back(i);
  }
  return out;
}

std::vector<std::string> DatasetManifest::observed_labels() const {
  std::set<std::string> seen;
  for (const auto& r : records) seen.insert(r.class_label);
  return {seen.begin(), seen.end()};
}

DatasetManifest make_manifest(std::vector<AnnotationRecord> records, std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (const auto& r : records) m.taxonomy.insert(r.class_label);
  m.records = std::move(records);
  return m;
}

namespace {

AnnotationRecord record_from_json(const json& j) {
  AnnotationRecord r;
  r.sample_id = j.at("sample_id").get<std::string>();
  r.class_label = j.at("class_label").get<std::string>();
  const auto& bb = j.at("bbox");
  if (!bb.is_array() || bb.size() != 4) throw ValidationError("bbox must be a 4-element array");
  r.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
  r.condition = parse_condition(j.at("condition").get<std::string>());
  if (j.contains("image_ref") && !j["image_ref"].is_null()) r.image_ref = j["image_ref"].get<std::string>();
  const auto& sz = j.at("image_size");
  if (!sz.is_array() || sz.size() != 2) throw ValidationError("image_size must be a 2-element array");
  r.image_size = {sz[0].get<int>(), sz[1].get<int>()};
  return r;
}

json record_to_json(const AnnotationRecord& r) {
  json j;
  j["sample_id"] = r.sample_id;
  j["class_label"] = r.class_label;
  j["bbox"] = {r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2};
  j["condition"] = std::string(to_string(r.condition));
  if (r.image_ref) j["image_ref"] = *r.image_ref;
  j["image_size"] = {r.image_size.width, r.image_size.height};
  return j;
}

}  // namespace

DatasetManifest parse_manifest(std::istream& in) {
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError("line " + std::to_string(lineno) + ": expected a JSON object", lineno);
    if (!j.contains("sample_id") && j.contains("taxonomy")) {
      for (const auto& label : j["taxonomy"]) m.taxonomy.insert(label.get<std::string>());
      if (j.contains("seed")) m.seed = j["seed"].get<std::uint64_t>();
      continue;
    }
    AnnotationRecord r;
    try {
      r = record_from_json(j);
      validate(r);
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
    m.taxonomy.insert(r.class_label);
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  return parse_manifest(in);
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  json header;
  header["taxonomy"] = json::array();
  for (const auto& t : manifest.taxonomy) header["taxonomy"].push_back(t);
  header["seed"] = manifest.seed;
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  write_manifest(out, manifest);
}

double ClassDistribution::fraction(const std::string& label) const {
  return percentages.at(label) / 100.0;
}

ClassDistribution distribution_from_counts(const std::map<std::string, std::uint64_t>& counts) {
  ClassDistribution d;
  d.counts = counts;
  for (const auto& [label, n] : counts) d.total += n;
  if (d.total == 0) throw ValidationError("distribution is undefined for an empty dataset");
  for (const auto& [label, n] : counts) {
    d.percentages[label] = 100.0 * static_cast<double>(n) / static_cast<double>(d.total);
  }
  return d;
}

ClassDistribution compute_distribution(const DatasetManifest& manifest) {
  if (manifest.records.empty()) throw ValidationError("distribution is undefined for an empty manifest");
  std::map<std::string, std::uint64_t> counts;
  std::map<Condition, std::map<std::string, std::uint64_t>> per_condition;
  for (const auto& r : manifest.records) {
    ++counts[r.class_label];
    ++per_condition[r.condition][r.class_label];
  }
  ClassDistribution d = distribution_from_counts(counts);
  d.per_condition = std::move(per_condition);
  return d;
}

std::map<Condition, double> condition_breakdown(const ClassDistribution& dist, const std::string& label) {
  const auto it = dist.counts.find(label);
  if (it == dist.counts.end()) throw ValidationError("unknown class '" + label + "'");
  std::map<Condition, double> out;
  const double n = static_cast<double>(it->second);
  for (const auto& [cond, by_class] : dist.per_condition) {
    const auto c = by_class.find(label);
    if (c != by_class.end() && c->second > 0) out[cond] = 100.0 * static_cast<double>(c->second) / n;
  }
  return out;
}

std::uint64_t count_with_prefix(const ClassDistribution& dist, std::string_view prefix) {
  std::uint64_t n = 0;
  for (const auto& [label, c] : dist.counts) {
    if (label == prefix || (label.size() > prefix.size() && label.starts_with(prefix) && label[prefix.size()] == '.')) {
      n += c;
    }
  }
  return n;
}

}  // namespace biaslens
