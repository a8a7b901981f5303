#include "biaslens/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "biaslens/behavior.hpp"
#include "biaslens/common.hpp"

namespace biaslens {

std::string_view to_string(ResampleMode m) {
  switch (m) {
    case ResampleMode::Oversample: return "oversample";
    case ResampleMode::Undersample: return "undersample";
    case ResampleMode::Combined: return "combined";
  }
  return "oversample";
}

ResampleMode parse_resample_mode(std::string_view text) {
  if (text == "oversample") return ResampleMode::Oversample;
  if (text == "undersample") return ResampleMode::Undersample;
  if (text == "combined") return ResampleMode::Combined;
  throw ValidationError("unknown resample mode '" + std::string(text) +
                        "' (expected oversample, undersample or combined)");
}

namespace {

std::uint64_t target_for(const ResamplePlan& plan, const std::string& label, std::uint64_t current) {
  const auto it = plan.target_counts.find(label);
  return it == plan.target_counts.end() ? current : it->second;
}

void check_targets_known(const DatasetManifest& manifest, const ResamplePlan& plan) {
  for (const auto& [label, target] : plan.target_counts) {
    if (target > 0 && manifest.indices_of(label).empty()) {
      throw ValidationError("cannot resample class '" + label + "': it has no records");
    }
  }
}

Rng class_rng(const ResamplePlan& plan, const std::string& label) {
  return Rng(mix_seed(plan.seed, stable_hash(label)));
}

// Undersample per class to min(target, count); keeps manifest order.
std::vector<std::size_t> undersample_pass(const DatasetManifest& manifest, const ResamplePlan& plan, bool strict) {
  std::vector<bool> keep(manifest.records.size(), false);
  std::set<std::string> seen;
  for (const auto& r : manifest.records) seen.insert(r.class_label);
  for (const auto& label : seen) {
    auto idx = manifest.indices_of(label);
    const std::uint64_t target = target_for(plan, label, idx.size());
    if (target > idx.size()) {
      if (strict) {
        throw ValidationError("undersample target " + std::to_string(target) + " for class '" + label +
                              "' exceeds its count " + std::to_string(idx.size()));
      }
      for (auto i : idx) keep[i] = true;
      continue;
    }
    Rng rng = class_rng(plan, label);
    // Partial Fisher-Yates: the first `target` slots are a uniform sample.
    for (std::size_t i = 0; i < target; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    for (std::size_t i = 0; i < target; ++i) keep[idx[i]] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.push_back(i);
  }
  return out;
}

// Appends duplicates so each class reaches max(target, count).
std::vector<std::size_t> oversample_pass(const DatasetManifest& manifest, std::vector<std::size_t> base,
                                         const ResamplePlan& plan, bool strict) {
  std::map<std::string, std::vector<std::size_t>> members;
  for (auto i : base) members[manifest.records[i].class_label].push_back(i);
  for (const auto& [label, target] : plan.target_counts) {
    if (target > 0 && members.find(label) == members.end()) {
      throw ValidationError("cannot oversample class '" + label + "': it has no records");
    }
  }
  for (const auto& [label, idx] : members) {
    const std::uint64_t target = target_for(plan, label, idx.size());
    if (target < idx.size()) {
      if (strict) {
        throw ValidationError("oversample target " + std::to_string(target) + " for class '" + label +
                              "' is below its count " + std::to_string(idx.size()));
      }
      continue;
    }
    Rng rng = class_rng(plan, label);
    for (std::uint64_t k = idx.size(); k < target; ++k) base.push_back(idx[uniform_index(rng, idx.size())]);
  }
  return base;
}

std::vector<std::size_t> all_indices(const DatasetManifest& manifest) {
  std::vector<std::size_t> out(manifest.records.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

}  // namespace

std::vector<std::size_t> random_oversample_indices(const DatasetManifest& manifest, const ResamplePlan& plan) {
  check_targets_known(manifest, plan);
  return oversample_pass(manifest, all_indices(manifest), plan, true);
}

std::vector<std::size_t> random_undersample_indices(const DatasetManifest& manifest, const ResamplePlan& plan) {
  check_targets_known(manifest, plan);
  return undersample_pass(manifest, plan, true);
}

std::vector<std::size_t> resample_indices(const DatasetManifest& manifest, const ResamplePlan& plan) {
  switch (plan.mode) {
    case ResampleMode::Oversample: return random_oversample_indices(manifest, plan);
    case ResampleMode::Undersample: return random_undersample_indices(manifest, plan);
    case ResampleMode::Combined: break;
  }
  check_targets_known(manifest, plan);
  return oversample_pass(manifest, undersample_pass(manifest, plan, false), plan, false);
}

DatasetManifest select_records(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
  DatasetManifest out;
  out.taxonomy = manifest.taxonomy;
  out.seed = manifest.seed;
  out.records.reserve(indices.size());
  std::set<std::string> used;
  for (auto i : indices) used.insert(manifest.records.at(i).sample_id);
  std::map<std::size_t, int> seen;
  for (auto i : indices) {
    AnnotationRecord r = manifest.records.at(i);
    const int k = seen[i]++;
    if (k > 0) {
      // Skip suffixes that collide with ids already present.
      int n = k;
      std::string id = r.sample_id + "#dup" + std::to_string(n);
      while (used.count(id)) id = r.sample_id + "#dup" + std::to_string(++n);
      seen[i] = n + 1;
      r.sample_id = id;
      used.insert(id);
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

DatasetManifest random_oversample(const DatasetManifest& manifest, const ResamplePlan& plan) {
  const auto idx = random_oversample_indices(manifest, plan);
  return select_records(manifest, idx);
}

DatasetManifest random_undersample(const DatasetManifest& manifest, const ResamplePlan& plan) {
  const auto idx = random_undersample_indices(manifest, plan);
  return select_records(manifest, idx);
}

DatasetManifest apply_resample(const DatasetManifest& manifest, const ResamplePlan& plan) {
  const auto idx = resample_indices(manifest, plan);
  return select_records(manifest, idx);
}

namespace {

ResamplePlan plan_to(const ClassDistribution& dist, std::uint64_t target, ResampleMode mode, std::uint64_t seed) {
  ResamplePlan p;
  p.mode = mode;
  p.seed = seed;
  for (const auto& [label, count] : dist.counts) {
    if (count > 0) p.target_counts[label] = target;
  }
  return p;
}

std::vector<std::uint64_t> positive_counts(const ClassDistribution& dist) {
  std::vector<std::uint64_t> v;
  for (const auto& [label, count] : dist.counts) {
    if (count > 0) v.push_back(count);
  }
  if (v.empty()) throw ValidationError("distribution has no observed classes");
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

ResamplePlan plan_to_max(const ClassDistribution& dist, std::uint64_t seed) {
  return plan_to(dist, positive_counts(dist).back(), ResampleMode::Oversample, seed);
}

ResamplePlan plan_to_min(const ClassDistribution& dist, std::uint64_t seed) {
  return plan_to(dist, positive_counts(dist).front(), ResampleMode::Undersample, seed);
}

ResamplePlan plan_to_median(const ClassDistribution& dist, std::uint64_t seed) {
  const auto v = positive_counts(dist);
  const std::size_t m = v.size() / 2;
  const std::uint64_t median = v.size() % 2 == 1 ? v[m] : (v[m - 1] + v[m]) / 2;
  return plan_to(dist, median, ResampleMode::Combined, seed);
}

// ---------------------------------------------------------------------------

SubsetSchedule build_subset_schedule(std::span<const std::string> classes, std::uint64_t budget,
                                     double start_share, double end_share, int n_steps) {
  const std::size_t k = classes.size();
  if (k < 2) throw ValidationError("subset schedule needs at least two classes");
  if (budget < k) {
    throw ValidationError("subset budget " + std::to_string(budget) + " is smaller than the class count " +
                          std::to_string(k));
  }
  if (n_steps < 1) throw ValidationError("subset schedule needs n_steps >= 1");
  if (!(end_share > 0.0 && end_share <= start_share && start_share <= 1.0)) {
    throw ValidationError("subset shares must satisfy 0 < end <= start <= 1");
  }
  SubsetSchedule s;
  for (int i = 0; i < n_steps; ++i) {
    const double t = n_steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n_steps - 1);
    const double share = start_share + (end_share - start_share) * t;
    SubsetStep step{classes[0], share, budget, {}};
    // The epsilon keeps shares like 0.67 * 300 from flooring to 200.
    std::uint64_t dominant = static_cast<std::uint64_t>(std::floor(share * static_cast<double>(budget) + 1e-9));
    dominant = std::min(dominant, budget);
    const std::uint64_t rest = budget - dominant;
    const std::uint64_t each = rest / (k - 1);
    for (std::size_t c = 1; c < k; ++c) step.allocation[classes[c]] = each;
    step.allocation[classes[0]] = budget - each * (k - 1);
    s.steps.push_back(std::move(step));
  }
  return s;
}

std::vector<std::size_t> draw_subset_indices(const DatasetManifest& manifest, const SubsetStep& step,
                                             std::uint64_t seed) {
  std::vector<std::size_t> out;
  for (const auto& [label, n] : step.allocation) {
    auto idx = manifest.indices_of(label);
    if (idx.size() < n) {
      throw ValidationError("class '" + label + "' has " + std::to_string(idx.size()) + " records, step needs " +
                            std::to_string(n));
    }
    Rng rng(mix_seed(seed, stable_hash(label)));
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

bool AugmentOp::is_geometric() const {
  return kind != AugmentKind::Brightness && kind != AugmentKind::Contrast;
}

bool AugmentOp::is_invertible() const { return is_geometric() && kind != AugmentKind::Zoom; }

namespace {

std::string format_param(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::string AugmentOp::name() const {
  switch (kind) {
    case AugmentKind::Rot90CW: return "rot90";
    case AugmentKind::Rot180: return "rot180";
    case AugmentKind::Rot270CW: return "rot270";
    case AugmentKind::FlipH: return "flip_h";
    case AugmentKind::FlipV: return "flip_v";
    case AugmentKind::Brightness: return "brightness:" + format_param(param);
    case AugmentKind::Contrast: return "contrast:" + format_param(param);
    case AugmentKind::Zoom: return "zoom:" + format_param(param);
  }
  return "";
}

AugmentOp parse_augment_op(std::string_view text) {
  const auto colon = text.find(':');
  const std::string head(text.substr(0, colon));
  static const std::map<std::string, AugmentKind> kinds = {
      {"rot90", AugmentKind::Rot90CW},       {"rot180", AugmentKind::Rot180}, {"rot270", AugmentKind::Rot270CW},
      {"flip_h", AugmentKind::FlipH},        {"flip_v", AugmentKind::FlipV},  {"brightness", AugmentKind::Brightness},
      {"contrast", AugmentKind::Contrast},   {"zoom", AugmentKind::Zoom}};
  const auto it = kinds.find(head);
  if (it == kinds.end()) throw ValidationError("unknown augmentation '" + std::string(text) + "'");
  AugmentOp op{it->second, 0.0};
  const bool needs_param = !op.is_invertible();
  if (needs_param != (colon != std::string_view::npos)) {
    throw ValidationError("augmentation '" + std::string(text) + "': " +
                          (needs_param ? "missing parameter" : "takes no parameter"));
  }
  if (needs_param) {
    const std::string value(text.substr(colon + 1));
    std::size_t used = 0;
    try {
      op.param = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty() || !std::isfinite(op.param)) {
      throw ValidationError("augmentation '" + std::string(text) + "': bad parameter");
    }
    if ((op.kind == AugmentKind::Zoom || op.kind == AugmentKind::Contrast) && op.param <= 0.0) {
      throw ValidationError("augmentation '" + std::string(text) + "': factor must be positive");
    }
  }
  return op;
}

AugmentOp inverse(const AugmentOp& op) {
  switch (op.kind) {
    case AugmentKind::Rot90CW: return {AugmentKind::Rot270CW, 0.0};
    case AugmentKind::Rot270CW: return {AugmentKind::Rot90CW, 0.0};
    case AugmentKind::Rot180:
    case AugmentKind::FlipH:
    case AugmentKind::FlipV: return op;
    default: break;
  }
  throw ValidationError("augmentation '" + op.name() + "' has no exact inverse");
}

TransformedBox transform_box(const Box& b, ImageSize size, const AugmentOp& op) {
  const double W = size.width, H = size.height;
  switch (op.kind) {
    case AugmentKind::FlipH: return {{W - b.x2, b.y1, W - b.x1, b.y2}, size};
    case AugmentKind::FlipV: return {{b.x1, H - b.y2, b.x2, H - b.y1}, size};
    case AugmentKind::Rot90CW: return {{H - b.y2, b.x1, H - b.y1, b.x2}, {size.height, size.width}};
    case AugmentKind::Rot180: return {{W - b.x2, H - b.y2, W - b.x1, H - b.y1}, size};
    case AugmentKind::Rot270CW: return {{b.y1, W - b.x2, b.y2, W - b.x1}, {size.height, size.width}};
    case AugmentKind::Zoom: {
      if (op.param <= 0.0) throw ValidationError("zoom factor must be positive");
      const double cx = W / 2, cy = H / 2, f = op.param;
      Box z{std::clamp(cx + (b.x1 - cx) * f, 0.0, W), std::clamp(cy + (b.y1 - cy) * f, 0.0, H),
            std::clamp(cx + (b.x2 - cx) * f, 0.0, W), std::clamp(cy + (b.y2 - cy) * f, 0.0, H)};
      if (!(z.x1 < z.x2 && z.y1 < z.y2)) throw ValidationError("zoom pushes the box out of the frame");
      return {z, size};
    }
    case AugmentKind::Brightness: return {b, size};
    case AugmentKind::Contrast:
      if (op.param <= 0.0) throw ValidationError("contrast factor must be positive");
      return {b, size};
  }
  return {b, size};
}

GrayImage transform_image(const GrayImage& img, const AugmentOp& op) {
  const int W = img.width, H = img.height;
  switch (op.kind) {
    case AugmentKind::FlipH: {
      GrayImage out(W, H);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(W - 1 - x, y) = img.at(x, y);
      return out;
    }
    case AugmentKind::FlipV: {
      GrayImage out(W, H);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(x, H - 1 - y) = img.at(x, y);
      return out;
    }
    case AugmentKind::Rot90CW: {
      GrayImage out(H, W);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(H - 1 - y, x) = img.at(x, y);
      return out;
    }
    case AugmentKind::Rot180: {
      GrayImage out(W, H);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(W - 1 - x, H - 1 - y) = img.at(x, y);
      return out;
    }
    case AugmentKind::Rot270CW: {
      GrayImage out(H, W);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(y, W - 1 - x) = img.at(x, y);
      return out;
    }
    case AugmentKind::Zoom: {
      if (op.param <= 0.0) throw ValidationError("zoom factor must be positive");
      // Nearest-neighbour resample about the center; outside pixels are 0.
      GrayImage out(W, H);
      const double cx = W / 2.0, cy = H / 2.0;
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double sx = cx + (x + 0.5 - cx) / op.param;
          const double sy = cy + (y + 0.5 - cy) / op.param;
          const int ix = static_cast<int>(std::floor(sx)), iy = static_cast<int>(std::floor(sy));
          if (ix >= 0 && ix < W && iy >= 0 && iy < H) out.at(x, y) = img.at(ix, iy);
        }
      }
      return out;
    }
    case AugmentKind::Brightness: {
      GrayImage out = img;
      for (double& p : out.pixels) p = std::clamp(p + op.param, 0.0, 1.0);
      return out;
    }
    case AugmentKind::Contrast: {
      if (op.param <= 0.0) throw ValidationError("contrast factor must be positive");
      GrayImage out = img;
      double mean = 0.0;
      for (double p : img.pixels) mean += p;
      mean /= static_cast<double>(std::max<std::size_t>(1, img.pixels.size()));
      for (double& p : out.pixels) p = std::clamp((p - mean) * op.param + mean, 0.0, 1.0);
      return out;
    }
  }
  return img;
}

AugmentedRecord apply_augment(const AnnotationRecord& record, const AugmentOp& op, const GrayImage* image) {
  validate(record);
  const auto tb = transform_box(record.bbox, record.image_size, op);
  AugmentedRecord out;
  out.record = record;
  out.record.bbox = tb.box;
  out.record.image_size = tb.size;
  out.record.sample_id = record.sample_id + "~" + op.name();
  if (image != nullptr) {
    if (image->width != record.image_size.width || image->height != record.image_size.height) {
      throw ValidationError("image of '" + record.sample_id + "' does not match its image_size");
    }
    out.image = transform_image(*image, op);
  }
  return out;
}

// ---------------------------------------------------------------------------

AugmentOp augment_for_condition(Condition c) {
  switch (c) {
    case Condition::Night: return {AugmentKind::Brightness, 0.25};
    case Condition::Weather: return {AugmentKind::Contrast, 1.5};
    case Condition::Rotated: return {AugmentKind::Rot90CW, 0.0};
    case Condition::Mixed: return {AugmentKind::Contrast, 1.5};
    case Condition::Normal: return {AugmentKind::Zoom, 0.8};
  }
  return {AugmentKind::FlipH, 0.0};
}

std::vector<AugmentRequest> attention_guided_augment_plan(const AttentionSummary& summary,
                                                          const ClassDistribution& dist,
                                                          const AttentionPlanOptions& options) {
  if (!(options.tau_att > 0.0) || options.kappa < 0.0) {
    throw ValidationError("attention plan needs tau_att > 0 and kappa >= 0");
  }
  std::vector<AugmentRequest> plan;
  for (const auto& [label, per_cond] : summary.mass_on_gt) {
    for (const auto& [cond, gm] : per_cond) {
      if (gm.count == 0 || !(gm.mean < options.tau_att)) continue;
      std::uint64_t n = 0;
      const auto pc = dist.per_condition.find(cond);
      if (pc != dist.per_condition.end()) {
        const auto it = pc->second.find(label);
        if (it != pc->second.end()) n = it->second;
      }
      const double want = options.kappa * (options.tau_att - gm.mean) / options.tau_att * static_cast<double>(n);
      const auto count = static_cast<std::uint64_t>(std::ceil(want - 1e-9));
      if (count == 0) continue;
      plan.push_back({label, cond, augment_for_condition(cond), count});
    }
  }
  return plan;
}

std::vector<std::string> lrp_informed_sample_plan(std::span<const RelevanceStat> relevances,
                                                  std::span<const std::string> misclassified, double tau_rel) {
  const std::set<std::string> wrong(misclassified.begin(), misclassified.end());
  std::vector<const RelevanceStat*> picked;
  for (const auto& r : relevances) {
    if (wrong.count(r.sample_id) && r.inbox_fraction < tau_rel) picked.push_back(&r);
  }
  std::stable_sort(picked.begin(), picked.end(),
                   [](const RelevanceStat* a, const RelevanceStat* b) { return a->loss > b->loss; });
  std::vector<std::string> out;
  for (const auto* r : picked) out.push_back(r->sample_id);
  return out;
}

std::vector<std::pair<std::size_t, AugmentOp>> expand_augment_requests(const DatasetManifest& manifest,
                                                                       std::span<const AugmentRequest> requests,
                                                                       std::uint64_t seed) {
  std::vector<std::pair<std::size_t, AugmentOp>> out;
  for (const auto& req : requests) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto& r = manifest.records[i];
      if (r.class_label == req.class_label && r.condition == req.condition) pool.push_back(i);
    }
    if (pool.empty()) continue;
    Rng rng(mix_seed(mix_seed(seed, stable_hash(req.class_label)), static_cast<std::uint64_t>(req.condition)));
    for (std::uint64_t k = 0; k < req.count; ++k) out.emplace_back(pool[uniform_index(rng, pool.size())], req.op);
  }
  return out;
}

}  // namespace biaslens
