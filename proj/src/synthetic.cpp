#include "biaslens/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "biaslens/common.hpp"
#include "biaslens/sampling.hpp"

namespace biaslens {

SyntheticSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSpec spec;
  std::string head = text;
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    head = text.substr(0, colon);
    const std::string n = text.substr(colon + 1);
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(n, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != n.size() || v < 30) throw ValidationError("synthetic sample count must be an integer >= 30: '" + n + "'");
    spec.samples = static_cast<std::size_t>(v);
  }
  spec.name = head;
  if (head == "balanced") {
    spec.class_fractions = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    return spec;
  }
  const std::string prefix = "imbalanced-";
  if (head.rfind(prefix, 0) == 0) {
    std::vector<double> pct;
    std::string rest = head.substr(prefix.size());
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto dash = rest.find('-', pos);
      const std::string part = rest.substr(pos, dash == std::string::npos ? std::string::npos : dash - pos);
      if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) break;
      pct.push_back(std::stod(part));
      if (dash == std::string::npos) {
        pos = rest.size() + 1;
        break;
      }
      pos = dash + 1;
    }
    const double total = std::accumulate(pct.begin(), pct.end(), 0.0);
    if (pct.size() == 3 && pos == rest.size() + 1 && total == 100.0 &&
        std::all_of(pct.begin(), pct.end(), [](double p) { return p > 0; })) {
      spec.class_fractions = {pct[0] / 100.0, pct[1] / 100.0, pct[2] / 100.0};
      return spec;
    }
  }
  throw ValidationError("unknown synthetic data source '" + text +
                        "' (expected 'balanced' or 'imbalanced-A-B-C' with positive percentages summing to 100)");
}

namespace {

void fill_if(GrayImage& img, const Box& b, double value, auto&& inside) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(b.x2)));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(b.y2)));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      if (inside(x + 0.5, y + 0.5)) img.at(x, y) = value;
    }
  }
}

GrayImage blur3(const GrayImage& img) {
  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) continue;
          s += img.at(xx, yy);
          ++n;
        }
      }
      out.at(x, y) = s / n;
    }
  }
  return out;
}

std::size_t pick(Rng& rng, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = uniform_unit(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_unit(rng); }

struct Rendered {
  GrayImage image;
  Box box;
};

Rendered render(std::size_t cls, Condition cond, int side, double noise, Rng& rng) {
  const double S = side;
  GrayImage img(side, side);
  for (double& p : img.pixels) p = 0.15 + noise * standard_normal(rng);
  const double value = uniform(rng, 0.55, 0.9);
  Box box;
  if (cls == 0) {
    const double w = uniform(rng, 3.0, 6.0), h = uniform(rng, 13.0, 20.0);
    const double x = uniform(rng, 1.0, S - 1.0 - w), y = uniform(rng, 1.0, S - 1.0 - h);
    box = {x, y, x + w, y + h};
    fill_if(img, box, value, [](double, double) { return true; });
  } else {
    const double r = uniform(rng, 3.5, 5.0), gap = uniform(rng, 1.0, 3.0);
    const double w = 4.0 * r + gap, h = 2.0 * r;
    const double x = uniform(rng, 1.0, S - 1.0 - w), y = uniform(rng, 1.0, S - 1.0 - h);
    box = {x, y, x + w, y + h};
    const double cy = y + r, cl = x + r, cr = x + w - r;
    if (cls == 1) {
      const double mid = r - 0.9;
      fill_if(img, box, value, [&](double px, double py) {
        const double d1 = std::hypot(px - cl, py - cy), d2 = std::hypot(px - cr, py - cy);
        return std::abs(d1 - mid) <= 0.9 || std::abs(d2 - mid) <= 0.9;
      });
    } else {
      fill_if(img, box, value, [&](double px, double py) {
        const bool wheel = std::hypot(px - cl, py - cy) <= r - 0.2 || std::hypot(px - cr, py - cy) <= r - 0.2;
        const bool frame = px >= cl && px <= cr && std::abs(py - cy) <= 0.8;
        return wheel || frame;
      });
    }
  }

  const bool dark = cond == Condition::Night || cond == Condition::Mixed;
  const bool wet = cond == Condition::Weather || cond == Condition::Mixed;
  if (wet) {
    img = blur3(img);
    for (double& p : img.pixels) p += noise * standard_normal(rng);
  }
  if (dark) {
    for (double& p : img.pixels) p *= 0.35;
  }
  if (cond == Condition::Rotated) {
    const AugmentOp rot{AugmentKind::Rot90CW, 0.0};
    box = transform_box(box, {side, side}, rot).box;
    img = transform_image(img, rot);
  }
  for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
  return {std::move(img), box};
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.class_fractions.size() != kStudyClasses.size()) {
    throw ValidationError("synthetic spec needs one fraction per study class");
  }
  if (spec.side < 16) throw ValidationError("synthetic image side must be at least 16");
  const std::size_t n = spec.samples;
  std::vector<std::size_t> counts;
  std::size_t assigned = 0;
  for (double f : spec.class_fractions) {
    counts.push_back(static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)));
    assigned += counts.back();
  }
  counts[0] += n - assigned;

  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], c);
  Rng order_rng(mix_seed(seed, stable_hash("synthetic-order")));
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[uniform_index(order_rng, i)]);

  SyntheticData data;
  std::vector<AnnotationRecord> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, i + 1));
    const Condition cond = kAllConditions[pick(rng, spec.condition_fractions)];
    auto r = render(labels[i], cond, spec.side, spec.noise, rng);
    char id[32];
    std::snprintf(id, sizeof id, "syn-%05zu", i);
    AnnotationRecord rec{id, kStudyClasses[labels[i]], r.box, cond, std::nullopt, {spec.side, spec.side}};
    data.images.originals.emplace(rec.sample_id, std::move(r.image));
    records.push_back(std::move(rec));
  }
  data.manifest = make_manifest(std::move(records), seed);
  for (const auto& c : kStudyClasses) data.manifest.taxonomy.insert(c);
  return data;
}

GrayImage SyntheticImages::image_for(const AnnotationRecord& record) const {
  const std::string& id = record.sample_id;
  const auto stop = id.find_first_of("#~");
  const std::string base = id.substr(0, stop);
  const auto it = originals.find(base);
  if (it == originals.end()) throw ValidationError("no synthetic image for sample '" + id + "'");
  GrayImage img = it->second;
  // Replay augmentation suffixes in order; "#dup<k>" segments are copies.
  std::size_t pos = stop;
  while (pos != std::string::npos) {
    const auto next = id.find_first_of("#~", pos + 1);
    const std::string seg = id.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1);
    if (id[pos] == '~') img = transform_image(img, parse_augment_op(seg));
    pos = next;
  }
  return img;
}

GrayImage FileImages::image_for(const AnnotationRecord& record) const {
  if (!record.image_ref) throw ValidationError("record '" + record.sample_id + "' has no image_ref");
  std::filesystem::path p = *record.image_ref;
  if (p.is_relative()) p = base_dir_ / p;
  return read_pgm(p);
}

LabeledSet to_labeled_set(const DatasetManifest& manifest, const ImageProvider& images,
                          const std::vector<std::string>& classes, int side) {
  const std::size_t n = manifest.records.size();
  if (n == 0) throw ValidationError("cannot build model inputs from an empty manifest");
  const auto s = static_cast<std::size_t>(side);
  LabeledSet set{Tensor({n, 1, s, s}), {}, Tensor({n, 4}), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = manifest.records[i];
    const auto it = std::find(classes.begin(), classes.end(), r.class_label);
    if (it == classes.end()) throw ValidationError("record '" + r.sample_id + "' has class outside the model's classes");
    const GrayImage img = images.image_for(r);
    if (img.width != side || img.height != side || r.image_size.width != side || r.image_size.height != side) {
      throw ValidationError("record '" + r.sample_id + "': images must be " + std::to_string(side) + "x" +
                            std::to_string(side));
    }
    std::copy(img.pixels.begin(), img.pixels.end(), set.inputs.row(i).begin());
    const auto t = box_to_target(r.bbox, static_cast<double>(side));
    std::copy(t.begin(), t.end(), set.box_targets.row(i).begin());
    set.labels.push_back(static_cast<int>(it - classes.begin()));
    set.sample_ids.push_back(r.sample_id);
  }
  return set;
}

}  // namespace biaslens
