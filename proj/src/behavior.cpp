#include "biaslens/behavior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "biaslens/batch.hpp"
#include "biaslens/common.hpp"
#include "biaslens/image.hpp"
#include "biaslens/kernels.hpp"
#include "biaslens/tiny_vit.hpp"

namespace biaslens {

double selectivity(double a_c, double a_avg) {
  const double m = std::max(a_c, a_avg);
  if (!(m > 0.0)) return 0.0;
  return (a_c - a_avg) / m;
}

std::vector<double> selectivity_scores(std::span<const double> class_means) {
  const double avg =
      std::accumulate(class_means.begin(), class_means.end(), 0.0) / static_cast<double>(class_means.size());
  std::vector<double> out;
  out.reserve(class_means.size());
  for (double a : class_means) out.push_back(selectivity(a, avg));
  return out;
}

namespace {

double mean_abs(std::span<const double> g) {
  double s = 0.0;
  for (double v : g) s += std::abs(v);
  return s / static_cast<double>(g.size());
}

std::vector<ForwardCache> eval_caches(const Model& model, const Tensor& samples) {
  ForwardOptions opts;
  return forward(model, samples, opts).caches;
}

}  // namespace

double sensitivity_score(const Model& model, const Tensor& samples, std::size_t layer, std::size_t neuron,
                         bool* dead) {
  check_batch_shape(model, samples);
  const std::size_t n = samples.dim(0);
  if (n == 0) throw ValidationError("sensitivity_score: no samples");
  const auto caches = eval_caches(model, samples);
  std::vector<double> per_sample(n, 0.0);
  const bool parallel = default_policy() == ExecPolicy::Parallel;
#pragma omp parallel for if (parallel) schedule(dynamic, 1)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    std::vector<double> g(model.input_size(), 0.0);
    model.probe_input_gradient(samples.row(i), caches[i], layer, neuron, g);
    per_sample[i] = mean_abs(g);
  }
  double total = 0.0;
  for (double v : per_sample) total += v;
  if (dead != nullptr) *dead = total == 0.0;
  return total / static_cast<double>(n);
}

ClassActivations class_mean_activations(const Model& model, const LabeledSet& probe, std::size_t num_classes) {
  const auto layers = model.probe_layers();
  const auto caches = eval_caches(model, probe.inputs);
  ClassActivations sums(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    sums[l].assign(layers[l].width, std::vector<double>(num_classes, 0.0));
  }
  std::vector<double> counts(num_classes, 0.0);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const auto c = static_cast<std::size_t>(probe.labels[i]);
    counts[c] += 1.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<double> act(layers[l].width);
      model.probe_activations(caches[i], l, act);
      for (std::size_t u = 0; u < act.size(); ++u) sums[l][u][c] += act[u];
    }
  }
  for (auto& layer : sums) {
    for (auto& unit : layer) {
      for (std::size_t c = 0; c < num_classes; ++c) unit[c] = counts[c] > 0 ? unit[c] / counts[c] : 0.0;
    }
  }
  return sums;
}

double BehaviorScores::class_selectivity(std::size_t c) const {
  if (selectivity.empty()) return 0.0;
  double total = 0.0;
  for (const auto& layer : selectivity) {
    double best = -1.0;
    for (const auto& unit : layer) best = std::max(best, unit[c]);
    total += best;
  }
  return total / static_cast<double>(selectivity.size());
}

std::vector<double> BehaviorScores::class_selectivity() const {
  std::vector<double> out;
  for (std::size_t c = 0; c < classes.size(); ++c) out.push_back(class_selectivity(c));
  return out;
}

double BehaviorScores::class_sensitivity(std::size_t c) const {
  double total = 0.0;
  std::size_t units = 0;
  for (const auto& layer : sensitivity) {
    for (const auto& unit : layer) {
      total += unit[c];
      ++units;
    }
  }
  return units == 0 ? 0.0 : total / static_cast<double>(units);
}

BehaviorScores compute_behavior(const Model& model, const LabeledSet& probe, const std::vector<std::string>& classes,
                                bool with_sensitivity, int epoch) {
  const std::size_t k = classes.size();
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < probe.size(); ++i) by_class.at(static_cast<std::size_t>(probe.labels[i])).push_back(i);
  for (std::size_t c = 0; c < k; ++c) {
    if (by_class[c].empty()) throw ValidationError("probe set has no samples of class '" + classes[c] + "'");
  }

  BehaviorScores s;
  s.epoch = epoch;
  s.classes = classes;
  s.layers = model.probe_layers();
  const auto means = class_mean_activations(model, probe, k);
  s.selectivity.resize(means.size());
  for (std::size_t l = 0; l < means.size(); ++l) {
    for (const auto& unit : means[l]) s.selectivity[l].push_back(selectivity_scores(unit));
  }
  if (!with_sensitivity) return s;

  std::vector<LabeledSet> subsets;
  for (std::size_t c = 0; c < k; ++c) subsets.push_back(probe.subset(by_class[c]));
  s.sensitivity.resize(s.layers.size());
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    s.sensitivity[l].assign(s.layers[l].width, std::vector<double>(k, 0.0));
    for (std::size_t u = 0; u < s.layers[l].width; ++u) {
      bool all_dead = true;
      for (std::size_t c = 0; c < k; ++c) {
        bool dead = false;
        s.sensitivity[l][u][c] = sensitivity_score(model, subsets[c].inputs, l, u, &dead);
        all_dead = all_dead && dead;
      }
      if (all_dead) s.dead_units.push_back(s.layers[l].name + ":" + std::to_string(u));
    }
  }
  return s;
}

LabeledSet make_probe_set(const LabeledSet& set, std::size_t num_classes, std::size_t per_class,
                          std::uint64_t seed) {
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (static_cast<std::size_t>(set.labels[i]) == c) idx.push_back(i);
    }
    Rng rng(mix_seed(seed, c));
    const std::size_t take = std::min(per_class, idx.size());
    for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(chosen.begin(), chosen.end());
  return set.subset(chosen);
}

std::string BehaviorSeries::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(12) << "epoch,layer,neuron,class,sensitivity,selectivity\n";
  for (const auto& s : epochs) {
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      for (std::size_t u = 0; u < s.layers[l].width; ++u) {
        for (std::size_t c = 0; c < s.classes.size(); ++c) {
          out << s.epoch << ',' << s.layers[l].name << ',' << u << ',' << s.classes[c] << ',';
          if (!s.sensitivity.empty()) out << s.sensitivity[l][u][c];
          out << ',' << s.selectivity[l][u][c] << '\n';
        }
      }
    }
  }
  return out.str();
}

std::vector<std::string> plateau_classes(const std::vector<std::vector<double>>& per_epoch,
                                         const std::vector<std::string>& classes, double delta,
                                         std::size_t window) {
  std::vector<std::string> out;
  if (window < 2 || per_epoch.size() < window) return out;
  const auto& last = per_epoch.back();
  const auto& first = per_epoch[per_epoch.size() - window];
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (last[c] - first[c] < delta) out.push_back(classes[c]);
  }
  return out;
}

EpochHook selectivity_hook(const LabeledSet& probe, const std::vector<std::string>& classes,
                           BehaviorSeries* series) {
  return [&probe, classes, series](int epoch, const Model& model, EpochRecord& rec) {
    auto scores = compute_behavior(model, probe, classes, false, epoch);
    rec.selectivity = scores.class_selectivity();
    if (series != nullptr) series->epochs.push_back(std::move(scores));
  };
}

// ---------------------------------------------------------------------------

Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t d_k) {
  if (d_k == 0) throw ValidationError("attention_weights: d_k must be positive");
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != d_k || k.dim(1) != d_k) {
    throw ValidationError("attention_weights: expected Q and K of width " + std::to_string(d_k) + ", got " +
                          shape_string(q.shape()) + " and " + shape_string(k.shape()));
  }
  const std::size_t n = q.dim(0), m = k.dim(0);
  Tensor a({n, m});
  kernels::serial::matmul_nt(q.data().data(), k.data().data(), a.data().data(), n, d_k, m);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  for (double& v : a.data()) v *= scale;
  kernels::serial::softmax_rows(a.data().data(), n, m);
  return a;
}

std::vector<Tensor> head_averaged_attention(const TinyViT& model, const ForwardCache& cache) {
  const std::size_t T = model.num_tokens();
  const std::size_t H = model.spec().heads;
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < model.spec().layers; ++l) {
    const auto a = model.attention(cache, l);
    Tensor m({T, T});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T * T; ++i) m[i] += a[h * T * T + i];
    }
    for (double& v : m.data()) v /= static_cast<double>(H);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<double> class_token_patch_attention(const TinyViT& model, const ForwardCache& cache) {
  const std::size_t P = model.num_patches();
  std::vector<double> out(P, 0.0);
  for (const auto& a : head_averaged_attention(model, cache)) {
    for (std::size_t j = 0; j < P; ++j) out[j] += a.at(0, j + 1);
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& v : out) v = total > 0 ? v / total : 1.0 / static_cast<double>(P);
  return out;
}

namespace {

std::vector<bool> patches_inside(std::size_t grid, const Box& bbox, ImageSize size) {
  if (bbox.x1 < 0 || bbox.y1 < 0 || bbox.x2 > size.width || bbox.y2 > size.height || !(bbox.x1 < bbox.x2) ||
      !(bbox.y1 < bbox.y2)) {
    throw ValidationError("bbox lies outside the image frame");
  }
  std::vector<bool> inside(grid * grid, false);
  const double cw = static_cast<double>(size.width) / static_cast<double>(grid);
  const double ch = static_cast<double>(size.height) / static_cast<double>(grid);
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) {
      const double x = (static_cast<double>(c) + 0.5) * cw;
      const double y = (static_cast<double>(r) + 0.5) * ch;
      inside[r * grid + c] = x >= bbox.x1 && x <= bbox.x2 && y >= bbox.y1 && y <= bbox.y2;
    }
  }
  return inside;
}

}  // namespace

double attention_mass_on_gt(std::span<const double> patch_attention, std::size_t grid, const Box& bbox,
                            ImageSize image_size) {
  if (patch_attention.size() != grid * grid) throw ValidationError("patch attention does not match the grid");
  const auto inside = patches_inside(grid, bbox, image_size);
  double mass = 0.0, total = 0.0;
  for (std::size_t j = 0; j < inside.size(); ++j) {
    total += patch_attention[j];
    if (inside[j]) mass += patch_attention[j];
  }
  return total > 0 ? mass / total : 0.0;
}

AttentionSummary extract_attention(const Model& model, const Tensor& batch, std::span<const AnnotationRecord> records) {
  const auto* vit = dynamic_cast<const TinyViT*>(&model);
  if (vit == nullptr) {
    throw ValidationError("attention extraction needs a tiny_vit model, got " + std::string(to_string(model.kind())));
  }
  check_batch_shape(model, batch);
  const std::size_t n = batch.dim(0);
  if (!records.empty() && records.size() != n) throw ValidationError("records do not align with the batch");

  AttentionSummary s;
  s.layers = vit->spec().layers;
  s.heads = vit->spec().heads;
  s.tokens = vit->num_tokens();
  s.grid = vit->grid();
  s.samples = n;
  const std::size_t T = s.tokens;
  const std::size_t P = vit->num_patches();
  s.layer_head_mean.assign(s.layers * s.heads, Tensor({T, T}));
  s.patch_attention.assign(P, 0.0);

  std::map<std::string, std::size_t> class_counts;
  std::map<std::string, std::map<Condition, double>> mass_sums;
  // Caches are built in chunks to bound memory.
  constexpr std::size_t kChunk = 64;
  std::vector<ForwardCache> caches;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % kChunk == 0) {
      const std::size_t m = std::min(kChunk, n - i);
      std::vector<std::size_t> shape = batch.shape();
      shape[0] = m;
      Tensor part(shape);
      for (std::size_t j = 0; j < m; ++j) std::copy_n(batch.row(i + j).begin(), batch.row_size(), part.row(j).begin());
      caches = eval_caches(model, part);
    }
    const ForwardCache& cache = caches[i % kChunk];
    for (std::size_t l = 0; l < s.layers; ++l) {
      const auto a = vit->attention(cache, l);
      for (std::size_t h = 0; h < s.heads; ++h) {
        auto dst = s.layer_head_mean[l * s.heads + h].data();
        for (std::size_t x = 0; x < T * T; ++x) dst[x] += a[h * T * T + x];
      }
    }
    const auto patch = class_token_patch_attention(*vit, cache);
    for (std::size_t j = 0; j < P; ++j) s.patch_attention[j] += patch[j];
    if (records.empty()) continue;

    const auto& rec = records[i];
    auto& per_layer = s.class_layer_mean[rec.class_label];
    if (per_layer.empty()) per_layer.assign(s.layers, Tensor({T, T}));
    const auto avg = head_averaged_attention(*vit, cache);
    for (std::size_t l = 0; l < s.layers; ++l) {
      for (std::size_t x = 0; x < T * T; ++x) per_layer[l][x] += avg[l][x];
    }
    auto& map = s.class_patch_map[rec.class_label];
    if (map.size() == 0) map = Tensor({s.grid, s.grid});
    for (std::size_t j = 0; j < P; ++j) map[j] += patch[j];
    ++class_counts[rec.class_label];

    // Boxes are in image pixels; attention is on the model's input grid,
    // which covers the whole image.
    const double mass = attention_mass_on_gt(patch, s.grid, rec.bbox, rec.image_size);
    s.sample_mass.push_back(mass);
    mass_sums[rec.class_label][rec.condition] += mass;
    ++s.mass_on_gt[rec.class_label][rec.condition].count;
  }

  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  for (auto& m : s.layer_head_mean) {
    for (double& v : m.data()) v *= inv_n;
  }
  for (double& v : s.patch_attention) v *= inv_n;
  for (auto& [label, per_layer] : s.class_layer_mean) {
    const double inv = 1.0 / static_cast<double>(class_counts[label]);
    for (auto& m : per_layer) {
      for (double& v : m.data()) v *= inv;
    }
    for (double& v : s.class_patch_map[label].data()) v *= inv;
  }
  for (auto& [label, per_cond] : s.mass_on_gt) {
    for (auto& [cond, gm] : per_cond) gm.mean = mass_sums[label][cond] / static_cast<double>(gm.count);
  }
  return s;
}

double attention_mass_on_gt(const AttentionSummary& summary, const AnnotationRecord& record) {
  return attention_mass_on_gt(summary.patch_attention, summary.grid, record.bbox, record.image_size);
}

// ---------------------------------------------------------------------------

std::vector<double> lrp_step(const Tensor& attention, std::span<const double> upper) {
  const std::size_t n = attention.dim(0);
  if (attention.rank() != 2 || attention.dim(1) != n || upper.size() != n) {
    throw ValidationError("lrp_step: attention " + shape_string(attention.shape()) + " vs relevance of length " +
                          std::to_string(upper.size()));
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += attention.at(i, j) * upper[i];
  }
  return out;
}

std::vector<std::vector<double>> lrp_propagate(std::span<const Tensor> attention_per_layer, std::vector<double> top) {
  std::vector<std::vector<double>> levels(attention_per_layer.size() + 1);
  levels.back() = std::move(top);
  for (std::size_t l = attention_per_layer.size(); l-- > 0;) {
    levels[l] = lrp_step(attention_per_layer[l], levels[l + 1]);
  }
  return levels;
}

RelevanceMap lrp_propagate(const Model& model, const ForwardCache& cache, std::size_t class_index) {
  const auto* vit = dynamic_cast<const TinyViT*>(&model);
  if (vit == nullptr) {
    throw ValidationError("relevance propagation needs a tiny_vit model, got " +
                          std::string(to_string(model.kind())));
  }
  if (!cache.filled) throw ValidationError("relevance propagation: forward cache is missing");
  if (class_index >= model.num_classes()) throw ValidationError("relevance propagation: class index out of range");
  std::vector<double> top(vit->num_tokens(), 0.0);
  top[0] = 1.0;
  const auto attn = head_averaged_attention(*vit, cache);
  return {class_index, lrp_propagate(attn, std::move(top))};
}

double RelevanceMap::inbox_fraction(std::size_t grid, const Box& bbox, ImageSize image_size) const {
  const auto& base = per_layer.front();
  if (base.size() != grid * grid + 1) throw ValidationError("relevance map does not match the grid");
  return attention_mass_on_gt(std::span<const double>(base).subspan(1), grid, bbox, image_size);
}

// ---------------------------------------------------------------------------

Tensor normalize_map(const Tensor& map) {
  if (map.size() == 0) throw ValidationError("heatmap is empty");
  for (double v : map.data()) {
    if (!std::isfinite(v)) throw ValidationError("heatmap contains a non-finite entry");
  }
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double mn = *lo, mx = *hi;
  Tensor out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = mx > mn ? (map[i] - mn) / (mx - mn) : 0.5;
  return out;
}

void export_heatmap(const Tensor& map, const std::filesystem::path& stem) {
  if (map.rank() != 2) throw ValidationError("heatmap must be two-dimensional, got " + shape_string(map.shape()));
  const Tensor norm = normalize_map(map);
  const std::size_t rows = map.dim(0), cols = map.dim(1);
  std::vector<unsigned char> bytes;
  bytes.reserve(norm.size());
  for (double v : norm.data()) bytes.push_back(static_cast<unsigned char>(std::lround(255.0 * v)));
  auto pgm = stem;
  pgm += ".pgm";
  write_pgm_bytes(pgm, static_cast<int>(cols), static_cast<int>(rows), bytes);

  auto csv = stem;
  csv += ".csv";
  std::ofstream out(csv);
  if (!out) throw RuntimeFailure("cannot open " + csv.string() + " for writing");
  out << std::setprecision(17);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << norm.at(r, c);
    out << '\n';
  }
}

Tensor read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open heatmap " + path.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw ParseError(path.string() + ": ragged heatmap row", rows + 1);
    ++rows;
  }
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace biaslens
