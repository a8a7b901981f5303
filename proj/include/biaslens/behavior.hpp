#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "biaslens/dataset.hpp"
#include "biaslens/model.hpp"
#include "biaslens/tensor.hpp"
#include "biaslens/train.hpp"

namespace biaslens {

class TinyViT;

// ---------------------------------------------------------------------------
// Sensitivity and selectivity

// (a_c - a_avg) / max(a_c, a_avg); 0 when the max is not positive.
double selectivity(double a_c, double a_avg);
// One neuron: per-class selectivity, a_avg being the mean over all classes.
std::vector<double> selectivity_scores(std::span<const double> class_means);

// Mean over samples of mean_k |d a / d x_k| for one probe unit. Sets *dead
// when every gradient is exactly zero.
double sensitivity_score(const Model& model, const Tensor& samples, std::size_t layer, std::size_t neuron,
                         bool* dead = nullptr);

// Per layer, per neuron, per class mean probe activation.
using ClassActivations = std::vector<std::vector<std::vector<double>>>;
ClassActivations class_mean_activations(const Model& model, const LabeledSet& probe, std::size_t num_classes);

struct BehaviorScores {
  int epoch = 0;
  std::vector<std::string> classes;
  std::vector<ProbeLayer> layers;
  // [layer][neuron][class]
  std::vector<std::vector<std::vector<double>>> selectivity;
  std::vector<std::vector<std::vector<double>>> sensitivity;  // empty unless requested
  std::vector<std::string> dead_units;                        // "layer:neuron"

  // Mean over layers of the best neuron's selectivity for class c.
  double class_selectivity(std::size_t c) const;
  std::vector<double> class_selectivity() const;
  // Mean sensitivity over all units for class c; 0 when not computed.
  double class_sensitivity(std::size_t c) const;
};

// Throws ValidationError when the probe set lacks one of the classes.
BehaviorScores compute_behavior(const Model& model, const LabeledSet& probe,
                                const std::vector<std::string>& classes, bool with_sensitivity, int epoch = 0);

// Up to per_class samples of each class, seeded, in set order.
LabeledSet make_probe_set(const LabeledSet& set, std::size_t num_classes, std::size_t per_class,
                          std::uint64_t seed);

struct BehaviorSeries {
  std::vector<BehaviorScores> epochs;

  // epoch,layer,neuron,class,sensitivity,selectivity
  std::string to_csv() const;
};

// Classes whose class selectivity rose by less than delta over the last
// `window` epochs. Needs at least `window` epochs, otherwise nothing is flagged.
std::vector<std::string> plateau_classes(const std::vector<std::vector<double>>& per_epoch,
                                         const std::vector<std::string>& classes, double delta = 0.01,
                                         std::size_t window = 5);

// Epoch hook filling EpochRecord::selectivity; also appends to `series`
// when given.
EpochHook selectivity_hook(const LabeledSet& probe, const std::vector<std::string>& classes,
                           BehaviorSeries* series = nullptr);

// ---------------------------------------------------------------------------
// Attention

// Row softmax of Q K^T / sqrt(d_k); Q and K are n x d_k.
Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t d_k);

// Class-token attention over the patches, averaged over layers and heads and
// renormalized over the patch columns. Length grid^2, row-major.
std::vector<double> class_token_patch_attention(const TinyViT& model, const ForwardCache& cache);

// Attention mass on the patches whose centers lie inside bbox.
double attention_mass_on_gt(std::span<const double> patch_attention, std::size_t grid, const Box& bbox,
                            ImageSize image_size);

struct GroupMass {
  double mean = 0.0;
  std::size_t count = 0;
};

struct AttentionSummary {
  std::size_t layers = 0, heads = 0, tokens = 0, grid = 0;
  std::size_t samples = 0;
  // Mean over samples, index layer * heads + head, tokens x tokens.
  std::vector<Tensor> layer_head_mean;
  // Per class: head-averaged mean per layer.
  std::map<std::string, std::vector<Tensor>> class_layer_mean;
  // Per class: mean class-token patch attention (grid x grid).
  std::map<std::string, Tensor> class_patch_map;
  // Mean class-token patch attention over all samples.
  std::vector<double> patch_attention;
  // Attention mass on ground-truth boxes per class and condition.
  std::map<std::string, std::map<Condition, GroupMass>> mass_on_gt;
  std::vector<double> sample_mass;
};

// Throws ValidationError for non-transformer models. `records` may be empty
// (no mass statistics); otherwise it must align with the batch rows.
AttentionSummary extract_attention(const Model& model, const Tensor& batch,
                                   std::span<const AnnotationRecord> records = {});

// Uses the summary's overall patch attention.
double attention_mass_on_gt(const AttentionSummary& summary, const AnnotationRecord& record);

// ---------------------------------------------------------------------------
// Relevance propagation through attention

struct RelevanceMap {
  std::size_t class_index = 0;
  // per_layer[l] is R^(l) over tokens; per_layer.back() is the initial
  // relevance above the last block.
  std::vector<std::vector<double>> per_layer;

  // Share of the input-level patch relevance inside bbox.
  double inbox_fraction(std::size_t grid, const Box& bbox, ImageSize image_size) const;
};

// R^(l)_j = sum_i A_ij R^(l+1)_i for one n x n row-stochastic matrix.
std::vector<double> lrp_step(const Tensor& attention, std::span<const double> upper);

// Propagates `top` down through head-averaged attention matrices, last layer
// first. Result index 0 is the input level.
std::vector<std::vector<double>> lrp_propagate(std::span<const Tensor> attention_per_layer,
                                               std::vector<double> top);

// Relevance 1.0 on the class token above the last block, then down through
// every block. Throws ValidationError for non-transformer models or when the
// cache is not filled.
RelevanceMap lrp_propagate(const Model& model, const ForwardCache& cache, std::size_t class_index);

// Head-averaged attention of each layer (tokens x tokens).
std::vector<Tensor> head_averaged_attention(const TinyViT& model, const ForwardCache& cache);

// ---------------------------------------------------------------------------
// Heatmaps

// Min-max normalization to [0,1]; a constant map becomes all 0.5. Throws
// ValidationError on non-finite entries.
Tensor normalize_map(const Tensor& map);
// Writes <stem>.pgm (bytes lround(255 v)) and <stem>.csv (normalized values).
void export_heatmap(const Tensor& map, const std::filesystem::path& stem);
Tensor read_heatmap_csv(const std::filesystem::path& path);

}  // namespace biaslens
