#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "biaslens/behavior.hpp"
#include "biaslens/dataset.hpp"
#include "biaslens/loss.hpp"
#include "biaslens/metrics.hpp"
#include "biaslens/model.hpp"
#include "biaslens/sampling.hpp"
#include "biaslens/snapshot.hpp"
#include "biaslens/synthetic.hpp"
#include "biaslens/train.hpp"
#include "json.hpp"

namespace biaslens {

enum class Strategy { CostSensitive, Resample, Augment, Combined };

std::string_view to_string(Strategy s);
// "cost_sensitive", "resample", "augment", "combined".
Strategy parse_strategy(std::string_view text);

struct VerdictThresholds {
  double fn_rate = -0.02;  // improved needs delta FN rate <= this
  double ap = 0.01;        // and delta AP >= this
};

// "improved", "regressed" (the mirrored condition) or "unchanged".
std::string verdict(double delta_fn_rate, double delta_ap, const VerdictThresholds& t);

struct AuditOptions {
  ModelKind model = ModelKind::TinyCNN;
  CnnSpec cnn;
  VitSpec vit;
  // Unset: the model kind's defaults.
  std::optional<TrainConfig> train;
  std::uint64_t seed = 0;
  double iou_threshold = 0.5;
  std::size_t probe_per_class = 128;
  // Per-epoch selectivity uses a smaller probe drawn from the validation split.
  std::size_t trace_probe_per_class = 32;
  bool sensitivity = true;
  double plateau_delta = 0.01;
  std::size_t plateau_window = 5;
  AttentionPlanOptions attention;
  double tau_rel = 0.5;
  VerdictThresholds verdicts;
  WeightAdjustOptions adjust;
  std::size_t recalibration_iterations = 10;
  double recalibration_gap = 0.05;

  TrainConfig resolved_train() const;
  int input_side() const;
  nlohmann::json to_json() const;
};

// A manifest plus the source of its pixels.
struct AuditData {
  DatasetManifest manifest;
  std::shared_ptr<const ImageProvider> images;
  std::string source;  // synthetic spec or manifest path, recorded in reports
};

AuditData synthetic_audit_data(const std::string& spec, std::uint64_t seed);

struct Splits {
  std::vector<std::string> classes;
  DatasetManifest train, validation, test;
};

// Stratified 70/15/15 split of the manifest's observed classes.
Splits make_splits(const AuditData& data, std::uint64_t seed);

struct ClassMetrics {
  double recall = 0.0;
  double iou = 0.0;  // mean over ground truths; 0 when the class is wrong
  double ap = 0.0;
  double nds = 0.0;  // NDS computed from this class's AP and TP errors
  ClassErrors errors;
  double sensitivity = 0.0;
  double selectivity = 0.0;
};

struct Evaluation {
  std::vector<std::string> classes;
  std::map<std::string, ClassMetrics> per_class;
  // Per condition, per class: IoU and AP on that condition's test records.
  std::map<Condition, std::map<std::string, double>> condition_iou;
  std::map<Condition, std::map<std::string, double>> condition_ap;
  double map = 0.0;
  double nds = 0.0;
  TPErrorSet tp_errors;
  double macro_iou = 0.0;
  double macro_recall = 0.0;
  double minority_recall = 0.0;  // mean over all classes but the most frequent in training
  std::vector<Detection> detections;

  nlohmann::json to_json() const;
};

// Single-detection-per-image evaluation on `records`: argmax class, score =
// its probability, box from the regression head.
Evaluation evaluate(const Model& model, const DatasetManifest& records, const ImageProvider& images,
                    const std::vector<std::string>& classes, const std::string& majority, double iou_threshold);

struct Correlation {
  bool defined = false;
  double coefficient = 0.0;
  std::size_t points = 0;
};

// Rank correlation with tied ranks averaged; undefined for a constant series
// or fewer than three points.
Correlation spearman(const std::vector<double>& x, const std::vector<double>& y);
// Per-class FN rate against class selectivity.
Correlation correlate_errors(const Evaluation& eval);

struct PhaseArtifacts {
  ModelSnapshot snapshot;
  MetricTrace trace;
  BehaviorSeries behavior;
  DatasetManifest train_manifest;
  std::optional<AttentionSummary> attention;  // validation split, transformer only
  std::vector<RelevanceStat> relevance;       // validation split, transformer only
  std::vector<std::string> misclassified;     // validation split
};

struct AuditRun {
  nlohmann::json report;
  Splits splits;
  PhaseArtifacts pre;
  std::optional<PhaseArtifacts> post;
};

// Trains the baseline and fills the pre-mitigation report.
AuditRun run_audit(const AuditData& data, const AuditOptions& options);

// Applies the strategy to the training split, retrains with the same seed and
// config and appends post metrics, deltas and verdicts. Augment needs
// attention data, so it requires a transformer baseline.
void run_mitigation(AuditRun& run, const AuditData& data, const AuditOptions& options, Strategy strategy);

// The mitigated training manifest plus the weights and plans used.
struct MitigationPlan {
  DatasetManifest train;
  ClassWeights weights;
  std::optional<ResamplePlan> resample;
  std::vector<AugmentRequest> attention_requests;
  std::vector<std::string> relevance_samples;
  std::vector<std::string> generic_ops;
};

MitigationPlan plan_mitigation(const AuditRun& run, const AuditOptions& options, Strategy strategy);

struct RecalibrationState {
  std::size_t iteration = 0;
  std::size_t max_iterations = 10;
  double eps_gap = 0.05;
  ClassWeights weights;
  std::vector<ClassWeights> history;  // append-only, starts with the initial weights
  std::map<std::string, double> last_recall;
  std::vector<double> gaps;
  bool converged = false;
  bool stopped = false;
  std::string stop_reason;
};

RecalibrationState start_recalibration(ClassWeights weights, std::size_t max_iterations, double eps_gap);

// One step: records the recall gap and either stops (gap < eps_gap, or the
// iteration budget is spent) or applies dynamic_weight_adjust. Throws
// RuntimeFailure on non-finite recall.
RecalibrationState recalibrate(RecalibrationState state, const std::map<std::string, double>& recall,
                               const WeightAdjustOptions& options);

// Retrains with each new weight set until the state stops; returns the
// final state and the per-iteration validation recall as JSON.
nlohmann::json run_recalibration(const AuditData& data, const AuditOptions& options, RecalibrationState* final_state = nullptr);

// "run-<seed>-<12 hex digits of the config hash>".
std::string run_directory_name(std::uint64_t seed, const nlohmann::json& config);

// Writes report.json, report.txt, manifests, snapshots, traces and
// heatmaps below dir.
void write_run_artifacts(const std::filesystem::path& dir, const AuditRun& run, const AuditOptions& options);

}  // namespace biaslens
