#include "biaslens/audit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "biaslens/batch.hpp"
#include "biaslens/common.hpp"
#include "biaslens/report.hpp"
#include "biaslens/tiny_vit.hpp"

namespace biaslens {

using nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::CostSensitive: return "cost_sensitive";
    case Strategy::Resample: return "resample";
    case Strategy::Augment: return "augment";
    case Strategy::Combined: return "combined";
  }
  return "combined";
}

Strategy parse_strategy(std::string_view text) {
  if (text == "cost_sensitive") return Strategy::CostSensitive;
  if (text == "resample") return Strategy::Resample;
  if (text == "augment") return Strategy::Augment;
  if (text == "combined") return Strategy::Combined;
  throw ValidationError("unknown strategy '" + std::string(text) +
                        "' (expected cost_sensitive, resample, augment or combined)");
}

std::string verdict(double delta_fn_rate, double delta_ap, const VerdictThresholds& t) {
  if (delta_fn_rate <= t.fn_rate && delta_ap >= t.ap) return "improved";
  if (delta_fn_rate >= -t.fn_rate && delta_ap <= -t.ap) return "regressed";
  return "unchanged";
}

TrainConfig AuditOptions::resolved_train() const {
  TrainConfig c = train ? *train : (model == ModelKind::TinyViT ? TrainConfig::vit_defaults() : TrainConfig::cnn_defaults());
  c.seed = seed;
  return c;
}

int AuditOptions::input_side() const {
  return static_cast<int>(model == ModelKind::TinyViT ? vit.input_side : cnn.input_side);
}

json AuditOptions::to_json() const {
  json arch = model == ModelKind::TinyViT
                  ? json{{"patch", vit.patch}, {"dim", vit.dim}, {"heads", vit.heads}, {"layers", vit.layers},
                         {"mlp_ratio", vit.mlp_ratio}, {"input_side", vit.input_side}}
                  : json{{"conv1_channels", cnn.conv1_channels}, {"conv2_channels", cnn.conv2_channels},
                         {"kernel", cnn.kernel}, {"stride", cnn.stride}, {"input_side", cnn.input_side}};
  return {{"model", to_string(model)},
          {"architecture", arch},
          {"train", resolved_train().to_json()},
          {"seed", seed},
          {"iou_threshold", iou_threshold},
          {"probe_per_class", probe_per_class},
          {"trace_probe_per_class", trace_probe_per_class},
          {"sensitivity", sensitivity},
          {"plateau_delta", plateau_delta},
          {"plateau_window", plateau_window},
          {"tau_att", attention.tau_att},
          {"kappa", attention.kappa},
          {"tau_rel", tau_rel},
          {"verdict_fn_rate", verdicts.fn_rate},
          {"verdict_ap", verdicts.ap},
          {"adjust_target", adjust.target},
          {"adjust_eta", adjust.eta},
          {"adjust_w_min", adjust.w_min},
          {"adjust_w_max", adjust.w_max},
          {"recalibration_iterations", recalibration_iterations},
          {"recalibration_gap", recalibration_gap}};
}

AuditData synthetic_audit_data(const std::string& spec, std::uint64_t seed) {
  auto data = generate_synthetic(parse_synthetic_spec(spec), seed);
  auto images = std::make_shared<SyntheticImages>(std::move(data.images));
  return {std::move(data.manifest), std::move(images), "synthetic:" + spec};
}

Splits make_splits(const AuditData& data, std::uint64_t seed) {
  if (data.manifest.records.empty()) throw ValidationError("manifest has no records");
  const auto idx = stratified_split(data.manifest, seed);
  Splits s;
  s.classes = data.manifest.observed_labels();
  if (s.classes.size() < 2) throw ValidationError("an audit needs at least two observed classes");
  s.train = select_records(data.manifest, idx.train);
  s.validation = select_records(data.manifest, idx.validation);
  s.test = select_records(data.manifest, idx.test);
  return s;
}

namespace {

struct Outputs {
  Tensor probabilities;
  Tensor boxes;
};

Outputs forward_all(const Model& model, const LabeledSet& set) {
  const std::size_t n = set.size(), k = model.num_classes();
  Outputs out{Tensor({n, k}), Tensor({n, 4})};
  constexpr std::size_t kChunk = 256;
  for (std::size_t lo = 0; lo < n; lo += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - lo));
    std::iota(idx.begin(), idx.end(), lo);
    ForwardOptions opts;
    opts.keep_caches = false;
    const auto fwd = forward(model, set.subset(idx).inputs, opts);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(fwd.probabilities.row(i).begin(), k, out.probabilities.row(lo + i).begin());
      std::copy_n(fwd.boxes.row(i).begin(), 4, out.boxes.row(lo + i).begin());
    }
  }
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Per-class AP and mean IoU over a subset of records.
void subset_metrics(const std::vector<std::size_t>& rows, const std::vector<AnnotationRecord>& records,
                    const std::vector<Detection>& dets, const std::vector<double>& sample_iou, double thr,
                    std::map<std::string, double>& ap_out, std::map<std::string, double>& iou_out) {
  std::vector<AnnotationRecord> gts;
  std::vector<Detection> ds;
  std::map<std::string, std::vector<double>> ious;
  for (auto i : rows) {
    gts.push_back(records[i]);
    ds.push_back(dets[i]);
    ious[records[i].class_label].push_back(sample_iou[i]);
  }
  const auto match = match_detections(ds, gts, thr);
  ap_out = per_class_ap(match);
  for (const auto& [label, v] : ious) iou_out[label] = mean_of(v);
}

}  // namespace

Evaluation evaluate(const Model& model, const DatasetManifest& records, const ImageProvider& images,
                    const std::vector<std::string>& classes, const std::string& majority, double iou_threshold) {
  const int side = static_cast<int>(model.input_side());
  const auto set = to_labeled_set(records, images, classes, side);
  const auto out = forward_all(model, set);
  const std::size_t n = set.size();

  Evaluation e;
  e.classes = classes;
  std::vector<int> predicted(n);
  std::vector<double> sample_iou(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = argmax(out.probabilities.row(i));
    predicted[i] = static_cast<int>(c);
    const Box box = target_to_box(out.boxes.row(i), side);
    e.detections.push_back({records.records[i].sample_id, classes[c], box, out.probabilities.at(i, c)});
    if (predicted[i] == set.labels[i]) sample_iou[i] = iou(box, records.records[i].bbox);
  }

  const auto match = match_detections(e.detections, records.records, iou_threshold);
  const auto aps = per_class_ap(match);
  const auto errors = per_class_errors(match);
  const auto recall = per_class_recall(predicted, set.labels, classes.size());
  e.map = mean_ap(aps);
  e.tp_errors = tp_errors(match);
  e.nds = nds(e.map, e.tp_errors);

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::map<std::string, double> ap_all, iou_all;
  subset_metrics(all, records.records, e.detections, sample_iou, iou_threshold, ap_all, iou_all);

  std::vector<double> ious, recalls, minority;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& label = classes[c];
    ClassMetrics m;
    m.recall = recall[c];
    m.iou = iou_all.count(label) ? iou_all[label] : 0.0;
    m.ap = aps.count(label) ? aps.at(label) : 0.0;
    if (errors.count(label)) m.errors = errors.at(label);
    MatchResult only;
    only.iou_threshold = iou_threshold;
    if (match.per_class.count(label)) only.per_class[label] = match.per_class.at(label);
    m.nds = nds(m.ap, tp_errors(only));
    e.per_class[label] = m;
    ious.push_back(m.iou);
    recalls.push_back(m.recall);
    if (label != majority) minority.push_back(m.recall);
  }
  e.macro_iou = mean_of(ious);
  e.macro_recall = mean_of(recalls);
  e.minority_recall = mean_of(minority);

  std::map<Condition, std::vector<std::size_t>> by_condition;
  for (std::size_t i = 0; i < n; ++i) by_condition[records.records[i].condition].push_back(i);
  for (const auto& [cond, rows] : by_condition) {
    subset_metrics(rows, records.records, e.detections, sample_iou, iou_threshold, e.condition_ap[cond],
                   e.condition_iou[cond]);
  }
  return e;
}

json Evaluation::to_json() const {
  json classes_j = json::object();
  for (const auto& [label, m] : per_class) {
    classes_j[label] = {{"recall", m.recall},
                        {"iou", m.iou},
                        {"ap", m.ap},
                        {"nds", m.nds},
                        {"tp", m.errors.tp},
                        {"fp", m.errors.fp},
                        {"fn", m.errors.fn},
                        {"fp_rate", m.errors.fp_rate},
                        {"fn_rate", m.errors.fn_rate},
                        {"sensitivity", m.sensitivity},
                        {"selectivity", m.selectivity}};
  }
  json tp = json::object();
  for (const auto& [name, v] : tp_errors) tp[name] = v;
  json conds = json::object();
  for (const auto& [cond, ious] : condition_iou) {
    conds[std::string(to_string(cond))] = {{"iou", ious}, {"ap", condition_ap.at(cond)}};
  }
  return {{"classes", classes_j},
          {"map", map},
          {"nds", nds},
          {"nds_percent", 100.0 * nds},
          {"tp_errors", tp},
          {"macro_iou", macro_iou},
          {"macro_recall", macro_recall},
          {"minority_recall", minority_recall},
          {"conditions", conds}};
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("correlation series differ in length");
  Correlation c;
  c.points = x.size();
  if (x.size() < 3) return c;
  for (double v : x)
    if (!std::isfinite(v)) throw RuntimeFailure("correlation input is not finite");
  for (double v : y)
    if (!std::isfinite(v)) throw RuntimeFailure("correlation input is not finite");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = mean_of(rx), my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return c;
  c.defined = true;
  c.coefficient = sxy / std::sqrt(sxx * syy);
  return c;
}

Correlation correlate_errors(const Evaluation& eval) {
  std::vector<double> fn, sel;
  for (const auto& label : eval.classes) {
    const auto& m = eval.per_class.at(label);
    fn.push_back(m.errors.fn_rate);
    sel.push_back(m.selectivity);
  }
  return spearman(fn, sel);
}

namespace {

json correlation_json(const Correlation& c) {
  json j{{"statistic", "spearman"}, {"points", c.points}, {"defined", c.defined}};
  if (c.defined) {
    j["coefficient"] = c.coefficient;
    j["sign"] = c.coefficient > 0 ? "positive" : (c.coefficient < 0 ? "negative" : "zero");
  } else {
    j["coefficient"] = nullptr;
  }
  return j;
}

std::string majority_class(const DatasetManifest& train, const std::vector<std::string>& classes) {
  const auto dist = compute_distribution(train);
  std::string best = classes.front();
  std::uint64_t best_n = 0;
  for (const auto& c : classes) {
    const auto it = dist.counts.find(c);
    const std::uint64_t n = it == dist.counts.end() ? 0 : it->second;
    if (n > best_n) {
      best = c;
      best_n = n;
    }
  }
  return best;
}

std::unique_ptr<Model> fresh_model(const AuditOptions& o, std::size_t k) {
  return o.model == ModelKind::TinyViT ? make_vit(o.vit, k, o.seed) : make_cnn(o.cnn, k, o.seed);
}

struct Phase {
  PhaseArtifacts artifacts;
  json report;
};

Phase run_phase(const Splits& splits, const ImageProvider& images, const AuditOptions& options,
                const DatasetManifest& train_manifest, const ClassWeights& weights) {
  const auto& classes = splits.classes;
  const std::size_t k = classes.size();
  const int side = options.input_side();
  const auto config = options.resolved_train();
  const std::string majority = majority_class(splits.train, classes);

  auto model = fresh_model(options, k);
  const auto train_set = to_labeled_set(train_manifest, images, classes, side);
  const auto val_set = to_labeled_set(splits.validation, images, classes, side);
  const auto trace_probe = make_probe_set(val_set, k, options.trace_probe_per_class, options.seed);

  Phase phase;
  auto& art = phase.artifacts;
  art.train_manifest = train_manifest;
  const DetectionLoss loss{weights.vector(), config.box_weight};
  art.trace = train(*model, train_set, config, loss, classes, &val_set,
                    selectivity_hook(trace_probe, classes, &art.behavior));
  art.snapshot = ModelSnapshot::capture(*model, options.seed, config.to_json());

  auto eval = evaluate(*model, splits.test, images, classes, majority, options.iou_threshold);
  const auto test_set = to_labeled_set(splits.test, images, classes, side);
  const auto probe = make_probe_set(test_set, k, options.probe_per_class, options.seed);
  const auto scores = compute_behavior(*model, probe, classes, options.sensitivity, config.epochs - 1);
  for (std::size_t c = 0; c < k; ++c) {
    auto& m = eval.per_class[classes[c]];
    m.selectivity = scores.class_selectivity(c);
    m.sensitivity = scores.class_sensitivity(c);
  }

  std::vector<std::vector<double>> per_epoch;
  for (const auto& e : art.trace.epochs) per_epoch.push_back(e.selectivity);
  const auto plateau = plateau_classes(per_epoch, classes, options.plateau_delta, options.plateau_window);

  // Validation predictions drive the relevance-informed plans.
  const auto val_out = forward_all(*model, val_set);
  for (std::size_t i = 0; i < val_set.size(); ++i) {
    if (static_cast<int>(argmax(val_out.probabilities.row(i))) != val_set.labels[i]) {
      art.misclassified.push_back(val_set.sample_ids[i]);
    }
  }

  json attention = nullptr;
  if (options.model == ModelKind::TinyViT) {
    art.attention = extract_attention(*model, val_set.inputs, splits.validation.records);
    attention = json::object();
    for (const auto& [label, per_cond] : art.attention->mass_on_gt) {
      for (const auto& [cond, gm] : per_cond) {
        attention[label][std::string(to_string(cond))] = {{"mass_on_gt", gm.mean}, {"samples", gm.count}};
      }
    }
    const auto vit_grid = static_cast<const TinyViT&>(*model).grid();
    constexpr std::size_t kChunk = 64;
    for (std::size_t lo = 0; lo < val_set.size(); lo += kChunk) {
      std::vector<std::size_t> idx(std::min(kChunk, val_set.size() - lo));
      std::iota(idx.begin(), idx.end(), lo);
      const auto caches = forward(*model, val_set.subset(idx).inputs).caches;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const std::size_t i = lo + j;
        const auto rel = lrp_propagate(*model, caches[j], argmax(val_out.probabilities.row(i)));
        const auto& rec = splits.validation.records[i];
        const double p_true =
            std::max(val_out.probabilities.at(i, static_cast<std::size_t>(val_set.labels[i])), kLogClamp);
        art.relevance.push_back(
            {rec.sample_id, rel.inbox_fraction(vit_grid, rec.bbox, rec.image_size), -std::log(p_true)});
      }
    }
  }

  json sel = json::object(), sens = json::object();
  for (std::size_t c = 0; c < k; ++c) {
    sel[classes[c]] = scores.class_selectivity(c);
    sens[classes[c]] = scores.class_sensitivity(c);
  }
  const auto train_dist = compute_distribution(train_manifest);
  phase.report = {{"evaluation", eval.to_json()},
                  {"majority_class", majority},
                  {"train_counts", train_dist.counts},
                  {"class_weights", weights.to_json()},
                  {"behavior",
                   {{"class_selectivity", sel},
                    {"class_sensitivity", sens},
                    {"sensitivity_computed", options.sensitivity},
                    {"dead_units", scores.dead_units},
                    {"plateau_classes", plateau}}},
                  {"correlation", correlation_json(correlate_errors(eval))},
                  {"training",
                   {{"epochs", config.epochs},
                    {"final_loss", art.trace.epochs.back().loss},
                    {"validation_recall", art.trace.epochs.back().recall}}},
                  {"attention", attention},
                  {"validation_misclassified", art.misclassified.size()}};
  return phase;
}

void append_unique(std::vector<AnnotationRecord>& records, std::set<std::string>& used, AnnotationRecord rec) {
  if (used.count(rec.sample_id)) {
    const std::string base = rec.sample_id;
    int k = 1;
    while (used.count(base + "#dup" + std::to_string(k))) ++k;
    rec.sample_id = base + "#dup" + std::to_string(k);
  }
  used.insert(rec.sample_id);
  records.push_back(std::move(rec));
}

json augment_request_json(const AugmentRequest& r) {
  return {{"class", r.class_label}, {"condition", to_string(r.condition)}, {"op", r.op.name()}, {"count", r.count}};
}

}  // namespace

MitigationPlan plan_mitigation(const AuditRun& run, const AuditOptions& options, Strategy strategy) {
  const auto& classes = run.splits.classes;
  MitigationPlan plan;
  plan.train = run.splits.train;
  plan.weights = unit_weights(classes);

  const bool wants_attention = strategy == Strategy::Augment;
  if (wants_attention && !run.pre.attention) {
    throw ValidationError("the augment strategy needs attention data; run the baseline with --model tiny_vit");
  }
  if (strategy == Strategy::CostSensitive) {
    plan.weights = compute_class_weights(compute_distribution(plan.train), classes);
    return plan;
  }
  if (strategy == Strategy::Resample || strategy == Strategy::Combined) {
    plan.resample = plan_to_median(compute_distribution(plan.train), options.seed);
    plan.train = apply_resample(plan.train, *plan.resample);
    if (strategy == Strategy::Resample) return plan;
    plan.weights = compute_class_weights(compute_distribution(plan.train), classes);
  }

  // Augmentation stage (Augment, and the last step of Combined).
  std::vector<AnnotationRecord> records = plan.train.records;
  std::set<std::string> used;
  for (const auto& r : records) used.insert(r.sample_id);
  if (strategy == Strategy::Combined) {
    plan.generic_ops = {"flip_h", "flip_v", "rot180"};
    for (const auto& r : plan.train.records) {
      for (const auto& name : plan.generic_ops) append_unique(records, used, apply_augment(r, parse_augment_op(name)).record);
    }
  }
  if (run.pre.attention) {
    const auto dist = compute_distribution(plan.train);
    plan.attention_requests = attention_guided_augment_plan(*run.pre.attention, dist, options.attention);
    plan.relevance_samples = lrp_informed_sample_plan(run.pre.relevance, run.pre.misclassified, options.tau_rel);
    // Validation samples never enter training; each flagged sample asks for
    // one augmented training record from its class and condition.
    std::map<std::pair<std::string, Condition>, std::uint64_t> extra;
    for (const auto& id : plan.relevance_samples) {
      for (const auto& r : run.splits.validation.records) {
        if (r.sample_id == id) ++extra[{r.class_label, r.condition}];
      }
    }
    std::vector<AugmentRequest> requests = plan.attention_requests;
    for (const auto& [key, n] : extra) requests.push_back({key.first, key.second, augment_for_condition(key.second), n});
    const auto picks = expand_augment_requests(plan.train, requests, mix_seed(options.seed, 0xa5));
    for (const auto& [idx, op] : picks) {
      try {
        append_unique(records, used, apply_augment(plan.train.records[idx], op).record);
      } catch (const ValidationError&) {
        // A zoom can push a box against the frame edge; skip that copy.
      }
    }
  }
  plan.train = make_manifest(std::move(records), run.splits.train.seed);
  plan.train.taxonomy = run.splits.train.taxonomy;
  return plan;
}

AuditRun run_audit(const AuditData& data, const AuditOptions& options) {
  if (!data.images) throw ValidationError("audit data has no image source");
  AuditRun run;
  run.splits = make_splits(data, options.seed);
  auto phase = run_phase(run.splits, *data.images, options, run.splits.train, unit_weights(run.splits.classes));
  run.pre = std::move(phase.artifacts);

  const auto dist = compute_distribution(data.manifest);
  run.report = {{"config", options.to_json()},
                {"source", data.source},
                {"classes", run.splits.classes},
                {"dataset", distribution_to_json(dist)},
                {"splits",
                 {{"train", run.splits.train.records.size()},
                  {"validation", run.splits.validation.records.size()},
                  {"test", run.splits.test.records.size()}}},
                {"pre", std::move(phase.report)}};
  return run;
}

void run_mitigation(AuditRun& run, const AuditData& data, const AuditOptions& options, Strategy strategy) {
  auto plan = plan_mitigation(run, options, strategy);
  auto phase = run_phase(run.splits, *data.images, options, plan.train, plan.weights);
  run.post = std::move(phase.artifacts);

  json requests = json::array();
  for (const auto& r : plan.attention_requests) requests.push_back(augment_request_json(r));
  json resample = nullptr;
  if (plan.resample) {
    resample = {{"mode", to_string(plan.resample->mode)},
                {"seed", plan.resample->seed},
                {"target_counts", plan.resample->target_counts}};
  }
  run.report["mitigation"] = {{"strategy", to_string(strategy)},
                              {"resample_plan", resample},
                              {"class_weights_history", json::array({plan.weights.to_json()})},
                              {"attention_plan", requests},
                              {"relevance_samples", plan.relevance_samples},
                              {"generic_augmentations", plan.generic_ops},
                              {"train_records", plan.train.records.size()}};
  run.report["post"] = std::move(phase.report);

  const auto& pre = run.report["pre"]["evaluation"];
  const auto& post = run.report["post"]["evaluation"];
  json deltas = json::object(), verdicts = json::object();
  for (const auto& label : run.splits.classes) {
    const auto& a = pre["classes"][label];
    const auto& b = post["classes"][label];
    const double d_fn = b["fn_rate"].get<double>() - a["fn_rate"].get<double>();
    const double d_ap = b["ap"].get<double>() - a["ap"].get<double>();
    deltas[label] = {{"recall", b["recall"].get<double>() - a["recall"].get<double>()},
                     {"iou", b["iou"].get<double>() - a["iou"].get<double>()},
                     {"ap", d_ap},
                     {"fn_rate", d_fn},
                     {"fp_rate", b["fp_rate"].get<double>() - a["fp_rate"].get<double>()},
                     {"selectivity", b["selectivity"].get<double>() - a["selectivity"].get<double>()}};
    verdicts[label] = verdict(d_fn, d_ap, options.verdicts);
  }
  for (const char* key : {"map", "nds", "macro_iou", "macro_recall", "minority_recall"}) {
    deltas["aggregate"][key] = post[key].get<double>() - pre[key].get<double>();
  }
  run.report["deltas"] = deltas;
  run.report["verdicts"] = verdicts;
  run.report["verdict_thresholds"] = {{"fn_rate", options.verdicts.fn_rate}, {"ap", options.verdicts.ap}};
}

RecalibrationState start_recalibration(ClassWeights weights, std::size_t max_iterations, double eps_gap) {
  RecalibrationState s;
  s.max_iterations = max_iterations;
  s.eps_gap = eps_gap;
  s.history.push_back(weights);
  s.weights = std::move(weights);
  if (max_iterations == 0) {
    s.stopped = true;
    s.stop_reason = "max_iterations";
  }
  return s;
}

RecalibrationState recalibrate(RecalibrationState state, const std::map<std::string, double>& recall,
                               const WeightAdjustOptions& options) {
  for (const auto& [label, r] : recall) {
    if (!std::isfinite(r)) throw RuntimeFailure("recalibration aborted: non-finite recall for class '" + label + "'");
  }
  if (state.stopped) return state;
  if (recall.empty()) throw ValidationError("recalibration needs per-class recall");
  state.last_recall = recall;
  double lo = 1.0, hi = 0.0;
  for (const auto& [label, r] : recall) {
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  const double gap = hi - lo;
  state.gaps.push_back(gap);
  if (gap < state.eps_gap) {
    state.converged = true;
    state.stopped = true;
    state.stop_reason = "gap_below_threshold";
    return state;
  }
  if (state.iteration >= state.max_iterations) {
    state.stopped = true;
    state.stop_reason = "max_iterations";
    return state;
  }
  state.weights = dynamic_weight_adjust(state.weights, recall, options);
  state.history.push_back(state.weights);
  ++state.iteration;
  return state;
}

json run_recalibration(const AuditData& data, const AuditOptions& options, RecalibrationState* final_state) {
  const auto splits = make_splits(data, options.seed);
  const auto& classes = splits.classes;
  const int side = options.input_side();
  const auto config = options.resolved_train();
  const auto train_set = to_labeled_set(splits.train, *data.images, classes, side);
  const auto val_set = to_labeled_set(splits.validation, *data.images, classes, side);

  auto state = start_recalibration(compute_class_weights(compute_distribution(splits.train), classes),
                                   options.recalibration_iterations, options.recalibration_gap);
  json iterations = json::array();
  while (!state.stopped) {
    auto model = fresh_model(options, classes.size());
    const DetectionLoss loss{state.weights.vector(), config.box_weight};
    train(*model, train_set, config, loss, classes);
    const auto rec = per_class_recall(predict(*model, val_set), val_set.labels, classes.size());
    std::map<std::string, double> recall;
    for (std::size_t c = 0; c < classes.size(); ++c) recall[classes[c]] = rec[c];
    iterations.push_back({{"iteration", state.iteration}, {"weights", state.weights.to_json()}, {"recall", recall}});
    state = recalibrate(std::move(state), recall, options.adjust);
    iterations.back()["gap"] = state.gaps.back();
  }
  json history = json::array();
  for (const auto& w : state.history) history.push_back(w.to_json());
  if (final_state != nullptr) *final_state = state;
  return {{"config", options.to_json()},
          {"source", data.source},
          {"iterations", iterations},
          {"weight_history", history},
          {"converged", state.converged},
          {"stop_reason", state.stop_reason},
          {"gaps", state.gaps}};
}

std::string run_directory_name(std::uint64_t seed, const json& config) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%012llx",
                static_cast<unsigned long long>(stable_hash(config.dump()) & 0xffffffffffffULL));
  return "run-" + std::to_string(seed) + "-" + buf;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  out << text;
}

void write_phase(const std::filesystem::path& dir, const std::string& name, const PhaseArtifacts& art,
                 const json& phase_report) {
  save_snapshot(dir / (name + ".snapshot"), art.snapshot);
  art.trace.write_csv(dir / ("trace_" + name + ".csv"));
  write_text(dir / ("behavior_" + name + ".csv"), art.behavior.to_csv());
  write_text(dir / ("metrics_" + name + ".csv"), metrics_table_csv(phase_report));
  write_manifest(dir / ("train_" + name + ".jsonl"), art.train_manifest);
  if (art.attention) {
    std::filesystem::create_directories(dir / "heatmaps");
    for (const auto& [label, map] : art.attention->class_patch_map) {
      export_heatmap(map, dir / "heatmaps" / ("attention_" + name + "_" + label));
    }
  }
}

}  // namespace

void write_run_artifacts(const std::filesystem::path& dir, const AuditRun& run, const AuditOptions& options) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", run.report.dump(2) + "\n");
  write_text(dir / "report.txt", render_text(run.report));
  write_text(dir / "config.json", options.to_json().dump(2) + "\n");
  write_manifest(dir / "split_train.jsonl", run.splits.train);
  write_manifest(dir / "split_validation.jsonl", run.splits.validation);
  write_manifest(dir / "split_test.jsonl", run.splits.test);
  write_phase(dir, "pre", run.pre, run.report["pre"]);
  if (run.post) write_phase(dir, "post", *run.post, run.report["post"]);
}

}  // namespace biaslens
