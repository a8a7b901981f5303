#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "biaslens/audit.hpp"
#include "biaslens/behavior.hpp"
#include "biaslens/common.hpp"
#include "biaslens/dataset.hpp"
#include "biaslens/kernels.hpp"
#include "biaslens/loss.hpp"
#include "biaslens/report.hpp"
#include "biaslens/sampling.hpp"
#include "biaslens/snapshot.hpp"
#include "biaslens/synthetic.hpp"
#include "biaslens/tiny_vit.hpp"
#include "biaslens/train.hpp"
#include "json.hpp"

namespace biaslens::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string config;
};

struct DataFlags {
  std::string manifest;
  std::string synthetic;
};

// Train flags are overrides: unset ones fall back to the model kind's defaults.
struct TrainFlags {
  double lr = 0, weight_decay = 0, dropout = 0, lr_factor = 0, lr_final = 0, box_weight = 0;
  int batch = 0, epochs = 0, lr_every = 0;
  std::string schedule;
  // One entry per subcommand that registers the flag.
  std::map<std::string, std::vector<CLI::Option*>> opts;
};

struct Flags {
  Common common;
  DataFlags data;
  TrainFlags train;
  AuditOptions audit;
  std::string model = "tiny_cnn";
  std::string strategy = "combined";
  std::string weights = "inverse";
  // resample
  std::string mode = "combined";
  std::string target = "median";
  std::vector<std::string> counts;
  std::uint64_t schedule_budget = 0;
  double share_start = 0.9, share_end = 0.33;
  int schedule_steps = 5;
  // augment
  std::vector<std::string> ops;
  // report / heatmap
  std::string run_dir;
  std::string matrix;
  std::string snapshot;
  std::string sample;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  out << text;
}

json read_json_file(const std::string& path, const std::string& flag) {
  std::ifstream in(path);
  if (!in) throw ValidationError(flag + ": cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(flag + ": " + path + " is not valid JSON (" + e.what() + ")");
  }
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--out", f.common.out, "Output directory; every file is written below it")->required();
  sub->add_option("--seed", f.common.seed, "Seed for splits, sampling, initialization and synthetic data")
      ->envname("BIASLENS_SEED");
  sub->add_option("--jobs", f.common.jobs, "Threads for the parallel kernels (1 = serial)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--config", f.common.config, "JSON file of flag values; command-line flags take precedence");
}

void add_data(CLI::App* sub, Flags& f) {
  sub->add_option("--manifest", f.data.manifest, "JSON Lines manifest; image_ref paths resolve against its folder");
  sub->add_option("--synthetic", f.data.synthetic,
                  "Synthetic dataset: balanced or imbalanced-A-B-C, optional :N sample count");
}

void add_model(CLI::App* sub, Flags& f) {
  auto& a = f.audit;
  sub->add_option("--model", f.model, "Model kind")->check(CLI::IsMember({"tiny_cnn", "tiny_vit"}));
  sub->add_option("--input-side", a.cnn.input_side, "Input side in pixels (both models)");
  sub->add_option("--cnn-conv1", a.cnn.conv1_channels, "TinyCNN first conv channels");
  sub->add_option("--cnn-conv2", a.cnn.conv2_channels, "TinyCNN second conv channels");
  sub->add_option("--cnn-kernel", a.cnn.kernel, "TinyCNN kernel size");
  sub->add_option("--vit-patch", a.vit.patch, "TinyViT patch size");
  sub->add_option("--vit-dim", a.vit.dim, "TinyViT embedding width");
  sub->add_option("--vit-heads", a.vit.heads, "TinyViT attention heads");
  sub->add_option("--vit-layers", a.vit.layers, "TinyViT blocks");
  sub->add_option("--vit-mlp-ratio", a.vit.mlp_ratio, "TinyViT MLP expansion");
}

void add_train(CLI::App* sub, Flags& f) {
  auto& t = f.train;
  const auto cnn = TrainConfig::cnn_defaults();
  const auto vit = TrainConfig::vit_defaults();
  auto both = [](auto c, auto v) {
    std::ostringstream s;
    s << " [default: " << c << " tiny_cnn, " << v << " tiny_vit]";
    return s.str();
  };
  auto opt = [&](const std::string& name, auto& var, const std::string& desc) {
    auto* o = sub->add_option("--" + name, var, desc)->default_str("");
    t.opts[name].push_back(o);
    return o;
  };
  opt("lr", t.lr, "Base learning rate" + both(cnn.learning_rate, vit.learning_rate));
  opt("batch", t.batch, "Mini-batch size" + both(cnn.batch_size, vit.batch_size))->check(CLI::PositiveNumber);
  opt("epochs", t.epochs, "Training epochs" + both(cnn.epochs, vit.epochs))->check(CLI::PositiveNumber);
  opt("weight-decay", t.weight_decay, "L2 weight decay" + both(cnn.weight_decay, vit.weight_decay));
  opt("dropout", t.dropout, "Dropout rate" + both(cnn.dropout, vit.dropout));
  opt("lr-schedule", t.schedule, "constant, step or linear" + both("step", "linear"))
      ->check(CLI::IsMember({"constant", "step", "linear"}));
  opt("lr-decay-factor", t.lr_factor, "Step decay multiplier" + both(cnn.schedule.factor, vit.schedule.factor));
  opt("lr-decay-every", t.lr_every, "Epochs between step decays" + both(cnn.schedule.every, vit.schedule.every));
  opt("lr-final", t.lr_final, "Rate at the last epoch for linear decay" + both(cnn.schedule.to, vit.schedule.to));
  opt("box-weight", t.box_weight, "Box-regression loss weight" + both(cnn.box_weight, vit.box_weight));
}

void add_audit(CLI::App* sub, Flags& f) {
  auto& a = f.audit;
  sub->add_option("--iou-threshold", a.iou_threshold, "IoU needed for a true positive")
      ->check(CLI::Range(0.0, 1.0));
  sub->add_option("--probe-per-class", a.probe_per_class, "Probe samples per class for behavior scores");
  sub->add_option("--trace-probe-per-class", a.trace_probe_per_class, "Probe samples per class for per-epoch selectivity");
  sub->add_option("--sensitivity", a.sensitivity, "Compute gradient sensitivity scores");
  sub->add_option("--plateau-delta", a.plateau_delta, "Selectivity gain below which a class has plateaued");
  sub->add_option("--plateau-window", a.plateau_window, "Epoch window for the plateau test");
  sub->add_option("--tau-att", a.attention.tau_att, "Attention mass threshold for augmentation");
  sub->add_option("--kappa", a.attention.kappa, "Augmentation count multiplier");
  sub->add_option("--tau-rel", a.tau_rel, "In-box relevance threshold for LRP-flagged samples");
  sub->add_option("--verdict-fn-rate", a.verdicts.fn_rate, "Largest FN-rate change counted as improved");
  sub->add_option("--verdict-ap", a.verdicts.ap, "Smallest AP change counted as improved");
  sub->add_option("--adjust-target", a.adjust.target, "Recall target for weight recalibration");
  sub->add_option("--adjust-eta", a.adjust.eta, "Recalibration step size");
  sub->add_option("--adjust-w-min", a.adjust.w_min, "Lower clamp for recalibrated weights");
  sub->add_option("--adjust-w-max", a.adjust.w_max, "Upper clamp for recalibrated weights");
  sub->add_option("--recalibration-iterations", a.recalibration_iterations, "Recalibration iteration budget");
  sub->add_option("--recalibration-gap", a.recalibration_gap, "Recall gap at which recalibration stops");
}

// Resolved flag values of one subcommand, for config.json.
json resolved_flags(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const auto names = o->get_lnames();
    if (names.empty() || names[0] == "help" || names[0] == "config") continue;
    std::vector<std::string> values = o->results();
    if (values.empty()) {
      if (o->get_default_str().empty()) continue;
      values = {o->get_default_str()};
    }
    auto parse = [](const std::string& s) {
      try {
        auto v = json::parse(s);
        if (v.is_number() || v.is_boolean()) return v;
      } catch (const json::parse_error&) {
      }
      return json(s);
    };
    if (o->get_expected_max() > 1) {
      json arr = json::array();
      for (const auto& v : values) arr.push_back(parse(v));
      j[names[0]] = arr;
    } else {
      j[names[0]] = parse(values.back());
    }
  }
  return j;
}

fs::path prepare_out(const Flags& f, const CLI::App* sub, const json& resolved = nullptr) {
  const fs::path out(f.common.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw RuntimeFailure("--out: cannot create " + out.string() + ": " + ec.message());
  json cfg = resolved_flags(sub);
  cfg["subcommand"] = sub->get_name();
  if (!resolved.is_null()) cfg["resolved"] = resolved;
  write_text(out / "config.json", cfg.dump(2) + "\n");
  return out;
}

AuditData load_data(const DataFlags& d, std::uint64_t seed) {
  if (d.manifest.empty() == d.synthetic.empty()) throw ValidationError("give exactly one of --manifest or --synthetic");
  if (!d.synthetic.empty()) return synthetic_audit_data(d.synthetic, seed);
  auto manifest = load_manifest(d.manifest);
  auto base = fs::path(d.manifest).parent_path();
  return {std::move(manifest), std::make_shared<FileImages>(base), "manifest:" + d.manifest};
}

AuditOptions resolve_audit(Flags& f) {
  AuditOptions o = f.audit;
  o.model = parse_model_kind(f.model);
  o.vit.input_side = o.cnn.input_side;
  o.seed = f.common.seed;
  const auto& t = f.train;
  TrainConfig c = o.model == ModelKind::TinyViT ? TrainConfig::vit_defaults() : TrainConfig::cnn_defaults();
  auto given = [&](const char* name) {
    const auto& all = t.opts.at(name);
    return std::any_of(all.begin(), all.end(), [](const CLI::Option* o) { return o->count() > 0; });
  };
  if (given("lr")) c.learning_rate = t.lr;
  if (given("batch")) c.batch_size = t.batch;
  if (given("epochs")) c.epochs = t.epochs;
  if (given("weight-decay")) c.weight_decay = t.weight_decay;
  if (given("dropout")) c.dropout = t.dropout;
  if (given("lr-schedule")) {
    c.schedule.kind = t.schedule == "step"     ? ScheduleKind::StepDecay
                      : t.schedule == "linear" ? ScheduleKind::LinearDecay
                                               : ScheduleKind::Constant;
  }
  if (given("lr-decay-factor")) c.schedule.factor = t.lr_factor;
  if (given("lr-decay-every")) c.schedule.every = t.lr_every;
  if (given("lr-final")) c.schedule.to = t.lr_final;
  if (given("box-weight")) c.box_weight = t.box_weight;
  c.seed = o.seed;
  c.validate();
  o.train = c;
  return o;
}

// ---------------------------------------------------------------------------

int cmd_analyze(Flags& f, const CLI::App* sub, std::ostream& out) {
  const auto data = load_data(f.data, f.common.seed);
  const auto dir = prepare_out(f, sub);
  const auto dist = compute_distribution(data.manifest);
  write_text(dir / "distribution.json", distribution_to_json(dist).dump(2) + "\n");
  write_text(dir / "distribution.csv", distribution_csv(dist));
  write_text(dir / "conditions.csv", condition_csv(dist));
  for (const auto& [label, n] : dist.counts) out << label << ' ' << n << ' ' << format_percent(dist.fraction(label)) << "%\n";
  return 0;
}

int cmd_resample(Flags& f, const CLI::App* sub, std::ostream& out) {
  const auto data = load_data(f.data, f.common.seed);
  const auto dist = compute_distribution(data.manifest);
  ResamplePlan plan;
  if (!f.counts.empty()) {
    plan.seed = f.common.seed;
    for (const auto& item : f.counts) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ValidationError("--count: expected label=N, got " + item);
      const auto label = item.substr(0, eq);
      if (!dist.counts.count(label)) throw ValidationError("--count: unknown class " + label);
      try {
        std::size_t used = 0;
        const auto n = std::stoull(item.substr(eq + 1), &used);
        if (used != item.size() - eq - 1) throw std::invalid_argument(item);
        plan.target_counts[label] = n;
      } catch (const std::logic_error&) {
        throw ValidationError("--count: bad count in " + item);
      }
    }
  } else if (f.target == "max") {
    plan = plan_to_max(dist, f.common.seed);
  } else if (f.target == "min") {
    plan = plan_to_min(dist, f.common.seed);
  } else {
    plan = plan_to_median(dist, f.common.seed);
  }
  plan.mode = parse_resample_mode(f.mode);
  const auto dir = prepare_out(f, sub);
  const auto resampled = apply_resample(data.manifest, plan);
  write_manifest(dir / "resampled.jsonl", resampled);
  const auto after = compute_distribution(resampled);
  write_text(dir / "distribution.json",
             json{{"before", distribution_to_json(dist)}, {"after", distribution_to_json(after)},
                  {"targets", plan.target_counts}, {"mode", to_string(plan.mode)}}
                     .dump(2) +
                 "\n");
  if (f.schedule_budget > 0) {
    // Dominant class first, the rest in taxonomy order.
    auto classes = data.manifest.observed_labels();
    std::stable_sort(classes.begin(), classes.end(),
                     [&](const auto& a, const auto& b) { return dist.counts.at(a) > dist.counts.at(b); });
    const auto schedule =
        build_subset_schedule(classes, f.schedule_budget, f.share_start, f.share_end, f.schedule_steps);
    json steps = json::array();
    for (std::size_t i = 0; i < schedule.steps.size(); ++i) {
      const auto& s = schedule.steps[i];
      const auto idx = draw_subset_indices(data.manifest, s, mix_seed(f.common.seed, i));
      const auto name = "subset_" + std::to_string(i) + ".jsonl";
      write_manifest(dir / name, select_records(data.manifest, idx));
      steps.push_back({{"dominant_class", s.dominant_class},
                       {"dominant_share", s.dominant_share},
                       {"budget", s.budget},
                       {"allocation", s.allocation},
                       {"manifest", name}});
    }
    write_text(dir / "schedule.json", steps.dump(2) + "\n");
  }
  for (const auto& [label, n] : after.counts) out << label << ' ' << dist.counts.at(label) << " -> " << n << '\n';
  return 0;
}

int cmd_augment(Flags& f, const CLI::App* sub, std::ostream& out) {
  if (f.ops.empty()) throw ValidationError("--op: at least one augmentation is required");
  std::vector<AugmentOp> ops;
  for (const auto& s : f.ops) ops.push_back(parse_augment_op(s));
  const auto data = load_data(f.data, f.common.seed);
  const auto dir = prepare_out(f, sub);
  fs::create_directories(dir / "images");
  std::vector<AnnotationRecord> records;
  for (const auto& rec : data.manifest.records) {
    const auto image = data.images->image_for(rec);
    for (const auto& op : ops) {
      auto aug = apply_augment(rec, op, &image);
      const auto file = fs::path("images") / (aug.record.sample_id + ".pgm");
      write_pgm(dir / file, *aug.image);
      aug.record.image_ref = file.generic_string();
      records.push_back(std::move(aug.record));
    }
  }
  auto manifest = make_manifest(std::move(records), data.manifest.seed);
  manifest.taxonomy.insert(data.manifest.taxonomy.begin(), data.manifest.taxonomy.end());
  write_manifest(dir / "augmented.jsonl", manifest);
  out << manifest.records.size() << " augmented records\n";
  return 0;
}

int cmd_train(Flags& f, const CLI::App* sub, std::ostream& out) {
  const auto options = resolve_audit(f);
  const auto data = load_data(f.data, options.seed);
  const auto splits = make_splits(data, options.seed);
  const auto dir = prepare_out(f, sub, options.to_json());
  const auto& classes = splits.classes;
  const auto config = options.resolved_train();
  const auto weights = f.weights == "unit" ? unit_weights(classes)
                                           : compute_class_weights(compute_distribution(splits.train), classes);
  auto model = options.model == ModelKind::TinyViT ? make_vit(options.vit, classes.size(), options.seed)
                                                   : make_cnn(options.cnn, classes.size(), options.seed);
  const auto train_set = to_labeled_set(splits.train, *data.images, classes, options.input_side());
  const auto val_set = to_labeled_set(splits.validation, *data.images, classes, options.input_side());
  const auto trace = train(*model, train_set, config, DetectionLoss{weights.vector(), config.box_weight}, classes,
                           &val_set);
  std::string majority = classes.front();
  const auto dist = compute_distribution(splits.train);
  for (const auto& c : classes) {
    if (dist.counts.at(c) > dist.counts.at(majority)) majority = c;
  }
  const auto eval = evaluate(*model, splits.test, *data.images, classes, majority, options.iou_threshold);
  save_snapshot(dir / "model.snapshot", ModelSnapshot::capture(*model, options.seed, config.to_json()));
  trace.write_csv(dir / "trace.csv");
  const json phase{{"evaluation", eval.to_json()}, {"weights", weights.to_json()}};
  write_text(dir / "evaluation.json", phase.dump(2) + "\n");
  write_text(dir / "metrics.csv", metrics_table_csv(phase));
  out << "mAP " << format_percent(eval.map) << "  NDS " << format_percent(eval.nds) << "  macro IoU "
      << format_percent(eval.macro_iou) << "  minority recall " << format_percent(eval.minority_recall) << '\n';
  return 0;
}

int cmd_audit(Flags& f, const CLI::App* sub, std::ostream& out, bool mitigate) {
  const auto options = resolve_audit(f);
  const auto strategy = parse_strategy(f.strategy);
  const auto data = load_data(f.data, options.seed);
  const auto dir = prepare_out(f, sub, options.to_json());
  auto run = run_audit(data, options);
  if (mitigate) run_mitigation(run, data, options, strategy);
  const auto run_dir = dir / run_directory_name(options.seed, options.to_json());
  write_run_artifacts(run_dir, run, options);
  out << render_text(run.report) << "\nartifacts: " << run_dir.string() << '\n';
  return 0;
}

int cmd_recalibrate(Flags& f, const CLI::App* sub, std::ostream& out) {
  const auto options = resolve_audit(f);
  const auto data = load_data(f.data, options.seed);
  const auto dir = prepare_out(f, sub, options.to_json());
  const auto result = run_recalibration(data, options);
  write_text(dir / "recalibration.json", result.dump(2) + "\n");
  out << "iterations " << result["iterations"].size() << ", " << result["stop_reason"].get<std::string>() << '\n';
  return 0;
}

int cmd_report(Flags& f, const CLI::App* sub, std::ostream& out) {
  const auto report = read_json_file((fs::path(f.run_dir) / "report.json").string(), "--run-dir");
  if (!report.contains("pre") || !report.contains("config")) throw ValidationError("--run-dir: report.json is not a bias report");
  const auto dir = prepare_out(f, sub);
  const auto text = render_text(report);
  write_text(dir / "report.txt", text);
  write_text(dir / "metrics_pre.csv", metrics_table_csv(report["pre"]));
  if (report.contains("post")) write_text(dir / "metrics_post.csv", metrics_table_csv(report["post"]));
  out << text;
  return 0;
}

Tensor read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("--matrix: cannot open " + path);
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t n = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
      } catch (const std::logic_error&) {
        throw ParseError("--matrix: " + path + ": bad number '" + cell + "'", rows + 1);
      }
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols || n == 0) throw ParseError("--matrix: " + path + ": ragged row", rows + 1);
    ++rows;
  }
  if (rows == 0) throw ValidationError("--matrix: " + path + " is empty");
  return Tensor({rows, cols}, std::move(values));
}

int cmd_heatmap(Flags& f, const CLI::App* sub, std::ostream& out) {
  if (!f.matrix.empty()) {
    const auto map = read_matrix_csv(f.matrix);
    const auto dir = prepare_out(f, sub);
    export_heatmap(map, dir / fs::path(f.matrix).stem());
    out << "wrote " << (dir / fs::path(f.matrix).stem()).string() << ".pgm\n";
    return 0;
  }
  if (f.snapshot.empty() || f.sample.empty()) throw ValidationError("heatmap needs --matrix, or --snapshot with --sample");
  const auto snap = load_snapshot(f.snapshot);
  const auto model = snap.restore();
  const auto* vit = dynamic_cast<const TinyViT*>(model.get());
  if (vit == nullptr) throw ValidationError("--snapshot: attention heatmaps need a tiny_vit model");
  const auto data = load_data(f.data, f.common.seed);
  const auto it = std::find_if(data.manifest.records.begin(), data.manifest.records.end(),
                               [&](const auto& r) { return r.sample_id == f.sample; });
  if (it == data.manifest.records.end()) throw ValidationError("--sample: no record " + f.sample);
  const auto one = make_manifest({*it});
  const auto set = to_labeled_set(one, *data.images, {it->class_label}, static_cast<int>(model->input_side()));

  ForwardCache cache;
  model->forward_sample(set.inputs.data(), cache, nullptr);
  const std::size_t k = model->num_classes();
  const auto logits = std::span<const double>(cache.output).first(k);
  const auto predicted = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());

  const std::size_t grid = vit->grid();
  const auto attn = class_token_patch_attention(*vit, cache);
  const auto rel = lrp_propagate(*model, cache, predicted);
  std::vector<double> patches(rel.per_layer.front().begin() + 1, rel.per_layer.front().end());

  const auto dir = prepare_out(f, sub);
  const auto stem = f.sample;
  export_heatmap(Tensor({grid, grid}, attn), dir / ("attention_" + stem));
  export_heatmap(Tensor({grid, grid}, patches), dir / ("relevance_" + stem));
  const ImageSize size{static_cast<int>(model->input_side()), static_cast<int>(model->input_side())};
  const json summary{{"sample_id", it->sample_id},
                     {"class", it->class_label},
                     {"predicted_index", predicted},
                     {"attention_mass_on_gt", attention_mass_on_gt(attn, grid, it->bbox, size)},
                     {"relevance_inbox_fraction", rel.inbox_fraction(grid, it->bbox, size)}};
  write_text(dir / ("heatmap_" + stem + ".json"), summary.dump(2) + "\n");
  out << summary.dump() << '\n';
  return 0;
}

// Appends --key=value for config-file keys not already given on the command
// line. Keys are flag names with '-' or '_'.
void merge_config_file(CLI::App& app, std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return;
  CLI::App* sub = nullptr;
  for (const auto& a : args) {
    if (!a.empty() && a[0] != '-') {
      sub = app.get_subcommand_no_throw(a);
      if (sub) break;
    }
  }
  if (sub == nullptr) return;
  const auto cfg = read_json_file(path, "--config");
  if (!cfg.is_object()) throw ValidationError("--config: " + path + " must hold a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    const auto flag = "--" + name;
    if (name == "config" || name == "subcommand") continue;
    if (sub->get_option_no_throw(flag) == nullptr) throw ValidationError("--config: unknown key '" + key + "'");
    if (given(flag)) continue;
    auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array()) {
      for (const auto& v : value) extra.push_back(flag + "=" + text(v));
    } else {
      extra.push_back(flag + "=" + text(value));
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  Flags f;
  CLI::App app{"Class-imbalance bias audit for small detectors", "biaslens"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  auto* analyze = app.add_subcommand("analyze", "Class and condition distribution of a dataset");
  auto* resample = app.add_subcommand("resample", "Random over/under-sampling and dominant-share subsets");
  auto* augment = app.add_subcommand("augment", "Apply augmentation ops to every record");
  auto* trainc = app.add_subcommand("train", "Train one model and evaluate it on the test split");
  auto* audit = app.add_subcommand("audit", "Baseline training plus bias report");
  auto* mitigate = app.add_subcommand("mitigate", "Audit, apply a mitigation strategy, retrain and compare");
  auto* recal = app.add_subcommand("recalibrate", "Iterative class-weight recalibration");
  auto* report = app.add_subcommand("report", "Render an existing run's report");
  auto* heatmap = app.add_subcommand("heatmap", "Heatmaps from a matrix CSV or a transformer snapshot");

  for (auto* s : {analyze, resample, augment, trainc, audit, mitigate, recal, report, heatmap}) add_common(s, f);
  for (auto* s : {analyze, resample, augment, trainc, audit, mitigate, recal, heatmap}) add_data(s, f);
  for (auto* s : {trainc, audit, mitigate, recal}) {
    add_model(s, f);
    add_train(s, f);
  }
  for (auto* s : {audit, mitigate, recal}) add_audit(s, f);
  trainc->add_option("--iou-threshold", f.audit.iou_threshold, "IoU needed for a true positive")
      ->check(CLI::Range(0.0, 1.0));
  trainc->add_option("--weights", f.weights, "Loss weights")->check(CLI::IsMember({"unit", "inverse"}));
  for (auto* s : {audit, mitigate}) {
    s->add_option("--strategy", f.strategy, "Mitigation strategy")
        ->check(CLI::IsMember({"cost_sensitive", "resample", "augment", "combined"}));
  }
  resample->add_option("--mode", f.mode, "Resampling mode")->check(CLI::IsMember({"oversample", "undersample", "combined"}));
  resample->add_option("--target", f.target, "Target count for every class")->check(CLI::IsMember({"max", "min", "median"}));
  resample->add_option("--count", f.counts, "Explicit target label=N (repeatable); overrides --target");
  resample->add_option("--schedule-budget", f.schedule_budget, "Dominant-share subset budget (0 = no schedule)");
  resample->add_option("--share-start", f.share_start, "Dominant share at the first step")->check(CLI::Range(0.0, 1.0));
  resample->add_option("--share-end", f.share_end, "Dominant share at the last step")->check(CLI::Range(0.0, 1.0));
  resample->add_option("--schedule-steps", f.schedule_steps, "Number of subset steps")->check(CLI::PositiveNumber);
  augment->add_option("--op", f.ops, "rot90, rot180, rot270, flip_h, flip_v, brightness:D, contrast:F, zoom:F (repeatable)");
  report->add_option("--run-dir", f.run_dir, "Run directory holding report.json")->required();
  heatmap->add_option("--matrix", f.matrix, "CSV matrix to normalize and export");
  heatmap->add_option("--snapshot", f.snapshot, "Transformer snapshot");
  heatmap->add_option("--sample", f.sample, "Sample id to explain");

  std::vector<std::string> args = argv;
  try {
    merge_config_file(app, args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    kernels::set_num_jobs(f.common.jobs);
    if (analyze->parsed()) return cmd_analyze(f, analyze, out);
    if (resample->parsed()) return cmd_resample(f, resample, out);
    if (augment->parsed()) return cmd_augment(f, augment, out);
    if (trainc->parsed()) return cmd_train(f, trainc, out);
    if (audit->parsed()) return cmd_audit(f, audit, out, false);
    if (mitigate->parsed()) return cmd_audit(f, mitigate, out, true);
    if (recal->parsed()) return cmd_recalibrate(f, recal, out);
    if (report->parsed()) return cmd_report(f, report, out);
    if (heatmap->parsed()) return cmd_heatmap(f, heatmap, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace biaslens::cli
