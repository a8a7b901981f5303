#include <cmath>
#include <regex>

#include "biaslens/audit.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace biaslens;

namespace {

AuditOptions quick_options(std::uint64_t seed) {
  AuditOptions o;
  o.seed = seed;
  auto t = TrainConfig::cnn_defaults();
  t.epochs = 2;
  o.train = t;
  o.sensitivity = false;
  o.probe_per_class = 16;
  o.trace_probe_per_class = 8;
  return o;
}

}  // namespace

TEST_SUITE("verdicts") {
  TEST_CASE("threshold logic") {
    const VerdictThresholds t;
    CHECK(verdict(-0.05, 0.02, t) == "improved");
    CHECK(verdict(-0.02, 0.01, t) == "improved");
    CHECK(verdict(0.05, -0.02, t) == "regressed");
    CHECK(verdict(-0.05, 0.0, t) == "unchanged");
    CHECK(verdict(0.0, 0.05, t) == "unchanged");
    CHECK(verdict(0.0, 0.0, t) == "unchanged");
  }

  TEST_CASE("strategy names") {
    for (auto s : {Strategy::CostSensitive, Strategy::Resample, Strategy::Augment, Strategy::Combined}) {
      CHECK(parse_strategy(to_string(s)) == s);
    }
    CHECK_THROWS_AS(parse_strategy("smote"), ValidationError);
  }
}

TEST_SUITE("rank correlation") {
  TEST_CASE("worked cases") {
    const auto rev = spearman({1, 2, 3, 4}, {8, 6, 4, 2});
    CHECK(rev.defined);
    CHECK(rev.coefficient == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(spearman({1, 2, 3}, {1, 3, 2}).coefficient == doctest::Approx(0.5).epsilon(1e-15));
    // Tied ranks are averaged: ranks (1, 2.5, 2.5) against (1, 2, 3).
    CHECK(spearman({1, 2, 2}, {1, 2, 3}).coefficient == doctest::Approx(1.5 / std::sqrt(3.0)).epsilon(1e-14));
    CHECK_FALSE(spearman({1, 1, 1}, {1, 2, 3}).defined);
    CHECK_FALSE(spearman({1, 2}, {2, 1}).defined);
  }
}

TEST_SUITE("recalibration") {
  const WeightAdjustOptions adjust{0.9, 0.5, 0.05, 100.0};
  const std::vector<std::string> classes = {"a", "b", "c"};

  TEST_CASE("equal recall converges immediately") {
    auto s = start_recalibration(unit_weights(classes), 10, 0.05);
    s = recalibrate(s, {{"a", 0.7}, {"b", 0.7}, {"c", 0.72}}, adjust);
    CHECK(s.converged);
    CHECK(s.stop_reason == "gap_below_threshold");
    CHECK(s.history.size() == 1);
  }

  TEST_CASE("zero iterations stops before any adjustment") {
    auto s = start_recalibration(unit_weights(classes), 0, 0.05);
    CHECK(s.stopped);
    s = recalibrate(s, {{"a", 1.0}, {"b", 0.1}, {"c", 0.1}}, adjust);
    CHECK(s.history.size() == 1);
    CHECK_FALSE(s.converged);
  }

  TEST_CASE("budget bounds the number of adjustments and history only grows") {
    auto s = start_recalibration(unit_weights(classes), 2, 0.05);
    const std::map<std::string, double> recall{{"a", 1.0}, {"b", 0.2}, {"c", 0.4}};
    s = recalibrate(s, recall, adjust);
    CHECK(s.history.size() == 2);
    CHECK(s.weights.normalized.at("b") > s.weights.normalized.at("a"));
    s = recalibrate(s, recall, adjust);
    CHECK(s.history.size() == 3);
    s = recalibrate(s, recall, adjust);
    CHECK(s.stopped);
    CHECK(s.stop_reason == "max_iterations");
    CHECK(s.history.size() == 3);
    CHECK(s.gaps.size() == 3);
  }

  TEST_CASE("non-finite recall aborts") {
    auto s = start_recalibration(unit_weights(classes), 5, 0.05);
    CHECK_THROWS_AS(recalibrate(s, {{"a", NAN}, {"b", 0.2}, {"c", 0.4}}, adjust), RuntimeFailure);
  }
}

TEST_SUITE("run directories") {
  TEST_CASE("name carries the seed and a stable hash") {
    const nlohmann::json a = {{"lr", 0.001}, {"model", "tiny_cnn"}};
    const nlohmann::json b = {{"lr", 0.002}, {"model", "tiny_cnn"}};
    const auto name = run_directory_name(7, a);
    CHECK(std::regex_match(name, std::regex("run-7-[0-9a-f]{12}")));
    CHECK(run_directory_name(7, a) == name);
    CHECK(run_directory_name(7, b) != name);
  }
}

TEST_SUITE("audit runs") {
  TEST_CASE("augment needs a transformer baseline") {
    const auto data = synthetic_audit_data("imbalanced-90-5-5:200", 3);
    const auto opts = quick_options(3);
    const auto run = run_audit(data, opts);
    CHECK_THROWS_AS(plan_mitigation(run, opts, Strategy::Augment), ValidationError);
  }

  TEST_CASE("mitigation plans") {
    const auto data = synthetic_audit_data("imbalanced-90-5-5:300", 4);
    const auto opts = quick_options(4);
    const auto run = run_audit(data, opts);
    const auto dist = compute_distribution(run.splits.train);

    const auto cost = plan_mitigation(run, opts, Strategy::CostSensitive);
    CHECK(cost.train.records == run.splits.train.records);
    CHECK(cost.weights.vector() == compute_class_weights(dist, run.splits.classes).vector());

    const auto res = plan_mitigation(run, opts, Strategy::Resample);
    REQUIRE(res.resample);
    const auto after = compute_distribution(res.train);
    std::set<std::uint64_t> counts;
    for (const auto& [label, n] : after.counts) counts.insert(n);
    CHECK(counts.size() == 1);
    for (double w : res.weights.vector()) CHECK(w == 1.0);

    const auto comb = plan_mitigation(run, opts, Strategy::Combined);
    CHECK(comb.train.records.size() == 4 * res.train.records.size());
  }

  TEST_CASE("same seed gives the same report, and mitigation leaves the baseline alone") {
    const auto data = synthetic_audit_data("imbalanced-90-5-5:300", 5);
    const auto opts = quick_options(5);
    const auto first = run_audit(data, opts);
    auto second = run_audit(data, opts);
    CHECK(first.report.dump() == second.report.dump());
    CHECK(first.pre.snapshot.parameters == second.pre.snapshot.parameters);

    run_mitigation(second, data, opts, Strategy::CostSensitive);
    CHECK(second.report["pre"].dump() == first.report["pre"].dump());
    REQUIRE(second.post);
    CHECK(second.report.contains("deltas"));
    for (const auto& label : second.splits.classes) {
      const auto v = second.report["verdicts"][label].get<std::string>();
      CHECK((v == "improved" || v == "regressed" || v == "unchanged"));
    }
  }

  TEST_CASE("artifacts land on disk") {
    testutil::TempDir dir;
    const auto data = synthetic_audit_data("imbalanced-90-5-5:200", 6);
    const auto opts = quick_options(6);
    auto run = run_audit(data, opts);
    run_mitigation(run, data, opts, Strategy::Resample);
    write_run_artifacts(dir.path(), run, opts);
    for (const char* f : {"report.json", "report.txt", "config.json", "pre.snapshot", "post.snapshot",
                          "trace_pre.csv", "metrics_post.csv", "split_test.jsonl"}) {
      CAPTURE(f);
      CHECK(std::filesystem::exists(dir / f));
    }
    const auto restored = load_snapshot(dir / "pre.snapshot").restore();
    CHECK(std::equal(run.pre.snapshot.parameters.begin(), run.pre.snapshot.parameters.end(),
                     restored->parameters().begin()));
  }
}
