// Seeded training runs whose outcomes are directional rather than exact.
// Observed values are printed so regressions show up in the ctest log.

#include <algorithm>
#include <cmath>
#include <sstream>

#include "biaslens/audit.hpp"
#include "doctest.h"

using namespace biaslens;

namespace {

AuditOptions options_for(std::uint64_t seed) {
  AuditOptions o;
  o.seed = seed;
  o.sensitivity = false;
  o.probe_per_class = 16;
  o.trace_probe_per_class = 4;
  return o;
}

std::vector<double> class_recalls(const nlohmann::json& eval, const std::vector<std::string>& classes) {
  std::vector<double> r;
  for (const auto& c : classes) r.push_back(eval["classes"][c]["recall"].get<double>());
  return r;
}

}  // namespace

TEST_SUITE("empirical") {
  TEST_CASE("balanced data gives per-class recalls within 10 points") {
    // Needs the full 3000 samples: at 1500 seed 1 lands at a 17-point gap.
    for (std::uint64_t seed : {1, 2, 3}) {
      const auto data = synthetic_audit_data("balanced", seed);
      const auto run = run_audit(data, options_for(seed));
      const auto r = class_recalls(run.report["pre"]["evaluation"], run.splits.classes);
      const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
      MESSAGE("seed " << seed << " recalls " << r[0] << " " << r[1] << " " << r[2]);
      CHECK(*hi - *lo <= 0.10);
    }
  }

  TEST_CASE("90/5/5 data leaves the minority classes behind the majority") {
    const auto data = synthetic_audit_data("imbalanced-90-5-5:1500", 1);
    const auto run = run_audit(data, options_for(1));
    const auto& eval = run.report["pre"]["evaluation"];
    const auto r = class_recalls(eval, run.splits.classes);
    MESSAGE("recalls " << r[0] << " " << r[1] << " " << r[2]);
    // Index 0 is the 90% class.
    CHECK(r[1] < r[0]);
    CHECK(r[2] < r[0]);
    CHECK(eval["minority_recall"].get<double>() < r[0]);
  }

  TEST_CASE("cost-sensitive weights barely move a balanced model") {
    const auto data = synthetic_audit_data("balanced:1500", 4);
    const auto opts = options_for(4);
    auto run = run_audit(data, opts);
    run_mitigation(run, data, opts, Strategy::CostSensitive);
    const double delta = run.report["deltas"]["aggregate"]["macro_iou"].get<double>();
    MESSAGE("delta macro IoU " << delta);
    CHECK(std::abs(delta) < 0.02);
  }

  TEST_CASE("recalibration narrows the recall gap in most iterations") {
    const auto data = synthetic_audit_data("imbalanced-90-5-5:1500", 5);
    auto opts = options_for(5);
    opts.recalibration_iterations = 5;
    opts.recalibration_gap = 0.0;
    RecalibrationState state;
    run_recalibration(data, opts, &state);
    REQUIRE(state.gaps.size() == 6);
    int non_increasing = 0;
    for (std::size_t i = 1; i < state.gaps.size(); ++i) non_increasing += state.gaps[i] <= state.gaps[i - 1];
    std::ostringstream gaps;
    for (double g : state.gaps) gaps << g << ' ';
    MESSAGE("gaps " << gaps.str());
    CHECK(non_increasing >= 3);
  }
}
