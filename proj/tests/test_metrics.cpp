#include <algorithm>
#include <cmath>
#include <functional>

#include "biaslens/metrics.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "metrics_oracle.hpp"

using namespace biaslens;
using testutil::rec;

namespace {

Box random_box(Rng& rng, double frame = 50.0) {
  const double x1 = uniform_unit(rng) * (frame - 2), y1 = uniform_unit(rng) * (frame - 2);
  return {x1, y1, x1 + 0.5 + uniform_unit(rng) * (frame - x1 - 0.5), y1 + 0.5 + uniform_unit(rng) * (frame - y1 - 0.5)};
}

// Largest number of detection/ground-truth pairs with IoU >= threshold under
// a one-to-one assignment, by exhaustive search.
std::size_t max_matching(const std::vector<Detection>& dets, const std::vector<AnnotationRecord>& gts, double thr) {
  std::vector<bool> used(gts.size(), false);
  std::function<std::size_t(std::size_t)> go = [&](std::size_t d) -> std::size_t {
    if (d == dets.size()) return 0;
    std::size_t best = go(d + 1);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_label != dets[d].class_label || gts[g].sample_id != dets[d].sample_id) continue;
      if (iou(dets[d].bbox, gts[g].bbox) < thr) continue;
      used[g] = true;
      best = std::max(best, 1 + go(d + 1));
      used[g] = false;
    }
    return best;
  };
  return go(0);
}

}  // namespace

TEST_SUITE("iou") {
  TEST_CASE("worked cases") {
    CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
    CHECK(iou({0, 0, 2, 2}, {5, 5, 6, 6}) == 0.0);
    CHECK(iou({0, 0, 2, 2}, {2, 0, 4, 2}) == 0.0);
    CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
    CHECK_THROWS_AS(iou({0, 0, 0, 2}, {0, 0, 1, 1}), ValidationError);
  }

  TEST_CASE("property: symmetric, reflexive and bounded") {
    Rng rng(61);
    for (int trial = 0; trial < 1000; ++trial) {
      const auto a = random_box(rng), b = random_box(rng);
      const double v = iou(a, b);
      CHECK(v == iou(b, a));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
    }
  }

  TEST_CASE("property: agrees with cell counting on integer boxes") {
    Rng rng(62);
    for (int trial = 0; trial < 300; ++trial) {
      auto ib = [&] {
        const double x1 = uniform_index(rng, 15), y1 = uniform_index(rng, 15);
        return Box{x1, y1, x1 + 1 + uniform_index(rng, 10), y1 + 1 + uniform_index(rng, 10)};
      };
      const auto a = ib(), b = ib();
      CHECK(iou(a, b) == doctest::Approx(testutil::cell_iou(a, b)).epsilon(1e-14));
    }
  }
}

TEST_SUITE("matching") {
  TEST_CASE("perfect predictions") {
    const std::vector<AnnotationRecord> gts = {rec("s", "ped", {1, 1, 5, 5}), rec("s", "cyc", {6, 6, 9, 9})};
    const std::vector<Detection> dets = {{"s", "ped", {1, 1, 5, 5}, 0.9}, {"s", "cyc", {6, 6, 9, 9}, 0.8}};
    const auto m = match_detections(dets, gts);
    for (const auto& [label, e] : per_class_errors(m)) {
      CHECK(e.tp == 1);
      CHECK(e.fp == 0);
      CHECK(e.fn == 0);
      CHECK(e.fp_rate == 0.0);
      CHECK(e.fn_rate == 0.0);
    }
  }

  TEST_CASE("no detections means every ground truth is missed") {
    const std::vector<AnnotationRecord> gts = {rec("a", "ped"), rec("b", "ped"), rec("c", "cyc")};
    const auto m = match_detections({}, gts);
    CHECK(m.per_class.at("ped").fn == 2);
    CHECK(m.per_class.at("cyc").fn == 1);
  }

  TEST_CASE("two detections on one ground truth") {
    const std::vector<AnnotationRecord> gts = {rec("s", "ped", {0, 0, 10, 10})};
    const std::vector<Detection> dets = {{"s", "ped", {0, 0, 9, 10}, 0.4}, {"s", "ped", {1, 0, 10, 10}, 0.7}};
    const auto m = match_detections(dets, gts);
    const auto& cm = m.per_class.at("ped");
    REQUIRE(cm.tp.size() == 2);
    CHECK(cm.scores[0] == 0.7);
    CHECK(cm.tp[0]);
    CHECK_FALSE(cm.tp[1]);
  }

  TEST_CASE("errors isolate the affected class") {
    const std::vector<AnnotationRecord> gts = {rec("s", "ped", {0, 0, 4, 4}), rec("s", "cyc", {5, 5, 9, 9}),
                                               rec("t", "cyc", {0, 0, 4, 4})};
    const std::vector<Detection> dets = {{"s", "ped", {0, 0, 4, 4}, 0.9},
                                         {"s", "cyc", {5, 5, 9, 9}, 0.8},
                                         {"t", "cyc", {20, 20, 24, 24}, 0.7}};
    const auto e = per_class_errors(match_detections(dets, gts));
    CHECK(e.at("ped").fp == 0);
    CHECK(e.at("ped").fn == 0);
    CHECK(e.at("cyc").fp == 1);
    CHECK(e.at("cyc").fn == 1);
    CHECK(e.at("cyc").fn_rate == 0.5);
  }

  TEST_CASE("threshold must be in (0, 1]") {
    CHECK_THROWS_AS(match_detections({}, {}, 0.0), ValidationError);
    CHECK_THROWS_AS(match_detections({}, {}, 1.5), ValidationError);
  }

  TEST_CASE("crafted scene matches the exhaustive recount") {
    const auto scene = testutil::crafted_scene();
    REQUIRE(scene.detections.size() == 10);
    REQUIRE(scene.ground_truth.size() == 6);
    const auto m = match_detections(scene.detections, scene.ground_truth, 0.5);
    const auto errors = per_class_errors(m);
    const auto oracle = testutil::brute_force_recount(scene, 0.5);
    REQUIRE(errors.size() == oracle.size());
    for (const auto& [label, o] : oracle) {
      CAPTURE(label);
      CHECK(errors.at(label).tp == o.tp);
      CHECK(errors.at(label).fp == o.fp);
      CHECK(errors.at(label).fn == o.fn);
      CHECK(m.per_class.at(label).tp == o.flags);
      CHECK(average_precision(m.per_class.at(label)) == doctest::Approx(testutil::brute_force_ap(o.flags, o.n_gt)).epsilon(1e-15));
    }
    // Hand tally of the same scene.
    CHECK(errors.at("ped").tp == 3);
    CHECK(errors.at("ped").fp == 3);
    CHECK(errors.at("cyc").tp == 2);
    CHECK(errors.at("cyc").fp == 1);
    CHECK(errors.at("moto").fp == 1);
    CHECK(errors.at("moto").fn == 1);
  }

  TEST_CASE("property: greedy TP count equals the best assignment on separated scenes") {
    // Ground truths sit in separate cells of a 3x3 grid, so each detection
    // can only reach one of them and greedy matching is optimal.
    Rng rng(63);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<AnnotationRecord> gts;
      std::vector<Detection> dets;
      const std::size_t n_gt = 1 + uniform_index(rng, 3), n_det = uniform_index(rng, 4);
      std::vector<int> cells = {0, 1, 2, 3, 4, 5, 6, 7, 8};
      std::shuffle(cells.begin(), cells.end(), rng);
      for (std::size_t g = 0; g < n_gt; ++g) {
        const double ox = (cells[g] % 3) * 20.0, oy = (cells[g] / 3) * 20.0;
        gts.push_back(rec("g" + std::to_string(g), "ped", {ox + 2, oy + 2, ox + 12, oy + 12}, Condition::Normal, {60, 60}));
        gts.back().sample_id = "s";
      }
      for (std::size_t d = 0; d < n_det; ++d) {
        const auto& target = gts[uniform_index(rng, n_gt)].bbox;
        const double jx = 4 * uniform_unit(rng) - 2, jy = 4 * uniform_unit(rng) - 2;
        dets.push_back({"s", "ped", {target.x1 + jx, target.y1 + jy, target.x2 + jx, target.y2 + jy}, uniform_unit(rng)});
      }
      const auto m = match_detections(dets, gts, 0.5);
      const std::size_t tp = m.per_class.count("ped") ? m.per_class.at("ped").tp_count() : 0;
      CHECK(tp == max_matching(dets, gts, 0.5));
    }
  }
}

TEST_SUITE("average precision") {
  TEST_CASE("worked PR curve") {
    const std::vector<bool> flags = {true, false, true};
    CHECK(std::abs(average_precision(flags, 2) - 0.8333) <= 1e-4);
    CHECK(average_precision(flags, 2) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("degenerate flag lists") {
    const std::vector<bool> all_tp = {true, true, true};
    const std::vector<bool> all_fp = {false, false};
    CHECK(average_precision(all_tp, 3) == 1.0);
    CHECK(average_precision(all_fp, 3) == 0.0);
  }

  TEST_CASE("property: agrees with the brute-force definition") {
    Rng rng(64);
    for (int trial = 0; trial < 500; ++trial) {
      std::vector<bool> flags;
      std::size_t tps = 0;
      for (std::size_t i = 0, n = uniform_index(rng, 15); i < n; ++i) {
        flags.push_back(uniform_unit(rng) < 0.5);
        tps += flags.back();
      }
      const std::size_t n_gt = tps + uniform_index(rng, 4) + (tps == 0);
      CHECK(average_precision(flags, n_gt) == doctest::Approx(testutil::brute_force_ap(flags, n_gt)).epsilon(1e-14));
    }
  }

  TEST_CASE("property: turning a false positive into a true positive never lowers AP") {
    Rng rng(65);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<bool> flags;
      std::size_t tps = 0;
      for (std::size_t i = 0, n = 1 + uniform_index(rng, 12); i < n; ++i) {
        flags.push_back(uniform_unit(rng) < 0.5);
        tps += flags.back();
      }
      // Room for one more true positive.
      const std::size_t n_gt = tps + 1 + uniform_index(rng, 3);
      std::vector<std::size_t> fps;
      for (std::size_t i = 0; i < flags.size(); ++i) {
        if (!flags[i]) fps.push_back(i);
      }
      if (fps.empty()) continue;
      auto better = flags;
      better[fps[uniform_index(rng, fps.size())]] = true;
      CHECK(average_precision(better, n_gt) >= average_precision(flags, n_gt) - 1e-15);
    }
  }

  TEST_CASE("mean AP") {
    // Per-class AP in percent as published for one condition row.
    CHECK(mean_ap({{"ped", 86.3}, {"cyc", 54.7}, {"moto", 77.8}}) == doctest::Approx(72.93).epsilon(1e-4));
    CHECK(mean_ap({{"ped", 0.42}}) == 0.42);
    CHECK(mean_ap({{"a", 0.0}, {"b", 0.0}}) == 0.0);
    CHECK_THROWS_AS(mean_ap({}), ValidationError);
    Rng rng(66);
    for (int trial = 0; trial < 100; ++trial) {
      const double v = uniform_unit(rng);
      std::map<std::string, double> same;
      for (std::size_t i = 0, n = 1 + uniform_index(rng, 6); i < n; ++i) same["c" + std::to_string(i)] = v;
      CHECK(mean_ap(same) == doctest::Approx(v).epsilon(1e-15));
    }
  }

  TEST_CASE("classes without ground truth are skipped") {
    MatchResult m;
    m.per_class["ghost"].tp = {false};
    m.per_class["ghost"].scores = {0.5};
    m.per_class["ped"].tp = {true};
    m.per_class["ped"].scores = {0.9};
    m.per_class["ped"].n_gt = 1;
    std::vector<std::string> skipped;
    const auto ap = per_class_ap(m, &skipped);
    CHECK(ap.size() == 1);
    CHECK(skipped == std::vector<std::string>{"ghost"});
  }
}

TEST_SUITE("nds") {
  TEST_CASE("worked cases") {
    // Orientation, velocity and attribute default to 1 and contribute nothing.
    CHECK(nds(1.0, default_tp_errors(0.0, 0.0)) == doctest::Approx(0.7).epsilon(1e-15));
    const TPErrorSet zero = {{"translation", 0}, {"scale", 0}, {"orientation", 0}, {"velocity", 0}, {"attribute", 0}};
    CHECK(std::abs(nds(1.0, zero) - 1.0) <= 1e-12);
    const TPErrorSet ones = {{"translation", 1}, {"scale", 2.5}, {"orientation", 1}, {"velocity", 7}, {"attribute", 1}};
    CHECK(std::abs(nds(0.0, ones)) <= 1e-12);
    const TPErrorSet mixed = {{"translation", 0.2}, {"scale", 0.4}, {"orientation", 1.5}, {"velocity", 0.0}, {"attribute", 1.0}};
    CHECK(std::abs(nds(0.6, mixed) - 0.54) <= 1e-12);
    CHECK_THROWS_AS(nds(1.2, zero), ValidationError);
    CHECK_THROWS_AS(nds(0.5, {{"translation", -0.1}}), ValidationError);
  }

  TEST_CASE("property: bounded and linear in mAP with slope one half") {
    Rng rng(67);
    for (int trial = 0; trial < 500; ++trial) {
      TPErrorSet e;
      for (const auto* name : {"translation", "scale", "orientation", "velocity", "attribute"}) {
        e.emplace_back(name, 2.0 * uniform_unit(rng));
      }
      const double a = uniform_unit(rng), b = uniform_unit(rng);
      const double na = nds(a, e), nb = nds(b, e);
      CHECK(na >= 0.0);
      CHECK(na <= 1.0);
      CHECK(na - nb == doctest::Approx(0.5 * (a - b)).epsilon(1e-12));
    }
  }

  TEST_CASE("translation and scale errors from matched pairs") {
    const std::vector<AnnotationRecord> gts = {rec("s", "ped", {0, 0, 3, 4})};
    const std::vector<Detection> exact = {{"s", "ped", {0, 0, 3, 4}, 0.9}};
    const auto e0 = tp_errors(match_detections(exact, gts));
    CHECK(e0[0].second == 0.0);
    CHECK(e0[1].second == 0.0);
    CHECK(e0[2].second == 1.0);
    // Shifted by 1 along x: center distance 1 over diagonal 5.
    const std::vector<Detection> shifted = {{"s", "ped", {1, 0, 4, 4}, 0.9}};
    const auto e1 = tp_errors(match_detections(shifted, gts));
    CHECK(e1[0].second == doctest::Approx(0.2));
    CHECK(e1[1].second == doctest::Approx(0.0));
    const auto none = tp_errors(match_detections({}, gts));
    for (const auto& [name, v] : none) CHECK(v == 1.0);
  }
}

TEST_SUITE("detection files") {
  TEST_CASE("round trip") {
    testutil::TempDir dir;
    const auto scene = testutil::crafted_scene();
    write_detections(dir / "d.jsonl", scene.detections);
    const auto back = load_detections(dir / "d.jsonl");
    REQUIRE(back.size() == scene.detections.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].sample_id == scene.detections[i].sample_id);
      CHECK(back[i].bbox == scene.detections[i].bbox);
      CHECK(back[i].score == scene.detections[i].score);
    }
  }
}
