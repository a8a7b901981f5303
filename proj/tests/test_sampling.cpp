#include <algorithm>
#include <cmath>
#include <map>

#include "biaslens/behavior.hpp"
#include "biaslens/sampling.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace biaslens;
using testutil::counts_manifest;
using testutil::rec;

namespace {

std::map<std::string, std::uint64_t> counts_of(const DatasetManifest& m) {
  std::map<std::string, std::uint64_t> c;
  for (const auto& r : m.records) ++c[r.class_label];
  return c;
}

std::multiset<std::string> ids_of(const DatasetManifest& m) {
  std::multiset<std::string> s;
  for (const auto& r : m.records) s.insert(r.sample_id);
  return s;
}

const std::vector<std::string> kGeometric = {"rot90", "rot180", "rot270", "flip_h", "flip_v"};

}  // namespace

TEST_SUITE("resampling") {
  TEST_CASE("oversample to the largest class") {
    const auto m = counts_manifest({{"ped", 100}, {"cyc", 10}, {"moto", 12}});
    const auto out = random_oversample(m, plan_to_max(compute_distribution(m), 3));
    CHECK(counts_of(out) == std::map<std::string, std::uint64_t>{{"ped", 100}, {"cyc", 100}, {"moto", 100}});
    // Originals first, untouched.
    for (std::size_t i = 0; i < m.records.size(); ++i) CHECK(out.records[i] == m.records[i]);
  }

  TEST_CASE("targets equal to the current counts are the identity") {
    const auto m = counts_manifest({{"ped", 100}, {"cyc", 10}, {"moto", 12}});
    ResamplePlan plan{{{"ped", 100}, {"cyc", 10}, {"moto", 12}}, ResampleMode::Oversample, 9};
    CHECK(random_oversample(m, plan).records == m.records);
    plan.mode = ResampleMode::Undersample;
    CHECK(random_undersample(m, plan).records == m.records);
  }

  TEST_CASE("oversampling is seed-determined") {
    const auto m = counts_manifest({{"ped", 50}, {"cyc", 7}});
    const auto plan = plan_to_max(compute_distribution(m), 42);
    CHECK(random_oversample(m, plan).records == random_oversample(m, plan).records);
    auto other = plan;
    other.seed = 43;
    CHECK(random_oversample(m, plan).records != random_oversample(m, other).records);
  }

  TEST_CASE("undersample to the smallest class") {
    const auto m = counts_manifest({{"ped", 100}, {"cyc", 10}, {"moto", 12}});
    const auto out = random_undersample(m, plan_to_min(compute_distribution(m), 3));
    CHECK(counts_of(out) == std::map<std::string, std::uint64_t>{{"ped", 10}, {"cyc", 10}, {"moto", 10}});
  }

  TEST_CASE("undersample picks are seed-determined") {
    const auto m = counts_manifest({{"a", 4}, {"b", 2}});
    ResamplePlan plan{{{"a", 2}, {"b", 2}}, ResampleMode::Undersample, 1};
    const auto first = random_undersample(m, plan);
    CHECK(counts_of(first) == std::map<std::string, std::uint64_t>{{"a", 2}, {"b", 2}});
    CHECK(random_undersample(m, plan).records == first.records);
    // Some seed must pick a different pair of the four "a" records.
    bool differs = false;
    for (std::uint64_t s = 2; s < 40 && !differs; ++s) {
      plan.seed = s;
      differs = ids_of(random_undersample(m, plan)) != ids_of(first);
    }
    CHECK(differs);
  }

  TEST_CASE("wrong-direction targets are errors") {
    const auto m = counts_manifest({{"a", 4}, {"b", 2}});
    CHECK_THROWS_AS(random_oversample(m, {{{"a", 3}}, ResampleMode::Oversample, 0}), ValidationError);
    CHECK_THROWS_AS(random_undersample(m, {{{"b", 3}}, ResampleMode::Undersample, 0}), ValidationError);
    CHECK_THROWS_AS(random_oversample(m, {{{"c", 3}}, ResampleMode::Oversample, 0}), ValidationError);
  }

  TEST_CASE("duplicates get unique ids") {
    const auto m = counts_manifest({{"a", 1}, {"b", 5}});
    const auto out = random_oversample(m, plan_to_max(compute_distribution(m), 0));
    const auto ids = ids_of(out);
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == out.records.size());
    CHECK(ids.count("a-0#dup1") == 1);
    CHECK(ids.count("a-0#dup4") == 1);
  }

  TEST_CASE("median plan: odd and even class counts") {
    auto three = plan_to_median(distribution_from_counts({{"a", 100}, {"b", 10}, {"c", 12}}), 0);
    CHECK(three.target_counts.at("a") == 12);
    CHECK(three.mode == ResampleMode::Combined);
    auto four = plan_to_median(distribution_from_counts({{"a", 100}, {"b", 10}, {"c", 12}, {"d", 15}}), 0);
    CHECK(four.target_counts.at("a") == 13);
  }

  TEST_CASE("resampling to equal counts twice is a fixed point") {
    const auto m = counts_manifest({{"a", 40}, {"b", 9}, {"c", 13}});
    const auto once = apply_resample(m, plan_to_median(compute_distribution(m), 5));
    const auto twice = apply_resample(once, plan_to_median(compute_distribution(once), 5));
    CHECK(twice.records == once.records);
  }

  TEST_CASE("property: oversampled percentages equal the plan's") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
      const auto m = counts_manifest({{"a", 1 + uniform_index(rng, 60)},
                                      {"b", 1 + uniform_index(rng, 60)},
                                      {"c", 1 + uniform_index(rng, 60)}});
      ResamplePlan plan{{}, ResampleMode::Oversample, static_cast<std::uint64_t>(trial)};
      std::uint64_t total = 0;
      for (const auto& [label, n] : compute_distribution(m).counts) {
        plan.target_counts[label] = n + uniform_index(rng, 50);
        total += plan.target_counts[label];
      }
      const auto d = compute_distribution(random_oversample(m, plan));
      for (const auto& [label, target] : plan.target_counts) {
        CHECK(d.counts.at(label) == target);
        CHECK(d.percentages.at(label) == 100.0 * static_cast<double>(target) / static_cast<double>(total));
      }
    }
  }

  TEST_CASE("property: median resampling equalizes every class") {
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
      const auto m = counts_manifest({{"a", 1 + uniform_index(rng, 80)},
                                      {"b", 1 + uniform_index(rng, 80)},
                                      {"c", 1 + uniform_index(rng, 80)},
                                      {"d", 1 + uniform_index(rng, 80)}});
      const auto plan = plan_to_median(compute_distribution(m), trial);
      const auto c = counts_of(apply_resample(m, plan));
      for (const auto& [label, n] : c) CHECK(n == plan.target_counts.at(label));
    }
  }
}

TEST_SUITE("subset schedule") {
  const std::vector<std::string> classes = {"ped", "cyc", "moto"};

  TEST_CASE("dominant share 0.67 of 300") {
    const auto s = build_subset_schedule(classes, 300, 0.67, 0.67, 1);
    REQUIRE(s.steps.size() == 1);
    // floor(201) + 49 + 49 = 299, the leftover unit goes to the dominant class
    CHECK(s.steps[0].allocation == std::map<std::string, std::uint64_t>{{"ped", 202}, {"cyc", 49}, {"moto", 49}});
  }

  TEST_CASE("equal representation endpoint") {
    const auto s = build_subset_schedule(classes, 300, 1.0 / 3.0, 1.0 / 3.0, 1);
    CHECK(s.steps[0].allocation == std::map<std::string, std::uint64_t>{{"ped", 100}, {"cyc", 100}, {"moto", 100}});
  }

  TEST_CASE("one step sits at the start share") {
    const auto s = build_subset_schedule(classes, 300, 0.9, 0.4, 1);
    REQUIRE(s.steps.size() == 1);
    CHECK(s.steps[0].dominant_share == 0.9);
    CHECK(s.steps[0].dominant_class == "ped");
  }

  TEST_CASE("interpolated shares") {
    const auto s = build_subset_schedule(classes, 300, 0.9, 0.5, 5);
    REQUIRE(s.steps.size() == 5);
    CHECK(s.steps.front().dominant_share == 0.9);
    CHECK(s.steps[2].dominant_share == doctest::Approx(0.7));
    CHECK(s.steps.back().dominant_share == doctest::Approx(0.5));
  }

  TEST_CASE("bad schedules") {
    CHECK_THROWS_AS(build_subset_schedule(classes, 2, 0.5, 0.5, 1), ValidationError);
    CHECK_THROWS_AS(build_subset_schedule(classes, 300, 0.5, 0.6, 2), ValidationError);
    CHECK_THROWS_AS(build_subset_schedule(classes, 300, 0.5, 0.5, 0), ValidationError);
    CHECK_THROWS_AS(build_subset_schedule(std::vector<std::string>{"a"}, 300, 0.5, 0.5, 1), ValidationError);
  }

  TEST_CASE("property: allocations sum to the budget") {
    Rng rng(23);
    for (int trial = 0; trial < 300; ++trial) {
      const std::uint64_t budget = 3 + uniform_index(rng, 5000);
      const double start = 0.05 + 0.95 * uniform_unit(rng);
      const double end = start * uniform_unit(rng) + 1e-3;
      const auto s = build_subset_schedule(classes, budget, start, std::min(start, end), 1 + uniform_index(rng, 8));
      for (const auto& step : s.steps) {
        std::uint64_t sum = 0;
        for (const auto& [label, n] : step.allocation) sum += n;
        CHECK(sum == budget);
        CHECK(step.allocation.at("ped") >= static_cast<std::uint64_t>(std::floor(step.dominant_share * budget)));
      }
    }
  }

  TEST_CASE("drawn subset matches the allocation") {
    const auto m = counts_manifest({{"ped", 300}, {"cyc", 60}, {"moto", 60}});
    const auto s = build_subset_schedule(classes, 300, 0.67, 0.67, 1);
    const auto idx = draw_subset_indices(m, s.steps[0], 4);
    CHECK(counts_of(select_records(m, idx)) == s.steps[0].allocation);
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
  }
}

TEST_SUITE("augmentation") {
  TEST_CASE("horizontal flip in a 100-wide frame") {
    const auto r = rec("s", "ped", {10, 20, 30, 40}, Condition::Normal, {100, 100});
    const auto out = apply_augment(r, parse_augment_op("flip_h"));
    CHECK(out.record.bbox == Box{70, 20, 90, 40});
    CHECK(out.record.sample_id == "s~flip_h");
    CHECK(apply_augment(out.record, parse_augment_op("flip_h")).record.bbox == r.bbox);
  }

  TEST_CASE("clockwise quarter turn in a 100-high frame") {
    const auto r = rec("s", "ped", {10, 20, 30, 40}, Condition::Normal, {100, 100});
    CHECK(apply_augment(r, parse_augment_op("rot90")).record.bbox == Box{60, 10, 80, 30});
  }

  TEST_CASE("op names round-trip through the parser") {
    for (const auto& name : {"rot90", "rot180", "rot270", "flip_h", "flip_v", "brightness:0.2", "contrast:1.5",
                             "zoom:0.8", "brightness:-0.1"}) {
      CHECK(parse_augment_op(name).name() == name);
    }
    CHECK_THROWS_AS(parse_augment_op("shear"), ValidationError);
    CHECK_THROWS_AS(parse_augment_op("zoom"), ValidationError);
    CHECK_THROWS_AS(parse_augment_op("zoom:-1"), ValidationError);
    CHECK_THROWS_AS(parse_augment_op("flip_h:2"), ValidationError);
    CHECK_THROWS_AS(parse_augment_op("contrast:abc"), ValidationError);
    CHECK_THROWS_AS(inverse(parse_augment_op("zoom:0.5")), ValidationError);
  }

  TEST_CASE("property: geometric ops are box bijections undone by their inverse") {
    Rng rng(31);
    for (int trial = 0; trial < 500; ++trial) {
      const int w = 8 + static_cast<int>(uniform_index(rng, 120)), h = 8 + static_cast<int>(uniform_index(rng, 120));
      const double x1 = uniform_unit(rng) * (w - 1), y1 = uniform_unit(rng) * (h - 1);
      const Box box{x1, y1, x1 + 0.5 + uniform_unit(rng) * (w - x1 - 0.5), y1 + 0.5 + uniform_unit(rng) * (h - y1 - 0.5)};
      const auto op = parse_augment_op(kGeometric[uniform_index(rng, kGeometric.size())]);
      const auto fwd = transform_box(box, {w, h}, op);
      CHECK(fwd.box.area() == doctest::Approx(box.area()));
      CHECK(fwd.box.x1 >= 0);
      CHECK(fwd.box.y2 <= fwd.size.height);
      const auto back = transform_box(fwd.box, fwd.size, inverse(op));
      CHECK(back.size == ImageSize{w, h});
      CHECK(back.box.x1 == doctest::Approx(box.x1));
      CHECK(back.box.y1 == doctest::Approx(box.y1));
      CHECK(back.box.x2 == doctest::Approx(box.x2));
      CHECK(back.box.y2 == doctest::Approx(box.y2));
    }
  }

  TEST_CASE("property: transformed pixels stay inside the transformed box") {
    // Oracle: paint the box's pixels, move image and box separately, and
    // compare the painted set with the pixels covered by the new box.
    Rng rng(32);
    for (int trial = 0; trial < 100; ++trial) {
      const int w = 5 + static_cast<int>(uniform_index(rng, 20)), h = 5 + static_cast<int>(uniform_index(rng, 20));
      const int x1 = static_cast<int>(uniform_index(rng, w - 1)), y1 = static_cast<int>(uniform_index(rng, h - 1));
      const int x2 = x1 + 1 + static_cast<int>(uniform_index(rng, w - x1 - 1));
      const int y2 = y1 + 1 + static_cast<int>(uniform_index(rng, h - y1 - 1));
      GrayImage img(w, h, 0.0);
      for (int y = y1; y < y2; ++y)
        for (int x = x1; x < x2; ++x) img.at(x, y) = 1.0;
      const auto r = rec("p", "ped", {double(x1), double(y1), double(x2), double(y2)}, Condition::Normal, {w, h});
      const auto out = apply_augment(r, parse_augment_op(kGeometric[trial % kGeometric.size()]), &img);
      REQUIRE(out.image);
      CHECK(out.image->width == out.record.image_size.width);
      const Box& b = out.record.bbox;
      for (int y = 0; y < out.image->height; ++y) {
        for (int x = 0; x < out.image->width; ++x) {
          const bool inside = x >= b.x1 && x + 1 <= b.x2 && y >= b.y1 && y + 1 <= b.y2;
          CHECK(out.image->at(x, y) == (inside ? 1.0 : 0.0));
        }
      }
    }
  }

  TEST_CASE("photometric ops keep the box and clamp intensities") {
    GrayImage img(4, 4, 0.8);
    const auto r = rec("p", "ped", {1, 1, 3, 3}, Condition::Normal, {4, 4});
    const auto bright = apply_augment(r, parse_augment_op("brightness:0.5"), &img);
    CHECK(bright.record.bbox == r.bbox);
    for (double v : bright.image->pixels) CHECK(v == 1.0);
    const auto dark = apply_augment(r, parse_augment_op("brightness:-0.3"), &img);
    for (double v : dark.image->pixels) CHECK(v == doctest::Approx(0.5));
  }

  TEST_CASE("zoom scales the box about the center") {
    const auto r = rec("p", "ped", {10, 10, 30, 30}, Condition::Normal, {40, 40});
    CHECK(apply_augment(r, parse_augment_op("zoom:0.5")).record.bbox == Box{15, 15, 25, 25});
  }
}

TEST_SUITE("behavior-driven plans") {
  AttentionSummary summary_with(double cyc_night_mass, double others = 0.8) {
    AttentionSummary s;
    for (const auto& label : {"ped", "cyc"}) {
      for (Condition c : {Condition::Normal, Condition::Night}) s.mass_on_gt[label][c] = {others, 10};
    }
    s.mass_on_gt["cyc"][Condition::Night] = {cyc_night_mass, 10};
    return s;
  }

  ClassDistribution dist_for_plans() {
    std::vector<AnnotationRecord> r;
    for (int i = 0; i < 60; ++i) r.push_back(rec("p" + std::to_string(i), "ped"));
    for (int i = 0; i < 30; ++i) r.push_back(rec("c" + std::to_string(i), "cyc", {1, 1, 5, 5}, Condition::Night));
    return compute_distribution(make_manifest(r));
  }

  TEST_CASE("no group below the threshold gives an empty plan") {
    CHECK(attention_guided_augment_plan(summary_with(0.5), dist_for_plans(), {0.3, 1.0}).empty());
  }

  TEST_CASE("low night attention on cyclists requests cyclist night samples") {
    const auto plan = attention_guided_augment_plan(summary_with(0.1), dist_for_plans(), {0.3, 1.0});
    REQUIRE(plan.size() == 1);
    CHECK(plan[0].class_label == "cyc");
    CHECK(plan[0].condition == Condition::Night);
    CHECK(plan[0].op == augment_for_condition(Condition::Night));
    // ceil((0.3 - 0.1) / 0.3 * 30) = 20
    CHECK(plan[0].count == 20);
  }

  TEST_CASE("doubling the deficit doubles the request") {
    const auto one = attention_guided_augment_plan(summary_with(0.2), dist_for_plans(), {0.3, 1.0});
    const auto two = attention_guided_augment_plan(summary_with(0.1), dist_for_plans(), {0.3, 1.0});
    REQUIRE(one.size() == 1);
    REQUIRE(two.size() == 1);
    CHECK(one[0].count == 10);
    CHECK(two[0].count == 2 * one[0].count);
    const auto kappa2 = attention_guided_augment_plan(summary_with(0.2), dist_for_plans(), {0.3, 2.0});
    CHECK(kappa2[0].count == 20);
  }

  TEST_CASE("relevance-informed sample plan") {
    const std::vector<RelevanceStat> stats = {{"a", 0.05, 1.0}, {"b", 0.9, 5.0}, {"c", 0.2, 2.0}, {"d", 0.1, 9.0}};
    CHECK(lrp_informed_sample_plan(stats, {}, 0.5).empty());
    const std::vector<std::string> one = {"a"};
    CHECK(lrp_informed_sample_plan(stats, one, 0.5) == std::vector<std::string>{"a"});
    // b has high in-box relevance, d is classified correctly.
    const std::vector<std::string> wrong = {"a", "b", "c"};
    CHECK(lrp_informed_sample_plan(stats, wrong, 0.5) == std::vector<std::string>{"c", "a"});
  }

  TEST_CASE("augment requests expand to seeded source picks") {
    std::vector<AnnotationRecord> r;
    for (int i = 0; i < 5; ++i) r.push_back(rec("c" + std::to_string(i), "cyc", {1, 1, 5, 5}, Condition::Night));
    for (int i = 0; i < 5; ++i) r.push_back(rec("p" + std::to_string(i), "ped"));
    const auto m = make_manifest(r);
    const std::vector<AugmentRequest> req = {{"cyc", Condition::Night, parse_augment_op("flip_h"), 7}};
    const auto picks = expand_augment_requests(m, req, 3);
    REQUIRE(picks.size() == 7);
    for (const auto& [i, op] : picks) {
      CHECK(m.records[i].class_label == "cyc");
      CHECK(op == parse_augment_op("flip_h"));
    }
    CHECK(picks == expand_augment_requests(m, req, 3));
  }
}
