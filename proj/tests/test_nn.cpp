#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "biaslens/batch.hpp"
#include "biaslens/behavior.hpp"
#include "biaslens/kernels.hpp"
#include "biaslens/model.hpp"
#include "biaslens/snapshot.hpp"
#include "biaslens/tiny_vit.hpp"
#include "biaslens/train.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace biaslens;

namespace {

// Small enough for exhaustive finite differences (about 3.5k parameters).
VitSpec small_vit() {
  VitSpec s;
  s.input_side = 16;
  s.patch = 8;
  s.dim = 12;
  s.heads = 2;
  s.layers = 2;
  return s;
}

Tensor random_batch(std::size_t n, std::size_t side, std::uint64_t seed) {
  return Tensor({n, 1, side, side}, testutil::normals(n * side * side, seed, 0.5));
}

Tensor random_boxes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.2 + 0.6 * uniform_unit(rng);
  return t;
}

// Two classes separated by which half of the image is bright.
LabeledSet halves_dataset(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  LabeledSet s;
  s.inputs = Tensor({n, 1, side, side});
  s.box_targets = Tensor({n, 4}, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    auto px = s.inputs.row(i);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const bool bright = (x < side / 2) == (label == 0);
        px[y * side + x] = (bright ? 0.8 : 0.2) + 0.15 * standard_normal(rng);
      }
    }
    s.labels.push_back(label);
    s.sample_ids.push_back("h" + std::to_string(i));
  }
  return s;
}

// Plain logistic regression on raw pixels, trained by full-batch gradient
// descent. Used only to confirm the toy set is linearly separable.
double logistic_accuracy(const LabeledSet& s) {
  const std::size_t n = s.size(), d = s.inputs.row_size();
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = s.inputs.row(i);
      const double z = std::inner_product(x.begin(), x.end(), w.begin(), b);
      const double err = 1.0 / (1.0 + std::exp(-z)) - s.labels[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * x[j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.1 * gw[j] / n;
    b -= 0.1 * gb / n;
  }
  std::size_t right = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = s.inputs.row(i);
    right += (std::inner_product(x.begin(), x.end(), w.begin(), b) > 0) == (s.labels[i] == 1);
  }
  return static_cast<double>(right) / n;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("parallel kernels equal the serial reference bit for bit") {
    kernels::set_num_jobs(3);
    const std::size_t m = 17, k = 23, n = 11;
    const auto a = testutil::normals(m * k, 1), b = testutil::normals(k * n, 2), bt = testutil::normals(n * k, 3);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n);
    kernels::omp::matmul(a.data(), b.data(), c2.data(), m, k, n);
    CHECK(c1 == c2);
    kernels::serial::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n);
    kernels::omp::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n);
    CHECK(c1 == c2);

    const auto g = testutil::normals(m * n, 4);
    std::vector<double> d1(k * n, 0.5), d2(k * n, 0.5);
    kernels::serial::matmul_tn_acc(a.data(), g.data(), d1.data(), m, k, n);
    kernels::omp::matmul_tn_acc(a.data(), g.data(), d2.data(), m, k, n);
    CHECK(d1 == d2);

    auto s1 = testutil::normals(m * n, 5), s2 = s1;
    kernels::serial::softmax_rows(s1.data(), m, n);
    kernels::omp::softmax_rows(s2.data(), m, n);
    CHECK(s1 == s2);

    kernels::ConvShape cs{2, 3, 9, 3, 1};
    const auto in = testutil::normals(2 * 81, 6), w = testutil::normals(3 * 2 * 9, 7), bias = testutil::normals(3, 8);
    std::vector<double> o1(3 * 81), o2(3 * 81);
    kernels::serial::conv2d_forward(cs, in.data(), w.data(), bias.data(), o1.data());
    kernels::omp::conv2d_forward(cs, in.data(), w.data(), bias.data(), o2.data());
    CHECK(o1 == o2);
    std::vector<double> dw1(w.size()), dw2(w.size()), db1(3), db2(3), di1(in.size()), di2(in.size());
    kernels::serial::conv2d_backward(cs, in.data(), w.data(), o1.data(), dw1.data(), db1.data(), di1.data());
    kernels::omp::conv2d_backward(cs, in.data(), w.data(), o1.data(), dw2.data(), db2.data(), di2.data());
    CHECK(dw1 == dw2);
    CHECK(db1 == db2);
    CHECK(di1 == di2);

    auto r1 = testutil::normals(13 * 7, 9), r2 = r1;
    std::vector<double> sum1(7), sum2(7);
    kernels::serial::reduce_rows(r1.data(), 13, 7, sum1.data());
    kernels::omp::reduce_rows(r2.data(), 13, 7, sum2.data());
    CHECK(sum1 == sum2);
    kernels::set_num_jobs(1);
  }

  TEST_CASE("linear layer input gradient is the transposed weight times upstream") {
    // y = x W with x: 1 x 3, W: 3 x 2; dL/dx = upstream W^T.
    const std::vector<double> w = {1, 2, -1, 0.5, 3, -2};
    const std::vector<double> up = {0.7, -1.3};
    std::vector<double> dx(3);
    kernels::serial::matmul_nt(up.data(), w.data(), dx.data(), 1, 2, 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(dx[i] == doctest::Approx(w[i * 2] * up[0] + w[i * 2 + 1] * up[1]));
  }
}

TEST_SUITE("forward") {
  TEST_CASE("zero classifier head gives uniform probabilities") {
    for (auto kind : {ModelKind::TinyCNN, ModelKind::TinyViT}) {
      auto model = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 1) : make_vit({}, 3, 1);
      for (auto& v : model->block_values("head.weight")) v = 0.0;
      for (auto& v : model->block_values("head.bias")) v = 0.0;
      const auto fwd = forward(*model, random_batch(4, 32, 2));
      for (std::size_t i = 0; i < fwd.probabilities.size(); ++i) CHECK(fwd.probabilities[i] == doctest::Approx(1.0 / 3));
    }
  }

  TEST_CASE("probability rows sum to one and forward is deterministic") {
    for (auto kind : {ModelKind::TinyCNN, ModelKind::TinyViT}) {
      auto model = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 5) : make_vit({}, 3, 5);
      const auto batch = random_batch(6, 32, 3);
      const auto a = forward(*model, batch);
      const auto b = forward(*model, batch);
      CHECK(a.logits == b.logits);
      auto same_seed = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 5) : make_vit({}, 3, 5);
      CHECK(forward(*same_seed, batch).logits == a.logits);
      for (std::size_t i = 0; i < 6; ++i) {
        const auto row = a.probabilities.row(i);
        CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-14));
      }
    }
  }

  TEST_CASE("serial and parallel batch paths agree bit for bit") {
    kernels::set_num_jobs(3);
    for (auto kind : {ModelKind::TinyCNN, ModelKind::TinyViT}) {
      auto model = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 6) : make_vit({}, 3, 6);
      const auto batch = random_batch(9, 32, 4);
      ForwardOptions serial, parallel;
      serial.policy = ExecPolicy::Serial;
      parallel.policy = ExecPolicy::Parallel;
      serial.dropout_rate = parallel.dropout_rate = 0.2;
      serial.dropout_seed = parallel.dropout_seed = 77;
      const auto fs = forward(*model, batch, serial);
      const auto fp = forward(*model, batch, parallel);
      CHECK(fs.logits == fp.logits);
      CHECK(fs.boxes == fp.boxes);
      const Tensor grad({9, model->output_size()}, testutil::normals(9 * model->output_size(), 5));
      const auto gs = backward(*model, batch, fs, grad, ExecPolicy::Serial);
      const auto gp = backward(*model, batch, fp, grad, ExecPolicy::Parallel);
      CHECK(gs.params == gp.params);
      CHECK(gs.input == gp.input);
    }
    kernels::set_num_jobs(1);
  }

  TEST_CASE("dropout acts only in training mode") {
    auto model = make_vit({}, 3, 8);
    const auto batch = random_batch(3, 32, 6);
    const auto eval1 = forward(*model, batch);
    const auto eval2 = forward(*model, batch);
    CHECK(eval1.logits == eval2.logits);
    ForwardOptions train_mode;
    train_mode.dropout_rate = 0.3;
    train_mode.dropout_seed = 1;
    CHECK(forward(*model, batch, train_mode).logits != eval1.logits);
  }

  TEST_CASE("batch shape errors name both shapes") {
    auto model = make_cnn({}, 3, 1);
    try {
      forward(*model, random_batch(2, 16, 1));
      FAIL("expected a shape error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("16") != std::string::npos);
      CHECK(std::string(e.what()).find("32") != std::string::npos);
    }
  }
}

TEST_SUITE("attention weights") {
  TEST_CASE("zero queries and keys give uniform rows") {
    const auto a = attention_weights(Tensor({5, 4}), Tensor({5, 4}), 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(0.2).epsilon(1e-15));
  }

  TEST_CASE("two patches, hand-computed softmax") {
    // Q K^T / sqrt(1) = [[0, ln 3], [0, 0]]
    const Tensor q({2, 1}, {1.0, 0.0});
    const Tensor k({2, 1}, {0.0, std::log(3.0)});
    const auto a = attention_weights(q, k, 1);
    CHECK(a.at(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(a.at(0, 1) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(a.at(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(attention_weights(q, k, 0), ValidationError);
  }

  TEST_CASE("property: rows sum to one and shifting a score row changes nothing") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + uniform_index(rng, 12), d = 1 + uniform_index(rng, 8);
      const Tensor q({n, d}, testutil::normals(n * d, rng(), 3.0));
      const Tensor k({n, d}, testutil::normals(n * d, rng(), 3.0));
      const auto a = attention_weights(q, k, d);
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += a.at(i, j);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
      // Extra coordinate: query i carries c_i, every key carries 1, so row i
      // of the scores shifts by c_i / sqrt(d + 1).
      Tensor q2({n, d + 1}), k2({n, d + 1});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          q2.at(i, j) = q.at(i, j) * std::sqrt((d + 1.0) / d);
          k2.at(i, j) = k.at(i, j);
        }
        q2.at(i, d) = 10.0 * standard_normal(rng);
        k2.at(i, d) = 1.0;
      }
      const auto shifted = attention_weights(q2, k2, d + 1);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(shifted[i] - a[i]) <= 1e-12);
    }
  }

  TEST_CASE("every extracted attention matrix is row-stochastic") {
    auto model = make_vit({}, 3, 12);
    const auto summary = extract_attention(*model, random_batch(5, 32, 7));
    auto fwd = forward(*model, random_batch(5, 32, 7));
    const auto& vit = dynamic_cast<const TinyViT&>(*model);
    for (const auto& cache : fwd.caches) {
      for (std::size_t l = 0; l < vit.spec().layers; ++l) {
        const auto att = vit.attention(cache, l);
        const std::size_t t = vit.num_tokens();
        REQUIRE(att.size() == vit.spec().heads * t * t);
        for (std::size_t r = 0; r < vit.spec().heads * t; ++r) {
          double sum = 0.0;
          for (std::size_t c = 0; c < t; ++c) sum += att[r * t + c];
          CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
      }
    }
    for (const auto& m : summary.layer_head_mean) {
      for (std::size_t r = 0; r < m.dim(0); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < m.dim(1); ++c) sum += m.at(r, c);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_SUITE("backward") {
  TEST_CASE("TinyCNN gradients match central differences") {
    auto model = make_cnn({}, 3, 21);
    REQUIRE(model->parameters().size() <= 5000);
    // Zero biases can leave pre-activations exactly on the ReLU kink, where
    // central differences see half the slope.
    Rng rng(20);
    for (const char* b : {"conv1.bias", "conv2.bias", "head.bias"}) {
      for (auto& v : model->block_values(b)) v = 0.05 * standard_normal(rng);
    }
    const std::vector<int> labels = {0, 2};
    const DetectionLoss loss{{0.5, 1.0, 1.5}, 1.0};
    const auto r = testutil::gradient_check(*model, random_batch(2, 32, 22), labels, random_boxes(2, 23), loss);
    CHECK(r.params == model->parameters().size());
    CHECK(r.kinks * 100 <= r.params + r.inputs);
    CHECK(r.max_rel_param <= 1e-4);
    CHECK(r.max_rel_input <= 1e-4);
  }

  TEST_CASE("TinyViT gradients match central differences") {
    auto model = make_vit(small_vit(), 3, 24);
    REQUIRE(model->parameters().size() <= 5000);
    const std::vector<int> labels = {1, 2};
    const DetectionLoss loss{{0.5, 1.0, 1.5}, 1.0};
    const auto r = testutil::gradient_check(*model, random_batch(2, 16, 25), labels, random_boxes(2, 26), loss);
    CHECK(r.kinks * 100 <= r.params + r.inputs);
    CHECK(r.max_rel_param <= 1e-4);
    CHECK(r.max_rel_input <= 1e-4);
  }

  TEST_CASE("zero upstream gradient gives zero gradients") {
    for (auto kind : {ModelKind::TinyCNN, ModelKind::TinyViT}) {
      auto model = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 1) : make_vit({}, 3, 1);
      const auto batch = random_batch(3, 32, 2);
      const auto fwd = forward(*model, batch);
      const auto g = backward(*model, batch, fwd, Tensor({3, model->output_size()}));
      CHECK(std::all_of(g.params.begin(), g.params.end(), [](double v) { return v == 0.0; }));
      CHECK(std::all_of(g.input.data().begin(), g.input.data().end(), [](double v) { return v == 0.0; }));
    }
  }

  TEST_CASE("full-batch loss ignores sample order") {
    auto model = make_cnn({}, 3, 3);
    const auto batch = random_batch(6, 32, 4);
    const auto boxes = random_boxes(6, 5);
    const std::vector<int> labels = {0, 1, 2, 2, 1, 0};
    const DetectionLoss loss{{0.3, 1.2, 1.5}, 1.0};
    const double base = loss.evaluate(forward(*model, batch), labels, boxes).loss;
    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor pb(batch.shape()), pbox({6, 4});
    std::vector<int> pl;
    for (std::size_t i = 0; i < 6; ++i) {
      std::copy(batch.row(perm[i]).begin(), batch.row(perm[i]).end(), pb.row(i).begin());
      std::copy(boxes.row(perm[i]).begin(), boxes.row(perm[i]).end(), pbox.row(i).begin());
      pl.push_back(labels[perm[i]]);
    }
    CHECK(loss.evaluate(forward(*model, pb), pl, pbox).loss == doctest::Approx(base).epsilon(1e-13));
  }
}

TEST_SUITE("training") {
  TEST_CASE("separable two-class toy set") {
    const auto data = halves_dataset(120, 8, 3);
    CHECK(logistic_accuracy(data) >= 0.95);  // the oracle says the task is linearly separable
    CnnSpec spec;
    spec.input_side = 8;
    auto model = make_cnn(spec, 2, 4);
    auto config = TrainConfig::cnn_defaults();
    config.epochs = 50;
    config.seed = 4;
    train(*model, data, config, DetectionLoss{{1.0, 1.0}, 1.0}, {"left", "right"});
    const auto pred = predict(*model, data);
    std::size_t right = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) right += pred[i] == data.labels[i];
    CHECK(static_cast<double>(right) / data.size() >= 0.95);
  }

  TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto data = halves_dataset(40, 8, 5);
    CnnSpec spec;
    spec.input_side = 8;
    auto model = make_cnn(spec, 2, 6);
    const std::vector<double> before(model->parameters().begin(), model->parameters().end());
    auto config = TrainConfig::cnn_defaults();
    config.learning_rate = 0.0;
    config.epochs = 3;
    train(*model, data, config, DetectionLoss{{1.0, 1.0}, 1.0}, {"left", "right"});
    CHECK(std::equal(before.begin(), before.end(), model->parameters().begin()));
  }

  TEST_CASE("same config and seed give identical parameters and trace") {
    const auto data = halves_dataset(60, 16, 7);
    auto run = [&] {
      auto model = make_vit(small_vit(), 2, 8);
      auto config = TrainConfig::vit_defaults();
      config.epochs = 3;
      config.seed = 9;
      const auto trace = train(*model, data, config, DetectionLoss{{1.0, 1.0}, 1.0}, {"left", "right"}, &data);
      return std::make_pair(std::vector<double>(model->parameters().begin(), model->parameters().end()),
                            trace.to_csv());
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
  }

  TEST_CASE("learning-rate schedules") {
    const auto cnn = TrainConfig::cnn_defaults();
    CHECK(cnn.learning_rate == 1e-3);
    CHECK(cnn.batch_size == 32);
    CHECK(cnn.weight_decay == 1e-4);
    CHECK(cnn.schedule.rate(1e-3, 9, 50) == doctest::Approx(1e-3));
    CHECK(cnn.schedule.rate(1e-3, 10, 50) == doctest::Approx(0.9e-3));
    CHECK(cnn.schedule.rate(1e-3, 25, 50) == doctest::Approx(0.81e-3));
    const auto vit = TrainConfig::vit_defaults();
    CHECK(vit.weight_decay == 3e-2);
    CHECK(vit.dropout == 0.1);
    CHECK(vit.epochs == 30);
    CHECK(vit.schedule.rate(1e-3, 0, 30) == doctest::Approx(1e-3));
    CHECK(vit.schedule.rate(1e-3, 29, 30) == doctest::Approx(1e-5));
  }

  TEST_CASE("train config JSON round trip and validation") {
    auto c = TrainConfig::vit_defaults();
    c.seed = 12;
    const auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = TrainConfig::cnn_defaults();
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
  }

  TEST_CASE("stratified split keeps every class in every split") {
    const auto m = testutil::counts_manifest({{"a", 100}, {"b", 20}, {"c", 7}});
    const auto s = stratified_split(m, 3);
    CHECK(s.train.size() + s.validation.size() + s.test.size() == m.records.size());
    std::vector<int> seen(m.records.size(), 0);
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      std::set<std::string> labels;
      for (auto i : *part) {
        ++seen[i];
        labels.insert(m.records[i].class_label);
      }
      CHECK(labels.size() == 3);
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
    CHECK(stratified_split(m, 3).test == s.test);
    CHECK_THROWS_AS(stratified_split(testutil::counts_manifest({{"a", 100}, {"b", 2}}), 1), ValidationError);
  }
}

TEST_SUITE("snapshots") {
  TEST_CASE("save and load reproduce the model exactly") {
    testutil::TempDir dir;
    for (auto kind : {ModelKind::TinyCNN, ModelKind::TinyViT}) {
      auto model = kind == ModelKind::TinyCNN ? make_cnn({}, 3, 31) : make_vit({}, 3, 31);
      const auto snap = ModelSnapshot::capture(*model, 31, TrainConfig::cnn_defaults().to_json());
      save_snapshot(dir / "m.snapshot", snap);
      const auto back = load_snapshot(dir / "m.snapshot");
      CHECK(back.parameters == snap.parameters);
      CHECK(back.architecture == snap.architecture);
      CHECK(back.seed == 31);
      const auto restored = back.restore();
      const auto batch = random_batch(2, 32, 32);
      CHECK(forward(*restored, batch).logits == forward(*model, batch).logits);
    }
  }

  TEST_CASE("truncated snapshots are rejected") {
    testutil::TempDir dir;
    auto model = make_cnn({}, 3, 1);
    save_snapshot(dir / "m.snapshot", ModelSnapshot::capture(*model, 1));
    const auto size = std::filesystem::file_size(dir / "m.snapshot");
    std::filesystem::resize_file(dir / "m.snapshot", size - 8);
    CHECK_THROWS_AS(load_snapshot(dir / "m.snapshot"), ValidationError);
  }
}
