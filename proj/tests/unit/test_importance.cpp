#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "intrafusion/depgraph.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/importance.hpp"
#include "intrafusion/prune.hpp"

using namespace intrafusion;

namespace {

// in(2) -> p(2->h) -> relu -> c(h->k)
ModelGraph two_layer(int h, int k = 1, bool bias = true) {
  ModelGraph m;
  m.input_id = "in";
  m.nodes.push_back(make_input("in", {2}));
  m.nodes.push_back(make_linear("p", "in", 2, h, bias));
  m.nodes.push_back(make_relu("r", "p"));
  m.nodes.push_back(make_linear("c", "r", h, k));
  m.output_id = "c";
  return m;
}

const Group& hidden(const std::vector<Group>& groups) { return *prunable_groups(groups).at(0); }

std::vector<int> argsort(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[static_cast<std::size_t>(a)] < v[static_cast<std::size_t>(b)]; });
  return idx;
}

// Permutes hidden units of a two_layer model.
ModelGraph permute_hidden(const ModelGraph& m, const std::vector<int>& perm) {
  const auto groups = build_groups(m);
  return select_pairings(m, hidden(groups), perm);
}

}  // namespace

TEST_CASE("lp norm importance") {
  ModelGraph m = two_layer(2, 1, false);
  m.node("p").param("weight") = Tensor({2, 2}, {1, 0, 0, 0});
  m.node("c").param("weight") = Tensor({1, 2}, {-2, 0});
  const auto groups = build_groups(m);
  const auto s = lp_norm_importance(m, hidden(groups), 1.0);
  CHECK(s[0] == 3.0);
  CHECK(s[1] == 0.0);
  CHECK_THROWS_AS(lp_norm_importance(m, hidden(groups), 0.5), InputError);

  ModelGraph r = build_arch("mlp", {{6}, {8}, 3}, 9);
  const auto rg = build_groups(r);
  const auto s2 = lp_norm_importance(r, hidden(rg), 2.0);
  const auto pv = pairing_vectors(r, hidden(rg));
  for (std::size_t j = 0; j < pv.size(); ++j) {
    double acc = 0;
    for (float x : pv[j]) acc += double(x) * double(x);
    CHECK(s2[j] == doctest::Approx(std::sqrt(acc)).epsilon(1e-12));
  }
}

TEST_CASE("lp scaling and selection invariance") {
  ModelGraph r = build_arch("mlp", {{6}, {8}, 3}, 19);
  const auto g = build_groups(r);
  const auto base = lp_norm_importance(r, hidden(g), 1.0);
  ModelGraph scaled = r;
  for (const auto& s : hidden(g).slices) {
    for (auto& t : scaled.node(s.layer).params) {
      if (s.role == SliceRole::kConsumer && t.name == "bias") continue;
      for (float& v : t.value.values()) v *= 4.0f;
    }
  }
  const auto sc = lp_norm_importance(scaled, hidden(g), 1.0);
  for (std::size_t j = 0; j < base.size(); ++j) CHECK(sc[j] == doctest::Approx(4.0 * base[j]).epsilon(1e-9));
  CHECK(select_top_m(sc, 3) == select_top_m(base, 3));
}

TEST_CASE("lamp importance") {
  ModelGraph m = two_layer(2, 1);
  m.node("p").param("weight") = Tensor({2, 2}, {1, 1, 1, 0});
  m.node("p").param("bias") = Tensor({2}, {1, 0});
  m.node("c").param("weight") = Tensor({1, 2}, {0, 0});
  const auto groups = build_groups(m);
  const auto s = lamp_importance(m, hidden(groups));
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == doctest::Approx(0.25));

  m.node("p").param("weight") = Tensor({2, 2}, {1, 0, 0, 1});
  m.node("p").param("bias") = Tensor({2}, {0, 0});
  const auto eq = lamp_importance(m, hidden(groups));
  CHECK(eq[0] == 0.5);
  CHECK(eq[1] == 0.5);

  m.node("p").param("weight").fill(0);
  const auto z = lamp_importance(m, hidden(groups));
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelGraph r = build_arch("mlp", {{5}, {9}, 3}, seed);
    const auto g = build_groups(r);
    const auto lamp = lamp_importance(r, hidden(g));
    const auto l2 = lp_norm_importance(r, hidden(g), 2.0);
    CHECK(argsort(lamp) == argsort(l2));
  }
}

TEST_CASE("taylor importance") {
  const std::vector<float> w{1, 2}, g{0.5f, -1};
  CHECK(taylor_score(w, g, TaylorAggregation::kSumAbs) == 2.5);
  CHECK(taylor_score(w, g, TaylorAggregation::kAbsSum) == 1.5);

  ModelGraph r = build_arch("resnet-toy", testing::resnet_dims(), 21);
  randomize_batchnorm(r, 22);
  const Tensor x = testing::random_batch(r.input_shape(), 6, 23);
  const std::vector<int> y{0, 1, 2, 3, 4, 0};
  const std::vector<CalibrationBatch> calib{{x, y}, {testing::random_batch(r.input_shape(), 4, 24), {1, 1, 2, 3}}};
  const auto groups = build_groups(r);
  for (const Group* g_ : prunable_groups(groups)) {
    const auto scores = taylor_importance(r, *g_, calib);
    // Oracle: explicit per-weight products from separately computed gradients.
    std::vector<double> oracle(static_cast<std::size_t>(g_->cardinality), 0.0);
    for (const auto& b : calib) {
      const GradientSet grads = backward(r, b.inputs, b.labels);
      for (int j = 0; j < g_->cardinality; ++j) {
        for (const auto& s : g_->slices) {
          const LayerNode& node = r.node(s.layer);
          for (const auto& name : slice_params(r, s)) {
            if (!is_trainable(node.kind, name)) continue;
            const Tensor& w = node.param(name);
            const Tensor& gr = grads.at({s.layer, name});
            for (std::size_t off : channel_offsets(w, slice_axis(s), s.block, j)) {
              oracle[static_cast<std::size_t>(j)] += std::fabs(double(w[off]) * double(gr[off]));
            }
          }
        }
      }
    }
    for (std::size_t j = 0; j < oracle.size(); ++j) CHECK(scores[j] == doctest::Approx(oracle[j]).epsilon(1e-9));
  }
  CHECK_THROWS_AS(taylor_importance(r, hidden(groups), {}), InputError);
}

TEST_CASE("taylor zero gradients and dead pairings") {
  ModelGraph m = two_layer(3, 2);
  init_params(m, 4);
  m.node("p").param("bias").fill(-100.0f);  // every hidden unit dead
  m.node("c").param("weight").fill(0.0f);
  const std::vector<CalibrationBatch> calib{{testing::random_batch({2}, 5, 1), {0, 1, 0, 1, 1}}};
  const auto groups = build_groups(m);
  for (double s : taylor_importance(m, hidden(groups), calib)) CHECK(s == 0.0);

  ModelGraph live = two_layer(3, 2);
  init_params(live, 5);
  ModelGraph wider = two_layer(4, 2);
  auto pad = [](const Tensor& t, int axis) {
    Shape s = t.shape();
    s[static_cast<std::size_t>(axis)] += 1;
    Tensor out(s);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const std::size_t row = axis == 0 ? i / std::size_t(t.shape().size() > 1 ? t.shape()[1] : 1) : i / std::size_t(t.shape()[1]);
      const std::size_t col = t.shape().size() > 1 ? i % std::size_t(t.shape()[1]) : 0;
      const std::size_t cols = t.shape().size() > 1 ? std::size_t(s[1]) : 1;
      out[row * cols + col] = t[i];
    }
    return out;
  };
  wider.node("p").param("weight") = pad(live.node("p").param("weight"), 0);
  wider.node("p").param("bias") = pad(live.node("p").param("bias"), 0);
  wider.node("c").param("weight") = pad(live.node("c").param("weight"), 1);
  wider.node("c").param("bias") = live.node("c").param("bias");
  const std::vector<CalibrationBatch> c2{{testing::random_batch({2}, 7, 2), {0, 1, 1, 0, 1, 0, 0}}};
  const auto a = taylor_importance(live, hidden(build_groups(live)), c2);
  const auto b = taylor_importance(wider, hidden(build_groups(wider)), c2);
  REQUIRE(b.size() == 4);
  for (std::size_t j = 0; j < 3; ++j) CHECK(b[j] == doctest::Approx(a[j]).epsilon(1e-6));
  CHECK(b[3] == 0.0);
}

TEST_CASE("random importance") {
  Group g;
  g.cardinality = 16;
  CHECK(random_importance(g, 5) == random_importance(g, 5));
  const auto ref = random_importance(g, 0);
  for (std::uint64_t s = 1; s <= 100; ++s) CHECK(random_importance(g, s) != ref);
  g.cardinality = 10000;
  const auto big = random_importance(g, 77);
  double mean = 0;
  for (double v : big) {
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    mean += v;
  }
  mean /= 10000.0;
  CHECK(mean >= 0.49);
  CHECK(mean <= 0.51);
}

TEST_CASE("importance is equivariant under pairing permutation") {
  ModelGraph m = build_arch("mlp", {{4}, {6}, 3}, 31);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  const ModelGraph pm = permute_hidden(m, perm);
  const std::vector<CalibrationBatch> calib{{testing::random_batch({4}, 8, 9), {0, 1, 2, 0, 1, 2, 0, 1}}};
  for (auto metric : {ImportanceMetric::kL1, ImportanceMetric::kL2, ImportanceMetric::kLamp, ImportanceMetric::kTaylor}) {
    CAPTURE(metric_name(metric));
    ImportanceConfig cfg;
    cfg.metric = metric;
    cfg.calibration = calib;
    const auto a = compute_importance(m, hidden(build_groups(m)), cfg).scores;
    const auto b = compute_importance(pm, hidden(build_groups(pm)), cfg).scores;
    for (std::size_t j = 0; j < perm.size(); ++j) {
      // Gradients are float sums whose order follows the pairing layout.
      const double tol = metric == ImportanceMetric::kTaylor ? 1e-5 : 1e-9;
      CHECK(b[j] == doctest::Approx(a[static_cast<std::size_t>(perm[j])]).epsilon(tol));
    }
  }
}

TEST_CASE("compute_importance dispatch") {
  ModelGraph r = build_arch("vgg-toy", testing::vgg_dims(), 3);
  randomize_batchnorm(r, 4);
  const auto groups = build_groups(r);
  const Group& g = hidden(groups);
  ImportanceConfig cfg;
  CHECK(compute_importance(r, g, cfg).scores == lp_norm_importance(fold_batchnorm(r), g, 1.0));
  cfg.metric = ImportanceMetric::kLamp;
  CHECK(compute_importance(r, g, cfg).scores == lamp_importance(fold_batchnorm(r), g));
  cfg.metric = ImportanceMetric::kRandom;
  cfg.seed = 8;
  const auto iv = compute_importance(r, g, cfg);
  CHECK(iv.scores == random_importance(g, derive_seed(8, static_cast<std::uint64_t>(g.id))));
  CHECK(iv.group == g.id);
  cfg.metric = ImportanceMetric::kTaylor;
  CHECK_THROWS_AS(compute_importance(r, g, cfg), InputError);
  CHECK(parse_metric("lamp") == ImportanceMetric::kLamp);
  CHECK_THROWS_AS(parse_metric("chip"), InputError);
}
