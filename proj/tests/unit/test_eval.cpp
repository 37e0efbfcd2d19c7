#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/eval.hpp"

using namespace intrafusion;
using testing::all_builders;
using testing::blobs;
using testing::max_abs;
using testing::random_batch;

namespace {

Dataset as_dataset(const Tensor& x, int classes, std::uint64_t seed) {
  Dataset d;
  d.features = x;
  d.classes = classes;
  Rng rng(seed);
  for (int i = 0; i < x.dim(0); ++i) d.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  return d;
}

// in(2) -> h(2) -> relu -> out(3) with mirror-symmetric hidden units.
// Dyadic values keep parameter differences exact.
ModelGraph symmetric_net() {
  ModelGraph m;
  m.input_id = "in";
  m.nodes.push_back(make_input("in", {2}));
  m.nodes.push_back(make_linear("h", "in", 2, 2));
  m.nodes.push_back(make_relu("r", "h"));
  m.nodes.push_back(make_linear("o", "r", 2, 3));
  m.output_id = "o";
  m.node("h").param("weight") = Tensor({2, 2}, {0.75f, -0.25f, 0.75f, -0.25f});
  m.node("h").param("bias") = Tensor({2}, {0.125f, 0.125f});
  m.node("o").param("weight") = Tensor({3, 2}, {1.0f, 1.0f, -0.5f, -0.5f, 0.25f, 0.25f});
  m.node("o").param("bias") = Tensor({3}, {0.0f, 0.375f, -0.125f});
  return m;
}

}  // namespace

TEST_CASE("accuracy") {
  ModelGraph zero = build_mlp({{4}, {5}, 10});
  Dataset d;
  d.features = random_batch({4}, 50, 1);
  d.classes = 10;
  for (int i = 0; i < 50; ++i) d.labels.push_back(i % 10);
  CHECK(accuracy(zero, d) == 0.1);

  ModelGraph lookup;
  lookup.input_id = "in";
  lookup.nodes.push_back(make_input("in", {4}));
  lookup.nodes.push_back(make_linear("id", "in", 4, 4));
  lookup.output_id = "id";
  lookup.node("id").param("weight") = Tensor({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Dataset onehot;
  onehot.features = Tensor({8, 4});
  onehot.classes = 4;
  for (int i = 0; i < 8; ++i) {
    onehot.features[static_cast<std::size_t>(i * 4 + i % 4)] = 1.0f;
    onehot.labels.push_back(i % 4);
  }
  CHECK(accuracy(lookup, onehot) == 1.0);

  const ModelGraph r = build_arch("mlp", {{5}, {7}, 3}, 4);
  const Dataset twenty = as_dataset(random_batch({5}, 20, 5), 3, 6);
  const Tensor logits = forward(r, twenty.features);
  int hits = 0;
  for (int i = 0; i < 20; ++i) {
    const float* row = logits.data().data() + i * 3;
    const int pred = row[0] >= row[1] ? (row[0] >= row[2] ? 0 : 2) : (row[1] >= row[2] ? 1 : 2);
    hits += pred == twenty.labels[static_cast<std::size_t>(i)];
  }
  CHECK(accuracy(r, twenty) == hits / 20.0);
  CHECK(accuracy(r, twenty, 3) == accuracy(r, twenty, 256));
  CHECK_THROWS_AS(accuracy(r, Dataset{}), InputError);
}

TEST_CASE("output divergence") {
  for (const auto& nm : all_builders(201)) {
    const Dataset d = as_dataset(random_batch(nm.model.input_shape(), 30, 202), 5, 203);
    CHECK(output_divergence(nm.model, nm.model, d) == 0.0);
    ModelGraph shifted = nm.model;
    LayerNode& out = shifted.node(shifted.output_id);
    const float c[5] = {0.5f, -1.0f, 0.25f, 2.0f, 0.0f};
    for (int k = 0; k < 5; ++k) out.param("bias")[static_cast<std::size_t>(k)] += c[k];
    const double norm = std::sqrt(0.25 + 1.0 + 0.0625 + 4.0);
    CHECK(output_divergence(nm.model, shifted, d) == doctest::Approx(norm).epsilon(1e-6));
    CHECK(std::fabs(output_divergence(nm.model, shifted, d, 7) - output_divergence(nm.model, shifted, d, 256)) <= 1e-6);
  }
  const ModelGraph a = build_arch("mlp", {{5}, {7}, 3}, 4);
  const ModelGraph b = build_arch("mlp", {{5}, {7}, 4}, 4);
  CHECK_THROWS_AS(output_divergence(a, b, as_dataset(random_batch({5}, 4, 1), 3, 1)), InputError);
}

TEST_CASE("divergence shrinks as more pairings are kept") {
  const std::vector<int> ms{2, 4, 6, 8, 10, 12};
  for (auto method : {PruneMethod::kConventional, PruneMethod::kIntraFusion}) {
    std::vector<double> mean(ms.size(), 0.0);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const ModelGraph m = build_arch("mlp", {{6}, {12}, 4}, seed);
      const Dataset d = as_dataset(random_batch({6}, 64, seed + 50), 4, seed);
      PruneOptions opt;
      opt.method = method;
      for (std::size_t k = 0; k < ms.size(); ++k) {
        mean[k] += output_divergence(m, prune_group(m, 0, ms[k], opt).model, d) / 10.0;
      }
    }
    CAPTURE(method_name(method));
    for (std::size_t k = 1; k < ms.size(); ++k) CHECK(mean[k] <= mean[k - 1]);
    CHECK(mean.back() <= 1e-5);
  }
}

TEST_CASE("vectorize round trip") {
  for (const auto& nm : all_builders(211)) {
    const auto v = vectorize(nm.model);
    CHECK(v.size() == static_cast<std::size_t>(count_params(nm.model).total));
    CHECK(devectorize(nm.model, v).bitwise_equal(nm.model));
    std::vector<float> shorter(v.begin(), v.end() - 1);
    CHECK_THROWS_AS(devectorize(nm.model, shorter), InputError);
  }
}

TEST_CASE("embedding pruned models") {
  for (const auto& nm : all_builders(221)) {
    CAPTURE(nm.name);
    CHECK(vectorize(embed_pruned(nm.model, nm.model, {})) == vectorize(nm.model));
    const Tensor x = random_batch(nm.model.input_shape(), 20, 222);
    for (auto method : {PruneMethod::kConventional, PruneMethod::kIntraFusion}) {
      PruneOptions opt;
      opt.method = method;
      const PruneResult r = prune_all_groups(nm.model, 0.5, opt);
      const IndexMap map = index_map_from(r.report);
      const ModelGraph embedded = embed_pruned(r.model, nm.model, map);
      CHECK(count_params(embedded).total == count_params(nm.model).total);
      CHECK(max_abs(forward(embedded, x), forward(r.model, x)) <= 1e-5);
      CHECK(extract_pruned(embedded, r.model, map).bitwise_equal(r.model));
    }
    PruneOptions opt;
    const PruneResult r = prune_all_groups(nm.model, 0.5, opt);
    CHECK_THROWS_AS(embed_pruned(r.model, nm.model, {}), InputError);
  }
  PruneOptions km;
  km.fusion.target = TargetMode::kKMeans;
  const PruneResult r = prune_all_groups(all_builders(1)[0].model, 0.5, km);
  CHECK_THROWS_AS(index_map_from(r.report), InputError);
}

TEST_CASE("landscape anchors equal direct evaluation") {
  const ModelGraph origin = build_arch("resnet-toy", testing::resnet_dims(), 231);
  const ModelGraph folded = fold_batchnorm(origin);
  const Dataset d = as_dataset(random_batch(origin.input_shape(), 40, 232), 5, 233);
  PruneOptions conv;
  conv.method = PruneMethod::kConventional;
  const PruneResult pc = prune_all_groups(origin, 0.5, conv);
  const PruneResult pf = prune_all_groups(origin, 0.5, PruneOptions{});
  const auto t0 = vectorize(folded);
  const auto ta = vectorize(embed_pruned(fold_batchnorm(pc.model), folded, index_map_from(pc.report)));
  const auto tb = vectorize(embed_pruned(pf.model, folded, index_map_from(pf.report)));
  LandscapeOptions opt;
  opt.resolution = 7;
  const LandscapeGrid g = landscape_grid(folded, t0, ta, tb, d, opt);
  REQUIRE(g.cells.size() == 3 + 49);
  CHECK(g.cells[0].kind == "origin");
  CHECK(g.cells[0].accuracy == accuracy(devectorize(folded, t0), d));
  CHECK(g.cells[1].kind == "a");
  CHECK(g.cells[1].accuracy == accuracy(devectorize(folded, ta), d));
  CHECK(g.cells[2].kind == "b");
  CHECK(g.cells[2].accuracy == accuracy(devectorize(folded, tb), d));
  CHECK(g.cells[0].accuracy == accuracy(origin, d));
  // With resolution 7 the grid passes through (0,0) and (1,0).
  for (const auto& c : g.cells) {
    if (c.kind != "grid") continue;
    if (c.alpha == 0.0 && c.beta == 0.0) CHECK(c.accuracy == g.cells[0].accuracy);
    if (c.alpha == 1.0 && c.beta == 0.0) CHECK(c.accuracy == g.cells[1].accuracy);
  }
  opt.threads = 3;
  const LandscapeGrid g3 = landscape_grid(folded, t0, ta, tb, d, opt);
  for (std::size_t i = 0; i < g.cells.size(); ++i) CHECK(g3.cells[i].accuracy == g.cells[i].accuracy);
  CHECK_THROWS_AS(landscape_grid(folded, t0, t0, tb, d, opt), InputError);
  std::vector<float> collinear(t0.size());
  for (std::size_t i = 0; i < t0.size(); ++i) collinear[i] = t0[i] + 2.0f * (ta[i] - t0[i]);
  CHECK_THROWS_AS(landscape_grid(folded, t0, ta, collinear, d, opt), InputError);
  std::ostringstream csv;
  write_landscape_csv(csv, g);
  CHECK(csv.str().rfind("kind,alpha,beta,accuracy\n", 0) == 0);
}

TEST_CASE("landscape of a mirror-symmetric plane is symmetric") {
  const ModelGraph m = symmetric_net();
  const auto t0 = vectorize(m);
  // Parameter order: h.weight (4), h.bias (2), o.weight (6), o.bias (3).
  std::vector<float> ta = t0, tb = t0;
  const float sym[15] = {0.375f, 0.25f, 0.375f, 0.25f, -0.25f, -0.25f, 0.5f, 0.5f, 0.125f, 0.125f, -0.375f, -0.375f, 0.5f, -0.25f, 0.125f};
  const float anti[15] = {0.625f, -0.375f, -0.625f, 0.375f, 0.25f, -0.25f, 0.5f, -0.5f, -0.25f, 0.25f, 0.75f, -0.75f, 0, 0, 0};
  for (std::size_t i = 0; i < 15; ++i) {
    ta[i] += 4.0f * sym[i];
    tb[i] += 4.0f * anti[i];
  }
  const Dataset d = blobs(300, 2, 3, 7, 1.0);
  LandscapeOptions opt;
  opt.resolution = 7;
  const LandscapeGrid g = landscape_grid(m, t0, ta, tb, d, opt);
  CHECK(std::fabs(g.b_alpha) < 1e-12);
  int pairs = 0;
  for (const auto& c : g.cells) {
    if (c.kind != "grid" || c.beta <= 0.0) continue;
    for (const auto& other : g.cells) {
      if (other.kind == "grid" && other.alpha == c.alpha && other.beta == -c.beta) {
        CHECK(other.accuracy == c.accuracy);
        ++pairs;
      }
    }
  }
  CHECK(pairs == 7);
}

TEST_CASE("ablation grid") {
  const ModelGraph m = build_arch("vgg-toy", testing::vgg_dims(), 241);
  const Dataset d = as_dataset(random_batch(m.input_shape(), 30, 242), 5, 243);
  const std::vector<int> groups{0};
  const std::vector<double> sparsities{0.5};
  ImportanceConfig imp;
  const auto rows = ablation_grid(m, d, groups, sparsities, imp, IntraFusionOptions{});
  REQUIRE(rows.size() == 4);
  std::vector<std::string> labels;
  for (const auto& r : rows) labels.push_back(r.label);
  CHECK(labels == std::vector<std::string>{"uTuS", "uTiS", "iTuS", "iTiS"});
  CHECK(rows[1].source_dist == "importance");
  CHECK(rows[1].target_dist == "uniform");
  PruneOptions direct;
  const double acc = accuracy(prune_group(m, 0, rows[0].m, direct).model, d);
  CHECK(rows[0].accuracy == acc);
  std::ostringstream csv;
  write_ablation_csv(csv, rows);
  CHECK(csv.str().rfind("group,sparsity,n,m,source_dist,target_dist,label,accuracy\n", 0) == 0);
  const std::vector<double> two{0.25, 0.5};
  const std::vector<int> both{0, 1};
  CHECK(ablation_grid(m, d, both, two, imp, IntraFusionOptions{}).size() == 16);
  const std::vector<int> fixed{static_cast<int>(build_groups(m).size()) - 1};
  CHECK_THROWS_AS(ablation_grid(m, d, fixed, sparsities, imp, IntraFusionOptions{}), InputError);
}
