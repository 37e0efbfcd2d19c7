#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/eval.hpp"
#include "intrafusion/pipelines.hpp"

using namespace intrafusion;
using testing::blobs;

namespace {

PipelineConfig tiny_config(PipelineMode mode, std::uint64_t seed) {
  PipelineConfig c;
  c.mode = mode;
  c.seed = seed;
  c.sparsity = 0.5;
  c.train_epochs = 2;
  c.steps = 2;
  c.step_epochs = 1;
  c.finetune_epochs = 1;
  c.batch_size = 32;
  c.fuse_samples = 50;
  return c;
}

ModelGraph tiny_arch() { return build_mlp({{6}, {12, 10}, 3, true}); }

std::vector<std::string> stage_names(const PipelineResult& r) {
  std::vector<std::string> out;
  for (const auto& s : r.stages) {
    if (out.empty() || out.back() != s.stage) out.push_back(s.stage);
  }
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig t;
  CHECK(learning_rate(t, 0) == 0.05);
  CHECK(learning_rate(t, 29) == 0.05);
  CHECK(learning_rate(t, 30) == 0.025);
  CHECK(learning_rate(t, 65) == doctest::Approx(0.0125));
  t.base_lr = kFinetuneBaseLr;
  CHECK(learning_rate(t, 0) == 0.01);
}

TEST_CASE("zero epochs leaves the model untouched") {
  const ModelGraph m = build_arch("mlp", {{6}, {8}, 3, true}, 3);
  const Dataset d = blobs(40, 6, 3, 1);
  TrainConfig t;
  CHECK(train(m, d, t).model.bitwise_equal(m));
  CHECK(train(m, d, t).trace.empty());
  CHECK(finetune(m, d, 0, 5).model.bitwise_equal(m));
  t.epochs = 1;
  Dataset empty;
  empty.classes = 3;
  CHECK_THROWS_AS(train(m, empty, t), InputError);
  t.base_lr = 0;
  CHECK_THROWS_AS(train(m, d, t), InputError);
}

TEST_CASE("training loss decreases on a separable problem") {
  const Dataset d = blobs(256, 2, 2, 11, 0.3);
  const ModelGraph m = build_arch("mlp", {{2}, {8}, 2}, 12);
  TrainConfig t;
  t.epochs = 5;
  t.batch_size = 32;
  t.seed = 4;
  const TrainResult r = train(m, d, t);
  REQUIRE(r.trace.size() == 5);
  for (std::size_t e = 1; e < r.trace.size(); ++e) CHECK(r.trace[e].loss < r.trace[e - 1].loss);
  CHECK(accuracy(r.model, d) > 0.9);
  const TrainResult again = train(m, d, t);
  CHECK(again.model.bitwise_equal(r.model));
  std::ostringstream csv;
  write_trace_csv(csv, r.trace);
  CHECK(csv.str().rfind("epoch,lr,loss,accuracy\n", 0) == 0);
}

TEST_CASE("fine-tuning a pruned model does not lower train accuracy") {
  std::vector<double> before, after;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Dataset d = blobs(400, 8, 4, 100 + seed, 1.2);
    TrainConfig t;
    t.epochs = 5;
    t.batch_size = 32;
    t.seed = seed;
    const ModelGraph trained = train(build_arch("mlp", {{8}, {16}, 4, true}, seed), d, t).model;
    PruneOptions opt;
    opt.method = PruneMethod::kConventional;
    const ModelGraph pruned = prune_all_groups(trained, 0.5, opt).model;
    before.push_back(accuracy(pruned, d));
    after.push_back(accuracy(finetune(pruned, d, 3, seed, 32).model, d));
  }
  std::sort(before.begin(), before.end());
  std::sort(after.begin(), after.end());
  CHECK(after[1] >= before[1]);
}

TEST_CASE("split plans") {
  const SplitPlan two = make_split_plan(100, 2, 1);
  CHECK(two.training_sets.size() == 2);
  CHECK(two.training_sets[0].size() == 50);
  CHECK(two.training_sets[0] == [&] { auto s = two.subsets[0]; std::sort(s.begin(), s.end()); return s; }());

  const SplitPlan four = make_split_plan(103, 4, 2);
  CHECK(four.training_sets.size() == 6);
  const std::vector<std::vector<int>> lex{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  CHECK(four.combinations == lex);
  std::set<std::size_t> all;
  std::size_t total = 0;
  for (const auto& s : four.subsets) {
    CHECK(s.size() >= 25);
    CHECK(s.size() <= 26);
    total += s.size();
    all.insert(s.begin(), s.end());
  }
  CHECK(total == 103);
  CHECK(all.size() == 103);
  CHECK(*all.rbegin() == 102);
  for (const auto& t : four.training_sets) {
    CHECK(t.size() >= 51);
    CHECK(t.size() <= 52);
  }
  CHECK(make_split_plan(10, 6, 1).training_sets.size() == 20);
  CHECK(make_split_plan(103, 4, 2).subsets == four.subsets);
  CHECK(make_split_plan(103, 4, 3).subsets != four.subsets);
  CHECK_THROWS_AS(make_split_plan(100, 3, 1), InputError);
  CHECK_THROWS_AS(make_split_plan(100, 0, 1), InputError);
  CHECK_THROWS_AS(make_split_plan(3, 4, 1), InputError);
}

TEST_CASE("parallel_for") {
  std::vector<int> out(50, 0);
  parallel_for(50, 4, [&](int i) { out[static_cast<std::size_t>(i)] = i * i; });
  for (int i = 0; i < 50; ++i) CHECK(out[static_cast<std::size_t>(i)] == i * i);
  std::atomic<int> ran{0};
  CHECK_THROWS_AS(parallel_for(10, 3, [&](int i) {
    ran++;
    if (i == 4) throw InputError("boom");
  }), InputError);
  parallel_for(0, 4, [&](int) { FAIL("no tasks expected"); });
}

TEST_CASE("pipelines report their stages") {
  const Dataset train_d = blobs(240, 6, 3, 21, 0.8);
  const Dataset test_d = blobs(90, 6, 3, 21, 0.8);
  const PipelineResult paf = run_pipeline(tiny_arch(), train_d, test_d, tiny_config(PipelineMode::kPaf, 1));
  CHECK(stage_names(paf) == std::vector<std::string>{"train", "prune", "fuse", "finetune"});
  const PipelineResult fap = run_pipeline(tiny_arch(), train_d, test_d, tiny_config(PipelineMode::kFap, 1));
  CHECK(stage_names(fap) == std::vector<std::string>{"train", "fuse", "finetune", "prune", "finetune"});
  const PipelineResult whole = run_pipeline(tiny_arch(), train_d, test_d, tiny_config(PipelineMode::kWhole, 1));
  CHECK(stage_names(whole) == std::vector<std::string>{"train", "prune", "finetune"});

  CHECK(paf.model.infer_shapes() == fap.model.infer_shapes());
  CHECK(paf.model.infer_shapes() == whole.model.infer_shapes());
  for (const auto* r : {&paf, &fap, &whole}) {
    for (std::size_t i = 0; i < r->stages.size(); ++i) {
      CHECK(r->stages[i].seq == static_cast<int>(i));
      CHECK(r->stages[i].accuracy >= 0.0);
      CHECK(r->stages[i].accuracy <= 1.0);
      if (i > 0) CHECK(r->stages[i].elapsed >= r->stages[i - 1].elapsed);
    }
  }
  std::ostringstream plain, timed;
  write_stages_csv(plain, paf.stages, false);
  write_stages_csv(timed, paf.stages, true);
  CHECK(plain.str().rfind("seq,stage,model,accuracy,params\n", 0) == 0);
  CHECK(timed.str().rfind("seq,stage,model,accuracy,params,seconds,elapsed\n", 0) == 0);
}

TEST_CASE("pipelines are reproducible and thread-count independent") {
  const Dataset train_d = blobs(160, 6, 3, 31, 0.8);
  const Dataset test_d = blobs(60, 6, 3, 32, 0.8);
  PipelineConfig c = tiny_config(PipelineMode::kPaf, 9);
  c.k = 4;
  const PipelineResult a = run_pipeline(tiny_arch(), train_d, test_d, c);
  c.threads = 3;
  const PipelineResult b = run_pipeline(tiny_arch(), train_d, test_d, c);
  CHECK(a.model.bitwise_equal(b.model));
  std::ostringstream sa, sb;
  write_stages_csv(sa, a.stages, false);
  write_stages_csv(sb, b.stages, false);
  CHECK(sa.str() == sb.str());
  CHECK(std::count_if(a.stages.begin(), a.stages.end(), [](const StageRecord& s) { return s.stage == "train"; }) == 6);
}

TEST_CASE("paf at zero sparsity is fuse then fine-tune") {
  const Dataset train_d = blobs(120, 6, 3, 41, 0.8);
  const Dataset test_d = blobs(30, 6, 3, 42, 0.8);
  PipelineConfig c = tiny_config(PipelineMode::kPaf, 5);
  c.sparsity = 0.0;
  const PipelineResult r = run_pipeline(tiny_arch(), train_d, test_d, c);
  c.mode = PipelineMode::kFap;
  c.finetune_epochs = 1;
  // FaP at zero sparsity fine-tunes twice; its first fine-tune equals PaF's only one.
  const PipelineResult f = run_pipeline(tiny_arch(), train_d, test_d, c);
  const auto find = [](const PipelineResult& p, const std::string& stage) {
    for (const auto& s : p.stages) {
      if (s.stage == stage) return s;
    }
    return StageRecord{};
  };
  CHECK(find(r, "fuse").accuracy == find(f, "fuse").accuracy);
  CHECK(find(r, "finetune").accuracy == find(f, "finetune").accuracy);
  CHECK(find(r, "prune").params == find(r, "train").params);
  CHECK(count_params(r.model).total == count_params(tiny_arch()).total);
}
