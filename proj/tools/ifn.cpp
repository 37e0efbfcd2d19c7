// ifn: command-line front end for the Intra-Fusion toolkit.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "intrafusion/depgraph.hpp"
#include "intrafusion/engine.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/eval.hpp"
#include "intrafusion/fusion.hpp"
#include "intrafusion/importance.hpp"
#include "intrafusion/model_io.hpp"
#include "intrafusion/ot.hpp"
#include "intrafusion/pipelines.hpp"
#include "intrafusion/prune.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace intrafusion;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = ".";
  std::string model_name;  // set when --out names an .ifm file
};

struct DataArgs {
  std::string path;
  std::string split = "test";
};

struct ArchArgs {
  std::string arch = "resnet-toy";
  std::vector<int> widths{8};
  std::vector<int> input;
  int classes = 0;
  bool batchnorm = false;
};

struct PruneArgs {
  std::string method = "intra-fusion";
  std::string importance = "l1";
  int calib_batches = 4;
  int calib_batch_size = 64;
  std::string target = "topm";
  std::string source_dist = "uniform";
  std::string target_dist = "uniform";
  bool softmax = false;
  std::string consumer_agg = "paper";
};

fs::path out_file(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return fs::path(g.out) / name;
}

std::ofstream open_out(const Globals& g, const std::string& name) {
  std::ofstream f(out_file(g, name), std::ios::binary);
  if (!f) throw InputError("cannot write " + out_file(g, name).string());
  return f;
}

std::pair<Dataset, Dataset> load_data(const std::string& path) {
  if (path.empty()) throw InputError("--data is required");
  return load_dataset(source_from_path(path));
}

Dataset load_split(const DataArgs& d) {
  auto [train, test] = load_data(d.path);
  if (d.split == "train") return train;
  if (d.split == "test") return test;
  throw InputError("--split must be train or test");
}

std::string dataset_id(const DataArgs& d) {
  fs::path p = fs::path(d.path).lexically_normal();
  if (!p.has_filename()) p = p.parent_path();
  return p.filename().string() + ":" + d.split;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

// Every option of the subcommand, given or defaulted, as strings.
json config_echo(const CLI::App& sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || name == "--help" || name == "-h") continue;
    const std::string key = opt->get_lnames().empty() ? name : opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& r = opt->results();
      cfg[key] = r.size() == 1 ? json(r.front()) : json(r);
    } else if (!opt->get_default_str().empty()) {
      cfg[key] = opt->get_default_str();
    } else if (opt->get_type_size() == 0) {
      cfg[key] = false;
    }
  }
  return cfg;
}

void write_manifest(const Globals& g, const CLI::App& sub, std::optional<std::uint64_t> data_hash,
                    const std::vector<std::string>& outputs) {
  json m;
  m["command"] = sub.get_name();
  m["seed"] = g.seed;
  m["threads"] = g.threads;
  m["dataset_hash"] = data_hash ? json(hex64(*data_hash)) : json(nullptr);
  m["config"] = config_echo(sub);
  m["outputs"] = outputs;
  auto f = open_out(g, "manifest.json");
  f << m.dump(2) << '\n';
}

DistMode parse_dist(const std::string& s, bool softmax) {
  if (s == "uniform") return DistMode::kUniform;
  if (s == "importance") return softmax ? DistMode::kSoftmax : DistMode::kSumNormalized;
  throw InputError("distribution must be uniform or importance, got '" + s + "'");
}

struct PruneSetup {
  PruneOptions options;
  std::vector<CalibrationBatch> calibration;
};

// Calibration batches live in the returned struct; options.importance points into them.
std::unique_ptr<PruneSetup> make_prune_setup(const PruneArgs& a, const Globals& g, const Dataset* calib_data) {
  auto s = std::make_unique<PruneSetup>();
  PruneOptions& o = s->options;
  o.method = parse_method(a.method);
  o.importance.metric = parse_metric(a.importance);
  o.importance.seed = g.seed;
  if (o.importance.metric == ImportanceMetric::kTaylor) {
    if (!calib_data) throw InputError("taylor importance needs --data for calibration batches");
    s->calibration = make_calibration(*calib_data, a.calib_batches, a.calib_batch_size);
    o.importance.calibration = s->calibration;
  }
  if (a.target == "topm") {
    o.fusion.target = TargetMode::kTopM;
  } else if (a.target == "kmeans") {
    o.fusion.target = TargetMode::kKMeans;
  } else {
    throw InputError("--target must be topm or kmeans");
  }
  o.fusion.source_dist = parse_dist(a.source_dist, a.softmax);
  o.fusion.target_dist = parse_dist(a.target_dist, a.softmax);
  if (a.consumer_agg == "paper") {
    o.fusion.consumer = ConsumerAggregation::kPaper;
  } else if (a.consumer_agg == "mass-sum") {
    o.fusion.consumer = ConsumerAggregation::kMassSum;
  } else {
    throw InputError("--consumer-agg must be paper or mass-sum");
  }
  o.fusion.kmeans_seed = g.seed;
  return s;
}

void add_prune_flags(CLI::App* sub, PruneArgs& a) {
  sub->add_option("--method", a.method, "conventional or intra-fusion")->capture_default_str();
  sub->add_option("--importance", a.importance, "l1, l2, taylor, lamp or random")->capture_default_str();
  sub->add_option("--calib-batches", a.calib_batches, "Taylor calibration batches")->capture_default_str();
  sub->add_option("--calib-batch-size", a.calib_batch_size)->capture_default_str();
  sub->add_option("--target", a.target, "topm or kmeans")->capture_default_str();
  sub->add_option("--source-dist", a.source_dist, "uniform or importance")->capture_default_str();
  sub->add_option("--target-dist", a.target_dist, "uniform or importance")->capture_default_str();
  sub->add_flag("--softmax", a.softmax, "importance distributions via softmax instead of sum-normalization");
  sub->add_option("--consumer-agg", a.consumer_agg, "paper or mass-sum")->capture_default_str();
}

void add_arch_flags(CLI::App* sub, ArchArgs& a) {
  sub->add_option("--arch", a.arch, "mlp, vgg-toy or resnet-toy")->capture_default_str();
  sub->add_option("--widths", a.widths, "hidden widths / conv channels")->delimiter(',')->capture_default_str();
  sub->add_option("--input", a.input, "per-sample input shape, e.g. 1,28,28 (default: from --data)")->delimiter(',');
  sub->add_option("--classes", a.classes, "output classes (default: from --data)");
  sub->add_flag("--batchnorm", a.batchnorm, "BatchNorm after each mlp hidden layer");
}

ModelGraph make_arch(const ArchArgs& a, const Dataset* data, std::uint64_t seed) {
  ArchDims dims;
  dims.widths = a.widths;
  dims.batchnorm = a.batchnorm;
  if (!a.input.empty()) {
    dims.input = a.input;
  } else if (data) {
    dims.input = data->sample_shape();
  } else {
    throw InputError("--input or --data is required to size the model");
  }
  dims.classes = a.classes > 0 ? a.classes : data ? data->classes : 10;
  return build_arch(a.arch, dims, seed);
}

// Saves the command's model output; returns the file name used.
std::string save(const Globals& g, const ModelGraph& m, const std::string& name) {
  const std::string file = g.model_name.empty() ? name : g.model_name;
  save_model(m, out_file(g, file));
  return file;
}

// Fraction of prunable pairings removed, summed over groups.
double neuron_sparsity(const ModelGraph& original, const ModelGraph& pruned) {
  std::int64_t n0 = 0, n1 = 0;
  const auto g0 = build_groups(original), g1 = build_groups(pruned);
  for (const Group* gr : prunable_groups(g0)) n0 += gr->cardinality;
  for (const Group* gr : prunable_groups(g1)) n1 += gr->cardinality;
  return n0 > 0 ? 1.0 - static_cast<double>(n1) / static_cast<double>(n0) : 0.0;
}

json index_map_json(const IndexMap& map) {
  json j = json::object();
  for (const auto& [group, positions] : map) j[std::to_string(group)] = positions;
  return j;
}

IndexMap read_index_map(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read index map " + path);
  const json j = json::parse(f);
  IndexMap map;
  for (const auto& [k, v] : j.items()) map[std::stoi(k)] = v.get<std::vector<int>>();
  return map;
}

void write_plan_csv(std::ostream& out, const IntraFusionResult& r) {
  out << std::setprecision(17) << "kind,row,col,value\n";
  for (int i = 0; i < r.plan.T.rows; ++i) {
    for (int j = 0; j < r.plan.T.cols; ++j) out << "T," << i << ',' << j << ',' << r.plan.T(i, j) << '\n';
  }
  for (int i = 0; i < r.coefficients.rows; ++i) {
    for (int j = 0; j < r.coefficients.cols; ++j) out << "M," << i << ',' << j << ',' << r.coefficients(i, j) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intra-Fusion pruning, model fusion and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory, or a path ending in .ifm for the model output")->capture_default_str();

  // build
  ArchArgs build_arch_args;
  std::string build_data;
  auto* build = app.add_subcommand("build", "initialise a model and save it as model.ifm");
  add_arch_flags(build, build_arch_args);
  build->add_option("--data", build_data, "dataset used to size input and classes");

  // train
  std::string train_model;
  DataArgs train_data{"", "train"};
  int train_epochs = 10, train_batch = 128;
  double train_lr = kTrainBaseLr, train_momentum = 0.9;
  auto* train_cmd = app.add_subcommand("train", "SGD training; writes model.ifm and trace.csv");
  train_cmd->add_option("--model", train_model, "input model")->required();
  train_cmd->add_option("--data", train_data.path, "dataset directory (IDX) or CSV file")->required();
  train_cmd->add_option("--epochs", train_epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train_batch)->capture_default_str();
  train_cmd->add_option("--lr", train_lr, "base learning rate")->capture_default_str();
  train_cmd->add_option("--momentum", train_momentum)->capture_default_str();

  // eval
  std::vector<std::string> eval_models;
  std::string eval_reference;
  DataArgs eval_data;
  auto* eval = app.add_subcommand("eval", "accuracy and size of models; writes eval.csv");
  eval->add_option("--model", eval_models, "models to evaluate")->required();
  eval->add_option("--reference", eval_reference, "original model for divergence and sparsity columns");
  eval->add_option("--data", eval_data.path)->required();
  eval->add_option("--split", eval_data.split, "train or test")->capture_default_str();

  // divergence
  std::string div_original;
  std::vector<std::string> div_pruned;
  DataArgs div_data;
  auto* div = app.add_subcommand("divergence", "mean l2 logit distance to an original model; writes divergence.csv");
  div->add_option("--original", div_original)->required();
  div->add_option("--pruned", div_pruned)->required();
  div->add_option("--data", div_data.path)->required();
  div->add_option("--split", div_data.split)->capture_default_str();

  // groups
  std::string groups_model;
  auto* groups_cmd = app.add_subcommand("groups", "dependency groups of a model; writes groups.csv");
  groups_cmd->add_option("--model", groups_model)->required();

  // prune
  std::string prune_model;
  DataArgs prune_data{"", "test"};
  double prune_sparsity = -1.0;
  int prune_group_id = -1, prune_target_m = 0;
  std::string prune_report, prune_dump_plan;
  PruneArgs prune_args;
  auto* prune = app.add_subcommand("prune", "prune one group or all groups; writes pruned.ifm and index_map.json");
  prune->add_option("--model", prune_model)->required();
  prune->add_option("--data", prune_data.path, "dataset for Taylor calibration (train split) and reporting");
  prune->add_option("--split", prune_data.split, "split evaluated in the report")->capture_default_str();
  auto* sp = prune->add_option("--sparsity", prune_sparsity, "neuron sparsity applied to every prunable group");
  auto* gp = prune->add_option("--group", prune_group_id, "single group id");
  auto* tm = prune->add_option("--target-m", prune_target_m, "pairings kept in --group");
  gp->needs(tm);
  tm->needs(gp);
  sp->excludes(gp);
  add_prune_flags(prune, prune_args);
  prune->add_option("--report", prune_report, "per-group report CSV; an eval CSV is written next to it");
  prune->add_option("--dump-plan", prune_dump_plan, "CSV with T and M (single intra-fusion group)");

  // fuse
  std::string fuse_anchor;
  std::vector<std::string> fuse_others;
  std::vector<double> fuse_weights;
  std::string fuse_cost = "weight";
  int fuse_samples = 200;
  std::string fuse_data;
  auto* fuse = app.add_subcommand("fuse", "align models to an anchor and average; writes fused.ifm");
  fuse->add_option("--anchor", fuse_anchor)->required();
  fuse->add_option("--others", fuse_others)->required();
  fuse->add_option("--weights", fuse_weights, "mixing weights, anchor first (default: equal)")->delimiter(',');
  fuse->add_option("--cost", fuse_cost, "weight or activation")->capture_default_str();
  fuse->add_option("--samples", fuse_samples, "activation samples")->capture_default_str();
  fuse->add_option("--data", fuse_data, "dataset whose train split supplies activation samples");

  // landscape
  std::string ls_origin, ls_a, ls_b, ls_a_map, ls_b_map;
  DataArgs ls_data;
  LandscapeOptions ls_opt;
  auto* ls = app.add_subcommand("landscape", "accuracy over the plane through three models; writes landscape.csv");
  ls->add_option("--origin", ls_origin)->required();
  ls->add_option("--a", ls_a)->required();
  ls->add_option("--b", ls_b)->required();
  ls->add_option("--a-map", ls_a_map, "index_map.json of a pruned --a");
  ls->add_option("--b-map", ls_b_map, "index_map.json of a pruned --b");
  ls->add_option("--data", ls_data.path)->required();
  ls->add_option("--split", ls_data.split)->capture_default_str();
  ls->add_option("--resolution", ls_opt.resolution)->capture_default_str();
  ls->add_option("--margin", ls_opt.margin)->capture_default_str();

  // ablation
  std::string ab_model;
  DataArgs ab_data;
  std::vector<int> ab_groups;
  std::vector<double> ab_sparsities{0.5};
  PruneArgs ab_args;
  auto* ab = app.add_subcommand("ablation", "source/target distribution grid; writes ablation.csv");
  ab->add_option("--model", ab_model)->required();
  ab->add_option("--data", ab_data.path)->required();
  ab->add_option("--split", ab_data.split)->capture_default_str();
  ab->add_option("--groups", ab_groups, "group ids (default: all prunable)")->delimiter(',');
  ab->add_option("--sparsities", ab_sparsities)->delimiter(',')->capture_default_str();
  ab->add_option("--importance", ab_args.importance)->capture_default_str();
  ab->add_option("--calib-batches", ab_args.calib_batches)->capture_default_str();
  ab->add_flag("--softmax", ab_args.softmax);
  ab->add_option("--consumer-agg", ab_args.consumer_agg)->capture_default_str();

  // pipeline
  ArchArgs pl_arch;
  std::string pl_data, pl_mode = "paf", pl_fuse_cost = "activation";
  PipelineConfig pl;
  PruneArgs pl_prune;
  bool pl_timings = false;
  auto* pipe = app.add_subcommand("pipeline", "whole-data, PaF or FaP pipeline; writes stages.csv and final.ifm");
  add_arch_flags(pipe, pl_arch);
  pipe->add_option("--data", pl_data)->required();
  pipe->add_option("--mode", pl_mode, "whole, paf or fap")->capture_default_str();
  pipe->add_option("--k", pl.k)->capture_default_str();
  pipe->add_option("--sparsity", pl.sparsity)->capture_default_str();
  pipe->add_option("--train-epochs", pl.train_epochs)->capture_default_str();
  pipe->add_option("--steps", pl.steps)->capture_default_str();
  pipe->add_option("--step-epochs", pl.step_epochs)->capture_default_str();
  pipe->add_option("--finetune-epochs", pl.finetune_epochs, "doubled for whole")->capture_default_str();
  pipe->add_option("--batch-size", pl.batch_size)->capture_default_str();
  pipe->add_option("--fuse-cost", pl_fuse_cost, "weight or activation")->capture_default_str();
  pipe->add_option("--fuse-samples", pl.fuse_samples)->capture_default_str();
  pipe->add_option("--method", pl_prune.method)->capture_default_str();
  pipe->add_option("--importance", pl_prune.importance)->capture_default_str();
  pipe->add_flag("--timings", pl_timings, "add seconds and elapsed columns (not reproducible)");

  CLI11_PARSE(app, argc, argv);
  if (fs::path(g.out).extension() == ".ifm") {
    g.model_name = fs::path(g.out).filename().string();
    g.out = fs::path(g.out).has_parent_path() ? fs::path(g.out).parent_path().string() : ".";
  }

  try {
    if (build->parsed()) {
      std::optional<Dataset> d;
      std::optional<std::uint64_t> h;
      if (!build_data.empty()) {
        d = load_data(build_data).first;
        h = dataset_hash(*d);
      }
      const auto file = save(g, make_arch(build_arch_args, d ? &*d : nullptr, g.seed), "model.ifm");
      write_manifest(g, *build, h, {file});
    } else if (train_cmd->parsed()) {
      const Dataset data = load_split(train_data);
      TrainConfig cfg;
      cfg.epochs = train_epochs;
      cfg.batch_size = train_batch;
      cfg.base_lr = train_lr;
      cfg.momentum = train_momentum;
      cfg.seed = g.seed;
      const TrainResult r = train(load_model(train_model), data, cfg);
      const auto file = save(g, r.model, "model.ifm");
      auto f = open_out(g, "trace.csv");
      write_trace_csv(f, r.trace);
      write_manifest(g, *train_cmd, dataset_hash(data), {file, "trace.csv"});
    } else if (eval->parsed()) {
      const Dataset data = load_split(eval_data);
      std::optional<ModelGraph> ref;
      if (!eval_reference.empty()) ref = load_model(eval_reference);
      std::vector<EvalRecord> rows;
      for (const auto& path : eval_models) {
        const ModelGraph m = load_model(path);
        EvalRecord r;
        r.model_id = path;
        r.dataset_id = dataset_id(eval_data);
        r.accuracy = accuracy(m, data);
        r.params = count_params(m).total;
        r.original_params = ref ? count_params(*ref).total : r.params;
        if (ref) {
          r.divergence = output_divergence(*ref, m, data);
          r.weight_sparsity = 1.0 - static_cast<double>(r.params) / static_cast<double>(r.original_params);
          r.neuron_sparsity = neuron_sparsity(*ref, m);
        }
        rows.push_back(r);
      }
      auto f = open_out(g, "eval.csv");
      write_eval_csv(f, rows);
      write_manifest(g, *eval, dataset_hash(data), {"eval.csv"});
    } else if (div->parsed()) {
      const Dataset data = load_split(div_data);
      const ModelGraph orig = load_model(div_original);
      std::vector<EvalRecord> rows;
      for (const auto& path : div_pruned) {
        const ModelGraph m = load_model(path);
        EvalRecord r;
        r.model_id = path;
        r.dataset_id = dataset_id(div_data);
        r.accuracy = accuracy(m, data);
        r.divergence = output_divergence(orig, m, data);
        r.params = count_params(m).total;
        r.original_params = count_params(orig).total;
        r.weight_sparsity = 1.0 - static_cast<double>(r.params) / static_cast<double>(r.original_params);
        r.neuron_sparsity = neuron_sparsity(orig, m);
        rows.push_back(r);
      }
      auto f = open_out(g, "divergence.csv");
      write_eval_csv(f, rows);
      write_manifest(g, *div, dataset_hash(data), {"divergence.csv"});
    } else if (groups_cmd->parsed()) {
      const ModelGraph m = load_model(groups_model);
      auto f = open_out(g, "groups.csv");
      f << "group,cardinality,prunable,producers,consumers,elementwise\n";
      for (const auto& gr : build_groups(m)) {
        std::string lists[3];
        for (const auto& s : gr.slices) {
          std::string& l = lists[static_cast<int>(s.role)];
          l += (l.empty() ? "" : ";") + s.layer;
        }
        f << gr.id << ',' << gr.cardinality << ',' << (gr.prunable ? 1 : 0) << ',' << lists[0] << ',' << lists[1]
          << ',' << lists[2] << '\n';
      }
      write_manifest(g, *groups_cmd, std::nullopt, {"groups.csv"});
    } else if (prune->parsed()) {
      if (prune_sparsity < 0.0 && prune_group_id < 0) throw InputError("give --sparsity or --group with --target-m");
      const ModelGraph m = load_model(prune_model);
      std::optional<std::pair<Dataset, Dataset>> data;
      if (!prune_data.path.empty()) data = load_data(prune_data.path);
      const auto setup = make_prune_setup(prune_args, g, data ? &data->first : nullptr);
      const PruneResult r = prune_group_id >= 0 ? prune_group(m, prune_group_id, prune_target_m, setup->options)
                                                : prune_all_groups(m, prune_sparsity, setup->options);
      std::vector<std::string> outputs{save(g, r.model, "pruned.ifm")};
      if (prune_args.target == "topm") {
        auto f = open_out(g, "index_map.json");
        f << index_map_json(index_map_from(r.report)).dump(2) << '\n';
        outputs.push_back("index_map.json");
      }
      if (!prune_report.empty()) {
        auto f = open_out(g, prune_report);
        f << std::setprecision(9) << "group,n,m,positions\n";
        for (const auto& gr : r.report.groups) {
          f << gr.group << ',' << gr.n << ',' << gr.m << ',';
          for (std::size_t i = 0; i < gr.positions.size(); ++i) f << (i ? ";" : "") << gr.positions[i];
          f << '\n';
        }
        std::vector<EvalRecord> rows(1);
        rows[0].model_id = outputs.front();
        rows[0].params = r.report.after.total;
        rows[0].original_params = r.report.before.total;
        rows[0].neuron_sparsity = r.report.neuron_sparsity;
        rows[0].weight_sparsity = r.report.weight_sparsity;
        if (data) {
          const Dataset& ev = prune_data.split == "train" ? data->first : data->second;
          rows[0].dataset_id = dataset_id(prune_data);
          rows[0].accuracy = accuracy(r.model, ev);
          rows[0].divergence = output_divergence(m, r.model, ev);
        }
        const std::string eval_name = fs::path(prune_report).stem().string() + "_eval.csv";
        auto e = open_out(g, eval_name);
        write_eval_csv(e, rows);
        outputs.insert(outputs.end(), {prune_report, eval_name});
      }
      if (!prune_dump_plan.empty()) {
        if (prune_group_id < 0 || setup->options.method != PruneMethod::kIntraFusion) {
          throw InputError("--dump-plan needs --group and the intra-fusion method");
        }
        const auto groups = build_groups(m);
        const Group& gr = find_group(groups, prune_group_id);
        const auto imp = compute_importance(m, gr, setup->options.importance);
        const auto detailed = intra_fuse_detailed(m, gr, imp.scores, prune_target_m, setup->options.fusion);
        auto f = open_out(g, prune_dump_plan);
        write_plan_csv(f, detailed);
        outputs.push_back(prune_dump_plan);
      }
      write_manifest(g, *prune, data ? std::optional(dataset_hash(data->first)) : std::nullopt, outputs);
    } else if (fuse->parsed()) {
      FusionSpec spec;
      spec.models.push_back(load_model(fuse_anchor));
      for (const auto& p : fuse_others) spec.models.push_back(load_model(p));
      spec.weights = fuse_weights.empty() ? std::vector<double>(spec.models.size(), 1.0 / static_cast<double>(spec.models.size()))
                                          : fuse_weights;
      spec.cost = parse_fusion_cost(fuse_cost);
      spec.samples = fuse_samples;
      std::optional<Dataset> d;
      if (spec.cost == FusionCost::kActivation) {
        if (fuse_data.empty()) throw InputError("activation cost needs --data");
        d = load_data(fuse_data).first;
      }
      const auto file = save(g, fuse_models(spec, d ? &d->features : nullptr), "fused.ifm");
      write_manifest(g, *fuse, d ? std::optional(dataset_hash(*d)) : std::nullopt, {file});
    } else if (ls->parsed()) {
      const Dataset data = load_split(ls_data);
      const ModelGraph origin = fold_batchnorm(load_model(ls_origin));
      auto embed = [&](const std::string& path, const std::string& map_path) {
        const ModelGraph m = fold_batchnorm(load_model(path));
        return vectorize(embed_pruned(m, origin, map_path.empty() ? IndexMap{} : read_index_map(map_path)));
      };
      ls_opt.threads = g.threads;
      const LandscapeGrid grid = landscape_grid(origin, vectorize(origin), embed(ls_a, ls_a_map), embed(ls_b, ls_b_map),
                                                data, ls_opt);
      auto f = open_out(g, "landscape.csv");
      write_landscape_csv(f, grid);
      write_manifest(g, *ls, dataset_hash(data), {"landscape.csv"});
    } else if (ab->parsed()) {
      const ModelGraph m = load_model(ab_model);
      const auto [train_set, test_set] = load_data(ab_data.path);
      const Dataset& ev = ab_data.split == "train" ? train_set : test_set;
      const auto setup = make_prune_setup(ab_args, g, &train_set);
      if (ab_groups.empty()) {
        const auto groups = build_groups(m);
        for (const Group* gr : prunable_groups(groups)) ab_groups.push_back(gr->id);
      }
      const auto rows = ablation_grid(m, ev, ab_groups, ab_sparsities, setup->options.importance, setup->options.fusion,
                                      ab_args.softmax ? DistMode::kSoftmax : DistMode::kSumNormalized);
      auto f = open_out(g, "ablation.csv");
      write_ablation_csv(f, rows);
      write_manifest(g, *ab, dataset_hash(ev), {"ablation.csv"});
    } else if (pipe->parsed()) {
      const auto [train_set, test_set] = load_data(pl_data);
      pl.mode = parse_pipeline_mode(pl_mode);
      pl.seed = g.seed;
      pl.threads = g.threads;
      pl.fuse_cost = parse_fusion_cost(pl_fuse_cost);
      pl.prune.method = parse_method(pl_prune.method);
      pl.prune.importance.metric = parse_metric(pl_prune.importance);
      if (pl.prune.importance.metric == ImportanceMetric::kTaylor) {
        throw InputError("the pipeline supports data-free importance metrics only");
      }
      pl.prune.importance.seed = g.seed;
      const PipelineResult r = run_pipeline(make_arch(pl_arch, &train_set, g.seed), train_set, test_set, pl);
      const auto file = save(g, r.model, "final.ifm");
      auto f = open_out(g, "stages.csv");
      write_stages_csv(f, r.stages, pl_timings);
      write_manifest(g, *pipe, dataset_hash(train_set), {file, "stages.csv"});
    }
  } catch (const std::exception& e) {
    std::cerr << "ifn: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
