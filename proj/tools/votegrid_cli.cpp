// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: synthetic data generation, dataset ingestion,
// pipeline runs, ablations, the occupancy benchmark, and proxy training.
// Every subcommand is reproducible from (config file, dataset, seed);
// outputs are plain JSON / CSV / PGM / parameter containers.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "votegrid/bench.hpp"
#include "votegrid/io.hpp"
#include "votegrid/pipeline.hpp"
#include "votegrid/train.hpp"

namespace vg = votegrid;
namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand. seed/threads only override the
// config when actually given on the command line, so their Option
// handles are kept for count() checks.
struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  unsigned threads = 1;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value configuration file");
    cmd->add_option("--out", out_dir, "output directory, created if missing");
    seed_opt = cmd->add_option("--seed", seed, "override the configured seed");
    threads_opt =
        cmd->add_option("--threads", threads, "override the configured worker count");
  }

  bool has_seed() const { return seed_opt != nullptr && seed_opt->count() > 0; }
  bool has_threads() const {
    return threads_opt != nullptr && threads_opt->count() > 0;
  }

  vg::KeyValueConfig load_config() const {
    if (config_path.empty()) return vg::KeyValueConfig::parse("", "<no config>");
    return vg::KeyValueConfig::load(config_path);
  }

  fs::path ensure_out() const {
    fs::path p(out_dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    vg::require(!ec, vg::ErrorKind::IoError,
                "cannot create output directory: " + out_dir);
    return p;
  }
};

std::string sanitize_id(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
          c == '.'))
      c = '_';
  return out;
}

std::string matrix_csv(const vg::FeatureMatrix& m) {
  std::string out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      out += vg::detail::format_double(m(r, c));
    }
    out += '\n';
  }
  return out;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  vg::write_text_file(path.string(), j.dump(2) + "\n");
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const std::string& w : warnings)
    std::fprintf(stderr, "votegrid: warning: %s\n", w.c_str());
}

vg::PipelineConfig pipeline_config(const CommonArgs& common,
                                   const vg::KeyValueConfig& kv) {
  vg::PipelineConfig cfg = vg::pipeline_config_from_kv(kv);
  if (common.has_seed()) cfg.seed = common.seed;
  if (common.has_threads()) cfg.threads = std::max(1u, common.threads);
  return cfg;
}

/// One workflow config may drive several subcommands, so every known key
/// group counts as consumed; require_consumed then flags only true typos.
/// Groups a subcommand does not use are still parsed, keeping a shared
/// config either valid everywhere or rejected everywhere.
void finish_config(const vg::KeyValueConfig& kv) {
  (void)vg::pipeline_config_from_kv(kv);
  (void)vg::suite_spec_from_kv(kv);
  kv.get_string("dataset.format", "xyz-grid");
  kv.get_double("train.init_scale", 0.0);
  kv.get_string("synth.shape", "sphere");
  kv.get_int("synth.n_points", 0);
  kv.get_string("synth.anomaly", "none");
  kv.get_double("synth.anomaly_size", 0.0);
  kv.get_double("synth.anomaly_depth", 0.0);
  kv.get_double("synth.noise_sigma", 0.0);
  kv.get_u64("synth.seed", 0);
  kv.get_int_list("bench.sizes", {});
  kv.get_double_list("bench.occupancies", {});
  kv.get_int("bench.kernel", 3);
  kv.get_int("bench.cin", 1);
  kv.get_int("bench.cout", 1);
  kv.get_int("bench.repeats", 1);
  kv.get_int("proxy.side", 16);
  kv.get_double("proxy.spurious", 0.5);
  kv.get_int_list("proxy.channels", {});
  kv.get_int("proxy.kernel", 3);
  kv.get_u64("proxy.seed", 1);
  kv.get_int("proxy.instances", 4);
  kv.get_int("proxy.n_points", 2048);
  kv.get_double("proxy.noise_sigma", 0.0);
  kv.get_double("proxy.anomaly_size", 0.0);
  kv.get_double("proxy.anomaly_depth", 0.0);
  kv.require_consumed();
}

// Dataset selection shared by detect / evaluate / ablate: either a
// directory of cloud files or the in-memory synthetic suite.
struct DataArgs {
  std::string data_root;
  bool use_suite = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data_root,
                    "dataset root {train/good, test/<defect>, ground_truth}");
    cmd->add_flag("--suite", use_suite,
                  "use the synthetic suite from the suite.* config keys");
  }

  vg::Dataset load(const vg::KeyValueConfig& kv) const {
    vg::require(use_suite || !data_root.empty(), vg::ErrorKind::InvalidConfig,
                "give exactly one of --data or --suite");
    vg::require(!(use_suite && !data_root.empty()), vg::ErrorKind::InvalidConfig,
                "give exactly one of --data or --suite");
    if (use_suite) return vg::make_synthetic_suite(vg::suite_spec_from_kv(kv));
    const vg::DatasetFormat fmt =
        vg::parse_dataset_format(kv.get_string("dataset.format", "xyz-grid"));
    return vg::load_dataset(data_root, fmt);
  }
};

// ---------------------------------------------------------------------------
// synth: one labeled sample, or the whole suite as a dataset tree
// ---------------------------------------------------------------------------

void run_synth(const CommonArgs& common, bool suite) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  const vg::DatasetFormat fmt =
      vg::parse_dataset_format(kv.get_string("dataset.format", "xyz-grid"));
  const std::string ext = fmt == vg::DatasetFormat::XyzGrid ? ".xyz" : ".ply";

  if (suite) {
    vg::SuiteSpec spec = vg::suite_spec_from_kv(kv);
    if (common.has_seed()) spec.seed = common.seed;
    finish_config(kv);
    const vg::Dataset ds = vg::make_synthetic_suite(spec);
    vg::write_dataset(ds, out.string(), fmt);
    std::printf("synth: wrote %zu train and %zu test samples under %s\n",
                ds.train.size(), ds.test.size(), out.string().c_str());
    return;
  }

  vg::SyntheticSpec spec;
  spec.base_shape = vg::parse_base_shape(kv.get_string("synth.shape", "sphere"));
  spec.n_points = static_cast<std::size_t>(
      kv.get_int("synth.n_points", static_cast<long long>(spec.n_points)));
  spec.anomaly = vg::parse_anomaly_kind(kv.get_string("synth.anomaly", "none"));
  spec.anomaly_size = kv.get_double("synth.anomaly_size", spec.anomaly_size);
  spec.anomaly_depth = kv.get_double("synth.anomaly_depth", spec.anomaly_depth);
  spec.noise_sigma = kv.get_double("synth.noise_sigma", spec.noise_sigma);
  spec.seed = kv.get_u64("synth.seed", spec.seed);
  if (common.has_seed()) spec.seed = common.seed;
  finish_config(kv);

  const vg::SyntheticSample s = vg::generate_synthetic(spec);
  vg::write_cloud_file((out / ("sample" + ext)).string(), s.cloud, fmt);
  const auto [rows, cols] = *s.cloud.grid_shape;
  vg::write_pgm_mask((out / "mask.pgm").string(), s.mask.truth, rows, cols);
  std::printf("synth: wrote sample%s and mask.pgm under %s\n", ext.c_str(),
              out.string().c_str());
}

// ---------------------------------------------------------------------------
// preprocess: background removal for one cloud file
// ---------------------------------------------------------------------------

void run_preprocess(const CommonArgs& common, const std::string& input) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  const vg::DatasetFormat fmt =
      vg::parse_dataset_format(kv.get_string("dataset.format", "xyz-grid"));
  const vg::PipelineConfig cfg = pipeline_config(common, kv);
  finish_config(kv);

  const vg::PointCloud cloud = vg::read_cloud_file(input, fmt);
  vg::BackgroundRemoval br = vg::remove_background(cloud, cfg.preprocess);

  // The cleaned cloud is unorganized; store it as a single-row grid.
  vg::PointCloud object = std::move(br.cloud);
  object.grid_shape = {1, static_cast<int>(object.size())};
  object.valid.assign(object.size(), 1);
  const std::string ext = fmt == vg::DatasetFormat::XyzGrid ? ".xyz" : ".ply";
  vg::write_cloud_file((out / ("object" + ext)).string(), object, fmt);

  nlohmann::ordered_json j;
  j["input"] = input;
  j["n_points"] = cloud.size();
  j["n_valid"] = cloud.valid_count();
  j["n_object"] = object.size();
  j["n_background"] = br.background.size();
  j["plane"] = {{"nx", br.plane.normal.x()},
                {"ny", br.plane.normal.y()},
                {"nz", br.plane.normal.z()},
                {"offset", br.plane.offset}};
  write_json(out / "background.json", j);
  std::printf("preprocess: %zu object points, %zu background points\n",
              object.size(), br.background.size());
}

// ---------------------------------------------------------------------------
// features: per-view depth renders plus descriptor blocks for one cloud
// ---------------------------------------------------------------------------

void run_features(const CommonArgs& common, const std::string& input) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  const vg::DatasetFormat fmt =
      vg::parse_dataset_format(kv.get_string("dataset.format", "xyz-grid"));
  const vg::PipelineConfig cfg = pipeline_config(common, kv);
  finish_config(kv);

  vg::Sample sample;
  sample.id = "input";
  sample.defect = "";
  sample.cloud = vg::read_cloud_file(input, fmt);
  const vg::SampleFeatures sf =
      vg::extract_sample_features(sample, cfg, cfg.threads);

  const std::vector<vg::ViewPose> poses = vg::make_views(
      sf.object, cfg.n_views, 2.5, cfg.image_rows, cfg.image_cols);
  for (std::size_t v = 0; v < poses.size(); ++v) {
    const vg::DepthImage zbuf = vg::render_depth(sf.object, poses[v]);
    char name[32];
    std::snprintf(name, sizeof name, "view_%03zu.pgm", v);
    vg::write_pgm_depth16((out / name).string(), zbuf);
  }
  vg::write_text_file((out / "f3d.csv").string(), matrix_csv(sf.f3d));
  vg::write_text_file((out / "f2d.csv").string(), matrix_csv(sf.f2d));
  std::printf("features: %zu points, %d views, f3d %ldx%ld, f2d %ldx%ld\n",
              sf.object.size(), cfg.n_views, static_cast<long>(sf.f3d.rows()),
              static_cast<long>(sf.f3d.cols()), static_cast<long>(sf.f2d.rows()),
              static_cast<long>(sf.f2d.cols()));
}

// ---------------------------------------------------------------------------
// detect / evaluate: full pipeline over a dataset
// ---------------------------------------------------------------------------

void run_detect(const CommonArgs& common, const DataArgs& data, bool per_sample) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  const vg::PipelineConfig cfg = pipeline_config(common, kv);
  const vg::Dataset ds = data.load(kv);
  finish_config(kv);

  const vg::PipelineRun run = vg::run_pipeline(cfg, ds);
  print_warnings(ds.warnings);
  print_warnings(run.warnings);

  if (per_sample) {
    const fs::path results = out / "results";
    std::error_code ec;
    fs::create_directories(results, ec);
    vg::require(!ec, vg::ErrorKind::IoError, "cannot create results directory");
    for (const vg::SampleOutcome& o : run.outcomes)
      write_json(results / (sanitize_id(o.id) + ".json"),
                 vg::result_to_json(o.id, o.result));
  }
  write_json(out / "report.json", vg::report_to_json(run.report));
  std::printf("%s: mean_i_roc=%s mean_p_pro=%s over %zu test samples\n",
              per_sample ? "detect" : "evaluate",
              vg::detail::format_double(run.report.mean_i_roc).c_str(),
              run.report.has_mean_p_pro
                  ? vg::detail::format_double(run.report.mean_p_pro).c_str()
                  : "n/a",
              run.outcomes.size());
}

// ---------------------------------------------------------------------------
// ablate: one pipeline run per axis value
// ---------------------------------------------------------------------------

void run_ablate(const CommonArgs& common, const DataArgs& data,
                const std::string& axis_name) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  const vg::AblationAxis axis = vg::parse_ablation_axis(axis_name);
  const vg::PipelineConfig cfg = pipeline_config(common, kv);
  const vg::Dataset ds = data.load(kv);
  finish_config(kv);

  const std::vector<vg::AblationRow> rows = vg::run_ablation(cfg, ds, axis);
  vg::write_text_file((out / "ablation.csv").string(), vg::ablation_csv(rows));
  std::printf("ablate: %zu rows over axis %s\n", rows.size(), axis_name.c_str());
}

// ---------------------------------------------------------------------------
// bench: voting_conv vs the dense oracle over random grids
// ---------------------------------------------------------------------------

void run_bench(const CommonArgs& common) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();
  vg::BenchConfig bc;
  bc.grid_sizes = kv.get_int_list("bench.sizes", bc.grid_sizes);
  bc.occupancies = kv.get_double_list("bench.occupancies", bc.occupancies);
  bc.kernel = static_cast<int>(kv.get_int("bench.kernel", bc.kernel));
  bc.c_in = static_cast<int>(kv.get_int("bench.cin", bc.c_in));
  bc.c_out = static_cast<int>(kv.get_int("bench.cout", bc.c_out));
  bc.repeats = static_cast<int>(kv.get_int("bench.repeats", bc.repeats));
  bc.seed = kv.get_u64("seed", bc.seed);
  bc.threads = static_cast<unsigned>(kv.get_int("threads", bc.threads));
  if (common.has_seed()) bc.seed = common.seed;
  if (common.has_threads()) bc.threads = std::max(1u, common.threads);
  finish_config(kv);

  const std::vector<vg::BenchRow> rows = vg::bench_sparse(bc);
  vg::write_text_file((out / "bench.csv").string(), vg::bench_csv(rows));
  for (const vg::BenchRow& r : rows)
    std::printf("bench: size=%d occupancy=%s votes=%llu voting=%ss dense=%ss\n",
                r.size, vg::detail::format_double(r.occupancy).c_str(),
                static_cast<unsigned long long>(r.votes),
                vg::detail::format_double(r.voting_time).c_str(),
                vg::detail::format_double(r.dense_time).c_str());
}

// ---------------------------------------------------------------------------
// train-proxy: sparse occupancy denoising or the graph scorer
// ---------------------------------------------------------------------------

std::string loss_trace_csv(const std::vector<double>& loss,
                           const std::vector<double>* data) {
  std::string out = data ? "iter,loss,data_loss\n" : "iter,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) {
    out += std::to_string(i) + "," + vg::detail::format_double(loss[i]);
    if (data) out += "," + vg::detail::format_double((*data)[i]);
    out += '\n';
  }
  return out;
}

void run_train_proxy(const CommonArgs& common, const std::string& task) {
  const vg::KeyValueConfig kv = common.load_config();
  const fs::path out = common.ensure_out();

  vg::TrainConfig tc;
  tc.iters = static_cast<int>(kv.get_int("train.iters", tc.iters));
  tc.step = kv.get_double("train.step", tc.step);
  tc.lambda = kv.get_double("train.lambda", tc.lambda);
  tc.seed = kv.get_u64("train.seed", tc.seed);
  tc.init_scale = kv.get_double("train.init_scale", tc.init_scale);
  if (common.has_seed()) tc.seed = common.seed;
  unsigned threads = static_cast<unsigned>(kv.get_int("threads", 1));
  if (common.has_threads()) threads = std::max(1u, common.threads);

  if (task == "sparse") {
    const int side = static_cast<int>(kv.get_int("proxy.side", 16));
    const double spurious = kv.get_double("proxy.spurious", 0.5);
    const std::vector<int> channels = kv.get_int_list("proxy.channels", {1, 4, 1});
    const int ksize = static_cast<int>(kv.get_int("proxy.kernel", 3));
    const std::uint64_t task_seed = kv.get_u64("proxy.seed", 1);
    finish_config(kv);

    const vg::SparseProxyTask proxy =
        vg::make_sparse_proxy_task(side, spurious, task_seed);
    std::vector<vg::ConvKernel3D> init =
        vg::init_sparse_net(channels, ksize, tc.seed, tc.init_scale);
    const vg::SparseTrainResult res =
        vg::train_sparse_proxy(std::move(init), proxy, tc, threads);

    vg::write_params((out / "params.vgk").string(),
                     vg::NetParams{res.layers, {}, {}});
    vg::write_text_file((out / "loss_trace.csv").string(),
                        loss_trace_csv(res.loss_trace, &res.data_trace));
    std::string sparsity = "layer,zero_fraction\n";
    for (std::size_t l = 0; l < res.final_zero_fraction.size(); ++l)
      sparsity += std::to_string(l) + "," +
                  vg::detail::format_double(res.final_zero_fraction[l]) + "\n";
    sparsity += "mean_intermediate," +
                vg::detail::format_double(res.mean_intermediate_zero_fraction) +
                "\n";
    vg::write_text_file((out / "sparsity.csv").string(), sparsity);
    std::printf(
        "train-proxy: final loss %s, mean intermediate zero fraction %s\n",
        vg::detail::format_double(res.loss_trace.back()).c_str(),
        vg::detail::format_double(res.mean_intermediate_zero_fraction).c_str());
    return;
  }

  vg::require(task == "graph", vg::ErrorKind::InvalidConfig,
              "unknown train-proxy task '" + task + "' (sparse | graph)");

  // Labeled synthetic instances: anomalous surfaces whose per-point truth
  // becomes the regression target after background removal.
  const vg::PipelineConfig cfg = pipeline_config(common, kv);
  const int instances = static_cast<int>(kv.get_int("proxy.instances", 4));
  const int n_points = static_cast<int>(kv.get_int("proxy.n_points", 2048));
  const double noise = kv.get_double("proxy.noise_sigma", 0.002);
  const double a_size = kv.get_double("proxy.anomaly_size", 0.05);
  const double a_depth = kv.get_double("proxy.anomaly_depth", 0.02);
  const std::uint64_t task_seed = kv.get_u64("proxy.seed", 1);
  finish_config(kv);
  vg::require(instances >= 1, vg::ErrorKind::InvalidConfig,
              "proxy.instances must be at least 1");

  std::vector<vg::GraphTrainInstance> data;
  int d_in = 0;
  for (int i = 0; i < instances; ++i) {
    vg::SyntheticSpec spec;
    spec.base_shape = vg::BaseShape::Sphere;
    spec.n_points = static_cast<std::size_t>(n_points);
    spec.anomaly = i % 2 == 0 ? vg::AnomalyKind::Bump : vg::AnomalyKind::Dent;
    spec.anomaly_size = a_size;
    spec.anomaly_depth = a_depth;
    spec.noise_sigma = noise;
    spec.seed = task_seed + 1000003ULL * static_cast<std::uint64_t>(i + 1);
    const vg::SyntheticSample s = vg::generate_synthetic(spec);

    vg::BackgroundRemoval br = vg::remove_background(s.cloud, cfg.preprocess);
    vg::GraphTrainInstance inst;
    inst.features = vg::fpfh(br.cloud, cfg.fpfh, threads);
    inst.a_hat = vg::normalize_adjacency(
        vg::build_graph(br.cloud, cfg.graph.k, cfg.graph.self_loops, threads));
    inst.targets = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(br.cloud.size()));
    for (std::size_t j = 0; j < br.index_map.size(); ++j)
      if (s.mask.truth[br.index_map[j]])
        inst.targets(static_cast<Eigen::Index>(j)) = 1.0;
    d_in = static_cast<int>(inst.features.cols());
    data.push_back(std::move(inst));
  }

  // Descriptor rows carry a fixed histogram mass; rescale to unit mean
  // row norm (as the pipeline does before scorer fitting) so the step
  // size works on a predictable scale.
  double norm_sum = 0.0;
  std::size_t norm_rows = 0;
  for (const vg::GraphTrainInstance& inst : data) {
    for (Eigen::Index r = 0; r < inst.features.rows(); ++r)
      norm_sum += inst.features.row(r).norm();
    norm_rows += static_cast<std::size_t>(inst.features.rows());
  }
  const double mean_norm = norm_rows ? norm_sum / static_cast<double>(norm_rows) : 1.0;
  if (mean_norm > 0.0)
    for (vg::GraphTrainInstance& inst : data) inst.features /= mean_norm;

  vg::GraphScorerParams init = vg::init_graph_scorer(
      d_in, cfg.graph.hidden, cfg.graph.layers, tc.seed, tc.init_scale);
  const vg::GraphTrainResult res =
      vg::train_graph_scorer(std::move(init), data, tc, threads);

  vg::write_params((out / "params.vgk").string(),
                   vg::NetParams{{}, res.params.layers, res.params.mlp.layers});
  vg::write_text_file((out / "loss_trace.csv").string(),
                      loss_trace_csv(res.loss_trace, nullptr));
  std::printf("train-proxy: final loss %s over %d instances\n",
              vg::detail::format_double(res.loss_trace.back()).c_str(), instances);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voting-convolution point cloud anomaly detection toolkit"};
  app.require_subcommand(1);

  CommonArgs synth_args;
  bool synth_suite = false;
  CLI::App* synth = app.add_subcommand(
      "synth", "generate a labeled synthetic sample or dataset tree");
  synth_args.attach(synth);
  synth->add_flag("--suite", synth_suite,
                  "write the whole synthetic suite as a dataset tree");
  synth->callback([&] { run_synth(synth_args, synth_suite); });

  CommonArgs pre_args;
  std::string pre_input;
  CLI::App* pre =
      app.add_subcommand("preprocess", "background removal for one cloud file");
  pre_args.attach(pre);
  pre->add_option("--input", pre_input, "organized cloud file")->required();
  pre->callback([&] { run_preprocess(pre_args, pre_input); });

  CommonArgs feat_args;
  std::string feat_input;
  CLI::App* feat = app.add_subcommand(
      "features", "depth renders and feature blocks for one cloud file");
  feat_args.attach(feat);
  feat->add_option("--input", feat_input, "organized cloud file")->required();
  feat->callback([&] { run_features(feat_args, feat_input); });

  CommonArgs detect_args;
  DataArgs detect_data;
  CLI::App* detect = app.add_subcommand(
      "detect", "run the pipeline and write per-sample results plus a report");
  detect_args.attach(detect);
  detect_data.attach(detect);
  detect->callback([&] { run_detect(detect_args, detect_data, true); });

  CommonArgs eval_args;
  DataArgs eval_data;
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "run the pipeline and write the metric report");
  eval_args.attach(evaluate);
  eval_data.attach(evaluate);
  evaluate->callback([&] { run_detect(eval_args, eval_data, false); });

  CommonArgs ablate_args;
  DataArgs ablate_data;
  std::string ablate_axis;
  CLI::App* ablate =
      app.add_subcommand("ablate", "sweep one axis and write metric-vs-axis CSV");
  ablate_args.attach(ablate);
  ablate_data.attach(ablate);
  ablate->add_option("--axis", ablate_axis, "n_views | feature_mode")->required();
  ablate->callback([&] { run_ablate(ablate_args, ablate_data, ablate_axis); });

  CommonArgs bench_args;
  CLI::App* bench = app.add_subcommand(
      "bench", "time voting convolution against the dense oracle");
  bench_args.attach(bench);
  bench->callback([&] { run_bench(bench_args); });

  CommonArgs train_args;
  std::string train_task;
  CLI::App* train = app.add_subcommand(
      "train-proxy", "train the sparse net or graph scorer on a synthetic task");
  train_args.attach(train);
  train->add_option("--task", train_task, "sparse | graph")->required();
  train->callback([&] { run_train_proxy(train_args, train_task); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const vg::Error& e) {
    std::fprintf(stderr, "votegrid: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "votegrid: %s\n", e.what());
    return 1;
  }
  return 0;
}
