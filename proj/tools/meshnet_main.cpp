// meshnet command-line tool: batch training, segmentation, evaluation and
// the statistical cohort analysis. Every run that writes artifacts also
// writes a plain-text manifest next to them so results can be reproduced.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meshnet/meshnet.hpp"

namespace {

// Exit codes by failure category.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;       // unknown flag, bad arguments
constexpr int kExitConfig = 3;      // config file or option-value problems
constexpr int kExitMissingFile = 4;  // input file absent/unreadable
constexpr int kExitBadData = 5;     // malformed file content or shapes
constexpr int kExitInternal = 6;

struct GlobalOpts {
  std::uint64_t seed = 0;
  bool seed_set = false;
  unsigned threads = 1;
  std::string config_path;
  std::string write_config;
};

std::uint64_t effective_seed(GlobalOpts& g) {
  if (!g.seed_set) {
    std::random_device rd;
    g.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }
  return g.seed;
}

void write_manifest(const std::string& out_path, const std::string& command,
                    const GlobalOpts& g,
                    const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream f(out_path + ".manifest");
  if (!f) throw meshnet::IoError(out_path + ".manifest: cannot open for writing");
  f << "command " << command << "\n";
  f << "version " << meshnet::kVersion << "\n";
  f << "config " << (g.config_path.empty() ? "-" : g.config_path) << "\n";
  f << "seed " << g.seed << (g.seed_set ? " explicit" : " auto") << "\n";
  f << "threads " << g.threads << "\n";
  for (const auto& [k, v] : kv) f << k << " " << v << "\n";
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, sep))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

meshnet::Volume load_input(const std::string& path, bool normalize, int pad_to) {
  auto v = meshnet::load_volume<float>(path, meshnet::format_from_path(path),
                                       meshnet::VolumeKind::intensity);
  if (normalize) v = meshnet::minmax_normalize(v);
  if (pad_to > 0) v = meshnet::pad_to_cube(v, pad_to);
  return v;
}

meshnet::LabelVolume load_labels(const std::string& path, int pad_to,
                                 const std::string& remap_path) {
  auto v = meshnet::load_volume<std::int32_t>(
      path, meshnet::format_from_path(path), meshnet::VolumeKind::labels);
  if (!remap_path.empty()) {
    const auto map = meshnet::LabelMap::load(remap_path);
    v = map.apply(v);
  }
  if (pad_to > 0) v = meshnet::pad_to_cube(v, pad_to);
  return v;
}

// Dataset list file, one case per line: "<t1>[;<t2>] <labels>".
struct DatasetFiles {
  std::vector<std::vector<std::string>> inputs;
  std::vector<std::string> labels;
};

DatasetFiles parse_dataset_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw meshnet::IoError(path + ": file not found");
  DatasetFiles d;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string in, lab;
    if (!(is >> in >> lab))
      throw meshnet::FormatError(path + ":" + std::to_string(lineno) +
                                 ": expected '<inputs> <labels>'");
    d.inputs.push_back(split_list(in, ';'));
    d.labels.push_back(lab);
  }
  if (d.inputs.empty()) throw meshnet::FormatError(path + ": empty dataset list");
  return d;
}

struct ModelFlags {
  int modalities = 1;
  int channels = 71;
  int classes = 50;
  int side = 38;
  double dropout = 0.0;
  bool literal_table = false;
  std::string bn_placement = "before";
  std::string init = "xavier";

  meshnet::ModelSpec spec() const {
    auto s = meshnet::ModelSpec::atlas(modalities, channels, classes, dropout,
                                       literal_table);
    s.subvolume_side = side;
    s.bn_placement = bn_placement == "after"
                         ? meshnet::BnPlacement::after_activation
                         : meshnet::BnPlacement::before_activation;
    return s;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--modalities", f.modalities, "Input modalities (1 or 2)");
  cmd->add_option("--channels", f.channels, "Feature maps per hidden layer");
  cmd->add_option("--classes", f.classes, "Number of output classes");
  cmd->add_option("--side", f.side, "Subvolume side length");
  cmd->add_option("--dropout", f.dropout, "Layer-7 volumetric dropout p");
  cmd->add_flag("--literal-table", f.literal_table,
                "Use the printed 3^3 kernel in the last layer");
  cmd->add_option("--bn-placement", f.bn_placement, "before|after activation")
      ->check(CLI::IsMember({"before", "after"}));
}

int run_train(bool finetune_mode, const std::string& data_list,
              const std::string& model_in, const std::string& out,
              const std::string& log_path, ModelFlags& mf,
              meshnet::TrainConfig& cfg, GlobalOpts& g, bool normalize,
              int pad_to, const std::string& remap) {
  const auto files = parse_dataset_list(data_list);
  std::vector<meshnet::Volume> volumes;
  std::vector<meshnet::LabelVolume> labels;
  std::vector<meshnet::TrainingCase> cases;
  // Two passes so pointers stay stable.
  std::size_t total_inputs = 0;
  for (const auto& in : files.inputs) total_inputs += in.size();
  volumes.reserve(total_inputs);
  labels.reserve(files.labels.size());
  for (std::size_t i = 0; i < files.inputs.size(); ++i) {
    meshnet::TrainingCase tc;
    for (const auto& p : files.inputs[i]) {
      volumes.push_back(load_input(p, normalize, pad_to));
      tc.inputs.push_back(&volumes.back());
    }
    labels.push_back(load_labels(files.labels[i], pad_to, remap));
    tc.labels = &labels.back();
    cases.push_back(std::move(tc));
  }

  cfg.seed = effective_seed(g);
  meshnet::ThreadPool pool(g.threads);

  meshnet::TrainResult<float> result;
  if (finetune_mode) {
    auto model = meshnet::load_model<float>(model_in);
    result = meshnet::finetune(std::move(model), cases, cfg, &pool, &std::cerr);
  } else {
    mf.modalities = static_cast<int>(cases.front().inputs.size());
    meshnet::Rng rng(cfg.seed);
    auto model = meshnet::build_meshnet<float>(
        mf.spec(), mf.init == "identity" ? meshnet::InitScheme::identity
                                         : meshnet::InitScheme::xavier,
        rng);
    result = meshnet::train(std::move(model), cases, cfg, &pool, &std::cerr);
  }

  meshnet::save_model(result.model, out);
  if (!log_path.empty()) {
    std::ofstream lf(log_path);
    meshnet::write_train_log(lf, result.log);
  }
  write_manifest(out, finetune_mode ? "finetune" : "train", g,
                 {{"data", data_list},
                  {"output", out},
                  {"best_epoch", std::to_string(result.best_epoch)}});
  std::cout << "model written to " << out << " (best epoch "
            << result.best_epoch << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MeshNet volumetric brain atlas segmentation"};
  app.require_subcommand(0, 1);
  app.set_config("--config", "", "Read options from an ini/toml file");
  app.allow_config_extras(CLI::config_extras_mode::error);

  GlobalOpts g;
  if (const char* env_threads = std::getenv("MESHNET_THREADS"))
    g.threads = static_cast<unsigned>(std::strtoul(env_threads, nullptr, 10));
  auto* seed_opt =
      app.add_option("--seed", g.seed, "Random seed (recorded in manifests)");
  app.add_option("--threads", g.threads,
                 "Worker threads for inference (default: MESHNET_THREADS or 1)");
  app.add_option("--write-config", g.write_config,
                 "Write the non-default configuration to a file and exit")
      ->configurable(false);

  // ---- inspect ----
  auto* inspect = app.add_subcommand("inspect", "Print architecture facts");
  ModelFlags inspect_mf;
  inspect_mf.modalities = 2;
  add_model_flags(inspect, inspect_mf);

  // ---- train / finetune ----
  auto* train = app.add_subcommand("train", "Train a model from scratch");
  auto* finetune =
      app.add_subcommand("finetune", "Continue training a saved model");
  ModelFlags train_mf;
  std::string train_data, train_out = "model.mnw", train_log, train_remap;
  std::string finetune_model;
  meshnet::TrainConfig tcfg;
  bool train_normalize = true;
  int train_pad = 0;
  for (CLI::App* cmd : {train, finetune}) {
    cmd->add_option("--data", train_data,
                    "Dataset list file: '<t1>[;<t2>] <labels>' per line")
        ->required();
    cmd->add_option("--out", train_out, "Output model path");
    cmd->add_option("--log", train_log, "Training log path");
    cmd->add_option("--remap", train_remap, "Label remap lookup file");
    cmd->add_option("--epochs", tcfg.epochs, "Training epochs");
    cmd->add_option("--batch-size", tcfg.batch_size,
                    "Subvolumes accumulated per optimizer step");
    cmd->add_option("--val-subvolumes", tcfg.val_subvolumes,
                    "Validation subvolumes per epoch");
    cmd->add_option("--dice-subvolumes", tcfg.dice_subvolumes,
                    "Windows for the per-epoch DICE check (0 = grid only)");
    cmd->add_option("--gaussian-mean", tcfg.sampler.gaussian_mean,
                    "Sampler center (x y z)");
    cmd->add_option("--gaussian-std", tcfg.sampler.gaussian_std,
                    "Sampler std (x y z)");
    cmd->add_option("--gaussian-mix", tcfg.gaussian_mix,
                    "Fraction of training windows from the Gaussian sampler");
    cmd->add_flag("!--no-normalize", train_normalize,
                  "Skip min-max normalization of inputs");
    cmd->add_option("--pad-to", train_pad, "Zero-pad inputs to this cube side");
  }
  train->add_option("--subvolumes", tcfg.subvolumes_per_epoch,
                    "Training subvolumes per epoch");
  train->add_option("--lr", tcfg.lr, "Adam learning rate");
  add_model_flags(train, train_mf);
  train->add_option("--init", train_mf.init, "xavier|identity")
      ->check(CLI::IsMember({"xavier", "identity"}));
  finetune->add_option("--model", finetune_model, "Pretrained model path")
      ->required();
  int finetune_subvolumes = 7168;
  finetune->add_option("--subvolumes", finetune_subvolumes,
                       "Fine-tuning subvolumes per epoch");
  finetune->add_option("--finetune-lr", tcfg.finetune_lr,
                       "Reduced Adam learning rate");

  // ---- segment ----
  auto* seg = app.add_subcommand("segment", "Segment volumes with a model");
  std::string seg_inputs, seg_model, seg_out = "labels.nii", seg_votes = "majority";
  int seg_subvolumes = 1024, seg_pad = 0;
  bool seg_normalize = true;
  seg->add_option("--inputs", seg_inputs, "Input volume(s), comma separated")
      ->required();
  seg->add_option("--model", seg_model, "Model weight file")->required();
  seg->add_option("--subvolumes", seg_subvolumes, "Total windows to classify");
  seg->add_option("--out", seg_out, "Output label volume path");
  seg->add_option("--votes", seg_votes, "majority|logprob fusion rule")
      ->check(CLI::IsMember({"majority", "logprob"}));
  seg->add_flag("!--no-normalize", seg_normalize,
                "Skip min-max normalization of inputs");
  seg->add_option("--pad-to", seg_pad, "Zero-pad inputs to this cube side");

  // ---- evaluate ----
  auto* eval = app.add_subcommand("evaluate", "Score a prediction against labels");
  std::string eval_pred, eval_gt, eval_out, eval_remap;
  int eval_classes = 0;
  bool eval_avd_percent = false, eval_literal_avd = false;
  eval->add_option("--pred", eval_pred, "Predicted label volume")->required();
  eval->add_option("--gt", eval_gt, "Reference label volume")->required();
  eval->add_option("--classes", eval_classes,
                   "Class count (default: max label + 1)");
  eval->add_option("--remap", eval_remap,
                   "Label remap lookup file applied to the reference");
  eval->add_option("--out", eval_out, "Report path (default stdout)");
  eval->add_flag("--avd-percent", eval_avd_percent, "Report AVD as percent");
  eval->add_flag("--literal-avd", eval_literal_avd,
                 "Use the literal intersection form of AVD");

  // ---- stats ----
  auto* stats_cmd =
      app.add_subcommand("stats", "Cohort covariate + repeated-measures analysis");
  std::string stats_table, stats_out;
  double stats_alpha = 0.05;
  stats_cmd->add_option("--table", stats_table, "Cohort table (tsv/csv)")
      ->required();
  stats_cmd->add_option("--alpha", stats_alpha, "Significance threshold");
  stats_cmd->add_option("--out", stats_out, "Report path (default stdout)");

  // ---- benchmark ----
  auto* bench = app.add_subcommand("benchmark", "Time segmentation vs window count");
  std::string bench_inputs, bench_model, bench_out, bench_reference;
  std::string bench_counts = "512,768,1024,2048,4096,8192";
  int bench_repeats = 3, bench_reference_count = 8192, bench_pad = 0;
  bool bench_normalize = true;
  bench->add_option("--inputs", bench_inputs, "Input volume(s), comma separated")
      ->required();
  bench->add_option("--model", bench_model, "Model weight file")->required();
  bench->add_option("--counts", bench_counts, "Comma-separated window counts");
  bench->add_option("--repeats", bench_repeats, "Timing repeats per count");
  bench->add_option("--reference", bench_reference,
                    "Ground-truth labels for the DICE column");
  bench->add_option("--reference-count", bench_reference_count,
                    "Window count for the self-reference segmentation");
  bench->add_option("--out", bench_out, "Report path (default stdout)");
  bench->add_flag("!--no-normalize", bench_normalize,
                  "Skip min-max normalization of inputs");
  bench->add_option("--pad-to", bench_pad, "Zero-pad inputs to this cube side");

  // global flags (--seed, --threads) may trail the subcommand too
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;
  if (const auto* cfg_opt = app.get_config_ptr(); cfg_opt && cfg_opt->count() > 0)
    g.config_path = cfg_opt->as<std::string>();

  if (!g.write_config.empty()) {
    std::ofstream f(g.write_config);
    if (!f) {
      std::cerr << g.write_config << ": cannot open for writing\n";
      return kExitMissingFile;
    }
    f << app.config_to_str(false, false);
    return kExitOk;
  }

  try {
    if (inspect->parsed()) {
      const auto spec = inspect_mf.spec();
      spec.validate();
      meshnet::Rng rng(0);
      const auto model = meshnet::build_meshnet<float>(
          spec, meshnet::InitScheme::identity, rng);
      std::cout << "modalities: " << spec.modalities << "\n"
                << "channels: " << spec.channels << "\n"
                << "classes: " << spec.classes << "\n"
                << "subvolume side: " << spec.subvolume_side << "\n"
                << "layers: " << spec.layers.size() << "\n";
      for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        std::cout << "  layer " << i + 1 << ": kernel " << l.kernel
                  << " dilation " << l.dilation << " padding " << l.padding
                  << (l.batch_norm ? " bn" : "") << (l.relu ? " relu" : "");
        if (l.dropout_p > 0) std::cout << " dropout " << l.dropout_p;
        std::cout << "\n";
      }
      std::cout << "parameters: " << meshnet::count_parameters(model) << "\n"
                << "receptive field: " << meshnet::receptive_field(spec) << "\n";
      return kExitOk;
    }

    if (train->parsed())
      return run_train(false, train_data, "", train_out, train_log, train_mf,
                       tcfg, g, train_normalize, train_pad, train_remap);
    if (finetune->parsed()) {
      tcfg.subvolumes_per_epoch = finetune_subvolumes;
      return run_train(true, train_data, finetune_model, train_out, train_log,
                       train_mf, tcfg, g, train_normalize, train_pad,
                       train_remap);
    }

    if (seg->parsed()) {
      const auto paths = split_list(seg_inputs);
      std::vector<meshnet::Volume> vols;
      vols.reserve(paths.size());
      std::vector<const meshnet::Volume*> inputs;
      for (const auto& p : paths) {
        vols.push_back(load_input(p, seg_normalize, seg_pad));
        inputs.push_back(&vols.back());
      }
      const auto model = meshnet::load_model<float>(seg_model);
      meshnet::SamplerConfig sc;
      sc.seed = effective_seed(g);
      meshnet::ThreadPool pool(g.threads);
      const auto rule = seg_votes == "logprob" ? meshnet::VoteRule::logprob
                                               : meshnet::VoteRule::majority;
      const auto result =
          meshnet::segment(inputs, model, sc, seg_subvolumes, rule, &pool);
      meshnet::write_volume(result.labels, seg_out,
                            meshnet::format_from_path(seg_out));
      write_manifest(seg_out, "segment", g,
                     {{"inputs", seg_inputs},
                      {"model", seg_model},
                      {"subvolumes", std::to_string(seg_subvolumes)},
                      {"votes", seg_votes},
                      {"output", seg_out}});
      std::cout << "segmentation written to " << seg_out << " ("
                << result.corners.size() << " windows)\n";
      return kExitOk;
    }

    if (eval->parsed()) {
      auto pred = meshnet::load_volume<std::int32_t>(
          eval_pred, meshnet::format_from_path(eval_pred),
          meshnet::VolumeKind::labels);
      auto gt = load_labels(eval_gt, 0, eval_remap);
      std::vector<std::string> names;
      if (!eval_remap.empty()) names = meshnet::LabelMap::load(eval_remap).names;
      int classes = eval_classes;
      if (classes == 0) {
        std::int32_t hi = 0;
        for (auto v : pred.data) hi = std::max(hi, v);
        for (auto v : gt.data) hi = std::max(hi, v);
        classes = hi + 1;
      }
      const auto counts = meshnet::confusion(pred, gt, classes);
      const auto form = eval_literal_avd
                            ? meshnet::AvdForm::literal_intersection
                            : meshnet::AvdForm::volume_difference;
      if (eval_out.empty()) {
        meshnet::write_metric_report(std::cout, counts, names, eval_avd_percent,
                                     form);
      } else {
        std::ofstream f(eval_out);
        meshnet::write_metric_report(f, counts, names, eval_avd_percent, form);
        write_manifest(eval_out, "evaluate", g,
                       {{"pred", eval_pred}, {"gt", eval_gt},
                        {"output", eval_out}});
      }
      std::cout << "macro dice: " << meshnet::macro_dice(counts) << "\n";
      return kExitOk;
    }

    if (stats_cmd->parsed()) {
      const auto table = meshnet::stats::load_cohort_table(stats_table);
      const auto result =
          meshnet::stats::analyze_cohort(table.records, table.roi_names,
                                         stats_alpha);
      if (stats_out.empty()) {
        meshnet::stats::write_stats_report(std::cout, result);
      } else {
        std::ofstream f(stats_out);
        meshnet::stats::write_stats_report(f, result);
        write_manifest(stats_out, "stats", g,
                       {{"table", stats_table}, {"output", stats_out}});
        std::cout << "report written to " << stats_out << "\n";
      }
      return kExitOk;
    }

    if (bench->parsed()) {
      const auto paths = split_list(bench_inputs);
      std::vector<meshnet::Volume> vols;
      vols.reserve(paths.size());
      std::vector<const meshnet::Volume*> inputs;
      for (const auto& p : paths) {
        vols.push_back(load_input(p, bench_normalize, bench_pad));
        inputs.push_back(&vols.back());
      }
      const auto model = meshnet::load_model<float>(bench_model);
      std::vector<int> counts;
      for (const auto& c : split_list(bench_counts)) counts.push_back(std::stoi(c));
      std::optional<meshnet::LabelVolume> ref;
      if (!bench_reference.empty()) ref = load_labels(bench_reference, 0, "");
      meshnet::SamplerConfig sc;
      sc.seed = effective_seed(g);
      meshnet::ThreadPool pool(g.threads);
      const auto report = meshnet::benchmark(
          inputs, model, sc, ref ? &*ref : nullptr, counts, bench_repeats,
          bench_reference_count, &pool);
      if (bench_out.empty()) {
        meshnet::write_benchmark_report(std::cout, report);
      } else {
        std::ofstream f(bench_out);
        meshnet::write_benchmark_report(f, report);
        write_manifest(bench_out, "benchmark", g,
                       {{"inputs", bench_inputs}, {"model", bench_model},
                        {"output", bench_out}});
        std::cout << "report written to " << bench_out << "\n";
      }
      return kExitOk;
    }

    std::cout << app.help();
    return kExitOk;
  } catch (const meshnet::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const meshnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const meshnet::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitBadData;
  } catch (const meshnet::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitBadData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
