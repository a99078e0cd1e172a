#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dilseg/infer.hpp"
#include "dilseg/io.hpp"
#include "dilseg/metrics.hpp"
#include "dilseg/model.hpp"
#include "dilseg/netspec.hpp"
#include "dilseg/rf.hpp"
#include "dilseg/rng.hpp"
#include "dilseg/synth.hpp"
#include "dilseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dilseg;

namespace {

Scale parse_scale(const std::string& s) {
  if (s == "paper") return Scale::Paper;
  if (s == "micro") return Scale::Micro;
  throw CLI::ValidationError("--scale", "must be 'paper' or 'micro'");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct GenDataArgs {
  std::string out;
  int scenes = 64, test_scenes = 16, extent = 256;
  std::vector<int> count{20, 40};
  std::vector<int> size{3, 12};
  int gap = 1;
  double noise = 0.05;
  std::uint64_t seed = 0;
  int downsample = 1;
  bool previews = false;
};

void run_gen_data(const GenDataArgs& a) {
  auto make = [&](int index) {
    SceneConfig cfg;
    cfg.extent = a.extent;
    cfg.count_min = a.count[0];
    cfg.count_max = a.count[1];
    cfg.size_min = a.size[0];
    cfg.size_max = a.size[1];
    cfg.min_gap = a.gap;
    cfg.noise = a.noise;
    cfg.seed = a.seed ^ static_cast<std::uint64_t>(index);
    Scene s = generate_scene(cfg);
    return a.downsample > 1 ? downsample_scene(s, a.downsample) : s;
  };
  Dataset ds;
  for (int i = 0; i < a.scenes; ++i) ds.train.push_back(make(i));
  for (int i = 0; i < a.test_scenes; ++i) ds.test.push_back(make(a.scenes + i));
  json cfg{{"scenes", a.scenes},   {"test_scenes", a.test_scenes},
           {"extent", a.extent},   {"count", a.count},
           {"size", a.size},       {"gap", a.gap},
           {"noise", a.noise},     {"seed", a.seed},
           {"downsample", a.downsample}};
  ds.config_json = cfg.dump();
  save_dataset(ds, a.out, a.previews);
  std::cout << "wrote " << ds.train.size() << " train + " << ds.test.size()
            << " test scenes to " << a.out << "\n";
}

struct TrainArgs {
  std::string preset_name, scale = "micro", data, out, log;
  int steps = 1000, batch = 32, checkpoint_interval = 0;
  std::size_t patches = 20000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool resume = false;
};

void run_train(const TrainArgs& a) {
  Dataset ds = load_dataset(a.data);
  auto scenes = std::make_shared<const std::vector<Scene>>(std::move(ds.train));
  PatchSet patches = sample_patches(scenes, a.patches, a.seed);

  Model model;
  OptimizerState state;
  if (a.resume) {
    std::tie(model, state) = load_checkpoint(a.out);
  } else {
    NetworkSpec spec = preset(a.preset_name, parse_scale(a.scale));
    model = init_model(spec, a.seed);
  }
  TrainConfig cfg;
  cfg.lr = static_cast<float>(a.lr);
  cfg.batch = a.batch;
  cfg.steps = a.steps;
  cfg.seed = a.seed;
  cfg.checkpoint_interval = a.checkpoint_interval;
  cfg.checkpoint_path = a.out;
  const std::int64_t start = state.step;
  const std::vector<float> losses = train(model, patches, cfg, state);
  if (!a.log.empty()) {
    std::ostringstream csv;
    std::ifstream existing(a.log);
    const bool append = a.resume && existing.good();
    if (!append) csv << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
      csv << (start + static_cast<std::int64_t>(i)) << "," << losses[i] << "\n";
    }
    if (append) {
      std::ofstream out(a.log, std::ios::binary | std::ios::app);
      out << csv.str();
    } else {
      write_text(a.log, csv.str());
    }
  }
  std::cout << "trained " << model.spec.name << " to step " << state.step
            << (losses.empty() ? "" : ", final loss " + std::to_string(losses.back()))
            << ", checkpoint " << a.out << "\n";
}

void write_map_outputs(const Tensor& map, const std::string& out) {
  write_ntsr(map, out);
  fs::path pgm(out);
  pgm.replace_extension(".pgm");
  write_pgm(map, pgm.string());
}

struct ExperimentPlan {
  json data;                        // dataset config or {"dir": ...}
  std::vector<std::string> presets;
  std::string scale = "micro";
  json train;                       // steps/lr/batch
  std::vector<std::uint64_t> seeds{0};
  json eval;                        // threshold/min_area/margin
  std::size_t patches = 20000;
  std::string out_dir;
};

ExperimentPlan parse_plan(const std::string& path) {
  const json j = json::parse(read_text(path));
  ExperimentPlan p;
  p.out_dir = j.at("out_dir").get<std::string>();
  p.presets = j.at("presets").get<std::vector<std::string>>();
  p.scale = j.value("scale", "micro");
  p.data = j.value("data", json::object());
  p.train = j.value("train", json::object());
  p.eval = j.value("eval", json::object());
  p.patches = j.value("patches", static_cast<std::size_t>(20000));
  if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  return p;
}

void run_experiment(const std::string& plan_path) {
  const ExperimentPlan plan = parse_plan(plan_path);
  fs::create_directories(plan.out_dir);

  // Data: reuse an existing directory or generate one inside out_dir.
  std::string data_dir;
  if (plan.data.contains("dir")) {
    data_dir = plan.data.at("dir").get<std::string>();
  } else {
    data_dir = (fs::path(plan.out_dir) / "data").string();
    GenDataArgs ga;
    ga.out = data_dir;
    ga.scenes = plan.data.value("scenes", 64);
    ga.test_scenes = plan.data.value("test_scenes", 16);
    ga.extent = plan.data.value("extent", 256);
    if (plan.data.contains("count")) ga.count = plan.data.at("count").get<std::vector<int>>();
    if (plan.data.contains("size")) ga.size = plan.data.at("size").get<std::vector<int>>();
    ga.gap = plan.data.value("gap", 1);
    ga.noise = plan.data.value("noise", 0.05);
    ga.seed = plan.data.value("seed", static_cast<std::uint64_t>(0));
    run_gen_data(ga);
  }
  Dataset ds = load_dataset(data_dir);
  auto train_scenes = std::make_shared<const std::vector<Scene>>(std::move(ds.train));

  TrainConfig tc;
  tc.steps = plan.train.value("steps", 1000);
  tc.lr = plan.train.value("lr", 1e-3f);
  tc.batch = plan.train.value("batch", 32);
  EvalConfig ec;
  ec.threshold = plan.eval.value("threshold", 0.5);
  ec.min_area = plan.eval.value("min_area", 4);
  ec.margin = plan.eval.value("margin", 3);

  const Scale scale = parse_scale(plan.scale);
  fs::create_directories(fs::path(plan.out_dir) / "checkpoints");
  fs::create_directories(fs::path(plan.out_dir) / "reports");

  // mean metric per preset across seeds; absent bins stay absent
  std::vector<MetricsReport> means;
  json summary;
  summary["plan"] = json::parse(read_text(plan_path));
  json runs = json::array();

  for (const std::string& name : plan.presets) {
    std::vector<MetricsReport> reports;
    for (std::uint64_t seed : plan.seeds) {
      // All presets share the seed's PatchSet; only the architecture differs.
      PatchSet patches = sample_patches(train_scenes, plan.patches, seed);
      Model model = init_model(preset(name, scale), seed);
      TrainConfig cfg = tc;
      cfg.seed = seed;
      cfg.checkpoint_path = (fs::path(plan.out_dir) / "checkpoints" /
                             (name + "-s" + std::to_string(seed) + ".ckpt")).string();
      OptimizerState state;
      train(model, patches, cfg, state);
      MetricsReport r = evaluate(model, ds.test, ec);
      r.name = name + " (seed " + std::to_string(seed) + ")";
      write_text(fs::path(plan.out_dir) / "reports" /
                     (name + "-s" + std::to_string(seed) + ".json"),
                 r.to_json());
      runs.push_back(json::parse(r.to_json()));
      reports.push_back(std::move(r));
    }
    MetricsReport mean = reports.front();
    mean.name = name;
    auto avg = [&](auto get) -> std::optional<double> {
      double sum = 0;
      for (const auto& r : reports) {
        const auto v = get(r);
        if (!v) return std::nullopt;
        sum += *v;
      }
      return sum / reports.size();
    };
    double f1 = 0;
    for (const auto& r : reports) f1 += r.pixel_f1;
    mean.pixel_f1 = f1 / reports.size();
    mean.ap_r = avg([](const MetricsReport& r) { return r.ap_r; });
    mean.ap_vol = avg([](const MetricsReport& r) { return r.ap_vol; });
    mean.ar = avg([](const MetricsReport& r) { return r.ar; });
    for (int b = 0; b < kNumBins; ++b) {
      mean.ar_bins[b] = avg([b](const MetricsReport& r) { return r.ar_bins[b]; });
    }
    means.push_back(std::move(mean));
  }

  // Comparison table and the relative-improvement CSV against the first
  // pooling baseline (front-s), when present.
  std::ostringstream table;
  for (std::size_t i = 0; i < means.size(); ++i) {
    std::istringstream rows(means[i].to_text());
    std::string header, row;
    std::getline(rows, header);
    std::getline(rows, row);
    if (i == 0) table << header << "\n";
    table << row << "\n";
  }
  write_text(fs::path(plan.out_dir) / "comparison.txt", table.str());
  std::cout << table.str();

  const MetricsReport* base = nullptr;
  for (const auto& m : means) {
    if (m.name == "front-s") base = &m;
  }
  if (base) {
    std::ostringstream csv;
    csv << means.front().csv_header() << "\n";
    auto delta = [](const std::optional<double>& a, const std::optional<double>& b)
        -> std::string {
      if (!a || !b) return "";
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", *a - *b);
      return buf;
    };
    for (const auto& m : means) {
      if (&m == base) continue;
      csv << m.name << "," << delta(m.pixel_f1, base->pixel_f1) << ","
          << delta(m.ap_r, base->ap_r) << "," << delta(m.ap_vol, base->ap_vol)
          << "," << delta(m.ar, base->ar);
      for (int b = 0; b < kNumBins; ++b) {
        csv << "," << delta(m.ar_bins[b], base->ar_bins[b]);
      }
      csv << "\n";
    }
    write_text(fs::path(plan.out_dir) / "relative.csv", csv.str());
  }

  summary["runs"] = std::move(runs);
  json mean_json = json::array();
  for (const auto& m : means) mean_json.push_back(json::parse(m.to_json()));
  summary["means"] = std::move(mean_json);
  write_text(fs::path(plan.out_dir) / "summary.json", summary.dump(2));
}

int run(int argc, char** argv) {
  CLI::App app{"dilated-convolution segmentation laboratory"};
  app.require_subcommand(1);

  // gen-data
  GenDataArgs ga;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", ga.out, "dataset directory")->required();
  gen->add_option("--scenes", ga.scenes, "training scenes");
  gen->add_option("--test-scenes", ga.test_scenes, "test scenes");
  gen->add_option("--extent", ga.extent, "scene side, pixels");
  gen->add_option("--count", ga.count, "object count range")->expected(2);
  gen->add_option("--size", ga.size, "object bbox side range")->expected(2);
  gen->add_option("--gap", ga.gap, "min Chebyshev gap between objects");
  gen->add_option("--noise", ga.noise, "texture noise amplitude");
  gen->add_option("--seed", ga.seed, "RNG seed");
  gen->add_option("--downsample", ga.downsample, "resolution factor (1, 2, 3)");
  gen->add_flag("--previews", ga.previews, "also write PGM previews");
  gen->callback([&] { run_gen_data(ga); });

  // train
  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a preset on a dataset");
  tr->add_option("--preset", ta.preset_name, "architecture preset")->required();
  tr->add_option("--scale", ta.scale, "paper|micro");
  tr->add_option("--data", ta.data, "dataset directory")->required();
  tr->add_option("--steps", ta.steps, "Adam steps");
  tr->add_option("--lr", ta.lr, "learning rate");
  tr->add_option("--batch", ta.batch, "batch size");
  tr->add_option("--seed", ta.seed, "RNG seed (init, sampling, batches)");
  tr->add_option("--patches", ta.patches, "patches to sample");
  tr->add_option("--out", ta.out, "checkpoint path")->required();
  tr->add_option("--log", ta.log, "CSV loss log path");
  tr->add_option("--checkpoint-interval", ta.checkpoint_interval,
                 "steps between periodic checkpoints (0 = end only)");
  tr->add_flag("--resume", ta.resume, "continue from the --out checkpoint");
  tr->callback([&] { run_train(ta); });

  // predict
  std::string pr_ckpt, pr_scene, pr_out;
  int pr_batch = 32;
  auto* pr = app.add_subcommand("predict", "whole-scene probability map");
  pr->add_option("--checkpoint", pr_ckpt)->required();
  pr->add_option("--scene", pr_scene, "scene image (3xHxW .ntsr)")->required();
  pr->add_option("--out", pr_out, "output map .ntsr (PGM written alongside)")->required();
  pr->add_option("--batch", pr_batch);
  pr->callback([&] {
    auto [model, state] = load_checkpoint(pr_ckpt);
    (void)state;
    const Tensor map = predict_scene(model, read_ntsr(pr_scene), pr_batch);
    write_map_outputs(map, pr_out);
    std::cout << "wrote " << pr_out << "\n";
  });

  // proposals
  std::string pp_map, pp_out, pp_scene_id;
  double pp_thr = 0.5;
  int pp_min_area = 4;
  auto* pp = app.add_subcommand("proposals", "mask proposals from a map");
  pp->add_option("--map", pp_map, "probability map .ntsr")->required();
  pp->add_option("--threshold", pp_thr);
  pp->add_option("--min-area", pp_min_area);
  pp->add_option("--scene-id", pp_scene_id);
  pp->add_option("--out", pp_out, "proposals JSON")->required();
  pp->callback([&] {
    ProposalSet set = extract_proposals(read_ntsr(pp_map), pp_thr, pp_min_area);
    set.scene_id = pp_scene_id;
    write_text(pp_out, proposals_to_json(set));
    std::cout << set.proposals.size() << " proposals -> " << pp_out << "\n";
  });

  // eval
  std::string ev_ckpt, ev_maps, ev_data, ev_out, ev_csv, ev_name;
  double ev_thr = 0.5;
  int ev_min_area = 4, ev_margin = 3, ev_batch = 32;
  auto* ev = app.add_subcommand("eval", "score a model on the test split");
  ev->add_option("--checkpoint", ev_ckpt);
  ev->add_option("--maps", ev_maps, "directory of map_%04d.ntsr (instead of a checkpoint)");
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--threshold", ev_thr);
  ev->add_option("--min-area", ev_min_area);
  ev->add_option("--margin", ev_margin);
  ev->add_option("--batch", ev_batch);
  ev->add_option("--name", ev_name, "label for the report row");
  ev->add_option("--out", ev_out, "report JSON path");
  ev->add_option("--csv", ev_csv, "CSV row path");
  ev->callback([&] {
    if (ev_ckpt.empty() == ev_maps.empty()) {
      throw CLI::ValidationError("eval", "exactly one of --checkpoint/--maps required");
    }
    Dataset ds = load_dataset(ev_data);
    EvalConfig cfg;
    cfg.threshold = ev_thr;
    cfg.min_area = ev_min_area;
    cfg.margin = ev_margin;
    cfg.batch = ev_batch;
    MetricsReport report;
    if (!ev_ckpt.empty()) {
      auto [model, state] = load_checkpoint(ev_ckpt);
      (void)state;
      report = evaluate(model, ds.test, cfg);
    } else {
      std::vector<Tensor> maps;
      for (std::size_t i = 0; i < ds.test.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "map_%04zu.ntsr", i);
        maps.push_back(read_ntsr((fs::path(ev_maps) / name).string()));
      }
      report = evaluate_maps(maps, ds.test, cfg);
    }
    if (!ev_name.empty()) report.name = ev_name;
    std::cout << report.to_text();
    if (!ev_out.empty()) write_text(ev_out, report.to_json());
    if (!ev_csv.empty()) {
      write_text(ev_csv, report.csv_header() + "\n" + report.to_csv_row() + "\n");
    }
  });

  // rf
  std::string rf_preset, rf_scale = "micro", rf_json;
  auto* rfc = app.add_subcommand("rf", "theoretical receptive-field table");
  rfc->add_option("--preset", rf_preset)->required();
  rfc->add_option("--scale", rf_scale, "paper|micro");
  rfc->add_option("--json", rf_json, "also write the report as JSON");
  rfc->callback([&] {
    const RFReport report = theoretical_rf(preset(rf_preset, parse_scale(rf_scale)));
    std::cout << report.to_text();
    if (!rf_json.empty()) write_text(rf_json, report.to_json());
  });

  // erf
  std::string erf_ckpt, erf_preset, erf_data, erf_out;
  std::uint64_t erf_seed = 0;
  int erf_patches = 256;
  auto* erf = app.add_subcommand("erf", "effective receptive field of a model");
  erf->add_option("--checkpoint", erf_ckpt, "trained model");
  erf->add_option("--preset", erf_preset, "random-init preset instead");
  erf->add_option("--seed", erf_seed, "init/input seed");
  erf->add_option("--patches", erf_patches, "patches to average");
  erf->add_option("--data", erf_data, "sample inputs from this dataset (default: noise)");
  erf->add_option("--out", erf_out, "output prefix (.ntsr/.pgm/.json)")->required();
  erf->callback([&] {
    Model model;
    if (!erf_ckpt.empty()) {
      model = load_checkpoint(erf_ckpt).first;
    } else if (!erf_preset.empty()) {
      model = init_model(preset(erf_preset, Scale::Micro), erf_seed);
    } else {
      throw CLI::ValidationError("erf", "one of --checkpoint/--preset required");
    }
    const auto P = static_cast<std::size_t>(model.spec.input_patch);
    Tensor inputs;
    if (!erf_data.empty()) {
      Dataset ds = load_dataset(erf_data);
      auto scenes = std::make_shared<const std::vector<Scene>>(std::move(ds.train));
      PatchSet ps = sample_patches(scenes, static_cast<std::size_t>(erf_patches),
                                   erf_seed, model.spec.input_patch,
                                   model.spec.supervised_center);
      inputs = ps.input_batch(0, ps.size());
    } else {
      Rng rng(erf_seed);
      inputs = Tensor::zeros({static_cast<std::size_t>(erf_patches), 3, P, P});
      for (auto& v : inputs.data) v = static_cast<float>(rng.uniform());
    }
    const ERFMap erf_result = erf_map(model, inputs);
    const RFReport rf_report = theoretical_rf(model.spec);
    write_ntsr(erf_result.map, erf_out + ".ntsr");
    write_pgm(erf_result.normalized(), erf_out + ".pgm");
    json j{{"patch_count", erf_result.patch_count},
           {"max_value", erf_result.max_value},
           {"center", {erf_result.center_y, erf_result.center_x}},
           {"theoretical_rf", rf_report.final_rf},
           {"grid_period", rf_report.grid_period}};
    if (rf_report.grid_period >= 2) {
      j["grid_score"] = grid_score(erf_result, rf_report.grid_period);
    }
    write_text(erf_out + ".json", j.dump(2));
    std::cout << "ERF over " << erf_result.patch_count << " patches -> "
              << erf_out << ".{ntsr,pgm,json}\n";
    if (j.contains("grid_score")) {
      std::cout << "grid score (period " << rf_report.grid_period
                << "): " << j["grid_score"].get<double>() << "\n";
    }
  });

  // experiment
  std::string ex_plan;
  auto* ex = app.add_subcommand("experiment", "train + evaluate a preset lineup");
  ex->add_option("--plan", ex_plan, "experiment plan JSON")->required();
  ex->callback([&] { run_experiment(ex_plan); });

  // presets
  auto* ps = app.add_subcommand("presets", "list architecture presets");
  ps->callback([&] {
    std::printf("%-22s %10s %12s\n", "preset", "layers", "params(paper)");
    for (const std::string& name : preset_names_all()) {
      const NetworkSpec spec = preset(name, Scale::Paper);
      std::printf("%-22s %10zu %12zu\n", name.c_str(), spec.all_layers().size(),
                  parameter_count(spec));
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the parse error
    if (rc == 0) return 0;
    std::cerr << app.help();
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ensure_fast_blas(argv);
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
