#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tbps/dataset.hpp"
#include "tbps/evaluator.hpp"
#include "tbps/gradcheck.hpp"
#include "tbps/plot.hpp"
#include "tbps/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tbps;

namespace {

struct Globals {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  std::vector<std::string> argv;
};

Config effective_config(const Globals& g) {
  Config cfg = make_profile(g.profile);
  for (const auto& o : g.overrides) apply_override(cfg, o);
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  require(out.good(), "cannot write " + p.string());
  out << text;
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return o.str();
}

// Timestamped directory under $TBPS_RUN_ROOT (default ./runs) holding the
// run manifest and the effective configuration.
class RunDir {
 public:
  RunDir(const std::string& command, const Globals& g, const Config& cfg) {
    const char* env = std::getenv("TBPS_RUN_ROOT");
    const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
    const std::string base = timestamp() + "-" + command;
    path_ = root / base;
    for (int k = 1; fs::exists(path_); ++k) path_ = root / (base + "-" + std::to_string(k));
    fs::create_directories(path_);
    manifest_ = {{"command", command},
                 {"argv", g.argv},
                 {"profile", g.profile},
                 {"seed", g.seed},
                 {"config_hash", config_hash(cfg)},
                 {"started", timestamp()},
                 {"outputs", json::object()}};
    write_text(path_ / "effective_config.json", to_json(cfg).dump(1) + "\n");
    save();
  }

  const fs::path& path() const { return path_; }
  void output(const std::string& key, const fs::path& p) {
    manifest_["outputs"][key] = p.string();
    save();
  }
  void finish(int status) {
    manifest_["finished"] = timestamp();
    manifest_["exit_code"] = status;
    save();
  }

 private:
  void save() const { write_text(path_ / "manifest.json", manifest_.dump(1) + "\n"); }

  fs::path path_;
  json manifest_;
};

DatasetSplit dataset_for(const std::string& data_dir, const Config& cfg, std::uint64_t seed) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return generate_dataset(cfg.data, seed);
}

std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> sizes;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      require(used == item.size(), "");
      sizes.push_back(v);
    } catch (const std::exception&) {
      throw Error("invalid gallery size '" + item + "'");
    }
  }
  require(!sizes.empty(), "no gallery sizes given");
  return sizes;
}

json report_json(const MetricReport& r) {
  json cmc = json::object(), rcmc = json::object();
  for (const auto& [k, v] : r.cmc) cmc[std::to_string(k)] = v;
  for (const auto& [k, v] : r.random_cmc) rcmc[std::to_string(k)] = v;
  return {{"gallery_size", r.gallery_size}, {"queries", r.queries}, {"map", r.map},
          {"cmc", cmc},                     {"random_map", r.random_map}, {"random_cmc", rcmc}};
}

void write_results_csv(const fs::path& p, const std::vector<RankedResult>& results,
                       const std::vector<std::vector<GtBox>>& gt, double iou_threshold, int top) {
  std::ofstream out(p);
  require(out.good(), "cannot write " + p.string());
  out << "query_id,rank,scene_id,x1,y1,x2,y2,score,correct\n";
  out << std::setprecision(10);
  for (std::size_t q = 0; q < results.size(); ++q) {
    const QueryOutcome o = evaluate_query(results[q], gt[q], iou_threshold);
    const std::size_t n = top > 0 ? std::min<std::size_t>(top, results[q].entries.size()) : results[q].entries.size();
    for (std::size_t r = 0; r < n; ++r) {
      const RankedEntry& e = results[q].entries[r];
      out << results[q].query << ',' << r + 1 << ',' << e.scene << ',' << e.box.x1 << ',' << e.box.y1 << ','
          << e.box.x2 << ',' << e.box.y2 << ',' << e.score << ',' << (o.correct[r] ? 1 : 0) << '\n';
    }
  }
}

// ---- commands ----

int cmd_synth(const Globals& g, const std::string& out_dir) {
  const Config cfg = effective_config(g);
  RunDir run("synth", g, cfg);
  const fs::path out = out_dir.empty() ? run.path() / "dataset" : fs::path(out_dir);
  const DatasetSplit split = generate_dataset(cfg.data, g.seed);
  write_dataset(split, out);
  run.output("dataset", out);
  std::cout << "wrote " << split.train.size() << " train scenes, " << split.gallery.size() << " gallery scenes, "
            << split.queries.size() << " queries to " << out.string() << "\n";
  run.finish(0);
  return 0;
}

struct TrainArgs {
  std::string data, out;
  bool ablate_sdrpn = false, ablate_csal = false, resume = false, plot = false;
  int epochs = 0;
};

int cmd_train(Globals g, const TrainArgs& a) {
  if (a.ablate_sdrpn) g.overrides.push_back("model.sdrpn=false");
  if (a.ablate_csal) {
    g.overrides.push_back("loss.csal=0");
    g.overrides.push_back("eval.rank_mode=global");
  }
  if (a.epochs > 0) g.overrides.push_back("train.epochs=" + std::to_string(a.epochs));
  const Config cfg = effective_config(g);
  require(!a.resume || !a.out.empty(), "--resume needs --out pointing at the interrupted run");
  RunDir run("train", g, cfg);
  const DatasetSplit data = dataset_for(a.data, cfg, g.seed);
  TrainOptions opts;
  opts.out_dir = a.out.empty() ? run.path() : fs::path(a.out);
  opts.resume = a.resume;
  const auto t0 = std::chrono::steady_clock::now();
  opts.on_step = [&](const StepRecord& r) {
    if (r.step % 25 != 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << r.epoch << " step " << r.step << " loss " << r.total << " (" << std::fixed
              << std::setprecision(1) << secs << "s)" << std::defaultfloat << std::setprecision(6) << std::endl;
  };
  const TrainResult res = train(cfg, data, g.seed, opts);
  run.output("checkpoint", opts.out_dir);
  run.output("losses", opts.out_dir / "losses.csv");
  if (a.plot && !res.log.empty()) {
    std::vector<Series> series;
    const auto names = loss_names();
    for (int t = 0; t <= kLossTerms; ++t) {
      Series s{t < kLossTerms ? names[t] : "total", {}, {}};
      for (const auto& r : res.log) {
        s.x.push_back(static_cast<double>(r.step));
        s.y.push_back(t < kLossTerms ? r.terms[t] : r.total);
      }
      series.push_back(std::move(s));
    }
    const fs::path svg = run.path() / "losses.svg";
    write_text(svg, line_chart_svg("training losses", "step", "loss", series, true));
    run.output("loss_plot", svg);
  }
  std::cout << "trained " << res.epochs_completed << " epochs; checkpoint in " << opts.out_dir.string() << "\n";
  run.finish(0);
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, out, sizes;
  bool plot = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const Model model = load_checkpoint(a.checkpoint);
  const Config& cfg = model.config;
  RunDir run("eval", g, cfg);
  const fs::path out = a.out.empty() ? run.path() : fs::path(a.out);
  fs::create_directories(out);
  const DatasetSplit data = dataset_for(a.data, cfg, read_manifest(a.checkpoint).at("seed").get<std::uint64_t>());
  const std::vector<int> sizes =
      a.sizes.empty() ? std::vector<int>{cfg.eval.gallery_size} : parse_sizes(a.sizes);
  SearchEngine engine(model, data.gallery);
  const SweepOutput sweep = gallery_sweep(engine, data, sizes, g.seed, cfg.eval.iou);
  json reports = json::array();
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const MetricReport& r = sweep.reports[i];
    reports.push_back(report_json(r));
    const fs::path csv = out / ("results_g" + std::to_string(r.gallery_size) + ".csv");
    write_results_csv(csv, sweep.results[i], sweep.gt[i], cfg.eval.iou, 0);
    run.output("results_g" + std::to_string(r.gallery_size), csv);
    std::cout << "gallery " << r.gallery_size << ": mAP " << r.map << " cmc@1 " << r.cmc.at(1) << " cmc@5 "
              << r.cmc.at(5) << " cmc@10 " << r.cmc.at(10) << " (random mAP " << r.random_map << ", cmc@1 "
              << r.random_cmc.at(1) << ")\n";
  }
  const json doc = {{"checkpoint", a.checkpoint}, {"seed", g.seed}, {"reports", reports}};
  write_text(out / "report.json", doc.dump(1) + "\n");
  run.output("report", out / "report.json");
  if (a.plot) {
    std::vector<Series> cmc;
    for (const auto& r : sweep.reports) {
      Series s{"gallery " + std::to_string(r.gallery_size), {}, {}};
      for (const auto& [k, v] : r.cmc) {
        s.x.push_back(k);
        s.y.push_back(v);
      }
      cmc.push_back(std::move(s));
    }
    write_text(out / "cmc.svg", line_chart_svg("CMC", "rank K", "cmc@K", cmc));
    Series map{"mAP", {}, {}}, rnd{"random mAP", {}, {}};
    for (const auto& r : sweep.reports) {
      map.x.push_back(r.gallery_size);
      map.y.push_back(r.map);
      rnd.x.push_back(r.gallery_size);
      rnd.y.push_back(r.random_map);
    }
    write_text(out / "map_vs_gallery.svg", line_chart_svg("mAP by gallery size", "gallery size", "mAP", {map, rnd}));
    run.output("cmc_plot", out / "cmc.svg");
    run.output("map_plot", out / "map_vs_gallery.svg");
  }
  run.finish(0);
  return 0;
}

struct SearchArgs {
  std::string data, checkpoint, out, query;
  int top = 10;
};

// Gallery persons whose attributes agree with every attribute the query names.
// Descriptions outside the caption grammar match nobody.
std::vector<GtBox> matching_persons(const DatasetSplit& data, const std::string& query) {
  Attributes want;
  try {
    want = parse_caption(query);
  } catch (const Error&) {
    std::cerr << "note: query does not follow the caption grammar; no ground truth is marked\n";
    return {};
  }
  std::vector<GtBox> gt;
  for (std::size_t s = 0; s < data.gallery.size(); ++s)
    for (const auto& p : data.gallery[s].persons) {
      const Attributes& have = p.identity.attributes;
      auto ok = [](const std::string& w, const std::string& h) { return w.empty() || w == h; };
      if (ok(want.shirt, have.shirt) && ok(want.pants, have.pants) && ok(want.accessory, have.accessory) &&
          ok(want.accessory_color, have.accessory_color) && ok(want.build, have.build))
        gt.push_back({static_cast<int>(s), p.box});
    }
  return gt;
}

int cmd_search(const Globals& g, const SearchArgs& a) {
  require(a.top > 0, "--top must be positive");
  const Model model = load_checkpoint(a.checkpoint);
  RunDir run("search", g, model.config);
  const fs::path out = a.out.empty() ? run.path() : fs::path(a.out);
  fs::create_directories(out);
  const DatasetSplit data =
      dataset_for(a.data, model.config, read_manifest(a.checkpoint).at("seed").get<std::uint64_t>());
  SearchEngine engine(model, data.gallery);
  std::vector<int> scenes(data.gallery.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) scenes[i] = static_cast<int>(i);
  const RankedResult result = engine.search(0, engine.encode_query(a.query), scenes);
  std::vector<GtBox> gt = matching_persons(data, a.query);
  // Rows of an unmatched description are all marked incorrect.
  if (gt.empty()) gt.push_back({-1, BBox{}});
  const fs::path csv = out / "results.csv";
  write_results_csv(csv, {result}, {gt}, model.config.eval.iou, a.top);
  run.output("results", csv);
  std::ifstream in(csv);
  std::cout << in.rdbuf();
  run.finish(0);
  return 0;
}

int cmd_gradcheck(const Globals& g, const GradCheckOptions& base) {
  GradCheckOptions opts = base;
  opts.seed = g.seed;
  const auto rows = run_gradcheck(opts);
  bool ok = true;
  std::cout << std::left << std::setw(20) << "check" << std::setw(11) << "instances" << std::setw(9) << "redraws"
            << std::setw(16) << "max_rel_error" << "status\n";
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(20) << r.name << std::setw(11) << r.instances << std::setw(9) << r.redraws
              << std::setw(16) << std::setprecision(3) << std::scientific << r.max_rel_error << std::defaultfloat
              << (r.pass ? "pass" : "FAIL") << "\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.push_back(argv[i]);

  CLI::App app{"Text-based person search: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--profile", g.profile, "Configuration profile (desk or paper)")->capture_default_str();
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();

  auto add_overrides = [&](CLI::App* sub) {
    sub->add_option("overrides", g.overrides, "Configuration overrides, key=value");
  };

  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  synth->add_option("--out", synth_out, "Output directory (default: inside the run directory)");
  add_overrides(synth);

  TrainArgs ta;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", ta.data, "Dataset directory (default: synthesize in memory)");
  train_cmd->add_option("--out", ta.out, "Checkpoint directory (default: the run directory)");
  train_cmd->add_flag("--ablate-sdrpn", ta.ablate_sdrpn, "Disable the semantic-driven proposal branch");
  train_cmd->add_flag("--ablate-csal", ta.ablate_csal, "Drop the cross-scale alignment loss");
  train_cmd->add_flag("--resume", ta.resume, "Continue from the last checkpoint in --out");
  train_cmd->add_option("--epochs", ta.epochs, "Override the epoch count")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--plot", ta.plot, "Write an SVG loss curve");
  add_overrides(train_cmd);

  EvalArgs ea;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Training output directory")->required();
  eval->add_option("--data", ea.data, "Dataset directory (default: regenerate from the checkpoint)");
  eval->add_option("--gallery-sizes", ea.sizes, "Comma-separated gallery sizes");
  eval->add_option("--out", ea.out, "Output directory (default: the run directory)");
  eval->add_flag("--plot", ea.plot, "Write SVG CMC and mAP curves");

  SearchArgs sa;
  CLI::App* search = app.add_subcommand("search", "Rank gallery detections for one description");
  search->add_option("--checkpoint", sa.checkpoint, "Training output directory")->required();
  search->add_option("--query", sa.query, "Text description")->required();
  search->add_option("--top", sa.top, "Rows to emit")->capture_default_str();
  search->add_option("--data", sa.data, "Dataset directory (default: regenerate from the checkpoint)");
  search->add_option("--out", sa.out, "Output directory (default: the run directory)");

  GradCheckOptions go;
  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable operation");
  grad->add_option("--instances", go.instances, "Random instances per check")->capture_default_str();
  grad->add_option("--tolerance", go.tolerance, "Maximum relative error")->capture_default_str();
  grad->add_option("--only", go.only, "Restrict to the named checks");
  grad->add_option("--inject-fault", go.fault, "Corrupt the analytic gradient of one check")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return cmd_synth(g, synth_out);
    if (*train_cmd) return cmd_train(g, ta);
    if (*eval) return cmd_eval(g, ea);
    if (*search) return cmd_search(g, sa);
    if (*grad) return cmd_gradcheck(g, go);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
