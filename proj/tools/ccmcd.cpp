// Command-line front end: generate streams, train, fit, detect, report, and
// run the Delaunay grid.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ccmcd/experiment.hpp"

namespace fs = std::filesystem;
using namespace ccmcd;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kDivergence = 3, kCalibration = 4, kGeometry = 5 };

struct ModelFlags {
  std::string ensemble = "M*";
  int latent_dim = 2;
  std::string conv = "gcn";
  std::string disc = "geom";
  bool batch_norm = false;
  double dropout = 0.0;
  double lr = 1e-3;
  int epochs = desk_training().max_epochs;
  int patience = desk_training().patience;
  std::size_t batch_size = 128;
  bool no_normalize = false;

  void add(CLI::App* app) {
    app->add_option("--ensemble", ensemble, "latent members: M*, names or curvatures, comma separated")
        ->capture_default_str();
    app->add_option("--latent-dim", latent_dim, "dimension d of every member")->capture_default_str();
    app->add_option("--conv", conv, "ecc or gcn")->capture_default_str();
    app->add_option("--disc", disc, "geom or prior")->capture_default_str();
    app->add_flag("--batch-norm", batch_norm);
    app->add_option("--dropout", dropout)->capture_default_str();
    app->add_option("--lr", lr)->capture_default_str();
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--patience", patience)->capture_default_str();
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_flag("--no-normalize", no_normalize, "train on raw attributes");
  }

  ModelConfig model() const {
    ModelConfig m = desk_model();
    m.encoder.ensemble = ccm_ensemble(ensemble, latent_dim);
    m.encoder.conv_kind = parse_conv_kind(conv);
    m.encoder.batch_norm = batch_norm;
    m.encoder.dropout_rate = dropout;
    m.discriminator = parse_discriminator_kind(disc);
    m.learning_rate = lr;
    return m;
  }

  TrainOptions training() const {
    TrainOptions t = desk_training();
    t.max_epochs = epochs;
    t.patience = patience;
    t.batch_size = batch_size;
    return t;
  }
};

struct DetectorFlags {
  std::string variant = "R-CDT";
  double alpha = 0.01;
  std::size_t window = 5;
  double q_quantile = 0.75;
  std::string calibration = "chi2";
  std::size_t mc_runs = 100'000;

  void add(CLI::App* app) {
    app->add_option("--cdt", variant, "D-CDT or R-CDT")->capture_default_str();
    app->add_option("--alpha", alpha)->capture_default_str();
    app->add_option("--window", window, "window size n; 0 picks ceil(0.001 |train|)")->capture_default_str();
    app->add_option("--q-quantile", q_quantile)->capture_default_str();
    app->add_option("--calibration", calibration, "chi2 or empirical")->capture_default_str();
    app->add_option("--mc-runs", mc_runs)->capture_default_str();
  }

  DetectorConfig config() const {
    DetectorConfig d = desk_detector();
    d.variant = parse_cdt_variant(variant);
    d.alpha = alpha;
    d.window_n = window ? std::optional<std::size_t>(window) : std::nullopt;
    d.q_quantile = q_quantile;
    d.calibration = parse_calibration_mode(calibration);
    d.mc_runs = mc_runs;
    return d;
  }
};

struct StreamFlags {
  int change_class = 2;
  std::size_t n_train = desk_benchmark().n_train;
  std::size_t n_operational = desk_benchmark().n_operational;
  std::size_t tau = desk_benchmark().tau;
  std::size_t order = desk_benchmark().order;
  double noise_std = 1.0;

  void add(CLI::App* app) {
    app->add_option("--class", change_class, "Delaunay class after the change (0: no change)")->capture_default_str();
    app->add_option("--n-train", n_train)->capture_default_str();
    app->add_option("--n-operational", n_operational)->capture_default_str();
    app->add_option("--tau", tau, "change index in the operational stream")->capture_default_str();
    app->add_option("--order", order, "nodes per graph")->capture_default_str();
    app->add_option("--noise-std", noise_std)->capture_default_str();
  }

  BenchmarkOptions options() const {
    BenchmarkOptions b;
    b.change_class = change_class;
    b.n_train = n_train;
    b.n_operational = n_operational;
    b.tau = tau;
    b.order = order;
    b.noise_std = noise_std;
    return b;
  }
};

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

/// Alarm windows from a trace file written by `detect`.
std::vector<std::size_t> alarms_from_trace(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line != "window_index,member,s_w,S_w,alarm") throw IoError(path + " is not a trace file");
  std::vector<std::size_t> alarms;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != 5) throw IoError("corrupt trace line: " + line);
    const std::size_t w = std::stoul(cells[0]);
    if (cells[4] == "1" && (alarms.empty() || alarms.back() != w)) alarms.push_back(w);
  }
  return alarms;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Change detection in graph streams with constant-curvature autoencoders"};
  app.set_config("--config", "", "TOML file; sections name subcommands");
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "experiment seed")->capture_default_str();

  // gen-stream
  auto* gen = app.add_subcommand("gen-stream", "write a Delaunay benchmark stream pair");
  StreamFlags gen_flags;
  gen_flags.add(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory (train.jsonl, operational.jsonl)")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the autoencoder on a nominal stream");
  ModelFlags tr_flags;
  tr_flags.add(tr);
  std::string tr_stream, tr_out;
  tr->add_option("--stream", tr_stream, "training stream (.jsonl)")->required();
  tr->add_option("--out", tr_out, "model checkpoint")->required();

  // fit-detector
  auto* fit = app.add_subcommand("fit-detector", "configure the CUSUM test on training embeddings");
  DetectorFlags fit_flags;
  fit_flags.add(fit);
  std::string fit_model, fit_stream, fit_out;
  fit->add_option("--model", fit_model)->required();
  fit->add_option("--stream", fit_stream, "nominal training stream")->required();
  fit->add_option("--out", fit_out, "detector checkpoint")->required();

  // detect
  auto* det = app.add_subcommand("detect", "run a detector over an operational stream");
  std::string det_model, det_detector, det_stream, det_trace, det_plot;
  det->add_option("--model", det_model)->required();
  det->add_option("--detector", det_detector)->required();
  det->add_option("--stream", det_stream)->required();
  det->add_option("--trace", det_trace, "trace CSV")->required();
  det->add_option("--plot", det_plot, "plot-data CSV (adds the threshold column)");

  // report
  auto* rep = app.add_subcommand("report", "run lengths and AUC_RL from a trace");
  std::string rep_trace, rep_detector, rep_stream, rep_out;
  std::size_t rep_tau = 0;
  rep->add_option("--trace", rep_trace)->required();
  rep->add_option("--detector", rep_detector)->required();
  auto* rep_stream_opt = rep->add_option("--stream", rep_stream, "operational stream (for tau and the change flag)");
  rep->add_option("--tau", rep_tau, "change index when no stream is given")->excludes(rep_stream_opt);
  rep->add_option("--out", rep_out, "report JSON (stdout if unset)");

  // run
  auto* run = app.add_subcommand("run", "full pipeline into an output directory");
  StreamFlags run_stream;
  run_stream.add(run);
  ModelFlags run_model;
  run_model.add(run);
  DetectorFlags run_det;
  run_det.add(run);
  std::string run_train, run_op, run_out;
  run->add_option("--train-stream", run_train, "training stream file instead of the benchmark");
  run->add_option("--operational-stream", run_op, "operational stream file instead of the benchmark");
  run->add_option("--out", run_out, "artifact directory")->required();

  // table1
  auto* tab = app.add_subcommand("table1", "Delaunay grid: ccm x cdt x discriminator per class");
  StreamFlags tab_stream;
  tab_stream.add(tab);
  ModelFlags tab_model;
  tab_model.add(tab);
  DetectorFlags tab_det;
  tab_det.add(tab);
  std::string tab_classes = "2,4,8,12,16,20", tab_seeds = "0,1,2,3,4", tab_ccms = "M*,M-1,M0,M1";
  std::string tab_cdts = "D-CDT,R-CDT", tab_discs = "geom,prior", tab_out, tab_seeds_out;
  unsigned threads = 1;
  tab->add_option("--classes", tab_classes)->capture_default_str();
  tab->add_option("--seeds", tab_seeds)->capture_default_str();
  tab->add_option("--ccms", tab_ccms)->capture_default_str();
  tab->add_option("--cdts", tab_cdts)->capture_default_str();
  tab->add_option("--discriminators", tab_discs)->capture_default_str();
  tab->add_option("--threads", threads)->capture_default_str();
  tab->add_option("--out", tab_out, "median AUC_RL table (CSV)")->required();
  tab->add_option("--seeds-out", tab_seeds_out, "per-seed results (CSV)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      BenchmarkStreams s = make_benchmark_stream(gen_flags.options(), derive_seed(seed, "stream"));
      fs::create_directories(gen_out);
      write_stream((fs::path(gen_out) / "train.jsonl").string(), s.train);
      write_stream((fs::path(gen_out) / "operational.jsonl").string(), s.operational);
    } else if (*tr) {
      const GraphStream train = read_stream(tr_stream);
      TrainHistory h;
      AutoencoderModel m =
          train_model(tr_flags.model(), tr_flags.training(), train, !tr_flags.no_normalize, seed, &h);
      ensure_parent(tr_out);
      save_model(tr_out, m);
      std::cerr << "trained " << h.epochs.size() << " epochs, best epoch " << h.best_epoch << ", validation loss "
                << h.best_val_loss << '\n';
    } else if (*fit) {
      AutoencoderModel m = load_model(fit_model);
      const TrainedDetector d =
          fit_detector(seeded(fit_flags.config(), seed), m.ensemble(), embed(m, read_stream(fit_stream)));
      ensure_parent(fit_out);
      save_detector(fit_out, d);
      for (std::size_t t = 0; t < d.tests.size(); ++t) {
        std::cerr << "test " << t << ": dof " << d.tests[t].dof() << ", q " << d.tests[t].q << ", h " << d.tests[t].h
                  << '\n';
      }
    } else if (*det) {
      AutoencoderModel m = load_model(det_model);
      const TrainedDetector d = load_detector(det_detector);
      const DetectionRun r = process_stream(d, embed(m, read_stream(det_stream)));
      ensure_parent(det_trace);
      std::ofstream os(det_trace);
      if (!os) throw IoError("cannot write " + det_trace);
      write_trace_csv(os, r.trace);
      if (!det_plot.empty()) export_plot_data(det_plot, r.trace, d);
      std::cerr << r.state.windows << " windows, " << r.state.alarms.size() << " alarms\n";
    } else if (*rep) {
      const TrainedDetector d = load_detector(rep_detector);
      DetectionRun r;
      r.state.alarms = alarms_from_trace(rep_trace);
      r.state.tau_hat = estimate_change_point(r.state.alarms, d.n);
      bool change = true;
      std::size_t tau = rep_tau;
      if (!rep_stream.empty()) {
        const GraphStream s = read_stream(rep_stream);
        change = s.change;
        tau = s.tau.value_or(s.size());
        r.state.windows = s.size() / d.n;
      } else if (rep_tau == 0) {
        throw ConfigError("report needs --stream or --tau");
      }
      nlohmann::json j = report_to_json(summarize(r, d.n, tau, change, seed));
      if (rep_stream.empty()) j.erase("windows");
      if (rep_out.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        write_json(rep_out, j);
      }
    } else if (*run) {
      ExperimentConfig c;
      c.train_stream = run_train;
      c.operational_stream = run_op;
      c.benchmark = run_stream.options();
      c.normalize = !run_model.no_normalize;
      c.model = run_model.model();
      c.training = run_model.training();
      c.detector = run_det.config();
      c.seed = seed;
      c.out_dir = run_out;
      c.log = log_line;
      const ExperimentResult r = run_experiment(c);
      std::cout << report_to_json(r.report).dump(2) << '\n';
    } else if (*tab) {
      Table1Config c;
      c.classes.clear();
      for (const auto& s : split(tab_classes)) c.classes.push_back(std::stoi(s));
      c.seeds.clear();
      for (const auto& s : split(tab_seeds)) c.seeds.push_back(std::stoull(s));
      c.ccms = split(tab_ccms);
      c.variants.clear();
      for (const auto& s : split(tab_cdts)) c.variants.push_back(parse_cdt_variant(s));
      c.discriminators.clear();
      for (const auto& s : split(tab_discs)) c.discriminators.push_back(parse_discriminator_kind(s));
      c.base.benchmark = tab_stream.options();
      c.base.normalize = !tab_model.no_normalize;
      c.base.model = tab_model.model();
      c.base.training = tab_model.training();
      c.base.detector = tab_det.config();
      c.base.log = log_line;
      c.latent_dim = tab_model.latent_dim;
      c.threads = threads;
      const Table1Result r = replicate_table1(c);
      ensure_parent(tab_out);
      std::ofstream os(tab_out);
      if (!os) throw IoError("cannot write " + tab_out);
      write_table1_csv(os, r);
      if (!tab_seeds_out.empty()) {
        ensure_parent(tab_seeds_out);
        std::ofstream ss(tab_seeds_out);
        write_table1_seeds_csv(ss, r);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const CalibrationError& e) {
    std::cerr << "calibration failed: " << e.what() << '\n';
    return kCalibration;
  } catch (const GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << '\n';
    return kGeometry;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: bad number: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
