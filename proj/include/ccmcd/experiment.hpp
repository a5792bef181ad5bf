#pragma once

// End-to-end pipeline: stream -> autoencoder -> detector -> report, plus the
// Delaunay benchmark grid.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ccmcd/cdt.hpp"
#include "ccmcd/delaunay.hpp"
#include "ccmcd/metrics.hpp"
#include "ccmcd/neural.hpp"

namespace ccmcd {

using Logger = std::function<void(const std::string&)>;

/// Desk-scale benchmark sizes (full scale: 5000 / 20000 / 10000).
inline BenchmarkOptions desk_benchmark() {
  BenchmarkOptions b;
  b.n_train = 1000;
  b.n_operational = 4000;
  b.tau = 2000;
  b.order = 7;
  return b;
}

inline ModelConfig desk_model() {
  ModelConfig m;
  m.encoder.conv_kind = ConvKind::gcn;  // Delaunay graphs carry no edge attributes
  return m;
}

inline TrainOptions desk_training() {
  TrainOptions t;
  t.max_epochs = 40;
  t.patience = 10;
  return t;
}

inline DetectorConfig desk_detector() {
  DetectorConfig d;
  d.window_n = 5;
  return d;
}

struct ExperimentConfig {
  // Streams come from .jsonl files when both paths are set, else from the
  // synthetic benchmark.
  std::string train_stream;
  std::string operational_stream;
  BenchmarkOptions benchmark = desk_benchmark();
  bool normalize = true;
  ModelConfig model = desk_model();  // shape fields are filled from the data
  TrainOptions training = desk_training();
  DetectorConfig detector = desk_detector();
  std::uint64_t seed = 0;
  std::string out_dir;  // empty: keep everything in memory
  Logger log;

  void validate() const {
    if (train_stream.empty() != operational_stream.empty()) {
      throw ConfigError("set both the training and the operational stream files, or neither");
    }
    detector.validate();
  }
};

/// Ensemble labels of the benchmark grid: M* (all three), M-1, M0, M1.
inline Ensemble ccm_ensemble(const std::string& label, int dim = 2) {
  return parse_ensemble(label, dim);
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Pipeline pieces.

/// Sets the input-dependent fields of the model configuration.
inline ModelConfig shape_model(ModelConfig m, const GraphStream& train) {
  if (train.empty()) throw ConfigError("training stream is empty");
  m.max_nodes = static_cast<int>(train.max_order());
  m.node_features = static_cast<int>(train[0].X.cols());
  m.edge_features = static_cast<int>(train[0].E.cols());
  return m;
}

inline GraphStream prepare_stream(const AutoencoderModel& model, const GraphStream& s) {
  return model.moments ? model.moments->apply(s) : s;
}

/// Trains on the nominal stream; the returned model carries the
/// normalisation it was trained with.
inline AutoencoderModel train_model(const ModelConfig& shape, const TrainOptions& opt, const GraphStream& train,
                                    bool normalize, std::uint64_t seed, TrainHistory* history = nullptr) {
  AutoencoderModel model(shape_model(shape, train), derive_seed(seed, "model"));
  if (normalize) model.moments = fit_moments(train);
  const TrainHistory h = ccmcd::train(model, prepare_stream(model, train), opt);
  if (history) *history = h;
  return model;
}

inline std::vector<Embedding> embed(AutoencoderModel& model, const GraphStream& s) {
  return model.encode(prepare_stream(model, s));
}

inline DetectorConfig seeded(DetectorConfig d, std::uint64_t seed) {
  d.seed = derive_seed(seed, "detector");
  return d;
}

struct StreamReport {
  std::optional<double> auc_rl;
  std::string auc_status = "ok";  // or why it is undefined
  std::optional<double> arl_nominal;
  std::optional<double> arl_nonnominal;
  std::optional<std::size_t> tau_hat;
  std::size_t n_alarms = 0;
  std::size_t windows = 0;
  std::size_t boundary_window = 0;
  bool ground_truth_change = false;
  std::size_t tau = 0;
  std::uint64_t seed = 0;
  RunLengthSample run_lengths;
};

/// Run-length summary of a detection run against the change (or, on a null
/// stream, pseudo-change) index tau.
inline StreamReport summarize(const DetectionRun& run, std::size_t n, std::size_t tau, bool change, std::uint64_t seed) {
  StreamReport r;
  r.tau = tau;
  r.seed = seed;
  r.ground_truth_change = change;
  r.windows = run.state.windows;
  r.n_alarms = run.state.alarms.size();
  r.tau_hat = run.state.tau_hat;
  r.boundary_window = boundary_window(tau, n);
  r.run_lengths = run_lengths(run.state.alarms, r.boundary_window);
  try {
    r.auc_rl = auc_rl(r.run_lengths);
  } catch (const UndefinedMetricError& e) {
    r.auc_status = std::string("undefined: ") + e.what();
  }
  if (!r.run_lengths.nominal.empty()) r.arl_nominal = average_run_length(r.run_lengths.nominal);
  if (!r.run_lengths.nonnominal.empty()) r.arl_nonnominal = average_run_length(r.run_lengths.nonnominal);
  return r;
}

inline std::vector<std::size_t> as_counts(const std::vector<double>& v) {
  return std::vector<std::size_t>(v.begin(), v.end());
}

inline nlohmann::json report_to_json(const StreamReport& r) {
  auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"auc_rl", opt(r.auc_rl)},
          {"auc_rl_status", r.auc_status},
          {"arl_nominal", opt(r.arl_nominal)},
          {"arl_nonnominal", opt(r.arl_nonnominal)},
          {"tau_hat", opt(r.tau_hat)},
          {"n_alarms", r.n_alarms},
          {"windows", r.windows},
          {"boundary_window", r.boundary_window},
          {"tau", r.tau},
          {"ground_truth_change", r.ground_truth_change},
          {"note", r.ground_truth_change ? "" : "no ground-truth change; tau is a pseudo-boundary"},
          {"seed", r.seed},
          {"nominal_run_lengths", as_counts(r.run_lengths.nominal)},
          {"nonnominal_run_lengths", as_counts(r.run_lengths.nonnominal)}};
}

/// window, member, s_w, S_w, h, alarm; one row per window and test.
inline void write_plot_data(std::ostream& os, const std::vector<TraceRow>& trace, const TrainedDetector& d) {
  os << "window,member,s_w,S_w,h,alarm\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%d\n", r.window, r.member, r.s, r.S, d.tests[r.member].h,
                  r.alarm ? 1 : 0);
    os << buf;
  }
}

inline void export_plot_data(const std::string& path, const std::vector<TraceRow>& trace, const TrainedDetector& d) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_plot_data(os, trace, d);
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << '\n';
}

struct ExperimentStreams {
  GraphStream train;
  GraphStream operational;
};

inline ExperimentStreams load_streams(const ExperimentConfig& c) {
  if (!c.train_stream.empty()) return {read_stream(c.train_stream), read_stream(c.operational_stream)};
  BenchmarkStreams b = make_benchmark_stream(c.benchmark, derive_seed(c.seed, "stream"));
  return {std::move(b.train), std::move(b.operational)};
}

struct ExperimentResult {
  StreamReport report;
  TrainHistory history;
  DetectionRun run;
};

/// Full pipeline. Artifacts (model.json, detector.json, trace.csv,
/// plot_data.csv, report.json) go to out_dir when it is set. On failure
/// report.json records the failing stage and the error is rethrown.
inline ExperimentResult run_experiment(const ExperimentConfig& c) {
  const bool write = !c.out_dir.empty();
  const std::filesystem::path dir(c.out_dir);
  std::string stage = "config";
  auto enter = [&](const std::string& s) {
    stage = s;
    if (c.log) c.log("[" + s + "]");
  };
  try {
    c.validate();
    if (write) std::filesystem::create_directories(dir);
    enter("stream");
    const ExperimentStreams streams = load_streams(c);
    enter("train");
    ExperimentResult out;
    AutoencoderModel model =
        train_model(c.model, c.training, streams.train, c.normalize, c.seed, &out.history);
    if (write) save_model((dir / "model.json").string(), model);
    enter("fit-detector");
    // The detector sees the nominal training stream only.
    const TrainedDetector detector =
        fit_detector(seeded(c.detector, c.seed), model.ensemble(), embed(model, streams.train));
    if (write) save_detector((dir / "detector.json").string(), detector);
    enter("detect");
    out.run = process_stream(detector, embed(model, streams.operational));
    enter("report");
    const std::size_t tau = streams.operational.tau.value_or(streams.operational.size());
    out.report = summarize(out.run, detector.n, tau, streams.operational.change, c.seed);
    if (write) {
      std::ofstream trace(dir / "trace.csv");
      write_trace_csv(trace, out.run.trace);
      export_plot_data((dir / "plot_data.csv").string(), out.run.trace, detector);
      nlohmann::json j = report_to_json(out.report);
      j["status"] = "complete";
      j["config"] = experiment_config_to_json(c);
      j["config"]["model"] = model_config_to_json(model.config());
      j["training"] = {{"epochs", out.history.epochs.size()},
                       {"best_epoch", out.history.best_epoch},
                       {"best_val_loss", out.history.best_val_loss}};
      j["lineage"] = {{"model", "training stream"},
                      {"detector", "training stream embeddings"},
                      {"trace", "operational stream"}};
      write_json((dir / "report.json").string(), j);
    }
    return out;
  } catch (const std::exception& e) {
    if (c.log) c.log("stage '" + stage + "' failed: " + e.what());
    if (write) {
      std::error_code ec;
      std::filesystem::create_directories(dir, ec);
      std::ofstream os(dir / "report.json");
      os << nlohmann::json{{"status", "failed"}, {"stage", stage}, {"error", e.what()},
                           {"note", "artifacts in this directory may be partial"}}
                .dump(2)
         << '\n';
    }
    throw;
  }
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  if (c.train_stream.empty()) {
    j["stream"] = {{"source", "delaunay"},
                   {"class", c.benchmark.change_class},
                   {"n_train", c.benchmark.n_train},
                   {"n_operational", c.benchmark.n_operational},
                   {"tau", c.benchmark.tau},
                   {"order", c.benchmark.order}};
  } else {
    j["stream"] = {{"source", "files"}, {"train", c.train_stream}, {"operational", c.operational_stream}};
  }
  j["normalize"] = c.normalize;
  j["model"] = model_config_to_json(c.model);
  j["training"] = {{"val_fraction", c.training.val_fraction},
                   {"patience", c.training.patience},
                   {"max_epochs", c.training.max_epochs},
                   {"batch_size", c.training.batch_size}};
  j["detector"] = {{"alpha", c.detector.alpha},
                   {"window_n", c.detector.window_n ? nlohmann::json(*c.detector.window_n) : nlohmann::json("auto")},
                   {"q_quantile", c.detector.q_quantile},
                   {"variant", to_string(c.detector.variant)},
                   {"calibration", to_string(c.detector.calibration)},
                   {"mc_runs", c.detector.mc_runs}};
  j["seed"] = c.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Delaunay grid.

struct Table1Config {
  std::vector<int> classes{2, 4, 8};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::string> ccms{"M*", "M-1", "M0", "M1"};
  std::vector<CdtVariant> variants{CdtVariant::distance, CdtVariant::riemannian};
  std::vector<DiscriminatorKind> discriminators{DiscriminatorKind::geometric, DiscriminatorKind::prior};
  ExperimentConfig base;  // sizes, model, training and detector settings
  int latent_dim = 2;
  unsigned threads = 1;
};

struct Table1Row {
  std::string ccm;
  CdtVariant variant{};
  DiscriminatorKind discriminator{};
  std::string label() const { return ccm + "," + to_string(variant) + "," + to_string(discriminator); }
};

/// One (row, class, seed) result.
struct Table1Entry {
  std::optional<StreamReport> report;
  std::string error;  // nonempty when the cell failed
};

struct Table1Result {
  std::vector<Table1Row> rows;
  std::vector<int> classes;
  std::vector<std::uint64_t> seeds;
  std::vector<Table1Entry> entries;  // row-major over (row, class, seed)

  const Table1Entry& at(std::size_t row, std::size_t cls, std::size_t seed) const {
    return entries[(row * classes.size() + cls) * seeds.size() + seed];
  }
  Table1Entry& at(std::size_t row, std::size_t cls, std::size_t seed) {
    return entries[(row * classes.size() + cls) * seeds.size() + seed];
  }

  /// Median AUC over the seeds where it is defined.
  std::optional<double> median_auc(std::size_t row, std::size_t cls) const {
    std::vector<double> v;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& e = at(row, cls, s);
      if (e.report && e.report->auc_rl) v.push_back(*e.report->auc_rl);
    }
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }

  std::optional<std::size_t> find_row(const std::string& ccm, CdtVariant v, DiscriminatorKind d) const {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].ccm == ccm && rows[r].variant == v && rows[r].discriminator == d) return r;
    }
    return std::nullopt;
  }
};

/// Runs the grid. Training is shared by all classes and CDT variants of a
/// (seed, ccm, discriminator) triple; those triples run on `threads` workers.
inline Table1Result replicate_table1(const Table1Config& cfg) {
  if (cfg.classes.empty() || cfg.seeds.empty() || cfg.ccms.empty() || cfg.variants.empty() ||
      cfg.discriminators.empty()) {
    throw ConfigError("table1: empty grid");
  }
  for (const auto& c : cfg.ccms) ccm_ensemble(c, cfg.latent_dim);
  Table1Result res;
  res.classes = cfg.classes;
  res.seeds = cfg.seeds;
  for (const auto& c : cfg.ccms) {
    for (CdtVariant v : cfg.variants) {
      for (DiscriminatorKind d : cfg.discriminators) res.rows.push_back({c, v, d});
    }
  }
  res.entries.resize(res.rows.size() * cfg.classes.size() * cfg.seeds.size());

  // Streams per (seed, class); the training stream does not depend on the class.
  std::vector<GraphStream> train(cfg.seeds.size());
  std::vector<std::vector<GraphStream>> op(cfg.seeds.size());
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (int cls : cfg.classes) {
      BenchmarkOptions b = cfg.base.benchmark;
      b.change_class = cls;
      BenchmarkStreams st = make_benchmark_stream(b, derive_seed(cfg.seeds[s], "stream"));
      if (train[s].empty()) train[s] = std::move(st.train);
      op[s].push_back(std::move(st.operational));
    }
  }

  struct Task {
    std::size_t seed, ccm, disc;
  };
  std::vector<Task> tasks;
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (std::size_t c = 0; c < cfg.ccms.size(); ++c) {
      for (std::size_t d = 0; d < cfg.discriminators.size(); ++d) tasks.push_back({s, c, d});
    }
  }
  auto row_of = [&](std::size_t c, std::size_t v, std::size_t d) {
    return (c * cfg.variants.size() + v) * cfg.discriminators.size() + d;
  };
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!cfg.base.log) return;
    std::lock_guard lock(log_mutex);
    cfg.base.log(msg);
  };

  auto run_task = [&](const Task& t) {
    const std::uint64_t seed = cfg.seeds[t.seed];
    const std::string name =
        "seed " + std::to_string(seed) + " " + cfg.ccms[t.ccm] + " " + to_string(cfg.discriminators[t.disc]);
    auto fail_all = [&](const std::string& what, std::optional<std::size_t> variant) {
      for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
        if (variant && *variant != v) continue;
        for (std::size_t k = 0; k < cfg.classes.size(); ++k) res.at(row_of(t.ccm, v, t.disc), k, t.seed).error = what;
      }
    };
    std::optional<AutoencoderModel> model;
    std::vector<Embedding> train_emb;
    try {
      ModelConfig m = cfg.base.model;
      m.encoder.ensemble = ccm_ensemble(cfg.ccms[t.ccm], cfg.latent_dim);
      m.discriminator = cfg.discriminators[t.disc];
      TrainHistory h;
      model.emplace(train_model(m, cfg.base.training, train[t.seed], cfg.base.normalize, seed, &h));
      train_emb = embed(*model, train[t.seed]);
      log(name + ": trained " + std::to_string(h.epochs.size()) + " epochs");
    } catch (const std::exception& e) {
      log(name + ": training failed: " + e.what());
      fail_all(std::string("train: ") + e.what(), std::nullopt);
      return;
    }
    std::vector<std::vector<Embedding>> op_emb;
    try {
      for (const auto& s : op[t.seed]) op_emb.push_back(embed(*model, s));
    } catch (const std::exception& e) {
      fail_all(std::string("encode: ") + e.what(), std::nullopt);
      return;
    }
    for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
      try {
        DetectorConfig dc = seeded(cfg.base.detector, seed);
        dc.variant = cfg.variants[v];
        const TrainedDetector det = fit_detector(dc, model->ensemble(), train_emb);
        for (std::size_t k = 0; k < cfg.classes.size(); ++k) {
          const GraphStream& s = op[t.seed][k];
          const DetectionRun run = process_stream(det, op_emb[k]);
          res.at(row_of(t.ccm, v, t.disc), k, t.seed).report =
              summarize(run, det.n, s.tau.value_or(s.size()), s.change, seed);
        }
      } catch (const std::exception& e) {
        fail_all(std::string("detector: ") + e.what(), v);
      }
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(tasks.size())));
  if (workers == 1) {
    for (const auto& t : tasks) run_task(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) run_task(tasks[i]);
      });
    }
  }
  return res;
}

inline std::string format_cell(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

/// Median AUC_RL per grid row (ccm, cdt, discriminator) and class.
inline void write_table1_csv(std::ostream& os, const Table1Result& r) {
  os << "ccm,cdt,discriminator";
  for (int c : r.classes) os << ",C=" << c;
  os << '\n';
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    os << r.rows[i].label();
    for (std::size_t k = 0; k < r.classes.size(); ++k) {
      bool failed = true;
      for (std::size_t s = 0; s < r.seeds.size(); ++s) failed = failed && !r.at(i, k, s).error.empty();
      os << ',' << (failed ? "failed" : format_cell(r.median_auc(i, k)));
    }
    os << '\n';
  }
}

/// Long format: one line per (row, class, seed) with failures spelled out.
inline void write_table1_seeds_csv(std::ostream& os, const Table1Result& r) {
  os << "ccm,cdt,discriminator,class,seed,auc_rl,n_alarms,n_nominal,n_nonnominal,status\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    for (std::size_t k = 0; k < r.classes.size(); ++k) {
      for (std::size_t s = 0; s < r.seeds.size(); ++s) {
        const auto& e = r.at(i, k, s);
        os << r.rows[i].label() << ',' << r.classes[k] << ',' << r.seeds[s] << ',';
        if (e.report) {
          os << format_cell(e.report->auc_rl) << ',' << e.report->n_alarms << ',' << e.report->run_lengths.nominal.size()
             << ',' << e.report->run_lengths.nonnominal.size() << ",ok";
        } else {
          std::string msg = e.error;
          std::replace(msg.begin(), msg.end(), ',', ';');
          std::replace(msg.begin(), msg.end(), '\n', ' ');
          os << ",,,,failed: " << msg;
        }
        os << '\n';
      }
    }
  }
}

}  // namespace ccmcd
