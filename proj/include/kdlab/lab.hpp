#pragma once

// Experiment harness: configuration, breadth/depth sweep grids, rerun
// management, result persistence and report emission.
//
// Every run's seed derives from a stable hash of (base seed, sweep kind,
// cell coordinates, rerun index), so cells are independent: deleting one
// cell's records and re-running only that cell reproduces identical values.
// Reruns re-draw the training pool and triplet stream; the test pool and the
// impostor selections stay fixed for the whole experiment.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "kdlab/corpus.hpp"
#include "kdlab/csv.hpp"
#include "kdlab/encoder.hpp"
#include "kdlab/eval.hpp"
#include "kdlab/features.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sampler.hpp"

namespace kdlab::lab {

namespace fs = std::filesystem;
using nlohmann::json;

// --- Configuration -------------------------------------------------------------

struct SplitSpec {
  int n_test = 5;
  int n_validation = 5;
  std::size_t min_keystrokes = 0;
  std::uint64_t seed = 7;
};

struct QuadrantThresholds {
  double min_subjects_wide = 1000.0;
  double min_volume_deep = 100.0;
};

struct ExperimentConfig {
  std::string dataset_path;
  corpus::Adapter adapter = corpus::Adapter::generic;
  SplitSpec split;

  std::vector<int> breadth;               // training-pool sizes; empty = full pool
  std::vector<int> samples_per_subject;
  std::vector<int> sequence_length;       // M values
  std::vector<std::uint64_t> triplet_budgets;
  std::vector<int> G_list;
  int reruns = 10;
  std::uint64_t base_seed = 1;

  features::SegmentPolicy segmentation = features::SegmentPolicy::session_per_sample;
  double outlier_threshold = 5.0;
  eval::Aggregation aggregation = eval::Aggregation::mean;
  encoder::EncoderConfig encoder;  // hyperparameters; per-cell fields are overwritten

  std::string results_dir = "results";
  QuadrantThresholds quadrant;

  void validate() const {
    auto positive = [](const auto& list, const char* what) {
      if (list.empty()) throw std::invalid_argument(std::string(what) + " list must not be empty");
      for (const auto v : list)
        if (v <= 0) throw std::invalid_argument(std::string(what) + " entries must be positive");
    };
    positive(samples_per_subject, "samples_per_subject");
    positive(sequence_length, "sequence_length");
    positive(triplet_budgets, "triplet_budgets");
    positive(G_list, "G_list");
    for (const auto v : breadth)
      if (v <= 0) throw std::invalid_argument("breadth entries must be positive");
    if (reruns < 1) throw std::invalid_argument("reruns must be >= 1");
    if (split.n_test < 2) throw std::invalid_argument("n_test must be >= 2 (impostors needed)");
    if (split.n_validation < 0) throw std::invalid_argument("n_validation must be >= 0");
  }
};

inline json config_to_json(const ExperimentConfig& c) {
  return json{{"dataset_path", c.dataset_path},
              {"adapter", corpus::adapter_name(c.adapter)},
              {"split",
               {{"n_test", c.split.n_test},
                {"n_validation", c.split.n_validation},
                {"min_keystrokes", c.split.min_keystrokes},
                {"seed", c.split.seed}}},
              {"breadth", c.breadth},
              {"samples_per_subject", c.samples_per_subject},
              {"sequence_length", c.sequence_length},
              {"triplet_budgets", c.triplet_budgets},
              {"G_list", c.G_list},
              {"reruns", c.reruns},
              {"base_seed", c.base_seed},
              {"segmentation",
               c.segmentation == features::SegmentPolicy::session_per_sample ? "session_per_sample"
                                                                             : "fixed_window"},
              {"outlier_threshold", c.outlier_threshold},
              {"aggregation", c.aggregation == eval::Aggregation::mean ? "mean" : "min"},
              {"encoder", encoder::config_to_json(c.encoder)},
              {"results_dir", c.results_dir},
              {"quadrant",
               {{"min_subjects_wide", c.quadrant.min_subjects_wide},
                {"min_volume_deep", c.quadrant.min_volume_deep}}}};
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  c.dataset_path = j.value("dataset_path", c.dataset_path);
  c.adapter = corpus::adapter_from_name(j.value("adapter", "generic"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    c.split.n_test = s.value("n_test", c.split.n_test);
    c.split.n_validation = s.value("n_validation", c.split.n_validation);
    c.split.min_keystrokes = s.value("min_keystrokes", c.split.min_keystrokes);
    c.split.seed = s.value("seed", c.split.seed);
  }
  c.breadth = j.value("breadth", c.breadth);
  c.samples_per_subject = j.value("samples_per_subject", c.samples_per_subject);
  c.sequence_length = j.value("sequence_length", c.sequence_length);
  c.triplet_budgets = j.value("triplet_budgets", c.triplet_budgets);
  c.G_list = j.value("G_list", c.G_list);
  c.reruns = j.value("reruns", c.reruns);
  c.base_seed = j.value("base_seed", c.base_seed);
  const std::string seg = j.value("segmentation", "session_per_sample");
  if (seg == "session_per_sample")
    c.segmentation = features::SegmentPolicy::session_per_sample;
  else if (seg == "fixed_window")
    c.segmentation = features::SegmentPolicy::fixed_window;
  else
    throw std::runtime_error("unknown segmentation policy: " + seg);
  c.outlier_threshold = j.value("outlier_threshold", c.outlier_threshold);
  c.aggregation = eval::aggregation_from_name(j.value("aggregation", "mean"));
  if (j.contains("encoder")) c.encoder = encoder::config_from_json(j.at("encoder"));
  c.results_dir = j.value("results_dir", c.results_dir);
  if (j.contains("quadrant")) {
    const auto& q = j.at("quadrant");
    c.quadrant.min_subjects_wide = q.value("min_subjects_wide", c.quadrant.min_subjects_wide);
    c.quadrant.min_volume_deep = q.value("min_volume_deep", c.quadrant.min_volume_deep);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  in >> j;
  return config_from_json(j);
}

// --- Run records ----------------------------------------------------------------

struct CellCoords {
  std::string sweep;  // "breadth" or "depth"
  int breadth = 0;    // training-pool size, 0 = full training pool
  int samples_per_subject = 0;
  int M = 0;
  std::uint64_t budget = 0;

  bool operator==(const CellCoords&) const = default;
  bool operator<(const CellCoords& o) const {
    return std::tie(sweep, breadth, samples_per_subject, M, budget) <
           std::tie(o.sweep, o.breadth, o.samples_per_subject, o.M, o.budget);
  }

  std::string label() const {
    std::ostringstream s;
    s << sweep << "-p" << breadth << "-s" << samples_per_subject << "-m" << M << "-t" << budget;
    return s.str();
  }
};

struct RunRecord {
  std::string run_id;
  std::string dataset;
  CellCoords cell;
  int rerun = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<int, double>> eers;  // (G, mean EER fraction), ascending G
  std::size_t train_steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double best_validation_eer = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
  std::string checkpoint;

  double eer_at(int G) const {
    for (const auto& [g, e] : eers)
      if (g == G) return e;
    throw std::out_of_range("no EER recorded for G=" + std::to_string(G));
  }
};

inline json record_to_json(const RunRecord& r) {
  json eers = json::array();
  for (const auto& [g, e] : r.eers) eers.push_back({{"G", g}, {"eer", e}});
  return json{{"run_id", r.run_id},
              {"dataset", r.dataset},
              {"cell",
               {{"sweep", r.cell.sweep},
                {"breadth", r.cell.breadth},
                {"samples_per_subject", r.cell.samples_per_subject},
                {"M", r.cell.M},
                {"budget", r.cell.budget}}},
              {"rerun", r.rerun},
              {"seed", r.seed},
              {"eers", eers},
              {"train_steps", r.train_steps},
              {"first_loss", r.first_loss},
              {"last_loss", r.last_loss},
              {"best_validation_eer", r.best_validation_eer},
              {"wall_seconds", r.wall_seconds},
              {"checkpoint", r.checkpoint}};
}

inline RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.dataset = j.value("dataset", "");
  const auto& c = j.at("cell");
  r.cell.sweep = c.value("sweep", "");
  r.cell.breadth = c.value("breadth", 0);
  r.cell.samples_per_subject = c.value("samples_per_subject", 0);
  r.cell.M = c.value("M", 0);
  r.cell.budget = c.value("budget", std::uint64_t{0});
  r.rerun = j.value("rerun", 0);
  r.seed = j.value("seed", std::uint64_t{0});
  for (const auto& e : j.at("eers")) r.eers.push_back({e.at("G").get<int>(), e.at("eer").get<double>()});
  r.train_steps = j.value("train_steps", std::size_t{0});
  r.first_loss = j.value("first_loss", 0.0);
  r.last_loss = j.value("last_loss", 0.0);
  r.best_validation_eer = j.value("best_validation_eer", std::numeric_limits<double>::quiet_NaN());
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.checkpoint = j.value("checkpoint", "");
  return r;
}

// --- Stability diagnostic --------------------------------------------------------

struct StabilityOptions {
  double tau = 0.002;    // tolerated EER increase between consecutive G values
  double kappa = 0.01;   // tolerated rerun interquartile range
};

struct StabilityReport {
  CellCoords cell;
  std::vector<int> G;
  std::vector<double> mean_eer;       // per G, across reruns
  int violations = 0;                 // G-monotonicity violations beyond tau
  double max_increase = 0.0;          // largest EER increase as G grows
  double max_iqr = 0.0;               // largest per-G rerun IQR
  bool consistent_with_well_trained = false;
};

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v.front();
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace detail

// Classifies one config cell's records. A well-trained model shows EER
// non-increasing in G (within tau) and small dispersion across reruns;
// fluctuation across G marks an under-trained model.
inline StabilityReport stability_diagnostic(const std::vector<RunRecord>& records,
                                            StabilityOptions opts = {}) {
  if (records.empty()) throw std::invalid_argument("stability_diagnostic needs records");
  const CellCoords cell = records.front().cell;
  for (const auto& r : records)
    if (!(r.cell == cell))
      throw std::invalid_argument("stability_diagnostic records must share one config cell");

  std::map<int, std::vector<double>> by_G;
  for (const auto& r : records)
    for (const auto& [g, e] : r.eers) by_G[g].push_back(e);
  if (by_G.size() < 3)
    throw std::invalid_argument("stability_diagnostic needs at least three G values");

  StabilityReport report;
  report.cell = cell;
  for (const auto& [g, values] : by_G) {
    report.G.push_back(g);
    double sum = 0.0;
    for (const double v : values) sum += v;
    report.mean_eer.push_back(sum / static_cast<double>(values.size()));
    report.max_iqr = std::max(report.max_iqr, detail::quantile(values, 0.75) -
                                                  detail::quantile(values, 0.25));
  }
  for (std::size_t i = 0; i + 1 < report.mean_eer.size(); ++i) {
    const double increase = report.mean_eer[i + 1] - report.mean_eer[i];
    report.max_increase = std::max(report.max_increase, increase);
    if (increase > opts.tau) ++report.violations;
  }
  report.consistent_with_well_trained =
      report.violations == 0 && report.max_iqr <= opts.kappa;
  return report;
}

// --- Quadrant classification ------------------------------------------------------

struct QuadrantLabel {
  bool wide = false;   // breadth class: wide vs narrow
  bool deep = false;   // depth class: deep vs shallow
  int quadrant = 0;    // I wide+deep, II narrow+deep, III narrow+shallow, IV wide+shallow
  QuadrantThresholds thresholds;
};

inline QuadrantLabel classify_quadrant(double n_subjects, double per_subject_volume,
                                       const QuadrantThresholds& thresholds = {}) {
  if (n_subjects <= 0 || per_subject_volume <= 0)
    throw std::invalid_argument("classify_quadrant needs positive inputs");
  QuadrantLabel label;
  label.thresholds = thresholds;
  label.wide = n_subjects >= thresholds.min_subjects_wide;
  label.deep = per_subject_volume >= thresholds.min_volume_deep;
  if (label.wide && label.deep) label.quadrant = 1;
  else if (!label.wide && label.deep) label.quadrant = 2;
  else if (!label.wide && !label.deep) label.quadrant = 3;
  else label.quadrant = 4;
  return label;
}

// --- The lab -----------------------------------------------------------------------

struct CellSkip {
  CellCoords cell;
  std::string reason;
};

class Lab {
 public:
  explicit Lab(ExperimentConfig config) : config_(std::move(config)) {
    config_.validate();
    if (const char* env = std::getenv("KDLAB_RESULTS_DIR"); env && *env)
      config_.results_dir = env;

    corpus::IngestReport report;
    auto streams = corpus::load_dataset(config_.dataset_path, config_.adapter, &report);
    if (streams.empty()) throw std::runtime_error("dataset is empty: " + config_.dataset_path);

    const auto eligible = corpus::eligible_subjects(streams, config_.split.min_keystrokes);
    split_ = corpus::make_split(eligible, static_cast<std::size_t>(config_.split.n_test),
                                static_cast<std::size_t>(config_.split.n_validation),
                                config_.split.seed);

    // Extract and filter features once per eligible subject.
    for (auto& stream : streams) {
      if (std::find(eligible.begin(), eligible.end(), stream.subject_id) == eligible.end())
        continue;
      auto filtered =
          features::filter_outliers(features::extract_features(stream), config_.outlier_threshold);
      feature_cols_ = features::column_count(filtered.rows.layout);
      features_.emplace(stream.subject_id, std::move(filtered.rows));
    }
  }

  const ExperimentConfig& config() const { return config_; }
  const corpus::SplitPlan& split() const { return split_; }
  int feature_cols() const { return feature_cols_; }

  // Breadth sweep: pool sizes vary, depth parameters pinned to the first list
  // entries. All requested pool sizes are validated before any training runs.
  std::vector<RunRecord> run_breadth_sweep() {
    if (config_.breadth.empty())
      throw std::invalid_argument("breadth sweep needs a non-empty breadth list");
    for (const int pool_size : config_.breadth) {
      if (static_cast<std::size_t>(pool_size) > split_.train_subjects.size()) {
        std::ostringstream msg;
        msg << "breadth " << pool_size << " exceeds the " << split_.train_subjects.size()
            << "-subject training pool";
        throw std::runtime_error(msg.str());
      }
    }
    std::vector<RunRecord> records;
    for (const int pool_size : config_.breadth) {
      CellCoords cell{"breadth", pool_size, config_.samples_per_subject.front(),
                      config_.sequence_length.front(), config_.triplet_budgets.front()};
      ensure_feasible(cell);  // throws: breadth cells must all be runnable
      for (int rerun = 0; rerun < config_.reruns; ++rerun)
        records.push_back(run_cell(cell, rerun));
    }
    write_manifest(records);
    return records;
  }

  // Depth sweep: full factorial over (samples, M, budget) at fixed breadth.
  // Infeasible cells are skipped with a logged reason rather than aborting.
  std::vector<RunRecord> run_depth_sweep() {
    const int pool_size = config_.breadth.empty() ? 0 : config_.breadth.front();
    std::vector<RunRecord> records;
    skipped_.clear();
    for (const int samples : config_.samples_per_subject) {
      for (const int M : config_.sequence_length) {
        for (const std::uint64_t budget : config_.triplet_budgets) {
          CellCoords cell{"depth", pool_size, samples, M, budget};
          try {
            ensure_feasible(cell);
          } catch (const std::exception& e) {
            skipped_.push_back({cell, e.what()});
            continue;
          }
          for (int rerun = 0; rerun < config_.reruns; ++rerun)
            records.push_back(run_cell(cell, rerun));
        }
      }
    }
    write_manifest(records);
    return records;
  }

  const std::vector<CellSkip>& skipped_cells() const { return skipped_; }

  // One training + evaluation run. Seeds derive from (base seed, cell,
  // rerun); impostor selection and the test pool depend only on the
  // experiment, never on the rerun.
  RunRecord run_cell(const CellCoords& cell, int rerun) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = cell_seed(cell, rerun);

    const auto pool_subjects = draw_pool(cell, seed);
    auto train_samples = segment_for(pool_subjects, cell);
    auto test_samples = segment_for(split_.test_subjects, cell);
    auto validation_samples = segment_for(split_.validation_subjects, cell);

    encoder::EncoderConfig enc = config_.encoder;
    enc.seq_len = cell.M;
    enc.feature_cols = feature_cols_;
    enc.triplet_budget = cell.budget;
    enc.seed = seed;

    std::map<std::string, std::size_t> pool_counts;
    for (const auto& [subject, samples] : train_samples) pool_counts[subject] = samples.size();
    sampler::TripletGenerator triplets(pool_counts, seed);

    encoder::ValidationHook<Real> hook;
    if (!validation_samples.empty() && validation_samples.size() >= 2)
      hook = eval::make_validation_hook<Real>(validation_samples, config_.G_list.front(),
                                              eval_seed());

    auto trained = encoder::train<Real>(enc, train_samples, triplets, hook);

    const auto results =
        eval::evaluate(trained.state, test_samples, sorted_G(), eval_seed(), config_.aggregation);

    RunRecord record;
    record.dataset = config_.dataset_path;
    record.cell = cell;
    record.rerun = rerun;
    record.seed = seed;
    record.run_id = make_run_id(cell, rerun);
    for (const auto& r : results) record.eers.push_back({r.G, r.mean_eer});
    record.train_steps = trained.log.size();
    record.first_loss = trained.log.front().mean_loss;
    record.last_loss = trained.log.back().mean_loss;
    for (const auto& e : trained.log)
      if (e.has_validation())
        record.best_validation_eer = std::isnan(record.best_validation_eer)
                                         ? e.validation_eer
                                         : std::min(record.best_validation_eer, e.validation_eer);
    record.checkpoint = store_checkpoint(trained.state);
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    persist(record, trained.log);
    return record;
  }

  // Segmented samples for a subject list at a cell's (samples, M).
  std::map<std::string, std::vector<features::FeatureSample>> segment_for(
      const std::vector<std::string>& subjects, const CellCoords& cell) const {
    std::map<std::string, std::vector<features::FeatureSample>> out;
    for (const auto& subject : subjects) {
      const auto it = features_.find(subject);
      if (it == features_.end()) continue;
      auto samples = features::segment_samples(it->second, config_.segmentation, cell.M,
                                               static_cast<std::size_t>(cell.samples_per_subject));
      if (!samples.empty()) out.emplace(subject, std::move(samples));
    }
    return out;
  }

  std::uint64_t eval_seed() const {
    return stable_hash64(std::string_view{"eval"}, config_.base_seed);
  }

  std::uint64_t cell_seed(const CellCoords& cell, int rerun) const {
    return stable_hash64(std::string_view{"cell"}, config_.base_seed, cell.sweep, cell.breadth,
                         cell.samples_per_subject, cell.M, cell.budget, rerun);
  }

 private:
  std::vector<std::string> draw_pool(const CellCoords& cell, std::uint64_t seed) const {
    if (cell.breadth == 0) return split_.train_subjects;
    std::vector<std::string> pool = split_.train_subjects;
    Rng rng(stable_hash64(std::string_view{"pool"}, seed));
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(cell.breadth));
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  std::vector<int> sorted_G() const {
    std::vector<int> g = config_.G_list;
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    return g;
  }

  // A cell is runnable when the training pool can anchor triplets and every
  // test (and validation) subject can fill the largest requested gallery
  // plus at least one genuine query.
  void ensure_feasible(const CellCoords& cell) const {
    if (cell.breadth > 0 &&
        static_cast<std::size_t>(cell.breadth) > split_.train_subjects.size()) {
      std::ostringstream msg;
      msg << "pool size " << cell.breadth << " exceeds " << split_.train_subjects.size()
          << " training subjects";
      throw std::runtime_error(msg.str());
    }
    const auto train = segment_for(split_.train_subjects, cell);
    std::size_t anchors = 0, usable = 0;
    for (const auto& [subject, samples] : train) {
      if (!samples.empty()) ++usable;
      if (samples.size() >= 2) ++anchors;
    }
    if (usable < 2 || anchors < 1)
      throw std::runtime_error("training pool cannot form triplets at " + cell.label());
    const int max_G = sorted_G().back();
    const auto test = segment_for(split_.test_subjects, cell);
    if (test.size() < split_.test_subjects.size() || test.size() < 2)
      throw std::runtime_error("test subjects produce no samples at " + cell.label());
    for (const auto& [subject, samples] : test) {
      if (samples.size() <= static_cast<std::size_t>(max_G)) {
        std::ostringstream msg;
        msg << "test subject " << subject << " yields " << samples.size()
            << " samples, need more than G=" << max_G << " at " << cell.label();
        throw std::runtime_error(msg.str());
      }
    }
    const auto validation = segment_for(split_.validation_subjects, cell);
    for (const auto& [subject, samples] : validation) {
      if (samples.size() <= static_cast<std::size_t>(config_.G_list.front())) {
        std::ostringstream msg;
        msg << "validation subject " << subject << " yields " << samples.size()
            << " samples, need more than G=" << config_.G_list.front() << " at " << cell.label();
        throw std::runtime_error(msg.str());
      }
    }
  }

  std::string make_run_id(const CellCoords& cell, int rerun) const {
    std::ostringstream id;
    id << cell.label() << "-r" << rerun;
    return id.str();
  }

  std::string store_checkpoint(const encoder::EncoderState& state) const {
    const fs::path dir = fs::path(config_.results_dir) / "checkpoints";
    fs::create_directories(dir);
    const fs::path tmp = dir / "incoming.kdck.tmp";
    encoder::save_state(state, tmp.string());

    std::ifstream in(tmp, std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    const std::string content = bytes.str();
    const std::uint64_t h = encoder::detail::fnv1a(content.data(), content.size());
    std::ostringstream name;
    name << std::hex << std::setw(16) << std::setfill('0') << h << ".kdck";
    const fs::path target = dir / name.str();
    in.close();
    fs::rename(tmp, target);
    return target.string();
  }

  void persist(const RunRecord& record, const encoder::TrainLog& log) const {
    const fs::path dir(config_.results_dir);
    fs::create_directories(dir / "records");
    fs::create_directories(dir / "logs");
    {
      std::ofstream out(dir / "records" / (record.run_id + ".json"));
      out << record_to_json(record).dump(2) << '\n';
    }
    encoder::write_train_log(log, (dir / "logs" / (record.run_id + ".csv")).string());

    const fs::path results_csv = dir / "runs.csv";
    const bool fresh = !fs::exists(results_csv);
    std::ofstream out(results_csv, std::ios::app);
    if (fresh)
      out << "run_id,dataset,breadth,samples_per_subject,M,triplets,G,seed,eer\n";
    for (const auto& [g, e] : record.eers) {
      out << record.run_id << ',' << record.dataset << ',' << record.cell.breadth << ','
          << record.cell.samples_per_subject << ',' << record.cell.M << ',' << record.cell.budget
          << ',' << g << ',' << record.seed << ',' << std::setprecision(10) << e << '\n';
    }
  }

  void write_manifest(const std::vector<RunRecord>& records) const {
    const json cfg = config_to_json(config_);
    json runs = json::array();
    for (const auto& r : records) runs.push_back(record_to_json(r));
    json skipped = json::array();
    for (const auto& s : skipped_)
      skipped.push_back({{"cell", s.cell.label()}, {"reason", s.reason}});
    const json manifest{{"config", cfg},
                        {"config_hash", stable_hash64(cfg.dump())},
                        {"runs", runs},
                        {"skipped_cells", skipped}};
    fs::create_directories(config_.results_dir);
    std::ofstream out(fs::path(config_.results_dir) / "manifest.json");
    out << manifest.dump(2) << '\n';
  }

  ExperimentConfig config_;
  corpus::SplitPlan split_;
  std::map<std::string, features::ExtractedFeatures> features_;
  int feature_cols_ = 5;
  std::vector<CellSkip> skipped_;
};

// --- Reporting -----------------------------------------------------------------

namespace detail {

inline std::string format_percent(double eer_fraction) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << eer_fraction * 100.0;
  return s.str();
}

struct BoxStats {
  double lo, q1, median, q3, hi;
};

inline BoxStats box_stats(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return {values.front(), quantile(values, 0.25), quantile(values, 0.5), quantile(values, 0.75),
          values.back()};
}

// Minimal SVG box plot: one box per labelled group.
inline void write_box_plot_svg(const std::string& path, const std::string& title,
                               const std::vector<std::pair<std::string, std::vector<double>>>& groups) {
  const int width = std::max<int>(320, 90 * static_cast<int>(groups.size()) + 120);
  const int height = 300;
  const double plot_left = 70, plot_right = width - 30.0;
  const double plot_top = 50, plot_bottom = height - 50.0;

  double vmin = std::numeric_limits<double>::infinity(), vmax = 0.0;
  for (const auto& [label, values] : groups)
    for (const double v : values) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  if (!std::isfinite(vmin)) {
    vmin = 0.0;
    vmax = 1.0;
  }
  const double span = std::max(1e-6, vmax - vmin);
  vmin = std::max(0.0, vmin - 0.1 * span);
  vmax = vmax + 0.1 * span;

  auto y_of = [&](double v) {
    return plot_bottom - (v - vmin) / (vmax - vmin) * (plot_bottom - plot_top);
  };

  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  out << "<line x1=\"" << plot_left << "\" y1=\"" << plot_top << "\" x2=\"" << plot_left
      << "\" y2=\"" << plot_bottom << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << plot_left << "\" y1=\"" << plot_bottom << "\" x2=\"" << plot_right
      << "\" y2=\"" << plot_bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = vmin + (vmax - vmin) * i / 4.0;
    out << "<text x=\"" << plot_left - 8 << "\" y=\"" << y_of(v) + 4
        << "\" text-anchor=\"end\" font-size=\"10\">" << format_percent(v) << "</text>\n";
  }
  const double slot = (plot_right - plot_left) / static_cast<double>(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& [label, values] = groups[i];
    if (values.empty()) continue;
    const BoxStats s = box_stats(values);
    const double cx = plot_left + slot * (static_cast<double>(i) + 0.5);
    const double half = std::min(26.0, slot * 0.3);
    out << "<line x1=\"" << cx << "\" y1=\"" << y_of(s.lo) << "\" x2=\"" << cx << "\" y2=\""
        << y_of(s.hi) << "\" stroke=\"black\"/>\n";
    for (const double whisker : {s.lo, s.hi})
      out << "<line x1=\"" << cx - half * 0.6 << "\" y1=\"" << y_of(whisker) << "\" x2=\""
          << cx + half * 0.6 << "\" y2=\"" << y_of(whisker) << "\" stroke=\"black\"/>\n";
    out << "<rect x=\"" << cx - half << "\" y=\"" << y_of(s.q3) << "\" width=\"" << 2 * half
        << "\" height=\"" << std::max(1.0, y_of(s.q1) - y_of(s.q3))
        << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << cx - half << "\" y1=\"" << y_of(s.median) << "\" x2=\"" << cx + half
        << "\" y2=\"" << y_of(s.median) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << cx << "\" y=\"" << plot_bottom + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << label << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace detail

// Emits per-table summaries (mean EER over reruns, percent, two decimals),
// box-plot images per cell across reruns, and a replayable manifest.
inline void report(const std::vector<RunRecord>& records, const ExperimentConfig& config,
                   const std::string& out_dir) {
  if (records.empty()) throw std::invalid_argument("report needs at least one record");
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "plots");

  std::map<CellCoords, std::vector<const RunRecord*>> by_cell;
  for (const auto& r : records) by_cell[r.cell].push_back(&r);

  // Breadth table: one row of mean EERs across pool sizes at the smallest G.
  {
    std::map<int, std::vector<double>> by_pool;
    int G0 = 0;
    for (const auto& r : records) {
      if (r.cell.sweep != "breadth") continue;
      G0 = r.eers.front().first;
      by_pool[r.cell.breadth].push_back(r.eers.front().second);
    }
    if (!by_pool.empty()) {
      csv::Writer out((fs::path(out_dir) / "breadth_table.csv").string());
      std::ostringstream header, row;
      header << "G=" << G0;
      for (const auto& [pool, eers] : by_pool) {
        header << ",subjects_" << pool;
        double sum = 0.0;
        for (const double e : eers) sum += e;
        row << ',' << detail::format_percent(sum / static_cast<double>(eers.size()));
      }
      out.raw_line(header.str());
      out.raw_line("mean_eer" + row.str());
    }
  }

  // Depth tables: per budget, a G-by-(M, samples) grid of mean EERs.
  {
    std::map<std::uint64_t, std::map<std::pair<int, int>, std::map<int, std::vector<double>>>>
        grids;  // budget -> (M, samples) -> G -> eers
    for (const auto& r : records) {
      if (r.cell.sweep != "depth") continue;
      for (const auto& [g, e] : r.eers)
        grids[r.cell.budget][{r.cell.M, r.cell.samples_per_subject}][g].push_back(e);
    }
    for (const auto& [budget, grid] : grids) {
      std::ostringstream name;
      name << "depth_table_t" << budget << ".csv";
      csv::Writer out((fs::path(out_dir) / name.str()).string());
      std::ostringstream header;
      header << "G";
      std::vector<int> g_values;
      for (const auto& [col, by_G] : grid) {
        header << ",M" << col.first << "_s" << col.second;
        for (const auto& [g, _] : by_G)
          if (std::find(g_values.begin(), g_values.end(), g) == g_values.end())
            g_values.push_back(g);
      }
      std::sort(g_values.begin(), g_values.end());
      out.raw_line(header.str());
      for (const int g : g_values) {
        std::ostringstream row;
        row << g;
        for (const auto& [col, by_G] : grid) {
          const auto it = by_G.find(g);
          if (it == by_G.end()) {
            row << ',';
          } else {
            double sum = 0.0;
            for (const double e : it->second) sum += e;
            row << ',' << detail::format_percent(sum / static_cast<double>(it->second.size()));
          }
        }
        out.raw_line(row.str());
      }
    }
  }

  // Box plots: per cell, EER distribution across reruns per G.
  for (const auto& [cell, cell_records] : by_cell) {
    std::vector<std::pair<std::string, std::vector<double>>> groups;
    std::map<int, std::vector<double>> by_G;
    for (const RunRecord* r : cell_records)
      for (const auto& [g, e] : r->eers) by_G[g].push_back(e);
    for (const auto& [g, values] : by_G) groups.push_back({"G=" + std::to_string(g), values});
    detail::write_box_plot_svg(
        (fs::path(out_dir) / "plots" / (cell.label() + ".svg")).string(),
        cell.label() + " (" + std::to_string(cell_records.size()) + " reruns)", groups);
  }

  // Manifest with every seed and the config hash, for exact replay.
  const json cfg = config_to_json(config);
  json runs = json::array();
  for (const auto& r : records) runs.push_back(record_to_json(r));
  const json manifest{{"config", cfg}, {"config_hash", stable_hash64(cfg.dump())}, {"runs", runs}};
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline std::vector<RunRecord> load_records(const std::string& results_dir) {
  std::vector<RunRecord> records;
  const fs::path dir = fs::path(results_dir) / "records";
  if (!fs::exists(dir)) return records;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".json") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    std::ifstream in(p);
    json j;
    in >> j;
    records.push_back(record_from_json(j));
  }
  return records;
}

}  // namespace kdlab::lab
