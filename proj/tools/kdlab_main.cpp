// Command-line front end for the keystroke metric-learning lab.
//
// Subcommands: ingest, split, synth, train, evaluate, sweep-breadth,
// sweep-depth, diagnose, report. Experiments are described by a JSON config
// file; every flag given on the command line overrides the matching config
// field. The KDLAB_RESULTS_DIR environment variable overrides the results
// directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdlab/corpus.hpp"
#include "kdlab/encoder.hpp"
#include "kdlab/eval.hpp"
#include "kdlab/features.hpp"
#include "kdlab/lab.hpp"
#include "kdlab/sampler.hpp"
#include "kdlab/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigCli {
  std::string config_path;
  kdlab::lab::ExperimentConfig config;

  std::string dataset;
  std::string adapter;
  std::vector<int> breadth;
  std::vector<int> samples;
  std::vector<int> seq_len;
  std::vector<std::uint64_t> budgets;
  std::vector<int> G_list;
  int reruns = 0;
  std::uint64_t base_seed = 0;
  std::string segmentation;
  std::string results_dir;
  int n_test = 0, n_validation = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t min_keystrokes = 0;
  int batch_size = 0;
  double learning_rate = 0.0;
  double dropout = -1.0;
  double margin = 0.0;
  int validation_evals = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON");
    cmd->add_option("--dataset", dataset, "dataset path (overrides config)");
    cmd->add_option("--adapter", adapter, "cmu|aalto|clarkson2|generic");
    cmd->add_option("--breadth", breadth, "training-pool sizes")->delimiter(',');
    cmd->add_option("--samples", samples, "samples per subject")->delimiter(',');
    cmd->add_option("--seq-len", seq_len, "sequence lengths (M)")->delimiter(',');
    cmd->add_option("--budget", budgets, "triplet budgets")->delimiter(',');
    cmd->add_option("--gallery", G_list, "gallery sizes (G)")->delimiter(',');
    cmd->add_option("--reruns", reruns, "reruns per cell");
    cmd->add_option("--base-seed", base_seed, "base experiment seed");
    cmd->add_option("--segmentation", segmentation, "session_per_sample|fixed_window");
    cmd->add_option("--results-dir", results_dir, "results directory");
    cmd->add_option("--n-test", n_test, "test subjects");
    cmd->add_option("--n-validation", n_validation, "validation subjects");
    cmd->add_option("--split-seed", split_seed, "subject split seed");
    cmd->add_option("--min-keystrokes", min_keystrokes, "eligibility threshold");
    cmd->add_option("--batch-size", batch_size, "triplets per training step");
    cmd->add_option("--learning-rate", learning_rate, "optimizer learning rate");
    cmd->add_option("--dropout", dropout, "dropout rate");
    cmd->add_option("--margin", margin, "triplet-loss margin");
    cmd->add_option("--validation-evals", validation_evals, "validation evaluations per run");
  }

  kdlab::lab::ExperimentConfig resolve(const CLI::App* cmd) {
    kdlab::lab::ExperimentConfig c;
    if (!config_path.empty()) c = kdlab::lab::load_config(config_path);
    auto passed = [cmd](const std::string& name) { return cmd->count(name) > 0; };
    if (passed("--dataset")) c.dataset_path = dataset;
    if (passed("--adapter")) c.adapter = kdlab::corpus::adapter_from_name(adapter);
    if (passed("--breadth")) c.breadth = breadth;
    if (passed("--samples")) c.samples_per_subject = samples;
    if (passed("--seq-len")) c.sequence_length = seq_len;
    if (passed("--budget")) c.triplet_budgets = budgets;
    if (passed("--gallery")) c.G_list = G_list;
    if (passed("--reruns")) c.reruns = reruns;
    if (passed("--base-seed")) c.base_seed = base_seed;
    if (passed("--segmentation")) {
      if (segmentation == "session_per_sample")
        c.segmentation = kdlab::features::SegmentPolicy::session_per_sample;
      else if (segmentation == "fixed_window")
        c.segmentation = kdlab::features::SegmentPolicy::fixed_window;
      else
        throw CLI::ValidationError("--segmentation", "must be session_per_sample or fixed_window");
    }
    if (passed("--results-dir")) c.results_dir = results_dir;
    if (passed("--n-test")) c.split.n_test = n_test;
    if (passed("--n-validation")) c.split.n_validation = n_validation;
    if (passed("--split-seed")) c.split.seed = split_seed;
    if (passed("--min-keystrokes")) c.split.min_keystrokes = min_keystrokes;
    if (passed("--batch-size")) c.encoder.batch_size = batch_size;
    if (passed("--learning-rate")) c.encoder.learning_rate = learning_rate;
    if (passed("--dropout")) c.encoder.dropout_rate = dropout;
    if (passed("--margin")) c.encoder.margin = margin;
    if (passed("--validation-evals")) c.encoder.validation_evals = validation_evals;
    return c;
  }
};

void print_records(const std::vector<kdlab::lab::RunRecord>& records) {
  for (const auto& r : records) {
    std::cout << r.run_id << "  seed=" << r.seed;
    for (const auto& [g, e] : r.eers)
      std::cout << "  G" << g << "=" << std::fixed << std::setprecision(2) << e * 100.0 << "%";
    std::cout << "  (" << std::setprecision(1) << r.wall_seconds << "s)\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keystroke-dynamics metric-learning lab"};
  app.require_subcommand(1);

  // --- ingest -----------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "convert a dataset to canonical events");
  std::string ingest_input, ingest_adapter = "generic", ingest_output, ingest_report;
  ingest->add_option("--input", ingest_input, "dataset file")->required();
  ingest->add_option("--adapter", ingest_adapter, "cmu|aalto|clarkson2|generic");
  ingest->add_option("--output", ingest_output, "canonical events CSV")->required();
  ingest->add_option("--report", ingest_report, "ingestion report CSV");

  // --- split ------------------------------------------------------------
  auto* split = app.add_subcommand("split", "derive a train/validation/test subject split");
  std::string split_events, split_adapter = "generic", split_output;
  int split_n_test = 5, split_n_validation = 5;
  std::uint64_t split_seed = 7, split_min_keystrokes = 0;
  split->add_option("--events", split_events, "dataset file")->required();
  split->add_option("--adapter", split_adapter, "cmu|aalto|clarkson2|generic");
  split->add_option("--n-test", split_n_test, "test subjects");
  split->add_option("--n-validation", split_n_validation, "validation subjects");
  split->add_option("--min-keystrokes", split_min_keystrokes, "eligibility threshold");
  split->add_option("--seed", split_seed, "split seed");
  split->add_option("--output", split_output, "split plan JSON")->required();

  // --- synth ------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate a synthetic keystroke corpus");
  kdlab::synthetic::SyntheticConfig synth_cfg;
  std::string synth_output;
  synth->add_option("--subjects", synth_cfg.subjects, "number of subjects");
  synth->add_option("--sessions", synth_cfg.sessions_per_subject, "sessions per subject");
  synth->add_option("--keys", synth_cfg.keys_per_session, "keystrokes per session");
  synth->add_option("--noise-ms", synth_cfg.noise_ms, "per-event timing jitter (ms)");
  synth->add_option("--seed", synth_cfg.seed, "generator seed");
  synth->add_option("--output", synth_output, "canonical events CSV")->required();

  // --- train / sweeps ----------------------------------------------------
  auto* train = app.add_subcommand("train", "train one experiment cell");
  ConfigCli train_cli;
  train_cli.attach(train);

  auto* sweep_breadth = app.add_subcommand("sweep-breadth", "run the breadth-wise grid");
  ConfigCli breadth_cli;
  breadth_cli.attach(sweep_breadth);

  auto* sweep_depth = app.add_subcommand("sweep-depth", "run the depth-wise grid");
  ConfigCli depth_cli;
  depth_cli.attach(sweep_depth);

  // --- evaluate -----------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
  std::string eval_checkpoint, eval_events, eval_adapter = "generic", eval_split_path,
              eval_scores;
  std::vector<int> eval_G{10};
  std::uint64_t eval_seed = 1;
  int eval_samples = 0;
  std::string eval_segmentation = "session_per_sample";
  std::string eval_aggregation = "mean";
  evaluate->add_option("--checkpoint", eval_checkpoint, "encoder checkpoint")->required();
  evaluate->add_option("--events", eval_events, "dataset file")->required();
  evaluate->add_option("--adapter", eval_adapter, "cmu|aalto|clarkson2|generic");
  evaluate->add_option("--split", eval_split_path, "split JSON; only its test subjects are scored");
  evaluate->add_option("--gallery", eval_G, "gallery sizes (G)")->delimiter(',');
  evaluate->add_option("--seed", eval_seed, "impostor-selection seed");
  evaluate->add_option("--samples", eval_samples, "samples per subject cap (0 = unlimited)");
  evaluate->add_option("--segmentation", eval_segmentation, "session_per_sample|fixed_window");
  evaluate->add_option("--aggregation", eval_aggregation, "mean|min");
  evaluate->add_option("--scores", eval_scores, "optional per-query score dump CSV");

  // --- diagnose ------------------------------------------------------------
  auto* diagnose = app.add_subcommand("diagnose", "stability report over recorded runs");
  std::string diag_results = "results";
  double diag_tau = 0.002, diag_kappa = 0.01;
  diagnose->add_option("--results", diag_results, "results directory");
  diagnose->add_option("--tau", diag_tau, "tolerated EER increase between G values (fraction)");
  diagnose->add_option("--kappa", diag_kappa, "tolerated rerun IQR (fraction)");

  // --- report ----------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "emit tables, plots and manifest");
  std::string report_results = "results", report_out;
  report_cmd->add_option("--results", report_results, "results directory");
  report_cmd->add_option("--out", report_out, "output directory (default <results>/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      kdlab::corpus::IngestReport rep;
      const auto streams = kdlab::corpus::load_dataset(
          ingest_input, kdlab::corpus::adapter_from_name(ingest_adapter), &rep);
      kdlab::corpus::write_canonical(streams, ingest_output);
      if (!ingest_report.empty()) kdlab::corpus::write_report(rep, ingest_report);
      std::cout << "subjects=" << rep.subjects << " events=" << rep.events
                << " rows_read=" << rep.rows_read << " rows_rejected=" << rep.rows_rejected
                << " unmatched_press=" << rep.unmatched_press
                << " unmatched_release=" << rep.unmatched_release << "\n";
    } else if (*split) {
      const auto streams = kdlab::corpus::load_dataset(
          split_events, kdlab::corpus::adapter_from_name(split_adapter), nullptr);
      const auto eligible = kdlab::corpus::eligible_subjects(streams, split_min_keystrokes);
      const auto plan = kdlab::corpus::make_split(eligible, static_cast<std::size_t>(split_n_test),
                                                  static_cast<std::size_t>(split_n_validation),
                                                  split_seed);
      json j{{"seed", plan.seed},
             {"train_subjects", plan.train_subjects},
             {"validation_subjects", plan.validation_subjects},
             {"test_subjects", plan.test_subjects}};
      std::ofstream out(split_output);
      out << j.dump(2) << '\n';
      std::cout << "train=" << plan.train_subjects.size()
                << " validation=" << plan.validation_subjects.size()
                << " test=" << plan.test_subjects.size() << "\n";
    } else if (*synth) {
      const auto streams = kdlab::synthetic::generate(synth_cfg);
      kdlab::corpus::write_canonical(streams, synth_output);
      std::cout << "wrote " << streams.size() << " subjects to " << synth_output << "\n";
    } else if (*train) {
      kdlab::lab::Lab lab(train_cli.resolve(train));
      const auto& c = lab.config();
      kdlab::lab::CellCoords cell{"depth", c.breadth.empty() ? 0 : c.breadth.front(),
                                  c.samples_per_subject.front(), c.sequence_length.front(),
                                  c.triplet_budgets.front()};
      std::vector<kdlab::lab::RunRecord> records;
      for (int rerun = 0; rerun < c.reruns; ++rerun) records.push_back(lab.run_cell(cell, rerun));
      print_records(records);
    } else if (*sweep_breadth) {
      kdlab::lab::Lab lab(breadth_cli.resolve(sweep_breadth));
      print_records(lab.run_breadth_sweep());
    } else if (*sweep_depth) {
      kdlab::lab::Lab lab(depth_cli.resolve(sweep_depth));
      const auto records = lab.run_depth_sweep();
      print_records(records);
      for (const auto& skip : lab.skipped_cells())
        std::cout << "skipped " << skip.cell.label() << ": " << skip.reason << "\n";
    } else if (*evaluate) {
      const auto state = kdlab::encoder::load_state<kdlab::Real>(eval_checkpoint);
      const auto streams = kdlab::corpus::load_dataset(
          eval_events, kdlab::corpus::adapter_from_name(eval_adapter), nullptr);

      std::vector<std::string> subjects;
      if (!eval_split_path.empty()) {
        std::ifstream in(eval_split_path);
        if (!in) throw std::runtime_error("cannot open split: " + eval_split_path);
        json j;
        in >> j;
        subjects = j.at("test_subjects").get<std::vector<std::string>>();
      }

      const auto policy = eval_segmentation == "fixed_window"
                              ? kdlab::features::SegmentPolicy::fixed_window
                              : kdlab::features::SegmentPolicy::session_per_sample;
      const std::size_t cap = eval_samples > 0 ? static_cast<std::size_t>(eval_samples)
                                               : std::numeric_limits<std::size_t>::max();
      std::map<std::string, std::vector<kdlab::features::FeatureSample>> samples;
      for (const auto& stream : streams) {
        if (!subjects.empty() &&
            std::find(subjects.begin(), subjects.end(), stream.subject_id) == subjects.end())
          continue;
        auto filtered = kdlab::features::filter_outliers(kdlab::features::extract_features(stream));
        auto segs = kdlab::features::segment_samples(filtered.rows, policy,
                                                     state.config.seq_len, cap);
        if (!segs.empty()) samples.emplace(stream.subject_id, std::move(segs));
      }

      const auto agg = kdlab::eval::aggregation_from_name(eval_aggregation);
      const auto results = kdlab::eval::evaluate(state, samples, eval_G, eval_seed, agg);
      for (const auto& r : results)
        std::cout << "G=" << r.G << " mean_eer=" << std::fixed << std::setprecision(2)
                  << r.mean_eer * 100.0 << "%\n";
      if (!eval_scores.empty()) {
        const auto embeddings = kdlab::eval::embed_subjects(state, samples);
        const auto sets = kdlab::eval::build_eval_sets(embeddings, eval_G.front(), eval_seed);
        kdlab::eval::write_scores(sets, agg, eval_scores);
      }
    } else if (*diagnose) {
      const auto records = kdlab::lab::load_records(diag_results);
      if (records.empty()) throw std::runtime_error("no records under " + diag_results);
      std::map<kdlab::lab::CellCoords, std::vector<kdlab::lab::RunRecord>> by_cell;
      for (const auto& r : records) by_cell[r.cell].push_back(r);
      kdlab::lab::StabilityOptions opts{diag_tau, diag_kappa};
      kdlab::csv::Writer out((fs::path(diag_results) / "diagnosis.csv").string());
      out.row("cell", "violations", "max_increase", "max_iqr", "classification");
      for (const auto& [cell, cell_records] : by_cell) {
        if (cell_records.front().eers.size() < 3) {
          std::cout << cell.label() << ": needs at least 3 G values, skipped\n";
          continue;
        }
        const auto rep = kdlab::lab::stability_diagnostic(cell_records, opts);
        const char* verdict =
            rep.consistent_with_well_trained ? "consistent-with-well-trained" : "under-trained";
        out.row(cell.label(), rep.violations, rep.max_increase, rep.max_iqr, verdict);
        std::cout << cell.label() << ": " << verdict << " (violations=" << rep.violations
                  << ", max_increase=" << rep.max_increase << ", max_iqr=" << rep.max_iqr << ")\n";
      }
    } else if (*report_cmd) {
      const auto records = kdlab::lab::load_records(report_results);
      if (records.empty()) throw std::runtime_error("no records under " + report_results);
      kdlab::lab::ExperimentConfig config;
      const fs::path manifest_path = fs::path(report_results) / "manifest.json";
      if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        json j;
        in >> j;
        config = kdlab::lab::config_from_json(j.at("config"));
      }
      const std::string out_dir =
          report_out.empty() ? (fs::path(report_results) / "report").string() : report_out;
      kdlab::lab::report(records, config, out_dir);
      std::cout << "report written to " << out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
