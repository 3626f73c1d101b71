#pragma once

// The castnet command line: synth, train, eval, bench, report, aug-study.
// Every option lives at the top level so one flat config file can drive any
// subcommand; flags given on the command line override the file.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "castnet/augment.hpp"
#include "castnet/bench.hpp"
#include "castnet/dataio.hpp"
#include "castnet/eval.hpp"
#include "castnet/model.hpp"
#include "castnet/serialize.hpp"
#include "castnet/synth.hpp"
#include "castnet/train.hpp"

namespace castnet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

struct RunOptions {
  std::string out = "castnet_out";
  std::uint64_t seed = 42;

  // dataset: a casting-layout directory, or synthetic when empty
  std::string data;
  std::size_t image_size = 64;
  std::size_t n = 400;
  std::size_t n_test = 100;
  double defect_fraction = 0.5;
  double val_fraction = 0.2;

  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::string optimizer = "adam";
  int patience = 10;
  double min_delta = 1e-4;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  double min_lr = 1e-6;
  bool no_early_stop = false;

  bool augment = false;
  bool hflip = true;
  bool vflip = true;
  double rotation = 15.0;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
  bool zca = false;
  double zca_epsilon = 1e-2;
  std::uint64_t augment_seed = 1234;
  std::uint64_t augmented_test_seed = kAugmentedTestSeed;

  std::string model;
  bool augmented_test = false;
  bool both_tests = false;
  std::string model_tag = "castnet-tiny";

  bool reference = false;
  bool measured = false;
  std::vector<std::size_t> sizes = kDefaultBatchSizes;
  std::size_t repeats = 5;
  std::size_t warmup = 1;

  bool quiet = false;
};

namespace detail {

namespace fs = std::filesystem;

inline AugmentConfig augment_config(const RunOptions& o) {
  AugmentConfig a;
  a.horizontal_flip = o.hflip;
  a.vertical_flip = o.vflip;
  a.rotation_max_deg = o.rotation;
  a.zoom_lo = o.zoom_lo;
  a.zoom_hi = o.zoom_hi;
  a.zca = o.zca;
  a.zca_epsilon = o.zca_epsilon;
  a.seed = o.augment_seed;
  a.validate();
  return a;
}

inline TrainConfig train_config(const RunOptions& o, bool with_augment) {
  TrainConfig c;
  c.epochs_max = o.epochs;
  c.batch_size = o.batch_size;
  c.learning_rate = o.lr;
  if (o.optimizer == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else if (o.optimizer == "sgd_momentum" || o.optimizer == "sgd") {
    c.optimizer = OptimizerKind::sgd_momentum;
  } else {
    throw ConfigError("optimizer: expected adam or sgd_momentum, got '" + o.optimizer + "'");
  }
  c.early_stop = {!o.no_early_stop, o.patience, o.min_delta};
  c.plateau = {true, o.plateau_factor, o.plateau_patience, o.min_delta, o.min_lr};
  c.seed = o.seed;
  if (with_augment) c.augment = augment_config(o);
  c.validate();
  return c;
}

inline void check_out_dir(const RunOptions& o) {
  if (o.out.empty()) throw ConfigError("out: output directory must not be empty");
  if (!o.data.empty()) {
    const auto data = fs::weakly_canonical(o.data), out = fs::weakly_canonical(o.out);
    auto rel = out.lexically_relative(data);
    if (out == data || (!rel.empty() && *rel.begin() != "..")) {
      throw ConfigError("out: output directory must not be inside the input dataset '" + o.data + "'");
    }
  }
  fs::create_directories(o.out);
}

inline RawDataset load_data(const RunOptions& o) {
  if (o.data.empty()) return synth_dataset(o.n, o.n_test, o.defect_fraction, o.image_size, o.seed);
  auto raw = load_dataset(o.data, o.image_size);
  for (const auto& w : raw.warnings) std::cerr << "warning: " << w << '\n';
  if (raw.train.empty()) throw DataError("no training images under '" + o.data + "'");
  if (raw.test.empty()) throw DataError("no test images under '" + o.data + "'");
  return raw;
}

// ZCA sidecar: magic, image shape, epsilon, mean, whitening matrix (f64).
inline void save_zca(const fs::path& path, const ZcaTransform& z) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f.write("CZCA1", 5);
  auto put = [&](auto v) { f.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  for (std::size_t d : z.image_shape) put(static_cast<std::uint32_t>(d));
  put(z.epsilon);
  f.write(reinterpret_cast<const char*>(z.mean.data()), static_cast<std::streamsize>(z.mean.size() * sizeof(double)));
  f.write(reinterpret_cast<const char*>(z.whitening.data()),
          static_cast<std::streamsize>(z.whitening.size() * sizeof(double)));
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

inline ZcaTransform load_zca(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  char magic[5];
  f.read(magic, 5);
  if (!f || std::string(magic, 5) != "CZCA1") throw DataError("'" + path.string() + "' is not a ZCA file");
  ZcaTransform z;
  std::uint32_t dims[3];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  f.read(reinterpret_cast<char*>(&z.epsilon), sizeof(z.epsilon));
  z.image_shape = {dims[0], dims[1], dims[2]};
  const auto d = static_cast<Eigen::Index>(shape_numel(z.image_shape));
  z.mean.resize(d);
  z.whitening.resize(d, d);
  f.read(reinterpret_cast<char*>(z.mean.data()), static_cast<std::streamsize>(d * sizeof(double)));
  f.read(reinterpret_cast<char*>(z.whitening.data()), static_cast<std::streamsize>(d * d * sizeof(double)));
  if (!f) throw DataError("'" + path.string() + "' is truncated");
  return z;
}

inline fs::path zca_path(const fs::path& model_path) { return fs::path(model_path.string() + ".zca"); }

inline std::string model_path(const RunOptions& o) {
  return o.model.empty() ? (fs::path(o.out) / "model.cnet1").string() : o.model;
}

inline void say(const RunOptions& o, const std::string& msg) {
  if (!o.quiet) std::cout << msg << '\n';
}

inline int cmd_synth(const RunOptions& o) {
  write_synth_dataset(o.out, o.n, o.n_test, o.defect_fraction, o.image_size, o.seed);
  say(o, "wrote synthetic dataset (" + std::to_string(o.n) + " train, " + std::to_string(o.n_test) + " test) to " + o.out);
  return kOk;
}

struct Trained {
  Model model;
  std::optional<ZcaTransform> zca;
  std::vector<EpochLog> logs;
};

inline Trained train_model(const RunOptions& o, const DatasetSplit& split, bool with_augment) {
  const auto cfg = train_config(o, with_augment);
  Model m{build_castnet_tiny({o.image_size, o.image_size, 1}), {}};
  auto res = fit(m.spec, split, cfg, [&](const EpochLog& l) {
    if (o.quiet) return;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %3zu  train_loss %.4f  val_loss %.4f  val_acc %.4f  lr %.3g", l.epoch,
                  l.train_loss, l.val_loss, l.val_accuracy, l.lr);
    std::cout << buf << '\n';
  });
  m.params = std::move(res.params);
  return {std::move(m), std::move(res.zca), std::move(res.logs)};
}

inline int cmd_train(const RunOptions& o) {
  const auto split = make_split(load_data(o), o.val_fraction, o.seed);
  const fs::path out(o.out);
  try {
    auto t = train_model(o, split, o.augment);
    save_model(t.model, out / "model.cnet1");
    if (t.zca) save_zca(zca_path(out / "model.cnet1"), *t.zca);
    write_training_log(out / "training_log.csv", t.logs);
    say(o, "saved " + (out / "model.cnet1").string());
  } catch (const DivergenceError& e) {
    save_model(Model{build_castnet_tiny({o.image_size, o.image_size, 1}), e.last_good()}, out / "model.last_good.cnet1");
    write_training_log(out / "training_log.csv", e.logs());
    throw;
  }
  return kOk;
}

inline std::optional<ZcaTransform> zca_for(const std::string& model_file) {
  const auto p = zca_path(model_file);
  if (fs::exists(p)) return load_zca(p);
  return std::nullopt;
}

inline std::vector<ImageRecord> augmented_test(const RunOptions& o, const std::vector<ImageRecord>& test) {
  auto cfg = augment_config(o);
  cfg.zca = false;  // whitening belongs to the model, applied at prediction time
  return augment_records(cfg, test, o.augmented_test_seed);
}

inline int cmd_eval(const RunOptions& o) {
  const auto file = model_path(o);
  const Model m = load_model(file);
  const auto zca = zca_for(file);
  const ZcaTransform* z = zca ? &*zca : nullptr;
  const auto raw = load_data(o);
  std::vector<MetricsReport> reports;
  if (!o.augmented_test || o.both_tests) {
    reports.push_back(evaluate(m, raw.test, DatasetTag::standard, o.model_tag, o.batch_size, z));
  }
  if (o.augmented_test || o.both_tests) {
    reports.push_back(evaluate(m, augmented_test(o, raw.test), DatasetTag::augmented, o.model_tag, o.batch_size, z));
  }
  write_metrics_report(fs::path(o.out) / "metrics_report.csv", reports);
  for (const auto& r : reports) {
    say(o, std::string(to_string(r.dataset_tag)) + ": acc " + percent2(r.accuracy) + "  precision " +
               percent2(r.precision) + "  recall " + percent2(r.recall) + "  f1 " + percent2(r.f1));
  }
  return kOk;
}

inline int cmd_bench(const RunOptions& o) {
  if (o.reference == o.measured) throw ConfigError("bench: choose exactly one of --reference or --measured");
  if (o.reference) {
    emit_report(reference_bench_report(), o.out);
    say(o, "wrote reference ratio tables to " + o.out);
    return kOk;
  }
  pin_cpu_from_env();
  const Model m = load_model(model_path(o));
  const auto raw = load_data(o);
  auto rep = latency_sweep(m, raw.test, o.sizes, o.repeats, o.warmup, o.model_tag);
  emit_report(measured_bench_report({rep}, o.model_tag), o.out);
  for (const auto& r : rep.rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "batch %4zu: %zu batches, %.6f s per batch, %.6f s per image", r.batch_size,
                  r.n_batches, r.per_batch_s, r.per_image_s);
    say(o, buf);
  }
  return kOk;
}

struct AugStudyRow {
  std::string training;  // normal | augmented-train
  MetricsReport report;
};

inline std::vector<AugStudyRow> aug_study(const RunOptions& o) {
  const auto split = make_split(load_data(o), o.val_fraction, o.seed);
  std::vector<AugStudyRow> rows;
  for (bool aug : {false, true}) {
    const auto t = train_model(o, split, aug);
    const ZcaTransform* z = t.zca ? &*t.zca : nullptr;
    const std::string tag = aug ? "augmented-train" : "normal";
    rows.push_back({tag, evaluate(t.model, split.test, DatasetTag::standard, tag, o.batch_size, z)});
    rows.push_back({tag, evaluate(t.model, augmented_test(o, split.test), DatasetTag::augmented, tag, o.batch_size, z)});
  }
  return rows;
}

inline std::string aug_study_markdown(const std::vector<AugStudyRow>& rows) {
  std::ostringstream os;
  os << "| Training | Test set | Accuracy | Recall | F1 Score | Precision |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.training << " | " << to_string(r.report.dataset_tag) << " | " << percent2(r.report.accuracy)
       << " | " << percent2(r.report.recall) << " | " << percent2(r.report.f1) << " | "
       << percent2(r.report.precision) << " |\n";
  }
  if (rows.size() == 4) {
    const double aug_on_aug = rows[3].report.f1, normal_on_aug = rows[1].report.f1;
    os << "\nAugmented-test F1: augmented-train " << percent2(aug_on_aug) << " vs normal " << percent2(normal_on_aug)
       << (aug_on_aug >= normal_on_aug ? " (augmented training holds up better)\n"
                                       : " (normal training holds up better)\n");
  }
  return os.str();
}

inline int cmd_aug_study(const RunOptions& o) {
  const auto rows = aug_study(o);
  std::vector<MetricsReport> reports;
  for (const auto& r : rows) reports.push_back(r.report);
  write_metrics_report(fs::path(o.out) / "aug_study.csv", reports);
  std::ofstream(fs::path(o.out) / "aug_study.md") << aug_study_markdown(rows);
  say(o, aug_study_markdown(rows));
  return kOk;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::string pct_cell(const std::string& raw) { return percent2(std::stod(raw)); }

// Comparison tables: published rows first, local results appended where
// the output directory has them.
inline std::string render_report(const RunOptions& o) {
  const fs::path out(o.out);
  std::ostringstream os;
  os << "# CastNet report\n\n## Model parameters and size\n\n";
  os << "| Model | Total params | Trainable | Non-trainable | Size (MB) |\n|---|---|---|---|---|\n";
  for (const auto& s : reference_stats()) {
    os << "| " << s.name << " (published) | " << s.total_params << " | " << s.trainable << " | " << s.non_trainable
       << " | " << castnet::detail::fmt("%.2f", s.size_mb) << " |\n";
  }
  const auto spec = build_castnet_tiny({o.image_size, o.image_size, 1});
  const auto pc = count_params(spec);
  const double bytes = static_cast<double>(kCnetHeaderBytes + spec_block_size(spec) + 4 * pc.total + kCnetChecksumBytes);
  os << "| castnet-tiny (this build) | " << pc.total << " | " << pc.trainable << " | " << pc.non_trainable << " | "
     << castnet::detail::fmt("%.4f", bytes / 1e6) << " |\n\n";

  os << "## Evaluation metrics\n\n| Model | Accuracy | Recall | F1 Score | Precision |\n|---|---|---|---|---|\n";
  for (const auto& r : kReferenceMetrics) {
    os << "| " << r.model << " (published) | " << castnet::detail::fmt("%.2f", r.accuracy) << " | " << castnet::detail::fmt("%.2f", r.recall)
       << " | " << castnet::detail::fmt("%.2f", r.f1) << " | " << castnet::detail::fmt("%.2f", r.precision) << " |\n";
  }
  if (fs::exists(out / "metrics_report.csv")) {
    for (const auto& c : read_csv(out / "metrics_report.csv")) {
      if (c.size() < 7) continue;
      os << "| " << c[0] << " (" << c[1] << " test, n=" << c[2] << ") | " << pct_cell(c[3]) << " | " << pct_cell(c[5])
         << " | " << pct_cell(c[6]) << " | " << pct_cell(c[4]) << " |\n";
    }
  }
  os << '\n';

  const BenchReport bench = fs::exists(out / "ratios.json") ? load_bench_json(out / "ratios.json") : reference_bench_report();
  std::string bench_md = render_markdown(bench);
  bench_md = bench_md.substr(bench_md.find('\n') + 1);  // drop its title line
  os << "## Inference benchmark (" << bench.mode << ")\n" << bench_md << '\n';
  if (bench.mode == "measured") {
    std::string ref_md = render_markdown(reference_bench_report());
    os << "## Published benchmark figures\n" << ref_md.substr(ref_md.find('\n') + 1) << '\n';
  }

  os << "## Augmentation study\n\n| Training | Test set | Accuracy | Recall | F1 Score | Precision |\n"
        "|---|---|---|---|---|---|\n";
  for (const auto& r : kReferenceAugStudy) {
    os << "| " << r.training << " (published) | " << r.test << " | " << castnet::detail::fmt("%.2f", r.accuracy) << " | "
       << castnet::detail::fmt("%.2f", r.recall) << " | " << castnet::detail::fmt("%.2f", r.f1) << " | " << castnet::detail::fmt("%.2f", r.precision)
       << " |\n";
  }
  if (fs::exists(out / "aug_study.csv")) {
    for (const auto& c : read_csv(out / "aug_study.csv")) {
      if (c.size() < 7) continue;
      os << "| " << c[0] << " | " << c[1] << " | " << pct_cell(c[3]) << " | " << pct_cell(c[5]) << " | "
         << pct_cell(c[6]) << " | " << pct_cell(c[4]) << " |\n";
    }
  }
  return os.str();
}

inline int cmd_report(const RunOptions& o) {
  const auto md = render_report(o);
  std::ofstream f(fs::path(o.out) / "report.md", std::ios::trunc);
  if (!f) throw DataError("cannot write report.md under '" + o.out + "'");
  f << md;
  say(o, "wrote " + (fs::path(o.out) / "report.md").string());
  return kOk;
}

}  // namespace detail

inline void add_options(CLI::App& app, RunOptions& o) {
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--seed", o.seed, "Global seed");
  app.add_option("--data", o.data, "Dataset root (train|test/ok_front|def_front); synthetic data when omitted");
  app.add_option("--image-size,--size", o.image_size, "Working image side in pixels")->check(CLI::Range(16, 1024));
  app.add_option("--n", o.n, "Synthetic training images")->check(CLI::PositiveNumber);
  app.add_option("--n-test", o.n_test, "Synthetic test images")->check(CLI::PositiveNumber);
  app.add_option("--defect-fraction", o.defect_fraction, "Share of defective synthetic images")->check(CLI::Range(0.0, 1.0));
  app.add_option("--val-fraction", o.val_fraction, "Share of training images held out for validation")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--epochs", o.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  app.add_option("--batch-size", o.batch_size, "Training / evaluation batch size")->check(CLI::PositiveNumber);
  app.add_option("--lr", o.lr, "Learning rate");
  app.add_option("--optimizer", o.optimizer, "adam or sgd_momentum");
  app.add_option("--patience", o.patience, "Early-stopping patience (epochs)");
  app.add_option("--min-delta", o.min_delta, "Smallest validation-loss drop that counts as improvement");
  app.add_option("--plateau-factor", o.plateau_factor, "LR multiplier on plateau");
  app.add_option("--plateau-patience", o.plateau_patience, "Plateau patience (epochs)");
  app.add_option("--min-lr", o.min_lr, "LR floor");
  app.add_flag("--no-early-stop{true},!--early-stop", o.no_early_stop, "Disable early stopping");
  app.add_flag("--augment{true},!--no-augment", o.augment, "Augment training batches");
  app.add_option("--hflip", o.hflip, "Random horizontal flips (true/false)");
  app.add_option("--vflip", o.vflip, "Random vertical flips (true/false)");
  app.add_option("--rotation", o.rotation, "Max rotation in degrees");
  app.add_option("--zoom-lo", o.zoom_lo, "Lower zoom factor");
  app.add_option("--zoom-hi", o.zoom_hi, "Upper zoom factor");
  app.add_option("--zca", o.zca, "ZCA whitening (true/false)");
  app.add_option("--zca-epsilon", o.zca_epsilon, "ZCA regularizer");
  app.add_option("--augment-seed", o.augment_seed, "Seed of the training augmentation stream");
  app.add_option("--augmented-test-seed", o.augmented_test_seed, "Seed of the augmented test set");
  app.add_option("--model", o.model, "CNET1 weights (default OUT/model.cnet1)");
  app.add_flag("--augmented-test", o.augmented_test, "Evaluate on the augmented test set");
  app.add_flag("--both-tests", o.both_tests, "Evaluate on the standard and the augmented test set");
  app.add_option("--model-tag", o.model_tag, "Name used in reports");
  app.add_flag("--reference", o.reference, "Bench: published constants");
  app.add_flag("--measured", o.measured, "Bench: time the local model");
  app.add_option("--sizes", o.sizes, "Bench batch sizes")->delimiter(',');
  app.add_option("--repeats", o.repeats, "Timed repeats per batch size (>= 5)");
  app.add_option("--warmup", o.warmup, "Discarded warmup runs (>= 1)");
  app.add_flag("--quiet", o.quiet, "Suppress progress output");
}

// Runs one subcommand; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"castnet: tiny CNN toolkit for casting-defect classification"};
  app.set_config("--config", "", "Flat key=value run config; command-line flags win");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  RunOptions o;
  add_options(app, o);
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const RunOptions&);
  };
  const Sub subs[] = {
      {"synth", "Write a synthetic impeller dataset to --out", detail::cmd_synth},
      {"train", "Train CastNet-Tiny; writes model.cnet1 and training_log.csv", detail::cmd_train},
      {"eval", "Evaluate a model; writes metrics_report.csv", detail::cmd_eval},
      {"bench", "Latency sweep or reference ratio tables", detail::cmd_bench},
      {"report", "Merge outputs into markdown comparison tables", detail::cmd_report},
      {"aug-study", "Train with and without augmentation, test on both test sets", detail::cmd_aug_study},
  };
  std::vector<CLI::App*> handles;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->fallthrough();
    handles.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, std::cout, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cout, err);
    return kUsage;
  }
  try {
    for (std::size_t i = 0; i < handles.size(); ++i) {
      if (!handles[i]->parsed()) continue;
      detail::check_out_dir(o);
      {
        std::ofstream cfg(std::filesystem::path(o.out) / "run_config.ini", std::ios::trunc);
        cfg << "# castnet " << subs[i].name << "\n" << app.config_to_str(true, false);
      }
      return subs[i].fn(o);
    }
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace castnet::cli
