#pragma once

// CPU inference latency (time per batch over a whole test set) and the
// parameter / size / speed ratio tables built from it.

#include <sched.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "castnet/dataio.hpp"
#include "castnet/errors.hpp"
#include "castnet/model.hpp"

namespace castnet {

inline const std::vector<std::size_t> kDefaultBatchSizes{1, 10, 50, 100, 715};

struct LatencyRow {
  std::size_t batch_size = 0;
  std::size_t n_images = 0;
  std::size_t n_batches = 0;
  double total_s = 0;
  double per_batch_s = 0;  // total_s / n_batches
  double per_image_s = 0;  // total_s / n_images
  std::string column;
  friend bool operator==(const LatencyRow&, const LatencyRow&) = default;
};

struct BenchEnvironment {
  int thread_count = 1;
  std::size_t warmup_runs = 1;
  std::size_t repeats = 5;
  friend bool operator==(const BenchEnvironment&, const BenchEnvironment&) = default;
};

struct LatencyReport {
  std::string model_tag;
  std::vector<LatencyRow> rows;
  BenchEnvironment environment;
  friend bool operator==(const LatencyReport&, const LatencyReport&) = default;
};

struct RatioEntry {
  std::string model_tag;
  std::string column_tag;
  double ratio = 0;
  friend bool operator==(const RatioEntry&, const RatioEntry&) = default;
};

struct SpeedRatioTable {
  std::string baseline_tag;
  std::vector<RatioEntry> entries;
  friend bool operator==(const SpeedRatioTable&, const SpeedRatioTable&) = default;

  double at(std::string_view model, std::string_view column) const {
    for (const auto& e : entries) {
      if (e.model_tag == model && e.column_tag == column) return e.ratio;
    }
    throw ConfigError("no ratio for " + std::string(model) + " / " + std::string(column));
  }
};

inline std::string column_label(std::size_t batch_size) {
  return batch_size == 1 ? "Single Image" : std::to_string(batch_size) + " images";
}

inline LatencyRow make_latency_row(std::size_t batch_size, std::size_t n_images, double total_s) {
  if (batch_size < 1 || n_images < 1) throw ConfigError("latency row needs batch_size >= 1 and n_images >= 1");
  LatencyRow r;
  r.batch_size = batch_size;
  r.n_images = n_images;
  r.n_batches = batch_count(n_images, batch_size);
  r.total_s = total_s;
  r.per_batch_s = total_s / static_cast<double>(r.n_batches);
  r.per_image_s = total_s / static_cast<double>(n_images);
  r.column = column_label(batch_size);
  return r;
}

// Pins the calling thread to the core named by BENCH_PIN_CPU, if set.
inline std::optional<int> pin_cpu_from_env() {
  const char* v = std::getenv("BENCH_PIN_CPU");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const long cpu = std::strtol(v, &end, 10);
  if (*end != '\0' || cpu < 0 || cpu >= CPU_SETSIZE) throw ConfigError("BENCH_PIN_CPU must be a CPU index, got '" + std::string(v) + "'");
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(static_cast<int>(cpu), &set);
  if (sched_setaffinity(0, sizeof(set), &set) != 0) throw ConfigError("cannot pin to CPU " + std::to_string(cpu));
  return static_cast<int>(cpu);
}

namespace detail {

// Batches stacked once, before any clock starts; run() times one full pass.
class PassTimer {
 public:
  PassTimer(const Model& model, const std::vector<ImageRecord>& records, std::size_t batch_size)
      : model_(&model), batches_(make_batches(records, {batch_size, false, 0, false})) {}

  double run() {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& b : batches_) sink_ = sink_ + forward(model_->spec, model_->params, b.images).front();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

 private:
  const Model* model_;
  std::vector<Batch> batches_;
  volatile float sink_ = 0;
};

inline void check_timing_args(const std::vector<ImageRecord>& records, std::size_t repeats, std::size_t warmup) {
  if (records.empty()) throw ConfigError("time_inference: no records");
  if (repeats < 5) throw ConfigError("time_inference: repeats must be >= 5");
  if (warmup < 1) throw ConfigError("time_inference: warmup must be >= 1");
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Median wall time to push every record through the model once.
inline LatencyRow time_inference(const Model& model, const std::vector<ImageRecord>& records, std::size_t batch_size,
                                 std::size_t repeats = 5, std::size_t warmup = 1) {
  detail::check_timing_args(records, repeats, warmup);
  detail::PassTimer timer(model, records, batch_size);
  for (std::size_t i = 0; i < warmup; ++i) timer.run();
  std::vector<double> times(repeats);
  for (auto& t : times) t = timer.run();
  return make_latency_row(batch_size, records.size(), detail::median(times));
}

// Sizes above the record count collapse onto the record count. Repeats are
// interleaved across sizes so slow drift in machine speed hits every size
// alike instead of skewing the comparison between them.
inline LatencyReport latency_sweep(const Model& model, const std::vector<ImageRecord>& records,
                                   std::vector<std::size_t> sizes = kDefaultBatchSizes, std::size_t repeats = 5,
                                   std::size_t warmup = 1, std::string model_tag = "castnet-tiny") {
  if (records.empty()) throw ConfigError("latency_sweep: no records");
  detail::check_timing_args(records, repeats, warmup);
  for (auto& s : sizes) {
    if (s < 1) throw ConfigError("latency_sweep: batch sizes must be >= 1");
    s = std::min(s, records.size());
  }
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<detail::PassTimer> timers;
  timers.reserve(sizes.size());
  for (auto s : sizes) timers.emplace_back(model, records, s);
  for (std::size_t i = 0; i < warmup; ++i) {
    for (auto& t : timers) t.run();
  }
  std::vector<std::vector<double>> times(sizes.size());
  for (std::size_t r = 0; r < repeats; ++r) {
    for (std::size_t k = 0; k < timers.size(); ++k) times[k].push_back(timers[k].run());
  }
  LatencyReport rep;
  rep.model_tag = std::move(model_tag);
  rep.environment = {1, warmup, repeats};
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    rep.rows.push_back(make_latency_row(sizes[k], records.size(), detail::median(times[k])));
  }
  return rep;
}

// Published per-batch CPU timings in seconds.
struct ReferenceTiming {
  std::string_view model;
  std::array<double, 5> per_batch_s;
};

inline constexpr std::array<std::size_t, 5> kReferenceBatchSizes{1, 10, 50, 100, 700};

inline constexpr std::array<ReferenceTiming, 4> kReferenceTimings{{
    {"Custom", {0.0176, 0.1344, 0.3936, 1.1853, 12.6198}},
    {"MobileNetV2", {0.0456, 0.3151, 1.2970, 2.6959, 21.7204}},
    {"NasNet", {0.0572, 1.1835, 3.5687, 3.5167, 26.6517}},
    {"Resnet50", {0.1596, 1.3304, 3.5780, 9.5807, 76.7329}},
}};

// Published speed ratios against the custom model, as printed.
inline constexpr std::array<ReferenceTiming, 3> kPublishedSpeedRatios{{
    {"MobileNetV2", {2.58, 2.34, 3.30, 2.27, 1.72}},
    {"NasNet", {3.23, 8.81, 9.07, 2.97, 2.11}},
    {"Resnet50", {9.02, 9.90, 9.09, 8.08, 6.08}},
}};

struct PublishedSizeRatio {
  std::string_view model;
  double params, size;
};

inline constexpr std::array<PublishedSizeRatio, 3> kPublishedSizeRatios{{
    {"MobileNetV2", 386, 119},
    {"NasNet", 728, 229},
    {"Resnet50", 4022, 1186},
}};

// The published timings only give time per batch, so each row is one batch.
inline std::vector<LatencyReport> reference_latency_reports() {
  std::vector<LatencyReport> out;
  for (const auto& t : kReferenceTimings) {
    LatencyReport r;
    r.model_tag = std::string(t.model);
    r.environment = {1, 0, 1};
    for (std::size_t i = 0; i < kReferenceBatchSizes.size(); ++i) {
      r.rows.push_back(make_latency_row(kReferenceBatchSizes[i], kReferenceBatchSizes[i], t.per_batch_s[i]));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline SpeedRatioTable param_size_ratios(std::span<const ReferenceModelStats> stats, std::string_view baseline) {
  const auto base = std::find_if(stats.begin(), stats.end(), [&](const auto& s) { return s.name == baseline; });
  if (base == stats.end()) throw ConfigError("baseline '" + std::string(baseline) + "' not among the models");
  if (base->total_params == 0 || base->size_mb <= 0) throw ConfigError("baseline has zero parameters or size");
  SpeedRatioTable t;
  t.baseline_tag = std::string(baseline);
  for (const auto& s : stats) {
    t.entries.push_back({std::string(s.name), "params",
                         static_cast<double>(s.total_params) / static_cast<double>(base->total_params)});
    t.entries.push_back({std::string(s.name), "size", s.size_mb / base->size_mb});
  }
  return t;
}

inline SpeedRatioTable speed_ratios(const std::vector<LatencyReport>& reports, std::string_view baseline_tag) {
  const auto base = std::find_if(reports.begin(), reports.end(), [&](const auto& r) { return r.model_tag == baseline_tag; });
  if (base == reports.end()) throw ConfigError("baseline '" + std::string(baseline_tag) + "' not among the reports");
  SpeedRatioTable t;
  t.baseline_tag = std::string(baseline_tag);
  for (const auto& rep : reports) {
    for (const auto& brow : base->rows) {
      const auto it = std::find_if(rep.rows.begin(), rep.rows.end(), [&](const auto& r) { return r.column == brow.column; });
      if (it == rep.rows.end()) throw ConfigError(rep.model_tag + " has no '" + brow.column + "' column");
      if (brow.per_batch_s <= 0) throw ConfigError("baseline time for '" + brow.column + "' is not positive");
      t.entries.push_back({rep.model_tag, brow.column, it->per_batch_s / brow.per_batch_s});
    }
  }
  return t;
}

inline SpeedRatioTable published_speed_table() {
  SpeedRatioTable t;
  t.baseline_tag = "Custom";
  for (std::size_t i = 0; i < kReferenceBatchSizes.size(); ++i) {
    t.entries.push_back({"Custom", column_label(kReferenceBatchSizes[i]), 1.0});
  }
  for (const auto& p : kPublishedSpeedRatios) {
    for (std::size_t i = 0; i < kReferenceBatchSizes.size(); ++i) {
      t.entries.push_back({std::string(p.model), column_label(kReferenceBatchSizes[i]), p.per_batch_s[i]});
    }
  }
  return t;
}

// Fastest first, keyed on the smallest batch size.
inline void sort_by_latency(std::vector<LatencyReport>& reports) {
  auto key = [](const LatencyReport& r) { return r.rows.empty() ? 0.0 : r.rows.front().per_batch_s; };
  std::stable_sort(reports.begin(), reports.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
}

struct BenchReport {
  std::string mode;  // "reference" or "measured"
  std::vector<LatencyReport> latency;
  std::optional<SpeedRatioTable> size_ratios;
  SpeedRatioTable speed_ratios;
  std::optional<SpeedRatioTable> published_speed;
  friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

inline BenchReport reference_bench_report() {
  BenchReport b;
  b.mode = "reference";
  b.latency = reference_latency_reports();
  sort_by_latency(b.latency);
  b.size_ratios = param_size_ratios(reference_stats(), "Custom");
  b.speed_ratios = speed_ratios(b.latency, "Custom");
  b.published_speed = published_speed_table();
  return b;
}

inline BenchReport measured_bench_report(std::vector<LatencyReport> reports, std::string_view baseline_tag) {
  BenchReport b;
  b.mode = "measured";
  sort_by_latency(reports);
  b.latency = std::move(reports);
  b.speed_ratios = speed_ratios(b.latency, baseline_tag);
  return b;
}

// JSON (de)serialization, found by nlohmann through ADL.
inline void to_json(nlohmann::json& j, const LatencyRow& r) {
  j = {{"batch_size", r.batch_size}, {"n_images", r.n_images}, {"n_batches", r.n_batches}, {"total_s", r.total_s},
       {"per_batch_s", r.per_batch_s}, {"per_image_s", r.per_image_s}, {"column", r.column}};
}
inline void from_json(const nlohmann::json& j, LatencyRow& r) {
  j.at("batch_size").get_to(r.batch_size);
  j.at("n_images").get_to(r.n_images);
  j.at("n_batches").get_to(r.n_batches);
  j.at("total_s").get_to(r.total_s);
  j.at("per_batch_s").get_to(r.per_batch_s);
  j.at("per_image_s").get_to(r.per_image_s);
  j.at("column").get_to(r.column);
}
inline void to_json(nlohmann::json& j, const BenchEnvironment& e) {
  j = {{"thread_count", e.thread_count}, {"warmup_runs", e.warmup_runs}, {"repeats", e.repeats}};
}
inline void from_json(const nlohmann::json& j, BenchEnvironment& e) {
  j.at("thread_count").get_to(e.thread_count);
  j.at("warmup_runs").get_to(e.warmup_runs);
  j.at("repeats").get_to(e.repeats);
}
inline void to_json(nlohmann::json& j, const LatencyReport& r) {
  j = {{"model_tag", r.model_tag}, {"rows", r.rows}, {"environment", r.environment}};
}
inline void from_json(const nlohmann::json& j, LatencyReport& r) {
  j.at("model_tag").get_to(r.model_tag);
  j.at("rows").get_to(r.rows);
  j.at("environment").get_to(r.environment);
}
inline void to_json(nlohmann::json& j, const RatioEntry& e) {
  j = {{"model_tag", e.model_tag}, {"column_tag", e.column_tag}, {"ratio", e.ratio}};
}
inline void from_json(const nlohmann::json& j, RatioEntry& e) {
  j.at("model_tag").get_to(e.model_tag);
  j.at("column_tag").get_to(e.column_tag);
  j.at("ratio").get_to(e.ratio);
}
inline void to_json(nlohmann::json& j, const SpeedRatioTable& t) {
  j = {{"baseline_tag", t.baseline_tag}, {"entries", t.entries}};
}
inline void from_json(const nlohmann::json& j, SpeedRatioTable& t) {
  j.at("baseline_tag").get_to(t.baseline_tag);
  j.at("entries").get_to(t.entries);
}
inline void to_json(nlohmann::json& j, const BenchReport& b) {
  j = {{"mode", b.mode}, {"latency", b.latency}, {"speed_ratios", b.speed_ratios}};
  j["size_ratios"] = b.size_ratios ? nlohmann::json(*b.size_ratios) : nlohmann::json(nullptr);
  j["published_speed_ratios"] = b.published_speed ? nlohmann::json(*b.published_speed) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, BenchReport& b) {
  j.at("mode").get_to(b.mode);
  j.at("latency").get_to(b.latency);
  j.at("speed_ratios").get_to(b.speed_ratios);
  b.size_ratios = j.at("size_ratios").is_null() ? std::nullopt
                                                : std::optional(j.at("size_ratios").get<SpeedRatioTable>());
  b.published_speed = j.at("published_speed_ratios").is_null()
                          ? std::nullopt
                          : std::optional(j.at("published_speed_ratios").get<SpeedRatioTable>());
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

inline std::vector<std::string> model_order(const SpeedRatioTable& t) {
  std::vector<std::string> out;
  for (const auto& e : t.entries) {
    if (std::find(out.begin(), out.end(), e.model_tag) == out.end()) out.push_back(e.model_tag);
  }
  return out;
}

inline std::vector<std::string> column_order(const SpeedRatioTable& t) {
  std::vector<std::string> out;
  for (const auto& e : t.entries) {
    if (std::find(out.begin(), out.end(), e.column_tag) == out.end()) out.push_back(e.column_tag);
  }
  return out;
}

inline void ratio_table_md(std::ostream& os, const SpeedRatioTable& t, const char* f) {
  const auto cols = column_order(t);
  os << "| Model |";
  for (const auto& c : cols) os << ' ' << c << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& m : model_order(t)) {
    os << "| " << m << " |";
    for (const auto& c : cols) os << ' ' << fmt(f, t.at(m, c)) << " |";
    os << '\n';
  }
}

}  // namespace detail

inline std::string render_markdown(const BenchReport& b) {
  std::ostringstream os;
  os << "# Inference benchmark (" << b.mode << " mode)\n\n";
  if (b.size_ratios) {
    os << "## Parameter and size ratios (baseline " << b.size_ratios->baseline_tag << ")\n\n";
    os << "| Model | Parameters | Model size |\n|---|---|---|\n";
    for (const auto& m : detail::model_order(*b.size_ratios)) {
      os << "| " << m << " | " << detail::fmt("%.0fx", b.size_ratios->at(m, "params")) << " | "
         << detail::fmt("%.0fx", b.size_ratios->at(m, "size")) << " |\n";
    }
    os << '\n';
  }
  os << "## Time per batch (s)\n\n";
  if (!b.latency.empty()) {
    os << "| Model |";
    for (const auto& r : b.latency.front().rows) os << ' ' << r.column << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < b.latency.front().rows.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& rep : b.latency) {
      os << "| " << rep.model_tag << " |";
      for (const auto& r : rep.rows) os << ' ' << detail::fmt("%.4f", r.per_batch_s) << " |";
      os << '\n';
    }
    os << '\n';
  }
  if (b.published_speed) {
    os << "## Speed ratios, published (baseline " << b.published_speed->baseline_tag << ")\n\n";
    detail::ratio_table_md(os, *b.published_speed, "%.2fx");
    os << '\n';
  }
  os << "## Speed ratios, recomputed from time per batch (baseline " << b.speed_ratios.baseline_tag << ")\n\n";
  detail::ratio_table_md(os, b.speed_ratios, "%.2fx");
  return os.str();
}

// Writes latency_report.csv, plot_data.csv and ratios.{csv,json,md} under dir.
inline void emit_report(const BenchReport& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::trunc | std::ios::binary);
    if (!f) throw DataError("cannot write '" + (dir / name).string() + "'");
    f << std::setprecision(17);
    return f;
  };
  {
    auto f = open("latency_report.csv");
    f << "model_tag,batch_size,n_batches,total_s,per_batch_s,per_image_s\n";
    for (const auto& rep : b.latency) {
      for (const auto& r : rep.rows) {
        f << rep.model_tag << ',' << r.batch_size << ',' << r.n_batches << ',' << r.total_s << ',' << r.per_batch_s
          << ',' << r.per_image_s << '\n';
      }
    }
  }
  {
    auto f = open("plot_data.csv");
    f << "batch_size,model_tag,per_batch_s\n";
    for (const auto& rep : b.latency) {
      for (const auto& r : rep.rows) f << r.batch_size << ',' << rep.model_tag << ',' << r.per_batch_s << '\n';
    }
  }
  {
    auto f = open("ratios.csv");
    f << "table,model_tag,column_tag,ratio\n";
    auto dump = [&](const char* table, const SpeedRatioTable& t) {
      for (const auto& e : t.entries) f << table << ',' << e.model_tag << ',' << e.column_tag << ',' << e.ratio << '\n';
    };
    if (b.size_ratios) dump("params_size", *b.size_ratios);
    dump("speed", b.speed_ratios);
    if (b.published_speed) dump("speed_published", *b.published_speed);
  }
  open("ratios.json") << nlohmann::json(b).dump(2) << '\n';
  open("ratios.md") << render_markdown(b);
}

inline BenchReport load_bench_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(f).get<BenchReport>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed bench report '" + path.string() + "': " + e.what());
  }
}

}  // namespace castnet
