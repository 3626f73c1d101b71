#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "castnet/bench.hpp"
#include "castnet/synth.hpp"

using namespace castnet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(TimePerBatch, RowArithmetic) {
  const auto r = make_latency_row(100, 800, 12.0);
  EXPECT_EQ(r.n_batches, 8u);
  EXPECT_DOUBLE_EQ(r.per_batch_s, 1.5);
  EXPECT_DOUBLE_EQ(r.per_image_s, 0.015);
  const auto one = make_latency_row(715, 715, 3.0);
  EXPECT_EQ(one.n_batches, 1u);
  EXPECT_EQ(one.per_batch_s, one.total_s);
  EXPECT_EQ(make_latency_row(100, 715, 1.0).n_batches, 8u);
  EXPECT_THROW(make_latency_row(0, 10, 1.0), ConfigError);
}

TEST(TimePerBatch, IdentityOnRandomRows) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(1e-4, 100);
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 1 + rng() % 2000, b = 1 + rng() % 800;
    const auto r = make_latency_row(b, n, u(rng));
    EXPECT_NEAR(r.per_batch_s * static_cast<double>(r.n_batches), r.total_s, 1e-12);
    if (n % b == 0) {
      EXPECT_NEAR(r.per_image_s, r.per_batch_s / static_cast<double>(b), 1e-12);
    }
  }
}

TEST(Ratios, ParamsAndSizeAgainstPublished) {
  const auto t = param_size_ratios(reference_stats(), "Custom");
  // oracle: plain division of the published parameter counts and sizes
  EXPECT_NEAR(t.at("Resnet50", "params"), 23591810.0 / 5865.0, 1e-9);
  for (const auto& p : kPublishedSizeRatios) {
    EXPECT_LE(std::abs(std::round(t.at(p.model, "params")) - p.params), 1.0) << p.model;
    EXPECT_EQ(std::round(t.at(p.model, "size")), p.size) << p.model;
  }
  EXPECT_EQ(std::round(t.at("Resnet50", "params")), 4022.0);
  EXPECT_EQ(std::round(t.at("NasNet", "size")), 229.0);
  const double mobilenet = std::round(t.at("MobileNetV2", "params"));
  EXPECT_TRUE(mobilenet == 385.0 || mobilenet == 386.0);
  EXPECT_EQ(t.at("Custom", "params"), 1.0);
  EXPECT_THROW(param_size_ratios(reference_stats(), "VGG"), ConfigError);
}

TEST(Ratios, SpeedTableFromPublishedTimings) {
  const auto reports = reference_latency_reports();
  const auto t = speed_ratios(reports, "Custom");
  EXPECT_NEAR(t.at("Resnet50", "10 images"), 1.3304 / 0.1344, 1e-12);
  EXPECT_NEAR(t.at("Resnet50", "10 images"), 9.90, 0.005);
  EXPECT_NEAR(t.at("MobileNetV2", "700 images"), 1.72, 0.005);
  for (const auto& c : {"Single Image", "10 images", "50 images", "100 images", "700 images"}) {
    EXPECT_EQ(t.at("Custom", c), 1.0);
  }
  const auto pub = published_speed_table();
  for (const auto& e : pub.entries) EXPECT_LE(std::abs(t.at(e.model_tag, e.column_tag) - e.ratio), 0.06) << e.model_tag;
}

TEST(Ratios, SpeedRatioErrors) {
  auto reports = reference_latency_reports();
  EXPECT_THROW(speed_ratios(reports, "AlexNet"), ConfigError);
  reports[1].rows.pop_back();
  EXPECT_THROW(speed_ratios(reports, "Custom"), ConfigError);
}

TEST(Report, ReferenceOrderingAndMarkdown) {
  const auto b = reference_bench_report();
  std::vector<std::string> order;
  for (const auto& r : b.latency) order.push_back(r.model_tag);
  EXPECT_EQ(order, (std::vector<std::string>{"Custom", "MobileNetV2", "NasNet", "Resnet50"}));
  const auto md = render_markdown(b);
  EXPECT_NE(md.find("| Resnet50 | 9.02x | 9.90x | 9.09x | 8.08x | 6.08x |"), std::string::npos) << md;
  EXPECT_NE(md.find("| Resnet50 | 4022x | 1186x |"), std::string::npos);
  EXPECT_NE(md.find("| Custom | 0.0176 | 0.1344 | 0.3936 | 1.1853 | 12.6198 |"), std::string::npos);
}

TEST(Report, EmissionIsDeterministicAndJsonRoundTrips) {
  const auto b = reference_bench_report();
  const fs::path d1 = fs::temp_directory_path() / "castnet_bench_a", d2 = fs::temp_directory_path() / "castnet_bench_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  emit_report(b, d1);
  emit_report(b, d2);
  for (const char* f : {"latency_report.csv", "plot_data.csv", "ratios.csv", "ratios.json", "ratios.md"}) {
    ASSERT_TRUE(fs::exists(d1 / f)) << f;
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
  EXPECT_EQ(load_bench_json(d1 / "ratios.json"), b);
  std::istringstream lat(slurp(d1 / "latency_report.csv"));
  std::string header;
  std::getline(lat, header);
  EXPECT_EQ(header, "model_tag,batch_size,n_batches,total_s,per_batch_s,per_image_s");
  std::istringstream plot(slurp(d1 / "plot_data.csv"));
  std::getline(plot, header);
  EXPECT_EQ(header, "batch_size,model_tag,per_batch_s");
}

TEST(Measured, SweepStructure) {
  Model m{build_castnet_tiny({32, 32, 1}), {}};
  m.params = init_params<float>(m.spec, 1);
  const auto recs = synth_generate(23, 0.5, 32, 2);
  const auto rep = latency_sweep(m, recs, {50, 1, 10}, 5, 1);
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.rows[0].batch_size, 1u);
  EXPECT_EQ(rep.rows[1].batch_size, 10u);
  EXPECT_EQ(rep.rows[2].batch_size, 23u);  // trimmed to what exists
  EXPECT_EQ(rep.rows[1].n_batches, 3u);
  for (const auto& r : rep.rows) {
    EXPECT_GT(r.total_s, 0.0);
    EXPECT_NEAR(r.per_batch_s * static_cast<double>(r.n_batches), r.total_s, 1e-12);
  }
  const auto again = latency_sweep(m, recs, {50, 1, 10}, 5, 1);
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    EXPECT_EQ(rep.rows[i].n_batches, again.rows[i].n_batches);
    EXPECT_EQ(rep.rows[i].column, again.rows[i].column);
  }
  EXPECT_THROW(time_inference(m, recs, 4, 3, 1), ConfigError);
  EXPECT_THROW(time_inference(m, {}, 4), ConfigError);

  auto other = rep;
  other.model_tag = "slow";
  for (auto& r : other.rows) r = make_latency_row(r.batch_size, r.n_images, r.total_s * 2);
  const auto b = measured_bench_report({other, rep}, "castnet-tiny");
  EXPECT_EQ(b.latency.front().model_tag, "castnet-tiny");
  EXPECT_NEAR(b.speed_ratios.at("slow", "10 images"), 2.0, 1e-12);
}
