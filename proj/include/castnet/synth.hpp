#pragma once

// Procedural impeller images standing in for the casting photographs: a
// bright rim annulus, hub with bore, and radial spokes on a dark
// background. Defective parts carry a rim notch, a blowhole in the rim, or a
// broken spoke.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "castnet/dataio.hpp"
#include "castnet/image_io.hpp"
#include "castnet/rng.hpp"

namespace castnet {

enum class DefectKind { none, notch, hole, broken_spoke };

struct SynthRecord {
  ImageRecord record;
  std::uint64_t image_seed = 0;
  DefectKind defect = DefectKind::none;
};

namespace detail {

constexpr std::size_t kSpokes = 6;

inline double coverage(double signed_dist) { return std::clamp(signed_dist + 0.5, 0.0, 1.0); }

inline Tensor<float> render_impeller(std::size_t size, DefectKind defect, std::uint64_t image_seed) {
  std::mt19937_64 rng(image_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double s = static_cast<double>(size);
  const double cx = s / 2 + uni(-0.03, 0.03) * s;
  const double cy = s / 2 + uni(-0.03, 0.03) * s;
  const double r_out = 0.40 * s * uni(0.9, 1.1);
  const double r_in = 0.66 * r_out;
  const double r_hub = 0.24 * r_out;
  const double r_bore = 0.09 * r_out;
  const double spoke_half = 0.07 * r_out;
  const double phase = uni(0.0, 2 * std::numbers::pi);

  const double defect_angle = uni(0.0, 2 * std::numbers::pi);
  const std::size_t broken = static_cast<std::size_t>(unit(rng) * kSpokes) % kSpokes;
  const double notch_r = 0.28 * r_out;
  const double hole_r = 0.16 * r_out;
  const double hole_dist = 0.5 * (r_in + r_out);
  const double dx_def = std::cos(defect_angle), dy_def = std::sin(defect_angle);

  // every defective part also carries a cluster of pinholes in the rim
  struct Pit {
    double x, y;
  };
  std::vector<Pit> pits;
  const double pit_r = std::max(0.06 * r_out, 0.9);
  if (defect != DefectKind::none) {
    const auto n_pits = 4 + static_cast<std::size_t>(unit(rng) * 5);
    for (std::size_t k = 0; k < n_pits; ++k) {
      const double a = defect_angle + uni(-1.2, 1.2);
      const double d = uni(r_in + pit_r, r_out - pit_r);
      pits.push_back({d * std::cos(a), d * std::sin(a)});
    }
  }

  constexpr double background = 0.15, metal = 0.75;
  std::normal_distribution<double> noise(0.0, 0.02);
  Tensor<float> img({size, size, 1});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5 - cx;
      const double py = static_cast<double>(y) + 0.5 - cy;
      const double r = std::hypot(px, py);
      double m = std::min(coverage(r_out - r), coverage(r - r_in));
      m = std::max(m, std::min(coverage(r_hub - r), coverage(r - r_bore)));
      if (r > r_hub - 1 && r < r_in + 1) {
        for (std::size_t k = 0; k < kSpokes; ++k) {
          const double a = phase + 2 * std::numbers::pi * static_cast<double>(k) / kSpokes;
          const double along = px * std::cos(a) + py * std::sin(a);
          const double across = std::abs(-px * std::sin(a) + py * std::cos(a));
          if (along <= 0) continue;
          double sm = coverage(spoke_half - across);
          if (defect == DefectKind::broken_spoke && k == broken) {
            const double gap_lo = r_hub + 0.20 * (r_in - r_hub), gap_hi = r_hub + 0.85 * (r_in - r_hub);
            sm *= 1.0 - std::min(coverage(along - gap_lo), coverage(gap_hi - along));
          }
          m = std::max(m, sm);
        }
      }
      if (defect == DefectKind::notch) {
        m *= 1.0 - coverage(notch_r - std::hypot(px - r_out * dx_def, py - r_out * dy_def));
      } else if (defect == DefectKind::hole) {
        m *= 1.0 - coverage(hole_r - std::hypot(px - hole_dist * dx_def, py - hole_dist * dy_def));
      }
      for (const auto& pit : pits) m *= 1.0 - 0.8 * coverage(pit_r - std::hypot(px - pit.x, py - pit.y));
      const double v = background + (metal - background) * m + noise(rng);
      img[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace detail

// n images, exactly round(n * defect_fraction) of them defective; the
// defective subset, defect kinds and all geometry come from `seed`.
inline std::vector<SynthRecord> synth_generate_detailed(std::size_t n, double defect_fraction, std::size_t image_size,
                                                        std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic dataset needs n >= 1");
  if (!(defect_fraction >= 0.0 && defect_fraction <= 1.0)) throw ConfigError("defect fraction must lie in [0,1]");
  if (image_size < 32) throw ConfigError("synthetic image size must be >= 32, got " + std::to_string(image_size));
  const auto n_def = static_cast<std::size_t>(std::llround(static_cast<double>(n) * defect_fraction));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0xD3FEC7));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_def(n, false);
  for (std::size_t i = 0; i < n_def; ++i) is_def[order[i]] = true;

  std::vector<SynthRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SynthRecord sr;
    sr.image_seed = mix_seed(seed, i);
    if (is_def[i]) sr.defect = static_cast<DefectKind>(1 + sr.image_seed % 3);
    sr.record.pixels = detail::render_impeller(image_size, sr.defect, sr.image_seed);
    sr.record.label = is_def[i] ? Label::defective : Label::ok;
    sr.record.source_id = "synth:" + std::to_string(seed) + ":" + std::to_string(i);
    out.push_back(std::move(sr));
  }
  return out;
}

inline std::vector<ImageRecord> synth_generate(std::size_t n, double defect_fraction, std::size_t image_size,
                                               std::uint64_t seed) {
  std::vector<ImageRecord> out;
  for (auto& sr : synth_generate_detailed(n, defect_fraction, image_size, seed)) out.push_back(std::move(sr.record));
  return out;
}

// Train and test sets drawn from independent seed streams.
inline RawDataset synth_dataset(std::size_t n_train, std::size_t n_test, double defect_fraction, std::size_t image_size,
                                std::uint64_t seed) {
  RawDataset ds;
  ds.train = synth_generate(n_train, defect_fraction, image_size, mix_seed(seed, 1));
  ds.test = synth_generate(n_test, defect_fraction, image_size, mix_seed(seed, 2));
  return ds;
}

// Writes the casting-dataset layout plus manifest.csv (source_id,label,seed).
inline void write_synth_dataset(const std::filesystem::path& root, std::size_t n_train, std::size_t n_test,
                                double defect_fraction, std::size_t image_size, std::uint64_t seed) {
  std::ofstream manifest;
  for (const auto& [part, n, stream] : {std::tuple{"train", n_train, 1u}, std::tuple{"test", n_test, 2u}}) {
    for (const char* cls : {kOkDir, kDefectDir}) std::filesystem::create_directories(root / part / cls);
    if (!manifest.is_open()) {
      manifest.open(root / "manifest.csv", std::ios::trunc);
      if (!manifest) throw DataError("cannot write '" + (root / "manifest.csv").string() + "'");
      manifest << "source_id,label,seed\n";
    }
    const auto recs = synth_generate_detailed(n, defect_fraction, image_size, mix_seed(seed, stream));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& sr = recs[i];
      const bool def = sr.record.label == Label::defective;
      char name[32];
      std::snprintf(name, sizeof(name), "impeller_%05zu.png", i);
      const auto rel = std::filesystem::path(part) / (def ? kDefectDir : kOkDir) / name;
      write_png_gray(root / rel, sr.record.pixels);
      manifest << rel.generic_string() << ',' << (def ? 1 : 0) << ',' << sr.image_seed << '\n';
    }
  }
}

}  // namespace castnet
