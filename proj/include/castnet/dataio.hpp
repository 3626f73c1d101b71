#pragma once

// Labeled grayscale image records: directory loading, colour conversion,
// train/validation splitting and deterministic batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "castnet/errors.hpp"
#include "castnet/image_io.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

enum class Label : int { ok = 0, defective = 1 };

inline constexpr const char* kOkDir = "ok_front";
inline constexpr const char* kDefectDir = "def_front";

struct ImageRecord {
  Tensor<float> pixels;  // (H, W, 1), values in [0, 1]
  Label label = Label::ok;
  std::string source_id;
};

struct RawDataset {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> test;
  std::vector<std::string> warnings;
};

struct DatasetSplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> validation;
  std::vector<ImageRecord> test;
  std::uint64_t seed = 0;
};

struct BatchPlan {
  std::size_t batch_size = 32;
  bool shuffle = false;
  std::uint64_t seed = 0;
  bool drop_last = false;
};

struct Batch {
  Tensor<float> images;  // (B, H, W, 1)
  std::vector<float> labels;
  std::vector<std::size_t> indices;  // positions in the source record list
};

// BT.601 luma on an (H, W, 3) tensor in [0, 255].
inline Tensor<float> to_grayscale(const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) {
    throw ShapeError("to_grayscale expects (H,W,3), got " + shape_str(rgb.shape()));
  }
  const std::size_t h = rgb.dim(0), w = rgb.dim(1);
  Tensor<float> out({h, w, 1});
  for (std::size_t i = 0; i < h * w; ++i) {
    const double y = 0.299 * rgb[i * 3] + 0.587 * rgb[i * 3 + 1] + 0.114 * rgb[i * 3 + 2];
    out[i] = static_cast<float>(y);
  }
  return out;
}

inline Tensor<float> rescale(const Tensor<float>& gray) {
  Tensor<float> out = gray;
  for (auto& v : out.data()) {
    if (!(v >= 0.f && v <= 255.f)) throw ConfigError("rescale: value " + std::to_string(v) + " outside [0,255]");
    v /= 255.f;
  }
  return out;
}

// Bilinear resize of (H, W, C) with edge clamping, half-pixel centers.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Tensor<float> out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img[(yy * w + xx) * c + ch]); };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
        out[(y * out_w + x) * c + ch] = static_cast<float>(v);
      }
    }
  }
  return out;
}

// Decodes one file into a grayscale [0,1] image, optionally resized to
// image_size x image_size.
inline Tensor<float> load_gray_image(const std::filesystem::path& path, std::size_t image_size = 0) {
  Tensor<float> rgb = read_image_rgb(path);
  if (image_size > 0) rgb = resize_bilinear(rgb, image_size, image_size);
  // bilinear weights can overshoot [0,255] by rounding only
  for (auto& v : rgb.data()) v = std::clamp(v, 0.f, 255.f);
  return rescale(to_grayscale(rgb));
}

namespace detail {

inline std::vector<std::filesystem::path> sorted_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<ImageRecord> load_split(const std::filesystem::path& dir, std::size_t image_size,
                                           std::vector<std::string>& warnings) {
  std::vector<ImageRecord> out;
  for (const auto& [name, label] : {std::pair{kOkDir, Label::ok}, std::pair{kDefectDir, Label::defective}}) {
    const auto class_dir = dir / name;
    if (!std::filesystem::is_directory(class_dir)) {
      throw DataError("missing class directory '" + class_dir.string() + "'");
    }
    const auto files = sorted_images(class_dir);
    if (files.empty()) warnings.push_back("class directory '" + class_dir.string() + "' contains no images");
    for (const auto& f : files) out.push_back({load_gray_image(f, image_size), label, f.string()});
  }
  return out;
}

}  // namespace detail

// root/{train,test}/{ok_front,def_front}/*.png|jpg. Records come back in
// class order (ok, then defective), files sorted lexicographically.
inline RawDataset load_dataset(const std::filesystem::path& root, std::size_t image_size = 0) {
  RawDataset ds;
  for (const char* part : {"train", "test"}) {
    if (!std::filesystem::is_directory(root / part)) {
      throw DataError("dataset directory '" + (root / part).string() + "' does not exist");
    }
  }
  ds.train = detail::load_split(root / "train", image_size, ds.warnings);
  ds.test = detail::load_split(root / "test", image_size, ds.warnings);
  return ds;
}

// Seeded unstratified shuffle; floor(fraction * n) records go to validation.
inline std::pair<std::vector<ImageRecord>, std::vector<ImageRecord>> split_train_val(
    std::vector<ImageRecord> records, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0,1)");
  if (records.size() < 2) throw ConfigError("need at least 2 records to split, got " + std::to_string(records.size()));
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(records.size())));
  std::pair<std::vector<ImageRecord>, std::vector<ImageRecord>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? out.second : out.first).push_back(std::move(records[order[i]]));
  }
  return out;
}

inline DatasetSplit make_split(RawDataset raw, double val_fraction, std::uint64_t seed) {
  DatasetSplit s;
  std::tie(s.train, s.validation) = split_train_val(std::move(raw.train), val_fraction, seed);
  s.test = std::move(raw.test);
  s.seed = seed;
  return s;
}

inline std::size_t batch_count(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

inline Tensor<float> stack_records(const std::vector<ImageRecord>& records, std::span<const std::size_t> indices) {
  std::vector<const Tensor<float>*> ptrs;
  ptrs.reserve(indices.size());
  for (auto i : indices) ptrs.push_back(&records[i].pixels);
  return stack<float>(ptrs);
}

inline std::vector<Batch> make_batches(const std::vector<ImageRecord>& records, const BatchPlan& plan) {
  if (plan.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (records.empty()) throw ConfigError("cannot batch an empty record list");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  if (plan.shuffle) {
    std::mt19937_64 rng(plan.seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
    const std::size_t end = std::min(start + plan.batch_size, order.size());
    if (plan.drop_last && end - start < plan.batch_size) break;
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    b.images = stack_records(records, b.indices);
    for (auto i : b.indices) b.labels.push_back(static_cast<float>(records[i].label));
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<float> labels_of(const std::vector<ImageRecord>& records) {
  std::vector<float> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(static_cast<float>(r.label));
  return y;
}

}  // namespace castnet
