#pragma once

// Training-time augmentation: flips, rotation, zoom and ZCA whitening over
// single-channel (H, W, 1) images.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "castnet/dataio.hpp"
#include "castnet/errors.hpp"
#include "castnet/rng.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

// Seed used to build the reproducible augmented test set.
inline constexpr std::uint64_t kAugmentedTestSeed = 20220715;

// ZCA's D x D matrix grows with the square of the pixel count.
inline constexpr std::size_t kZcaMaxSide = 96;

struct AugmentConfig {
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double rotation_max_deg = 15.0;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
  bool zca = false;
  double zca_epsilon = 1e-2;
  std::uint64_t seed = 1234;

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.horizontal_flip = c.vertical_flip = false;
    c.rotation_max_deg = 0.0;
    c.zoom_lo = c.zoom_hi = 1.0;
    return c;
  }

  void validate() const {
    if (!(rotation_max_deg >= 0.0 && rotation_max_deg <= 180.0)) {
      throw ConfigError("rotation_max_deg must lie in [0,180]");
    }
    if (!(zoom_lo > 0.0 && zoom_lo <= 1.0 && zoom_hi >= 1.0)) throw ConfigError("zoom range must satisfy 0 < lo <= 1 <= hi");
    if (zca && !(zca_epsilon >= 0.0)) throw ConfigError("zca_epsilon must be >= 0");
  }
};

enum class FlipAxis { horizontal, vertical };

namespace detail {

inline void require_image(const Tensor<float>& img, const char* op) {
  if (img.rank() != 3) throw ShapeError(std::string(op) + ": expected (H,W,C) image, got " + shape_str(img.shape()));
}

template <typename T>
T tap(const Tensor<T>& img, std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
  const auto h = static_cast<std::ptrdiff_t>(img.dim(0)), w = static_cast<std::ptrdiff_t>(img.dim(1));
  if (y < 0 || x < 0 || y >= h || x >= w) return T{0};
  return img[(static_cast<std::size_t>(y) * img.dim(1) + static_cast<std::size_t>(x)) * img.dim(2) + c];
}

inline std::pair<double, double> exact_cos_sin(double degrees) {
  const double q = degrees / 90.0;
  if (q == std::round(q)) {
    switch (((static_cast<long>(q) % 4) + 4) % 4) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  const double r = degrees * std::numbers::pi / 180.0;
  return {std::cos(r), std::sin(r)};
}

}  // namespace detail

inline Tensor<float> flip(const Tensor<float>& img, FlipAxis axis) {
  detail::require_image(img, "flip");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = axis == FlipAxis::vertical ? h - 1 - y : y;
      const std::size_t sx = axis == FlipAxis::horizontal ? w - 1 - x : x;
      for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] = img[(sy * w + sx) * c + ch];
    }
  }
  return out;
}

// Rotation by `degrees` about the image centre combined with scaling by
// `zoom` (> 1 magnifies). Bilinear sampling, zero outside the source.
inline Tensor<float> affine_warp(const Tensor<float>& img, double degrees, double zoom) {
  detail::require_image(img, "affine_warp");
  if (!(zoom > 0.0)) throw ConfigError("zoom factor must be > 0");
  if (degrees == 0.0 && zoom == 1.0) return img;
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  const auto [cs, sn] = detail::exact_cos_sin(degrees);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) - cx) / zoom, dy = (static_cast<double>(y) - cy) / zoom;
      // inverse rotation maps output onto source
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double tx = sx - fx, ty = sy - fy;
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = (1 - ty) * ((1 - tx) * detail::tap(img, y0, x0, ch) + tx * detail::tap(img, y0, x0 + 1, ch)) +
                         ty * ((1 - tx) * detail::tap(img, y0 + 1, x0, ch) + tx * detail::tap(img, y0 + 1, x0 + 1, ch));
        out[(y * w + x) * c + ch] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Tensor<float> rotate(const Tensor<float>& img, double degrees) {
  if (std::abs(degrees) > 180.0) throw ConfigError("rotation must lie in [-180,180] degrees");
  return affine_warp(img, degrees, 1.0);
}

inline Tensor<float> zoom(const Tensor<float>& img, double factor) {
  if (!(factor > 0.0)) throw ConfigError("zoom factor must be > 0");
  return affine_warp(img, 0.0, factor);
}

struct ZcaTransform {
  Shape image_shape;
  Eigen::VectorXd mean;
  Eigen::MatrixXd whitening;  // U diag(1/sqrt(lambda + eps)) U^T
  double epsilon = 0.0;
};

// Fits on training images only: centre, covariance X^T X / (n-1),
// symmetric eigendecomposition.
template <typename T>
ZcaTransform zca_fit(std::span<const Tensor<T>> images, double epsilon) {
  if (images.size() < 2) throw ConfigError("zca_fit needs at least 2 images");
  const Shape shape = images.front().shape();
  if (shape.size() == 3 && (shape[0] > kZcaMaxSide || shape[1] > kZcaMaxSide)) {
    throw ConfigError("ZCA whitening is limited to images of at most " + std::to_string(kZcaMaxSide) + "x" +
                      std::to_string(kZcaMaxSide));
  }
  const auto n = static_cast<Eigen::Index>(images.size());
  const auto d = static_cast<Eigen::Index>(images.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    if (img.shape() != shape) throw ShapeError("zca_fit: images differ in shape");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = static_cast<double>(img[static_cast<std::size_t>(j)]);
  }
  ZcaTransform t;
  t.image_shape = shape;
  t.epsilon = epsilon;
  t.mean = x.colwise().mean().transpose();
  x.rowwise() -= t.mean.transpose();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("zca_fit: eigendecomposition failed");
  Eigen::VectorXd scale(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double lam = std::max(eig.eigenvalues()(i), 0.0) + epsilon;
    if (!(lam > 0.0)) {
      throw NumericError("zca_fit: covariance is singular and epsilon is 0; use a positive zca epsilon");
    }
    scale(i) = 1.0 / std::sqrt(lam);
  }
  const Eigen::MatrixXd& u = eig.eigenvectors();
  t.whitening = u * scale.asDiagonal() * u.transpose();
  t.whitening = 0.5 * (t.whitening + t.whitening.transpose()).eval();
  return t;
}

template <typename T>
Tensor<T> zca_apply(const ZcaTransform& t, const Tensor<T>& image) {
  if (image.size() != static_cast<std::size_t>(t.mean.size())) {
    throw ShapeError("zca_apply: image " + shape_str(image.shape()) + " does not match fitted shape " +
                     shape_str(t.image_shape));
  }
  Eigen::VectorXd v(t.mean.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<double>(image[static_cast<std::size_t>(i)]) - t.mean(i);
  const Eigen::VectorXd w = t.whitening * v;
  Tensor<T> out(image.shape());
  for (Eigen::Index i = 0; i < w.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<T>(w(i));
  return out;
}

// The random choices for one image. All four are drawn even when disabled
// so toggling one option does not shift the others.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double degrees = 0.0;
  double zoom = 1.0;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, std::uint64_t image_seed) {
  std::mt19937_64 rng(mix_seed(image_seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentDraw d;
  d.hflip = unit(rng) < 0.5;
  d.vflip = unit(rng) < 0.5;
  const double ru = unit(rng), zu = unit(rng);
  d.hflip = d.hflip && cfg.horizontal_flip;
  d.vflip = d.vflip && cfg.vertical_flip;
  d.degrees = -cfg.rotation_max_deg + 2.0 * cfg.rotation_max_deg * ru;
  d.zoom = cfg.zoom_lo + (cfg.zoom_hi - cfg.zoom_lo) * zu;
  return d;
}

inline Tensor<float> augment_image(const AugmentConfig& cfg, const Tensor<float>& img, std::uint64_t image_seed,
                                   const ZcaTransform* zca = nullptr) {
  const AugmentDraw d = draw_augment(cfg, image_seed);
  Tensor<float> out = img;
  if (d.hflip) out = flip(out, FlipAxis::horizontal);
  if (d.vflip) out = flip(out, FlipAxis::vertical);
  out = affine_warp(out, d.degrees, d.zoom);
  if (cfg.zca) {
    if (!zca) throw ConfigError("augment: ZCA enabled but no fitted transform supplied");
    out = zca_apply(*zca, out);
  }
  return out;
}

// Image i of the batch uses the substream seed `base_seed ^ (first_index + i)`,
// so results do not depend on batching or processing order.
inline Tensor<float> augment_batch(const AugmentConfig& cfg, const Tensor<float>& batch, std::uint64_t base_seed,
                                   const ZcaTransform* zca = nullptr, std::size_t first_index = 0) {
  if (batch.rank() != 4) throw ShapeError("augment_batch: expected (B,H,W,C), got " + shape_str(batch.shape()));
  cfg.validate();
  const std::size_t n = batch.dim(0), per = batch.size() / n;
  const Shape img_shape{batch.dim(1), batch.dim(2), batch.dim(3)};
  Tensor<float> out(batch.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> img(img_shape, std::vector<float>(batch.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                    batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    const auto a = augment_image(cfg, img, base_seed ^ (first_index + i), zca);
    std::copy(a.data().begin(), a.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

// The reproducible "augmented test dataset": every record passed through the
// augmentation pipeline with a fixed seed.
inline std::vector<ImageRecord> augment_records(const AugmentConfig& cfg, const std::vector<ImageRecord>& records,
                                                std::uint64_t seed = kAugmentedTestSeed,
                                                const ZcaTransform* zca = nullptr) {
  cfg.validate();
  std::vector<ImageRecord> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({augment_image(cfg, records[i].pixels, seed ^ i, zca), records[i].label, records[i].source_id});
  }
  return out;
}

}  // namespace castnet
