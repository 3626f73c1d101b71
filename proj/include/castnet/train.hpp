#pragma once

// Binary cross-entropy training: losses, optimizers, the two validation
// callbacks and the epoch loop.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "castnet/augment.hpp"
#include "castnet/dataio.hpp"
#include "castnet/errors.hpp"
#include "castnet/model.hpp"
#include "castnet/rng.hpp"

namespace castnet {

inline constexpr double kProbClamp = 1e-7;

enum class OptimizerKind { adam, sgd_momentum };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

struct EarlyStopConfig {
  bool enabled = true;
  int patience = 10;
  double min_delta = 1e-4;
};

struct PlateauConfig {
  bool enabled = true;
  double factor = 0.5;
  int patience = 5;
  double min_delta = 1e-4;
  double min_lr = 1e-6;
};

struct TrainConfig {
  std::size_t epochs_max = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  EarlyStopConfig early_stop;
  PlateauConfig plateau;
  std::uint64_t seed = 42;
  std::optional<AugmentConfig> augment;
  bool restore_best = true;

  void validate() const {
    if (epochs_max < 1) throw ConfigError("epochs_max must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    // lr = 0 is allowed: a frozen run that only refreshes moving statistics
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (early_stop.patience < 1) throw ConfigError("early_stop.patience must be >= 1");
    if (early_stop.min_delta < 0) throw ConfigError("early_stop.min_delta must be >= 0");
    if (plateau.patience < 1) throw ConfigError("plateau.patience must be >= 1");
    if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) throw ConfigError("plateau.factor must lie in (0,1)");
    if (!(plateau.min_lr >= 0.0)) throw ConfigError("plateau.min_lr must be >= 0");
    if (augment) augment->validate();
  }
};

struct CallbackState {
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  double current_lr = 0.0;
  bool stopped = false;
  bool new_best = false;  // this update set a new minimum
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double lr = 0;
  double wall_time_s = 0;
};

namespace detail {

template <typename T>
void check_labels(std::span<const T> probs, std::span<const T> labels) {
  if (probs.size() != labels.size()) {
    throw ShapeError("bce: " + std::to_string(probs.size()) + " probabilities vs " + std::to_string(labels.size()) +
                     " labels");
  }
  if (probs.empty()) throw ShapeError("bce: empty batch");
  for (T y : labels) {
    if (y != T{0} && y != T{1}) throw ConfigError("bce: label " + std::to_string(static_cast<double>(y)) + " not in {0,1}");
  }
}

}  // namespace detail

template <typename T>
double bce_loss(std::span<const T> probs, std::span<const T> labels) {
  detail::check_labels(probs, labels);
  double sum = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1 - kProbClamp);
    sum -= labels[i] == T{1} ? std::log(p) : std::log(1 - p);
  }
  return sum / static_cast<double>(probs.size());
}

// Gradient w.r.t. the pre-sigmoid logits: (p - y) / B.
template <typename T>
std::vector<T> bce_backward(std::span<const T> probs, std::span<const T> labels) {
  detail::check_labels(probs, labels);
  const T b = static_cast<T>(probs.size());
  std::vector<T> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = (probs[i] - labels[i]) / b;
  return g;
}

// Gradient w.r.t. the probabilities themselves (clamped), for checking the
// fused path.
template <typename T>
std::vector<T> bce_prob_gradient(std::span<const T> probs, std::span<const T> labels) {
  detail::check_labels(probs, labels);
  const double b = static_cast<double>(probs.size());
  std::vector<T> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1 - kProbClamp);
    g[i] = static_cast<T>((labels[i] == T{1} ? -1.0 / p : 1.0 / (1 - p)) / b);
  }
  return g;
}

template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  std::size_t step = 0;
  ParamStore<T> m;  // momentum velocity (sgd) or first moment (adam)
  ParamStore<T> v;  // second moment (adam)
};

template <typename T>
OptimizerState<T> make_optimizer(OptimizerKind kind, const ModelSpec& spec) {
  OptimizerState<T> s;
  s.kind = kind;
  s.m = zero_params<T>(spec);
  s.v = zero_params<T>(spec);
  for (auto* store : {&s.m, &s.v}) {
    for (auto& l : store->layers)
      for (auto& t : l.tensors) t.fill(T{0});
  }
  return s;
}

// Updates trainable tensors in place; non-trainable slots are left alone.
template <typename T>
void optimizer_step(ParamStore<T>& params, const ParamStore<T>& grads, OptimizerState<T>& st, double lr) {
  if (params.layers.size() != grads.layers.size() || st.m.layers.size() != params.layers.size()) {
    throw ShapeError("optimizer_step: parameter/gradient layout mismatch");
  }
  for (std::size_t li = 0; li < grads.layers.size(); ++li) {
    const auto& gl = grads.layers[li];
    if (gl.tensors.size() != params.layers[li].tensors.size()) throw ShapeError("optimizer_step: layer mismatch");
    for (std::size_t ti = 0; ti < gl.tensors.size(); ++ti) {
      if (gl.tensors[ti].shape() != params.layers[li].tensors[ti].shape()) {
        throw ShapeError("optimizer_step: gradient shape mismatch in layer " + std::to_string(li));
      }
      for (T g : gl.tensors[ti].data()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite gradient in layer " + std::to_string(li) + ", tensor " + std::to_string(ti));
        }
      }
    }
  }
  ++st.step;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8, momentum = 0.9;
  const double c1 = 1 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto& pl = params.layers[li];
    for (std::size_t ti = 0; ti < pl.tensors.size(); ++ti) {
      if (!pl.trainable[ti]) continue;
      auto w = pl.tensors[ti].data();
      auto g = grads.layers[li].tensors[ti].data();
      auto m = st.m.layers[li].tensors[ti].data();
      auto v = st.v.layers[li].tensors[ti].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        if (st.kind == OptimizerKind::sgd_momentum) {
          m[k] = static_cast<T>(momentum * m[k] - lr * gk);
          w[k] = static_cast<T>(w[k] + m[k]);
        } else {
          const double mk = b1 * m[k] + (1 - b1) * gk;
          const double vk = b2 * v[k] + (1 - b2) * gk * gk;
          m[k] = static_cast<T>(mk);
          v[k] = static_cast<T>(vk);
          w[k] = static_cast<T>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + eps));
        }
      }
    }
  }
}

// An improvement must beat the best loss so far by more than min_delta. The
// best loss itself tracks the running minimum. Stops once the counter
// reaches patience.
inline CallbackState early_stopping_update(CallbackState s, double val_loss, const EarlyStopConfig& cfg) {
  s.new_best = val_loss < s.best_val_loss;
  if (val_loss < s.best_val_loss - cfg.min_delta) {
    s.epochs_since_improvement = 0;
  } else {
    ++s.epochs_since_improvement;
  }
  if (s.new_best) s.best_val_loss = val_loss;
  if (s.epochs_since_improvement >= cfg.patience) s.stopped = true;
  return s;
}

// Same counting rule with its own counter. Never raises the lr, so a run
// started below min_lr keeps its rate.
inline CallbackState reduce_lr_on_plateau(CallbackState s, double val_loss, const PlateauConfig& cfg) {
  s.new_best = val_loss < s.best_val_loss;
  if (val_loss < s.best_val_loss - cfg.min_delta) {
    s.epochs_since_improvement = 0;
  } else {
    ++s.epochs_since_improvement;
  }
  if (s.new_best) s.best_val_loss = val_loss;
  if (s.epochs_since_improvement >= cfg.patience) {
    s.current_lr = std::max(s.current_lr * cfg.factor, std::min(cfg.min_lr, s.current_lr));
    s.epochs_since_improvement = 0;
  }
  return s;
}

// Exponential moving average of the batch statistics, Keras-style.
template <typename T>
void update_moving_stats(const ModelSpec& spec, ParamStore<T>& params, const ForwardCache<T>& cache) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::batchnorm || !cache.norms[i]) continue;
    auto mean = params.layers[i].tensors[2].data();
    auto var = params.layers[i].tensors[3].data();
    const auto& bc = *cache.norms[i];
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = static_cast<T>(kBatchNormMomentum * mean[c] + (1 - kBatchNormMomentum) * bc.batch_mean[c]);
      var[c] = static_cast<T>(kBatchNormMomentum * var[c] + (1 - kBatchNormMomentum) * bc.batch_var[c]);
    }
  }
}

struct ValidationResult {
  double loss = 0;
  double accuracy = 0;
};

inline ValidationResult validate_model(const ModelSpec& spec, const ParamStore<float>& params,
                                       const std::vector<ImageRecord>& records, std::size_t batch_size,
                                       const ZcaTransform* zca = nullptr) {
  std::vector<float> probs;
  probs.reserve(records.size());
  for (const auto& b : make_batches(records, {batch_size, false, 0, false})) {
    Tensor<float> images = b.images;
    if (zca) {
      const std::size_t per = images.size() / images.dim(0);
      const Shape one{images.dim(1), images.dim(2), images.dim(3)};
      for (std::size_t i = 0; i < images.dim(0); ++i) {
        auto first = images.data().begin() + static_cast<std::ptrdiff_t>(i * per);
        const auto w = zca_apply(*zca, Tensor<float>(one, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(per))));
        std::copy(w.data().begin(), w.data().end(), first);
      }
    }
    const auto p = forward(spec, params, images);
    probs.insert(probs.end(), p.begin(), p.end());
  }
  const auto labels = labels_of(records);
  ValidationResult r;
  r.loss = bce_loss<float>(probs, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) correct += (probs[i] >= 0.5f) == (labels[i] == 1.f);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(probs.size());
  return r;
}

struct FitResult {
  ParamStore<float> params;
  std::vector<EpochLog> logs;
  bool early_stopped = false;
  std::size_t best_epoch = 0;
  std::optional<ZcaTransform> zca;  // fitted on the training images when augment.zca is set
};

// Raised when the training loss stops being finite; carries the weights from
// the end of the last complete epoch.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, ParamStore<float> last_good, std::vector<EpochLog> logs)
      : NumericError(what), last_good_(std::move(last_good)), logs_(std::move(logs)) {}
  const ParamStore<float>& last_good() const { return last_good_; }
  const std::vector<EpochLog>& logs() const { return logs_; }

 private:
  ParamStore<float> last_good_;
  std::vector<EpochLog> logs_;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline FitResult fit(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty() || data.validation.empty()) throw ConfigError("fit: train and validation splits must be non-empty");
  const Shape want{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  for (const auto* part : {&data.train, &data.validation}) {
    for (const auto& r : *part) {
      if (r.pixels.shape() != want) {
        throw ShapeError("fit: record '" + r.source_id + "' has shape " + shape_str(r.pixels.shape()) +
                         ", model expects " + shape_str(want));
      }
    }
  }

  FitResult res;
  res.params = init_params<float>(spec, cfg.seed);
  if (cfg.augment && cfg.augment->zca) {
    std::vector<Tensor<float>> imgs;
    imgs.reserve(data.train.size());
    for (const auto& r : data.train) imgs.push_back(r.pixels);
    res.zca = zca_fit<float>(imgs, cfg.augment->zca_epsilon);
  }
  const ZcaTransform* zca = res.zca ? &*res.zca : nullptr;

  auto opt = make_optimizer<float>(cfg.optimizer, spec);
  CallbackState stop_state, lr_state;
  lr_state.current_lr = cfg.learning_rate;
  ParamStore<float> best = res.params;

  for (std::size_t epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const ParamStore<float> epoch_start = res.params;
    const double lr = lr_state.current_lr;
    const auto batches = make_batches(data.train, {cfg.batch_size, true, mix_seed(cfg.seed, epoch), false});
    const std::uint64_t aug_base = cfg.augment ? mix_seed(mix_seed(cfg.seed, cfg.augment->seed), epoch) : 0;
    double loss_sum = 0;
    for (const auto& b : batches) {
      Tensor<float> images = b.images;
      if (cfg.augment) {
        const std::size_t per = images.size() / images.dim(0);
        const Shape one{images.dim(1), images.dim(2), images.dim(3)};
        for (std::size_t i = 0; i < b.indices.size(); ++i) {
          auto first = images.data().begin() + static_cast<std::ptrdiff_t>(i * per);
          Tensor<float> img(one, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(per)));
          const auto a = augment_image(*cfg.augment, img, aug_base ^ b.indices[i], zca);
          std::copy(a.data().begin(), a.data().end(), first);
        }
      }
      ForwardCache<float> cache;
      const auto out = forward_cached(spec, res.params, images, NormMode::batch_stats, &cache);
      const double loss = bce_loss<float>(out.data(), b.labels);
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch), epoch_start,
                              res.logs);
      }
      loss_sum += loss * static_cast<double>(b.indices.size());
      const auto g = bce_backward<float>(out.data(), b.labels);
      const auto grads = backward(spec, res.params, cache, Tensor<float>({g.size(), 1}, g));
      try {
        optimizer_step(res.params, grads, opt, lr);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string(e.what()) + " in epoch " + std::to_string(epoch), epoch_start, res.logs);
      }
      update_moving_stats(spec, res.params, cache);
    }

    const auto val = validate_model(spec, res.params, data.validation, cfg.batch_size, zca);
    if (!std::isfinite(val.loss)) {
      throw DivergenceError("validation loss became non-finite in epoch " + std::to_string(epoch), epoch_start,
                            res.logs);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(data.train.size());
    log.val_loss = val.loss;
    log.val_accuracy = val.accuracy;
    log.lr = lr;
    log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.logs.push_back(log);
    if (on_epoch) on_epoch(log);

    stop_state = early_stopping_update(stop_state, val.loss, cfg.early_stop);
    if (stop_state.new_best) {
      best = res.params;
      res.best_epoch = epoch;
    }
    if (cfg.plateau.enabled) lr_state = reduce_lr_on_plateau(lr_state, val.loss, cfg.plateau);
    if (cfg.early_stop.enabled && stop_state.stopped) {
      res.early_stopped = true;
      break;
    }
  }
  if (res.early_stopped || cfg.restore_best) res.params = std::move(best);
  return res;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& logs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << "epoch,train_loss,val_loss,val_accuracy,lr,wall_time_s\n";
  f << std::setprecision(10);
  for (const auto& l : logs) {
    f << l.epoch << ',' << l.train_loss << ',' << l.val_loss << ',' << l.val_accuracy << ',' << l.lr << ','
      << l.wall_time_s << '\n';
  }
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace castnet
