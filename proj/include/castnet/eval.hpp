#pragma once

// Confusion matrix and accuracy / precision / recall / F1, with the
// defective class as positive.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "castnet/augment.hpp"
#include "castnet/dataio.hpp"
#include "castnet/errors.hpp"
#include "castnet/model.hpp"

namespace castnet {

inline constexpr double kDecisionThreshold = 0.5;

enum class DatasetTag { standard, augmented };

inline std::string_view to_string(DatasetTag t) { return t == DatasetTag::standard ? "standard" : "augmented"; }

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct MetricsReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::size_t n = 0;
  DatasetTag dataset_tag = DatasetTag::standard;
  std::string model_tag;
  ConfusionMatrix cm;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

// Ties at the threshold count as defective.
template <typename T>
ConfusionMatrix confusion(std::span<const T> probs, std::span<const T> labels, double threshold = kDecisionThreshold) {
  if (probs.size() != labels.size()) {
    throw ShapeError("confusion: " + std::to_string(probs.size()) + " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] != T{0} && labels[i] != T{1}) throw ConfigError("confusion: label not in {0,1}");
    const bool pred = static_cast<double>(probs[i]) >= threshold;
    const bool pos = labels[i] == T{1};
    if (pred && pos) ++cm.tp;
    else if (pred) ++cm.fp;
    else if (pos) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

inline MetricsReport metrics(const ConfusionMatrix& cm, std::string model_tag = {},
                             DatasetTag tag = DatasetTag::standard) {
  if (cm.total() == 0) throw ConfigError("metrics: empty confusion matrix");
  MetricsReport r;
  const auto d = [](std::size_t x) { return static_cast<double>(x); };
  r.accuracy = d(cm.tp + cm.tn) / d(cm.total());
  r.precision = cm.tp + cm.fp ? d(cm.tp) / d(cm.tp + cm.fp) : 0.0;
  r.recall = cm.tp + cm.fn ? d(cm.tp) / d(cm.tp + cm.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  r.n = cm.total();
  r.dataset_tag = tag;
  r.model_tag = std::move(model_tag);
  r.cm = cm;
  return r;
}

// Inference-mode probabilities for every record, in record order.
inline std::vector<float> predict(const Model& model, const std::vector<ImageRecord>& records,
                                  std::size_t batch_size = 32, const ZcaTransform* zca = nullptr) {
  if (records.empty()) throw ConfigError("predict: no records");
  const auto& in = model.spec.input_shape;
  const Shape want{in[0], in[1], in[2]};
  std::vector<float> probs;
  probs.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, records.size());
    std::vector<Tensor<float>> imgs;
    imgs.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      if (records[i].pixels.shape() != want) {
        throw ShapeError("record '" + records[i].source_id + "' has shape " + shape_str(records[i].pixels.shape()) +
                         ", model expects " + shape_str(want));
      }
      imgs.push_back(zca ? zca_apply(*zca, records[i].pixels) : records[i].pixels);
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& t : imgs) ptrs.push_back(&t);
    const auto p = forward(model.spec, model.params, stack<float>(ptrs));
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return probs;
}

inline MetricsReport evaluate(const Model& model, const std::vector<ImageRecord>& records, DatasetTag tag,
                              std::string model_tag = "castnet-tiny", std::size_t batch_size = 32,
                              const ZcaTransform* zca = nullptr) {
  const auto probs = predict(model, records, batch_size, zca);
  return metrics(confusion<float>(probs, labels_of(records)), std::move(model_tag), tag);
}

inline std::string percent2(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * x);
  return buf;
}

inline void write_metrics_report(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << "model_tag,dataset_tag,n,accuracy,precision,recall,f1\n" << std::setprecision(10);
  for (const auto& r : reports) {
    f << r.model_tag << ',' << to_string(r.dataset_tag) << ',' << r.n << ',' << r.accuracy << ',' << r.precision << ','
      << r.recall << ',' << r.f1 << '\n';
  }
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

// Published percentages, kept verbatim (including the NasNet recall that
// disagrees with its accuracy).
struct ReferenceMetrics {
  std::string_view model;
  double accuracy, recall, f1, precision;
};

inline constexpr std::array<ReferenceMetrics, 4> kReferenceMetrics{{
    {"Custom model", 99.44, 99.44, 99.44, 99.45},
    {"MobileNetV2", 98.04, 98.04, 98.05, 98.14},
    {"NasNet", 99.3, 99.05, 99.3, 99.31},
    {"Resnet50", 99.16, 99.16, 99.16, 99.16},
}};

struct ReferenceAugStudyRow {
  std::string_view training;  // "normal" or "augmented"
  std::string_view test;      // "standard" or "augmented"
  double accuracy, recall, f1, precision;
};

inline constexpr std::array<ReferenceAugStudyRow, 4> kReferenceAugStudy{{
    {"normal", "standard", 99.44, 99.44, 99.44, 99.45},
    {"normal", "augmented", 98.04, 98.04, 98.04, 98.05},
    {"augmented", "standard", 99.16, 99.16, 99.16, 99.17},
    {"augmented", "augmented", 98.18, 98.18, 98.17, 98.2},
}};

}  // namespace castnet
