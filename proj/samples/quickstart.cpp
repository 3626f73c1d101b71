// Library walk-through: synthetic data, a short training run, metrics,
// save/load, and a latency sweep. Usage: castnet_quickstart [out_dir]

#include <cstdio>
#include <filesystem>

#include "castnet/bench.hpp"
#include "castnet/eval.hpp"
#include "castnet/serialize.hpp"
#include "castnet/synth.hpp"
#include "castnet/train.hpp"

using namespace castnet;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "quickstart_out";
  std::filesystem::create_directories(out);

  constexpr std::size_t side = 32;
  const auto split = make_split(synth_dataset(400, 100, 0.5, side, 5), 0.2, 5);

  TrainConfig cfg;
  cfg.epochs_max = 30;
  cfg.batch_size = 8;  // small batches let the batchnorm moving stats keep up
  cfg.early_stop.patience = 20;
  cfg.seed = 5;

  Model model{build_castnet_tiny({side, side, 1}), {}};
  const auto pc = count_params(model.spec);
  std::printf("castnet-tiny: %zu params (%zu trainable)\n", pc.total, pc.trainable);

  const auto res = fit(model.spec, split, cfg, [](const EpochLog& l) {
    std::printf("epoch %2zu  train %.4f  val %.4f  acc %.3f\n", l.epoch, l.train_loss, l.val_loss, l.val_accuracy);
  });
  model.params = res.params;
  write_training_log(out / "training_log.csv", res.logs);

  const auto std_report = evaluate(model, split.test, DatasetTag::standard);
  const auto aug_report = evaluate(model, augment_records(AugmentConfig{}, split.test), DatasetTag::augmented);
  write_metrics_report(out / "metrics_report.csv", {std_report, aug_report});
  for (const auto& r : {std_report, aug_report}) {
    std::printf("%-9s acc %s  f1 %s\n", std::string(to_string(r.dataset_tag)).c_str(), percent2(r.accuracy).c_str(),
                percent2(r.f1).c_str());
  }

  save_model(model, out / "model.cnet1");
  const Model back = load_model(out / "model.cnet1");
  std::printf("saved %ju bytes, reload %s\n", static_cast<std::uintmax_t>(std::filesystem::file_size(out / "model.cnet1")),
              back.params == model.params ? "matches" : "DIFFERS");

  const auto lat = latency_sweep(back, split.test, {1, 10, 50});
  for (const auto& r : lat.rows) std::printf("batch %3zu  %.3f ms/image\n", r.batch_size, r.per_image_s * 1e3);
  emit_report(measured_bench_report({lat}, lat.model_tag), out);
  return 0;
}
