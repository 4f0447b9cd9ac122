#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iselab/checkpoint.hpp"
#include "iselab/corpus.hpp"
#include "iselab/model.hpp"
#include "iselab/segmenter.hpp"

namespace iselab {

struct TrainConfig {
  double lr_peak = 3e-4;  // desk-scale default; 2e-5 suits large pretrained models
  int epochs = 3;
  int batch_size = 4;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam moments, aligned index-for-index with named_parameters order.
struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;
};

/// Mask over prediction positions (length = seq length - 1): true where the
/// prediction target carries segment id Output(3) and its index is at least
/// n_prompt. Throws when no position qualifies.
std::vector<bool> loss_mask(const SegmentedSequence& seq, std::size_t n_prompt = 0);

/// Cosine decay to zero, no warmup: lr_peak * 0.5 * (1 + cos(pi*step/total)).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_peak);

/// Global-norm clipping followed by a bias-corrected Adam update. Gradients
/// are validated (NaN raises NumericError) and zeroed after the step.
void adam_step(std::vector<Tensor<float>*>& params, OptimizerState& state,
               const TrainConfig& config, double lr);

struct MetricsEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  int epoch = 0;
};

std::string metrics_to_jsonl(const std::vector<MetricsEntry>& metrics);

struct TrainResult {
  ModelParams<float> params;
  OptimizerState opt;
  std::vector<MetricsEntry> metrics;
  std::int64_t total_steps = 0;
};

struct TrainCallbacks {
  std::function<void(const MetricsEntry&)> on_step;
  std::function<void(int epoch, Checkpoint& ckpt)> on_epoch_end;
};

/// Supervised fine-tuning: response-masked cross entropy over rendered
/// sequences, Adam with cosine schedule, deterministic per-epoch shuffling.
/// Gradients accumulate over batch_size samples between optimizer steps.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const std::vector<TaskSample>& dataset, const Vocab& vocab,
                  const DelimiterScheme& scheme, bool merge_system_user = false,
                  const TrainCallbacks& callbacks = {});

}  // namespace iselab
