#include "iselab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "iselab/rng.hpp"
#include "json.hpp"

namespace iselab {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lr_peak <= 0.0) throw ConfigError("train: lr_peak must be positive");
}

std::vector<bool> loss_mask(const SegmentedSequence& seq, std::size_t n_prompt) {
  if (seq.size() < 2) throw ConfigError("loss_mask: sequence too short to hold a target");
  std::vector<bool> mask(seq.size() - 1, false);
  int n_true = 0;
  for (std::size_t m = 0; m + 1 < seq.size(); ++m) {
    const std::size_t target = m + 1;
    if (seq.segments[target] == static_cast<int>(Role::Output) && target >= n_prompt) {
      mask[m] = true;
      ++n_true;
    }
  }
  if (n_true == 0) throw ConfigError("loss_mask: no output-segment targets");
  return mask;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_peak) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw ConfigError("cosine_lr: step out of range");
  constexpr double kPi = 3.14159265358979323846;
  return lr_peak * 0.5 *
         (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void adam_step(std::vector<Tensor<float>*>& params, OptimizerState& state,
               const TrainConfig& config, double lr) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->numel(), 0.0f);
      state.v[i].assign(params[i]->numel(), 0.0f);
    }
  }

  double sq_norm = 0.0;
  for (const Tensor<float>* p : params) {
    if (!p->grad) throw ConfigError("adam_step: parameter without gradient buffer");
    for (float g : *p->grad) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
      sq_norm += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq_norm);
  const double clip_scale =
      (config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm)
          ? config.grad_clip_norm / norm
          : 1.0;

  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = *params[i]->data;
    auto& grad = *params[i]->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * clip_scale;
      m[j] = static_cast<float>(config.beta1 * m[j] + (1.0 - config.beta1) * g);
      v[j] = static_cast<float>(config.beta2 * v[j] + (1.0 - config.beta2) * g * g);
      const double m_hat = static_cast<double>(m[j]) / bc1;
      const double v_hat = static_cast<double>(v[j]) / bc2;
      data[j] = static_cast<float>(data[j] - lr * m_hat / (std::sqrt(v_hat) + config.eps));
      grad[j] = 0.0f;
    }
  }
}

std::string metrics_to_jsonl(const std::vector<MetricsEntry>& metrics) {
  std::string out;
  for (const auto& entry : metrics) {
    nlohmann::ordered_json j;
    j["step"] = entry.step;
    j["loss"] = entry.loss;
    j["lr"] = entry.lr;
    j["epoch"] = entry.epoch;
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

struct PreparedSample {
  SegmentedSequence inputs;   // full sequence minus the last token
  std::vector<int> targets;   // shifted by one
  std::vector<bool> mask;     // response-region mask
};

PreparedSample prepare(const TaskSample& sample, const Vocab& vocab,
                       const DelimiterScheme& scheme, bool merge_system_user, int max_seq_len) {
  const SegmentedSequence prompt = render(sample.prompt, vocab, scheme, merge_system_user);
  const SegmentedSequence full = append_output(prompt, sample.reference, vocab);
  if (static_cast<int>(full.size()) > max_seq_len + 1) {
    throw ConfigError("train: rendered sample exceeds max_seq_len");
  }
  PreparedSample prep;
  prep.mask = loss_mask(full, prompt.size());
  if (std::getenv("ISELAB_FULL_LOSS")) prep.mask.assign(full.size() - 1, true);
  prep.inputs.tokens.assign(full.tokens.begin(), full.tokens.end() - 1);
  prep.inputs.segments.assign(full.segments.begin(), full.segments.end() - 1);
  prep.targets.assign(full.tokens.begin() + 1, full.tokens.end());
  return prep;
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const std::vector<TaskSample>& dataset, const Vocab& vocab,
                  const DelimiterScheme& scheme, bool merge_system_user,
                  const TrainCallbacks& callbacks) {
  model_config.validate();
  train_config.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");

  std::vector<PreparedSample> prepared;
  prepared.reserve(dataset.size());
  for (const auto& sample : dataset) {
    prepared.push_back(prepare(sample, vocab, scheme, merge_system_user, model_config.max_seq_len));
  }

  TrainResult result;
  result.params = init_params<float>(model_config, mix_seed(train_config.seed, 0x1417));
  auto named = named_parameters(result.params);
  std::vector<Tensor<float>*> param_refs;
  for (auto& [name, tensor] : named) param_refs.push_back(tensor);

  const auto n = static_cast<std::int64_t>(prepared.size());
  const std::int64_t batches_per_epoch = (n + train_config.batch_size - 1) / train_config.batch_size;
  result.total_steps = batches_per_epoch * train_config.epochs;

  Rng shuffle_rng(mix_seed(train_config.seed, 0x5f0f));
  std::vector<std::size_t> order(prepared.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * train_config.batch_size;
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(train_config.batch_size));
      const auto batch_count = static_cast<float>(end - begin);

      double batch_loss = 0.0;
      for (std::size_t s = begin; s < end; ++s) {
        const PreparedSample& sample = prepared[order[s]];
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        Tensor<float> ce = masked_cross_entropy(forward(sample.inputs, result.params, model_config),
                                                sample.targets, sample.mask);
        batch_loss += static_cast<double>(ce.value());
        Tensor<float> contribution = scale(ce, 1.0f / batch_count);
        tape.backward(contribution);
      }
      batch_loss /= batch_count;
      if (!std::isfinite(batch_loss)) {
        throw NumericError("train: loss diverged at step " + std::to_string(step));
      }

      const double lr = cosine_lr(step, result.total_steps, train_config.lr_peak);
      adam_step(param_refs, result.opt, train_config, lr);

      MetricsEntry entry{step, batch_loss, lr, epoch};
      result.metrics.push_back(entry);
      if (callbacks.on_step) callbacks.on_step(entry);
      ++step;
    }
    if (callbacks.on_epoch_end) {
      Checkpoint ckpt = Checkpoint::from_params(result.params, model_config, step,
                                                train_config.seed);
      for (std::size_t i = 0; i < named.size(); ++i) {
        ckpt.add_blob("adam.m." + named[i].first, named[i].second->shape, result.opt.m[i]);
        ckpt.add_blob("adam.v." + named[i].first, named[i].second->shape, result.opt.v[i]);
      }
      callbacks.on_epoch_end(epoch, ckpt);
    }
  }
  return result;
}

}  // namespace iselab
