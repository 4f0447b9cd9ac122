#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iselab/segmenter.hpp"
#include "iselab/tensor.hpp"

namespace iselab {

enum class EmbedMode { baseline, ise };

EmbedMode embed_mode_from_name(const std::string& name);
std::string embed_mode_name(EmbedMode mode);

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int n_hierarchies = kNumRoles;
  int n_layers = 2;
  int n_heads = 4;
  int ff_dim = 256;
  int max_seq_len = 256;
  double rope_theta = 10000.0;
  EmbedMode mode = EmbedMode::baseline;

  int head_dim() const { return embed_dim / n_heads; }

  /// Throws ConfigError when dimensions are inconsistent (embed_dim not
  /// divisible by heads, odd head dim, non-positive sizes, H < 1).
  void validate() const;
};

template <typename T>
struct LayerParams {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> w_gate, w_up, w_down;
  Tensor<T> attn_norm, mlp_norm;
};

template <typename T>
struct ModelParams {
  Tensor<T> token_embedding;    // [V×D]
  Tensor<T> segment_embedding;  // [H×D], present only in ise mode
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> output_projection;  // [D×V]

  bool has_segment_embedding() const { return static_cast<bool>(segment_embedding.data); }
};

/// Deterministic initialization: weights ~ Normal(0, 0.02), norm gains 1,
/// segment embedding exactly zero (so ise-mode starts at baseline behavior).
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Named parameter references in a fixed order shared by the optimizer and
/// the checkpoint format.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(ModelParams<T>& params);

template <typename T>
std::size_t parameter_count(const ModelParams<T>& params);

/// Input embedding: token row plus (in ise mode) the segment row for each
/// position. Baseline mode ignores segment ids entirely.
template <typename T>
Tensor<T> embed(const SegmentedSequence& seq, const ModelParams<T>& params,
                const ModelConfig& config);

/// Full causal forward pass: embeddings, n_layers of pre-norm attention
/// (RoPE) and gated MLP blocks, final norm, output projection. Returns
/// [M×V] logits.
template <typename T>
Tensor<T> forward(const SegmentedSequence& seq, const ModelParams<T>& params,
                  const ModelConfig& config);

struct DecodeSpec {
  enum class Kind { greedy, top_p };
  Kind kind = Kind::greedy;
  double p = 0.9;
  std::uint64_t seed = 0;

  static DecodeSpec greedy() { return DecodeSpec{}; }
  static DecodeSpec top_p(double p, std::uint64_t seed) {
    return DecodeSpec{Kind::top_p, p, seed};
  }
};

struct GenerationResult {
  std::vector<int> new_tokens;   // excludes the prompt, includes eos when emitted
  SegmentedSequence sequence;    // prompt plus generated tokens, all tagged Output
};

/// Autoregressive decoding from a rendered prompt. Generated positions
/// carry segment id Output(3); stops at eos or after max_new tokens.
template <typename T>
GenerationResult generate(const SegmentedSequence& prompt, const ModelParams<T>& params,
                          const ModelConfig& config, int max_new,
                          const DecodeSpec& decode = DecodeSpec::greedy());

}  // namespace iselab
