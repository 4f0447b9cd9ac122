#include "iselab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iselab/rng.hpp"

namespace iselab {

EmbedMode embed_mode_from_name(const std::string& name) {
  if (name == "baseline") return EmbedMode::baseline;
  if (name == "ise") return EmbedMode::ise;
  throw ConfigError("unknown embedding mode: " + name);
}

std::string embed_mode_name(EmbedMode mode) {
  return mode == EmbedMode::baseline ? "baseline" : "ise";
}

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (embed_dim <= 0 || n_layers <= 0 || n_heads <= 0 || ff_dim <= 0 || max_seq_len <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (embed_dim % n_heads != 0) throw ConfigError("embed_dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("head dim must be even for rotary positions");
  if (n_hierarchies < 1) throw ConfigError("n_hierarchies must be >= 1");
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> normal_init(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*with_grad=*/true);
  for (auto& v : *t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int v = config.vocab_size, d = config.embed_dim, f = config.ff_dim;
  const double kStd = 0.5 / std::sqrt(static_cast<double>(d));

  ModelParams<T> p;
  p.token_embedding = normal_init<T>({v, d}, rng, kStd);
  if (config.mode == EmbedMode::ise) {
    p.segment_embedding = Tensor<T>::zeros({config.n_hierarchies, d}, /*with_grad=*/true);
  }
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.wq = normal_init<T>({d, d}, rng, kStd);
    layer.wk = normal_init<T>({d, d}, rng, kStd);
    layer.wv = normal_init<T>({d, d}, rng, kStd);
    layer.wo = normal_init<T>({d, d}, rng, kStd);
    layer.w_gate = normal_init<T>({d, f}, rng, kStd);
    layer.w_up = normal_init<T>({d, f}, rng, kStd);
    layer.w_down = normal_init<T>({f, d}, rng, kStd);
    layer.attn_norm = Tensor<T>::full({d}, T(1), /*with_grad=*/true);
    layer.mlp_norm = Tensor<T>::full({d}, T(1), /*with_grad=*/true);
  }
  p.final_norm = Tensor<T>::full({d}, T(1), /*with_grad=*/true);
  p.output_projection = normal_init<T>({d, v}, rng, kStd);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(ModelParams<T>& params) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("token_embedding", &params.token_embedding);
  if (params.has_segment_embedding()) {
    out.emplace_back("segment_embedding", &params.segment_embedding);
  }
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    auto& layer = params.layers[i];
    out.emplace_back(prefix + "wq", &layer.wq);
    out.emplace_back(prefix + "wk", &layer.wk);
    out.emplace_back(prefix + "wv", &layer.wv);
    out.emplace_back(prefix + "wo", &layer.wo);
    out.emplace_back(prefix + "w_gate", &layer.w_gate);
    out.emplace_back(prefix + "w_up", &layer.w_up);
    out.emplace_back(prefix + "w_down", &layer.w_down);
    out.emplace_back(prefix + "attn_norm", &layer.attn_norm);
    out.emplace_back(prefix + "mlp_norm", &layer.mlp_norm);
  }
  out.emplace_back("final_norm", &params.final_norm);
  out.emplace_back("output_projection", &params.output_projection);
  return out;
}

template <typename T>
std::size_t parameter_count(const ModelParams<T>& params) {
  std::size_t n = 0;
  auto& mut = const_cast<ModelParams<T>&>(params);
  for (const auto& [name, tensor] : named_parameters(mut)) n += tensor->numel();
  return n;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embed(const SegmentedSequence& seq, const ModelParams<T>& params,
                const ModelConfig& config) {
  if (seq.tokens.size() != seq.segments.size()) {
    throw ShapeError("embed: tokens/segments length mismatch");
  }
  for (int id : seq.tokens) {
    if (id < 0 || id >= config.vocab_size) throw IndexError("embed: token id out of range");
  }
  Tensor<T> tok = embedding_lookup(params.token_embedding, seq.tokens);
  if (config.mode == EmbedMode::baseline) return tok;
  for (int s : seq.segments) {
    if (s < 0 || s >= config.n_hierarchies) throw IndexError("embed: segment id out of range");
  }
  Tensor<T> seg = embedding_lookup(params.segment_embedding, seq.segments);
  return add(tok, seg);
}

template <typename T>
Tensor<T> forward(const SegmentedSequence& seq, const ModelParams<T>& params,
                  const ModelConfig& config) {
  const int m = static_cast<int>(seq.size());
  if (m == 0) throw ShapeError("forward: empty sequence");
  if (m > config.max_seq_len) throw ShapeError("forward: sequence exceeds max_seq_len");

  std::vector<int> positions(static_cast<std::size_t>(m));
  std::iota(positions.begin(), positions.end(), 0);
  const int hd = config.head_dim();
  const T inv_sqrt_hd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Tensor<T> x = embed(seq, params, config);
  for (const auto& layer : params.layers) {
    // attention block
    Tensor<T> h = rms_norm(x, layer.attn_norm);
    Tensor<T> q = matmul(h, layer.wq);
    Tensor<T> k = matmul(h, layer.wk);
    Tensor<T> v = matmul(h, layer.wv);
    std::vector<Tensor<T>> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(config.n_heads));
    for (int head = 0; head < config.n_heads; ++head) {
      Tensor<T> qh = rope_rotate(slice_cols(q, head * hd, hd), positions, config.rope_theta);
      Tensor<T> kh = rope_rotate(slice_cols(k, head * hd, hd), positions, config.rope_theta);
      Tensor<T> vh = slice_cols(v, head * hd, hd);
      Tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_hd);
      Tensor<T> probs = causal_softmax(scores);
      head_outputs.push_back(matmul(probs, vh));
    }
    x = add(x, matmul(concat_cols(head_outputs), layer.wo));

    // gated MLP block
    Tensor<T> h2 = rms_norm(x, layer.mlp_norm);
    Tensor<T> gated = mul(silu(matmul(h2, layer.w_gate)), matmul(h2, layer.w_up));
    x = add(x, matmul(gated, layer.w_down));
  }
  return matmul(rms_norm(x, params.final_norm), params.output_projection);
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

namespace {

template <typename T>
int pick_token(const Tensor<T>& logits, int row, const DecodeSpec& decode, Rng& rng) {
  const int v = logits.cols();
  if (decode.kind == DecodeSpec::Kind::greedy) {
    int best = 0;
    T best_val = logits.at(row, 0);
    for (int j = 1; j < v; ++j) {
      if (logits.at(row, j) > best_val) {
        best_val = logits.at(row, j);
        best = j;
      }
    }
    return best;
  }

  // top-p: softmax, sort by (prob desc, id asc), keep the smallest prefix
  // reaching mass p, renormalize, sample.
  T mx = logits.at(row, 0);
  for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(row, j));
  std::vector<double> probs(static_cast<std::size_t>(v));
  double denom = 0.0;
  for (int j = 0; j < v; ++j) {
    probs[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(logits.at(row, j) - mx));
    denom += probs[static_cast<std::size_t>(j)];
  }
  for (auto& p : probs) p /= denom;
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double pa = probs[static_cast<std::size_t>(a)];
    const double pb = probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  double mass = 0.0;
  std::size_t cutoff = 0;
  while (cutoff < order.size()) {
    mass += probs[static_cast<std::size_t>(order[cutoff])];
    ++cutoff;
    if (mass >= decode.p) break;
  }
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < cutoff; ++i) {
    u -= probs[static_cast<std::size_t>(order[i])];
    if (u <= 0.0) return order[i];
  }
  return order[cutoff - 1];
}

}  // namespace

template <typename T>
GenerationResult generate(const SegmentedSequence& prompt, const ModelParams<T>& params,
                          const ModelConfig& config, int max_new, const DecodeSpec& decode) {
  if (prompt.size() == 0) throw ShapeError("generate: empty prompt");
  if (static_cast<int>(prompt.size()) > config.max_seq_len) {
    throw ShapeError("generate: prompt exceeds max_seq_len");
  }

  GenerationResult result;
  result.sequence = prompt;
  Rng rng(decode.seed);
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(result.sequence.size()) >= config.max_seq_len) break;
    Tensor<T> logits = forward(result.sequence, params, config);
    const int next = pick_token(logits, static_cast<int>(result.sequence.size()) - 1, decode, rng);
    result.new_tokens.push_back(next);
    result.sequence.tokens.push_back(next);
    result.sequence.segments.push_back(static_cast<int>(Role::Output));
    if (next == Vocab::kEos) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define ISELAB_INSTANTIATE_MODEL(T)                                                          \
  template struct LayerParams<T>;                                                            \
  template struct ModelParams<T>;                                                            \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                 \
  template std::vector<std::pair<std::string, Tensor<T>*>> named_parameters<T>(              \
      ModelParams<T>&);                                                                      \
  template std::size_t parameter_count<T>(const ModelParams<T>&);                            \
  template Tensor<T> embed<T>(const SegmentedSequence&, const ModelParams<T>&,               \
                              const ModelConfig&);                                           \
  template Tensor<T> forward<T>(const SegmentedSequence&, const ModelParams<T>&,             \
                                const ModelConfig&);                                         \
  template GenerationResult generate<T>(const SegmentedSequence&, const ModelParams<T>&,     \
                                        const ModelConfig&, int, const DecodeSpec&);

ISELAB_INSTANTIATE_MODEL(float)
ISELAB_INSTANTIATE_MODEL(double)

#undef ISELAB_INSTANTIATE_MODEL

}  // namespace iselab
