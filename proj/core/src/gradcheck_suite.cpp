#include "iselab/gradcheck_suite.hpp"

#include <algorithm>
#include <sstream>

#include "iselab/io.hpp"
#include "iselab/model.hpp"
#include "iselab/rng.hpp"

namespace iselab {

namespace {

Tensor<double> random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), /*with_grad=*/true);
  for (auto& v : *t.data) v = rng.normal(0.0, scale);
  return t;
}

/// Weighted sum against fixed random coefficients, so the scalar loss
/// exercises every output element with a distinct sensitivity.
Tensor<double> weighted_sum(const Tensor<double>& x, Rng& rng) {
  Tensor<double> w = Tensor<double>::zeros(x.shape);
  for (auto& v : *w.data) v = rng.normal(0.0, 1.0);
  return sum(mul(x, w));
}

struct OpCase {
  const char* name;
  int min_rows, max_rows, min_cols, max_cols;
  Tensor<double> (*run)(Tensor<double>& x, Rng& coeff_rng, Rng& aux_rng);
};

std::uint64_t op_stream(const char* name) {
  return fnv1a64(name, std::char_traits<char>::length(name));
}

double check_case(const OpCase& c, std::uint64_t seed, int instance) {
  Rng shape_rng(mix_seed(seed, 0x1000 + static_cast<std::uint64_t>(instance)));
  const int m = c.min_rows + static_cast<int>(shape_rng.below(
                    static_cast<std::uint64_t>(c.max_rows - c.min_rows + 1)));
  int n = c.min_cols + static_cast<int>(shape_rng.below(
              static_cast<std::uint64_t>(c.max_cols - c.min_cols + 1)));
  if (n % 2 != 0) ++n;  // rope needs even width; harmless elsewhere
  Tensor<double> x = random_tensor(shape_rng, {m, n});

  auto f = [&](Tensor<double>& v) {
    Rng coeff(mix_seed(seed, 0x2000 + static_cast<std::uint64_t>(instance)));
    Rng aux(mix_seed(seed, 0x3000 + static_cast<std::uint64_t>(instance)));
    return c.run(v, coeff, aux);
  };
  return grad_check(f, x, kGradCheckTol).max_rel_err;
}

const OpCase kCases[] = {
    {"add", 1, 5, 1, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       Tensor<double> other = random_tensor(aux, x.shape);
       return weighted_sum(add(x, other), coeff);
     }},
    {"mul", 1, 5, 1, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       Tensor<double> other = random_tensor(aux, x.shape);
       return weighted_sum(mul(x, other), coeff);
     }},
    {"scale", 1, 5, 1, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       return weighted_sum(scale(x, aux.normal(0.0, 2.0)), coeff);
     }},
    {"matmul", 2, 5, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       Tensor<double> rhs = random_tensor(aux, {x.shape[1], 3});
       return weighted_sum(matmul(x, rhs), coeff);
     }},
    {"transpose", 1, 5, 1, 6,
     [](Tensor<double>& x, Rng& coeff, Rng&) { return weighted_sum(transpose(x), coeff); }},
    {"slice_cols", 1, 5, 4, 8,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       const int len = 2 + static_cast<int>(aux.below(2));
       const int begin =
           static_cast<int>(aux.below(static_cast<std::uint64_t>(x.shape[1] - len + 1)));
       return weighted_sum(slice_cols(x, begin, len), coeff);
     }},
    {"concat_cols", 1, 5, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       Tensor<double> other = random_tensor(aux, {x.shape[0], 3});
       return weighted_sum(concat_cols(std::vector<Tensor<double>>{x, other, x}), coeff);
     }},
    {"softmax_rows", 1, 5, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng&) { return weighted_sum(softmax_rows(x), coeff); }},
    {"causal_softmax", 2, 5, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng&) {
       return weighted_sum(causal_softmax(matmul(x, transpose(x))), coeff);
     }},
    {"rms_norm", 1, 5, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       Tensor<double> gain = random_tensor(aux, {x.shape[1]});
       return weighted_sum(rms_norm(x, gain), coeff);
     }},
    {"rms_norm_gain", 1, 1, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       // the checked variable acts as the gain vector
       Tensor<double> gain;
       gain.shape = {x.shape[1]};
       gain.data = x.data;
       gain.grad = x.grad;
       Tensor<double> input = random_tensor(aux, {3, x.shape[1]});
       return weighted_sum(rms_norm(input, gain), coeff);
     }},
    {"silu", 1, 5, 1, 6,
     [](Tensor<double>& x, Rng& coeff, Rng&) { return weighted_sum(silu(x), coeff); }},
    {"embedding_lookup", 3, 6, 2, 6,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       std::vector<int> ids;
       for (int i = 0; i < 5; ++i)
         ids.push_back(static_cast<int>(aux.below(static_cast<std::uint64_t>(x.shape[0]))));
       ids.push_back(ids.front());  // repeated id exercises gradient accumulation
       return weighted_sum(embedding_lookup(x, ids), coeff);
     }},
    {"masked_cross_entropy", 2, 6, 3, 8,
     [](Tensor<double>& x, Rng&, Rng& aux) {
       std::vector<int> targets;
       std::vector<bool> mask;
       for (int i = 0; i < x.shape[0]; ++i) {
         targets.push_back(static_cast<int>(aux.below(static_cast<std::uint64_t>(x.shape[1]))));
         mask.push_back(aux.below(2) == 0);
       }
       mask[0] = true;  // at least one position in the loss
       return masked_cross_entropy(x, targets, mask);
     }},
    {"sum", 1, 5, 1, 6, [](Tensor<double>& x, Rng&, Rng&) { return sum(x); }},
    {"rope_rotate", 2, 6, 2, 8,
     [](Tensor<double>& x, Rng& coeff, Rng& aux) {
       std::vector<int> positions;
       for (int i = 0; i < x.shape[0]; ++i) positions.push_back(static_cast<int>(aux.below(32)));
       return weighted_sum(rope_rotate(x, positions, 10000.0), coeff);
     }},
};

/// Finite-difference check of a tiny two-layer transformer: the loss is a
/// masked cross entropy over a random segmented sequence, differentiated
/// against every parameter tensor in turn.
double check_model(std::uint64_t seed) {
  ModelConfig config;
  config.vocab_size = 11;
  config.embed_dim = 8;
  config.n_layers = 2;
  config.n_heads = 2;
  config.ff_dim = 12;
  config.max_seq_len = 16;
  config.mode = EmbedMode::ise;

  Rng rng(seed);
  ModelParams<double> params = init_params<double>(config, rng.next_u64());
  // nonzero segment rows so their gradients are exercised
  for (auto& v : *params.segment_embedding.data) v = rng.normal(0.0, 0.02);

  const int m = 6;
  SegmentedSequence seq;
  std::vector<int> targets;
  std::vector<bool> mask;
  for (int i = 0; i < m; ++i) {
    seq.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size))));
    seq.segments.push_back(static_cast<int>(rng.below(kNumRoles)));
    targets.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size))));
    mask.push_back(rng.below(2) == 0);
  }
  mask[m - 1] = true;

  auto loss = [&](Tensor<double>&) {
    return masked_cross_entropy(forward(seq, params, config), targets, mask);
  };

  double worst = 0.0;
  for (const auto& [name, tensor] : named_parameters(params)) {
    worst = std::max(worst, grad_check(loss, *tensor, kGradCheckTol).max_rel_err);
  }
  return worst;
}

}  // namespace

std::vector<OpGradReport> run_grad_check_suite(std::uint64_t seed, int instances_per_op) {
  std::vector<OpGradReport> reports;
  for (const auto& c : kCases) {
    OpGradReport r;
    r.op = c.name;
    r.instances = instances_per_op;
    r.tol = kGradCheckTol;
    for (int i = 0; i < instances_per_op; ++i) {
      const double err = check_case(c, mix_seed(seed, op_stream(c.name)), i);
      r.max_rel_err = std::max(r.max_rel_err, err);
    }
    r.pass = r.max_rel_err <= r.tol;
    reports.push_back(std::move(r));
  }

  OpGradReport model_report;
  model_report.op = "model_2layer";
  model_report.instances = 2;
  model_report.tol = kGradCheckTol;
  for (int i = 0; i < model_report.instances; ++i) {
    model_report.max_rel_err = std::max(
        model_report.max_rel_err, check_model(mix_seed(seed, 0xced1 + static_cast<std::uint64_t>(i))));
  }
  model_report.pass = model_report.max_rel_err <= model_report.tol;
  reports.push_back(std::move(model_report));
  return reports;
}

bool all_pass(const std::vector<OpGradReport>& reports) {
  return std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass; });
}

std::string format_grad_report(const std::vector<OpGradReport>& reports) {
  std::ostringstream out;
  out << "op                     instances  max_rel_err    tol      result\n";
  for (const auto& r : reports) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-22s %9d  %.3e  %.1e  %s\n", r.op.c_str(), r.instances,
                  r.max_rel_err, r.tol, r.pass ? "pass" : "FAIL");
    out << line;
  }
  return out.str();
}

}  // namespace iselab
