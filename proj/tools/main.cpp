// Command-line front end: data generation, training, attack and extraction
// evaluation, gradient checking, and report diffing.
//
// Exit codes are stable contracts:
//   0 success, 1 grad-check failure, 2 training divergence,
//   3 vocabulary mismatch, 4 empty secrets file, 5 report suite mismatch,
//   10 any other error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iselab/attacks.hpp"
#include "iselab/checkpoint.hpp"
#include "iselab/config.hpp"
#include "iselab/corpus.hpp"
#include "iselab/evaluator.hpp"
#include "iselab/gradcheck_suite.hpp"
#include "iselab/io.hpp"
#include "iselab/rng.hpp"
#include "iselab/trainer.hpp"

namespace fs = std::filesystem;
using namespace iselab;

namespace {

constexpr int kExitGradCheckFailure = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitVocabMismatch = 3;
constexpr int kExitEmptySecrets = 4;
constexpr int kExitSuiteMismatch = 5;
constexpr int kExitError = 10;

int env_threads() {
  const char* raw = std::getenv("ISE_LAB_THREADS");
  if (!raw) return 1;
  const int n = std::atoi(raw);
  return n > 0 ? n : 1;
}

EvalOptions eval_options(const RunConfig& config) {
  EvalOptions options;
  options.max_new_tokens = config.eval_max_new_tokens;
  options.merge_system_user = config.merge_system_user;
  options.seed = config.suite_seed();
  options.threads = env_threads();
  return options;
}

/// 90/10 deterministic split: heldout takes floor(n/10) indices of a seeded
/// permutation and is always drawn from the clean dataset.
void split_indices(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train_idx,
                   std::vector<std::size_t>& heldout_idx) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t n_heldout = n / 10;
  heldout_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_heldout));
  train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_heldout), order.end());
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, bool adversarial) {
  RunConfig config = RunConfig::load(config_path);
  DatasetSpec spec = config.dataset;
  spec.adversarial_fraction = adversarial ? 0.5 : 0.0;

  const std::vector<TaskSample> clean = gen_clean(spec);
  const std::vector<TaskSample> source = adversarial ? gen_adversarial(spec) : clean;

  std::vector<std::size_t> train_idx, heldout_idx;
  split_indices(clean.size(), config.split_seed(), train_idx, heldout_idx);

  std::vector<TaskSample> train_set, heldout_set;
  for (std::size_t i : train_idx) train_set.push_back(source[i]);
  for (std::size_t i : heldout_idx) heldout_set.push_back(clean[i]);  // heldout stays clean

  fs::create_directories(out_dir);
  const Vocab vocab = build_run_vocab(clean);
  vocab.save((fs::path(out_dir) / config.vocab_path).string());
  write_jsonl(train_set, (fs::path(out_dir) / config.train_data_path).string());
  write_jsonl(heldout_set, (fs::path(out_dir) / config.heldout_data_path).string());

  std::cout << "vocab: " << vocab.size() << " tokens\n"
            << "train: " << train_set.size() << " samples (adversarial fraction "
            << spec.adversarial_fraction << ")\n"
            << "heldout: " << heldout_set.size() << " samples\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& mode_name) {
  RunConfig config = RunConfig::load(config_path);
  const EmbedMode mode = embed_mode_from_name(mode_name);
  const Vocab vocab = Vocab::load((fs::path(out_dir) / config.vocab_path).string());
  const auto dataset = read_jsonl((fs::path(out_dir) / config.train_data_path).string());

  ModelConfig model_config = config.model;
  model_config.vocab_size = vocab.size();
  model_config.mode = mode;

  const fs::path ckpt_dir = fs::path(out_dir) / config.checkpoint_dir;
  fs::create_directories(ckpt_dir);

  TrainCallbacks callbacks;
  callbacks.on_epoch_end = [&](int epoch, Checkpoint& ckpt) {
    save_checkpoint(ckpt, (ckpt_dir / (mode_name + "-epoch" + std::to_string(epoch + 1) +
                                       ".iselab")).string());
  };

  try {
    TrainResult result = train(model_config, config.train, dataset, vocab, config.scheme(),
                               config.merge_system_user, callbacks);
    Checkpoint final_ckpt = Checkpoint::from_params(result.params, model_config,
                                                    result.total_steps, config.train.seed);
    save_checkpoint(final_ckpt, (ckpt_dir / (mode_name + "-final.iselab")).string());
    write_file((fs::path(out_dir) / ("metrics-" + mode_name + ".jsonl")).string(),
               metrics_to_jsonl(result.metrics));
    std::cout << "steps: " << result.total_steps
              << "  final loss: " << result.metrics.back().loss << "\n"
              << "checkpoint: " << (ckpt_dir / (mode_name + "-final.iselab")).string() << "\n";
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  }
}

std::vector<InjectionSite> sites_from_flag(const std::string& sites) {
  if (sites == "id") return {InjectionSite::data_end};
  if (sites == "ood") return {InjectionSite::data_both_ends};
  if (sites == "direct") return {InjectionSite::user_field};
  throw ConfigError("unknown --sites value: " + sites);
}

int cmd_attack_eval(const std::string& config_path, const std::string& out_dir,
                    const std::string& checkpoint_path, const std::string& sites,
                    const std::string& kinds) {
  RunConfig config = RunConfig::load(config_path);
  const Vocab vocab = Vocab::load((fs::path(out_dir) / config.vocab_path).string());
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (ckpt.config.vocab_size != vocab.size()) {
    std::cerr << "vocabulary mismatch: checkpoint has " << ckpt.config.vocab_size
              << " tokens, vocabulary file has " << vocab.size() << "\n";
    return kExitVocabMismatch;
  }
  const ModelParams<float> params = ckpt.to_params();

  auto heldout = read_jsonl((fs::path(out_dir) / config.heldout_data_path).string());
  if (config.eval_samples > 0 && heldout.size() > static_cast<std::size_t>(config.eval_samples)) {
    heldout.resize(static_cast<std::size_t>(config.eval_samples));
  }

  if (kinds != "all" && kinds != "core4") throw ConfigError("unknown --kinds value: " + kinds);
  const auto& kind_list = kinds == "all" ? all_attack_kinds() : core4_attack_kinds();
  auto suite = build_suite(heldout, kind_list, sites_from_flag(sites), config.witness,
                           config.scheme(), config.suite_seed());

  auto result = run_eval(params, ckpt.config, vocab, config.scheme(), suite, heldout,
                         eval_options(config));

  const fs::path report_dir = fs::path(out_dir) / config.report_dir;
  fs::create_directories(report_dir);
  const std::string stem = fs::path(checkpoint_path).stem().string() + "-" + sites + "-" + kinds;
  write_file((report_dir / ("suite-" + stem + ".jsonl")).string(), suite_to_jsonl(suite));
  write_file((report_dir / ("report-" + stem + ".json")).string(),
             emit_report(result.report, ReportFormat::json));
  write_file((report_dir / ("report-" + stem + ".md")).string(),
             emit_report(result.report, ReportFormat::markdown));
  write_file((report_dir / ("responses-" + stem + ".jsonl")).string(),
             responses_to_jsonl(result.responses));

  std::cout << "instances: " << suite.size() << "\n"
            << "average robustness: " << *result.report.average_robustness << "\n"
            << "worst robustness: " << *result.report.worst_robustness << "\n"
            << "clean exact match: " << *result.report.clean_exact_match << "\n"
            << "report: " << (report_dir / ("report-" + stem + ".json")).string() << "\n";
  return 0;
}

int cmd_extract_eval(const std::string& config_path, const std::string& out_dir,
                     const std::string& checkpoint_path, const std::string& secrets_path) {
  RunConfig config = RunConfig::load(config_path);
  std::vector<std::string> secrets;
  for (const auto& line : read_lines(secrets_path)) {
    const std::string trimmed = normalize_whitespace(line);
    if (!trimmed.empty()) secrets.push_back(trimmed);
  }
  if (secrets.empty()) {
    std::cerr << "secrets file is empty: " << secrets_path << "\n";
    return kExitEmptySecrets;
  }

  const Vocab vocab = Vocab::load((fs::path(out_dir) / config.vocab_path).string());
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (ckpt.config.vocab_size != vocab.size()) {
    std::cerr << "vocabulary mismatch: checkpoint has " << ckpt.config.vocab_size
              << " tokens, vocabulary file has " << vocab.size() << "\n";
    return kExitVocabMismatch;
  }
  const ModelParams<float> params = ckpt.to_params();

  auto result = run_extraction_eval(params, ckpt.config, vocab, config.scheme(), secrets,
                                    eval_options(config));

  const fs::path report_dir = fs::path(out_dir) / config.report_dir;
  fs::create_directories(report_dir);
  const std::string stem = fs::path(checkpoint_path).stem().string();
  write_file((report_dir / ("extraction-" + stem + ".json")).string(),
             emit_report(result.report, ReportFormat::json));
  write_file((report_dir / ("extraction-" + stem + ".md")).string(),
             emit_report(result.report, ReportFormat::markdown));
  write_file((report_dir / ("extraction-responses-" + stem + ".jsonl")).string(),
             responses_to_jsonl(result.responses));

  std::cout << "secrets: " << secrets.size() << "\n"
            << "extraction robustness (average): " << *result.report.extraction_average << "\n"
            << "extraction robustness (worst): " << *result.report.extraction_worst << "\n";
  return 0;
}

int cmd_grad_check(std::uint64_t seed, int instances, bool corrupt) {
  if (corrupt) {
    // negative control: a wrong backward rule must be detected
    auto bad_square = [](const Tensor<double>& x) {
      Tensor<double> out = Tensor<double>::zeros(x.shape);
      for (std::size_t i = 0; i < x.numel(); ++i) (*out.data)[i] = (*x.data)[i] * (*x.data)[i];
      if (Tape<double>::active() && x.tracked()) {
        out.ensure_grad();
        out.node = Tape<double>::active()->record("bad_square", {x.node}, out.grad, [x, out]() {
          for (std::size_t i = 0; i < x.numel(); ++i) {
            (*x.grad)[i] += (*out.grad)[i] * (*x.data)[i];
          }
        });
      }
      return out;
    };
    auto x = Tensor<double>::from({2, 3}, {3.0, -2.5, 4.0, 1.5, -3.5, 2.0}, /*with_grad=*/true);
    auto report = grad_check([&](Tensor<double>& v) { return sum(bad_square(v)); }, x, 1e-6);
    std::cout << "corrupted rule max_rel_err: " << report.max_rel_err << "\n";
    return report.pass ? 0 : kExitGradCheckFailure;
  }

  const auto reports = run_grad_check_suite(seed, instances);
  std::cout << format_grad_report(reports);
  return all_pass(reports) ? 0 : kExitGradCheckFailure;
}

int cmd_report_diff(const std::string& path_a, const std::string& path_b,
                    const std::string& out_dir) {
  const EvalReport a = report_from_json(read_file(path_a));
  const EvalReport b = report_from_json(read_file(path_b));
  if (a.suite_hash != b.suite_hash) {
    std::cerr << "suite hash mismatch: " << a.suite_hash << " vs " << b.suite_hash << "\n";
    return kExitSuiteMismatch;
  }
  const std::string md = report_diff_markdown(a, b);
  std::cout << md;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "diff.md").string(), md);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instruction-hierarchy robustness laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", checkpoint_path, secrets_path;
  std::string mode = "baseline", sites = "id", kinds = "core4";
  std::string diff_a, diff_b;
  bool adversarial = false, corrupt = false;
  std::uint64_t gc_seed = 20240817;
  int gc_instances = 100;

  auto* gen = app.add_subcommand("gen-data", "generate the task dataset and vocabulary");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--out", out_dir);
  gen->add_flag("--adversarial", adversarial, "inject training attacks into half the train split");

  auto* tr = app.add_subcommand("train", "supervised fine-tuning");
  tr->add_option("--config", config_path)->required();
  tr->add_option("--out", out_dir);
  tr->add_option("--mode", mode)->check(CLI::IsMember({"baseline", "ise"}));

  auto* ae = app.add_subcommand("attack-eval", "robustness against injection attacks");
  ae->add_option("--config", config_path)->required();
  ae->add_option("--out", out_dir);
  ae->add_option("--checkpoint", checkpoint_path)->required();
  ae->add_option("--sites", sites)->check(CLI::IsMember({"id", "ood", "direct"}));
  ae->add_option("--kinds", kinds)->check(CLI::IsMember({"all", "core4"}));

  auto* ee = app.add_subcommand("extract-eval", "prompt-extraction robustness");
  ee->add_option("--config", config_path)->required();
  ee->add_option("--out", out_dir);
  ee->add_option("--checkpoint", checkpoint_path)->required();
  ee->add_option("--secrets", secrets_path)->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--instances", gc_instances);
  gc->add_flag("--corrupt", corrupt, "run the deliberately broken rule (expects failure)");

  auto* rd = app.add_subcommand("report-diff", "side-by-side comparison of two reports");
  rd->add_option("report_a", diff_a)->required();
  rd->add_option("report_b", diff_b)->required();
  rd->add_option("--out", out_dir);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, adversarial);
    if (tr->parsed()) return cmd_train(config_path, out_dir, mode);
    if (ae->parsed()) return cmd_attack_eval(config_path, out_dir, checkpoint_path, sites, kinds);
    if (ee->parsed()) return cmd_extract_eval(config_path, out_dir, checkpoint_path, secrets_path);
    if (gc->parsed()) return cmd_grad_check(gc_seed, gc_instances, corrupt);
    if (rd->parsed()) return cmd_report_diff(diff_a, diff_b, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
