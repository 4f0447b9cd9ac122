#pragma once

#include <cstdint>
#include <string>

#include "iselab/corpus.hpp"
#include "iselab/model.hpp"
#include "iselab/segmenter.hpp"
#include "iselab/trainer.hpp"

namespace iselab {

/// Experiment configuration file. JSON with a required "version" field;
/// unknown keys are rejected at every level. All randomness derives from
/// the single top-level seed.
struct RunConfig {
  static constexpr int kVersion = 1;

  std::uint64_t seed = 1234;
  std::string scheme_name = "special_tokens";
  bool merge_system_user = false;

  ModelConfig model;       // vocab_size filled from the vocabulary at load time
  TrainConfig train;
  DatasetSpec dataset;     // seed filled from the derived stream

  int eval_max_new_tokens = 16;
  int eval_samples = 200;
  std::string witness = kDefaultWitnessText();

  std::string vocab_path = "vocab.json";
  std::string train_data_path = "train.jsonl";
  std::string heldout_data_path = "heldout.jsonl";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";

  static const char* kDefaultWitnessText() { return "hacked"; }

  DelimiterScheme scheme() const { return DelimiterScheme::from_name(scheme_name); }

  // derived seed streams
  std::uint64_t dataset_seed() const;
  std::uint64_t split_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t suite_seed() const;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json_text() const;
};

/// Seed list for vocabulary construction: corpus texts are drawn from this
/// closed word set, so the vocabulary is identical across datasets.
std::vector<std::string> corpus_vocab_seed_texts();

/// Builds the shared vocabulary (corpus seeds + attack seeds + sample texts).
Vocab build_run_vocab(const std::vector<TaskSample>& samples);

}  // namespace iselab
