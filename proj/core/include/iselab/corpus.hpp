#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iselab/segmenter.hpp"

namespace iselab {

/// Synthetic list-manipulation tasks. Every kind has an exact programmatic
/// solver, so "the model did the task and ignored the injection" is
/// decidable by string comparison.
enum class TaskKind { copy, reverse, sort, count, select_kth };

inline constexpr int kNumTaskKinds = 5;

TaskKind task_kind_from_name(const std::string& name);
std::string task_kind_name(TaskKind kind);

struct TaskSample {
  StructuredPrompt prompt;
  std::string reference;
  TaskKind kind = TaskKind::copy;
  bool adversarial = false;
  std::optional<std::string> injected_kind;
};

struct DatasetSpec {
  int n_samples = 1000;
  double adversarial_fraction = 0.0;
  std::uint64_t seed = 0;
  int payload_min = 3;
  int payload_max = 8;
};

/// Exact answer for a task payload. The payload is a space-separated token
/// list; for select_kth its first token is the 1-based index k into the
/// remaining tokens. Malformed payloads raise ParseError.
std::string solver(TaskKind kind, const std::string& payload);

/// The dataset-wide system sentence.
const std::string& corpus_system_text();

/// The user instruction for a task kind.
const std::string& task_instruction(TaskKind kind);

std::vector<TaskSample> gen_clean(const DatasetSpec& spec);

/// Clean generation plus training-time injections appended inside the data
/// field of floor(n * adversarial_fraction) samples. The injected text is
/// another sample's instruction (naive) or a spoofed response followed by
/// another instruction (completion_other); references are unchanged.
std::vector<TaskSample> gen_adversarial(const DatasetSpec& spec);

std::string to_jsonl(const std::vector<TaskSample>& samples);
std::vector<TaskSample> from_jsonl(const std::string& text);

void write_jsonl(const std::vector<TaskSample>& samples, const std::string& path);
std::vector<TaskSample> read_jsonl(const std::string& path);

}  // namespace iselab
