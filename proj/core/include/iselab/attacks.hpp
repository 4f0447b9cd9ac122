#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "iselab/corpus.hpp"
#include "iselab/segmenter.hpp"

namespace iselab {

/// Evaluation-time injection catalog. Enumeration order is the canonical
/// reporting order.
enum class AttackKind {
  naive,
  ignore,
  escape_deletion,
  escape_separation,
  completion_other,
  completion_othercmb,
  completion_real,
  completion_realcmb,
  completion_close_2hash,
  completion_close_1hash,
  completion_close_0hash,
  completion_close_upper,
  completion_close_title,
  completion_close_nospace,
  completion_close_nocolon,
  completion_close_typo,
  completion_close_similar,
};

inline constexpr int kNumAttackKinds = 17;

const std::vector<AttackKind>& all_attack_kinds();

/// The four kinds reported as the headline robustness summary: naive,
/// ignore, escape_separation, completion_real.
const std::vector<AttackKind>& core4_attack_kinds();

AttackKind attack_kind_from_name(const std::string& name);
std::string attack_kind_name(AttackKind kind);

/// Where the payload lands: appended after the data (in-domain), wrapped
/// around both ends of the data (out-of-domain), or appended to the user
/// text (direct injection).
enum class InjectionSite { data_end, data_both_ends, user_field };

InjectionSite injection_site_from_name(const std::string& name);
std::string injection_site_name(InjectionSite site);

inline constexpr const char* kDefaultWitness = "hacked";

/// Bump when any canonical attack string changes.
inline constexpr int kAttackTextVersion = 1;

/// Canonical injected text for an attack kind. Deterministic; the witness
/// appears verbatim. Completion-real (and -realcmb) spoof the delimiter
/// scheme actually in use, written as plain text into the payload.
std::string injection_payload(AttackKind kind, const std::string& witness,
                              const DelimiterScheme& scheme);

/// Training-time injections used by the adversarial dataset: either the
/// donor instruction alone or a generic spoofed response followed by it.
std::string training_injection(const std::string& donor_instruction, bool completion_style);

struct AttackInstance {
  StructuredPrompt prompt;  // post-injection
  std::string witness;
  AttackKind kind = AttackKind::naive;
  InjectionSite site = InjectionSite::data_end;
  int source_sample_id = 0;
};

/// Injects a payload into one field of the sample's prompt. Site data_* on
/// a data-less sample raises ConfigError.
AttackInstance apply_injection(const TaskSample& sample, int sample_id, AttackKind kind,
                               InjectionSite site, const std::string& witness,
                               const DelimiterScheme& scheme);

/// Cartesian product samples x kinds x sites, filtered by site validity,
/// in deterministic order.
std::vector<AttackInstance> build_suite(const std::vector<TaskSample>& samples,
                                        const std::vector<AttackKind>& kinds,
                                        const std::vector<InjectionSite>& sites,
                                        const std::string& witness, const DelimiterScheme& scheme,
                                        std::uint64_t seed);

std::string suite_to_jsonl(const std::vector<AttackInstance>& suite);

struct ExtractionAttack {
  int template_id = 1;  // 1..15
  std::string attack_text;
  std::string secret;
};

inline constexpr int kNumExtractionTemplates = 15;

/// The 15 canonical extraction prompts (repeat-your-prompt, translation
/// framing, role-play, formatting tricks, prefix-completion).
const std::array<std::string, kNumExtractionTemplates>& extraction_templates();

/// 15 templates x secrets. No attack text contains its secret.
std::vector<ExtractionAttack> extraction_suite(const std::vector<std::string>& secrets);

std::string extraction_suite_to_jsonl(const std::vector<ExtractionAttack>& suite);

/// Texts whose tokens must exist in any vocabulary used for evaluation:
/// every canonical payload under both delimiter schemes, the extraction
/// templates, the marker strings, and the default witness.
std::vector<std::string> attack_vocab_seed_texts();

}  // namespace iselab
