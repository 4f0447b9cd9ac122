#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "iselab/errors.hpp"

namespace iselab {

/// Hierarchy roles. The numeric values are the segment ids fed to the
/// segment embedding table.
enum class Role : int {
  System = 0,
  User = 1,
  Data = 2,
  Output = 3,
};

inline constexpr int kNumRoles = 4;

/// Role-separated prompt text before rendering. Single turn; system and
/// user are always present (possibly empty), data is optional.
struct StructuredPrompt {
  std::string system;
  std::string user;
  std::optional<std::string> data;
};

/// Parallel token/segment arrays.
struct SegmentedSequence {
  std::vector<int> tokens;
  std::vector<int> segments;

  std::size_t size() const { return tokens.size(); }
};

/// How role blocks are separated in the rendered sequence: plain-text
/// marker strings that tokenize like any other text, or single reserved
/// vocabulary ids that plain-text tokenization can never produce.
struct DelimiterScheme {
  enum class Kind { text_markers, special_tokens };

  Kind kind = Kind::special_tokens;
  std::array<std::string, kNumRoles> begin;
  std::array<std::string, kNumRoles> end;  // end[Output] unused; generation ends at eos

  static DelimiterScheme text_markers();
  static DelimiterScheme special_tokens();

  static DelimiterScheme from_name(const std::string& name);
  std::string name() const;
};

/// Deterministic word-level vocabulary with single-character fallback and
/// reserved specials at the lowest ids.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  /// Builds the vocabulary from raw texts: reserved specials first, then
  /// sorted unique words, then sorted unique single characters for
  /// fallback. The same multiset of texts always yields the same vocab.
  static Vocab build(const std::vector<std::string>& corpus_texts);

  static Vocab from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token_text(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// Reserved id for a special marker name such as "<|system|>"; throws
  /// ConfigError if the marker is unknown.
  int special_id(const std::string& name) const;
  bool is_special(int id) const { return id < n_special_; }

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  Vocab() = default;
  void index_tokens();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> word_ids_;     // plain tokens only
  std::unordered_map<std::string, int> special_ids_;  // reserved names
  int n_special_ = 0;
};

/// Reserved special-token names, in id order (after pad/bos/eos/unk).
const std::vector<std::string>& special_marker_names();

/// Splits text into word / single-character tokens. Runs of letters,
/// digits and underscores form words; every other non-space character
/// stands alone. '\n', '\t', '\r' and '\b' are kept as tokens, other
/// whitespace only separates.
std::vector<std::string> split_words(const std::string& text);

/// Renders a prompt into a segmented token sequence: system, user, data
/// (when present) blocks followed by the assistant header. Delimiter
/// tokens carry the role of the block they introduce; the assistant
/// header is tagged Output. With merge_system_user the system block's
/// tokens are tagged User instead of System.
SegmentedSequence render(const StructuredPrompt& prompt, const Vocab& vocab,
                         const DelimiterScheme& scheme, bool merge_system_user = false);

/// Appends the response tokens plus eos, all tagged Output.
SegmentedSequence append_output(const SegmentedSequence& seq, const std::string& response_text,
                                const Vocab& vocab);

}  // namespace iselab
