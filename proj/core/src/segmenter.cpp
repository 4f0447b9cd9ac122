#include "iselab/segmenter.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace iselab {

namespace {

bool is_word_char(unsigned char c) {
  return std::isalnum(c) || c == '_';
}

bool is_kept_control(char c) {
  return c == '\n' || c == '\t' || c == '\r' || c == '\b';
}

const std::array<const char*, kNumRoles> kSpecialBegin = {"<|system|>", "<|user|>", "<|data|>",
                                                          "<|assistant|>"};
const std::array<const char*, kNumRoles> kSpecialEnd = {"<|/system|>", "<|/user|>", "<|/data|>", ""};

}  // namespace

// ---------------------------------------------------------------------------
// DelimiterScheme
// ---------------------------------------------------------------------------

DelimiterScheme DelimiterScheme::text_markers() {
  DelimiterScheme s;
  s.kind = Kind::text_markers;
  s.begin = {"[SYSTEM]\n", "[USER]\n", "[DATA]\n", "[ASSISTANT]\n"};
  s.end = {"\n[/SYSTEM]\n", "\n[/USER]\n", "\n[/DATA]\n", ""};
  return s;
}

DelimiterScheme DelimiterScheme::special_tokens() {
  DelimiterScheme s;
  s.kind = Kind::special_tokens;
  for (int r = 0; r < kNumRoles; ++r) {
    s.begin[static_cast<std::size_t>(r)] = kSpecialBegin[static_cast<std::size_t>(r)];
    s.end[static_cast<std::size_t>(r)] = kSpecialEnd[static_cast<std::size_t>(r)];
  }
  return s;
}

DelimiterScheme DelimiterScheme::from_name(const std::string& name) {
  if (name == "text_markers") return text_markers();
  if (name == "special_tokens") return special_tokens();
  throw ConfigError("unknown delimiter scheme: " + name);
}

std::string DelimiterScheme::name() const {
  return kind == Kind::text_markers ? "text_markers" : "special_tokens";
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
    } else if (c == ' ') {
      ++i;
    } else if (is_kept_control(static_cast<char>(c)) || !std::isspace(c)) {
      out.push_back(std::string(1, static_cast<char>(c)));
      ++i;
    } else {
      ++i;
    }
  }
  return out;
}

const std::vector<std::string>& special_marker_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const char* b : kSpecialBegin) v.push_back(b);
    for (const char* e : kSpecialEnd) {
      if (*e) v.push_back(e);
    }
    return v;
  }();
  return names;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab Vocab::build(const std::vector<std::string>& corpus_texts) {
  if (corpus_texts.empty()) throw ConfigError("build_vocab: empty corpus");
  std::set<std::string> words;
  std::set<std::string> chars;
  for (const auto& text : corpus_texts) {
    for (const auto& tok : split_words(text)) {
      words.insert(tok);
      for (char c : tok) chars.insert(std::string(1, c));
    }
  }

  Vocab v;
  v.tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& name : special_marker_names()) v.tokens_.push_back(name);
  v.n_special_ = static_cast<int>(v.tokens_.size());
  for (const auto& w : words) v.tokens_.push_back(w);
  for (const auto& c : chars) {
    if (!words.count(c)) v.tokens_.push_back(c);
  }
  v.index_tokens();
  return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.n_special_ = 4 + static_cast<int>(special_marker_names().size());
  if (static_cast<int>(v.tokens_.size()) < v.n_special_) {
    throw FormatError("vocabulary is missing reserved specials");
  }
  v.index_tokens();
  return v;
}

void Vocab::index_tokens() {
  for (int id = 0; id < static_cast<int>(tokens_.size()); ++id) {
    if (id < n_special_) {
      special_ids_[tokens_[static_cast<std::size_t>(id)]] = id;
    } else {
      word_ids_[tokens_[static_cast<std::size_t>(id)]] = id;
    }
  }
}

int Vocab::special_id(const std::string& name) const {
  auto it = special_ids_.find(name);
  if (it == special_ids_.end()) throw ConfigError("unknown special token: " + name);
  return it->second;
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& tok : split_words(text)) {
    auto it = word_ids_.find(tok);
    if (it != word_ids_.end()) {
      ids.push_back(it->second);
      continue;
    }
    // character fallback; unk per missing character
    for (char c : tok) {
      auto cit = word_ids_.find(std::string(1, c));
      ids.push_back(cit != word_ids_.end() ? cit->second : kUnk);
    }
  }
  return ids;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  static const std::string no_space_before = ".,:;!?)]}";
  static const std::string no_space_after = "([{";
  std::string out;
  bool suppress_next_space = true;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw IndexError("detokenize: id out of range");
    if (is_special(id)) continue;
    const std::string& tok = tokens_[static_cast<std::size_t>(id)];
    const bool control = tok.size() == 1 && is_kept_control(tok[0]);
    const bool attach = control || (tok.size() == 1 && no_space_before.find(tok[0]) != std::string::npos);
    if (!out.empty() && !suppress_next_space && !attach) out += ' ';
    out += tok;
    suppress_next_space =
        control || (tok.size() == 1 && no_space_after.find(tok[0]) != std::string::npos);
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  nlohmann::json j = tokens_;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary: " + path);
  out << j.dump() << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vocabulary parse failure: ") + e.what());
  }
  if (!j.is_array()) throw FormatError("vocabulary file must be a JSON list");
  return from_tokens(j.get<std::vector<std::string>>());
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void append_tagged(SegmentedSequence& seq, const std::vector<int>& ids, Role role) {
  for (int id : ids) {
    seq.tokens.push_back(id);
    seq.segments.push_back(static_cast<int>(role));
  }
}

void append_marker(SegmentedSequence& seq, const Vocab& vocab, const DelimiterScheme& scheme,
                   const std::string& marker, Role tag) {
  if (marker.empty()) return;
  if (scheme.kind == DelimiterScheme::Kind::special_tokens) {
    seq.tokens.push_back(vocab.special_id(marker));
    seq.segments.push_back(static_cast<int>(tag));
  } else {
    append_tagged(seq, vocab.tokenize(marker), tag);
  }
}

void append_block(SegmentedSequence& seq, const Vocab& vocab, const DelimiterScheme& scheme,
                  Role block_role, const std::string& content, Role tag) {
  const auto idx = static_cast<std::size_t>(block_role);
  append_marker(seq, vocab, scheme, scheme.begin[idx], tag);
  append_tagged(seq, vocab.tokenize(content), tag);
  append_marker(seq, vocab, scheme, scheme.end[idx], tag);
}

}  // namespace

SegmentedSequence render(const StructuredPrompt& prompt, const Vocab& vocab,
                         const DelimiterScheme& scheme, bool merge_system_user) {
  SegmentedSequence seq;
  append_block(seq, vocab, scheme, Role::System, prompt.system,
               merge_system_user ? Role::User : Role::System);
  append_block(seq, vocab, scheme, Role::User, prompt.user, Role::User);
  if (prompt.data.has_value()) {
    append_block(seq, vocab, scheme, Role::Data, *prompt.data, Role::Data);
  }
  append_marker(seq, vocab, scheme, scheme.begin[static_cast<std::size_t>(Role::Output)],
                Role::Output);
  return seq;
}

SegmentedSequence append_output(const SegmentedSequence& seq, const std::string& response_text,
                                const Vocab& vocab) {
  SegmentedSequence out = seq;
  append_tagged(out, vocab.tokenize(response_text), Role::Output);
  out.tokens.push_back(Vocab::kEos);
  out.segments.push_back(static_cast<int>(Role::Output));
  return out;
}

}  // namespace iselab
