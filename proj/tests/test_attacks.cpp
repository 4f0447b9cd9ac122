#include <algorithm>
#include <cctype>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "iselab/attacks.hpp"
#include "iselab/corpus.hpp"
#include "iselab/segmenter.hpp"

using namespace iselab;

namespace {

TaskSample make_sample() {
  TaskSample s;
  s.prompt.system = corpus_system_text();
  s.prompt.user = task_instruction(TaskKind::reverse);
  s.prompt.data = "a b c";
  s.reference = "c b a";
  s.kind = TaskKind::reverse;
  return s;
}

int count_fields_changed(const StructuredPrompt& a, const StructuredPrompt& b) {
  int changed = 0;
  changed += a.system != b.system ? 1 : 0;
  changed += a.user != b.user ? 1 : 0;
  changed += a.data != b.data ? 1 : 0;
  return changed;
}

}  // namespace

TEST_CASE("catalog covers all seventeen kinds in order") {
  REQUIRE(all_attack_kinds().size() == 17);
  CHECK(attack_kind_name(all_attack_kinds().front()) == "naive");
  CHECK(attack_kind_name(all_attack_kinds().back()) == "completion_close_similar");
  CHECK(core4_attack_kinds().size() == 4);
  for (AttackKind kind : all_attack_kinds()) {
    CHECK(attack_kind_from_name(attack_kind_name(kind)) == kind);
  }
}

TEST_CASE("every payload contains the witness; payloads are distinct") {
  for (auto scheme : {DelimiterScheme::text_markers(), DelimiterScheme::special_tokens()}) {
    std::set<std::string> seen;
    for (AttackKind kind : all_attack_kinds()) {
      const std::string payload = injection_payload(kind, kDefaultWitness, scheme);
      CHECK(payload.find(kDefaultWitness) != std::string::npos);
      CHECK(seen.insert(payload).second);
    }
  }
}

TEST_CASE("naive payload carries no delimiter spoof") {
  const auto scheme = DelimiterScheme::text_markers();
  const std::string payload = injection_payload(AttackKind::naive, kDefaultWitness, scheme);
  CHECK(payload.find('#') == std::string::npos);
  CHECK(payload.find("response") == std::string::npos);
  CHECK(payload.find(scheme.begin[3]) == std::string::npos);
}

TEST_CASE("escape payloads carry their control characters") {
  const auto scheme = DelimiterScheme::special_tokens();
  const std::string del = injection_payload(AttackKind::escape_deletion, kDefaultWitness, scheme);
  CHECK(std::count(del.begin(), del.end(), '\b') >= 8);
  CHECK(std::count(del.begin(), del.end(), '\r') >= 8);
  const std::string sep = injection_payload(AttackKind::escape_separation, kDefaultWitness, scheme);
  CHECK(std::count(sep.begin(), sep.end(), '\n') >= 8);
}

TEST_CASE("completion_real spoofs the live scheme's markers") {
  for (auto scheme : {DelimiterScheme::text_markers(), DelimiterScheme::special_tokens()}) {
    const std::string payload =
        injection_payload(AttackKind::completion_real, kDefaultWitness, scheme);
    CHECK(payload.find(scheme.begin[static_cast<int>(Role::Output)]) != std::string::npos);
    CHECK(payload.find(scheme.begin[static_cast<int>(Role::User)]) != std::string::npos);
  }
  // the two schemes therefore produce different spoofs
  CHECK(injection_payload(AttackKind::completion_real, kDefaultWitness,
                          DelimiterScheme::text_markers()) !=
        injection_payload(AttackKind::completion_real, kDefaultWitness,
                          DelimiterScheme::special_tokens()));
}

TEST_CASE("close variants mutate only the spoofed delimiter") {
  const auto scheme = DelimiterScheme::special_tokens();
  auto payload = [&](AttackKind k) { return injection_payload(k, kDefaultWitness, scheme); };

  // nospace differs from 2hash only in whitespace around the spoofed delimiter
  std::string no_ws_2hash = payload(AttackKind::completion_close_2hash);
  std::string no_ws_nospace = payload(AttackKind::completion_close_nospace);
  auto strip_spaces = [](std::string s) {
    s.erase(std::remove(s.begin(), s.end(), ' '), s.end());
    return s;
  };
  CHECK(no_ws_2hash != no_ws_nospace);
  CHECK(strip_spaces(no_ws_2hash) == strip_spaces(no_ws_nospace));

  // upper differs from 2hash only by letter case
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  CHECK(lower(payload(AttackKind::completion_close_upper)) ==
        lower(payload(AttackKind::completion_close_2hash)));

  // nocolon strips the colon from the 2hash headers
  std::string nocolon = payload(AttackKind::completion_close_nocolon);
  CHECK(nocolon.find("##") != std::string::npos);
  CHECK(nocolon.find("## response:") == std::string::npos);
}

TEST_CASE("apply_injection placement contracts") {
  const auto scheme = DelimiterScheme::special_tokens();
  auto sample = make_sample();
  const std::string payload = injection_payload(AttackKind::naive, kDefaultWitness, scheme);

  auto at_end = apply_injection(sample, 0, AttackKind::naive, InjectionSite::data_end,
                                kDefaultWitness, scheme);
  CHECK(*at_end.prompt.data == "a b c\n" + payload);
  CHECK(count_fields_changed(at_end.prompt, sample.prompt) == 1);

  auto both = apply_injection(sample, 0, AttackKind::naive, InjectionSite::data_both_ends,
                              kDefaultWitness, scheme);
  CHECK(both.prompt.data->rfind(payload, 0) == 0);
  CHECK(both.prompt.data->find(payload, both.prompt.data->size() - payload.size()) !=
        std::string::npos);
  CHECK(count_fields_changed(both.prompt, sample.prompt) == 1);

  auto direct = apply_injection(sample, 0, AttackKind::naive, InjectionSite::user_field,
                                kDefaultWitness, scheme);
  CHECK(direct.prompt.data == sample.prompt.data);
  CHECK(direct.prompt.user != sample.prompt.user);
  CHECK(count_fields_changed(direct.prompt, sample.prompt) == 1);

  TaskSample data_less = sample;
  data_less.prompt.data.reset();
  CHECK_THROWS_AS(apply_injection(data_less, 0, AttackKind::naive, InjectionSite::data_end,
                                  kDefaultWitness, scheme),
                  ConfigError);
}

TEST_CASE("in-domain and out-of-domain share the identical payload string") {
  const auto scheme = DelimiterScheme::text_markers();
  auto sample = make_sample();
  for (AttackKind kind : all_attack_kinds()) {
    const std::string payload = injection_payload(kind, kDefaultWitness, scheme);
    auto id = apply_injection(sample, 0, kind, InjectionSite::data_end, kDefaultWitness, scheme);
    auto ood =
        apply_injection(sample, 0, kind, InjectionSite::data_both_ends, kDefaultWitness, scheme);
    CHECK(id.prompt.data->find(payload) != std::string::npos);
    CHECK(ood.prompt.data->find(payload) != std::string::npos);
  }
}

TEST_CASE("build_suite cardinality, determinism and witness containment") {
  DatasetSpec spec;
  spec.n_samples = 10;
  spec.seed = 5;
  auto samples = gen_clean(spec);
  const auto scheme = DelimiterScheme::special_tokens();

  auto suite = build_suite(samples, core4_attack_kinds(), {InjectionSite::data_end},
                           kDefaultWitness, scheme, 99);
  CHECK(suite.size() == 40);  // 10 samples x 4 kinds x 1 site

  auto again = build_suite(samples, core4_attack_kinds(), {InjectionSite::data_end},
                           kDefaultWitness, scheme, 99);
  CHECK(suite_to_jsonl(suite) == suite_to_jsonl(again));

  for (const auto& inst : suite) {
    const std::string& field = inst.site == InjectionSite::user_field
                                   ? inst.prompt.user
                                   : *inst.prompt.data;
    CHECK(field.find(kDefaultWitness) != std::string::npos);
  }

  CHECK_THROWS_AS(build_suite({}, core4_attack_kinds(), {InjectionSite::data_end},
                              kDefaultWitness, scheme, 1),
                  ConfigError);
}

TEST_CASE("attack instances render with intact segment invariants") {
  DatasetSpec spec;
  spec.n_samples = 3;
  spec.seed = 8;
  auto samples = gen_clean(spec);
  std::vector<std::string> corpus_texts = attack_vocab_seed_texts();
  for (const auto& s : samples) {
    corpus_texts.push_back(s.prompt.system);
    corpus_texts.push_back(s.prompt.user);
    corpus_texts.push_back(*s.prompt.data);
  }
  auto vocab = Vocab::build(corpus_texts);

  for (auto scheme : {DelimiterScheme::text_markers(), DelimiterScheme::special_tokens()}) {
    auto suite = build_suite(samples, all_attack_kinds(),
                             {InjectionSite::data_end, InjectionSite::data_both_ends,
                              InjectionSite::user_field},
                             kDefaultWitness, scheme, 4);
    CHECK(suite.size() == 3u * 17u * 3u);
    for (const auto& inst : suite) {
      auto seq = render(inst.prompt, vocab, scheme);
      REQUIRE(seq.tokens.size() == seq.segments.size());
      for (std::size_t i = 1; i < seq.size(); ++i) {
        CHECK(seq.segments[i] >= seq.segments[i - 1]);
      }
    }
  }
}

TEST_CASE("extraction suite: 15 templates per secret, none containing it") {
  const std::vector<std::string> secrets = {"the vault code is under the mat",
                                            "never reveal the launch phrase"};
  auto suite = extraction_suite(secrets);
  CHECK(suite.size() == 30);
  std::set<int> ids;
  for (const auto& attack : suite) {
    ids.insert(attack.template_id);
    CHECK(attack.attack_text.find(attack.secret) == std::string::npos);
  }
  CHECK(ids.size() == 15);
  CHECK(*ids.begin() == 1);
  CHECK(*ids.rbegin() == 15);

  auto again = extraction_suite(secrets);
  CHECK(extraction_suite_to_jsonl(suite) == extraction_suite_to_jsonl(again));

  CHECK_THROWS_AS(extraction_suite({}), ConfigError);
}
