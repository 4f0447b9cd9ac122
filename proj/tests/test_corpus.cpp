#include <string>
#include <vector>

#include "doctest.h"
#include "iselab/corpus.hpp"
#include "iselab/io.hpp"

using namespace iselab;

TEST_CASE("solver exact answers") {
  CHECK(solver(TaskKind::reverse, "a b c") == "c b a");
  CHECK(solver(TaskKind::count, "a b c") == "3");
  CHECK(solver(TaskKind::sort, "b a c") == "a b c");
  CHECK(solver(TaskKind::copy, "q w e") == "q w e");
  CHECK(solver(TaskKind::select_kth, "2 c a b") == "a");
}

TEST_CASE("solver rejects malformed payloads") {
  CHECK_THROWS_AS(solver(TaskKind::copy, "   "), ParseError);
  CHECK_THROWS_AS(solver(TaskKind::select_kth, "x a b"), ParseError);
  CHECK_THROWS_AS(solver(TaskKind::select_kth, "9 a b"), ParseError);
  CHECK_THROWS_AS(solver(TaskKind::select_kth, "4"), ParseError);
}

TEST_CASE("clean generation is deterministic and oracle-consistent") {
  DatasetSpec spec;
  spec.n_samples = 200;
  spec.seed = 42;
  auto a = gen_clean(spec);
  auto b = gen_clean(spec);
  CHECK(to_jsonl(a) == to_jsonl(b));
  for (const auto& s : a) {
    CHECK_FALSE(s.adversarial);
    CHECK_FALSE(s.injected_kind.has_value());
    REQUIRE(s.prompt.data.has_value());
    CHECK(s.reference == solver(s.kind, *s.prompt.data));
    CHECK(s.prompt.system == corpus_system_text());
  }
}

TEST_CASE("different seeds change the dataset") {
  DatasetSpec spec;
  spec.n_samples = 50;
  spec.seed = 1;
  DatasetSpec other = spec;
  other.seed = 2;
  CHECK(to_jsonl(gen_clean(spec)) != to_jsonl(gen_clean(other)));
}

TEST_CASE("adversarial_fraction zero reproduces the clean dataset") {
  DatasetSpec spec;
  spec.n_samples = 120;
  spec.seed = 7;
  spec.adversarial_fraction = 0.0;
  CHECK(to_jsonl(gen_adversarial(spec)) == to_jsonl(gen_clean(spec)));
}

TEST_CASE("adversarial generation keeps references and marks exactly floor(n*f)") {
  DatasetSpec spec;
  spec.n_samples = 1000;
  spec.seed = 11;
  spec.adversarial_fraction = 0.5;
  auto adv = gen_adversarial(spec);
  auto clean = gen_clean(spec);
  REQUIRE(adv.size() == clean.size());

  int n_adv = 0;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    CHECK(adv[i].reference == clean[i].reference);  // injection never changes the reference
    CHECK(adv[i].prompt.user == clean[i].prompt.user);
    if (adv[i].adversarial) {
      ++n_adv;
      REQUIRE(adv[i].injected_kind.has_value());
      const std::string kind = *adv[i].injected_kind;
      CHECK((kind == "naive" || kind == "completion_other"));
      // the injected text is appended inside the data field
      CHECK(adv[i].prompt.data->rfind(*clean[i].prompt.data + "\n", 0) == 0);
      CHECK(adv[i].prompt.data->size() > clean[i].prompt.data->size());
    } else {
      CHECK(adv[i].prompt.data == clean[i].prompt.data);
    }
  }
  CHECK(n_adv == 500);
}

TEST_CASE("jsonl round trip is lossless") {
  DatasetSpec spec;
  spec.n_samples = 40;
  spec.seed = 3;
  spec.adversarial_fraction = 0.25;
  auto samples = gen_adversarial(spec);
  const std::string path = "corpus_roundtrip_test.jsonl";
  write_jsonl(samples, path);
  auto loaded = read_jsonl(path);
  CHECK(to_jsonl(loaded) == to_jsonl(samples));
  std::remove(path.c_str());
}

TEST_CASE("jsonl edge cases: empty input and malformed lines") {
  CHECK(from_jsonl("").empty());
  CHECK_THROWS_AS(from_jsonl("{not json}\n"), ParseError);
  // missing required field
  CHECK_THROWS_AS(from_jsonl(R"({"system":"s","user":"u"})" "\n"), ParseError);
  // the error message names the offending line
  try {
    from_jsonl("{\"system\":\"s\",\"user\":\"u\",\"data\":null,\"reference\":\"r\","
               "\"kind\":\"copy\",\"adversarial\":false,\"injected_kind\":null}\nboom\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}
