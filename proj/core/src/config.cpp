#include "iselab/config.hpp"

#include <set>

#include "iselab/attacks.hpp"
#include "iselab/io.hpp"
#include "iselab/rng.hpp"
#include "json.hpp"

namespace iselab {

namespace {

void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key: " + where + key);
    }
  }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

std::uint64_t RunConfig::dataset_seed() const { return mix_seed(seed, 1); }
std::uint64_t RunConfig::split_seed() const { return mix_seed(seed, 2); }
std::uint64_t RunConfig::train_seed() const { return mix_seed(seed, 3); }
std::uint64_t RunConfig::suite_seed() const { return mix_seed(seed, 4); }

RunConfig RunConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("version")) throw ConfigError("config is missing the required version field");
  if (j.at("version").get<int>() != kVersion) {
    throw ConfigError("unsupported config version " + j.at("version").dump());
  }
  reject_unknown_keys(j, {"version", "seed", "scheme", "merge_system_user", "model", "train",
                          "dataset", "eval", "paths"},
                      "");

  RunConfig c;
  read_field(j, "seed", c.seed);
  read_field(j, "scheme", c.scheme_name);
  DelimiterScheme::from_name(c.scheme_name);  // validate early
  read_field(j, "merge_system_user", c.merge_system_user);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown_keys(m, {"embed_dim", "n_layers", "n_heads", "ff_dim", "max_seq_len",
                            "rope_theta", "n_hierarchies"},
                        "model.");
    read_field(m, "embed_dim", c.model.embed_dim);
    read_field(m, "n_layers", c.model.n_layers);
    read_field(m, "n_heads", c.model.n_heads);
    read_field(m, "ff_dim", c.model.ff_dim);
    read_field(m, "max_seq_len", c.model.max_seq_len);
    read_field(m, "rope_theta", c.model.rope_theta);
    read_field(m, "n_hierarchies", c.model.n_hierarchies);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown_keys(
        t, {"lr_peak", "epochs", "batch_size", "grad_clip_norm", "beta1", "beta2", "eps"},
        "train.");
    read_field(t, "lr_peak", c.train.lr_peak);
    read_field(t, "epochs", c.train.epochs);
    read_field(t, "batch_size", c.train.batch_size);
    read_field(t, "grad_clip_norm", c.train.grad_clip_norm);
    read_field(t, "beta1", c.train.beta1);
    read_field(t, "beta2", c.train.beta2);
    read_field(t, "eps", c.train.eps);
  }

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    reject_unknown_keys(d, {"n_samples", "payload_min", "payload_max"}, "dataset.");
    read_field(d, "n_samples", c.dataset.n_samples);
    read_field(d, "payload_min", c.dataset.payload_min);
    read_field(d, "payload_max", c.dataset.payload_max);
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown_keys(e, {"max_new_tokens", "eval_samples", "witness"}, "eval.");
    read_field(e, "max_new_tokens", c.eval_max_new_tokens);
    read_field(e, "eval_samples", c.eval_samples);
    read_field(e, "witness", c.witness);
  }

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown_keys(
        p, {"vocab", "train_data", "heldout_data", "checkpoint_dir", "report_dir"}, "paths.");
    read_field(p, "vocab", c.vocab_path);
    read_field(p, "train_data", c.train_data_path);
    read_field(p, "heldout_data", c.heldout_data_path);
    read_field(p, "checkpoint_dir", c.checkpoint_dir);
    read_field(p, "report_dir", c.report_dir);
  }

  c.dataset.seed = c.dataset_seed();
  c.train.seed = c.train_seed();
  if (c.witness.empty()) throw ConfigError("eval.witness must be nonempty");
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  return from_json_text(read_file(path));
}

std::string RunConfig::to_json_text() const {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["seed"] = seed;
  j["scheme"] = scheme_name;
  j["merge_system_user"] = merge_system_user;
  j["model"] = {{"embed_dim", model.embed_dim},     {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},         {"ff_dim", model.ff_dim},
                {"max_seq_len", model.max_seq_len}, {"rope_theta", model.rope_theta},
                {"n_hierarchies", model.n_hierarchies}};
  j["train"] = {{"lr_peak", train.lr_peak},
                {"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"grad_clip_norm", train.grad_clip_norm},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"eps", train.eps}};
  j["dataset"] = {{"n_samples", dataset.n_samples},
                  {"payload_min", dataset.payload_min},
                  {"payload_max", dataset.payload_max}};
  j["eval"] = {{"max_new_tokens", eval_max_new_tokens},
               {"eval_samples", eval_samples},
               {"witness", witness}};
  j["paths"] = {{"vocab", vocab_path},
                {"train_data", train_data_path},
                {"heldout_data", heldout_data_path},
                {"checkpoint_dir", checkpoint_dir},
                {"report_dir", report_dir}};
  return j.dump(2) + "\n";
}

std::vector<std::string> corpus_vocab_seed_texts() {
  std::vector<std::string> texts;
  texts.push_back(corpus_system_text());
  for (int k = 0; k < kNumTaskKinds; ++k) {
    texts.push_back(task_instruction(static_cast<TaskKind>(k)));
  }
  std::string letters;
  for (char c = 'a'; c <= 'z'; ++c) {
    letters += c;
    letters += ' ';
  }
  texts.push_back(letters);
  std::string numbers;
  for (int n = 0; n <= 20; ++n) numbers += std::to_string(n) + " ";
  texts.push_back(numbers);
  return texts;
}

Vocab build_run_vocab(const std::vector<TaskSample>& samples) {
  std::vector<std::string> texts = corpus_vocab_seed_texts();
  for (const auto& t : attack_vocab_seed_texts()) texts.push_back(t);
  for (const auto& s : samples) {
    texts.push_back(s.prompt.system);
    texts.push_back(s.prompt.user);
    if (s.prompt.data.has_value()) texts.push_back(*s.prompt.data);
    texts.push_back(s.reference);
  }
  return Vocab::build(texts);
}

}  // namespace iselab
