#include "iselab/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "iselab/io.hpp"
#include "json.hpp"

namespace iselab {

namespace {

constexpr char kMagic[] = "ISECKPT1";
constexpr std::size_t kMagicLen = 8;

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"vocab_size", c.vocab_size},   {"embed_dim", c.embed_dim},
      {"n_hierarchies", c.n_hierarchies}, {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},         {"ff_dim", c.ff_dim},
      {"max_seq_len", c.max_seq_len}, {"rope_theta", c.rope_theta},
      {"mode", embed_mode_name(c.mode)},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.n_hierarchies = j.at("n_hierarchies").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.mode = embed_mode_from_name(j.at("mode").get<std::string>());
  return c;
}

std::size_t shape_elems(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

const Checkpoint::Blob* Checkpoint::find_blob(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

void Checkpoint::add_blob(std::string name, std::vector<int> shape, std::vector<float> data) {
  blobs.push_back(Blob{std::move(name), std::move(shape), std::move(data)});
}

Checkpoint Checkpoint::from_params(ModelParams<float>& params, const ModelConfig& config,
                                   std::int64_t step, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.step = step;
  ckpt.seed = seed;
  for (const auto& [name, tensor] : named_parameters(params)) {
    ckpt.add_blob(name, tensor->shape, *tensor->data);
  }
  return ckpt;
}

ModelParams<float> Checkpoint::to_params() const {
  ModelParams<float> params = init_params<float>(config, 0);
  for (const auto& [name, tensor] : named_parameters(params)) {
    const Blob* blob = find_blob(name);
    if (!blob) throw FormatError("checkpoint missing parameter: " + name);
    if (blob->shape != tensor->shape || blob->data.size() != tensor->numel()) {
      throw FormatError("checkpoint parameter has wrong shape: " + name);
    }
    *tensor->data = blob->data;
    tensor->zero_grad();
  }
  return params;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header;
  header["version"] = Checkpoint::kFormatVersion;
  header["config"] = config_to_json(ckpt.config);
  header["metadata"] = {{"step", ckpt.step}, {"seed", ckpt.seed}};
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& b : ckpt.blobs) {
    const std::size_t bytes = b.data.size() * sizeof(float);
    tensors.push_back({{"name", b.name},
                       {"shape", b.shape},
                       {"offset", offset},
                       {"length", bytes}});
    offset += bytes;
  }
  header["tensors"] = tensors;

  std::string out = header.dump();
  out += '\n';
  out.append(kMagic, kMagicLen);
  for (const auto& b : ckpt.blobs) {
    const char* raw = reinterpret_cast<const char*>(b.data.data());
    out.append(raw, b.data.size() * sizeof(float));
  }
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string raw = read_file(path);
  const std::size_t newline = raw.find('\n');
  if (newline == std::string::npos) throw FormatError("checkpoint: missing header terminator");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  }

  const int version = header.at("version").get<int>();
  if (version != Checkpoint::kFormatVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version) +
                      " (expected " + std::to_string(Checkpoint::kFormatVersion) + ")");
  }
  if (raw.size() < newline + 1 + kMagicLen ||
      std::memcmp(raw.data() + newline + 1, kMagic, kMagicLen) != 0) {
    throw FormatError("checkpoint: bad magic string");
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.step = header.at("metadata").at("step").get<std::int64_t>();
  ckpt.seed = header.at("metadata").at("seed").get<std::uint64_t>();

  const std::size_t payload_begin = newline + 1 + kMagicLen;
  const std::size_t payload_size = raw.size() - payload_begin;
  for (const auto& t : header.at("tensors")) {
    Checkpoint::Blob b;
    b.name = t.at("name").get<std::string>();
    b.shape = t.at("shape").get<std::vector<int>>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t length = t.at("length").get<std::size_t>();
    if (offset + length > payload_size) throw FormatError("checkpoint: truncated payload");
    if (length != shape_elems(b.shape) * sizeof(float) || length % sizeof(float) != 0) {
      throw FormatError("checkpoint: payload size mismatch for " + b.name);
    }
    b.data.resize(length / sizeof(float));
    std::memcpy(b.data.data(), raw.data() + payload_begin + offset, length);
    ckpt.blobs.push_back(std::move(b));
  }

  std::size_t expected = 0;
  for (const auto& b : ckpt.blobs) expected += b.data.size() * sizeof(float);
  if (expected != payload_size) throw FormatError("checkpoint: payload size mismatch");
  return ckpt;
}

std::string checkpoint_content_id(const Checkpoint& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& b : ckpt.blobs) {
    h = fnv1a64(b.name.data(), b.name.size(), h);
    h = fnv1a64(b.data.data(), b.data.size() * sizeof(float), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace iselab
