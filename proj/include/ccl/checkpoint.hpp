#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ccl/model.hpp"
#include "ccl/tensor.hpp"

// Checkpoint container: a versioned header (magic, format version, ordered
// key-value metadata) followed by named tensors, each stored as
// (name, rank, dims, little-endian float32 payload). Reading a file and
// writing it back reproduces the bytes exactly.

namespace ccl {

struct TensorFile {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }

  std::string meta_or_throw(const std::string& key) const {
    const std::string* v = find_meta(key);
    if (v == nullptr) throw ParseError("checkpoint: missing metadata key " + key);
    return *v;
  }

  const Tensor* find_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor tensor_or_throw(const std::string& name) const {
    const Tensor* t = find_tensor(name);
    if (t == nullptr) throw ParseError("checkpoint: missing tensor " + name);
    return *t;
  }
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'C', 'C', 'L', 'C', 'K', 'P', 'T', '\n'};
constexpr uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin)
      : bytes_(bytes), origin_(origin) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<uint8_t>(bytes_[pos_ + static_cast<size_t>(i)]);
    pos_ += 4;
    return v;
  }

  std::string str() {
    const uint32_t len = u32();
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  void expect_magic() {
    need(sizeof kCheckpointMagic);
    if (std::memcmp(bytes_.data() + pos_, kCheckpointMagic,
                    sizeof kCheckpointMagic) != 0)
      throw ParseError(origin_ + ": bad checkpoint magic");
    pos_ += sizeof kCheckpointMagic;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > bytes_.size())
      throw ParseError(origin_ + ": truncated checkpoint");
  }

  const std::string& bytes_;
  std::string origin_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensor_file(const TensorFile& file) {
  std::string out;
  out.append(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::put_u32(out, detail::kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(file.meta.size()));
  for (const auto& [key, value] : file.meta) {
    detail::put_str(out, key);
    detail::put_str(out, value);
  }
  detail::put_u32(out, static_cast<uint32_t>(file.tensors.size()));
  for (const auto& [name, tensor] : file.tensors) {
    detail::put_str(out, name);
    const auto& shape = tensor.shape();
    detail::put_u32(out, static_cast<uint32_t>(shape.size()));
    for (int dim : shape) detail::put_u32(out, static_cast<uint32_t>(dim));
    for (double v : tensor.data()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline TensorFile decode_tensor_file(const std::string& bytes,
                                     const std::string& origin = "checkpoint") {
  detail::Reader reader(bytes, origin);
  reader.expect_magic();
  const uint32_t version = reader.u32();
  if (version != detail::kCheckpointVersion)
    throw ParseError(origin + ": unsupported checkpoint version " +
                     std::to_string(version));
  TensorFile file;
  const uint32_t n_meta = reader.u32();
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string key = reader.str();
    std::string value = reader.str();
    file.meta.emplace_back(std::move(key), std::move(value));
  }
  const uint32_t n_tensors = reader.u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = reader.str();
    const uint32_t rank = reader.u32();
    std::vector<int> shape;
    size_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      const uint32_t dim = reader.u32();
      if (dim == 0) throw ParseError(origin + ": zero tensor dimension");
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    std::vector<double> data(numel);
    for (size_t j = 0; j < numel; ++j) data[j] = static_cast<double>(reader.f32());
    file.tensors.emplace_back(std::move(name),
                              Tensor::from_data(shape, std::move(data)));
  }
  if (!reader.at_end()) throw ParseError(origin + ": trailing bytes");
  return file;
}

inline void write_tensor_file(const std::filesystem::path& path,
                              const TensorFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string bytes = encode_tensor_file(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return decode_tensor_file(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Model packing
// ---------------------------------------------------------------------------

inline void append_config_meta(TensorFile& file, const ModelConfig& config) {
  file.meta.emplace_back("vocab_size", std::to_string(config.vocab_size));
  file.meta.emplace_back("d_model", std::to_string(config.d_model));
  file.meta.emplace_back("n_layers", std::to_string(config.n_layers));
  file.meta.emplace_back("n_heads", std::to_string(config.n_heads));
  file.meta.emplace_back("d_ff", std::to_string(config.d_ff));
  file.meta.emplace_back("max_positions", std::to_string(config.max_positions));
}

inline ModelConfig config_from_meta(const TensorFile& file) {
  ModelConfig config;
  config.vocab_size = std::stoi(file.meta_or_throw("vocab_size"));
  config.d_model = std::stoi(file.meta_or_throw("d_model"));
  config.n_layers = std::stoi(file.meta_or_throw("n_layers"));
  config.n_heads = std::stoi(file.meta_or_throw("n_heads"));
  config.d_ff = std::stoi(file.meta_or_throw("d_ff"));
  config.max_positions = std::stoi(file.meta_or_throw("max_positions"));
  config.validate();
  return config;
}

inline TensorFile pack_model(const ModelWeights& weights,
                             const std::string& prefix = "model.") {
  TensorFile file;
  append_config_meta(file, weights.config);
  for (const auto& [name, tensor] : weights.named_tensors())
    file.tensors.emplace_back(prefix + name, tensor);
  return file;
}

inline ModelWeights unpack_model(const TensorFile& file,
                                 const std::string& prefix = "model.") {
  ModelConfig config = config_from_meta(file);
  ModelWeights w;
  w.config = config;
  auto get = [&](const std::string& name) {
    return file.tensor_or_throw(prefix + name);
  };
  w.tok_emb = get("tok_emb");
  w.pos_emb = get("pos_emb");
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_gain = get(p + "ln1_gain");
    lw.ln1_bias = get(p + "ln1_bias");
    lw.wq = get(p + "wq");
    lw.wk = get(p + "wk");
    lw.wv = get(p + "wv");
    lw.wo = get(p + "wo");
    lw.ln2_gain = get(p + "ln2_gain");
    lw.ln2_bias = get(p + "ln2_bias");
    lw.w_in = get(p + "w_in");
    lw.w_gate = get(p + "w_gate");
    lw.w_out = get(p + "w_out");
    w.layers.push_back(std::move(lw));
  }
  w.ln_f_gain = get("ln_f_gain");
  w.ln_f_bias = get("ln_f_bias");
  w.out_proj = get("out_proj");
  w.comp_tok = get("comp_tok");
  return w;
}

inline void append_adapter(TensorFile& file, const LowRankAdapter& adapter,
                           const std::string& prefix) {
  file.meta.emplace_back(prefix + "alpha", std::to_string(adapter.alpha));
  file.meta.emplace_back(prefix + "rank", std::to_string(adapter.rank));
  for (const auto& [name, tensor] : adapter.named_tensors())
    file.tensors.emplace_back(prefix + name, tensor);
}

inline LowRankAdapter extract_adapter(const TensorFile& file, int n_layers,
                                      const std::string& prefix) {
  LowRankAdapter adapter;
  adapter.alpha = std::stod(file.meta_or_throw(prefix + "alpha"));
  adapter.rank = std::stoi(file.meta_or_throw(prefix + "rank"));
  for (int l = 0; l < n_layers; ++l) {
    const std::string p = prefix + "layers." + std::to_string(l) + ".";
    LayerAdapters la;
    auto get = [&](const char* name, LowRankDelta& delta) {
      delta.down = file.tensor_or_throw(p + name + std::string(".down"));
      delta.up = file.tensor_or_throw(p + name + std::string(".up"));
    };
    get("q", la.q);
    get("k", la.k);
    get("v", la.v);
    get("o", la.o);
    adapter.layers.push_back(std::move(la));
  }
  return adapter;
}

// FNV-1a over tensor names, shapes, and raw little-endian doubles. Used to
// assert weight immutability (the teacher must never change during a
// distillation run).
inline uint64_t hash_tensors(
    const std::vector<std::pair<std::string, Tensor>>& named) {
  uint64_t h = 1469598103934665603ull;
  auto mix_byte = [&h](uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  for (const auto& [name, tensor] : named) {
    for (char c : name) mix_byte(static_cast<uint8_t>(c));
    for (int dim : tensor.shape())
      for (int i = 0; i < 4; ++i)
        mix_byte(static_cast<uint8_t>((static_cast<uint32_t>(dim) >> (8 * i)) & 0xff));
    for (double v : tensor.data()) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 8; ++i)
        mix_byte(static_cast<uint8_t>((bits >> (8 * i)) & 0xff));
    }
  }
  return h;
}

}  // namespace ccl
