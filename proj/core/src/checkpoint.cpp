#include "rtdp/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace rtdp {

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'R', 'T', 'D', 'P'};
constexpr uint32_t kFormatVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw integrity_error("checkpoint: truncated file");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string render_block(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> parse_block(const std::string& block) {
  std::map<std::string, std::string> kv;
  std::istringstream in(block);
  std::string line;
  while (std::getline(in, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw integrity_error("checkpoint: malformed config block");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::map<std::string, std::string> config_block(const ModelConfig& c) {
  std::map<std::string, std::string> kv;
  kv["conv_kernel"] = std::to_string(c.conv_kernel);
  kv["generator_hidden"] = std::to_string(c.generator_hidden);
  kv["generator_layers"] = std::to_string(c.generator_layers);
  kv["hidden"] = std::to_string(c.hidden);
  kv["max_rel_distance"] = std::to_string(c.max_rel_distance);
  kv["n_heads"] = std::to_string(c.n_heads);
  kv["n_layers"] = std::to_string(c.n_layers);
  kv["vocab_size"] = std::to_string(c.vocab_size);
  return kv;
}

int64_t block_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw integrity_error("checkpoint: missing key '" + key + "'");
  return std::stoll(it->second);
}

uint64_t block_uint(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw integrity_error("checkpoint: missing key '" + key + "'");
  return std::stoull(it->second);
}

void append_tensor(std::string& out, const std::string& name, const Shape& shape,
                   const std::vector<float>& data) {
  if (name.size() > 0xffff) throw contract_error("checkpoint: parameter name too long");
  put_u16(out, static_cast<uint16_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(shape.size()));
  for (int64_t d : shape) put_u64(out, static_cast<uint64_t>(d));
  for (float v : data) put_f32(out, v);
}

void atomic_write(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw error("cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw error("short write: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw error("cannot rename " + tmp + " to " + path);
}

std::string serialize(const ModelConfig& config,
                      const std::map<std::string, std::string>& extra_keys,
                      const std::vector<const NamedTensor*>& tensors) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kFormatVersion);
  auto kv = config_block(config);
  for (const auto& [k, v] : extra_keys) kv[k] = v;
  const std::string block = render_block(kv);
  put_u64(out, block.size());
  out += block;
  put_u64(out, tensors.size());
  for (const NamedTensor* t : tensors) append_tensor(out, t->name, t->shape, t->data);
  put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

}  // namespace

const NamedTensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const ModelT<float>& model,
                     const LambStateT<float>* optimizer, const TrainerRunState* run) {
  std::vector<NamedTensor> owned;
  std::vector<const NamedTensor*> refs;
  const auto& params = model.params();
  owned.reserve(params.size() * (optimizer ? 3 : 1));
  for (size_t i = 0; i < params.size(); ++i)
    owned.push_back({params[i].name, params[i].tensor.shape(), params[i].tensor.value()});
  if (optimizer) {
    if (optimizer->m.size() != params.size())
      throw contract_error("save_checkpoint: optimizer state does not match parameters");
    for (size_t i = 0; i < params.size(); ++i)
      owned.push_back({"optim.m/" + params[i].name, params[i].tensor.shape(), optimizer->m[i]});
    for (size_t i = 0; i < params.size(); ++i)
      owned.push_back({"optim.v/" + params[i].name, params[i].tensor.shape(), optimizer->v[i]});
  }
  for (const auto& t : owned) refs.push_back(&t);

  std::map<std::string, std::string> extra;
  if (run) {
    extra["run.phase"] = std::to_string(run->phase_index);
    extra["run.step"] = std::to_string(run->step);
    extra["run.opt_step"] = std::to_string(run->opt_step);
    extra["run.tokens_seen"] = std::to_string(run->tokens_seen);
    extra["run.seed"] = std::to_string(run->base_seed);
    extra["run.data_doc_cursor"] = std::to_string(run->data_doc_cursor);
    extra["run.data_batch_counter"] = std::to_string(run->data_batch_counter);
  }
  atomic_write(path, serialize(model.config(), extra, refs));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw error("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() < 4 + 4 + 8 + 8 + 8) throw integrity_error("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw integrity_error("checkpoint: bad magic bytes");

  uint64_t trailer = 0;
  for (int i = 0; i < 8; ++i)
    trailer |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[bytes.size() - 8 + i]))
               << (8 * i);
  if (fnv1a64(bytes.data(), bytes.size() - 8) != trailer)
    throw integrity_error("checkpoint: checksum mismatch");

  Reader r{bytes};
  r.pos = 4;
  const uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw integrity_error("checkpoint: format version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kFormatVersion) + ")");
  const uint64_t block_len = r.u64();
  const auto kv = parse_block(r.bytes(block_len));

  LoadedCheckpoint ckpt;
  ckpt.config.n_layers = block_int(kv, "n_layers");
  ckpt.config.n_heads = block_int(kv, "n_heads");
  ckpt.config.hidden = block_int(kv, "hidden");
  ckpt.config.vocab_size = block_int(kv, "vocab_size");
  ckpt.config.max_rel_distance = block_int(kv, "max_rel_distance");
  ckpt.config.generator_hidden = block_int(kv, "generator_hidden");
  ckpt.config.generator_layers = block_int(kv, "generator_layers");
  ckpt.config.conv_kernel = block_int(kv, "conv_kernel");
  if (kv.count("run.step")) {
    ckpt.has_run_state = true;
    ckpt.run.phase_index = static_cast<int32_t>(block_int(kv, "run.phase"));
    ckpt.run.step = block_int(kv, "run.step");
    ckpt.run.opt_step = block_int(kv, "run.opt_step");
    ckpt.run.tokens_seen = block_uint(kv, "run.tokens_seen");
    ckpt.run.base_seed = block_uint(kv, "run.seed");
    ckpt.run.data_doc_cursor = block_uint(kv, "run.data_doc_cursor");
    ckpt.run.data_batch_counter = block_uint(kv, "run.data_batch_counter");
  }

  const uint64_t count = r.u64();
  ckpt.tensors.reserve(count);
  for (uint64_t t = 0; t < count; ++t) {
    NamedTensor nt;
    const uint16_t name_len = r.u16();
    nt.name = r.bytes(name_len);
    r.need(1);
    const uint8_t rank = static_cast<uint8_t>(bytes[r.pos]);
    ++r.pos;
    uint64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint64_t dim = r.u64();
      nt.shape.push_back(static_cast<int64_t>(dim));
      numel *= dim;
    }
    nt.data.resize(numel);
    for (uint64_t i = 0; i < numel; ++i) nt.data[i] = r.f32();
    ckpt.tensors.push_back(std::move(nt));
  }
  if (r.pos != bytes.size() - 8) throw integrity_error("checkpoint: trailing garbage");
  return ckpt;
}

void apply_checkpoint(const LoadedCheckpoint& ckpt, ModelT<float>& model,
                      LambStateT<float>* optimizer) {
  if (!(ckpt.config == model.config())) {
    const auto want = config_block(model.config());
    const auto got = config_block(ckpt.config);
    for (const auto& [k, v] : want)
      if (got.at(k) != v)
        throw config_error("checkpoint config mismatch: " + k + " is " + got.at(k) +
                           ", model expects " + v);
  }
  auto& params = model.params();
  if (optimizer && optimizer->m.size() != params.size()) optimizer->init(params);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw integrity_error("checkpoint: missing parameter '" + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw config_error("checkpoint: parameter '" + p.name + "' has shape mismatch");
    p.tensor.value() = t->data;
    p.tensor.zero_grad();
    if (optimizer) {
      const NamedTensor* m = ckpt.find("optim.m/" + p.name);
      const NamedTensor* v = ckpt.find("optim.v/" + p.name);
      if (!m || !v)
        throw integrity_error("checkpoint: missing optimizer state for '" + p.name + "'");
      optimizer->m[i] = m->data;
      optimizer->v[i] = v->data;
    }
  }
  if (optimizer && ckpt.has_run_state) optimizer->step_count = ckpt.run.opt_step;
}

void export_final(const std::string& path, const ModelT<float>& model) {
  std::vector<NamedTensor> owned;
  std::vector<const NamedTensor*> refs;
  TensorT<float> e_d = model.finalize_embeddings();
  owned.push_back({"emb.e_d", e_d.shape(), e_d.value()});
  for (const auto& p : model.params())
    if (p.name.rfind("disc.", 0) == 0) owned.push_back({p.name, p.tensor.shape(), p.tensor.value()});
  for (const auto& t : owned) refs.push_back(&t);
  atomic_write(path, serialize(model.config(), {}, refs));
}

}  // namespace rtdp
