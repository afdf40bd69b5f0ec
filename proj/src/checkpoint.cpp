#include "dcp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dcp/errors.hpp"

namespace dcp {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > buf.size() - pos) throw IntegrityError("checkpoint truncated at byte " + std::to_string(pos));
    auto s = buf.subspan(pos, n);
    pos += n;
    return s;
  }
  template <typename U>
  U uint() {
    auto s = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(s[i]) << (8 * i));
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }

  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

std::string pool_prefix(Modality m) { return std::string("pool.") + modality_name(m); }

void capture_usage(Checkpoint& ckpt, const PromptPool& pool) {
  const std::string p = pool_prefix(pool.modality());
  std::vector<double> usage(pool.usage().begin(), pool.usage().end());
  ckpt.tensors.push_back({p + ".usage", {usage.size()}, std::move(usage)});
  ckpt.tensors.push_back({p + ".calls", {}, {static_cast<double>(pool.selection_calls())}});
}

void restore_usage(const Checkpoint& ckpt, PromptPool& pool) {
  const std::string p = pool_prefix(pool.modality());
  const auto* usage = ckpt.find(p + ".usage");
  const auto* calls = ckpt.find(p + ".calls");
  if (!usage || !calls) throw IntegrityError("checkpoint lacks usage counters for " + p);
  if (usage->data.size() != pool.size() || calls->data.size() != 1) {
    throw IntegrityError("checkpoint usage counters for " + p + " have the wrong size");
  }
  std::vector<std::uint64_t> u;
  for (double v : usage->data) u.push_back(static_cast<std::uint64_t>(v));
  pool.set_usage(std::move(u), static_cast<std::uint64_t>(calls->data[0]));
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.uint<std::uint32_t>(ckpt.version);
  w.uint<std::uint64_t>(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xffff) throw ConfigError("checkpoint tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > 0xff) throw ConfigError("checkpoint tensor rank too large: " + t.name);
    if (numel_of(t.shape) != t.data.size()) throw DimensionError("checkpoint tensor " + t.name + " size mismatch");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) w.uint<std::uint64_t>(e);
    for (double v : t.data) w.f64(v);
  }
  w.uint<std::uint64_t>(fnv1a(w.out));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 + 8) throw IntegrityError("checkpoint too short");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IntegrityError("not a checkpoint: bad magic");
  }
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.last(8));
  if (tail.uint<std::uint64_t>() != fnv1a(body)) throw IntegrityError("checkpoint checksum mismatch");

  Reader r(body);
  r.take(sizeof kCheckpointMagic);
  Checkpoint ckpt;
  ckpt.version = r.uint<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const auto count = r.uint<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto len = r.uint<std::uint16_t>();
    auto name = r.take(len);
    t.name.assign(name.begin(), name.end());
    const auto rank = r.uint<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto e = r.uint<std::uint64_t>();
      if (e == 0 || n > (body.size() / 8) / e) throw IntegrityError("checkpoint tensor " + t.name + " has bad extents");
      t.shape.push_back(static_cast<std::size_t>(e));
      n *= static_cast<std::size_t>(e);
    }
    t.data.resize(n);
    for (auto& v : t.data) v = r.f64();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos != body.size()) throw IntegrityError("checkpoint has trailing bytes before the checksum");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path.string());
  return decode_checkpoint(bytes);
}

Checkpoint capture_state(const ModelConfig& config, const ParameterList& params, const UnifiedEncoder& encoder) {
  Checkpoint ckpt;
  const auto geometry = config.geometry();
  ckpt.tensors.push_back({"meta.config", {geometry.size()}, geometry});
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    ckpt.tensors.push_back({p.name, p.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  capture_usage(ckpt, encoder.visual_pool());
  capture_usage(ckpt, encoder.textual_pool());
  return ckpt;
}

void restore_state(const Checkpoint& ckpt, const ModelConfig& config, const ParameterList& params,
                   UnifiedEncoder& encoder, const ParameterList& optional) {
  const auto* meta = ckpt.find("meta.config");
  if (!meta) throw IntegrityError("checkpoint lacks meta.config");
  const auto want = config.geometry();
  const auto& names = ModelConfig::geometry_names();
  if (meta->data.size() != want.size()) throw ConfigError("checkpoint geometry has a different field count");
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (meta->data[i] != want[i]) {
      throw ConfigError("checkpoint geometry mismatch in " + names[i] + ": checkpoint " +
                        std::to_string(meta->data[i]) + ", config " + std::to_string(want[i]));
    }
  }
  for (const auto& p : params) {
    const auto* t = ckpt.find(p.name);
    if (!t) {
      const bool skip = std::any_of(optional.begin(), optional.end(),
                                    [&](const NamedTensor& o) { return o.tensor.same_node(p.tensor); });
      if (skip) continue;
      throw IntegrityError("checkpoint lacks parameter " + p.name);
    }
    if (t->shape != p.tensor.shape()) {
      throw IntegrityError("checkpoint parameter " + p.name + " has shape " + shape_str(t->shape) + ", expected " +
                           shape_str(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    auto out = dst.mutable_data();
    std::copy(t->data.begin(), t->data.end(), out.begin());
  }
  restore_usage(ckpt, encoder.visual_pool());
  restore_usage(ckpt, encoder.textual_pool());
}

}  // namespace dcp
