// Checkpoint container, version 1 (little-endian host layout):
//   "RULECKPT" | u32 version | i32 vocab, context, embed, layers, heads,
//   value_head | u64 n | f64[n] params | u8 has_optimizer |
//   [u64 step | f64[n] m | f64[n] v] | u64 FNV-1a of all preceding bytes.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "rulelab/errors.hpp"
#include "rulelab/model.hpp"

namespace rulelab {
namespace {

constexpr char kMagic[8] = {'R', 'U', 'L', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof(T));
}

void put_array(std::string& buf, std::span<const double> v) {
  buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::vector<double> get_array(std::uint64_t n) {
    if (n > (limit_ - pos_) / sizeof(double)) throw FormatError("checkpoint truncated");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > limit_) throw FormatError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const PolicyModel& m,
                     const OptimizerState* optimizer) {
  std::string buf(kMagic, sizeof(kMagic));
  put(buf, kVersion);
  const ModelConfig& c = m.config();
  for (std::int32_t v : {c.vocab_size, c.context_len, c.embed_dim, c.n_layers,
                         c.n_heads, static_cast<int>(c.value_head)}) {
    put(buf, v);
  }
  put(buf, static_cast<std::uint64_t>(m.size()));
  put_array(buf, m.params());
  const std::uint8_t has_opt = optimizer != nullptr;
  put(buf, has_opt);
  if (optimizer) {
    if (optimizer->m.size() != m.size() || optimizer->v.size() != m.size()) {
      throw DomainError("save_checkpoint: optimizer state size mismatch");
    }
    put(buf, optimizer->step);
    put_array(buf, optimizer->m);
    put_array(buf, optimizer->v);
  }
  put(buf, fnv1a(buf));

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path + ": not a checkpoint file");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != fnv1a(bytes.substr(0, body))) {
    throw FormatError(path + ": checksum mismatch (truncated or corrupt)");
  }
  Reader r(bytes, body);
  r.get_array(1);  // skips the 8-byte magic
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.vocab_size = r.get<std::int32_t>();
  c.context_len = r.get<std::int32_t>();
  c.embed_dim = r.get<std::int32_t>();
  c.n_layers = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.value_head = r.get<std::int32_t>() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid config block: " + e.what());
  }
  const auto n = r.get<std::uint64_t>();
  if (n != c.parameter_count()) throw FormatError(path + ": parameter count does not match config");
  Checkpoint ck{PolicyModel(c, r.get_array(n)), std::nullopt};
  if (r.get<std::uint8_t>() != 0) {
    OptimizerState s;
    s.step = r.get<std::uint64_t>();
    s.m = r.get_array(n);
    s.v = r.get_array(n);
    ck.optimizer = std::move(s);
  }
  if (r.pos() != body) throw FormatError(path + ": trailing bytes in checkpoint");
  return ck;
}

}  // namespace rulelab
