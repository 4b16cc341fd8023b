#include "lsf/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

namespace lsf {
namespace {

constexpr char kMagic[4] = {'L', 'S', 'H', 'F'};
constexpr std::uint32_t kVersion = 1;

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

void append_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::string build_config_doc(const Checkpoint& ckpt) {
  const ModelConfig& c = ckpt.params.cfg;
  std::ostringstream os;
  os << "image_h=" << c.image_h << '\n'
     << "image_w=" << c.image_w << '\n'
     << "channels=" << c.channels << '\n'
     << "patch=" << c.patch << '\n'
     << "dim=" << c.dim << '\n'
     << "heads=" << c.heads << '\n'
     << "layers=" << c.layers << '\n'
     << "mlp_hidden=" << c.mlp_hidden << '\n'
     << "classes=" << c.classes << '\n'
     << "posenc_dim=" << c.posenc_dim << '\n'
     << "dropout=" << format_float(c.dropout) << '\n'
     << "variant=" << variant_name(ckpt.params.variant) << '\n'
     << "mode=" << train_mode_name(ckpt.mode) << '\n'
     << "seed=" << ckpt.seed << '\n'
     << "best_val_loss=" << format_float(ckpt.best_val_loss) << '\n';
  return os.str();
}

Variant parse_variant(const std::string& s) {
  if (s == "plain") return Variant::Plain;
  if (s == "pos-encoding") return Variant::PosEncoding;
  if (s == "pos-predictor") return Variant::PosPredictor;
  throw CheckpointError(CheckpointErrorKind::Malformed, "checkpoint: unknown variant " + s);
}

/// Cursor over the in-memory file image; every read is bounds-checked
/// before any model state is allocated from it.
class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  size_t remaining() const { return bytes_.size() - pos_; }

  const char* take(size_t n, const char* what) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointErrorKind::Truncated,
                            std::string("checkpoint: truncated while reading ") + what);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint16_t u16(const char* what) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(2, what));
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const char* what) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4, what));
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

 private:
  const std::string& bytes_;
  size_t pos_ = 0;
};

std::map<std::string, std::string> parse_config_doc(const std::string& doc) {
  std::map<std::string, std::string> kv;
  std::istringstream is(doc);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "checkpoint: malformed config line: " + line);
    }
    if (!kv.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "checkpoint: duplicate config key: " + line.substr(0, eq));
    }
  }
  return kv;
}

const std::string& config_value(const std::map<std::string, std::string>& kv,
                                const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) {
    throw CheckpointError(CheckpointErrorKind::Malformed, "checkpoint: missing config key " + key);
  }
  return it->second;
}

int config_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& s = config_value(kv, key);
  try {
    size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "checkpoint: bad integer for " + key + ": " + s);
  }
}

float config_float(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& s = config_value(kv, key);
  char* end = nullptr;
  const float v = std::strtof(s.c_str(), &end);
  if (end == nullptr || *end != '\0') {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "checkpoint: bad float for " + key + ": " + s);
  }
  return v;
}

std::uint64_t config_u64(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& s = config_value(kv, key);
  try {
    size_t used = 0;
    const std::uint64_t v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "checkpoint: bad integer for " + key + ": " + s);
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const std::string doc = build_config_doc(ckpt);
  auto registry = param_registry(const_cast<ModelParams<float>&>(ckpt.params));

  std::string out;
  out.append(kMagic, 4);
  append_u32(out, kVersion);
  append_u32(out, static_cast<std::uint32_t>(doc.size()));
  out += doc;
  append_u32(out, static_cast<std::uint32_t>(registry.size()));
  for (const auto& [name, tensor] : registry) {
    append_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(tensor->rank()));
    for (int d = 0; d < tensor->rank(); ++d) {
      append_u32(out, static_cast<std::uint32_t>(tensor->dim(d)));
    }
    const size_t bytes = static_cast<size_t>(tensor->size()) * sizeof(float);
    out.append(reinterpret_cast<const char*>(tensor->raw()), bytes);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::BadMagic, "checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw CheckpointError(CheckpointErrorKind::BadVersion,
                          "checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t doc_len = r.u32("config length");
  const std::string doc(r.take(doc_len, "config document"), doc_len);
  const auto kv = parse_config_doc(doc);

  Checkpoint ckpt;
  ModelConfig cfg;
  cfg.image_h = config_int(kv, "image_h");
  cfg.image_w = config_int(kv, "image_w");
  cfg.channels = config_int(kv, "channels");
  cfg.patch = config_int(kv, "patch");
  cfg.dim = config_int(kv, "dim");
  cfg.heads = config_int(kv, "heads");
  cfg.layers = config_int(kv, "layers");
  cfg.mlp_hidden = config_int(kv, "mlp_hidden");
  cfg.classes = config_int(kv, "classes");
  cfg.posenc_dim = config_int(kv, "posenc_dim");
  cfg.dropout = config_float(kv, "dropout");
  const Variant variant = parse_variant(config_value(kv, "variant"));
  try {
    ckpt.mode = parse_train_mode(config_value(kv, "mode"));
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, std::string("checkpoint: ") + e.what());
  }
  ckpt.seed = config_u64(kv, "seed");
  ckpt.best_val_loss = config_float(kv, "best_val_loss");

  // Shape skeleton for the declared architecture; tensors filled by name.
  ckpt.params = zero_params<float>(cfg, variant);
  auto registry = param_registry(ckpt.params);
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, tensor] : registry) by_name.emplace(name, tensor);

  const std::uint32_t count = r.u32("tensor count");
  if (count != registry.size()) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "checkpoint: expected " + std::to_string(registry.size()) +
                              " tensors for this config, file declares " + std::to_string(count));
  }
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("tensor name length");
    const std::string name(r.take(name_len, "tensor name"), name_len);
    if (!seen.insert(name).second) {
      throw CheckpointError(CheckpointErrorKind::DuplicateTensor,
                            "checkpoint: duplicate tensor " + name);
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointError(CheckpointErrorKind::Malformed, "checkpoint: unknown tensor " + name);
    }
    const unsigned char dtype = static_cast<unsigned char>(*r.take(1, "dtype"));
    if (dtype != 0) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "checkpoint: unsupported dtype " + std::to_string(dtype));
    }
    const unsigned char rank = static_cast<unsigned char>(*r.take(1, "rank"));
    Tensor<float>& dst = *it->second;
    if (rank != dst.rank()) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "checkpoint: tensor " + name + " has rank " + std::to_string(rank) +
                                ", expected " + std::to_string(dst.rank()));
    }
    for (int d = 0; d < dst.rank(); ++d) {
      const std::uint32_t dim = r.u32("tensor dims");
      if (dim != static_cast<std::uint32_t>(dst.dim(d))) {
        throw CheckpointError(CheckpointErrorKind::Malformed,
                              "checkpoint: tensor " + name + " dimension mismatch");
      }
    }
    const size_t data_bytes = static_cast<size_t>(dst.size()) * sizeof(float);
    std::memcpy(dst.raw(), r.take(data_bytes, "tensor data"), data_bytes);
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "checkpoint: trailing bytes after last tensor");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(CheckpointErrorKind::Io, "cannot open for writing: " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError(CheckpointErrorKind::Io, "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointErrorKind::Io, "cannot open for reading: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  if (!is) throw CheckpointError(CheckpointErrorKind::Io, "read failed: " + path);
  return parse_checkpoint(buf.str());
}

}  // namespace lsf
