#include "lsf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace lsf {
namespace {

constexpr char kMagic[4] = {'L', 'S', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

/// Distance from point (px,py) to the segment between (ax,ay) and (bx,by).
double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = ax + t * dx;
  const double cy = ay + t * dy;
  return std::hypot(px - cx, py - cy);
}

double uniform_in(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * rng.next_double();
}

Example render_bar(const SyntheticSpec& spec, int label, Rng rng) {
  // Class angle with a jitter well inside the 18-degree class spacing, and
  // enough pose/size/contrast variation that orientation is the only
  // reliable cue — a trivially separable set would let even a scrambled
  // network coast on brightness statistics.
  const double deg = label * (180.0 / spec.classes) + uniform_in(rng, -5.0, 5.0);
  const double theta = deg * std::numbers::pi / 180.0;
  const double cx = (spec.image_w - 1) / 2.0 + uniform_in(rng, -2.0, 2.0);
  const double cy = (spec.image_h - 1) / 2.0 + uniform_in(rng, -2.0, 2.0);
  const double half_len = uniform_in(rng, 3.5, 5.2);
  const double half_width = uniform_in(rng, 0.8, 1.25);
  const double brightness = uniform_in(rng, 0.6, 0.9);
  const double ax = cx - half_len * std::cos(theta);
  const double ay = cy - half_len * std::sin(theta);
  const double bx = cx + half_len * std::cos(theta);
  const double by = cy + half_len * std::sin(theta);

  Example ex;
  ex.label = label;
  ex.image = Tensor<float>(Shape{spec.image_h, spec.image_w, spec.channels});
  for (int y = 0; y < spec.image_h; ++y) {
    for (int x = 0; x < spec.image_w; ++x) {
      const double d = segment_distance(x, y, ax, ay, bx, by);
      // Soft 1-pixel edge approximates pixel coverage of the bar.
      const double cover = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
      for (int ch = 0; ch < spec.channels; ++ch) {
        const double noise = rng.next_normal(0.0, spec.noise_std);
        ex.image.at(y, x, ch) = clamp01(static_cast<float>(brightness * cover + noise));
      }
    }
  }
  return ex;
}

std::vector<Example> render_split(const SyntheticSpec& spec, const Rng& split_rng, int count) {
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(render_bar(spec, i % spec.classes, split_rng.fork(static_cast<std::uint64_t>(i))));
  }
  return out;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("dataset file: truncated");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_split(std::ostream& os, const std::vector<Example>& split) {
  write_u32(os, static_cast<std::uint32_t>(split.size()));
  for (const Example& ex : split) {
    write_u32(os, static_cast<std::uint32_t>(ex.label));
    os.write(reinterpret_cast<const char*>(ex.image.raw()),
             static_cast<std::streamsize>(ex.image.size() * sizeof(float)));
  }
}

std::vector<Example> read_split(std::istream& is, int h, int w, int c, int classes) {
  const std::uint32_t count = read_u32(is);
  std::vector<Example> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Example ex;
    ex.label = static_cast<int>(read_u32(is));
    if (ex.label < 0 || ex.label >= classes) {
      throw std::runtime_error("dataset file: label out of range");
    }
    ex.image = Tensor<float>(Shape{h, w, c});
    if (!is.read(reinterpret_cast<char*>(ex.image.raw()),
                 static_cast<std::streamsize>(ex.image.size() * sizeof(float)))) {
      throw std::runtime_error("dataset file: truncated");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (classes < 2 || image_h < 4 || image_w < 4 || channels < 1) {
    throw std::invalid_argument("SyntheticSpec: degenerate geometry");
  }
  if (n_train < 1 || n_val < 1 || n_test < 1) {
    throw std::invalid_argument("SyntheticSpec: split sizes must be positive");
  }
  if (!(noise_std >= 0.0f)) {
    throw std::invalid_argument("SyntheticSpec: noise_std must be non-negative");
  }
}

Dataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  Dataset ds;
  ds.image_h = spec.image_h;
  ds.image_w = spec.image_w;
  ds.channels = spec.channels;
  ds.classes = spec.classes;
  ds.train = render_split(spec, root.fork("train"), spec.n_train);
  ds.val = render_split(spec, root.fork("val"), spec.n_val);
  ds.test = render_split(spec, root.fork("test"), spec.n_test);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(ds.image_h));
  write_u32(os, static_cast<std::uint32_t>(ds.image_w));
  write_u32(os, static_cast<std::uint32_t>(ds.channels));
  write_u32(os, static_cast<std::uint32_t>(ds.classes));
  write_split(os, ds.train);
  write_split(os, ds.val);
  write_split(os, ds.test);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw std::runtime_error("dataset file: bad magic");
  }
  if (read_u32(is) != kVersion) throw std::runtime_error("dataset file: unsupported version");
  Dataset ds;
  ds.image_h = static_cast<int>(read_u32(is));
  ds.image_w = static_cast<int>(read_u32(is));
  ds.channels = static_cast<int>(read_u32(is));
  ds.classes = static_cast<int>(read_u32(is));
  if (ds.image_h < 1 || ds.image_w < 1 || ds.channels < 1 || ds.classes < 2) {
    throw std::runtime_error("dataset file: malformed header");
  }
  ds.train = read_split(is, ds.image_h, ds.image_w, ds.channels, ds.classes);
  ds.val = read_split(is, ds.image_h, ds.image_w, ds.channels, ds.classes);
  ds.test = read_split(is, ds.image_h, ds.image_w, ds.channels, ds.classes);
  return ds;
}

std::uint64_t dataset_checksum(const Dataset& ds) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const Example& ex : *split) {
      mix_bytes(&ex.label, sizeof(ex.label));
      mix_bytes(ex.image.raw(), static_cast<size_t>(ex.image.size()) * sizeof(float));
    }
  }
  return h;
}

}  // namespace lsf
