#pragma once

// Synthetic ten-class grayscale shape dataset plus binary PGM import/export.
// Every image is procedurally drawn from a seeded generator (random position,
// size, stroke, contrast, pixel noise), so any split of any size can be
// reproduced from (count, image_size, seed) without touching the network.
//
// Classes: 0 filled square, 1 hollow square, 2 disk, 3 ring, 4 plus,
// 5 diagonal cross, 6 horizontal stripes, 7 vertical stripes,
// 8 checkerboard, 9 filled triangle.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"

namespace usdc {

constexpr int kShapeClasses = 10;

struct Dataset {
  int image_size = 16;
  int channels = 1;
  int num_classes = kShapeClasses;
  std::vector<float> pixels;  // [n, channels, image_size, image_size], row-major
  std::vector<int> labels;    // [n]

  int size() const { return static_cast<int>(labels.size()); }
  long long image_numel() const {
    return static_cast<long long>(channels) * image_size * image_size;
  }
};

namespace detail {

inline void draw_shape(int label, int s, float fg, float bg, RngState& rng, float* out) {
  // geometry jitter shared by the blob-like classes
  const double cx = (0.35 + 0.3 * rng.uniform()) * s;
  const double cy = (0.35 + 0.3 * rng.uniform()) * s;
  const double half = (0.2 + 0.15 * rng.uniform()) * s;
  const double thick = std::max(1.0, s / 8.0);
  const int period = 2 + static_cast<int>(rng.uniform_int(3));  // stripes/checker cell
  const int phase = static_cast<int>(rng.uniform_int(period));

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dx = x - cx, dy = y - cy;
      bool on = false;
      switch (label) {
        case 0: on = std::abs(dx) <= half && std::abs(dy) <= half; break;
        case 1:
          on = std::abs(dx) <= half && std::abs(dy) <= half &&
               !(std::abs(dx) <= half - thick && std::abs(dy) <= half - thick);
          break;
        case 2: on = dx * dx + dy * dy <= half * half; break;
        case 3: {
          const double d2 = dx * dx + dy * dy;
          const double inner = std::max(0.0, half - thick);
          on = d2 <= half * half && d2 >= inner * inner;
          break;
        }
        case 4:
          on = (std::abs(dx) <= thick * 0.5 && std::abs(dy) <= half) ||
               (std::abs(dy) <= thick * 0.5 && std::abs(dx) <= half);
          break;
        case 5:
          on = (std::abs(dx - dy) <= thick * 0.5 || std::abs(dx + dy) <= thick * 0.5) &&
               std::abs(dx) <= half && std::abs(dy) <= half;
          break;
        case 6: on = ((y + phase) / period) % 2 == 0; break;
        case 7: on = ((x + phase) / period) % 2 == 0; break;
        case 8: on = (((x + phase) / period) + ((y + phase) / period)) % 2 == 0; break;
        case 9:
          on = dy >= -half && dy <= half && std::abs(dx) <= (dy + half) * 0.5;
          break;
        default: throw ValueError("draw_shape: label out of range");
      }
      float v = on ? fg : bg;
      v += static_cast<float>(0.05 * rng.normal());
      out[y * s + x] = std::clamp(v, 0.0f, 1.0f);
    }
  }
}

}  // namespace detail

// Balanced dataset: labels cycle 0..9 so every prefix is near-balanced.
inline Dataset make_shapes10(int count, int image_size, uint64_t seed) {
  if (count < 1 || image_size < 8) {
    throw ValueError("make_shapes10: need count >= 1 and image_size >= 8");
  }
  Dataset ds;
  ds.image_size = image_size;
  ds.pixels.resize(static_cast<size_t>(count) * static_cast<size_t>(ds.image_numel()));
  ds.labels.resize(static_cast<size_t>(count));
  RngState rng(seed);
  for (int i = 0; i < count; ++i) {
    const int label = i % kShapeClasses;
    ds.labels[static_cast<size_t>(i)] = label;
    const float fg = 0.65f + 0.35f * static_cast<float>(rng.uniform());
    const float bg = 0.15f * static_cast<float>(rng.uniform());
    detail::draw_shape(label, image_size, fg, bg, rng,
                       ds.pixels.data() + static_cast<size_t>(i) * static_cast<size_t>(ds.image_numel()));
  }
  return ds;
}

// Assemble the [B, C, S, S] image tensor for a list of sample indices.
template <typename T>
Tensor<T> batch_images(const Dataset& ds, const std::vector<int>& idx) {
  if (idx.empty()) throw ValueError("batch_images: empty index list");
  Tensor<T> out({static_cast<int>(idx.size()), ds.channels, ds.image_size, ds.image_size});
  const long long stride = ds.image_numel();
  for (size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] < 0 || idx[b] >= ds.size()) throw ValueError("batch_images: index out of range");
    const float* src = ds.pixels.data() + static_cast<long long>(idx[b]) * stride;
    T* dst = out.value().data() + static_cast<long long>(b) * stride;
    for (long long i = 0; i < stride; ++i) dst[i] = static_cast<T>(src[i]);
  }
  return out;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) {
    if (i < 0 || i >= ds.size()) throw ValueError("batch_labels: index out of range");
    out.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// binary PGM (P5, 8-bit) import/export
// ---------------------------------------------------------------------------

inline void save_pgm(const std::filesystem::path& path, int width, int height,
                     const std::vector<uint8_t>& bytes) {
  if (static_cast<long long>(bytes.size()) != static_cast<long long>(width) * height) {
    throw ValueError("save_pgm: byte count does not match dimensions");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValueError("save_pgm: cannot open " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ValueError("save_pgm: write failed for " + path.string());
}

namespace detail {
// One whitespace-delimited PGM header token, skipping '#' comment lines.
inline std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
    } else if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(in.get()));
      return tok;
    }
  }
  throw ValueError("load_pgm: truncated header");
}
}  // namespace detail

inline std::vector<uint8_t> load_pgm(const std::filesystem::path& path, int& width, int& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValueError("load_pgm: cannot open " + path.string());
  if (detail::pgm_token(f) != "P5") throw ValueError("load_pgm: not a binary PGM: " + path.string());
  width = std::stoi(detail::pgm_token(f));
  height = std::stoi(detail::pgm_token(f));
  const int maxval = std::stoi(detail::pgm_token(f));
  if (width < 1 || height < 1 || maxval != 255) {
    throw ValueError("load_pgm: unsupported dimensions or depth in " + path.string());
  }
  f.get();  // single whitespace byte after maxval
  std::vector<uint8_t> bytes(static_cast<size_t>(width) * static_cast<size_t>(height));
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ValueError("load_pgm: truncated pixel data in " + path.string());
  }
  return bytes;
}

// Writes dir/class_<k>/img_<i>.pgm for every sample; load reverses it.
inline void save_dataset_dir(const Dataset& ds, const std::filesystem::path& dir) {
  if (ds.channels != 1) throw ValueError("save_dataset_dir: only single-channel datasets");
  namespace fs = std::filesystem;
  std::vector<int> counter(static_cast<size_t>(ds.num_classes), 0);
  for (int k = 0; k < ds.num_classes; ++k) fs::create_directories(dir / ("class_" + std::to_string(k)));
  std::vector<uint8_t> bytes(static_cast<size_t>(ds.image_numel()));
  for (int i = 0; i < ds.size(); ++i) {
    const float* src = ds.pixels.data() + static_cast<size_t>(i) * static_cast<size_t>(ds.image_numel());
    for (size_t p = 0; p < bytes.size(); ++p) {
      bytes[p] = static_cast<uint8_t>(std::lround(std::clamp(src[p], 0.0f, 1.0f) * 255.0f));
    }
    const int label = ds.labels[static_cast<size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.pgm", counter[static_cast<size_t>(label)]++);
    save_pgm(dir / ("class_" + std::to_string(label)) / name, ds.image_size, ds.image_size, bytes);
  }
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValueError("load_dataset_dir: not a directory: " + dir.string());
  std::vector<std::pair<int, fs::path>> files;  // (label, path)
  int num_classes = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("class_", 0) != 0) continue;
    const int label = std::stoi(name.substr(6));
    num_classes = std::max(num_classes, label + 1);
    for (const auto& img : fs::directory_iterator(entry.path())) {
      if (img.path().extension() == ".pgm") files.emplace_back(label, img.path());
    }
  }
  if (files.empty()) throw ValueError("load_dataset_dir: no class_*/..*.pgm files under " + dir.string());
  std::sort(files.begin(), files.end());  // deterministic order: by label, then path

  Dataset ds;
  ds.num_classes = num_classes;
  int w = 0, h = 0;
  for (const auto& [label, path] : files) {
    const std::vector<uint8_t> bytes = load_pgm(path, w, h);
    if (w != h) throw ValueError("load_dataset_dir: images must be square: " + path.string());
    if (ds.labels.empty()) {
      ds.image_size = w;
    } else if (w != ds.image_size) {
      throw ValueError("load_dataset_dir: mixed image sizes under " + dir.string());
    }
    for (uint8_t b : bytes) ds.pixels.push_back(static_cast<float>(b) / 255.0f);
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace usdc
