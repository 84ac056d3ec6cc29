// Datasets: a seeded two-moons generator, IDX image files, and batching.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "colab/models.hpp"
#include "colab/random.hpp"
#include "colab/tensor.hpp"

namespace colab {

struct Dataset {
  Tensor inputs;  // [N, ...]
  std::vector<int> labels;
  ValueRange value_range;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  std::size_t num_classes() const {
    return labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  }
};

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.inputs = gather_rows(ds.inputs, indices);
  for (std::size_t i : indices) out.labels.push_back(ds.labels.at(i));
  out.value_range = ds.value_range;
  out.name = ds.name;
  return out;
}

/// The first `count` samples and the rest.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t count) {
  if (count > ds.size()) throw ContractError("split: count exceeds dataset size");
  std::vector<std::size_t> head(count), tail(ds.size() - count);
  for (std::size_t i = 0; i < count; ++i) head[i] = i;
  for (std::size_t i = 0; i < tail.size(); ++i) tail[i] = count + i;
  return {subset(ds, head), subset(ds, tail)};
}

// ---------------------------------------------------------------------------
// Two moons in the unit square

namespace moons {

// Affine map of the canonical arcs (x in [-1, 2], y in [-0.5, 1]) into [0.1, 0.9] x [0.3, 0.7].
inline constexpr double kScale = 0.8 / 3.0;
inline double map_x(double x) { return 0.1 + (x + 1.0) * kScale; }
inline double map_y(double y) { return 0.3 + (y + 0.5) * kScale; }

/// Point at parameter t in [0, pi] on the arc of class `label`, before jitter.
inline std::pair<double, double> arc_point(int label, double t) {
  if (label == 0) return {map_x(std::cos(t)), map_y(std::sin(t))};
  return {map_x(1.0 - std::cos(t)), map_y(0.5 - std::sin(t))};
}

}  // namespace moons

/// Sample i has label i % 2 and sits at evenly spaced t along its arc, plus
/// N(0, noise_sd^2) jitter per coordinate, clamped to [0, 1].
inline Dataset synth_two_moons(std::size_t n, double noise_sd, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw ContractError("synth_two_moons: n must be even and >= 2, got " + std::to_string(n));
  if (!(noise_sd >= 0.0)) throw ContractError("synth_two_moons: noise_sd must be >= 0");
  const std::size_t per = n / 2;
  Dataset ds;
  ds.inputs = Tensor(Shape{n, 2});
  ds.labels.resize(n);
  ds.name = "two_moons";
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const std::size_t j = i / 2;
    const double t = per == 1 ? 0.0 : std::numbers::pi * static_cast<double>(j) / static_cast<double>(per - 1);
    auto [x, y] = moons::arc_point(label, t);
    if (noise_sd > 0.0) {
      CounterRng rng(seed, i);
      x += noise_sd * rng.normal();
      y += noise_sd * rng.normal();
    }
    ds.inputs[2 * i] = std::clamp(x, 0.0, 1.0);
    ds.inputs[2 * i + 1] = std::clamp(y, 0.0, 1.0);
    ds.labels[i] = label;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX files

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& path) {
  if (b.size() < at + 4) throw FormatError(path + ": truncated header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.put(static_cast<char>((v >> s) & 0xff));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

/// Pixels become value / 255 in a tensor [N, rows, cols, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::optional<std::size_t> limit = {}) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::be32(img, 0, images_path) != kIdxImages) throw FormatError(images_path + ": bad IDX image magic");
  if (detail::be32(lab, 0, labels_path) != kIdxLabels) throw FormatError(labels_path + ": bad IDX label magic");
  const std::size_t n = detail::be32(img, 4, images_path);
  const std::size_t rows = detail::be32(img, 8, images_path);
  const std::size_t cols = detail::be32(img, 12, images_path);
  const std::size_t nl = detail::be32(lab, 4, labels_path);
  if (n != nl) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  if (img.size() != 16 + n * rows * cols) throw FormatError(images_path + ": truncated or oversized image data");
  if (lab.size() != 8 + n) throw FormatError(labels_path + ": truncated or oversized label data");
  const std::size_t keep = limit ? std::min(n, *limit) : n;
  Dataset ds;
  ds.inputs = Tensor(Shape{keep, rows, cols, 1});
  for (std::size_t i = 0; i < keep * rows * cols; ++i) ds.inputs[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(keep);
  for (std::size_t i = 0; i < keep; ++i) ds.labels[i] = lab[8 + i];
  ds.name = "idx";
  return ds;
}

inline void write_idx(const std::string& images_path, const std::string& labels_path, std::size_t rows,
                      std::size_t cols, const std::vector<unsigned char>& pixels,
                      const std::vector<unsigned char>& labels) {
  if (pixels.size() != labels.size() * rows * cols) throw ShapeError("write_idx: pixel count mismatch");
  std::ofstream im(images_path, std::ios::binary), lb(labels_path, std::ios::binary);
  if (!im || !lb) throw std::runtime_error("write_idx: cannot open output files");
  detail::put_be32(im, kIdxImages);
  detail::put_be32(im, static_cast<std::uint32_t>(labels.size()));
  detail::put_be32(im, static_cast<std::uint32_t>(rows));
  detail::put_be32(im, static_cast<std::uint32_t>(cols));
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  detail::put_be32(lb, kIdxLabels);
  detail::put_be32(lb, static_cast<std::uint32_t>(labels.size()));
  lb.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// ---------------------------------------------------------------------------
// Batching

/// Index order for one epoch: storage order, or a Fisher-Yates shuffle keyed by epoch_seed.
inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t epoch_seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (!shuffle) return order;
  CounterRng rng(epoch_seed, 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Consecutive groups of `size` indices; the last may be shorter.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t size, bool shuffle,
                                                           std::uint64_t epoch_seed) {
  if (size < 1 || size > n) {
    throw ContractError("batch size " + std::to_string(size) + " outside [1, " + std::to_string(n) + "]");
  }
  const auto order = epoch_order(n, shuffle, epoch_seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += size) out.emplace_back(order.begin() + b, order.begin() + std::min(n, b + size));
  return out;
}

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  b.inputs = gather_rows(ds.inputs, indices);
  for (std::size_t i : indices) b.labels.push_back(ds.labels.at(i));
  return b;
}

inline std::vector<Batch> batches(const Dataset& ds, std::size_t size, bool shuffle, std::uint64_t epoch_seed) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(ds.size(), size, shuffle, epoch_seed)) out.push_back(make_batch(ds, idx));
  return out;
}

/// Header "x0,...,x{d-1},label", then one row per sample.
inline void export_csv(std::ostream& out, const Dataset& ds) {
  const std::size_t d = ds.inputs.row_size();
  for (std::size_t j = 0; j < d; ++j) out << 'x' << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.inputs.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

}  // namespace colab
