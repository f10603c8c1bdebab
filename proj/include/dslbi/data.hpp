#pragma once

// Synthetic generators, IDX (MNIST-format) loading and deterministic train/val splitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dslbi/tensor.hpp"

namespace dslbi {

struct Dataset {
  Tensor x;
  Tensor y;
  std::size_t size() const { return x.empty() ? 0 : x.dim(0); }
};

struct SparseLinearProblem {
  Tensor X;                  // [n, p]
  Tensor y;                  // [n, 1]
  std::vector<double> beta;  // p coefficients, exactly s nonzero
  double noise_sd = 0.0;
};

/// y = X beta* + eps. Rows of X are standard normal with optional equicorrelation r; beta* has s
/// nonzeros with magnitudes s, s-1, ..., 1 at random positions and random signs; the noise level
/// is chosen so Var(X beta*) / Var(eps) = snr (snr = infinity gives eps = 0).
inline SparseLinearProblem gen_sparse_linear(std::size_t n, std::size_t p, std::size_t s, double snr,
                                             std::uint64_t seed, double correlation = 0.0) {
  if (n == 0 || p == 0) throw std::invalid_argument("gen_sparse_linear: n and p must be positive");
  if (s > p) throw std::invalid_argument("gen_sparse_linear: s = " + std::to_string(s) + " exceeds p = " +
                                         std::to_string(p));
  if (!(snr > 0)) throw std::invalid_argument("gen_sparse_linear: snr must be > 0");
  if (!(correlation >= 0 && correlation < 1)) throw std::invalid_argument("gen_sparse_linear: r must be in [0,1)");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SparseLinearProblem out;
  out.X = Tensor(Shape{n, p});
  const double a = std::sqrt(1.0 - correlation), b = std::sqrt(correlation);
  for (std::size_t i = 0; i < n; ++i) {
    const double common = gauss(rng);
    for (std::size_t j = 0; j < p; ++j) out.X[i * p + j] = a * gauss(rng) + b * common;
  }

  std::vector<std::size_t> perm(p);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  out.beta.assign(p, 0.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < s; ++k) out.beta[perm[k]] = static_cast<double>(s - k) * (coin(rng) ? 1.0 : -1.0);

  double sq = 0.0, sum = 0.0;
  for (double v : out.beta) sq += v * v, sum += v;
  const double signal_var = (1.0 - correlation) * sq + correlation * sum * sum;
  out.noise_sd = std::isinf(snr) ? 0.0 : std::sqrt(signal_var / snr);

  out.y = Tensor(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < p; ++j) v += out.X[i * p + j] * out.beta[j];
    const double eps = gauss(rng);
    out.y[i] = v + out.noise_sd * eps;
  }
  return out;
}

/// Gaussian blobs: class centers ~ N(0, separation^2 I / dim) scaled to norm `separation`,
/// samples = center + N(0, I). Labels are class indices stored as doubles.
inline Dataset gen_blobs(std::size_t n, std::size_t classes, std::size_t dim, double separation,
                         std::uint64_t seed) {
  if (n == 0 || classes < 2 || dim == 0) throw std::invalid_argument("gen_blobs: need n > 0, classes >= 2, dim > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> centers(classes * dim);
  for (std::size_t c = 0; c < classes; ++c) {
    double nrm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      centers[c * dim + d] = gauss(rng);
      nrm += centers[c * dim + d] * centers[c * dim + d];
    }
    nrm = std::sqrt(nrm);
    for (std::size_t d = 0; d < dim; ++d) centers[c * dim + d] *= separation / nrm;
  }
  Dataset ds{Tensor(Shape{n, dim}), Tensor(Shape{n})};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    ds.y[i] = static_cast<double>(c);
    for (std::size_t d = 0; d < dim; ++d) ds.x[i * dim + d] = centers[c * dim + d] + gauss(rng);
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  return {slice_rows(ds.x, rows), slice_rows(ds.y, rows)};
}

/// Shuffled split into (train, val); fractions must sum to at most 1.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, double val_fraction,
                                                 std::uint64_t seed) {
  if (!(train_fraction > 0) || val_fraction < 0 || train_fraction + val_fraction > 1.0 + 1e-12)
    throw std::invalid_argument("split fractions must satisfy train > 0, val >= 0, train + val <= 1");
  const std::size_t n = ds.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  if (n_train == 0) throw std::invalid_argument("split leaves an empty training set");
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<long>(n_train));
  std::vector<std::size_t> va(idx.begin() + static_cast<long>(n_train),
                              idx.begin() + static_cast<long>(n_train + n_val));
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  Dataset val;
  if (!va.empty()) val = subset(ds, va);
  return {subset(ds, tr), std::move(val)};
}

// ---- IDX files ----------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& path) {
  if (bytes.size() < offset + 4)
    throw std::runtime_error(path + ": truncated at byte offset " + std::to_string(bytes.size()) +
                             " (needed 4 bytes at offset " + std::to_string(offset) + ")");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

inline std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

// Parses an unsigned-byte IDX payload; returns dims and the byte offset of the data.
inline std::pair<std::vector<std::size_t>, std::size_t> idx_header(const std::string& bytes, std::uint32_t expected,
                                                                   const std::string& path) {
  const std::uint32_t magic = read_be32(bytes, 0, path);
  if (magic != expected)
    throw std::runtime_error(path + ": bad IDX magic at byte offset 0: expected " + hex32(expected) + ", found " +
                             hex32(magic));
  const std::size_t ndim = magic & 0xFF;
  std::vector<std::size_t> dims(ndim);
  for (std::size_t d = 0; d < ndim; ++d) dims[d] = read_be32(bytes, 4 + 4 * d, path);
  const std::size_t offset = 4 + 4 * ndim;
  std::size_t count = 1;
  for (auto d : dims) count *= d;
  if (bytes.size() < offset + count)
    throw std::runtime_error(path + ": truncated at byte offset " + std::to_string(bytes.size()) + ", expected " +
                             std::to_string(offset + count) + " bytes");
  return {dims, offset};
}

}  // namespace detail

/// Images as [n, rows*cols] with pixels scaled to [0, 1].
inline Tensor load_idx_images(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  auto [dims, offset] = detail::idx_header(bytes, kIdxImagesMagic, path);
  const std::size_t n = dims[0], feat = dims[1] * dims[2];
  if (n == 0 || feat == 0) throw std::runtime_error(path + ": IDX file declares zero images or pixels");
  Tensor out(Shape{n, feat});
  for (std::size_t i = 0; i < n * feat; ++i) out[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
  return out;
}

inline Tensor load_idx_labels(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  auto [dims, offset] = detail::idx_header(bytes, kIdxLabelsMagic, path);
  if (dims[0] == 0) throw std::runtime_error(path + ": IDX file declares zero labels");
  Tensor out(Shape{dims[0]});
  for (std::size_t i = 0; i < dims[0]; ++i) out[i] = static_cast<unsigned char>(bytes[offset + i]);
  return out;
}

/// Images and labels; an optional subset keeps the first `limit` samples (0 keeps all).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
  Dataset ds{load_idx_images(images_path), load_idx_labels(labels_path)};
  if (ds.x.dim(0) != ds.y.dim(0))
    throw std::runtime_error("IDX image count " + std::to_string(ds.x.dim(0)) + " differs from label count " +
                             std::to_string(ds.y.dim(0)));
  if (limit > 0 && limit < ds.size()) {
    std::vector<std::size_t> rows(limit);
    std::iota(rows.begin(), rows.end(), 0);
    ds = subset(ds, rows);
  }
  return ds;
}

}  // namespace dslbi
