#pragma once

// Segmentation of a long [N x L] feature sequence into half-overlapping chunks
// (chunk length k = 2p, hop p) and the coverage-averaged overlap-add that
// undoes it.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "indiformer/autograd.hpp"
#include "indiformer/tensor.hpp"

namespace indiformer {

struct ChunkGeometry {
  std::size_t features = 0;      // N
  std::size_t chunk_len = 0;     // k
  std::size_t hop = 0;           // p
  std::size_t num_chunks = 0;    // s
  std::size_t original_len = 0;  // L before padding

  std::size_t padded_len() const { return chunk_len + (num_chunks - 1) * hop; }

  /// Number of chunks covering padded position t.
  std::size_t coverage(std::size_t t) const {
    const std::size_t last = std::min(t / hop, num_chunks - 1);
    const std::size_t first = t < chunk_len ? 0 : (t - chunk_len) / hop + 1;
    return last - first + 1;
  }
};

template <typename T>
struct ChunkTensor {
  Tensor<T> data;  // [N x k x s]
  ChunkGeometry geometry;
};

/// Validates k == 2p and computes the padded chunk grid for length L.
inline ChunkGeometry chunk_geometry(std::size_t features, std::size_t length,
                                    std::size_t chunk_len, std::size_t hop) {
  if (hop == 0 || chunk_len != 2 * hop) {
    throw ConfigError("chunk size " + std::to_string(chunk_len) +
                      " must be twice the hop " + std::to_string(hop));
  }
  if (length == 0 || features == 0) {
    throw InvalidInput("cannot segment an empty sequence");
  }
  ChunkGeometry g;
  g.features = features;
  g.chunk_len = chunk_len;
  g.hop = hop;
  g.original_len = length;
  g.num_chunks = length <= chunk_len ? 1 : (length - chunk_len + hop - 1) / hop + 1;
  return g;
}

namespace detail {

template <typename T>
void gather_chunks(const T* seq, std::size_t seq_len, const ChunkGeometry& g, T* out) {
  const std::size_t k = g.chunk_len, s = g.num_chunks;
  for (std::size_t n = 0; n < g.features; ++n) {
    for (std::size_t j = 0; j < k; ++j) {
      T* row = out + (n * k + j) * s;
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t t = i * g.hop + j;
        row[i] = t < seq_len ? seq[n * seq_len + t] : T{0};
      }
    }
  }
}

// Adds chunk values back at offset i*p, divides by coverage, keeps the first
// original_len columns. Accumulates into out.
template <typename T>
void scatter_chunks(const T* chunks, const ChunkGeometry& g, T* out) {
  const std::size_t k = g.chunk_len, s = g.num_chunks, len = g.original_len;
  for (std::size_t n = 0; n < g.features; ++n) {
    for (std::size_t j = 0; j < k; ++j) {
      const T* row = chunks + (n * k + j) * s;
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t t = i * g.hop + j;
        if (t < len) out[n * len + t] += row[i] / static_cast<T>(g.coverage(t));
      }
    }
  }
}

}  // namespace detail

/// [N x L] -> [N x k x s]; chunk i is padded columns [i*p, i*p + k).
template <typename T>
ChunkTensor<T> segment(const Tensor<T>& seq, std::size_t chunk_len, std::size_t hop) {
  if (seq.rank() != 2) {
    throw DimensionError("segment expects [N x L], got " + shape_string(seq.shape()));
  }
  ChunkTensor<T> ct;
  ct.geometry = chunk_geometry(seq.dim(0), seq.dim(1), chunk_len, hop);
  const auto& g = ct.geometry;
  ct.data = Tensor<T>({g.features, g.chunk_len, g.num_chunks});
  detail::gather_chunks(seq.data(), seq.dim(1), g, ct.data.data());
  return ct;
}

/// Exact left inverse of segment: overlapping columns are averaged.
template <typename T>
Tensor<T> overlap_add(const ChunkTensor<T>& ct) {
  const auto& g = ct.geometry;
  if (ct.data.shape() != Shape{g.features, g.chunk_len, g.num_chunks}) {
    throw DimensionError("chunk data " + shape_string(ct.data.shape()) +
                         " does not match its geometry");
  }
  Tensor<T> out({g.features, g.original_len});
  detail::scatter_chunks(ct.data.data(), g, out.data());
  return out;
}

/// Differentiable segment; the geometry is returned through `geometry`.
template <typename T>
Var<T> segment(const Var<T>& seq, std::size_t chunk_len, std::size_t hop,
               ChunkGeometry& geometry) {
  ChunkTensor<T> ct = segment(seq.value(), chunk_len, hop);
  geometry = ct.geometry;
  const ChunkGeometry g = ct.geometry;
  return Var<T>::result("segment", std::move(ct.data), {seq}, [g](Node<T>& n) {
    auto& gx = n.input_grad(0);
    const std::size_t k = g.chunk_len, s = g.num_chunks, len = g.original_len;
    for (std::size_t f = 0; f < g.features; ++f) {
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t t = i * g.hop + j;
          if (t < len) gx[f * len + t] += n.grad[(f * k + j) * s + i];
        }
      }
    }
  });
}

/// Differentiable overlap_add of a [N' x k x s] tensor laid out on `geometry`
/// (N' may differ from geometry.features).
template <typename T>
Var<T> overlap_add(const Var<T>& chunks, ChunkGeometry geometry) {
  if (chunks.value().rank() != 3 || chunks.dim(1) != geometry.chunk_len ||
      chunks.dim(2) != geometry.num_chunks) {
    throw DimensionError("overlap_add: chunks " + shape_string(chunks.shape()) +
                         " do not match the chunk grid");
  }
  geometry.features = chunks.dim(0);
  Tensor<T> out({geometry.features, geometry.original_len});
  detail::scatter_chunks(chunks.value().data(), geometry, out.data());
  const ChunkGeometry g = geometry;
  return Var<T>::result("overlap_add", std::move(out), {chunks}, [g](Node<T>& n) {
    auto& gc = n.input_grad(0);
    const std::size_t k = g.chunk_len, s = g.num_chunks, len = g.original_len;
    for (std::size_t f = 0; f < g.features; ++f) {
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t t = i * g.hop + j;
          if (t < len) {
            gc[(f * k + j) * s + i] +=
                n.grad[f * len + t] / static_cast<T>(g.coverage(t));
          }
        }
      }
    }
  });
}

}  // namespace indiformer
