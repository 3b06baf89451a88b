#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tabscope/nd/tensor.hpp"

namespace tabscope::nd {

/// Dense boolean matrix; true marks an allowed (query, key) position.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool value = true)
      : rows(r), cols(c), allowed(r * c, value ? 1 : 0) {}
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allowed[i * cols + j] = v ? 1 : 0; }
};

// Which axis of a [A, B, 3d] packed-QKV tensor the attention runs along.
enum class AttendAxis { kInner, kOuter };

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[m,k] * w[k,n] + bias[n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Scaled dot-product attention per head: softmax(QK^T/sqrt(dk) + bias) V with
/// bias = -inf where the mask disallows a key.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const BoolMatrix& mask);

/// Multi-head self-attention over a packed [outer*inner, 3d] projection
/// (Q|K|V along the last axis, row index = a*inner + b). kInner attends within
/// each outer index across inner positions; kOuter attends within each inner
/// index across outer positions. Only the first key_limit positions along the
/// attended axis serve as keys. Returns [outer*inner, d].
template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& qkv, std::size_t outer, std::size_t inner,
                            std::size_t n_heads, AttendAxis axis, std::size_t key_limit);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);

// v[n] (or [1,n]) repeated into [count, n].
template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t count);

// a[r,c,d] with b[r,d] appended as channel c -> [r*(c+1), d]
template <typename T>
Tensor<T> append_channel(const Tensor<T>& a, const Tensor<T>& b);

// h[r*channels, d] -> rows [row_begin, row_end) of one channel, [n, d]
template <typename T>
Tensor<T> take_channel(const Tensor<T>& h, std::size_t channels, std::size_t row_begin,
                       std::size_t row_end, std::size_t channel);

// x[n,C] -> first k columns, [n,k]
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t k);

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Row-wise softmax outside the tape (inference helper).
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t cols);

}  // namespace tabscope::nd
