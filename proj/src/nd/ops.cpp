#include "tabscope/nd/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace tabscope::nd {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void check_finite(const char* op, const Buffer<T>& data) {
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> values(data.data(),
                                                                   static_cast<Eigen::Index>(data.size()));
  if (!values.allFinite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
bool should_track(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

// Builds the output node, validates it, and records the backward closure
// produced by make_backward(output_node*) when tracking applies.
template <typename T, typename MakeBackward>
Tensor<T> emit(const char* op, Shape shape, Buffer<T> data, bool track,
               MakeBackward&& make_backward) {
  check_finite(op, data);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (track) {
    node->tracked = true;
    active_tape<T>()->record(node, make_backward(node.get()));
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

template <typename T>
std::size_t vector_length(const char* op, const Tensor<T>& t) {
  if (t.rank() == 1) return t.dim(0);
  if (t.rank() == 2 && t.dim(0) == 1) return t.dim(1);
  throw DimensionError(std::string(op) + ": expected a vector, got " + shape_string(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Buffer<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return emit<T>("matmul", {m, n}, std::move(out), should_track<T>({&a, &b}),
                 [an = a.node(), bn = b.node(), m, k, n](TensorNode<T>* o) {
                   return [an, bn, o, m, k, n] {
                     ConstMatMap<T> dc(o->grad.data(), m, n);
                     if (an->tracked) {
                       MatMap<T>(an->ensure_grad().data(), m, k).noalias() +=
                           dc * ConstMatMap<T>(bn->data.data(), k, n).transpose();
                     }
                     if (bn->tracked) {
                       MatMap<T>(bn->ensure_grad().data(), k, n).noalias() +=
                           ConstMatMap<T>(an->data.data(), m, k).transpose() * dc;
                     }
                   };
                 });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const auto m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(w.shape()));
  }
  if (vector_length("linear", bias) != n) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs width " +
                         std::to_string(n));
  }
  Buffer<T> out(m * n);
  MatMap<T> y(out.data(), m, n);
  y.noalias() = ConstMatMap<T>(x.data().data(), m, k) * ConstMatMap<T>(w.data().data(), k, n);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), n);
  return emit<T>("linear", {m, n}, std::move(out), should_track<T>({&x, &w, &bias}),
                 [xn = x.node(), wn = w.node(), bn = bias.node(), m, k, n](TensorNode<T>* o) {
                   return [xn, wn, bn, o, m, k, n] {
                     ConstMatMap<T> dy(o->grad.data(), m, n);
                     if (xn->tracked) {
                       MatMap<T>(xn->ensure_grad().data(), m, k).noalias() +=
                           dy * ConstMatMap<T>(wn->data.data(), k, n).transpose();
                     }
                     if (wn->tracked) {
                       MatMap<T>(wn->ensure_grad().data(), k, n).noalias() +=
                           ConstMatMap<T>(xn->data.data(), m, k).transpose() * dy;
                     }
                     if (bn->tracked) {
                       MatMap<T>(bn->ensure_grad().data(), 1, n) += dy.colwise().sum();
                     }
                   };
                 });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return emit<T>("add", a.shape(), std::move(out), should_track<T>({&a, &b}),
                 [an = a.node(), bn = b.node()](TensorNode<T>* o) {
                   return [an, bn, o] {
                     for (const auto& in : {an, bn}) {
                       if (!in->tracked) continue;
                       auto g = in->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return emit<T>("mul", a.shape(), std::move(out), should_track<T>({&a, &b}),
                 [an = a.node(), bn = b.node()](TensorNode<T>* o) {
                   return [an, bn, o] {
                     if (an->tracked) {
                       auto g = an->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * bn->data[i];
                     }
                     if (bn->tracked) {
                       auto g = bn->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * an->data[i];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return emit<T>("scale", a.shape(), std::move(out), should_track<T>({&a}),
                 [an = a.node(), factor](TensorNode<T>* o) {
                   return [an, o, factor] {
                     auto g = an->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * factor;
                   };
                 });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (const T v : a.data()) total += v;
  return emit<T>("sum", {1}, {total}, should_track<T>({&a}), [an = a.node()](TensorNode<T>* o) {
    return [an, o] {
      auto g = an->ensure_grad();
      for (auto& v : g) v += o->grad[0];
    };
  });
}

template <typename T>
constexpr T kInvSqrt2 = T(1) / std::numbers::sqrt2_v<T>;

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Buffer<T> out(a.size());
  const auto n = static_cast<Eigen::Index>(a.size());
  const ConstArrayMap<T> x(a.data().data(), n);
  ArrayMap<T>(out.data(), n) = T(0.5) * x * (T(1) + (x * kInvSqrt2<T>).erf());
  return emit<T>("gelu", a.shape(), std::move(out), should_track<T>({&a}),
                 [an = a.node()](TensorNode<T>* o) {
                   return [an, o] {
                     constexpr T kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2<T>;
                     const auto n = static_cast<Eigen::Index>(an->data.size());
                     const ConstArrayMap<T> x(an->data.data(), n);
                     const ConstArrayMap<T> dy(o->grad.data(), n);
                     const auto cdf = T(0.5) * (T(1) + (x * kInvSqrt2<T>).erf());
                     const auto pdf = kInvSqrt2Pi * (T(-0.5) * x.square()).exp();
                     ArrayMap<T>(an->ensure_grad().data(), n) += dy * (cdf + x * pdf);
                   };
                 });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm: empty last axis");
  const std::size_t d = x.shape().back();
  if (vector_length("layer_norm", gamma) != d || vector_length("layer_norm", beta) != d) {
    throw DimensionError("layer_norm: gamma/beta width does not match " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  Buffer<T> out(x.size());
  Buffer<T> normed(x.size());
  Buffer<T> rstd(rows);
  const T* xs = x.data().data();
  const T* gs = gamma.data().data();
  const T* bs = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T n = (row[j] - mean) * inv;
      normed[r * d + j] = n;
      out[r * d + j] = gs[j] * n + bs[j];
    }
  }
  return emit<T>(
      "layer_norm", x.shape(), std::move(out), should_track<T>({&x, &gamma, &beta}),
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), normed = std::move(normed),
       rstd = std::move(rstd), rows, d](TensorNode<T>* o) mutable {
        return [xn, gn, bn, o, normed = std::move(normed), rstd = std::move(rstd), rows, d] {
          const T* dy = o->grad.data();
          if (gn->tracked || bn->tracked) {
            auto gg = gn->tracked ? gn->ensure_grad() : std::span<T>{};
            auto gb = bn->tracked ? bn->ensure_grad() : std::span<T>{};
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < d; ++j) {
                if (!gg.empty()) gg[j] += dy[r * d + j] * normed[r * d + j];
                if (!gb.empty()) gb[j] += dy[r * d + j];
              }
            }
          }
          if (!xn->tracked) return;
          auto gx = xn->ensure_grad();
          Buffer<T> dn(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dn = 0, mean_dn_n = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dn[j] = dy[r * d + j] * gn->data[j];
              mean_dn += dn[j];
              mean_dn_n += dn[j] * normed[r * d + j];
            }
            mean_dn /= T(d);
            mean_dn_n /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[r * d + j] += rstd[r] * (dn[j] - mean_dn - normed[r * d + j] * mean_dn_n);
            }
          }
        };
      });
}

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const BoolMatrix& mask) {
  require_rank("softmax_attention", q, 3);
  require_rank("softmax_attention", k, 3);
  require_rank("softmax_attention", v, 3);
  const auto h = q.dim(0), nq = q.dim(1), dk = q.dim(2);
  const auto ns = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != h || v.dim(0) != h || k.dim(2) != dk || v.dim(1) != ns) {
    throw DimensionError("softmax_attention: incompatible Q/K/V shapes " + shape_string(q.shape()) +
                         ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  if (mask.rows != nq || mask.cols != ns) throw DimensionError("softmax_attention: mask shape");
  for (std::size_t i = 0; i < nq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < ns && !any; ++j) any = mask(i, j);
    if (!any) {
      throw MaskingError("softmax_attention: query row " + std::to_string(i) + " is fully masked");
    }
  }
  const T inv_sqrt = T(1) / std::sqrt(T(dk));
  Buffer<T> out(h * nq * dv);
  Buffer<T> probs(h * nq * ns);
  for (std::size_t head = 0; head < h; ++head) {
    ConstMatMap<T> qh(q.data().data() + head * nq * dk, nq, dk);
    ConstMatMap<T> kh(k.data().data() + head * ns * dk, ns, dk);
    ConstMatMap<T> vh(v.data().data() + head * ns * dv, ns, dv);
    MatMap<T> p(probs.data() + head * nq * ns, nq, ns);
    p.noalias() = (qh * kh.transpose()) * inv_sqrt;
    for (std::size_t i = 0; i < nq; ++i) {
      T max = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < ns; ++j) {
        if (mask(i, j)) max = std::max(max, p(i, j));
      }
      T total = 0;
      for (std::size_t j = 0; j < ns; ++j) {
        p(i, j) = mask(i, j) ? std::exp(p(i, j) - max) : T(0);
        total += p(i, j);
      }
      p.row(i) /= total;
    }
    MatMap<T>(out.data() + head * nq * dv, nq, dv).noalias() = p * vh;
  }
  return emit<T>(
      "softmax_attention", {h, nq, dv}, std::move(out), should_track<T>({&q, &k, &v}),
      [qn = q.node(), kn = k.node(), vn = v.node(), probs = std::move(probs), h, nq, ns, dk, dv,
       inv_sqrt](TensorNode<T>* o) mutable {
        return [qn, kn, vn, o, probs = std::move(probs), h, nq, ns, dk, dv, inv_sqrt] {
          for (std::size_t head = 0; head < h; ++head) {
            ConstMatMap<T> p(probs.data() + head * nq * ns, nq, ns);
            ConstMatMap<T> dout(o->grad.data() + head * nq * dv, nq, dv);
            ConstMatMap<T> vh(vn->data.data() + head * ns * dv, ns, dv);
            if (vn->tracked) {
              MatMap<T>(vn->ensure_grad().data() + head * ns * dv, ns, dv).noalias() +=
                  p.transpose() * dout;
            }
            RowMat<T> dp = dout * vh.transpose();
            RowMat<T> ds = p.cwiseProduct(
                (dp.colwise() - dp.cwiseProduct(p).rowwise().sum()).eval());
            ds *= inv_sqrt;
            if (qn->tracked) {
              MatMap<T>(qn->ensure_grad().data() + head * nq * dk, nq, dk).noalias() +=
                  ds * ConstMatMap<T>(kn->data.data() + head * ns * dk, ns, dk);
            }
            if (kn->tracked) {
              MatMap<T>(kn->ensure_grad().data() + head * ns * dk, ns, dk).noalias() +=
                  ds.transpose() * ConstMatMap<T>(qn->data.data() + head * nq * dk, nq, dk);
            }
          }
        };
      });
}

template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& qkv, std::size_t outer, std::size_t inner,
                            std::size_t n_heads, AttendAxis axis, std::size_t key_limit) {
  require_rank("grouped_attention", qkv, 2);
  const auto width = qkv.dim(1);
  if (qkv.dim(0) != outer * inner) {
    throw DimensionError("grouped_attention: " + shape_string(qkv.shape()) + " is not " +
                         std::to_string(outer) + "x" + std::to_string(inner) + " positions");
  }
  if (width % 3 != 0) throw DimensionError("grouped_attention: last axis must pack Q, K and V");
  const std::size_t d = width / 3;
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("grouped_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(n_heads));
  }
  const std::size_t dk = d / n_heads;
  const bool along_inner = axis == AttendAxis::kInner;
  const std::size_t groups = along_inner ? outer : inner;
  const std::size_t seq = along_inner ? inner : outer;
  if (seq > 0 && (key_limit == 0 || key_limit > seq)) {
    throw MaskingError("grouped_attention: key_limit " + std::to_string(key_limit) +
                       " leaves query rows without keys (sequence " + std::to_string(seq) + ")");
  }
  // Row of the packed tensor holding position t of group g.
  auto row_of = [=](std::size_t g, std::size_t t) {
    return along_inner ? g * inner + t : t * inner + g;
  };
  const auto S = static_cast<Eigen::Index>(seq), L = static_cast<Eigen::Index>(key_limit);
  const auto D = static_cast<Eigen::Index>(d), DK = static_cast<Eigen::Index>(dk);
  const T inv_sqrt = T(1) / std::sqrt(T(dk));
  const T* src = qkv.data().data();
  Buffer<T> out(outer * inner * d);
  Buffer<T> probs(groups * n_heads * seq * key_limit);
  RowMat<T> q(S, D), k(L, D), v(L, D), o(S, D);
  for (std::size_t g = 0; g < groups; ++g) {
    for (Eigen::Index t = 0; t < S; ++t) q.row(t) = ConstMatMap<T>(src + row_of(g, t) * width, 1, D);
    for (Eigen::Index t = 0; t < L; ++t) {
      k.row(t) = ConstMatMap<T>(src + row_of(g, t) * width + d, 1, D);
      v.row(t) = ConstMatMap<T>(src + row_of(g, t) * width + 2 * d, 1, D);
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dk);
      MatMap<T> p(probs.data() + (g * n_heads + h) * seq * key_limit, S, L);
      p.noalias() = q.middleCols(c0, DK) * k.middleCols(c0, DK).transpose();
      p *= inv_sqrt;
      p = (p.colwise() - p.rowwise().maxCoeff()).array().exp().matrix();
      p = p.array().colwise() / p.array().rowwise().sum();
      o.middleCols(c0, DK).noalias() = p * v.middleCols(c0, DK);
    }
    for (Eigen::Index t = 0; t < S; ++t) MatMap<T>(out.data() + row_of(g, t) * d, 1, D) = o.row(t);
  }
  return emit<T>(
      "grouped_attention", {outer * inner, d}, std::move(out), should_track<T>({&qkv}),
      [in = qkv.node(), probs = std::move(probs), groups, n_heads, S, L, D, DK, width, inv_sqrt,
       row_of](TensorNode<T>* node) mutable {
        return [in, node, probs = std::move(probs), groups, n_heads, S, L, D, DK, width, inv_sqrt,
                row_of] {
          T* gin = in->ensure_grad().data();
          const T* src = in->data.data();
          const T* gout = node->grad.data();
          const auto d = static_cast<std::size_t>(D);
          RowMat<T> q(S, D), k(L, D), v(L, D), dout(S, D), dq(S, D), dk(L, D), dv(L, D);
          RowMat<T> dp(S, L);
          for (std::size_t g = 0; g < groups; ++g) {
            for (Eigen::Index t = 0; t < S; ++t) {
              q.row(t) = ConstMatMap<T>(src + row_of(g, t) * width, 1, D);
              dout.row(t) = ConstMatMap<T>(gout + row_of(g, t) * d, 1, D);
            }
            for (Eigen::Index t = 0; t < L; ++t) {
              k.row(t) = ConstMatMap<T>(src + row_of(g, t) * width + d, 1, D);
              v.row(t) = ConstMatMap<T>(src + row_of(g, t) * width + 2 * d, 1, D);
            }
            for (std::size_t h = 0; h < n_heads; ++h) {
              const auto c0 = static_cast<Eigen::Index>(h) * DK;
              ConstMatMap<T> p(probs.data() + (g * n_heads + h) * S * L, S, L);
              dv.middleCols(c0, DK).noalias() = p.transpose() * dout.middleCols(c0, DK);
              dp.noalias() = dout.middleCols(c0, DK) * v.middleCols(c0, DK).transpose();
              const auto rowdot = (p.array() * dp.array()).rowwise().sum().eval();
              dp = (p.array() * (dp.array().colwise() - rowdot) * inv_sqrt).matrix();
              dq.middleCols(c0, DK).noalias() = dp * k.middleCols(c0, DK);
              dk.middleCols(c0, DK).noalias() = dp.transpose() * q.middleCols(c0, DK);
            }
            for (Eigen::Index t = 0; t < S; ++t) {
              MatMap<T>(gin + row_of(g, t) * width, 1, D) += dq.row(t);
            }
            for (Eigen::Index t = 0; t < L; ++t) {
              MatMap<T>(gin + row_of(g, t) * width + d, 1, D) += dk.row(t);
              MatMap<T>(gin + row_of(g, t) * width + 2 * d, 1, D) += dv.row(t);
            }
          }
        };
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  return emit<T>("reshape", std::move(shape), std::move(out), should_track<T>({&a}),
                 [an = a.node()](TensorNode<T>* o) {
                   return [an, o] {
                     auto g = an->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                   };
                 });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("concat_rows", a, 2);
  require_rank("concat_rows", b, 2);
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Buffer<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.size();
  return emit<T>("concat_rows", {a.dim(0) + b.dim(0), a.dim(1)}, std::move(out),
                 should_track<T>({&a, &b}),
                 [an = a.node(), bn = b.node(), split](TensorNode<T>* o) {
                   return [an, bn, o, split] {
                     if (an->tracked) {
                       auto g = an->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                     }
                     if (bn->tracked) {
                       auto g = bn->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[split + i];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t count) {
  const std::size_t n = vector_length("broadcast_rows", v);
  Buffer<T> out(count * n);
  for (std::size_t r = 0; r < count; ++r) {
    std::copy(v.data().begin(), v.data().end(), out.begin() + r * n);
  }
  return emit<T>("broadcast_rows", {count, n}, std::move(out), should_track<T>({&v}),
                 [vn = v.node(), count, n](TensorNode<T>* o) {
                   return [vn, o, count, n] {
                     auto g = vn->ensure_grad();
                     for (std::size_t r = 0; r < count; ++r) {
                       for (std::size_t j = 0; j < n; ++j) g[j] += o->grad[r * n + j];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> append_channel(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("append_channel", a, 3);
  require_rank("append_channel", b, 2);
  const auto rows = a.dim(0), ch = a.dim(1), d = a.dim(2);
  if (b.dim(0) != rows || b.dim(1) != d) {
    throw DimensionError("append_channel: " + shape_string(a.shape()) + " with " +
                         shape_string(b.shape()));
  }
  Buffer<T> out(rows * (ch + 1) * d);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * ch * d, ch * d, out.data() + r * (ch + 1) * d);
    std::copy_n(b.data().data() + r * d, d, out.data() + (r * (ch + 1) + ch) * d);
  }
  return emit<T>("append_channel", {rows * (ch + 1), d}, std::move(out), should_track<T>({&a, &b}),
                 [an = a.node(), bn = b.node(), rows, ch, d](TensorNode<T>* o) {
                   return [an, bn, o, rows, ch, d] {
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* src = o->grad.data() + r * (ch + 1) * d;
                       if (an->tracked) {
                         T* g = an->ensure_grad().data() + r * ch * d;
                         for (std::size_t i = 0; i < ch * d; ++i) g[i] += src[i];
                       }
                       if (bn->tracked) {
                         T* g = bn->ensure_grad().data() + r * d;
                         for (std::size_t i = 0; i < d; ++i) g[i] += src[ch * d + i];
                       }
                     }
                   };
                 });
}

template <typename T>
Tensor<T> take_channel(const Tensor<T>& h, std::size_t channels, std::size_t row_begin,
                       std::size_t row_end, std::size_t channel) {
  require_rank("take_channel", h, 2);
  const auto ch = channels, d = h.dim(1);
  if (ch == 0 || h.dim(0) % ch != 0) throw DimensionError("take_channel: channel count");
  const auto rows = h.dim(0) / ch;
  if (row_begin > row_end || row_end > rows || channel >= ch) {
    throw DimensionError("take_channel: range out of bounds for " + shape_string(h.shape()));
  }
  const std::size_t n = row_end - row_begin;
  Buffer<T> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(h.data().data() + ((row_begin + r) * ch + channel) * d, d, out.data() + r * d);
  }
  return emit<T>("take_channel", {n, d}, std::move(out), should_track<T>({&h}),
                 [hn = h.node(), row_begin, n, ch, channel, d](TensorNode<T>* o) {
                   return [hn, o, row_begin, n, ch, channel, d] {
                     auto g = hn->ensure_grad();
                     for (std::size_t r = 0; r < n; ++r) {
                       T* dst = g.data() + ((row_begin + r) * ch + channel) * d;
                       for (std::size_t j = 0; j < d; ++j) dst[j] += o->grad[r * d + j];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t k) {
  require_rank("slice_cols", x, 2);
  const auto n = x.dim(0), c = x.dim(1);
  if (k > c) throw DimensionError("slice_cols: " + std::to_string(k) + " > " + std::to_string(c));
  Buffer<T> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(x.data().data() + r * c, k, out.data() + r * k);
  }
  return emit<T>("slice_cols", {n, k}, std::move(out), should_track<T>({&x}),
                 [xn = x.node(), n, c, k](TensorNode<T>* o) {
                   return [xn, o, n, c, k] {
                     auto g = xn->ensure_grad();
                     for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t j = 0; j < k; ++j) g[r * c + j] += o->grad[r * k + j];
                     }
                   };
                 });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 2);
  const auto n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count mismatch");
  if (n == 0) throw ContractError("cross_entropy: no rows");
  const auto sm = softmax_rows<T>(logits.data(), c);
  Buffer<T> probs(sm.begin(), sm.end());
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(c) + ")");
    }
    const T* row = logits.data().data() + r * c;
    const T max = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - max);
    loss += max + std::log(total) - row[y];
  }
  loss /= T(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return emit<T>("cross_entropy", {1}, {loss}, should_track<T>({&logits}),
                 [ln = logits.node(), probs = std::move(probs), ys = std::move(ys), n,
                  c](TensorNode<T>* o) mutable {
                   return [ln, o, probs = std::move(probs), ys = std::move(ys), n, c] {
                     auto g = ln->ensure_grad();
                     const T s = o->grad[0] / T(n);
                     for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t j = 0; j < c; ++j) {
                         const T target = static_cast<int>(j) == ys[r] ? T(1) : T(0);
                         g[r * c + j] += s * (probs[r * c + j] - target);
                       }
                     }
                   };
                 });
}

template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t cols) {
  std::vector<T> out(logits.begin(), logits.end());
  if (cols == 0) return out;
  for (std::size_t r = 0; r < out.size() / cols; ++r) {
    T* row = out.data() + r * cols;
    const T max = *std::max_element(row, row + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - max);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
  return out;
}

#define TABSCOPE_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> softmax_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const BoolMatrix&);                                   \
  template Tensor<T> grouped_attention(const Tensor<T>&, std::size_t, std::size_t,          \
                                       std::size_t, AttendAxis, std::size_t);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> broadcast_rows(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> append_channel(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> take_channel(const Tensor<T>&, std::size_t, std::size_t, std::size_t,  \
                                  std::size_t);                                             \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                 \
  template std::vector<T> softmax_rows(std::span<const T>, std::size_t);

TABSCOPE_INSTANTIATE_OPS(float)
TABSCOPE_INSTANTIATE_OPS(double)

#undef TABSCOPE_INSTANTIATE_OPS

}  // namespace tabscope::nd
