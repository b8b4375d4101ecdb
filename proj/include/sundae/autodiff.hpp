#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sundae/errors.hpp"
#include "sundae/rng.hpp"
#include "sundae/tensor.hpp"

namespace sundae {

/// Reverse-mode tape. Ops push a backward closure when recording and any
/// input requires a gradient; `backward` replays them in reverse order.
template <class T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  bool tracks(std::initializer_list<const Var<T>*> inputs) const {
    if (!record_) return false;
    for (const auto* v : inputs)
      if (*v && (*v)->requires_grad()) return true;
    return false;
  }

  void push(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  void backward(const Var<T>& loss) {
    if (loss->size() != 1) throw ArgumentError("backward: loss must be a scalar");
    if (!loss->requires_grad()) return;
    loss->grad()[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
  }

  std::size_t tape_size() const { return tape_.size(); }

 private:
  bool record_;
  std::vector<std::function<void()>> tape_;
};

namespace ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
MatMap<T> mat(std::span<T> s, std::size_t r, std::size_t c) {
  return MatMap<T>(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
ConstMatMap<T> cmat(std::span<const T> s, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
}

template <class T>
Var<T> result(Graph<T>& g, Shape shape, std::initializer_list<const Var<T>*> inputs) {
  auto out = make_var<T>(std::move(shape));
  out->set_requires_grad(g.tracks(inputs));
  return out;
}

inline void require(bool ok, const char* what) {
  if (!ok) throw ArgumentError(what);
}

}  // namespace detail

/// Constant leaf (no gradient).
template <class T>
Var<T> constant(Tensor<T> t) {
  return make_var<T>(std::move(t));
}

/// Copy of x cut off from the tape.
template <class T>
Var<T> detach(const Var<T>& x) {
  return make_var<T>(x->detached_copy());
}

/// y = a @ b for a [m,k], b [k,n].
template <class T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
  detail::require(b->rows() == k, "matmul: inner dimensions differ");
  auto y = detail::result<T>(g, {m, n}, {&a, &b});
  detail::mat<T>(y->values(), m, n).noalias() =
      detail::cmat<T>(a->values(), m, k) * detail::cmat<T>(b->values(), k, n);
  if (y->requires_grad()) {
    g.push([a, b, y, m, k, n] {
      auto dy = detail::cmat<T>(std::span<const T>(y->grad()), m, n);
      if (a->requires_grad())
        detail::mat<T>(a->grad(), m, k).noalias() +=
            dy * detail::cmat<T>(b->values(), k, n).transpose();
      if (b->requires_grad())
        detail::mat<T>(b->grad(), k, n).noalias() +=
            detail::cmat<T>(a->values(), m, k).transpose() * dy;
    });
  }
  return y;
}

/// y = x @ w + bias for x [m,k], w [k,n], bias [n].
template <class T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const std::size_t m = x->rows(), k = x->cols(), n = w->cols();
  detail::require(w->rows() == k && bias->size() == n, "linear: shape mismatch");
  auto y = detail::result<T>(g, {m, n}, {&x, &w, &bias});
  auto Y = detail::mat<T>(y->values(), m, n);
  Y.noalias() = detail::cmat<T>(x->values(), m, k) * detail::cmat<T>(w->values(), k, n);
  Y.rowwise() += detail::cmat<T>(bias->values(), 1, n).row(0);
  if (y->requires_grad()) {
    g.push([x, w, bias, y, m, k, n] {
      auto dy = detail::cmat<T>(std::span<const T>(y->grad()), m, n);
      if (x->requires_grad())
        detail::mat<T>(x->grad(), m, k).noalias() +=
            dy * detail::cmat<T>(w->values(), k, n).transpose();
      if (w->requires_grad())
        detail::mat<T>(w->grad(), k, n).noalias() +=
            detail::cmat<T>(x->values(), m, k).transpose() * dy;
      if (bias->requires_grad())
        detail::mat<T>(bias->grad(), 1, n) += dy.colwise().sum();
    });
  }
  return y;
}

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require(a->size() == b->size(), "add: size mismatch");
  auto y = detail::result<T>(g, a->shape(), {&a, &b});
  for (std::size_t i = 0; i < y->size(); ++i) (*y)[i] = (*a)[i] + (*b)[i];
  if (y->requires_grad()) {
    g.push([a, b, y] {
      auto dy = y->grad();
      if (a->requires_grad()) {
        auto da = a->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b->requires_grad()) {
        auto db = b->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return y;
}

/// Scalar sum of weighted scalar terms.
template <class T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<Var<T>>& terms,
                    const std::vector<T>& weights) {
  detail::require(terms.size() == weights.size() && !terms.empty(),
                  "weighted_sum: term/weight count mismatch");
  auto y = make_var<T>(Shape{1});
  bool track = false;
  T acc = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(terms[i]->size() == 1, "weighted_sum: terms must be scalars");
    acc += weights[i] * (*terms[i])[0];
    track = track || g.tracks({&terms[i]});
  }
  (*y)[0] = acc;
  y->set_requires_grad(track);
  if (track) {
    g.push([terms, weights, y] {
      const T dy = y->grad()[0];
      for (std::size_t i = 0; i < terms.size(); ++i)
        if (terms[i]->requires_grad()) terms[i]->grad()[0] += weights[i] * dy;
    });
  }
  return y;
}

/// Rows of `table` selected by ids: [ids.size(), d].
template <class T>
Var<T> embedding(Graph<T>& g, const Var<T>& table, std::vector<std::int32_t> ids) {
  const std::size_t rows = table->rows(), d = table->cols();
  for (auto id : ids)
    detail::require(id >= 0 && static_cast<std::size_t>(id) < rows,
                    "embedding: id out of range");
  auto y = detail::result<T>(g, {ids.size(), d}, {&table});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto src = table->row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), y->row(r).begin());
  }
  if (y->requires_grad()) {
    g.push([table, y, ids = std::move(ids), d] {
      auto dt = table->grad();
      auto dy = y->grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        T* dst = dt.data() + static_cast<std::size_t>(ids[r]) * d;
        const T* src = dy.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return y;
}

/// Tanh-approximated GELU.
template <class T>
Var<T> gelu(Graph<T>& g, const Var<T>& x) {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ArrMap = Eigen::Map<Arr>;
  using CArrMap = Eigen::Map<const Arr>;
  const auto n = static_cast<Eigen::Index>(x->size());
  auto y = detail::result<T>(g, x->shape(), {&x});
  CArrMap X(x->data(), n);
  Arr th = (kC * (X + kA * X.cube())).tanh();
  ArrMap(y->data(), n) = T(0.5) * X * (T(1) + th);
  if (y->requires_grad()) {
    g.push([x, y, th = std::move(th), n] {
      CArrMap X(x->data(), n);
      ArrMap dx(x->grad().data(), n);
      CArrMap dy(y->grad().data(), n);
      const Arr du = kC * (T(1) + T(3) * kA * X.square());
      dx += dy * (T(0.5) * (T(1) + th) + T(0.5) * X * (T(1) - th.square()) * du);
    });
  }
  return y;
}

/// Row-wise layer normalization over the trailing dimension.
template <class T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma,
                  const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x->rows(), d = x->cols();
  detail::require(gamma->size() == d && beta->size() == d, "layer_norm: shape mismatch");
  auto y = detail::result<T>(g, x->shape(), {&x, &gamma, &beta});
  std::vector<T> xhat(n * d), rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x->row(r);
    T mean = T(0);
    for (auto v : row) mean += v;
    mean /= T(d);
    T var = T(0);
    for (auto v : row) var += (v - mean) * (v - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    auto out = y->row(r);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * rs;
      xhat[r * d + c] = h;
      out[c] = h * (*gamma)[c] + (*beta)[c];
    }
  }
  if (y->requires_grad()) {
    g.push([x, gamma, beta, y, xhat = std::move(xhat), rstd = std::move(rstd), n, d] {
      auto dy = y->grad();
      if (gamma->requires_grad() || beta->requires_grad()) {
        auto dg = gamma->grad();
        auto db = beta->grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            dg[c] += dy[r * d + c] * xhat[r * d + c];
            db[c] += dy[r * d + c];
          }
      }
      if (x->requires_grad()) {
        auto dx = x->grad();
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dh = T(0), mean_dhh = T(0);
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = dy[r * d + c] * (*gamma)[c];
            mean_dh += dh[c];
            mean_dhh += dh[c] * xhat[r * d + c];
          }
          mean_dh /= T(d);
          mean_dhh /= T(d);
          for (std::size_t c = 0; c < d; ++c)
            dx[r * d + c] += rstd[r] * (dh[c] - mean_dh - xhat[r * d + c] * mean_dhh);
        }
      }
    });
  }
  return y;
}

/// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(Graph<T>& g, const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  detail::require(p < 1.0, "dropout: p must be < 1");
  auto y = detail::result<T>(g, x->shape(), {&x});
  std::vector<T> mask(x->size());
  const T keep_scale = T(1.0 / (1.0 - p));
  // Two 32-bit draws per 64-bit word; p is resolved to 2^-32.
  const auto cut = static_cast<std::uint64_t>(std::ldexp(p, 32));
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i % 2 == 0) word = rng.next_u64();
    const std::uint64_t u = (i % 2 == 0) ? (word & 0xffffffffULL) : (word >> 32);
    mask[i] = u < cut ? T(0) : keep_scale;
    (*y)[i] = (*x)[i] * mask[i];
  }
  if (y->requires_grad()) {
    g.push([x, y, mask = std::move(mask)] {
      auto dx = x->grad();
      auto dy = y->grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return y;
}

/// Multi-head scaled dot-product attention over `batch` independent blocks.
///
/// q is [batch*Lq, d]; k and v are [batch*Lk, d]. key_mask (optional, size
/// batch*Lk) marks attendable keys with 1. A query whose keys are all masked
/// yields zeros. `causal` restricts query i to keys j <= i.
template <class T>
Var<T> attention(Graph<T>& g, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 std::size_t batch, std::size_t heads,
                 const std::vector<std::uint8_t>& key_mask = {}, bool causal = false) {
  const std::size_t d = q->cols();
  detail::require(batch > 0 && heads > 0 && d % heads == 0, "attention: bad heads");
  detail::require(k->cols() == d && v->cols() == d && k->rows() == v->rows(),
                  "attention: k/v shape mismatch");
  detail::require(q->rows() % batch == 0 && k->rows() % batch == 0,
                  "attention: rows not divisible by batch");
  const std::size_t lq = q->rows() / batch, lk = k->rows() / batch, dh = d / heads;
  detail::require(key_mask.empty() || key_mask.size() == batch * lk,
                  "attention: key mask size mismatch");
  detail::require(!causal || lq == lk, "attention: causal needs square blocks");
  const T scale = T(1) / std::sqrt(T(dh));
  using Stride = Eigen::Stride<Eigen::Dynamic, 1>;
  using CBlock = Eigen::Map<const RowMat<T>, 0, Stride>;
  using Block = Eigen::Map<RowMat<T>, 0, Stride>;
  const Stride stride(static_cast<Eigen::Index>(d), 1);
  const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk),
             Dh = static_cast<Eigen::Index>(dh);

  auto y = detail::result<T>(g, {batch * lq, d}, {&q, &k, &v});
  auto probs = std::make_shared<AlignedVector<T>>(batch * heads * lq * lk, T(0));
  RowMat<T> scores(Lq, Lk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      CBlock Q(q->data() + b * lq * d + h * dh, Lq, Dh, stride);
      CBlock K(k->data() + b * lk * d + h * dh, Lk, Dh, stride);
      CBlock V(v->data() + b * lk * d + h * dh, Lk, Dh, stride);
      Block Y(y->data() + b * lq * d + h * dh, Lq, Dh, stride);
      scores.noalias() = (Q * K.transpose()) * scale;
      MatMap<T> P(probs->data() + (b * heads + h) * lq * lk, Lq, Lk);
      for (std::size_t i = 0; i < lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          const bool ok = (key_mask.empty() || key_mask[b * lk + j]) && (!causal || j <= i);
          if (ok) mx = std::max(mx, scores(i, j));
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T sum = T(0);
        for (std::size_t j = 0; j < lk; ++j) {
          const bool ok = (key_mask.empty() || key_mask[b * lk + j]) && (!causal || j <= i);
          const T e = ok ? std::exp(scores(i, j) - mx) : T(0);
          P(i, j) = e;
          sum += e;
        }
        P.row(i) /= sum;
      }
      Y.noalias() = P * V;
    }
  }
  if (y->requires_grad()) {
    g.push([q, k, v, y, probs, batch, heads, lq, lk, d, dh, scale] {
      const Stride stride(static_cast<Eigen::Index>(d), 1);
      const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk),
                 Dh = static_cast<Eigen::Index>(dh);
      auto dyall = y->grad();
      T* dq = q->requires_grad() ? q->grad().data() : nullptr;
      T* dk = k->requires_grad() ? k->grad().data() : nullptr;
      T* dv = v->requires_grad() ? v->grad().data() : nullptr;
      RowMat<T> dP(Lq, Lk), dS(Lq, Lk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t qo = b * lq * d + h * dh, ko = b * lk * d + h * dh;
          CBlock Q(q->data() + qo, Lq, Dh, stride);
          CBlock K(k->data() + ko, Lk, Dh, stride);
          CBlock V(v->data() + ko, Lk, Dh, stride);
          CBlock dY(dyall.data() + qo, Lq, Dh, stride);
          ConstMatMap<T> P(probs->data() + (b * heads + h) * lq * lk, Lq, Lk);
          if (dv) Block(dv + ko, Lk, Dh, stride).noalias() += P.transpose() * dY;
          if (!dq && !dk) continue;
          dP.noalias() = dY * V.transpose();
          for (Eigen::Index i = 0; i < Lq; ++i) {
            const T dot = P.row(i).dot(dP.row(i));
            dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * scale;
          }
          if (dq) Block(dq + qo, Lq, Dh, stride).noalias() += dS * K;
          if (dk) Block(dk + ko, Lk, Dh, stride).noalias() += dS.transpose() * Q;
        }
      }
    });
  }
  return y;
}

/// Mean of the rows of each batch block whose mask entry is 1: [batch, d].
template <class T>
Var<T> masked_mean_rows(Graph<T>& g, const Var<T>& x, std::size_t batch,
                        const std::vector<std::uint8_t>& mask) {
  const std::size_t d = x->cols();
  detail::require(batch > 0 && x->rows() % batch == 0, "masked_mean_rows: bad batch");
  const std::size_t len = x->rows() / batch;
  detail::require(mask.size() == x->rows(), "masked_mean_rows: mask size mismatch");
  auto y = detail::result<T>(g, {batch, d}, {&x});
  std::vector<T> inv(batch, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < len; ++i) count += mask[b * len + i] ? 1 : 0;
    if (count == 0) continue;
    inv[b] = T(1) / T(count);
    auto out = y->row(b);
    for (std::size_t i = 0; i < len; ++i) {
      if (!mask[b * len + i]) continue;
      auto r = x->row(b * len + i);
      for (std::size_t c = 0; c < d; ++c) out[c] += r[c] * inv[b];
    }
  }
  if (y->requires_grad()) {
    g.push([x, y, mask, inv = std::move(inv), batch, len, d] {
      auto dx = x->grad();
      auto dy = y->grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i) {
          if (!mask[b * len + i]) continue;
          for (std::size_t c = 0; c < d; ++c)
            dx[(b * len + i) * d + c] += dy[b * d + c] * inv[b];
        }
    });
  }
  return y;
}

/// Per batch block, places row b of `head` before the `body` rows:
/// head [batch, d], body [batch*L, d] -> [batch*(L+1), d].
template <class T>
Var<T> prepend_rows(Graph<T>& g, const Var<T>& head, const Var<T>& body, std::size_t batch) {
  const std::size_t d = body->cols();
  detail::require(head->cols() == d && head->rows() == batch && body->rows() % batch == 0,
                  "prepend_rows: shape mismatch");
  const std::size_t len = body->rows() / batch;
  auto y = detail::result<T>(g, {batch * (len + 1), d}, {&head, &body});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(head->data() + b * d, d, y->data() + b * (len + 1) * d);
    std::copy_n(body->data() + b * len * d, len * d, y->data() + (b * (len + 1) + 1) * d);
  }
  if (y->requires_grad()) {
    g.push([head, body, y, batch, len, d] {
      auto dy = y->grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = dy.data() + b * (len + 1) * d;
        if (head->requires_grad()) {
          T* dh = head->grad().data() + b * d;
          for (std::size_t c = 0; c < d; ++c) dh[c] += src[c];
        }
        if (body->requires_grad()) {
          T* db = body->grad().data() + b * len * d;
          for (std::size_t c = 0; c < len * d; ++c) db[c] += src[d + c];
        }
      }
    });
  }
  return y;
}

/// Mean label-smoothed cross-entropy over rows with nonzero weight.
///
/// Row i contributes -sum_k t_k log softmax(logits_i)_k with
/// t = (1-eps) onehot(target_i) + eps/v.
template <class T>
Var<T> cross_entropy(Graph<T>& g, const Var<T>& logits, std::vector<std::int32_t> targets,
                     double label_smoothing, std::vector<T> weights = {}) {
  const std::size_t n = logits->rows(), v = logits->cols();
  detail::require(targets.size() == n, "cross_entropy: target count mismatch");
  detail::require(label_smoothing >= 0.0 && label_smoothing < 1.0,
                  "cross_entropy: label smoothing must be in [0,1)");
  if (weights.empty()) weights.assign(n, T(1));
  detail::require(weights.size() == n, "cross_entropy: weight count mismatch");
  double total_weight = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw ArgumentError("cross_entropy: target id out of range");
    total_weight += static_cast<double>(weights[i]);
  }
  detail::require(total_weight > 0.0, "cross_entropy: mask selects no positions");

  auto y = detail::result<T>(g, {1}, {&logits});
  std::vector<T> probs(n * v);
  const double eps = label_smoothing;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits->row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (auto x : row) {
      if (!std::isfinite(static_cast<double>(x)))
        throw NumericError("cross_entropy: non-finite logit");
      mx = std::max(mx, static_cast<double>(x));
    }
    double sum = 0.0;
    for (auto x : row) sum += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(sum);
    double row_loss = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      const double logp = static_cast<double>(row[c]) - lse;
      probs[i * v + c] = static_cast<T>(std::exp(logp));
      const double t = (1.0 - eps) * (static_cast<std::size_t>(targets[i]) == c ? 1.0 : 0.0) +
                       eps / static_cast<double>(v);
      row_loss -= t * logp;
    }
    acc += static_cast<double>(weights[i]) * row_loss;
  }
  (*y)[0] = static_cast<T>(acc / total_weight);
  if (y->requires_grad()) {
    g.push([logits, y, probs = std::move(probs), targets = std::move(targets),
            weights = std::move(weights), total_weight, eps, n, v] {
      const T scale = y->grad()[0] / static_cast<T>(total_weight);
      auto dl = logits->grad();
      const T smooth = static_cast<T>(eps / static_cast<double>(v));
      const T gold = static_cast<T>(1.0 - eps);
      for (std::size_t i = 0; i < n; ++i) {
        if (weights[i] == T(0)) continue;
        const T s = scale * weights[i];
        for (std::size_t c = 0; c < v; ++c) {
          T t = smooth + (static_cast<std::size_t>(targets[i]) == c ? gold : T(0));
          dl[i * v + c] += s * (probs[i * v + c] - t);
        }
      }
    });
  }
  return y;
}

}  // namespace ops
}  // namespace sundae
