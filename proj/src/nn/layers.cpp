#include "diffmm/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace diffmm::nn {

void check_segments(const Segments& seg, Index rows) {
  bool ok = seg.size() >= 2 && seg.front() == 0 && seg.back() == rows;
  for (std::size_t i = 1; ok && i < seg.size(); ++i) ok = seg[i] >= seg[i - 1];
  if (!ok) throw std::invalid_argument("sequence offsets do not partition " + std::to_string(rows) + " rows");
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Matrix<T> relu(const Matrix<T>& x) {
  return x.cwiseMax(T(0));
}

template <typename T>
Matrix<T> relu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  return (x.array() > T(0)).select(dy, T(0));
}

template <typename T>
Matrix<T> silu(const Matrix<T>& x) {
  return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Matrix<T> silu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  const auto s = (T(1) + (-x.array()).exp()).inverse();
  return (dy.array() * s * (T(1) + x.array() * (T(1) - s))).matrix();
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> out = x;
  softmax_rows_inplace(out);
  return out;
}

template <typename T>
void softmax_rows_inplace(Matrix<T>& x) {
  const ColVector<T> mx = x.rowwise().maxCoeff();
  x.colwise() -= mx;
  x = x.array().exp();
  x.array().colwise() /= x.rowwise().sum().array();
}

// ---------------------------------------------------------------- linear

template <typename T>
Linear<T>::Linear(ParameterSet<T>& params, const std::string& name, Index in, Index out, bool bias)
    : in_(in), out_(out) {
  weight_ = &params.add(name + ".weight", in, out);
  if (bias) bias_ = &params.add(name + ".bias", 1, out);
}

template <typename T>
void Linear<T>::check_input(const Matrix<T>& x) const {
  if (x.cols() != in_) {
    throw std::invalid_argument("linear " + weight_->name + ": input " + shape_of(x) +
                                " does not match weight " + shape_str(in_, out_));
  }
}

template <typename T>
Matrix<T> Linear<T>::forward(const Matrix<T>& x) const {
  check_input(x);
  Matrix<T> y(x.rows(), out_);
  y.noalias() = x * weight_->value;
  if (bias_) y.rowwise() += bias_->value.row(0);
  return y;
}

template <typename T>
void Linear<T>::backward_params(const Matrix<T>& x, const Matrix<T>& dy) const {
  weight_->grad.noalias() += x.transpose() * dy;
  if (bias_) bias_->grad.row(0) += dy.colwise().sum();
}

template <typename T>
Matrix<T> Linear<T>::backward(const Matrix<T>& x, const Matrix<T>& dy) const {
  backward_params(x, dy);
  Matrix<T> dx(dy.rows(), in_);
  dx.noalias() = dy * weight_->value.transpose();
  return dx;
}

// ---------------------------------------------------------------- layer norm

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, NormCache<T>& cache, T eps) {
  const T n = static_cast<T>(x.cols());
  const ColVector<T> mean = x.rowwise().sum() / n;
  cache.xhat = x.colwise() - mean;
  const ColVector<T> var = cache.xhat.rowwise().squaredNorm() / n;
  cache.inv_std = (var.array() + eps).rsqrt();
  cache.xhat.array().colwise() *= cache.inv_std.array();
  return cache.xhat;
}

template <typename T>
Matrix<T> layer_norm_backward(const NormCache<T>& cache, const Matrix<T>& dxhat) {
  const T n = static_cast<T>(dxhat.cols());
  const ColVector<T> mean_d = dxhat.rowwise().sum() / n;
  const ColVector<T> mean_dx = dxhat.cwiseProduct(cache.xhat).rowwise().sum() / n;
  Matrix<T> dx = dxhat.colwise() - mean_d;
  Matrix<T> proj = cache.xhat;
  proj.array().colwise() *= mean_dx.array();
  dx -= proj;
  dx.array().colwise() *= cache.inv_std.array();
  return dx;
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterSet<T>& params, const std::string& name, Index dim) {
  gain_ = &params.add(name + ".gain", 1, dim);
  bias_ = &params.add(name + ".bias", 1, dim);
  init_constant(*gain_, T(1));
}

template <typename T>
Matrix<T> LayerNorm<T>::forward(const Matrix<T>& x, NormCache<T>& cache) const {
  Matrix<T> y = layer_norm(x, cache);
  y.array().rowwise() *= gain_->value.row(0).array();
  y.rowwise() += bias_->value.row(0);
  return y;
}

template <typename T>
Matrix<T> LayerNorm<T>::backward(const NormCache<T>& cache, const Matrix<T>& dy) const {
  gain_->grad.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  bias_->grad.row(0) += dy.colwise().sum();
  Matrix<T> dxhat = dy;
  dxhat.array().rowwise() *= gain_->value.row(0).array();
  return layer_norm_backward(cache, dxhat);
}

// ---------------------------------------------------------------- attention

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParameterSet<T>& params, const std::string& name,
                                          Index model_dim, Index heads)
    : dim_(model_dim), heads_(heads) {
  if (heads <= 0 || model_dim % heads != 0) {
    throw std::invalid_argument("multi-head attention: model dim " + std::to_string(model_dim) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  wq_ = &params.add(name + ".wq", model_dim, model_dim);
  wk_ = &params.add(name + ".wk", model_dim, model_dim);
  wv_ = &params.add(name + ".wv", model_dim, model_dim);
  wo_ = &params.add(name + ".wo", model_dim, model_dim);
}

template <typename T>
Matrix<T> MultiHeadAttention<T>::forward(const Matrix<T>& q, const Matrix<T>& k,
                                         const Matrix<T>& v, Cache& cache,
                                         const Segments* segments) const {
  if (q.cols() != dim_ || k.cols() != dim_ || v.cols() != dim_ || k.rows() != v.rows()) {
    throw std::invalid_argument("multi-head attention: inputs " + shape_of(q) + ", " +
                                shape_of(k) + ", " + shape_of(v) + " incompatible with dim " +
                                std::to_string(dim_));
  }
  if (segments) {
    if (q.rows() != k.rows()) {
      throw std::invalid_argument("multi-head attention: packed sequences need equal q/k rows");
    }
    check_segments(*segments, q.rows());
    cache.segments = *segments;
  } else {
    cache.segments.clear();
  }
  const Index dk = dim_ / heads_;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  cache.q_in = q;
  cache.k_in = k;
  cache.v_in = v;
  cache.q.noalias() = q * wq_->value;
  cache.k.noalias() = k * wk_->value;
  cache.v.noalias() = v * wv_->value;
  const std::size_t nseq = segments ? segments->size() - 1 : 1;
  cache.probs.resize(nseq * static_cast<std::size_t>(heads_));
  cache.concat.resize(q.rows(), dim_);
  for (std::size_t s = 0; s < nseq; ++s) {
    const Index qb = segments ? (*segments)[s] : 0;
    const Index qn = segments ? (*segments)[s + 1] - qb : q.rows();
    const Index kb = qb;
    const Index kn = segments ? qn : k.rows();
    if (qn == 0) continue;
    for (Index h = 0; h < heads_; ++h) {
      auto& p = cache.probs[s * static_cast<std::size_t>(heads_) + static_cast<std::size_t>(h)];
      p.resize(qn, kn);
      p.noalias() = cache.q.block(qb, h * dk, qn, dk) * cache.k.block(kb, h * dk, kn, dk).transpose();
      p *= scale;
      softmax_rows_inplace(p);
      cache.concat.block(qb, h * dk, qn, dk).noalias() = p * cache.v.block(kb, h * dk, kn, dk);
    }
  }
  Matrix<T> out(q.rows(), dim_);
  out.noalias() = cache.concat * wo_->value;
  return out;
}

template <typename T>
typename MultiHeadAttention<T>::Grads MultiHeadAttention<T>::backward(const Cache& cache,
                                                                      const Matrix<T>& dy) const {
  const Index dk = dim_ / heads_;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  wo_->grad.noalias() += cache.concat.transpose() * dy;
  Matrix<T> dconcat(dy.rows(), dim_);
  dconcat.noalias() = dy * wo_->value.transpose();

  Matrix<T> dq_proj = Matrix<T>::Zero(cache.q.rows(), dim_);
  Matrix<T> dk_proj = Matrix<T>::Zero(cache.k.rows(), dim_);
  Matrix<T> dv_proj = Matrix<T>::Zero(cache.v.rows(), dim_);
  const bool packed = !cache.segments.empty();
  const std::size_t nseq = packed ? cache.segments.size() - 1 : 1;
  for (std::size_t s = 0; s < nseq; ++s) {
    const Index qb = packed ? cache.segments[s] : 0;
    const Index qn = packed ? cache.segments[s + 1] - qb : cache.q.rows();
    const Index kb = qb;
    const Index kn = packed ? qn : cache.k.rows();
    if (qn == 0) continue;
    for (Index h = 0; h < heads_; ++h) {
      const auto& p = cache.probs[s * static_cast<std::size_t>(heads_) + static_cast<std::size_t>(h)];
      const auto d_out = dconcat.block(qb, h * dk, qn, dk);
      Matrix<T> dp(qn, kn);
      dp.noalias() = d_out * cache.v.block(kb, h * dk, kn, dk).transpose();
      dv_proj.block(kb, h * dk, kn, dk).noalias() = p.transpose() * d_out;
      const ColVector<T> row_dot = dp.cwiseProduct(p).rowwise().sum();
      Matrix<T> ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
      dq_proj.block(qb, h * dk, qn, dk).noalias() = ds * cache.k.block(kb, h * dk, kn, dk);
      dk_proj.block(kb, h * dk, kn, dk).noalias() = ds.transpose() * cache.q.block(qb, h * dk, qn, dk);
    }
  }
  wq_->grad.noalias() += cache.q_in.transpose() * dq_proj;
  wk_->grad.noalias() += cache.k_in.transpose() * dk_proj;
  wv_->grad.noalias() += cache.v_in.transpose() * dv_proj;
  Grads g;
  g.dq.noalias() = dq_proj * wq_->value.transpose();
  g.dk.noalias() = dk_proj * wk_->value.transpose();
  g.dv.noalias() = dv_proj * wv_->value.transpose();
  return g;
}

template <typename T>
Matrix<T> MultiHeadAttention<T>::backward_self(const Cache& cache, const Matrix<T>& dy) const {
  Grads g = backward(cache, dy);
  g.dq += g.dk;
  g.dq += g.dv;
  return std::move(g.dq);
}

// ---------------------------------------------------------------- FFN

template <typename T>
FeedForward<T>::FeedForward(ParameterSet<T>& params, const std::string& name, Index dim,
                            Index hidden, Index out)
    : l1_(params, name + ".inner", dim, hidden), l2_(params, name + ".outer", hidden, out < 0 ? dim : out) {}

template <typename T>
Matrix<T> FeedForward<T>::forward(const Matrix<T>& x, Cache& cache) const {
  cache.x = x;
  cache.pre = l1_.forward(x);
  cache.hidden = relu<T>(cache.pre);
  return l2_.forward(cache.hidden);
}

template <typename T>
Matrix<T> FeedForward<T>::backward(const Cache& cache, const Matrix<T>& dy) const {
  const Matrix<T> dh = l2_.backward(cache.hidden, dy);
  return l1_.backward(cache.x, relu_backward<T>(cache.pre, dh));
}

// ---------------------------------------------------------------- encoder layer

template <typename T>
TransformerEncoderLayer<T>::TransformerEncoderLayer(ParameterSet<T>& params,
                                                    const std::string& name, Index dim,
                                                    Index heads, Index ffn_hidden)
    : attn_(params, name + ".attn", dim, heads),
      norm1_(params, name + ".norm1", dim),
      ffn_(params, name + ".ffn", dim, ffn_hidden),
      norm2_(params, name + ".norm2", dim) {}

template <typename T>
Matrix<T> TransformerEncoderLayer<T>::forward(const Matrix<T>& x, Cache& cache,
                                              const Segments* segments) const {
  Matrix<T> r1 = x + attn_.forward_self(x, cache.attn, segments);
  const Matrix<T> x1 = norm1_.forward(r1, cache.norm1);
  Matrix<T> r2 = x1 + ffn_.forward(x1, cache.ffn);
  return norm2_.forward(r2, cache.norm2);
}

template <typename T>
Matrix<T> TransformerEncoderLayer<T>::backward(const Cache& cache, const Matrix<T>& dy) const {
  const Matrix<T> dr2 = norm2_.backward(cache.norm2, dy);
  const Matrix<T> dx1 = dr2 + ffn_.backward(cache.ffn, dr2);
  const Matrix<T> dr1 = norm1_.backward(cache.norm1, dx1);
  return dr1 + attn_.backward_self(cache.attn, dr1);
}

// ---------------------------------------------------------------- misc

template <typename T>
RowVector<T> sinusoidal_embedding(double t, Index dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("sinusoidal_embedding: dimension must be positive and even");
  }
  RowVector<T> e(dim);
  for (Index k = 0; k < dim; ++k) {  // k = j - 1
    const double arg = t / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(dim));
    e(k) = static_cast<T>(k % 2 == 0 ? std::cos(arg) : std::sin(arg));
  }
  return e;
}

template <typename T>
double cross_entropy(const std::vector<int>& target, const Matrix<T>& logits, Matrix<T>* grad,
                     double scale) {
  if (static_cast<Index>(target.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(target.size()) +
                                " targets for logits " + shape_of(logits));
  }
  const Index rows = logits.rows();
  if (rows == 0) return 0.0;
  Matrix<T> probs = softmax_rows<T>(logits);
  double loss = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const int c = target[static_cast<std::size_t>(r)];
    if (c < 0 || c >= logits.cols()) {
      throw std::invalid_argument("cross_entropy: target class out of range");
    }
    const T max = logits.row(r).maxCoeff();
    const double lse = static_cast<double>(max) +
                       std::log(static_cast<double>((logits.row(r).array() - max).exp().sum()));
    loss += lse - static_cast<double>(logits(r, c));
  }
  loss /= static_cast<double>(rows);
  if (grad) {
    for (Index r = 0; r < rows; ++r) probs(r, target[static_cast<std::size_t>(r)]) -= T(1);
    *grad = probs * static_cast<T>(scale / static_cast<double>(rows));
  }
  return loss;
}

template <typename T>
double cross_entropy(const Matrix<T>& target_onehot, const Matrix<T>& logits, Matrix<T>* grad) {
  if (target_onehot.rows() != logits.rows() || target_onehot.cols() != logits.cols()) {
    throw std::invalid_argument("cross_entropy: target " + shape_of(target_onehot) +
                                " vs logits " + shape_of(logits));
  }
  std::vector<int> target(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < target_onehot.rows(); ++r) {
    int hot = -1;
    for (Index c = 0; c < target_onehot.cols(); ++c) {
      const T v = target_onehot(r, c);
      if (v == T(1) && hot < 0) {
        hot = static_cast<int>(c);
      } else if (v != T(0)) {
        throw std::invalid_argument("cross_entropy: target row " + std::to_string(r) +
                                    " is not one-hot");
      }
    }
    if (hot < 0) {
      throw std::invalid_argument("cross_entropy: target row " + std::to_string(r) +
                                  " is not one-hot");
    }
    target[static_cast<std::size_t>(r)] = hot;
  }
  return cross_entropy(target, logits, grad);
}

template <typename T>
void adam_step(Parameter<T>& p, const AdamConfig& cfg) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() ||
      p.m.rows() != p.value.rows() || p.v.cols() != p.value.cols()) {
    throw std::invalid_argument("adam_step: shape mismatch for " + p.name);
  }
  ++p.step;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  p.m = b1 * p.m + (T(1) - b1) * p.grad;
  p.v = b2 * p.v + (T(1) - b2) * p.grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
  const T step = static_cast<T>(cfg.lr / c1);
  const T root_c2 = static_cast<T>(std::sqrt(c2));
  const T eps = static_cast<T>(cfg.eps);
  p.value.array() -= step * p.m.array() / (p.v.array().sqrt() / root_c2 + eps);
}

template <typename T>
void adam_step(ParameterSet<T>& params, const AdamConfig& cfg) {
  for (auto& p : params) adam_step(p, cfg);
}

// ---------------------------------------------------------------- instantiation

#define DIFFMM_NN_INSTANTIATE(T)                                                             \
  template Matrix<T> relu<T>(const Matrix<T>&);                                              \
  template Matrix<T> relu_backward<T>(const Matrix<T>&, const Matrix<T>&);                   \
  template Matrix<T> silu<T>(const Matrix<T>&);                                              \
  template Matrix<T> silu_backward<T>(const Matrix<T>&, const Matrix<T>&);                   \
  template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                      \
  template void softmax_rows_inplace<T>(Matrix<T>&);                                         \
  template Matrix<T> layer_norm<T>(const Matrix<T>&, NormCache<T>&, T);                      \
  template Matrix<T> layer_norm_backward<T>(const NormCache<T>&, const Matrix<T>&);          \
  template RowVector<T> sinusoidal_embedding<T>(double, Index);                              \
  template double cross_entropy<T>(const std::vector<int>&, const Matrix<T>&, Matrix<T>*,    \
                                   double);                                                  \
  template double cross_entropy<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*);          \
  template void adam_step<T>(Parameter<T>&, const AdamConfig&);                              \
  template void adam_step<T>(ParameterSet<T>&, const AdamConfig&);                           \
  template class Linear<T>;                                                                  \
  template class LayerNorm<T>;                                                               \
  template class MultiHeadAttention<T>;                                                      \
  template class FeedForward<T>;                                                             \
  template class TransformerEncoderLayer<T>;

DIFFMM_NN_INSTANTIATE(float)
DIFFMM_NN_INSTANTIATE(double)

}  // namespace diffmm::nn
