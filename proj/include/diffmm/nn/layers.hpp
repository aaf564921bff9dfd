#ifndef DIFFMM_NN_LAYERS_HPP_
#define DIFFMM_NN_LAYERS_HPP_

#include <string>
#include <vector>

#include "diffmm/nn/tensor.hpp"

/**
 * Differentiable building blocks with explicit forward/backward passes.
 *
 * Every forward() fills a caller-owned cache so the same layer can be applied
 * several times per step; backward() consumes that cache, accumulates into
 * the parameters' grad buffers and returns the input gradient.
 */
namespace diffmm::nn {

template <typename T>
T default_norm_eps() {
  return std::is_same_v<T, float> ? T(1e-6) : T(1e-10);
}

/// Row offsets of sequences packed into one matrix: {0, end_1, ..., rows}.
using Segments = std::vector<Index>;

/// Throws std::invalid_argument unless `seg` starts at 0, is non-decreasing and ends at `rows`.
void check_segments(const Segments& seg, Index rows);

// ---------------------------------------------------------------- elementwise

template <typename T>
Matrix<T> relu(const Matrix<T>& x);
/// dy masked by x > 0.
template <typename T>
Matrix<T> relu_backward(const Matrix<T>& x, const Matrix<T>& dy);

template <typename T>
Matrix<T> silu(const Matrix<T>& x);
template <typename T>
Matrix<T> silu_backward(const Matrix<T>& x, const Matrix<T>& dy);

/// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x);
template <typename T>
void softmax_rows_inplace(Matrix<T>& x);

// ---------------------------------------------------------------- linear

/// y = x W + b with W: in x out, b: 1 x out.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& name, Index in, Index out, bool bias = true);

  Matrix<T> forward(const Matrix<T>& x) const;
  /// Accumulates dW, db and returns dx.
  Matrix<T> backward(const Matrix<T>& x, const Matrix<T>& dy) const;
  /// Accumulates dW, db only.
  void backward_params(const Matrix<T>& x, const Matrix<T>& dy) const;

  Index in_dim() const { return in_; }
  Index out_dim() const { return out_; }
  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>* bias() const { return bias_; }

 private:
  void check_input(const Matrix<T>& x) const;

  Index in_ = 0;
  Index out_ = 0;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

// ---------------------------------------------------------------- layer norm

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  ColVector<T> inv_std;
};

/// Per-row standardisation without affine terms.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, NormCache<T>& cache, T eps = default_norm_eps<T>());
template <typename T>
Matrix<T> layer_norm_backward(const NormCache<T>& cache, const Matrix<T>& dxhat);

/// Layer normalisation with learnable gain (init 1) and bias (init 0).
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& name, Index dim);

  Matrix<T> forward(const Matrix<T>& x, NormCache<T>& cache) const;
  Matrix<T> backward(const NormCache<T>& cache, const Matrix<T>& dy) const;

 private:
  Parameter<T>* gain_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

// ---------------------------------------------------------------- attention

/**
 * concat(head_1..head_h) W^O with head_i = softmax(Q W_i^Q (K W_i^K)^T / sqrt(d_k)) V W_i^V,
 * d_k = model_dim / heads. Per-head projections are column blocks of the
 * full W^Q, W^K, W^V matrices.
 *
 * Several sequences can be packed row-wise into one matrix: `segments` holds
 * the row offsets [0, e_1, ..., rows] and attention stays within each block.
 * Packing requires q, k and v to have the same row count.
 */
template <typename T>
class MultiHeadAttention {
 public:
  struct Cache {
    Matrix<T> q_in, k_in, v_in;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;  ///< per (sequence, head), rows sum to 1
    Matrix<T> concat;
    Segments segments;
  };
  struct Grads {
    Matrix<T> dq, dk, dv;
  };

  MultiHeadAttention() = default;
  /// Throws std::invalid_argument unless model_dim is divisible by heads.
  MultiHeadAttention(ParameterSet<T>& params, const std::string& name, Index model_dim, Index heads);

  Matrix<T> forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, Cache& cache,
                    const Segments* segments = nullptr) const;
  Matrix<T> forward_self(const Matrix<T>& x, Cache& cache, const Segments* segments = nullptr) const {
    return forward(x, x, x, cache, segments);
  }
  Grads backward(const Cache& cache, const Matrix<T>& dy) const;
  /// Self-attention input gradient (sum of the three input paths).
  Matrix<T> backward_self(const Cache& cache, const Matrix<T>& dy) const;

  Index heads() const { return heads_; }
  Index model_dim() const { return dim_; }
  Parameter<T>& wq() const { return *wq_; }
  Parameter<T>& wk() const { return *wk_; }
  Parameter<T>& wv() const { return *wv_; }
  Parameter<T>& wo() const { return *wo_; }

 private:
  Index dim_ = 0;
  Index heads_ = 1;
  Parameter<T>* wq_ = nullptr;
  Parameter<T>* wk_ = nullptr;
  Parameter<T>* wv_ = nullptr;
  Parameter<T>* wo_ = nullptr;
};

// ---------------------------------------------------------------- FFN

/// ReLU(x W + b) W' + b'.
template <typename T>
class FeedForward {
 public:
  struct Cache {
    Matrix<T> x, pre, hidden;
  };

  FeedForward() = default;
  FeedForward(ParameterSet<T>& params, const std::string& name, Index dim, Index hidden,
              Index out = -1);

  Matrix<T> forward(const Matrix<T>& x, Cache& cache) const;
  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy) const;

  const Linear<T>& inner() const { return l1_; }
  const Linear<T>& outer() const { return l2_; }

 private:
  Linear<T> l1_;
  Linear<T> l2_;
};

// ---------------------------------------------------------------- encoder layer

/// Post-norm layer: X' = LN(X + MHA(X,X,X)); Y = LN(X' + FFN(X')).
template <typename T>
class TransformerEncoderLayer {
 public:
  struct Cache {
    typename MultiHeadAttention<T>::Cache attn;
    NormCache<T> norm1;
    typename FeedForward<T>::Cache ffn;
    NormCache<T> norm2;
  };

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(ParameterSet<T>& params, const std::string& name, Index dim, Index heads,
                          Index ffn_hidden);

  Matrix<T> forward(const Matrix<T>& x, Cache& cache, const Segments* segments = nullptr) const;
  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy) const;

  const MultiHeadAttention<T>& attention() const { return attn_; }
  const FeedForward<T>& ffn() const { return ffn_; }

 private:
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm1_;
  FeedForward<T> ffn_;
  LayerNorm<T> norm2_;
};

// ---------------------------------------------------------------- misc

/**
 * Sinusoidal embedding of a scalar. With 1-based position j: odd j gives
 * cos(t / 10000^((j-1)/dim)), even j gives sin(t / 10000^((j-1)/dim)).
 * Throws std::invalid_argument for odd `dim`.
 */
template <typename T>
RowVector<T> sinusoidal_embedding(double t, Index dim);

/**
 * Mean over rows of -log softmax(logits)[row, target]. When `grad` is given,
 * it receives d(loss * scale)/d(logits). `scale` lets callers pool rows of
 * several sequences into one mean.
 */
template <typename T>
double cross_entropy(const std::vector<int>& target, const Matrix<T>& logits, Matrix<T>* grad = nullptr,
                     double scale = 1.0);

/// One-hot form. Throws std::invalid_argument if shapes differ or a row is not one-hot.
template <typename T>
double cross_entropy(const Matrix<T>& target_onehot, const Matrix<T>& logits,
                     Matrix<T>* grad = nullptr);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update from p.grad. Throws std::invalid_argument on shape mismatch.
template <typename T>
void adam_step(Parameter<T>& p, const AdamConfig& cfg);
template <typename T>
void adam_step(ParameterSet<T>& params, const AdamConfig& cfg);

#define DIFFMM_NN_EXTERN(T)                           \
  extern template class Linear<T>;                    \
  extern template class LayerNorm<T>;                 \
  extern template class MultiHeadAttention<T>;        \
  extern template class FeedForward<T>;               \
  extern template class TransformerEncoderLayer<T>;

DIFFMM_NN_EXTERN(float)
DIFFMM_NN_EXTERN(double)
#undef DIFFMM_NN_EXTERN

}  // namespace diffmm::nn

#endif  // DIFFMM_NN_LAYERS_HPP_
