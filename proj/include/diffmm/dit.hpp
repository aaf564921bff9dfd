#ifndef DIFFMM_DIT_HPP_
#define DIFFMM_DIT_HPP_

#include <span>
#include <vector>

#include "diffmm/nn/layers.hpp"

namespace diffmm {

using nn::Index;

struct DiTConfig {
  int d_model = 512;
  int n_blocks = 2;
  int n_heads = 4;
  int ffn_mult = 4;
  /// Adds SinEmb(d) to the condition. Off for the no_shortcut ablation.
  bool step_conditioning = true;
};

/**
 * Conditional DiT predicting the shortcut direction s(x_t, t, d, C).
 *
 *   h   = x_t W_in + b_in
 *   c   = SiLU(C W_c + b_c + SinEmb(t) + SinEmb(d))      per row
 *   per block, with (a1, b1, g1, a2, b2, g2) = c W_mod + b_mod:
 *     h = h + a1 * MHA(g1 * Norm(h) + b1)
 *     h = h + a2 * FFN(g2 * Norm(h) + b2)
 *   s   = h W_out + b_out                                (zero-initialised)
 */
template <typename T>
class DiTDenoiser {
 public:
  using Matrix = nn::Matrix<T>;

  struct BlockCache {
    Matrix mod;
    nn::NormCache<T> norm1;
    typename nn::MultiHeadAttention<T>::Cache attn;
    Matrix attn_out;
    nn::NormCache<T> norm2;
    typename nn::FeedForward<T>::Cache ffn;
    Matrix ffn_out;
  };

  struct Cache {
    Matrix x;
    Matrix cond_in;
    Matrix cond_pre;
    Matrix cond;
    std::vector<BlockCache> blocks;
    Matrix h;
    nn::Segments sequences;
  };

  DiTDenoiser(nn::ParameterSet<T>& params, const DiTConfig& cfg, Index segment_count, Index d_cond);

  void init(Rng& rng);

  /// l x |E| prediction. Throws std::invalid_argument on shape mismatch or t, d outside [0, 1].
  Matrix forward(const Matrix& x, double t, double d, const Matrix& cond, Cache& cache) const;
  Matrix forward(const Matrix& x, double t, double d, const Matrix& cond) const {
    Cache c;
    return forward(x, t, d, cond, c);
  }

  /// Several sequences packed row-wise (offsets `sequences`), sequence k at
  /// time t[k] with step d[k].
  Matrix forward(const Matrix& x, const nn::Segments& sequences, std::span<const double> t,
                 std::span<const double> d, const Matrix& cond, Cache& cache) const;

  /// Accumulates parameter gradients and returns dL/dC; dL/dx goes to `dx` when non-null.
  Matrix backward(const Cache& cache, const Matrix& ds, Matrix* dx = nullptr) const;

  const DiTConfig& config() const { return cfg_; }

 private:
  struct Block {
    nn::Linear<T> modulation;
    nn::MultiHeadAttention<T> attn;
    nn::FeedForward<T> ffn;
  };

  DiTConfig cfg_;
  Index segments_;
  Index d_cond_;
  nn::Linear<T> input_;
  nn::Linear<T> cond_proj_;
  std::vector<Block> blocks_;
  nn::Linear<T> output_;
};

extern template class DiTDenoiser<float>;
extern template class DiTDenoiser<double>;

}  // namespace diffmm

#endif  // DIFFMM_DIT_HPP_
