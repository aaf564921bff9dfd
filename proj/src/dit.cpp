#include "diffmm/dit.hpp"

#include <stdexcept>
#include <string>

namespace diffmm {

template <typename T>
DiTDenoiser<T>::DiTDenoiser(nn::ParameterSet<T>& params, const DiTConfig& cfg, Index segment_count,
                            Index d_cond)
    : cfg_(cfg), segments_(segment_count), d_cond_(d_cond) {
  if (cfg.d_model <= 0 || cfg.d_model % 2 != 0 || cfg.n_blocks < 0 || cfg.ffn_mult <= 0) {
    throw std::invalid_argument("invalid DiT config");
  }
  const Index dm = cfg.d_model;
  input_ = nn::Linear<T>(params, "dit.input", segment_count, dm);
  cond_proj_ = nn::Linear<T>(params, "dit.cond", d_cond, dm);
  for (int k = 0; k < cfg.n_blocks; ++k) {
    const std::string name = "dit.block" + std::to_string(k);
    Block b;
    b.modulation = nn::Linear<T>(params, name + ".modulation", dm, 6 * dm);
    b.attn = nn::MultiHeadAttention<T>(params, name + ".attn", dm, cfg.n_heads);
    b.ffn = nn::FeedForward<T>(params, name + ".ffn", dm, cfg.ffn_mult * dm);
    blocks_.push_back(b);
  }
  output_ = nn::Linear<T>(params, "dit.output", dm, segment_count);
}

template <typename T>
void DiTDenoiser<T>::init(Rng& rng) {
  const Index dm = cfg_.d_model;
  nn::init_xavier(input_.weight(), rng);
  nn::init_xavier(cond_proj_.weight(), rng);
  for (auto& b : blocks_) {
    nn::init_xavier(b.modulation.weight(), rng);
    // gates and scales start at 1, shifts at 0
    auto& bias = b.modulation.bias()->value;
    bias.setZero();
    bias.block(0, 0, 1, dm).setOnes();
    bias.block(0, 2 * dm, 1, dm).setOnes();
    bias.block(0, 3 * dm, 1, dm).setOnes();
    bias.block(0, 5 * dm, 1, dm).setOnes();
    nn::init_xavier(b.attn.wq(), rng);
    nn::init_xavier(b.attn.wk(), rng);
    nn::init_xavier(b.attn.wv(), rng);
    nn::init_xavier(b.attn.wo(), rng);
    nn::init_xavier(b.ffn.inner().weight(), rng);
    nn::init_xavier(b.ffn.outer().weight(), rng);
  }
  output_.weight().value.setZero();
  output_.bias()->value.setZero();
}

template <typename T>
typename DiTDenoiser<T>::Matrix DiTDenoiser<T>::forward(const Matrix& x, double t, double d,
                                                        const Matrix& cond, Cache& cache) const {
  const double tt[] = {t};
  const double dd[] = {d};
  return forward(x, nn::Segments{0, x.rows()}, tt, dd, cond, cache);
}

template <typename T>
typename DiTDenoiser<T>::Matrix DiTDenoiser<T>::forward(const Matrix& x, const nn::Segments& sequences,
                                                        std::span<const double> t,
                                                        std::span<const double> d, const Matrix& cond,
                                                        Cache& cache) const {
  if (x.cols() != segments_ || cond.cols() != d_cond_ || cond.rows() != x.rows() || x.rows() == 0) {
    throw std::invalid_argument("DiT input " + nn::shape_of(x) + " / condition " + nn::shape_of(cond) +
                                " do not match l x " + std::to_string(segments_) + " / l x " +
                                std::to_string(d_cond_));
  }
  nn::check_segments(sequences, x.rows());
  const std::size_t nseq = sequences.size() - 1;
  if (t.size() != nseq || d.size() != nseq) {
    throw std::invalid_argument("DiT: need one t and d per packed sequence");
  }
  for (std::size_t k = 0; k < nseq; ++k) {
    if (!(t[k] >= 0.0 && t[k] <= 1.0 + 1e-9) || !(d[k] >= 0.0 && d[k] <= 1.0 + 1e-9)) {
      throw std::invalid_argument("DiT time/step outside [0, 1]: t=" + std::to_string(t[k]) +
                                  " d=" + std::to_string(d[k]));
    }
  }
  cache.sequences = sequences;
  const nn::Segments* packed = nseq > 1 ? &cache.sequences : nullptr;
  const Index dm = cfg_.d_model;
  cache.x = x;
  cache.cond_in = cond;
  cache.cond_pre = cond_proj_.forward(cond);
  for (std::size_t k = 0; k < nseq; ++k) {
    nn::RowVector<T> emb = nn::sinusoidal_embedding<T>(t[k], dm);
    if (cfg_.step_conditioning) emb += nn::sinusoidal_embedding<T>(d[k], dm);
    cache.cond_pre.middleRows(sequences[k], sequences[k + 1] - sequences[k]).rowwise() += emb;
  }
  cache.cond = nn::silu(cache.cond_pre);

  Matrix h = input_.forward(x);
  cache.blocks.resize(blocks_.size());
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const Block& b = blocks_[k];
    BlockCache& bc = cache.blocks[k];
    bc.mod = b.modulation.forward(cache.cond);
    auto a1 = bc.mod.middleCols(0, dm), b1 = bc.mod.middleCols(dm, dm), g1 = bc.mod.middleCols(2 * dm, dm);
    auto a2 = bc.mod.middleCols(3 * dm, dm), b2 = bc.mod.middleCols(4 * dm, dm),
         g2 = bc.mod.middleCols(5 * dm, dm);

    Matrix x1 = nn::layer_norm(h, bc.norm1).cwiseProduct(g1) + b1;
    bc.attn_out = b.attn.forward_self(x1, bc.attn, packed);
    h += a1.cwiseProduct(bc.attn_out);

    Matrix x2 = nn::layer_norm(h, bc.norm2).cwiseProduct(g2) + b2;
    bc.ffn_out = b.ffn.forward(x2, bc.ffn);
    h += a2.cwiseProduct(bc.ffn_out);
  }
  cache.h = h;
  return output_.forward(h);
}

template <typename T>
typename DiTDenoiser<T>::Matrix DiTDenoiser<T>::backward(const Cache& cache, const Matrix& ds,
                                                         Matrix* dx) const {
  const Index dm = cfg_.d_model;
  if (ds.rows() != cache.x.rows() || ds.cols() != segments_) {
    throw std::invalid_argument("DiT backward: gradient " + nn::shape_of(ds) + " does not match output " +
                                nn::shape_of(cache.x));
  }
  Matrix dh = output_.backward(cache.h, ds);
  Matrix dcond = Matrix::Zero(cache.cond.rows(), dm);
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    const Block& b = blocks_[k];
    const BlockCache& bc = cache.blocks[k];
    auto a1 = bc.mod.middleCols(0, dm), g1 = bc.mod.middleCols(2 * dm, dm);
    auto a2 = bc.mod.middleCols(3 * dm, dm), g2 = bc.mod.middleCols(5 * dm, dm);
    Matrix dmod(bc.mod.rows(), 6 * dm);

    dmod.middleCols(3 * dm, dm) = dh.cwiseProduct(bc.ffn_out);
    const Matrix dx2 = b.ffn.backward(bc.ffn, dh.cwiseProduct(a2));
    dmod.middleCols(4 * dm, dm) = dx2;
    dmod.middleCols(5 * dm, dm) = dx2.cwiseProduct(bc.norm2.xhat);
    dh += nn::layer_norm_backward(bc.norm2, Matrix(dx2.cwiseProduct(g2)));

    dmod.middleCols(0, dm) = dh.cwiseProduct(bc.attn_out);
    const Matrix dx1 = b.attn.backward_self(bc.attn, dh.cwiseProduct(a1));
    dmod.middleCols(dm, dm) = dx1;
    dmod.middleCols(2 * dm, dm) = dx1.cwiseProduct(bc.norm1.xhat);
    dh += nn::layer_norm_backward(bc.norm1, Matrix(dx1.cwiseProduct(g1)));

    dcond += b.modulation.backward(cache.cond, dmod);
  }
  const Matrix dpre = nn::silu_backward(cache.cond_pre, dcond);
  const Matrix dc = cond_proj_.backward(cache.cond_in, dpre);
  if (dx) {
    *dx = input_.backward(cache.x, dh);
  } else {
    input_.backward_params(cache.x, dh);
  }
  return dc;
}

template class DiTDenoiser<float>;
template class DiTDenoiser<double>;

}  // namespace diffmm
