#ifndef DIFFMM_TESTS_GRADIENT_SUITE_HPP_
#define DIFFMM_TESTS_GRADIENT_SUITE_HPP_

// Finite-difference checks for every differentiable op and the full
// encoder + denoiser loss, in double precision.

#include <string>
#include <vector>

#include "diffmm/shortcut.hpp"
#include "oracles.hpp"

namespace gradient_suite {

using diffmm::nn::Index;
using diffmm::nn::Matrix;
using diffmm::nn::ParameterSet;

struct Result {
  explicit Result(std::string n = {}) : name(std::move(n)) {}
  std::string name;
  double max_rel_err = 0.0;
  Index checked = 0;
  std::string worst;  ///< parameter or input holding the largest error
  Index kinks = 0;
};

inline double weighted_sum(const Matrix<double>& r, const Matrix<double>& y) { return r.cwiseProduct(y).sum(); }

/// Adds N(0, scale^2) to every parameter so that zero-initialised paths carry gradient.
inline void jitter(ParameterSet<double>& params, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : params) {
    for (Index k = 0; k < p.value.size(); ++k) p.value.data()[k] += n(rng);
  }
}

inline void merge(Result& into, const oracle::GradCheck& g, const std::string& what) {
  into.checked += g.checked;
  into.kinks += g.kinks;
  if (g.max_rel_err >= into.max_rel_err) {
    into.max_rel_err = g.max_rel_err;
    into.worst = what;
  }
}

inline void merge(Result& into, const std::pair<oracle::GradCheck, std::string>& g) { merge(into, g.first, g.second); }

// ---------------------------------------------------------------- elementwise and losses

inline Result check_relu(unsigned seed) {
  std::mt19937_64 rng(seed);
  Matrix<double> x = oracle::random_matrix(4, 5, rng);
  const Matrix<double> r = oracle::projection_weights(4, 5, seed + 1);
  Result res{"relu"};
  merge(res, oracle::check_gradient(x, diffmm::nn::relu_backward<double>(x, r),
                                    [&] { return weighted_sum(r, diffmm::nn::relu<double>(x)); }),
        "x");
  return res;
}

inline Result check_silu(unsigned seed) {
  std::mt19937_64 rng(seed);
  Matrix<double> x = oracle::random_matrix(4, 5, rng, 2.0);
  const Matrix<double> r = oracle::projection_weights(4, 5, seed + 1);
  Result res{"silu"};
  merge(res, oracle::check_gradient(x, diffmm::nn::silu_backward<double>(x, r),
                                    [&] { return weighted_sum(r, diffmm::nn::silu<double>(x)); }),
        "x");
  return res;
}

inline Result check_layer_norm(unsigned seed) {
  std::mt19937_64 rng(seed);
  Matrix<double> x = oracle::random_matrix(3, 6, rng);
  const Matrix<double> r = oracle::projection_weights(3, 6, seed + 1);
  diffmm::nn::NormCache<double> cache;
  diffmm::nn::layer_norm<double>(x, cache);
  const Matrix<double> dx = diffmm::nn::layer_norm_backward<double>(cache, r);
  Result res{"layer_norm"};
  merge(res, oracle::check_gradient(x, dx,
                                    [&] {
                                      diffmm::nn::NormCache<double> c;
                                      return weighted_sum(r, diffmm::nn::layer_norm<double>(x, c));
                                    }),
        "x");

  ParameterSet<double> params;
  diffmm::nn::LayerNorm<double> ln(params, "ln", 6);
  jitter(params, rng);
  auto loss = [&] {
    diffmm::nn::NormCache<double> c;
    return weighted_sum(r, ln.forward(x, c));
  };
  diffmm::nn::NormCache<double> c2;
  ln.forward(x, c2);
  params.zero_grad();
  const Matrix<double> dx2 = ln.backward(c2, r);
  merge(res, oracle::check_gradient(x, dx2, loss), "LayerNorm x");
  merge(res, oracle::check_parameters(params, loss, [&] {
          params.zero_grad();
          diffmm::nn::NormCache<double> c;
          ln.forward(x, c);
          ln.backward(c, r);
        }));
  return res;
}

inline Result check_cross_entropy(unsigned seed) {
  std::mt19937_64 rng(seed);
  Matrix<double> logits = oracle::random_matrix(4, 7, rng, 2.0);
  const std::vector<int> target{3, 0, 6, 3};
  Result res{"cross_entropy"};
  Matrix<double> g;
  diffmm::nn::cross_entropy<double>(target, logits, &g);
  merge(res, oracle::check_gradient(logits, g, [&] { return diffmm::nn::cross_entropy<double>(target, logits); }),
        "logits");
  Matrix<double> onehot = Matrix<double>::Zero(4, 7);
  for (std::size_t i = 0; i < target.size(); ++i) onehot(static_cast<Index>(i), target[i]) = 1.0;
  Matrix<double> g2;
  diffmm::nn::cross_entropy<double>(onehot, logits, &g2);
  merge(res,
        oracle::check_gradient(logits, g2, [&] { return diffmm::nn::cross_entropy<double>(onehot, logits); }),
        "logits (one-hot)");
  return res;
}

// ---------------------------------------------------------------- layers

inline Result check_linear(unsigned seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<double> params;
  diffmm::nn::Linear<double> lin(params, "lin", 5, 4);
  jitter(params, rng, 1.0);
  Matrix<double> x = oracle::random_matrix(3, 5, rng);
  const Matrix<double> r = oracle::projection_weights(3, 4, seed + 1);
  auto loss = [&] { return weighted_sum(r, lin.forward(x)); };
  Result res{"linear"};
  params.zero_grad();
  merge(res, oracle::check_gradient(x, lin.backward(x, r), loss), "x");
  merge(res, oracle::check_parameters(params, loss, [&] {
          params.zero_grad();
          lin.backward(x, r);
        }));
  return res;
}

inline Result check_feed_forward(unsigned seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<double> params;
  diffmm::nn::FeedForward<double> ffn(params, "ffn", 4, 7, 5);
  jitter(params, rng, 1.0);
  Matrix<double> x = oracle::random_matrix(3, 4, rng);
  const Matrix<double> r = oracle::projection_weights(3, 5, seed + 1);
  auto loss = [&] {
    typename diffmm::nn::FeedForward<double>::Cache c;
    return weighted_sum(r, ffn.forward(x, c));
  };
  typename diffmm::nn::FeedForward<double>::Cache c;
  ffn.forward(x, c);
  params.zero_grad();
  Result res{"feed_forward"};
  merge(res, oracle::check_gradient(x, ffn.backward(c, r), loss), "x");
  merge(res, oracle::check_parameters(params, loss, [&] {
          params.zero_grad();
          typename diffmm::nn::FeedForward<double>::Cache cc;
          ffn.forward(x, cc);
          ffn.backward(cc, r);
        }));
  return res;
}

/// Cross attention with distinct q, k, v and packed self attention over two sequences.
inline Result check_attention(unsigned seed) {
  using MHA = diffmm::nn::MultiHeadAttention<double>;
  std::mt19937_64 rng(seed);
  ParameterSet<double> params;
  MHA attn(params, "mha", 6, 2);
  jitter(params, rng, 0.5);
  Matrix<double> q = oracle::random_matrix(3, 6, rng);
  Matrix<double> k = oracle::random_matrix(4, 6, rng);
  Matrix<double> v = oracle::random_matrix(4, 6, rng);
  const Matrix<double> r = oracle::projection_weights(3, 6, seed + 1);
  auto loss = [&] {
    typename MHA::Cache c;
    return weighted_sum(r, attn.forward(q, k, v, c));
  };
  typename MHA::Cache c;
  attn.forward(q, k, v, c);
  params.zero_grad();
  const auto g = attn.backward(c, r);
  Result res{"multi_head_attention"};
  merge(res, oracle::check_gradient(q, g.dq, loss), "q");
  merge(res, oracle::check_gradient(k, g.dk, loss), "k");
  merge(res, oracle::check_gradient(v, g.dv, loss), "v");
  merge(res, oracle::check_parameters(params, loss, [&] {
          params.zero_grad();
          typename MHA::Cache cc;
          attn.forward(q, k, v, cc);
          attn.backward(cc, r);
        }));

  Matrix<double> x = oracle::random_matrix(5, 6, rng);
  const diffmm::nn::Segments seg{0, 2, 5};
  const Matrix<double> rx = oracle::projection_weights(5, 6, seed + 2);
  auto packed_loss = [&] {
    typename MHA::Cache cc;
    return weighted_sum(rx, attn.forward_self(x, cc, &seg));
  };
  typename MHA::Cache cs;
  attn.forward_self(x, cs, &seg);
  params.zero_grad();
  merge(res, oracle::check_gradient(x, attn.backward_self(cs, rx), packed_loss), "packed x");
  merge(res, oracle::check_parameters(params, packed_loss, [&] {
          params.zero_grad();
          typename MHA::Cache cc;
          attn.forward_self(x, cc, &seg);
          attn.backward_self(cc, rx);
        }));
  return res;
}

inline Result check_encoder_layer(unsigned seed) {
  using Layer = diffmm::nn::TransformerEncoderLayer<double>;
  std::mt19937_64 rng(seed);
  ParameterSet<double> params;
  Layer layer(params, "enc", 6, 2, 12);
  jitter(params, rng, 0.5);
  Matrix<double> x = oracle::random_matrix(4, 6, rng);
  const Matrix<double> r = oracle::projection_weights(4, 6, seed + 1);
  auto loss = [&] {
    typename Layer::Cache c;
    return weighted_sum(r, layer.forward(x, c));
  };
  typename Layer::Cache c;
  layer.forward(x, c);
  params.zero_grad();
  Result res{"transformer_encoder_layer"};
  merge(res, oracle::check_gradient(x, layer.backward(c, r), loss), "x");
  merge(res, oracle::check_parameters(params, loss, [&] {
          params.zero_grad();
          typename Layer::Cache cc;
          layer.forward(x, cc);
          layer.backward(cc, r);
        }));
  return res;
}

// ---------------------------------------------------------------- model

constexpr std::size_t kTinySegments = 12;

inline diffmm::ModelConfig tiny_config(diffmm::Variant variant = diffmm::Variant::kFull) {
  diffmm::ModelConfig cfg;
  cfg.variant = variant;
  cfg.encoder.d_emb = 8;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_a = 8;
  cfg.encoder.ffn_mult = 2;
  cfg.dit.d_model = 16;
  cfg.dit.n_heads = 2;
  cfg.dit.ffn_mult = 2;
  return cfg;
}

/// Hand-built encoder input over |E| = 12 with one candidate-free point.
inline diffmm::EncoderInput tiny_input(std::size_t length, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> seg(0, static_cast<int>(kTinySegments) - 1);
  diffmm::EncoderInput in;
  in.point_features.resize(static_cast<Index>(length), 3);
  for (Index k = 0; k < in.point_features.size(); ++k) in.point_features.data()[k] = u(rng);
  in.candidates.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t n = i == 1 ? 0 : 1 + i % 3;
    for (std::size_t j = 0; j < n; ++j) {
      diffmm::CandidateFeature c;
      c.segment = seg(rng);
      c.cos_prev = 2.0 * u(rng) - 1.0;
      c.cos_next = 2.0 * u(rng) - 1.0;
      c.proj_dist_m = 50.0 * u(rng);
      c.rank = n > 1 ? static_cast<double>(j) / static_cast<double>(n - 1) : 0.0;
      in.candidates[i].push_back(c);
    }
  }
  return in;
}

inline Result check_encoder(diffmm::Variant variant, unsigned seed) {
  using Encoder = diffmm::TrajectoryEncoder<double>;
  std::mt19937_64 rng(seed);
  const auto cfg = tiny_config(variant);
  diffmm::DiffMMModel<double> model(cfg, kTinySegments, {});
  model.init(seed);
  jitter(model.params(), rng, 0.2);
  const auto a = tiny_input(3, seed + 1);
  const auto b = tiny_input(4, seed + 2);
  const diffmm::EncoderInput* inputs[] = {&a, &b};
  const std::span<const diffmm::EncoderInput* const> span(inputs);
  const auto& enc = model.encoder();
  const Matrix<double> r = oracle::projection_weights(7, cfg.encoder.d_cond(), seed + 3);
  auto loss = [&] {
    typename Encoder::Cache c;
    return weighted_sum(r, enc.forward(span, c));
  };
  Result res{"encoder (" + std::string(diffmm::to_string(variant)) + ")"};
  merge(res, oracle::check_parameters(model.params(), loss, [&] {
          model.params().zero_grad();
          typename Encoder::Cache c;
          enc.forward(span, c);
          enc.backward(c, r);
        }));
  return res;
}

inline Result check_denoiser(unsigned seed) {
  using DiT = diffmm::DiTDenoiser<double>;
  std::mt19937_64 rng(seed);
  const auto cfg = tiny_config();
  diffmm::DiffMMModel<double> model(cfg, kTinySegments, {});
  model.init(seed);
  jitter(model.params(), rng, 0.2);
  const auto& dit = model.denoiser();
  const Index e = static_cast<Index>(kTinySegments);
  Matrix<double> x = oracle::random_matrix(5, e, rng);
  Matrix<double> cond = oracle::random_matrix(5, cfg.encoder.d_cond(), rng);
  const diffmm::nn::Segments seq{0, 3, 5};
  const std::vector<double> t{0.25, 0.5}, d{0.125, 0.0};
  const Matrix<double> r = oracle::projection_weights(5, e, seed + 1);
  auto loss = [&] {
    typename DiT::Cache c;
    return weighted_sum(r, dit.forward(x, seq, t, d, cond, c));
  };
  typename DiT::Cache c;
  dit.forward(x, seq, t, d, cond, c);
  model.params().zero_grad();
  Matrix<double> dx;
  const Matrix<double> dcond = dit.backward(c, r, &dx);
  Result res{"dit_denoiser"};
  merge(res, oracle::check_gradient(x, dx, loss), "x_t");
  merge(res, oracle::check_gradient(cond, dcond, loss), "condition");
  merge(res, oracle::check_parameters(model.params(), loss, [&] {
          model.params().zero_grad();
          typename DiT::Cache cc;
          dit.forward(x, seq, t, d, cond, cc);
          dit.backward(cc, r);
        }));
  return res;
}

/// Flow-target training loss through encoder and denoiser for l = 3 and l = 2 packed.
inline Result check_composite(unsigned seed, bool ce_time_scaled = false) {
  std::mt19937_64 rng(seed);
  const auto cfg = tiny_config();
  diffmm::DiffMMModel<double> model(cfg, kTinySegments, {});
  model.init(seed);
  jitter(model.params(), rng, 0.1);
  diffmm::TrainingSample s1{tiny_input(3, seed + 1), {2, 5, 11}};
  diffmm::TrainingSample s2{tiny_input(2, seed + 2), {0, 7}};
  const std::vector<const diffmm::TrainingSample*> batch{&s1, &s2};
  diffmm::LossConfig lc;
  lc.ce_time_scaled = ce_time_scaled;
  auto run = [&](bool accumulate) {
    diffmm::Rng r = diffmm::make_rng(seed, "gradcheck");
    return diffmm::compute_loss(model, batch, diffmm::LossMode::kFlow, lc, r, accumulate).total;
  };
  Result res{ce_time_scaled ? "encoder+dit loss (time-scaled CE)" : "encoder+dit loss"};
  merge(res, oracle::check_parameters(model.params(), [&] { return run(false); }, [&] {
          model.params().zero_grad();
          run(true);
        }));
  return res;
}

/// Every check above with fixed seeds.
inline std::vector<Result> run_all() {
  using diffmm::Variant;
  return {check_relu(11),
          check_silu(12),
          check_layer_norm(13),
          check_cross_entropy(14),
          check_linear(15),
          check_feed_forward(16),
          check_attention(17),
          check_encoder_layer(18),
          check_encoder(Variant::kFull, 19),
          check_encoder(Variant::kNoTrans, 20),
          check_encoder(Variant::kNoAttn, 21),
          check_denoiser(22),
          check_composite(23),
          check_composite(24, true)};
}

}  // namespace gradient_suite

#endif  // DIFFMM_TESTS_GRADIENT_SUITE_HPP_
