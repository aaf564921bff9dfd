#include "diffmm/model.hpp"

#include "diffmm/nn/checkpoint.hpp"

namespace diffmm {

nlohmann::json to_json(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  const auto& d = cfg.dit;
  return {
      {"variant", std::string(to_string(cfg.variant))},
      {"encoder",
       {{"d_emb", e.d_emb},
        {"n_layers", e.n_layers},
        {"n_heads", e.n_heads},
        {"d_a", e.d_a},
        {"ffn_mult", e.ffn_mult},
        {"delta_m", e.delta_m},
        {"rank_feature", e.rank_feature}}},
      {"dit",
       {{"d_model", d.d_model},
        {"n_blocks", d.n_blocks},
        {"n_heads", d.n_heads},
        {"ffn_mult", d.ffn_mult},
        {"step_conditioning", d.step_conditioning}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    const auto& e = j.at("encoder");
    cfg.encoder.d_emb = e.at("d_emb");
    cfg.encoder.n_layers = e.at("n_layers");
    cfg.encoder.n_heads = e.at("n_heads");
    cfg.encoder.d_a = e.at("d_a");
    cfg.encoder.ffn_mult = e.at("ffn_mult");
    cfg.encoder.delta_m = e.at("delta_m");
    cfg.encoder.rank_feature = e.at("rank_feature");
    const auto& d = j.at("dit");
    cfg.dit.d_model = d.at("d_model");
    cfg.dit.n_blocks = d.at("n_blocks");
    cfg.dit.n_heads = d.at("n_heads");
    cfg.dit.ffn_mult = d.at("ffn_mult");
    cfg.dit.step_conditioning = d.at("step_conditioning");
    return cfg;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("bad model config: ") + ex.what());
  }
}

nlohmann::json to_json(const NormalizationBounds& b) {
  return {{"lat", {b.lat_lo, b.lat_hi}}, {"lng", {b.lng_lo, b.lng_hi}}, {"t", {b.t_lo, b.t_hi}}};
}

NormalizationBounds bounds_from_json(const nlohmann::json& j) {
  try {
    NormalizationBounds b;
    b.lat_lo = j.at("lat").at(0);
    b.lat_hi = j.at("lat").at(1);
    b.lng_lo = j.at("lng").at(0);
    b.lng_hi = j.at("lng").at(1);
    b.t_lo = j.at("t").at(0);
    b.t_hi = j.at("t").at(1);
    return b;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("bad normalization bounds: ") + ex.what());
  }
}

template <typename T>
ModelConfig DiffMMModel<T>::normalised(ModelConfig cfg) {
  if (cfg.variant == Variant::kNoShortcut) cfg.dit.step_conditioning = false;
  return cfg;
}

template <typename T>
DiffMMModel<T>::DiffMMModel(const ModelConfig& cfg, std::size_t segment_count,
                            const NormalizationBounds& bounds)
    : cfg_(normalised(cfg)),
      segment_count_(segment_count),
      bounds_(bounds),
      encoder_(params_, cfg_.encoder, segment_count, cfg_.variant),
      denoiser_(params_, cfg_.dit, static_cast<Index>(segment_count), cfg_.encoder.d_cond()) {}

template <typename T>
void DiffMMModel<T>::init(std::uint64_t seed) {
  Rng enc = make_rng(seed, "init", 0);
  Rng dit = make_rng(seed, "init", 1);
  encoder_.init(enc);
  denoiser_.init(dit);
}

template <typename T>
void DiffMMModel<T>::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta;
  meta["config"] = to_json(cfg_);
  meta["config"]["segment_count"] = segment_count_;
  meta["bounds"] = to_json(bounds_);
  if (!extra.is_null()) meta["extra"] = extra;
  nn::save_checkpoint(path, meta, params_);
}

template <typename T>
std::unique_ptr<DiffMMModel<T>> DiffMMModel<T>::load(const std::filesystem::path& path) {
  const nlohmann::json meta = nn::read_checkpoint_meta(path);
  std::size_t segments = 0;
  try {
    segments = meta.at("config").at("segment_count");
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(path.string() + ": " + ex.what());
  }
  auto model = std::make_unique<DiffMMModel<T>>(model_config_from_json(meta.at("config")), segments,
                                                bounds_from_json(meta.at("bounds")));
  nn::load_checkpoint(path, model->params_);
  return model;
}

template class DiffMMModel<float>;
template class DiffMMModel<double>;

}  // namespace diffmm
