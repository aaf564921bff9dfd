#ifndef DIFFMM_MODEL_HPP_
#define DIFFMM_MODEL_HPP_

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "diffmm/dit.hpp"
#include "diffmm/encoder.hpp"

namespace diffmm {

struct ModelConfig {
  EncoderConfig encoder;
  DiTConfig dit;
  Variant variant = Variant::kFull;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NormalizationBounds& b);
NormalizationBounds bounds_from_json(const nlohmann::json& j);

/// Trajectory encoder and DiT denoiser sharing one parameter set.
template <typename T>
class DiffMMModel {
 public:
  DiffMMModel(const ModelConfig& cfg, std::size_t segment_count, const NormalizationBounds& bounds);
  DiffMMModel(const DiffMMModel&) = delete;
  DiffMMModel& operator=(const DiffMMModel&) = delete;

  /// Draws initial weights from the (seed, "init") substream.
  void init(std::uint64_t seed);

  EncoderInput prepare(const Trajectory& traj, const SpatialIndex& idx) const {
    return prepare_encoder_input(traj, idx, bounds_, cfg_.encoder);
  }

  /// Writes the checkpoint; `extra` lands next to the model config in the header.
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static std::unique_ptr<DiffMMModel> load(const std::filesystem::path& path);

  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }
  const TrajectoryEncoder<T>& encoder() const { return encoder_; }
  const DiTDenoiser<T>& denoiser() const { return denoiser_; }
  const ModelConfig& config() const { return cfg_; }
  const NormalizationBounds& bounds() const { return bounds_; }
  std::size_t segment_count() const { return segment_count_; }

 private:
  static ModelConfig normalised(ModelConfig cfg);

  ModelConfig cfg_;
  std::size_t segment_count_;
  NormalizationBounds bounds_;
  nn::ParameterSet<T> params_;
  TrajectoryEncoder<T> encoder_;
  DiTDenoiser<T> denoiser_;
};

extern template class DiffMMModel<float>;
extern template class DiffMMModel<double>;

}  // namespace diffmm

#endif  // DIFFMM_MODEL_HPP_
