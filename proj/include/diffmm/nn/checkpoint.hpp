#ifndef DIFFMM_NN_CHECKPOINT_HPP_
#define DIFFMM_NN_CHECKPOINT_HPP_

#include <filesystem>
#include <string>

#include <json.hpp>

#include "diffmm/nn/tensor.hpp"

/**
 * Checkpoint file layout:
 *
 *   bytes 0..7    magic "DIFFMMCK"
 *   bytes 8..11   format version, uint32 little-endian (currently 1)
 *   bytes 12..19  header length H, uint64 little-endian
 *   next H bytes  UTF-8 JSON header
 *   remainder     parameter values, float32 little-endian, row-major, in
 *                 header order
 *
 * The header holds "meta" (caller data such as configs and normalisation
 * bounds), "config_hash" (FNV-1a of meta["config"] serialised compactly) and
 * "parameters": a list of {name, rows, cols}.
 */
namespace diffmm::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Hex FNV-1a 64 of the compact JSON dump.
std::string config_hash(const nlohmann::json& config);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const ParameterSet<T>& params);

/// Reads only the JSON header's "meta" object.
nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);

/**
 * Fills every parameter of `params` from the file and returns "meta". Throws
 * DataError on a bad magic/version, a config hash mismatch, a missing or
 * extra parameter, a shape mismatch or a truncated file.
 */
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params);

}  // namespace diffmm::nn

#endif  // DIFFMM_NN_CHECKPOINT_HPP_
