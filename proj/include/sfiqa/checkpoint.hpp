#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include "sfiqa/nn/network.hpp"
#include "sfiqa/optim.hpp"

namespace sfiqa {

inline constexpr char kCheckpointMagic[8] = {'S', 'F', 'I', 'Q', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nn::ModelParams<float> params;
  std::optional<optim::AdamState> optimizer;
};

/// Binary layout is documented in docs/checkpoint-format.md.
void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams<float>& params,
                     const optim::AdamState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Serialised parameter bytes (shared weights, then branches in name order)
/// skipping the listed branches; used for bit-exact freeze checks.
std::string serialize_params(const nn::ModelParams<float>& params, const std::set<std::string>& exclude_branches = {});

/// 64-bit FNV-1a of serialize_params.
std::uint64_t params_hash(const nn::ModelParams<float>& params, const std::set<std::string>& exclude_branches = {});

}  // namespace sfiqa
