#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prunecam/masks.hpp"
#include "prunecam/model.hpp"

namespace prunecam::model {

// Checkpoint byte layout (little-endian throughout):
//   magic "PRNE" | version u32 | header_len u64 | header JSON | float32 blob
// The JSON header carries the NetConfig, the named-tensor table (name,
// shape, element offset), the prune-mask table, and a CRC-32 of the blob.
// Documented byte-exactly in docs/formats.md.
std::vector<uint8_t> checkpoint_bytes(const ResidualNet& net,
                                      const prune::PruneMask& masks);
std::pair<ResidualNet, prune::PruneMask> checkpoint_from_bytes(
    const std::vector<uint8_t>& bytes);

void save_checkpoint(const ResidualNet& net, const prune::PruneMask& masks,
                     const std::filesystem::path& path);
std::pair<ResidualNet, prune::PruneMask> load_checkpoint(
    const std::filesystem::path& path);

}  // namespace prunecam::model
