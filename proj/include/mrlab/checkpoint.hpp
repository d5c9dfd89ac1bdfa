#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mrlab {

// Versioned checkpoint container. Layout:
//   magic "MRLAB1" | u32 version | u32 len + section name | u32 len + config
//   JSON | u64 count | count little-endian f64 parameters in declared order.
struct Checkpoint {
    std::string section;     // "backbone" or "codebook"
    std::string config_json; // the owning module's config block
    std::vector<double> params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::string& expected_section = "");

} // namespace mrlab
