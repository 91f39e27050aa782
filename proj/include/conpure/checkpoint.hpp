#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace conpure {

// Binary container, little-endian:
//   "CPCKPT01"                       8-byte magic
//   u32 len, schema string           e.g. "conpure.checkpoint/1"
//   u64 len, metadata JSON text
//   u32 array count, then per array: u32 name len, name, u64 element count, float32 data
inline constexpr const char* kCheckpointSchema = "conpure.checkpoint/1";

struct NamedArray {
    std::string name;
    std::vector<float> data;
};

struct Checkpoint {
    std::string schema = kCheckpointSchema;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray& array(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError on a bad magic, truncation or a schema other than kCheckpointSchema.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conpure
