#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace conpure {

std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const float> values);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace conpure
