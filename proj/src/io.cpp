#include "conpure/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "conpure/error.hpp"

namespace conpure {
namespace {

void ensure_parent(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
}

std::vector<std::uint8_t> read_pgm_bytes(const std::filesystem::path& path, int& height, int& width) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    auto next_token = [&]() {
        std::string tok;
        char ch = 0;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(ch);
        }
        return tok;
    };
    if (next_token() != "P5") {
        throw IoError(path.string() + ": not a binary PGM");
    }
    try {
        width = std::stoi(next_token());
        height = std::stoi(next_token());
        const int maxval = std::stoi(next_token());
        if (maxval != 255) {
            throw IoError(path.string() + ": only 8-bit PGM is supported");
        }
    } catch (const std::invalid_argument&) {
        throw IoError(path.string() + ": malformed PGM header");
    }
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw IoError(path.string() + ": truncated PGM");
    }
    return bytes;
}

void write_pgm_bytes(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& bytes) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> bytes(image.size());
    auto px = image.pixels();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0f, 1.0f) * 255.0f));
    }
    write_pgm_bytes(path, image.height(), image.width(), bytes);
}

Image read_pgm(const std::filesystem::path& path) {
    int h = 0;
    int w = 0;
    auto bytes = read_pgm_bytes(path, h, w);
    Image img(h, w);
    auto px = img.pixels();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        px[i] = static_cast<float>(bytes[i]) / 255.0f;
    }
    return img;
}

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> bytes(mask.size());
    auto bits = mask.bits();
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = bits[i] ? 255 : 0;
    write_pgm_bytes(path, mask.height(), mask.width(), bytes);
}

Mask read_mask_pgm(const std::filesystem::path& path) {
    int h = 0;
    int w = 0;
    auto bytes = read_pgm_bytes(path, h, w);
    Mask m(h, w);
    auto bits = m.bits();
    for (std::size_t i = 0; i < bytes.size(); ++i) bits[i] = bytes[i] ? 1 : 0;
    return m;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
}

}  // namespace conpure
