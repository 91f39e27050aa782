#include "conpure/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "conpure/error.hpp"

namespace conpure {
namespace {

constexpr char kMagic[8] = {'C', 'P', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& where) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw IoError(where + ": truncated checkpoint");
    }
    return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::string& where) {
    if (n > (std::size_t{1} << 30)) {
        throw IoError(where + ": implausible string length in checkpoint");
    }
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
        throw IoError(where + ": truncated checkpoint");
    }
    return s;
}

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw IoError("checkpoint has no array '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.schema.size()));
    os.write(ckpt.schema.data(), static_cast<std::streamsize>(ckpt.schema.size()));
    const std::string meta = ckpt.metadata.dump();
    put<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& a : ckpt.arrays) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        put<std::uint64_t>(os, a.data.size());
        os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    }
    if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string where = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + where);
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw IoError(where + ": not a checkpoint file");
    }
    Checkpoint ckpt;
    ckpt.schema = get_string(is, get<std::uint32_t>(is, where), where);
    if (ckpt.schema != kCheckpointSchema) {
        throw IoError(where + ": unsupported checkpoint schema '" + ckpt.schema + "'");
    }
    const std::string meta = get_string(is, get<std::uint64_t>(is, where), where);
    try {
        ckpt.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(where + ": bad checkpoint metadata: " + e.what());
    }
    const auto count = get<std::uint32_t>(is, where);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = get_string(is, get<std::uint32_t>(is, where), where);
        const auto n = get<std::uint64_t>(is, where);
        if (n > (std::uint64_t{1} << 32)) throw IoError(where + ": implausible array size");
        a.data.resize(n);
        if (n && !is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
            throw IoError(where + ": truncated checkpoint");
        }
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

}  // namespace conpure
