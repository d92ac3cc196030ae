#pragma once

// Checkpoint container: a single binary file holding named 2-D arrays plus a
// JSON metadata record.
//
//   magic     8 bytes  "MAMACKPT"
//   version   u32      (currently 1)
//   meta_len  u64      length of the UTF-8 JSON metadata that follows
//   meta      bytes
//   count     u64      number of arrays
//   per array:
//     name_len u64, name bytes, rows u64, cols u64, rows*cols IEEE-754 f64
//
// All integers and doubles are little-endian. Writes go to a temporary file
// that is renamed into place.

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/core.hpp"
#include "mama/tensor.hpp"

namespace mama::io {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

using json = nlohmann::json;

struct NamedArray {
    std::string name;
    Tensor value;
    bool operator==(const NamedArray&) const = default;
};

struct Container {
    json metadata = json::object();
    std::vector<NamedArray> arrays;

    [[nodiscard]] const Tensor& at(const std::string& name) const {
        for (const auto& a : arrays) {
            if (a.name == name) return a.value;
        }
        throw ConfigError("checkpoint: missing array '" + name + "'");
    }
};

inline constexpr char kMagic[8] = {'M', 'A', 'M', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw ConfigError("checkpoint: truncated file");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline void put_arrays(std::string& out, const std::vector<NamedArray>& arrays) {
    put<std::uint64_t>(out, arrays.size());
    for (const auto& a : arrays) {
        put<std::uint64_t>(out, a.name.size());
        out += a.name;
        put<std::uint64_t>(out, a.value.rows());
        put<std::uint64_t>(out, a.value.cols());
        const auto bytes = a.value.size() * sizeof(double);
        const auto old = out.size();
        out.resize(old + bytes);
        if (bytes > 0) std::memcpy(out.data() + old, a.value.data().data(), bytes);
    }
}

}  // namespace detail

inline std::string serialize(const Container& c) {
    std::string out(kMagic, sizeof(kMagic));
    detail::put<std::uint32_t>(out, kVersion);
    const std::string meta = c.metadata.dump();
    detail::put<std::uint64_t>(out, meta.size());
    out += meta;
    detail::put_arrays(out, c.arrays);
    return out;
}

inline Container deserialize(const std::string& in) {
    if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError("checkpoint: bad magic");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = detail::take<std::uint32_t>(in, pos);
    if (version != kVersion) throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
    const auto meta_len = detail::take<std::uint64_t>(in, pos);
    if (pos + meta_len > in.size()) throw ConfigError("checkpoint: truncated metadata");
    Container c;
    c.metadata = json::parse(in.substr(pos, meta_len));
    pos += meta_len;
    const auto count = detail::take<std::uint64_t>(in, pos);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::take<std::uint64_t>(in, pos);
        if (pos + name_len > in.size()) throw ConfigError("checkpoint: truncated name");
        std::string name = in.substr(pos, name_len);
        pos += name_len;
        const auto rows = detail::take<std::uint64_t>(in, pos);
        const auto cols = detail::take<std::uint64_t>(in, pos);
        const auto bytes = rows * cols * sizeof(double);
        if (pos + bytes > in.size()) throw ConfigError("checkpoint: truncated array '" + name + "'");
        std::vector<double> data(rows * cols);
        if (bytes > 0) std::memcpy(data.data(), in.data() + pos, bytes);
        pos += bytes;
        c.arrays.push_back({std::move(name), Tensor(rows, cols, std::move(data))});
    }
    if (pos != in.size()) throw ConfigError("checkpoint: trailing bytes");
    return c;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Writes to `<path>.tmp` then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeError("cannot write '" + tmp.string() + "'");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw RuntimeError("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline void save(const std::filesystem::path& path, const Container& c) { write_file_atomic(path, serialize(c)); }

inline Container load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

inline std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw RuntimeError("sha256 failed");
    }
    std::ostringstream ss;
    for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
    return ss.str();
}

/// Content hash over array names, shapes and raw values (metadata excluded).
inline std::string content_hash(const std::vector<NamedArray>& arrays) {
    std::string bytes;
    detail::put_arrays(bytes, arrays);
    return sha256_hex(bytes);
}

}  // namespace mama::io
