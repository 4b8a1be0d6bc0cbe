#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "visrecon/errors.hpp"
#include "visrecon/tensor.hpp"

namespace visrecon {

// Ordered name -> tensor container used for checkpoints and data files.
struct TensorMap {
    std::vector<std::pair<std::string, Tensor>> items;

    void put(const std::string& name, Tensor t) {
        for (auto& [k, v] : items)
            if (k == name) {
                v = std::move(t);
                return;
            }
        items.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const {
        for (auto& [k, v] : items)
            if (k == name) return true;
        return false;
    }

    const Tensor& get(const std::string& name) const {
        for (auto& [k, v] : items)
            if (k == name) return v;
        throw data_error("tensor '" + name + "' missing from archive");
    }

    Tensor& get_mut(const std::string& name) {
        for (auto& [k, v] : items)
            if (k == name) return v;
        throw data_error("tensor '" + name + "' missing from archive");
    }
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t x) { os.write(reinterpret_cast<const char*>(&x), 4); }
inline void write_u64(std::ostream& os, std::uint64_t x) { os.write(reinterpret_cast<const char*>(&x), 8); }

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t x = 0;
    is.read(reinterpret_cast<char*>(&x), 4);
    if (!is) throw data_error("truncated archive");
    return x;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t x = 0;
    is.read(reinterpret_cast<char*>(&x), 8);
    if (!is) throw data_error("truncated archive");
    return x;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw data_error("archive string too long");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw data_error("truncated archive");
    return s;
}

}  // namespace detail

constexpr std::uint32_t kArchiveMagic = 0x56524331;  // "VRC1"
constexpr std::uint32_t kArchiveVersion = 1;

// Write to a sibling temp file then rename, so readers never observe a
// half-written artifact.
template <typename WriterFn>
inline void atomic_write(const std::filesystem::path& path, WriterFn&& fn) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw data_error("cannot open for write: " + tmp.string());
        fn(os);
        os.flush();
        if (!os) throw data_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void save_tensors(const std::filesystem::path& path, const TensorMap& tm,
                         const std::vector<std::pair<std::string, std::string>>& meta = {}) {
    atomic_write(path, [&](std::ostream& os) {
        detail::write_u32(os, kArchiveMagic);
        detail::write_u32(os, kArchiveVersion);
        detail::write_u32(os, static_cast<std::uint32_t>(meta.size()));
        for (auto& [k, v] : meta) {
            detail::write_string(os, k);
            detail::write_string(os, v);
        }
        detail::write_u32(os, static_cast<std::uint32_t>(tm.items.size()));
        for (auto& [name, t] : tm.items) {
            detail::write_string(os, name);
            detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
            for (int d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
            detail::write_u64(os, static_cast<std::uint64_t>(t.v.size()));
            os.write(reinterpret_cast<const char*>(t.v.data()),
                     static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        }
    });
}

inline TensorMap load_tensors(const std::filesystem::path& path,
                              std::map<std::string, std::string>* meta_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path.string());
    if (detail::read_u32(is) != kArchiveMagic) throw data_error("bad magic in " + path.string());
    std::uint32_t ver = detail::read_u32(is);
    if (ver != kArchiveVersion) throw data_error("unsupported archive version in " + path.string());
    std::uint32_t nmeta = detail::read_u32(is);
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = detail::read_string(is);
        std::string v = detail::read_string(is);
        if (meta_out) (*meta_out)[k] = v;
    }
    std::uint32_t n = detail::read_u32(is);
    TensorMap tm;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = detail::read_string(is);
        std::uint32_t rank = detail::read_u32(is);
        if (rank > 8) throw data_error("archive tensor rank too large");
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
        std::uint64_t count = detail::read_u64(is);
        Tensor t(shape);
        if (count != static_cast<std::uint64_t>(t.numel())) throw data_error("archive shape/count mismatch");
        is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(count * sizeof(double)));
        if (!is) throw data_error("truncated archive: " + path.string());
        tm.items.emplace_back(std::move(name), std::move(t));
    }
    return tm;
}

inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    atomic_write(path, [&](std::ostream& os) { os << text; });
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace visrecon
