#pragma once

// PETRCKPT container: magic "PETRCKPT", u32 format version, then repeated
// records {name length u32, name bytes, rank u32, dims u32[], payload f64[]},
// everything little-endian. Also used to cache rendered image tensors.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "petr/common.hpp"
#include "petr/diffarray.hpp"

namespace petr {

constexpr std::uint32_t kCkptVersion = 1;

struct CkptRecord {
    std::string name;
    Shape dims;
    std::vector<double> data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

inline bool get_f64(std::istream& is, double& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
    return true;
}

}  // namespace detail

inline void save_records(const std::string& path, const std::vector<CkptRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("checkpoint: cannot open '" + path + "' for writing");
    os.write("PETRCKPT", 8);
    detail::put_u32(os, kCkptVersion);
    for (const auto& r : records) {
        detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(r.dims.size()));
        for (std::size_t d : r.dims) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (double v : r.data) detail::put_f64(os, v);
    }
    if (!os) throw ContractError("checkpoint: write to '" + path + "' failed");
}

inline std::vector<CkptRecord> load_records(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "PETRCKPT", 8) != 0) {
        throw ContractError("checkpoint: '" + path + "' has no PETRCKPT magic");
    }
    std::uint32_t version = 0;
    if (!detail::get_u32(is, version) || version != kCkptVersion) {
        throw ContractError("checkpoint: unsupported format version in '" + path + "'");
    }
    std::vector<CkptRecord> records;
    std::uint32_t name_len = 0;
    while (detail::get_u32(is, name_len)) {
        CkptRecord r;
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw ContractError("checkpoint: truncated record name");
        std::uint32_t rank = 0;
        if (!detail::get_u32(is, rank)) throw ContractError("checkpoint: truncated record rank");
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d = 0;
            if (!detail::get_u32(is, d)) throw ContractError("checkpoint: truncated record dims");
            r.dims.push_back(d);
            n *= d;
        }
        r.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (!detail::get_f64(is, r.data[i])) throw ContractError("checkpoint: truncated payload");
        }
        records.push_back(std::move(r));
    }
    return records;
}

inline void save_params(const std::string& path, const ParamSet& params) {
    std::vector<CkptRecord> records;
    records.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) {
        records.push_back(CkptRecord{params.names[i], params.arrays[i].shape(), params.arrays[i].vec()});
    }
    save_records(path, records);
}

inline void load_params(const std::string& path, ParamSet& params) {
    const auto records = load_records(path);
    if (records.size() != params.count()) {
        throw ContractError("checkpoint: '" + path + "' holds " + std::to_string(records.size()) +
                            " records, model has " + std::to_string(params.count()) + " parameters");
    }
    for (const auto& r : records) {
        Array* a = params.find(r.name);
        if (!a) throw ContractError("checkpoint: unknown parameter '" + r.name + "'");
        if (a->shape() != r.dims) {
            throw ContractError("checkpoint: parameter '" + r.name + "' shape " + shape_str(r.dims) +
                                " vs model " + shape_str(a->shape()));
        }
        a->vec() = r.data;
    }
}

}  // namespace petr
