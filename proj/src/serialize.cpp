// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#include "bevlift/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace bev {

namespace {

constexpr char kMagic[4] = {'B', 'E', 'V', 'T'};

void write_u32le(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff),
                                static_cast<unsigned char>((v >> 16) & 0xff),
                                static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    const unsigned char rank = static_cast<unsigned char>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int i = 0; i < t.rank(); ++i) write_u32le(os, static_cast<std::uint32_t>(t.dim(i)));
    static_assert(sizeof(float) == 4);
    // Little-endian host assumed; the payload is memcpy'd as-is.
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * 4));
    if (!os) throw std::runtime_error("bevt: write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bevt: bad magic bytes (not a BEVT blob)");
    unsigned char rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is || rank == 0 || rank > 8) throw std::runtime_error("bevt: invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
        const std::uint32_t v = read_u32le(is);
        if (!is || v == 0 || v > (1u << 30)) throw std::runtime_error("bevt: invalid extent");
        d = static_cast<int>(v);
    }
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
    if (!is) throw std::runtime_error("bevt: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

std::size_t tensor_blob_size(const Tensor& t) {
    return 4 + 1 + static_cast<std::size_t>(t.rank()) * 4 + static_cast<std::size_t>(t.numel()) * 4;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("bevt: cannot open " + path + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("bevt: cannot open " + path);
    return read_tensor(is);
}

} // namespace bev
