// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bev {

/// CRC-32 (zlib polynomial) of a byte range.
std::uint32_t crc32_bytes(const void* data, std::size_t len);

/// SHA-256 hex digest of a byte string.
std::string sha256_hex(const std::string& bytes);

/// SHA-256 hex digest of a file's contents.
std::string sha256_file(const std::string& path);

} // namespace bev
