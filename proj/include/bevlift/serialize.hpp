// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>

#include "bevlift/tensor.hpp"

namespace bev {

// BEVT tensor blob: magic "BEVT", u8 rank, little-endian u32 extents,
// little-endian f32 payload, row-major.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

/// Serialized byte size of a tensor blob.
std::size_t tensor_blob_size(const Tensor& t);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace bev
