// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "surgeon/model.hpp"

namespace surgeon {

// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

// SRGW container (little-endian): magic "SRGW", version u16 = 1,
// tensor-count u32; per tensor: name-length u16, UTF-8 name, dtype u8
// (0 = f32), rank u8, dims u32 each, raw little-endian f32 data; trailing
// CRC32 of all preceding bytes. Model topology and metadata ride along as
// ordinary f32 tensors under "meta." names.
std::vector<std::uint8_t> serialize_checkpoint(const ModelState& model);
ModelState parse_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace surgeon
