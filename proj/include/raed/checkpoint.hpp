// SPDX-License-Identifier: Apache-2.0
//
// Tensor container used for checkpoints and attention dumps.
//
// Layout, all integers little-endian:
//   "RAED" | u32 version (1) | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 rank | u64 dims[rank]
//               | float64 values
//   u64 CRC-64/XZ over every byte after the 12-byte header

#ifndef RAED_CHECKPOINT_HPP
#define RAED_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "raed/nn.hpp"
#include "raed/tensor.hpp"

namespace raed {

inline constexpr std::uint32_t kTensorFileVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::uint64_t crc64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_tensor_file(const NamedTensors& tensors);
NamedTensors decode_tensor_file(std::span<const std::uint8_t> bytes);

void write_tensor_file(const std::filesystem::path& path,
                       const NamedTensors& tensors);
NamedTensors read_tensor_file(const std::filesystem::path& path);

// Copies values into the existing tensors; names and shapes must match
// one to one.
void assign_parameters(ParameterTable& table, const NamedTensors& tensors);
NamedTensors snapshot(const ParameterTable& table);

// Whole-file helpers shared by the binary formats.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

}  // namespace raed

#endif  // RAED_CHECKPOINT_HPP
