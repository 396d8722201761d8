// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory:
//   manifest.json  {"format": "hipo-ckpt-1", "config": {...},
//                   "tensors": [{"name", "shape", "dtype": "f32", "byte_offset"}]}
//   params.bin     little-endian f32 values, tensors concatenated in manifest order
//
// Parameters are stored in single precision. Values that are already
// f32-representable (everything the trainer produces) round-trip exactly.

#pragma once

#include <filesystem>
#include <string>

#include "hipo/error.hpp"
#include "hipo/lm.hpp"

namespace hipo::ckpt {

inline constexpr const char* kFormat = "hipo-ckpt-1";

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};

void save_checkpoint(const lm::Model& model, const std::filesystem::path& dir);
// Throws ParseError for an unreadable manifest, VersionError, ShapeError, or
// TruncatedError.
lm::Model load_checkpoint(const std::filesystem::path& dir);

// Lowercase hex SHA-256 of manifest.json followed by params.bin.
std::string checkpoint_checksum(const std::filesystem::path& dir);
std::string sha256_hex(std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace hipo::ckpt
