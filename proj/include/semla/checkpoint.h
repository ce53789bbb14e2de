//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "semla/model.h"
#include "semla/molecule.h"

namespace semla {
// Binary layout, all integers little-endian:
//
//   "SEMLA01"
//   repeated entry:
//     u32 name length, name bytes (UTF-8)
//     u8  dtype (0 = float64 tensor, 1 = UTF-8 text)
//     u32 rank, rank x u64 dims (text: rank 1, dim = byte count)
//     payload (row-major float64 or raw text)
//   u64 CRC-64/XZ over the concatenated payload bytes of every entry
//
// The first entry is "__meta__", a text block holding the vocabulary and the
// model config. Model tensors follow under their parameter names.
class CheckpointError: public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kCheckpointMagic = "SEMLA01";

struct Checkpoint {
  Vocabulary vocab;
  ModelParams params;
  std::string train_state;  // optional text entry "__train__"
  std::vector<std::pair<std::string, Tensor>> extra;  // e.g. optimizer moments
};

std::string encode_checkpoint(const Checkpoint &ckpt);

// Throws CheckpointError on bad magic, truncation, CRC mismatch, or tensors
// that do not match the stored config.
Checkpoint decode_checkpoint(std::string_view bytes);

// Stored CRC of an encoded checkpoint (the trailing 8 bytes).
std::uint64_t stored_crc(std::string_view bytes);

void save_checkpoint(const std::string &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::string &path);

// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out).
std::uint64_t crc64(std::string_view bytes);
}  // namespace semla
