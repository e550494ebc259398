// Binary checkpoint:
//
//   "AFRD" | u32 version
//   | u32 length, model config text (key = value lines)
//   | u32 length, metadata text (optimizer step)
//   | u32 entry count
//   | entries: u32 name length, name, u8 dtype (0 = float32), u32 rank, u32 dims...
//   | raw little-endian float32 blobs in entry order
//
// Entries hold every model parameter and buffer in AfrdModel::named_tensors()
// order, followed by optional AdamW moments named "adamw.m.<param>" and
// "adamw.v.<param>".
#pragma once

#include <optional>
#include <string>

#include "afrd/model.hpp"
#include "afrd/train.hpp"

AFRD_BEGIN_NAMESPACE

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    AfrdModel model;
    std::optional<AdamState> optimizer;
};

std::string encode_checkpoint(const AfrdModel& model, const AdamState* optimizer = nullptr);
LoadedCheckpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const AfrdModel& model, const AdamState* optimizer, const std::string& path);
/// Throws FormatError on bad magic, version, truncation or layout mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path);

AFRD_END_NAMESPACE
