// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// LNXT checkpoint container, little-endian throughout:
//
//   magic "LNXT" (4C 4E 58 54) | u32 version=1 | u64 step | u64 tensor_count
//   per tensor, sorted by name:
//     u32 name_len | name bytes | u8 dtype {0=F32,1=F64,2=BF16} | u8 rank
//     rank x u64 dims | u64 data offset (absolute) | u64 data length
//   zero padding to a 64-byte boundary, then payloads in table order,
//   each payload start 64-byte aligned.
//
// Values live in memory as F64; storage dtype only affects the bytes on
// disk. Reads widen losslessly and touch only the requested tensor.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "linex/common.hpp"

namespace linex {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, BF16 = 2 };

std::size_t element_size(DType dtype);
const char* dtype_name(DType dtype);
DType dtype_from_name(std::string_view name);

// Round-to-nearest-even of the top 16 bits of the F32 representation.
std::uint16_t f32_to_bf16(float v);
float bf16_to_f32(std::uint16_t bits);

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> dims;  // empty = scalar (rank 0, one element)
    std::uint64_t data_offset = 0;
    std::uint64_t data_len = 0;

    std::uint64_t numel() const;
};

struct TensorData {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;

    std::uint64_t numel() const;
};

struct Checkpoint {
    std::uint64_t step = 0;
    std::vector<TensorData> tensors;

    const TensorData* find(std::string_view name) const;
};

// Sorts tensors by name, validates finiteness and uniqueness, writes the
// container. Two writes of the same checkpoint are byte-identical.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Header-only open; payload reads are per-tensor and open their own stream,
// so one reader can serve concurrent read_values calls.
class CheckpointReader {
  public:
    explicit CheckpointReader(const std::filesystem::path& path);

    std::uint64_t step() const { return step_; }
    const std::vector<TensorMeta>& tensors() const { return metas_; }
    const TensorMeta* find(std::string_view name) const;

    // Widened to F64. Memory bound: O(one tensor), not O(file).
    std::vector<double> read_values(std::string_view name) const;

    Checkpoint read_all() const;

  private:
    std::filesystem::path path_;
    std::uint64_t step_ = 0;
    std::vector<TensorMeta> metas_;
};

struct TrajectoryEntry {
    std::uint64_t step = 0;
    std::string file;  // relative to the manifest directory
};

struct Trajectory {
    std::string run_id;
    std::vector<TrajectoryEntry> entries;
    std::map<std::string, std::string> metadata;
    std::filesystem::path base_dir;

    std::filesystem::path checkpoint_path(std::size_t i) const;
    const TrajectoryEntry* find_step(std::uint64_t step) const;
    std::optional<std::string> metadata_value(const std::string& key) const;
};

// Parses trajectory.json, checks steps strictly increasing, all files
// present, and an identical tensor name/shape schema across checkpoints.
Trajectory load_trajectory(const std::filesystem::path& manifest_path);

void save_trajectory(const Trajectory& traj, const std::filesystem::path& manifest_path);

}  // namespace linex
