// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training run configuration: a small TOML-style file with sections
// [model], [task], [grpo], [schedule], [io], each key a scalar. Every field
// of the underlying config structs is representable.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "linex/rlvr.hpp"
#include "nlohmann/json.hpp"

namespace linex {

struct IoConfig {
    std::filesystem::path out_dir = "out";
    std::uint64_t steps = 400;
    std::uint64_t checkpoint_every = 20;
    std::uint64_t seed = 1;
    int threads = 0;  // 0: LINEX_THREADS or hardware
    std::string run_id = "run";
};

struct TrainConfig {
    ModelConfig model;
    TaskSpec task;
    GrpoConfig grpo;
    ScheduleSpec schedule;
    IoConfig io;
    bool model_seed_set = false;  // was model.seed given explicitly?

    // Unset model seed follows io.seed, so one --seed reproduced the whole
    // run; model init derives its own stream from it.
    void resolve_seeds();
    void validate() const;
};

// Parses the config file; unknown sections or keys, malformed scalars, and
// duplicate keys are ConfigErrors naming the line.
TrainConfig parse_train_config(const std::filesystem::path& path);
TrainConfig parse_train_config_text(std::string_view text, const std::string& where);

// Fully resolved config as JSON, enums by name (the RunManifest payload).
nlohmann::ordered_json train_config_json(const TrainConfig& cfg);

}  // namespace linex
