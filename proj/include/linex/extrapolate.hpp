// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// Direct extrapolation between two checkpoints: weight-space projection
// producing a virtual lookahead checkpoint, and decode-time logit
// combination, plus sweep harnesses that evaluate both on held-out prompts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "linex/rlvr.hpp"
#include "linex/tensor_store.hpp"
#include "linex/toy_policy.hpp"

namespace linex {

struct ExtrapolationSpec {
    std::int64_t t0 = 0;
    std::int64_t t1 = 0;
    std::int64_t t_prime = 0;

    // (t_prime - t0) / (t1 - t0); > 1 extrapolates, anything else is flagged
    // as interpolation (useful for sanity checks, outside the lookahead
    // regime).
    double coefficient() const;
    bool interpolation() const { return coefficient() <= 1.0; }
    void validate() const;
};

// Per-parameter w' = w0 + c * (w1 - w0) in F64, stored back in the source
// dtype. c of exactly 0 or 1 copies the source values so the identity cases
// are bit-exact. Requires identical schemas.
Checkpoint extrapolate_checkpoint(const Checkpoint& c0, const Checkpoint& c1,
                                  std::uint64_t out_step, double coefficient);

struct WeightExtrapolationResult {
    std::filesystem::path checkpoint_path;
    std::filesystem::path metadata_path;  // JSON sidecar with provenance keys
    double coefficient = 0.0;
    bool interpolation = false;
};

// Extrapolates between trajectory checkpoints at steps t0 and t1, writes the
// result labeled with step t_prime, and a sidecar `<out>.meta.json` with
// keys extrap.t0, extrap.t1, extrap.beta, extrap.tool_version (the container
// format has no metadata section).
WeightExtrapolationResult extrapolate_weights(const Trajectory& traj,
                                              const ExtrapolationSpec& spec,
                                              const std::filesystem::path& out_path);

// l0 + alpha * (l1 - l0) elementwise; alpha of exactly 0 or 1 copies the
// respective source.
std::vector<double> combine_logits(std::span<const double> l0, std::span<const double> l1,
                                   double alpha);

// Decode with combined logits l = l0 + alpha * (l1 - l0) at every position:
// two forward passes per emitted token, then the same temperature/top-p
// sampler as plain decode, consuming one uniform draw per token so matched
// seeds line up with single-model decoding.
DecodeResult extrapolated_decode(const PolicyModel& m0, const PolicyModel& m1, double alpha,
                                 std::span<const int> prompt, const SamplingParams& params,
                                 std::uint64_t seed);

struct SweepPoint {
    std::uint64_t t_prime = 0;
    double mean_reward = 0.0;
    double stderr_reward = 0.0;
    int n = 0;
    bool failed = false;
    std::string error;
};

// Evaluates weight extrapolation from (t0, t1) at every grid step on
// held-out prompts. The grid must be sorted; duplicates are dropped with a
// warning. A failure at one point is recorded and the sweep continues.
std::vector<SweepPoint> sweep_weight_extrapolation(const Trajectory& traj, std::int64_t t0,
                                                   std::int64_t t1,
                                                   std::span<const std::int64_t> grid,
                                                   const TaskSpec& task, const EvalOptions& eopts,
                                                   const ModelLoadSpec& mls);

void write_weight_sweep_csv(const std::filesystem::path& path, std::span<const SweepPoint> points);

struct LogitComparePoint {
    std::uint64_t t0 = 0;
    std::uint64_t t1 = 0;
    double alpha = 0.0;
    double mean_reward_extrapolated = 0.0;
    double mean_reward_real_t1 = 0.0;
    double stderr_reward = 0.0;
    int n = 0;
    bool failed = false;
    std::string error;
};

// For each (t0, t1) pair and alpha, held-out reward of logit-extrapolated
// decoding next to the real t1 checkpoint's reward, with matched seeds and
// sample counts (alpha = 1 rows therefore equal the t1 column exactly).
std::vector<LogitComparePoint> compare_logit_extrapolation(
    const Trajectory& traj, std::span<const std::pair<std::int64_t, std::int64_t>> pairs,
    std::span<const double> alphas, const TaskSpec& task, const EvalOptions& eopts,
    const ModelLoadSpec& mls);

void write_logit_compare_csv(const std::filesystem::path& path,
                             std::span<const LogitComparePoint> points);

}  // namespace linex
