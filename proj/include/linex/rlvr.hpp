// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale RLVR: verifiable synthetic tasks, GRPO with group-normalized
// advantages and a token-level clipped surrogate, and an interleaved
// training schedule that alternates m gradient steps with n gradient-free
// extrapolation steps per cycle.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "linex/common.hpp"
#include "linex/rng.hpp"
#include "linex/tensor_store.hpp"
#include "linex/toy_policy.hpp"

namespace linex {

// Vocabulary layout shared by all tasks. Tokens 0..9 are the digits.
constexpr int kTokPlus = 10;
constexpr int kTokTimes = 11;
constexpr int kTokEquals = 12;
constexpr int kTokEos = 13;
constexpr int kTokBos = 14;
constexpr int kTokReverse = 15;
constexpr int kTaskVocabSize = 24;  // 16..23 reserved, never emitted by tasks

std::string token_str(int token);
std::string render_tokens(std::span<const int> tokens);

enum class TaskKind { ModArith, SeqCopy };

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(std::string_view name);

// A verifiable task: prompts are sampled, completions scored 0/1 by a pure
// function of (prompt, completion).
struct TaskSpec {
    TaskKind kind = TaskKind::ModArith;
    int modulus = 17;     // ModArith: operands in [0, modulus)
    int min_copy_len = 2; // SeqCopy digit-string length bounds
    int max_copy_len = 5;

    void validate() const;
    std::vector<int> sample_prompt(Rng& rng) const;
    std::vector<int> expected_completion(std::span<const int> prompt) const;
    int verify(std::span<const int> prompt, std::span<const int> completion) const;
    int max_prompt_tokens() const;
    int max_completion_tokens() const;
};

// Rebuilds the task a trajectory was trained on from its manifest metadata.
TaskSpec task_from_metadata(const Trajectory& traj);

struct GrpoConfig {
    int group_size = 16;
    int prompts_per_batch = 64;
    double clip_lo = 0.8;
    double clip_hi = 1.28;
    double temperature = 1.0;
    double lr = 1e-4;
    double adv_epsilon = 1e-6;
    int minibatch_epochs = 1;

    void validate() const;
};

enum class AnchorMode { Chain, LastGradPair };
enum class ExtraAdamMode { Freeze, Reset };

std::string anchor_mode_name(AnchorMode m);
AnchorMode anchor_mode_from_name(std::string_view name);
std::string extra_adam_mode_name(ExtraAdamMode m);
ExtraAdamMode extra_adam_mode_from_name(std::string_view name);

// Cycle of m gradient steps followed by n extrapolation steps. With n = 0
// this is plain GRPO. During extrapolation, W_{k+1} = W_{k-1} +
// beta * (W_k - W_{k-1}); `anchor` picks what counts as the (k-1, k) pair
// once several extrapolation steps run back to back:
//   Chain        - the two most recent states, extrapolated or not.
//   LastGradPair - always the states before/after the last gradient step,
//                  with the coefficient growing so that beta = 2 matches
//                  Chain exactly.
struct ScheduleSpec {
    int m = 1;
    int n = 0;
    double beta = 2.0;
    AnchorMode anchor = AnchorMode::Chain;
    ExtraAdamMode extra_adam = ExtraAdamMode::Freeze;

    int cycle() const { return m + n; }
    bool is_grad_step(std::uint64_t k) const {
        return static_cast<int>(k % static_cast<std::uint64_t>(cycle())) < m;
    }
    void validate() const;
};

struct RolloutSample {
    std::vector<int> completion;   // includes the stop token when emitted
    std::vector<double> logprobs;  // behavior-policy logprob per token
    int reward = 0;
    double advantage = 0.0;
};

struct RolloutGroup {
    std::vector<int> prompt;
    std::vector<RolloutSample> samples;
};

// G independent completions of one prompt at the given temperature, each
// scored by the task verifier. Sample g decodes with derive_seed(seed, g).
RolloutGroup rollout_group(const PolicyModel& model, const TaskSpec& task,
                           std::span<const int> prompt, int group_size, double temperature,
                           std::uint64_t seed);

// A_i = (r_i - mean(r)) / (pop_std(r) + adv_epsilon).
std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_epsilon);

// One batch of rollout groups for global step `step`, sampled from seeds
// derived as (run_seed, step, prompt_index). Parallel across prompts;
// results independent of thread count.
std::vector<RolloutGroup> sample_batch(const PolicyModel& model, const TaskSpec& task,
                                       const GrpoConfig& cfg, std::uint64_t run_seed,
                                       std::uint64_t step, int threads);

struct StepMetrics {
    std::uint64_t step = 0;
    std::string phase;  // "GRAD" or "EXTRA"
    double mean_reward = 0.0;
    double clip_frac = 0.0;
    double grad_norm = 0.0;
    double mean_abs_dw = 0.0;
    double wall_ms = 0.0;
    // In-memory extras, not part of the metrics CSV.
    double surrogate = 0.0;     // clipped-surrogate value (last epoch)
    double update_ratio = 0.0;  // mean_abs_dw / lr
    double grad_cos = 0.0;      // cosine with previous GRAD-step gradient
};

// Token-level clipped surrogate over an explicit batch:
//   mean over completion tokens of min(rho * A, clip(rho, lo, hi) * A),
//   rho = exp(lp_new - lp_old).
// Advantages are computed per group internally. One Adam update per epoch
// (minimizing the negated surrogate). grad_out, when given, receives the
// last epoch's loss gradient.
StepMetrics grpo_step(PolicyModel& model, AdamState& adam, std::span<const RolloutGroup> batch,
                      const GrpoConfig& cfg, int threads, Gradients* grad_out = nullptr);

// Scalar surrogate over flat token arrays; the clip accounting used by
// grpo_step, exposed for direct checks.
struct SurrogateValue {
    double value = 0.0;
    double clip_frac = 0.0;
    std::size_t n_tokens = 0;
};
SurrogateValue clipped_surrogate(std::span<const double> lp_new, std::span<const double> lp_old,
                                 std::span<const double> advantages, double clip_lo,
                                 double clip_hi);

struct TrainOptions {
    std::uint64_t total_steps = 400;
    std::uint64_t checkpoint_every = 20;
    std::uint64_t seed = 1;
    int threads = 0;  // 0: LINEX_THREADS or hardware
    std::filesystem::path out_dir;
    std::string run_id = "run";
    bool quiet = true;  // when false, prints one progress line per step
};

struct TrainResult {
    Trajectory trajectory;
    std::vector<StepMetrics> metrics;
    std::filesystem::path trajectory_path;
    std::filesystem::path metrics_path;
};

// Runs the interleaved schedule for total_steps global steps, checkpointing
// at step 0, every checkpoint_every steps, and at the end, with true global
// step indices. Metrics CSV gets one row per step; EXTRA rows carry nan for
// reward/clip/grad columns. The previous-step weights are retained across
// the run to serve as the extrapolation anchor.
TrainResult train(const ModelConfig& mcfg, const TaskSpec& task, const GrpoConfig& gcfg,
                  const ScheduleSpec& schedule, const TrainOptions& opts);

// In-place extrapolation transition W_next = prev + beta * (cur - prev) in
// F64, stored back to F32. Returns mean |W_next - cur|.
double extrapolation_transition(std::span<const float> prev, std::span<const float> cur,
                                double beta, std::span<float> out);

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> rows);
std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path);

struct EvalOptions {
    int n_prompts = 64;
    int samples_per_prompt = 4;
    double temperature = 1.0;
    double top_p = 1.0;
    std::uint64_t seed = 9001;
    int threads = 0;
};

struct EvalResult {
    double mean_reward = 0.0;
    double stderr_reward = 0.0;
    int n = 0;
};

// Decode callback used so extrapolated decoders share the same held-out
// prompts and per-sample seeds as plain model evaluation.
using DecodeFn = std::function<DecodeResult(std::span<const int> prompt,
                                            const SamplingParams& params, std::uint64_t seed)>;

EvalResult evaluate_decoder(const DecodeFn& decoder, const TaskSpec& task,
                            const EvalOptions& opts);
EvalResult evaluate_policy(const PolicyModel& model, const TaskSpec& task,
                           const EvalOptions& opts);

// Windowed stability of the training signal over GRAD steps: mean cosine
// between successive batch gradients and the coefficient of variation of
// per-step mean |dw|. Requires at least two full windows.
struct StabilityWindow {
    int index = 0;
    std::uint64_t start_step = 0;
    std::uint64_t end_step = 0;
    int n_steps = 0;
    double mean_cosine = 0.0;
    double cv_abs_dw = 0.0;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);
std::vector<double> successive_cosines(const std::vector<std::vector<double>>& grads);
std::vector<StabilityWindow> gradient_stability(std::span<const StepMetrics> metrics, int window);
void write_stability_csv(const std::filesystem::path& path,
                         std::span<const StabilityWindow> windows);

}  // namespace linex
