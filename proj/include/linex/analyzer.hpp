// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// Trajectory analysis: per-parameter linearity of weights across
// checkpoints, probe-token log-probability tracking with categorization,
// per-layer activation linearity, and the first/second-order decomposition
// of layer output change.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "linex/linfit.hpp"
#include "linex/rlvr.hpp"
#include "linex/tensor_store.hpp"
#include "linex/toy_policy.hpp"

namespace linex {

// Deterministic sub-sampling: identical (fraction, seed, schema) give
// identical index sets.
struct SamplingPlan {
    double fraction = 0.001;
    std::uint64_t seed = 0;
    bool per_tensor = true;  // sample independently within each tensor

    void validate() const;
};

// Sorted distinct indices into [0, numel); count = clamp(round(fraction *
// numel), 1, numel). Keyed by the plan seed and the tensor name.
std::vector<std::uint64_t> sampled_indices(const SamplingPlan& plan, std::string_view name,
                                           std::uint64_t numel);

std::vector<double> r2_histogram_edges();  // 0.0 to 1.0 in steps of 0.05

// ---------------------------------------------------------------- weights

struct WeightFitRow {
    std::string tensor;
    std::uint64_t index = 0;
    FitResult fit;
};

struct GroupAggregate {
    std::string name;  // tensor or tap
    std::uint64_t sampled = 0;
    std::uint64_t filtered = 0;   // includes constants
    std::uint64_t constant = 0;
    double mean_r2 = 0.0;  // over surviving series; nan when none survive
    double fraction_above_threshold = 0.0;
};

struct WeightAnalysis {
    std::vector<WeightFitRow> rows;
    std::vector<GroupAggregate> tensors;
    HistogramSummary hist;
    std::vector<std::uint64_t> steps;  // checkpoint steps used (after warmup cut)
    bool few_checkpoints = false;      // exactly 2 checkpoints: r2 is trivially 1
    std::uint64_t warmup_steps = 0;
};

// One streaming pass per checkpoint; series are sampled per tensor by the
// plan and fit against the true global step.
WeightAnalysis analyze_weights(const Trajectory& traj, const SamplingPlan& plan,
                               const FilterPolicy& filter, std::uint64_t warmup_steps,
                               int threads);

void write_weight_fits_csv(const std::filesystem::path& path, std::span<const WeightFitRow> rows);
void write_layer_summary_csv(const std::filesystem::path& path,
                             std::span<const GroupAggregate> tensors);
void write_weight_summary_json(const std::filesystem::path& path, const WeightAnalysis& wa,
                               const SamplingPlan& plan, const FilterPolicy& filter);

// ----------------------------------------------------------------- probes

// A probe is a fixed token sequence; log-probabilities are tracked for
// positions [track_from, tokens.size()) (the generated part when the probe
// came from a decode).
struct Probe {
    std::vector<int> tokens;
    std::size_t track_from = 1;
};

struct ProbeGenOptions {
    int n_prompts = 8;
    int samples_per_prompt = 16;
    double temperature = 1.0;
    double top_p = 1.0;
    std::uint64_t seed = 4242;
};

// Samples prompts from the task and decodes completions with the given
// model (conventionally the step-0 checkpoint), yielding prompt+completion
// probes that track the generated positions.
std::vector<Probe> generate_probes(const PolicyModel& model, const TaskSpec& task,
                                   const ProbeGenOptions& opts);

struct LogprobMatrix {
    struct Row {
        int token_id = 0;
        std::string token_str;
        int pos = 0;  // position within its probe sequence
    };
    std::vector<Row> rows;
    std::vector<std::uint64_t> steps;
    std::vector<double> values;  // rows x steps, row-major

    double at(std::size_t r, std::size_t s) const { return values[r * steps.size() + s]; }
};

// Teacher-forced log p(x_i | x_<i) for every tracked probe position, one
// column per checkpoint at or after warmup_steps, raw log-softmax
// (temperature 1).
LogprobMatrix probe_logprobs(const Trajectory& traj, const std::vector<Probe>& probes,
                             const ModelLoadSpec& mls, std::uint64_t warmup_steps, int threads);

void export_logprob_matrix(const LogprobMatrix& m, const std::filesystem::path& path);
LogprobMatrix import_logprob_matrix(const std::filesystem::path& path);

enum class TokenCategory { ConnectorLinear, Volatile, Stable };
std::string token_category_name(TokenCategory c);

struct TokenFitRow {
    LogprobMatrix::Row row;
    FitResult fit;
    double std_logprob = 0.0;  // population std across steps
    TokenCategory category = TokenCategory::Stable;
};

struct TokenAnalysis {
    std::vector<TokenFitRow> rows;
    double var_threshold = 0.0;  // echoed thresholds
    double r2_threshold = 0.0;
    std::uint64_t n_stable = 0;
    std::uint64_t n_connector_linear = 0;
    std::uint64_t n_volatile = 0;
};

// STABLE when std(logprob) < var_threshold; otherwise CONNECTOR_LINEAR when
// r2 > r2_threshold, else VOLATILE. Needs >= 3 steps.
TokenAnalysis categorize_tokens(const LogprobMatrix& m, double var_threshold = 0.1,
                                double r2_threshold = kR2Threshold);

void write_token_fits_csv(const std::filesystem::path& path, const TokenAnalysis& ta);
void write_token_summary_json(const std::filesystem::path& path, const TokenAnalysis& ta);

// ------------------------------------------------------------ activations

struct ActivationFitRow {
    std::string tap;
    int probe = 0;
    int pos = 0;    // sequence position
    int coord = 0;  // coordinate within the tapped vector
    FitResult fit;
};

struct ActivationAnalysis {
    std::vector<ActivationFitRow> rows;
    std::vector<GroupAggregate> taps;
    HistogramSummary hist;
    std::vector<std::uint64_t> steps;
    bool few_checkpoints = false;
};

// Fits tapped activation coordinates (sampled per tap and probe by the
// plan) across checkpoints, grouped per layer tap.
ActivationAnalysis analyze_activations(const Trajectory& traj, const std::vector<Probe>& probes,
                                       const std::vector<std::string>& taps,
                                       const SamplingPlan& plan, const FilterPolicy& filter,
                                       const ModelLoadSpec& mls, std::uint64_t warmup_steps,
                                       int threads);

void write_activation_fits_csv(const std::filesystem::path& path,
                               std::span<const ActivationFitRow> rows);
void write_activation_summary_json(const std::filesystem::path& path,
                                   const ActivationAnalysis& aa, const SamplingPlan& plan);

// --------------------------------------------------------- decomposition

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;  // row-major

    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

// Euclidean norms of the exact split y1 - y0 = dW x0 + W0 dx + dW dx.
struct DecompositionReport {
    double first_order_weight = 0.0;  // |dW x0|
    double first_order_input = 0.0;   // |W0 dx|
    double second_order = 0.0;        // |dW dx|
    double total = 0.0;               // |y1 - y0|
    double residual = 0.0;            // |identity residual|, 0 up to roundoff
};

DecompositionReport decompose_output_change(const Matrix& w0, const Matrix& w1,
                                            std::span<const double> x0,
                                            std::span<const double> x1);

struct DecompositionRow {
    int probe = 0;
    int pos = 0;
    DecompositionReport rep;
    double ratio_second_to_first = 0.0;  // second order over summed first order
};

// Applies the decomposition to one block's MLP input matrix between two
// checkpoints, per probe position.
std::vector<DecompositionRow> decompose_trajectory(const Trajectory& traj, std::int64_t t0,
                                                   std::int64_t t1,
                                                   const std::vector<Probe>& probes, int layer,
                                                   const ModelLoadSpec& mls);

void write_decomposition_csv(const std::filesystem::path& path,
                             std::span<const DecompositionRow> rows);

}  // namespace linex
