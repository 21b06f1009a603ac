// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny decoder-only transformer: F32 parameter storage, all math and
// activations in F64 with a fixed accumulation order. Gradients are exact
// reverse-mode derivatives of a weighted token log-probability objective.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "linex/common.hpp"
#include "linex/rng.hpp"
#include "linex/tensor_store.hpp"

namespace linex {

struct ModelConfig {
    int vocab_size = 24;
    int context_len = 32;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    double ln_eps = 1e-5;
    std::uint64_t seed = 0;

    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

struct ParamTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> v;
};

class PolicyModel {
  public:
    static PolicyModel init(const ModelConfig& cfg);

    // Architecture dims come from tensor shapes; n_heads is not recoverable
    // from shapes and must be supplied (trajectory metadata carries it).
    static PolicyModel from_checkpoint(const CheckpointReader& reader, int n_heads,
                                       double ln_eps = 1e-5);
    static PolicyModel from_checkpoint(const Checkpoint& ckpt, int n_heads,
                                       double ln_eps = 1e-5);

    const ModelConfig& config() const { return cfg_; }
    std::vector<ParamTensor>& tensors() { return params_; }
    const std::vector<ParamTensor>& tensors() const { return params_; }
    ParamTensor& tensor(std::string_view name);
    const ParamTensor& tensor(std::string_view name) const;
    std::size_t param_count() const;

    Checkpoint to_checkpoint(std::uint64_t step) const;

    // Flat parameter vector in tensor order, for snapshot/extrapolation math.
    std::vector<float> snapshot() const;
    void load_snapshot(std::span<const float> flat);

  private:
    ModelConfig cfg_;
    std::vector<ParamTensor> params_;
    std::map<std::string, std::size_t, std::less<>> index_;

    void rebuild_index();
    friend PolicyModel make_model_shell(const ModelConfig&);
};

// Model reconstruction parameters that tensor shapes alone cannot supply,
// resolved from trajectory metadata with an optional override.
struct ModelLoadSpec {
    int n_heads = 0;
    double ln_eps = 1e-5;
};
ModelLoadSpec resolve_model_load(const Trajectory& traj, int n_heads_override = 0);

// Canonical names of all activation taps exposed to analysis: per-block
// residual outputs plus final logits.
std::vector<std::string> valid_taps(const ModelConfig& cfg);

struct ForwardResult {
    std::vector<double> logits;                       // [T x V] row-major
    std::map<std::string, std::vector<double>> taps;  // requested taps only
};

// Causal forward over the whole sequence. Tap names: "blk{i}.out",
// "logits", and the internal "blk{i}.mlp_in" (MLP input, post-LN).
ForwardResult forward(const PolicyModel& model, std::span<const int> tokens,
                      const std::vector<std::string>* taps = nullptr);

struct Gradients {
    std::vector<std::vector<double>> g;  // parallel to model.tensors()

    static Gradients zeros_like(const PolicyModel& model);
    void accumulate(const Gradients& other);
    void scale(double s);
    double squared_norm() const;
    std::vector<double> flatten() const;
};

// Objective: sum over positions i >= 1 of weights[i] * log p(tokens[i] |
// tokens[<i]), with p the softmax of logits / temperature. weights.size()
// == tokens.size(); weights[0] is ignored. Returns the objective value and
// adds d(objective)/d(params) into *out.
double backward(const PolicyModel& model, std::span<const int> tokens,
                std::span<const double> weights, Gradients* out, double temperature = 1.0);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 1e-4;
    std::uint64_t step_count = 0;
    std::vector<std::vector<double>> m, v;

    static AdamState init(const PolicyModel& model, double lr);
};

struct AdamStepStats {
    double mean_abs_dw = 0.0;
    double max_abs_dw = 0.0;
};

// Standard Adam with bias correction, minimizing: w -= lr * m_hat /
// (sqrt(v_hat) + eps). Rejects non-finite gradients without touching state.
AdamStepStats adam_step(PolicyModel& model, const Gradients& grads, AdamState& state);

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 1.0;
    int max_new = 16;
    int stop_token = -1;  // emitted and then decoding stops; -1 disables
};

struct DecodeResult {
    std::vector<int> tokens;       // generated tokens only
    std::vector<double> logprobs;  // pre-truncation log-softmax of each token
};

DecodeResult decode(const PolicyModel& model, std::span<const int> prompt,
                    const SamplingParams& params, std::uint64_t seed);

// Temperature + nucleus sampling from one logit vector. Consumes exactly one
// uniform draw, so matched seeds stay aligned across decoders.
int sample_from_logits(std::span<const double> logits, double temperature, double top_p, Rng& rng,
                       double* logprob_out);

// log softmax(logits / temperature)[token], computed with the same operation
// order as sample_from_logits so teacher-forced values match decoded ones
// bit for bit.
double token_logprob(std::span<const double> logits, int token, double temperature);

// Process-wide call counters (compute-contract assertions).
std::uint64_t forward_call_count();
std::uint64_t backward_call_count();

}  // namespace linex
