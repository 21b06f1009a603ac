// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/extrapolate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "linex/csv.hpp"

namespace linex {

namespace {

constexpr double kQNan = std::numeric_limits<double>::quiet_NaN();

const Checkpoint load_step(const Trajectory& traj, std::int64_t step) {
    const TrajectoryEntry* entry = traj.find_step(static_cast<std::uint64_t>(step));
    if (!entry) {
        std::string steps;
        for (const auto& e : traj.entries) {
            if (!steps.empty()) steps += ", ";
            steps += std::to_string(e.step);
        }
        throw ConfigError("trajectory has no checkpoint at step " + std::to_string(step) +
                          " (available: " + steps + ")");
    }
    return CheckpointReader(traj.base_dir / entry->file).read_all();
}

void check_same_config(const PolicyModel& a, const PolicyModel& b) {
    const auto& x = a.config();
    const auto& y = b.config();
    if (x.vocab_size != y.vocab_size || x.context_len != y.context_len ||
        x.d_model != y.d_model || x.n_heads != y.n_heads || x.n_layers != y.n_layers ||
        x.ln_eps != y.ln_eps)
        throw ConfigError("the two models have different architectures");
}

}  // namespace

double ExtrapolationSpec::coefficient() const {
    return static_cast<double>(t_prime - t0) / static_cast<double>(t1 - t0);
}

void ExtrapolationSpec::validate() const {
    if (t0 < 0 || t1 < 0 || t_prime < 0) throw ConfigError("checkpoint steps must be >= 0");
    if (t1 <= t0)
        throw ConfigError("need t1 > t0, got t0=" + std::to_string(t0) +
                          " t1=" + std::to_string(t1));
}

Checkpoint extrapolate_checkpoint(const Checkpoint& c0, const Checkpoint& c1,
                                  std::uint64_t out_step, double coefficient) {
    if (!std::isfinite(coefficient)) throw NumericError("non-finite extrapolation coefficient");
    if (c0.tensors.size() != c1.tensors.size())
        throw FormatError("schema mismatch: " + std::to_string(c0.tensors.size()) + " vs " +
                          std::to_string(c1.tensors.size()) + " tensors");
    Checkpoint out;
    out.step = out_step;
    std::string bad;
    for (const auto& t0 : c0.tensors) {
        const TensorData* t1 = c1.find(t0.name);
        if (!t1 || t1->dims != t0.dims || t1->dtype != t0.dtype)
            throw FormatError("schema mismatch at tensor " + t0.name);
        TensorData t;
        t.name = t0.name;
        t.dtype = t0.dtype;
        t.dims = t0.dims;
        if (coefficient == 0.0) {
            t.values = t0.values;
        } else if (coefficient == 1.0) {
            t.values = t1->values;
        } else {
            t.values.resize(t0.values.size());
            bool finite = true;
            for (std::size_t i = 0; i < t.values.size(); ++i) {
                const double v = t0.values[i] + coefficient * (t1->values[i] - t0.values[i]);
                if (!std::isfinite(v)) finite = false;
                t.values[i] = v;
            }
            if (!finite) {
                if (!bad.empty()) bad += ", ";
                bad += t0.name;
            }
        }
        out.tensors.push_back(std::move(t));
    }
    if (!bad.empty())
        throw NumericError("extrapolation produced non-finite values in tensors: " + bad);
    return out;
}

WeightExtrapolationResult extrapolate_weights(const Trajectory& traj,
                                              const ExtrapolationSpec& spec,
                                              const std::filesystem::path& out_path) {
    spec.validate();
    const Checkpoint c0 = load_step(traj, spec.t0);
    const Checkpoint c1 = load_step(traj, spec.t1);
    const double coeff = spec.coefficient();
    const Checkpoint out =
        extrapolate_checkpoint(c0, c1, static_cast<std::uint64_t>(spec.t_prime), coeff);
    write_checkpoint(out, out_path);

    WeightExtrapolationResult res;
    res.checkpoint_path = out_path;
    res.metadata_path = out_path.string() + ".meta.json";
    res.coefficient = coeff;
    res.interpolation = spec.interpolation();
    nlohmann::ordered_json meta;
    meta["extrap.t0"] = spec.t0;
    meta["extrap.t1"] = spec.t1;
    meta["extrap.beta"] = coeff;
    meta["extrap.tool_version"] = kToolVersion;
    std::ofstream f(res.metadata_path);
    if (!f) throw IoError("cannot open for writing: " + res.metadata_path.string());
    f << meta.dump(2) << '\n';
    if (!f) throw IoError("write failure: " + res.metadata_path.string());
    return res;
}

std::vector<double> combine_logits(std::span<const double> l0, std::span<const double> l1,
                                   double alpha) {
    if (l0.size() != l1.size())
        throw ConfigError("logit vectors must have equal length, got " +
                          std::to_string(l0.size()) + " and " + std::to_string(l1.size()));
    std::vector<double> out(l0.size());
    if (alpha == 0.0) {
        std::copy(l0.begin(), l0.end(), out.begin());
    } else if (alpha == 1.0) {
        std::copy(l1.begin(), l1.end(), out.begin());
    } else {
        for (std::size_t j = 0; j < l0.size(); ++j) {
            out[j] = l0[j] + alpha * (l1[j] - l0[j]);
            if (!std::isfinite(out[j]))
                throw NumericError("non-finite combined logit for token " + std::to_string(j));
        }
    }
    return out;
}

DecodeResult extrapolated_decode(const PolicyModel& m0, const PolicyModel& m1, double alpha,
                                 std::span<const int> prompt, const SamplingParams& params,
                                 std::uint64_t seed) {
    check_same_config(m0, m1);
    if (!std::isfinite(alpha)) throw NumericError("non-finite alpha");
    const auto& cfg = m0.config();
    if (static_cast<int>(prompt.size()) >= cfg.context_len)
        throw ConfigError("prompt of length " + std::to_string(prompt.size()) +
                          " leaves no room to generate within context_len " +
                          std::to_string(cfg.context_len));

    Rng rng(seed);
    std::vector<int> tokens(prompt.begin(), prompt.end());
    const int V = cfg.vocab_size;
    DecodeResult result;
    for (int step = 0; step < params.max_new; ++step) {
        const ForwardResult f0 = forward(m0, tokens);
        const ForwardResult f1 = forward(m1, tokens);
        const std::size_t off = (tokens.size() - 1) * static_cast<std::size_t>(V);
        const auto combined =
            combine_logits(std::span<const double>(f0.logits.data() + off, V),
                           std::span<const double>(f1.logits.data() + off, V), alpha);
        double lp = 0.0;
        const int tok = sample_from_logits(combined, params.temperature, params.top_p, rng, &lp);
        tokens.push_back(tok);
        result.tokens.push_back(tok);
        result.logprobs.push_back(lp);
        if (tok == params.stop_token) break;
        if (static_cast<int>(tokens.size()) >= cfg.context_len) break;
    }
    return result;
}

std::vector<SweepPoint> sweep_weight_extrapolation(const Trajectory& traj, std::int64_t t0,
                                                   std::int64_t t1,
                                                   std::span<const std::int64_t> grid,
                                                   const TaskSpec& task, const EvalOptions& eopts,
                                                   const ModelLoadSpec& mls) {
    if (grid.empty()) throw ConfigError("empty extrapolation grid");
    if (!std::is_sorted(grid.begin(), grid.end()))
        throw ConfigError("extrapolation grid must be sorted ascending");
    if (t1 <= t0)
        throw ConfigError("need t1 > t0, got t0=" + std::to_string(t0) +
                          " t1=" + std::to_string(t1));
    std::vector<std::int64_t> targets(grid.begin(), grid.end());
    const auto last = std::unique(targets.begin(), targets.end());
    if (last != targets.end()) {
        std::fprintf(stderr, "warning: %zu duplicate grid entries dropped\n",
                     static_cast<std::size_t>(targets.end() - last));
        targets.erase(last, targets.end());
    }
    const Checkpoint c0 = load_step(traj, t0);
    const Checkpoint c1 = load_step(traj, t1);

    std::vector<SweepPoint> points;
    for (const std::int64_t tp : targets) {
        SweepPoint pt;
        pt.t_prime = static_cast<std::uint64_t>(tp);
        try {
            ExtrapolationSpec spec{t0, t1, tp};
            const Checkpoint ck = extrapolate_checkpoint(
                c0, c1, static_cast<std::uint64_t>(tp), spec.coefficient());
            const PolicyModel model = PolicyModel::from_checkpoint(ck, mls.n_heads, mls.ln_eps);
            const EvalResult ev = evaluate_policy(model, task, eopts);
            pt.mean_reward = ev.mean_reward;
            pt.stderr_reward = ev.stderr_reward;
            pt.n = ev.n;
        } catch (const std::exception& e) {
            pt.failed = true;
            pt.error = e.what();
            pt.mean_reward = kQNan;
            pt.stderr_reward = kQNan;
            std::fprintf(stderr, "warning: grid point %lld failed: %s\n",
                         static_cast<long long>(tp), e.what());
        }
        points.push_back(std::move(pt));
    }
    return points;
}

void write_weight_sweep_csv(const std::filesystem::path& path,
                            std::span<const SweepPoint> points) {
    CsvWriter w(path);
    w.row({"t_prime", "mean_reward", "stderr", "n"});
    for (const auto& p : points)
        w.row({std::to_string(p.t_prime), format_double(p.mean_reward),
               format_double(p.stderr_reward), std::to_string(p.n)});
}

std::vector<LogitComparePoint> compare_logit_extrapolation(
    const Trajectory& traj, std::span<const std::pair<std::int64_t, std::int64_t>> pairs,
    std::span<const double> alphas, const TaskSpec& task, const EvalOptions& eopts,
    const ModelLoadSpec& mls) {
    if (pairs.empty()) throw ConfigError("no (t0, t1) pairs given");
    if (alphas.empty()) throw ConfigError("no alpha values given");
    std::vector<LogitComparePoint> points;
    for (const auto& [t0, t1] : pairs) {
        if (t1 <= t0)
            throw ConfigError("need t1 > t0, got t0=" + std::to_string(t0) +
                              " t1=" + std::to_string(t1));
        const PolicyModel m0 =
            PolicyModel::from_checkpoint(load_step(traj, t0), mls.n_heads, mls.ln_eps);
        const PolicyModel m1 =
            PolicyModel::from_checkpoint(load_step(traj, t1), mls.n_heads, mls.ln_eps);
        const EvalResult real = evaluate_policy(m1, task, eopts);
        for (const double alpha : alphas) {
            LogitComparePoint pt;
            pt.t0 = static_cast<std::uint64_t>(t0);
            pt.t1 = static_cast<std::uint64_t>(t1);
            pt.alpha = alpha;
            pt.mean_reward_real_t1 = real.mean_reward;
            try {
                const EvalResult ev = evaluate_decoder(
                    [&](std::span<const int> prompt, const SamplingParams& params,
                        std::uint64_t seed) {
                        return extrapolated_decode(m0, m1, alpha, prompt, params, seed);
                    },
                    task, eopts);
                pt.mean_reward_extrapolated = ev.mean_reward;
                pt.stderr_reward = ev.stderr_reward;
                pt.n = ev.n;
            } catch (const std::exception& e) {
                pt.failed = true;
                pt.error = e.what();
                pt.mean_reward_extrapolated = kQNan;
                pt.stderr_reward = kQNan;
                std::fprintf(stderr, "warning: alpha %s on (%lld, %lld) failed: %s\n",
                             format_double(alpha).c_str(), static_cast<long long>(t0),
                             static_cast<long long>(t1), e.what());
            }
            points.push_back(std::move(pt));
        }
    }
    return points;
}

void write_logit_compare_csv(const std::filesystem::path& path,
                             std::span<const LogitComparePoint> points) {
    CsvWriter w(path);
    w.row({"t0", "t1", "alpha", "mean_reward_extrapolated", "mean_reward_real_t1", "stderr", "n"});
    for (const auto& p : points)
        w.row({std::to_string(p.t0), std::to_string(p.t1), format_double(p.alpha),
               format_double(p.mean_reward_extrapolated), format_double(p.mean_reward_real_t1),
               format_double(p.stderr_reward), std::to_string(p.n)});
}

}  // namespace linex
