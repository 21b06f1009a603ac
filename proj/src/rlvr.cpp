// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/rlvr.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "linex/csv.hpp"
#include "linex/parallel.hpp"

namespace linex {

namespace {

constexpr std::uint64_t kSeedPrompt = 1;
constexpr std::uint64_t kSeedRollout = 2;
constexpr std::size_t kBatchChunks = 16;
constexpr std::size_t kGradChunks = 16;

std::vector<int> digits_of(long long v) {
    if (v == 0) return {0};
    std::vector<int> out;
    for (long long x = v; x > 0; x /= 10) out.push_back(static_cast<int>(x % 10));
    std::reverse(out.begin(), out.end());
    return out;
}

int n_digits(long long v) { return static_cast<int>(digits_of(v).size()); }

struct ParsedArith {
    long long a = 0;
    long long b = 0;
    int op = kTokPlus;
};

[[noreturn]] void bad_prompt(const char* what, std::span<const int> prompt) {
    throw ConfigError(std::string("malformed ") + what + " prompt: " + render_tokens(prompt));
}

ParsedArith parse_arith(std::span<const int> prompt) {
    std::size_t i = 0;
    if (prompt.size() < 5 || prompt[i++] != kTokBos) bad_prompt("arithmetic", prompt);
    ParsedArith p;
    std::size_t start = i;
    while (i < prompt.size() && prompt[i] >= 0 && prompt[i] <= 9) p.a = p.a * 10 + prompt[i++];
    if (i == start) bad_prompt("arithmetic", prompt);
    if (i >= prompt.size() || (prompt[i] != kTokPlus && prompt[i] != kTokTimes))
        bad_prompt("arithmetic", prompt);
    p.op = prompt[i++];
    start = i;
    while (i < prompt.size() && prompt[i] >= 0 && prompt[i] <= 9) p.b = p.b * 10 + prompt[i++];
    if (i == start) bad_prompt("arithmetic", prompt);
    if (i + 1 != prompt.size() || prompt[i] != kTokEquals) bad_prompt("arithmetic", prompt);
    return p;
}

std::vector<int> parse_copy_digits(std::span<const int> prompt) {
    if (prompt.size() < 4 || prompt[0] != kTokBos || prompt[1] != kTokReverse)
        bad_prompt("copy", prompt);
    std::vector<int> digits;
    std::size_t i = 2;
    while (i < prompt.size() && prompt[i] >= 0 && prompt[i] <= 9) digits.push_back(prompt[i++]);
    if (digits.empty() || i + 1 != prompt.size() || prompt[i] != kTokEquals)
        bad_prompt("copy", prompt);
    return digits;
}

double mean_abs_diff(std::span<const float> a, std::span<const float> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        sum += std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return a.empty() ? 0.0 : sum / static_cast<double>(a.size());
}

std::string ckpt_file_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06llu.lnxt", static_cast<unsigned long long>(step));
    return buf;
}

constexpr double kQNan = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::string token_str(int token) {
    if (token >= 0 && token <= 9) return std::string(1, static_cast<char>('0' + token));
    switch (token) {
        case kTokPlus: return "+";
        case kTokTimes: return "*";
        case kTokEquals: return "=";
        case kTokEos: return "<eos>";
        case kTokBos: return "^";
        case kTokReverse: return "r";
        default: return "<unk" + std::to_string(token) + ">";
    }
}

std::string render_tokens(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) out += token_str(t);
    return out;
}

std::string task_kind_name(TaskKind kind) {
    return kind == TaskKind::ModArith ? "mod_arith" : "seq_copy";
}

TaskKind task_kind_from_name(std::string_view name) {
    if (name == "mod_arith") return TaskKind::ModArith;
    if (name == "seq_copy") return TaskKind::SeqCopy;
    throw ConfigError("unknown task kind '" + std::string(name) +
                      "' (expected mod_arith or seq_copy)");
}

void TaskSpec::validate() const {
    if (kind == TaskKind::ModArith) {
        if (modulus < 2) throw ConfigError("modulus must be >= 2");
    } else {
        if (min_copy_len < 1 || min_copy_len > max_copy_len)
            throw ConfigError("copy length bounds must satisfy 1 <= min <= max");
    }
}

std::vector<int> TaskSpec::sample_prompt(Rng& rng) const {
    std::vector<int> prompt{kTokBos};
    if (kind == TaskKind::ModArith) {
        const long long a = static_cast<long long>(rng.below(static_cast<std::uint64_t>(modulus)));
        const long long b = static_cast<long long>(rng.below(static_cast<std::uint64_t>(modulus)));
        const int op = rng.below(2) == 0 ? kTokPlus : kTokTimes;
        for (int d : digits_of(a)) prompt.push_back(d);
        prompt.push_back(op);
        for (int d : digits_of(b)) prompt.push_back(d);
    } else {
        const int len = min_copy_len +
                        static_cast<int>(rng.below(static_cast<std::uint64_t>(
                            max_copy_len - min_copy_len + 1)));
        prompt.push_back(kTokReverse);
        for (int i = 0; i < len; ++i) prompt.push_back(static_cast<int>(rng.below(10)));
    }
    prompt.push_back(kTokEquals);
    return prompt;
}

std::vector<int> TaskSpec::expected_completion(std::span<const int> prompt) const {
    std::vector<int> out;
    if (kind == TaskKind::ModArith) {
        const ParsedArith p = parse_arith(prompt);
        const long long r = (p.op == kTokPlus ? p.a + p.b : p.a * p.b) % modulus;
        out = digits_of(r);
    } else {
        out = parse_copy_digits(prompt);
        std::reverse(out.begin(), out.end());
    }
    out.push_back(kTokEos);
    return out;
}

int TaskSpec::verify(std::span<const int> prompt, std::span<const int> completion) const {
    const std::vector<int> expected = expected_completion(prompt);
    if (completion.size() != expected.size()) return 0;
    return std::equal(completion.begin(), completion.end(), expected.begin()) ? 1 : 0;
}

int TaskSpec::max_prompt_tokens() const {
    if (kind == TaskKind::ModArith) return 3 + 2 * n_digits(modulus - 1);
    return 3 + max_copy_len;
}

int TaskSpec::max_completion_tokens() const {
    // Longest correct answer plus the stop token, plus one token of slack.
    if (kind == TaskKind::ModArith) return n_digits(modulus - 1) + 2;
    return max_copy_len + 2;
}

TaskSpec task_from_metadata(const Trajectory& traj) {
    const auto kind = traj.metadata_value("task.kind");
    if (!kind)
        throw ConfigError("trajectory metadata has no task.kind; cannot reconstruct the task");
    TaskSpec task;
    task.kind = task_kind_from_name(*kind);
    if (auto v = traj.metadata_value("task.modulus"))
        task.modulus = static_cast<int>(parse_int(*v, "trajectory metadata task.modulus"));
    if (auto v = traj.metadata_value("task.min_copy_len"))
        task.min_copy_len = static_cast<int>(parse_int(*v, "trajectory metadata task.min_copy_len"));
    if (auto v = traj.metadata_value("task.max_copy_len"))
        task.max_copy_len = static_cast<int>(parse_int(*v, "trajectory metadata task.max_copy_len"));
    task.validate();
    return task;
}

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("group_size must be >= 2");
    if (prompts_per_batch < 1) throw ConfigError("prompts_per_batch must be >= 1");
    if (!(0.0 < clip_lo && clip_lo < 1.0 && 1.0 < clip_hi))
        throw ConfigError("clip range must satisfy 0 < clip_lo < 1 < clip_hi");
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    if (lr <= 0.0) throw ConfigError("learning rate must be > 0");
    if (adv_epsilon <= 0.0) throw ConfigError("adv_epsilon must be > 0");
    if (minibatch_epochs < 1) throw ConfigError("minibatch_epochs must be >= 1");
}

std::string anchor_mode_name(AnchorMode m) {
    return m == AnchorMode::Chain ? "chain" : "last_grad_pair";
}

AnchorMode anchor_mode_from_name(std::string_view name) {
    if (name == "chain") return AnchorMode::Chain;
    if (name == "last_grad_pair") return AnchorMode::LastGradPair;
    throw ConfigError("unknown anchor mode '" + std::string(name) +
                      "' (expected chain or last_grad_pair)");
}

std::string extra_adam_mode_name(ExtraAdamMode m) {
    return m == ExtraAdamMode::Freeze ? "freeze" : "reset";
}

ExtraAdamMode extra_adam_mode_from_name(std::string_view name) {
    if (name == "freeze") return ExtraAdamMode::Freeze;
    if (name == "reset") return ExtraAdamMode::Reset;
    throw ConfigError("unknown extra_adam mode '" + std::string(name) +
                      "' (expected freeze or reset)");
}

void ScheduleSpec::validate() const {
    if (m < 1) throw ConfigError("schedule m must be >= 1 (each cycle starts with gradient steps)");
    if (n < 0) throw ConfigError("schedule n must be >= 0");
    if (n > 0 && !(beta > 1.0))
        throw ConfigError("extrapolation coefficient beta must be > 1 when n > 0");
}

RolloutGroup rollout_group(const PolicyModel& model, const TaskSpec& task,
                           std::span<const int> prompt, int group_size, double temperature,
                           std::uint64_t seed) {
    if (group_size < 2) throw ConfigError("rollout group size must be >= 2");
    RolloutGroup group;
    group.prompt.assign(prompt.begin(), prompt.end());
    group.samples.resize(static_cast<std::size_t>(group_size));
    SamplingParams params;
    params.temperature = temperature;
    params.top_p = 1.0;
    params.max_new = task.max_completion_tokens();
    params.stop_token = kTokEos;
    for (int g = 0; g < group_size; ++g) {
        DecodeResult d = decode(model, prompt, params, derive_seed(seed, static_cast<std::uint64_t>(g)));
        auto& s = group.samples[static_cast<std::size_t>(g)];
        s.completion = std::move(d.tokens);
        s.logprobs = std::move(d.logprobs);
        s.reward = task.verify(prompt, s.completion);
    }
    return group;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double adv_epsilon) {
    const std::size_t n = rewards.size();
    if (n < 2) throw ConfigError("advantage normalization needs a group of >= 2");
    if (adv_epsilon <= 0.0) throw ConfigError("adv_epsilon must be > 0");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n);
    const double denom = std::sqrt(var) + adv_epsilon;
    std::vector<double> adv(n);
    for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / denom;
    return adv;
}

std::vector<RolloutGroup> sample_batch(const PolicyModel& model, const TaskSpec& task,
                                       const GrpoConfig& cfg, std::uint64_t run_seed,
                                       std::uint64_t step, int threads) {
    cfg.validate();
    task.validate();
    std::vector<RolloutGroup> groups(static_cast<std::size_t>(cfg.prompts_per_batch));
    parallel_chunks(groups.size(), kBatchChunks, threads,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t p = begin; p < end; ++p) {
                            Rng pr(derive_seed(run_seed, step, p, kSeedPrompt));
                            const std::vector<int> prompt = task.sample_prompt(pr);
                            groups[p] = rollout_group(model, task, prompt, cfg.group_size,
                                                      cfg.temperature,
                                                      derive_seed(run_seed, step, p, kSeedRollout));
                        }
                    });
    return groups;
}

SurrogateValue clipped_surrogate(std::span<const double> lp_new, std::span<const double> lp_old,
                                 std::span<const double> advantages, double clip_lo,
                                 double clip_hi) {
    if (lp_new.size() != lp_old.size() || lp_new.size() != advantages.size())
        throw ConfigError("surrogate input spans must have equal length");
    SurrogateValue out;
    out.n_tokens = lp_new.size();
    if (out.n_tokens == 0) return out;
    double sum = 0.0;
    std::size_t clipped = 0;
    for (std::size_t i = 0; i < lp_new.size(); ++i) {
        const double rho = std::exp(lp_new[i] - lp_old[i]);
        const double unclipped = rho * advantages[i];
        const double capped = std::clamp(rho, clip_lo, clip_hi) * advantages[i];
        if (capped < unclipped) {
            sum += capped;
            ++clipped;
        } else {
            sum += unclipped;
        }
    }
    out.value = sum / static_cast<double>(out.n_tokens);
    out.clip_frac = static_cast<double>(clipped) / static_cast<double>(out.n_tokens);
    return out;
}

StepMetrics grpo_step(PolicyModel& model, AdamState& adam, std::span<const RolloutGroup> batch,
                      const GrpoConfig& cfg, int threads, Gradients* grad_out) {
    cfg.validate();
    if (batch.empty()) throw ConfigError("empty rollout batch");
    const int resolved = resolve_threads(threads);

    struct Flat {
        const RolloutGroup* group;
        const RolloutSample* sample;
        double advantage;
    };
    std::vector<Flat> flat;
    double reward_sum = 0.0;
    std::size_t n_tokens = 0;
    for (const auto& group : batch) {
        std::vector<double> rewards;
        rewards.reserve(group.samples.size());
        for (const auto& s : group.samples) rewards.push_back(static_cast<double>(s.reward));
        const std::vector<double> adv = grpo_advantages(rewards, cfg.adv_epsilon);
        for (std::size_t i = 0; i < group.samples.size(); ++i) {
            flat.push_back({&group, &group.samples[i], adv[i]});
            n_tokens += group.samples[i].completion.size();
            reward_sum += rewards[i];
        }
    }
    if (n_tokens == 0) throw NumericError("rollout batch contains no completion tokens");
    const double n_tokens_d = static_cast<double>(n_tokens);
    const int V = model.config().vocab_size;

    StepMetrics sm;
    sm.phase = "GRAD";
    sm.mean_reward = reward_sum / static_cast<double>(flat.size());

    Gradients total;
    for (int epoch = 0; epoch < cfg.minibatch_epochs; ++epoch) {
        std::vector<Gradients> chunk_grads(kGradChunks);
        std::vector<double> chunk_surr(kGradChunks, 0.0);
        std::vector<std::size_t> chunk_clipped(kGradChunks, 0);
        parallel_chunks(flat.size(), kGradChunks, resolved,
                        [&](std::size_t chunk, std::size_t begin, std::size_t end) {
            if (begin == end) return;
            Gradients local = Gradients::zeros_like(model);
            double surr = 0.0;
            std::size_t clipped = 0;
            std::vector<int> tokens;
            std::vector<double> weights;
            for (std::size_t idx = begin; idx < end; ++idx) {
                const Flat& f = flat[idx];
                const auto& completion = f.sample->completion;
                tokens.assign(f.group->prompt.begin(), f.group->prompt.end());
                tokens.insert(tokens.end(), completion.begin(), completion.end());
                const std::size_t P = f.group->prompt.size();
                const ForwardResult fr = forward(model, tokens);
                weights.assign(tokens.size(), 0.0);
                for (std::size_t j = 0; j < completion.size(); ++j) {
                    const std::size_t pos = P + j;
                    const std::span<const double> row(
                        &fr.logits[(pos - 1) * static_cast<std::size_t>(V)],
                        static_cast<std::size_t>(V));
                    const double lp_new = token_logprob(row, tokens[pos], cfg.temperature);
                    const double lp_old = f.sample->logprobs[j];
                    const double rho = std::exp(lp_new - lp_old);
                    const double unclipped = rho * f.advantage;
                    const double capped =
                        std::clamp(rho, cfg.clip_lo, cfg.clip_hi) * f.advantage;
                    if (capped < unclipped) {
                        surr += capped;
                        ++clipped;  // clipped branch active; zero gradient
                    } else {
                        surr += unclipped;
                        weights[pos] = -(f.advantage * rho) / n_tokens_d;
                    }
                }
                backward(model, tokens, weights, &local, cfg.temperature);
            }
            chunk_grads[chunk] = std::move(local);
            chunk_surr[chunk] = surr;
            chunk_clipped[chunk] = clipped;
        });

        total = Gradients::zeros_like(model);
        double surr_sum = 0.0;
        std::size_t clip_count = 0;
        for (std::size_t c = 0; c < kGradChunks; ++c) {
            if (!chunk_grads[c].g.empty()) total.accumulate(chunk_grads[c]);
            surr_sum += chunk_surr[c];
            clip_count += chunk_clipped[c];
        }
        sm.surrogate = surr_sum / n_tokens_d;
        sm.clip_frac = static_cast<double>(clip_count) / n_tokens_d;
        sm.grad_norm = std::sqrt(total.squared_norm());
        if (!std::isfinite(sm.surrogate))
            throw NumericError("non-finite surrogate (mean_reward=" +
                               format_double(sm.mean_reward) + ", tokens=" +
                               std::to_string(n_tokens) + ")");
        AdamStepStats stats;
        try {
            stats = adam_step(model, total, adam);
        } catch (const NumericError& e) {
            throw NumericError(std::string("grpo update aborted: ") + e.what() +
                               " (mean_reward=" + format_double(sm.mean_reward) +
                               ", grad_norm=" + format_double(sm.grad_norm) + ")");
        }
        sm.mean_abs_dw = stats.mean_abs_dw;
        sm.update_ratio = stats.mean_abs_dw / cfg.lr;
    }
    if (grad_out) *grad_out = std::move(total);
    return sm;
}

double extrapolation_transition(std::span<const float> prev, std::span<const float> cur,
                                double beta, std::span<float> out) {
    if (prev.size() != cur.size() || out.size() != cur.size())
        throw ConfigError("extrapolation spans must have equal length");
    if (!std::isfinite(beta)) throw NumericError("non-finite extrapolation coefficient");
    if (beta == 0.0) {
        std::copy(prev.begin(), prev.end(), out.begin());
        return mean_abs_diff(prev, cur);
    }
    if (beta == 1.0) {
        std::copy(cur.begin(), cur.end(), out.begin());
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
        const double p = static_cast<double>(prev[i]);
        const double c = static_cast<double>(cur[i]);
        const double v = p + beta * (c - p);
        if (!std::isfinite(v))
            throw NumericError("non-finite extrapolated weight at flat index " +
                               std::to_string(i));
        out[i] = static_cast<float>(v);
        sum += std::fabs(v - c);
    }
    return cur.empty() ? 0.0 : sum / static_cast<double>(cur.size());
}

TrainResult train(const ModelConfig& mcfg, const TaskSpec& task, const GrpoConfig& gcfg,
                  const ScheduleSpec& schedule, const TrainOptions& opts) {
    mcfg.validate();
    task.validate();
    gcfg.validate();
    schedule.validate();
    if (opts.total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (opts.checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (opts.out_dir.empty()) throw ConfigError("training requires an output directory");
    if (task.max_prompt_tokens() + task.max_completion_tokens() > mcfg.context_len)
        throw ConfigError("context_len " + std::to_string(mcfg.context_len) +
                          " too small for task (needs " +
                          std::to_string(task.max_prompt_tokens() + task.max_completion_tokens()) +
                          ")");
    const int threads = resolve_threads(opts.threads);
    std::filesystem::create_directories(opts.out_dir);

    PolicyModel model = PolicyModel::init(mcfg);
    AdamState adam = AdamState::init(model, gcfg.lr);

    Trajectory traj;
    traj.run_id = opts.run_id;
    traj.base_dir = opts.out_dir;
    auto& md = traj.metadata;
    md["tool_version"] = kToolVersion;
    md["model.vocab_size"] = std::to_string(mcfg.vocab_size);
    md["model.context_len"] = std::to_string(mcfg.context_len);
    md["model.d_model"] = std::to_string(mcfg.d_model);
    md["model.n_heads"] = std::to_string(mcfg.n_heads);
    md["model.n_layers"] = std::to_string(mcfg.n_layers);
    md["model.ln_eps"] = format_double(mcfg.ln_eps);
    md["model.seed"] = std::to_string(mcfg.seed);
    md["task.kind"] = task_kind_name(task.kind);
    md["task.modulus"] = std::to_string(task.modulus);
    md["task.min_copy_len"] = std::to_string(task.min_copy_len);
    md["task.max_copy_len"] = std::to_string(task.max_copy_len);
    md["grpo.group_size"] = std::to_string(gcfg.group_size);
    md["grpo.prompts_per_batch"] = std::to_string(gcfg.prompts_per_batch);
    md["grpo.clip_lo"] = format_double(gcfg.clip_lo);
    md["grpo.clip_hi"] = format_double(gcfg.clip_hi);
    md["grpo.temperature"] = format_double(gcfg.temperature);
    md["grpo.lr"] = format_double(gcfg.lr);
    md["grpo.adv_epsilon"] = format_double(gcfg.adv_epsilon);
    md["grpo.minibatch_epochs"] = std::to_string(gcfg.minibatch_epochs);
    md["grpo.advantage_std"] = "population";
    md["schedule.m"] = std::to_string(schedule.m);
    md["schedule.n"] = std::to_string(schedule.n);
    md["schedule.beta"] = format_double(schedule.beta);
    md["schedule.anchor"] = anchor_mode_name(schedule.anchor);
    md["schedule.extra_adam"] = extra_adam_mode_name(schedule.extra_adam);
    md["train.seed"] = std::to_string(opts.seed);
    md["train.total_steps"] = std::to_string(opts.total_steps);
    md["train.checkpoint_every"] = std::to_string(opts.checkpoint_every);

    TrainResult res;
    auto write_ckpt = [&](std::uint64_t s) {
        const std::string name = ckpt_file_name(s);
        write_checkpoint(model.to_checkpoint(s), opts.out_dir / name);
        traj.entries.push_back({s, name});
    };
    write_ckpt(0);

    std::vector<float> prev = model.snapshot();  // W_{k-1}; unused until first EXTRA
    std::vector<float> grad_before, grad_after;  // around the latest gradient step
    int extra_run = 0;
    std::vector<double> prev_grad;

    for (std::uint64_t k = 0; k < opts.total_steps; ++k) {
        const auto t_start = std::chrono::steady_clock::now();
        StepMetrics sm;
        if (schedule.is_grad_step(k)) {
            const std::vector<RolloutGroup> batch =
                sample_batch(model, task, gcfg, opts.seed, k, threads);
            std::vector<float> before = model.snapshot();
            Gradients grad;
            try {
                sm = grpo_step(model, adam, batch, gcfg, threads, &grad);
            } catch (const NumericError& e) {
                throw NumericError("step " + std::to_string(k) + ": " + e.what());
            }
            sm.step = k;
            std::vector<double> flat_grad = grad.flatten();
            sm.grad_cos =
                prev_grad.empty() ? kQNan : cosine_similarity(prev_grad, flat_grad);
            prev_grad = std::move(flat_grad);
            grad_before = before;
            grad_after = model.snapshot();
            prev = std::move(before);
            extra_run = 0;
        } else {
            const std::vector<float> cur = model.snapshot();
            std::vector<float> next(cur.size());
            double mean_dw = 0.0;
            try {
                if (schedule.anchor == AnchorMode::Chain) {
                    mean_dw = extrapolation_transition(prev, cur, schedule.beta, next);
                } else {
                    const double coeff =
                        1.0 + static_cast<double>(extra_run + 1) * (schedule.beta - 1.0);
                    extrapolation_transition(grad_before, grad_after, coeff, next);
                    mean_dw = mean_abs_diff(next, cur);
                }
            } catch (const NumericError& e) {
                throw NumericError("step " + std::to_string(k) + ": " + e.what());
            }
            ++extra_run;
            prev = cur;
            model.load_snapshot(next);
            if (schedule.extra_adam == ExtraAdamMode::Reset)
                adam = AdamState::init(model, gcfg.lr);
            sm.step = k;
            sm.phase = "EXTRA";
            sm.mean_reward = kQNan;
            sm.clip_frac = kQNan;
            sm.grad_norm = kQNan;
            sm.surrogate = kQNan;
            sm.update_ratio = kQNan;
            sm.grad_cos = kQNan;
            sm.mean_abs_dw = mean_dw;
        }
        sm.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                               t_start)
                         .count();
        if (!opts.quiet)
            std::fprintf(stderr, "[%s] step %llu %s reward=%.4f dw=%.3e %.0fms\n",
                         opts.run_id.c_str(), static_cast<unsigned long long>(sm.step),
                         sm.phase.c_str(), sm.mean_reward, sm.mean_abs_dw, sm.wall_ms);
        res.metrics.push_back(std::move(sm));
        const std::uint64_t s = k + 1;
        if (s % opts.checkpoint_every == 0 && s != opts.total_steps) write_ckpt(s);
    }
    write_ckpt(opts.total_steps);

    res.trajectory_path = opts.out_dir / "trajectory.json";
    res.metrics_path = opts.out_dir / "metrics.csv";
    save_trajectory(traj, res.trajectory_path);
    write_metrics_csv(res.metrics_path, res.metrics);
    res.trajectory = std::move(traj);
    return res;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> rows) {
    CsvWriter w(path);
    w.row({"step", "phase", "mean_reward", "clip_frac", "grad_norm", "mean_abs_dw", "wall_ms"});
    for (const auto& r : rows)
        w.row({std::to_string(r.step), r.phase, format_double(r.mean_reward),
               format_double(r.clip_frac), format_double(r.grad_norm),
               format_double(r.mean_abs_dw), format_double(r.wall_ms)});
}

std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path) {
    const auto rows = read_csv(path);
    if (rows.empty() || rows[0] != std::vector<std::string>{"step", "phase", "mean_reward",
                                                            "clip_frac", "grad_norm",
                                                            "mean_abs_dw", "wall_ms"})
        throw FormatError("unexpected metrics CSV header in " + path.string());
    std::vector<StepMetrics> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const std::string ctx = path.string() + " line " + std::to_string(i + 1);
        if (r.size() != 7) throw FormatError("expected 7 columns at " + ctx);
        StepMetrics m;
        m.step = static_cast<std::uint64_t>(parse_int(r[0], ctx));
        m.phase = r[1];
        m.mean_reward = parse_double(r[2], ctx);
        m.clip_frac = parse_double(r[3], ctx);
        m.grad_norm = parse_double(r[4], ctx);
        m.mean_abs_dw = parse_double(r[5], ctx);
        m.wall_ms = parse_double(r[6], ctx);
        // The in-memory extras are not part of the CSV.
        m.surrogate = m.update_ratio = m.grad_cos = kQNan;
        out.push_back(std::move(m));
    }
    return out;
}

EvalResult evaluate_decoder(const DecodeFn& decoder, const TaskSpec& task,
                            const EvalOptions& opts) {
    task.validate();
    if (opts.n_prompts < 1 || opts.samples_per_prompt < 1)
        throw ConfigError("evaluation needs n_prompts >= 1 and samples_per_prompt >= 1");
    const int threads = resolve_threads(opts.threads);
    const std::size_t per = static_cast<std::size_t>(opts.samples_per_prompt);
    std::vector<int> rewards(static_cast<std::size_t>(opts.n_prompts) * per, 0);
    SamplingParams params;
    params.temperature = opts.temperature;
    params.top_p = opts.top_p;
    params.max_new = task.max_completion_tokens();
    params.stop_token = kTokEos;
    parallel_chunks(static_cast<std::size_t>(opts.n_prompts), kBatchChunks, threads,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t p = begin; p < end; ++p) {
                            Rng pr(derive_seed(opts.seed, p, 0, kSeedPrompt));
                            const std::vector<int> prompt = task.sample_prompt(pr);
                            for (std::size_t s = 0; s < per; ++s) {
                                const DecodeResult d = decoder(
                                    prompt, params, derive_seed(opts.seed, p, s, kSeedRollout));
                                rewards[p * per + s] = task.verify(prompt, d.tokens);
                            }
                        }
                    });
    EvalResult res;
    res.n = static_cast<int>(rewards.size());
    double sum = 0.0;
    for (int r : rewards) sum += r;
    res.mean_reward = sum / static_cast<double>(res.n);
    if (res.n > 1) {
        double ss = 0.0;
        for (int r : rewards) {
            const double d = static_cast<double>(r) - res.mean_reward;
            ss += d * d;
        }
        res.stderr_reward = std::sqrt(ss / static_cast<double>(res.n - 1) /
                                      static_cast<double>(res.n));
    }
    return res;
}

EvalResult evaluate_policy(const PolicyModel& model, const TaskSpec& task,
                           const EvalOptions& opts) {
    return evaluate_decoder(
        [&model](std::span<const int> prompt, const SamplingParams& params, std::uint64_t seed) {
            return decode(model, prompt, params, seed);
        },
        task, opts);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("cosine inputs must have equal length");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> successive_cosines(const std::vector<std::vector<double>>& grads) {
    std::vector<double> out;
    for (std::size_t i = 1; i < grads.size(); ++i)
        out.push_back(cosine_similarity(grads[i - 1], grads[i]));
    return out;
}

std::vector<StabilityWindow> gradient_stability(std::span<const StepMetrics> metrics,
                                                int window) {
    if (window < 1) throw ConfigError("stability window must be >= 1");
    std::vector<const StepMetrics*> grad_rows;
    for (const auto& m : metrics)
        if (m.phase == "GRAD") grad_rows.push_back(&m);
    const std::size_t n_windows = grad_rows.size() / static_cast<std::size_t>(window);
    if (n_windows < 2)
        throw ConfigError("stability report needs >= 2 full windows of gradient steps; have " +
                          std::to_string(grad_rows.size()) + " GRAD steps at window " +
                          std::to_string(window));
    std::vector<StabilityWindow> out;
    for (std::size_t w = 0; w < n_windows; ++w) {
        StabilityWindow sw;
        sw.index = static_cast<int>(w);
        const std::size_t begin = w * static_cast<std::size_t>(window);
        const std::size_t end = begin + static_cast<std::size_t>(window);
        sw.start_step = grad_rows[begin]->step;
        sw.end_step = grad_rows[end - 1]->step;
        sw.n_steps = window;
        double cos_sum = 0.0;
        int cos_n = 0;
        double dw_sum = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            if (std::isfinite(grad_rows[i]->grad_cos)) {
                cos_sum += grad_rows[i]->grad_cos;
                ++cos_n;
            }
            dw_sum += grad_rows[i]->mean_abs_dw;
        }
        sw.mean_cosine = cos_n ? cos_sum / cos_n : kQNan;
        const double dw_mean = dw_sum / window;
        double dw_ss = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            const double d = grad_rows[i]->mean_abs_dw - dw_mean;
            dw_ss += d * d;
        }
        const double dw_std = std::sqrt(dw_ss / window);
        sw.cv_abs_dw = dw_mean != 0.0 ? dw_std / dw_mean : 0.0;
        out.push_back(sw);
    }
    return out;
}

void write_stability_csv(const std::filesystem::path& path,
                         std::span<const StabilityWindow> windows) {
    CsvWriter w(path);
    w.row({"window", "start_step", "end_step", "n_steps", "mean_cosine", "cv_abs_dw"});
    for (const auto& sw : windows)
        w.row({std::to_string(sw.index), std::to_string(sw.start_step),
               std::to_string(sw.end_step), std::to_string(sw.n_steps),
               format_double(sw.mean_cosine), format_double(sw.cv_abs_dw)});
}

}  // namespace linex
