// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "linex/rng.hpp"
#include "linex/tensor_store.hpp"
#include "linex/toy_policy.hpp"
#include "oracles.hpp"

using namespace linex;

namespace {

ModelConfig small_config(int d_model, int n_heads, int n_layers, std::uint64_t seed,
                         int vocab = 24, int ctx = 16) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = ctx;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.n_layers = n_layers;
    cfg.seed = seed;
    return cfg;
}

std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
    std::vector<int> t(static_cast<std::size_t>(len));
    for (auto& v : t) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

double rel_err(double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / scale;
}

}  // namespace

TEST_CASE("init is deterministic and follows the layout rules") {
    const auto cfg = small_config(16, 2, 2, 99);
    const auto a = PolicyModel::init(cfg);
    const auto b = PolicyModel::init(cfg);
    CHECK(a.snapshot() == b.snapshot());

    auto cfg2 = cfg;
    cfg2.seed = 100;
    CHECK(PolicyModel::init(cfg2).snapshot() != a.snapshot());

    for (const auto& t : a.tensors()) {
        if (t.name.ends_with(".g")) {
            for (float v : t.v) CHECK(v == 1.0f);
        } else if (t.name.ends_with(".b")) {
            for (float v : t.v) CHECK(v == 0.0f);
        }
    }
    // Weight matrices draw from a zero-mean normal with std 0.02.
    const auto& head = a.tensor("head").v;
    double sum = 0.0, sum_sq = 0.0;
    for (float v : head) {
        sum += v;
        sum_sq += static_cast<double>(v) * v;
    }
    const double mean = sum / static_cast<double>(head.size());
    const double sd = std::sqrt(sum_sq / static_cast<double>(head.size()) - mean * mean);
    CHECK(std::fabs(mean) < 0.005);
    CHECK(sd > 0.015);
    CHECK(sd < 0.025);
}

TEST_CASE("model config validation") {
    CHECK_THROWS_AS(small_config(10, 4, 1, 0).validate(), ConfigError);
    CHECK_THROWS_AS(small_config(0, 1, 1, 0).validate(), ConfigError);
    CHECK_NOTHROW(small_config(12, 3, 1, 0).validate());
}

TEST_CASE("forward matches an independent naive implementation") {
    struct Pick {
        int d, h, l, t;
    };
    for (const Pick p : {Pick{16, 2, 2, 12}, Pick{8, 1, 1, 5}, Pick{12, 3, 1, 7}}) {
        const auto cfg = small_config(p.d, p.h, p.l, 7 + static_cast<std::uint64_t>(p.d));
        const auto model = PolicyModel::init(cfg);
        Rng rng(55);
        const auto tokens = random_tokens(rng, p.t, cfg.vocab_size);
        const auto got = forward(model, tokens);
        const auto want = oracle::naive_forward(model, tokens);
        REQUIRE(got.logits.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(rel_err(got.logits[i], want[i]) < 1e-10);
    }
}

TEST_CASE("attention is causal") {
    const auto cfg = small_config(16, 2, 2, 3);
    const auto model = PolicyModel::init(cfg);
    std::vector<int> tokens{1, 2, 3, 4, 5, 6};
    const auto base = forward(model, tokens);
    tokens.back() = 7;  // only the last position may change
    const auto changed = forward(model, tokens);
    const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
    for (std::size_t i = 0; i + V < base.logits.size(); ++i)
        CHECK(base.logits[i] == changed.logits[i]);
    bool last_differs = false;
    for (std::size_t i = base.logits.size() - V; i < base.logits.size(); ++i)
        if (base.logits[i] != changed.logits[i]) last_differs = true;
    CHECK(last_differs);
}

TEST_CASE("taps expose the residual stream") {
    const auto cfg = small_config(8, 2, 1, 21);
    const auto model = PolicyModel::init(cfg);
    Rng rng(5);
    const auto tokens = random_tokens(rng, 6, cfg.vocab_size);
    const std::vector<std::string> taps{"blk0.out", "blk0.mlp_in", "logits"};
    const auto fr = forward(model, tokens, &taps);

    const std::size_t T = tokens.size();
    const std::size_t D = static_cast<std::size_t>(cfg.d_model);
    REQUIRE(fr.taps.count("blk0.out") == 1);
    REQUIRE(fr.taps.count("blk0.mlp_in") == 1);
    CHECK(fr.taps.at("blk0.out").size() == T * D);
    CHECK(fr.taps.at("blk0.mlp_in").size() == T * D);
    CHECK(fr.taps.at("logits") == fr.logits);

    // Applying the final layer norm and head to the last block output must
    // reproduce the logits.
    const auto& out = fr.taps.at("blk0.out");
    const auto& g = model.tensor("ln_f.g").v;
    const auto& b = model.tensor("ln_f.b").v;
    const auto& head = model.tensor("head").v;
    for (std::size_t t = 0; t < T; ++t) {
        double mean = 0.0;
        for (std::size_t d = 0; d < D; ++d) mean += out[t * D + d];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double c = out[t * D + d] - mean;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double inv = 1.0 / std::sqrt(var + cfg.ln_eps);
        std::vector<double> hf(D);
        for (std::size_t d = 0; d < D; ++d)
            hf[d] = (out[t * D + d] - mean) * inv * static_cast<double>(g[d]) +
                    static_cast<double>(b[d]);
        for (std::size_t o = 0; o < static_cast<std::size_t>(cfg.vocab_size); ++o) {
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d)
                acc += static_cast<double>(head[o * D + d]) * hf[d];
            CHECK(rel_err(acc, fr.logits[t * static_cast<std::size_t>(cfg.vocab_size) + o]) <
                  1e-12);
        }
    }

    const std::vector<std::string> bad{"blk9.out"};
    CHECK_THROWS_AS(forward(model, tokens, &bad), ConfigError);
    const auto names = valid_taps(cfg);
    CHECK(names == std::vector<std::string>{"blk0.out", "logits"});
}

TEST_CASE("forward rejects bad token sequences") {
    const auto cfg = small_config(8, 2, 1, 0, 24, 8);
    const auto model = PolicyModel::init(cfg);
    CHECK_THROWS_AS(forward(model, std::vector<int>{}), ConfigError);
    CHECK_THROWS_AS(forward(model, std::vector<int>{24}), ConfigError);
    CHECK_THROWS_AS(forward(model, std::vector<int>{-1}), ConfigError);
    CHECK_THROWS_AS(forward(model, std::vector<int>(9, 1)), ConfigError);
}

TEST_CASE("backward gradients match finite differences") {
    const auto cfg = small_config(8, 2, 1, 12, 8, 8);
    auto model = PolicyModel::init(cfg);
    Rng rng(17);
    const auto tokens = random_tokens(rng, 5, cfg.vocab_size);
    std::vector<double> weights(tokens.size());
    for (auto& w : weights) w = rng.normal();

    for (double temperature : {1.0, 0.7}) {
        auto grads = Gradients::zeros_like(model);
        backward(model, tokens, weights, &grads, temperature);

        auto objective_at = [&](std::size_t ti, std::size_t j, float w) {
            auto& slot = model.tensors()[ti].v[j];
            const float saved = slot;
            slot = w;
            Gradients scratch = Gradients::zeros_like(model);
            const double obj = backward(model, tokens, weights, &scratch, temperature);
            slot = saved;
            return obj;
        };

        // Spot-check random coordinates in every tensor.
        std::size_t checked = 0;
        for (std::size_t ti = 0; ti < model.tensors().size(); ++ti) {
            for (int rep = 0; rep < 4; ++rep) {
                const std::size_t j = rng.below(model.tensors()[ti].v.size());
                const float w0 = model.tensors()[ti].v[j];
                const float h = 2.5e-4f;
                const float wp = w0 + h;
                const float wm = w0 - h;
                const double eff_h = static_cast<double>(wp) - static_cast<double>(wm);
                const double fd = (objective_at(ti, j, wp) - objective_at(ti, j, wm)) / eff_h;
                const double an = grads.g[ti][j];
                // Truncation error of the central difference is O(h^2),
                // about 1e-6 here; combine it with a relative band.
                const double tol = 1e-6 + 1e-4 * std::max(std::fabs(fd), std::fabs(an));
                CHECK(std::fabs(fd - an) < tol);
                ++checked;
            }
        }
        CHECK(checked > 20);
    }
}

TEST_CASE("backward objective equals the weighted teacher-forced logprobs") {
    const auto cfg = small_config(12, 3, 2, 4, 24, 16);
    auto model = PolicyModel::init(cfg);
    Rng rng(3);
    const auto tokens = random_tokens(rng, 9, cfg.vocab_size);
    std::vector<double> weights(tokens.size());
    for (auto& w : weights) w = rng.normal();

    for (double temperature : {1.0, 0.5}) {
        auto grads = Gradients::zeros_like(model);
        const double obj = backward(model, tokens, weights, &grads, temperature);
        const auto fr = forward(model, tokens);
        const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
        double want = 0.0;
        for (std::size_t i = 1; i < tokens.size(); ++i) {
            std::span<const double> row(&fr.logits[(i - 1) * V], V);
            want += weights[i] * token_logprob(row, tokens[i], temperature);
        }
        CHECK(obj == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("gradient container algebra") {
    const auto cfg = small_config(8, 2, 1, 0);
    const auto model = PolicyModel::init(cfg);
    auto a = Gradients::zeros_like(model);
    auto b = Gradients::zeros_like(model);
    a.g[0][0] = 3.0;
    b.g[0][0] = 1.5;
    a.accumulate(b);
    CHECK(a.g[0][0] == 4.5);
    a.scale(2.0);
    CHECK(a.g[0][0] == 9.0);
    CHECK(a.squared_norm() == 81.0);
    const auto flat = a.flatten();
    CHECK(flat.size() == model.param_count());
    CHECK(flat[0] == 9.0);

    Gradients mismatched;
    CHECK_THROWS_AS(a.accumulate(mismatched), ConfigError);
}

TEST_CASE("adam matches the textbook recurrence with F32 write-back") {
    const auto cfg = small_config(8, 2, 1, 5);
    auto model = PolicyModel::init(cfg);
    auto reference = model.snapshot();
    auto state = AdamState::init(model, 0.01);

    auto grads = Gradients::zeros_like(model);
    Rng rng(6);
    for (auto& tensor_grads : grads.g)
        for (auto& g : tensor_grads) g = rng.normal();

    // Independent tracking of coordinate (0, 0) and (2, 3).
    struct Tracked {
        std::size_t ti, j;
        double m = 0.0, v = 0.0;
        float w;
    };
    std::vector<Tracked> tracked{{0, 0, 0.0, 0.0, 0.0f}, {2, 3, 0.0, 0.0, 0.0f}};
    std::size_t offset = 0;
    for (std::size_t ti = 0; ti < model.tensors().size(); ++ti) {
        for (auto& tr : tracked)
            if (tr.ti == ti) tr.w = reference[offset + tr.j];
        offset += model.tensors()[ti].v.size();
    }

    for (int step = 1; step <= 5; ++step) {
        const auto stats = adam_step(model, grads, state);
        CHECK(stats.mean_abs_dw > 0.0);
        CHECK(stats.max_abs_dw >= stats.mean_abs_dw);
        for (auto& tr : tracked) {
            const double g = grads.g[tr.ti][tr.j];
            tr.m = 0.9 * tr.m + 0.1 * g;
            tr.v = 0.999 * tr.v + 0.001 * g * g;
            const double m_hat = tr.m / (1.0 - std::pow(0.9, step));
            const double v_hat = tr.v / (1.0 - std::pow(0.999, step));
            tr.w = static_cast<float>(static_cast<double>(tr.w) -
                                      0.01 * m_hat / (std::sqrt(v_hat) + 1e-8));
            CHECK(model.tensors()[tr.ti].v[tr.j] == tr.w);
        }
    }
    CHECK(state.step_count == 5);
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
    const auto cfg = small_config(8, 2, 1, 5);
    auto model = PolicyModel::init(cfg);
    const auto before = model.snapshot();
    auto state = AdamState::init(model, 0.01);
    auto grads = Gradients::zeros_like(model);
    grads.g[1][0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adam_step(model, grads, state), NumericError);
    CHECK(model.snapshot() == before);
    CHECK(state.step_count == 0);
}

TEST_CASE("uniform logits give uniform logprobs") {
    const auto cfg = small_config(16, 2, 1, 8);
    auto model = PolicyModel::init(cfg);
    auto& head = model.tensor("head").v;
    std::fill(head.begin(), head.end(), 0.0f);
    const auto fr = forward(model, std::vector<int>{1, 2, 3});
    const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t o = 0; o < V; ++o) CHECK(fr.logits[t * V + o] == 0.0);
    CHECK(token_logprob(std::span<const double>(fr.logits.data(), V), 5, 1.0) ==
          -std::log(24.0));
}

TEST_CASE("token_logprob matches an independent log-softmax") {
    Rng rng(91);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> logits(24);
        for (auto& l : logits) l = rng.normal(0.0, 3.0);
        const int tok = static_cast<int>(rng.below(24));
        const double temperature = 0.5 + rng.uniform01();
        double mx = -1e300;
        for (double l : logits) mx = std::max(mx, l / temperature);
        double z = 0.0;
        for (double l : logits) z += std::exp(l / temperature - mx);
        const double want = logits[static_cast<std::size_t>(tok)] / temperature - mx - std::log(z);
        CHECK(token_logprob(logits, tok, temperature) == doctest::Approx(want).epsilon(1e-13));
    }
    CHECK_THROWS_AS(token_logprob(std::vector<double>{0.0}, 1, 1.0), ConfigError);
    CHECK_THROWS_AS(token_logprob(std::vector<double>{0.0}, 0, 0.0), ConfigError);
}

TEST_CASE("sampling logprob agrees with token_logprob bit for bit") {
    Rng logit_rng(14), sample_rng(15);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> logits(24);
        for (auto& l : logits) l = logit_rng.normal(0.0, 2.0);
        const double temperature = 0.25 + logit_rng.uniform01();
        double lp = 0.0;
        const int tok = sample_from_logits(logits, temperature, 1.0, sample_rng, &lp);
        CHECK(lp == token_logprob(logits, tok, temperature));
    }
}

TEST_CASE("sample_from_logits consumes exactly one uniform draw") {
    std::vector<double> logits{0.3, -0.2, 1.0, 0.0};
    Rng consumed(42), manual(42);
    sample_from_logits(logits, 1.0, 1.0, consumed, nullptr);
    manual.uniform01();
    for (int i = 0; i < 10; ++i) CHECK(consumed.uniform01() == manual.uniform01());

    Rng with_topp(42), manual2(42);
    sample_from_logits(logits, 0.8, 0.5, with_topp, nullptr);
    manual2.uniform01();
    for (int i = 0; i < 10; ++i) CHECK(with_topp.uniform01() == manual2.uniform01());
}

TEST_CASE("sampling follows the softmax distribution") {
    // P = (0.5, 0.3, 0.2).
    std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
    Rng rng(77);
    std::vector<int> counts(3, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(
        sample_from_logits(logits, 1.0, 1.0, rng, nullptr))];
    // 5 sigma bands.
    CHECK(std::fabs(counts[0] / static_cast<double>(n) - 0.5) < 5 * std::sqrt(0.25 / n));
    CHECK(std::fabs(counts[1] / static_cast<double>(n) - 0.3) < 5 * std::sqrt(0.21 / n));
    CHECK(std::fabs(counts[2] / static_cast<double>(n) - 0.2) < 5 * std::sqrt(0.16 / n));
}

TEST_CASE("nucleus truncation drops the tail and renormalizes") {
    std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
    Rng rng(78);
    std::vector<int> counts(3, 0);
    const int n = 50000;
    for (int i = 0; i < n; ++i)
        ++counts[static_cast<std::size_t>(sample_from_logits(logits, 1.0, 0.6, rng, nullptr))];
    CHECK(counts[2] == 0);  // outside the 0.8-mass nucleus
    CHECK(std::fabs(counts[0] / static_cast<double>(n) - 0.5 / 0.8) < 0.01);

    // A tiny nucleus is greedy.
    Rng greedy(79);
    for (int i = 0; i < 100; ++i)
        CHECK(sample_from_logits(logits, 1.0, 0.01, greedy, nullptr) == 0);
}

TEST_CASE("sampling parameter validation") {
    std::vector<double> logits{0.0, 1.0};
    Rng rng(1);
    CHECK_THROWS_AS(sample_from_logits(logits, 0.0, 1.0, rng, nullptr), ConfigError);
    CHECK_THROWS_AS(sample_from_logits(logits, 1.0, 0.0, rng, nullptr), ConfigError);
    CHECK_THROWS_AS(sample_from_logits(logits, 1.0, 1.1, rng, nullptr), ConfigError);
    std::vector<double> bad{0.0, std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(sample_from_logits(bad, 1.0, 1.0, rng, nullptr), NumericError);
}

TEST_CASE("decode is seed-deterministic and respects limits") {
    const auto cfg = small_config(16, 2, 1, 31, 24, 12);
    const auto model = PolicyModel::init(cfg);
    const std::vector<int> prompt{1, 2, 3};
    SamplingParams params;
    params.max_new = 5;

    const auto a = decode(model, prompt, params, 1234);
    const auto b = decode(model, prompt, params, 1234);
    CHECK(a.tokens == b.tokens);
    CHECK(a.logprobs == b.logprobs);
    CHECK(a.tokens.size() == 5);
    CHECK(a.logprobs.size() == 5);

    const auto c = decode(model, prompt, params, 1235);
    CHECK(a.tokens != c.tokens);

    // Context limit: a prompt one below the limit leaves room for one token.
    const std::vector<int> long_prompt(11, 1);
    const auto d = decode(model, long_prompt, params, 1);
    CHECK(d.tokens.size() == 1);
    const std::vector<int> full_prompt(12, 1);
    CHECK_THROWS_AS(decode(model, full_prompt, params, 1), ConfigError);
}

TEST_CASE("decode emits the stop token and halts") {
    const auto cfg = small_config(16, 2, 1, 31, 24, 16);
    const auto model = PolicyModel::init(cfg);
    const std::vector<int> prompt{4, 5};

    // Find the greedy token, then declare it the stop token.
    const auto fr = forward(model, prompt);
    const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
    std::span<const double> last(&fr.logits[(prompt.size() - 1) * V], V);
    const int greedy =
        static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());

    SamplingParams params;
    params.top_p = 1e-9;  // nucleus of one: greedy
    params.max_new = 8;
    params.stop_token = greedy;
    const auto out = decode(model, prompt, params, 7);
    REQUIRE(out.tokens.size() == 1);
    CHECK(out.tokens[0] == greedy);
}

TEST_CASE("decode performs one forward per emitted token") {
    const auto cfg = small_config(16, 2, 1, 31, 24, 16);
    const auto model = PolicyModel::init(cfg);
    SamplingParams params;
    params.max_new = 6;
    const auto before = forward_call_count();
    const auto out = decode(model, std::vector<int>{1, 2}, params, 99);
    CHECK(forward_call_count() - before == out.tokens.size());

    const auto before_b = backward_call_count();
    auto m2 = PolicyModel::init(cfg);
    auto grads = Gradients::zeros_like(m2);
    backward(m2, std::vector<int>{1, 2, 3}, std::vector<double>{0.0, 1.0, 1.0}, &grads);
    CHECK(backward_call_count() - before_b == 1);
}

TEST_CASE("checkpoint round trip preserves weights and shape metadata") {
    const auto dir = std::filesystem::temp_directory_path() / "linex_policy_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.lnxt";

    const auto cfg = small_config(12, 3, 2, 44, 24, 10);
    const auto model = PolicyModel::init(cfg);
    write_checkpoint(model.to_checkpoint(17), path);

    CheckpointReader reader(path);
    CHECK(reader.step() == 17);
    const auto loaded = PolicyModel::from_checkpoint(reader, cfg.n_heads, cfg.ln_eps);
    CHECK(loaded.config().vocab_size == cfg.vocab_size);
    CHECK(loaded.config().context_len == cfg.context_len);
    CHECK(loaded.config().d_model == cfg.d_model);
    CHECK(loaded.config().n_layers == cfg.n_layers);
    CHECK(loaded.config().n_heads == cfg.n_heads);
    CHECK(loaded.snapshot() == model.snapshot());

    // Same forward behavior, bit for bit.
    const std::vector<int> tokens{3, 1, 4, 1, 5};
    CHECK(forward(loaded, tokens).logits == forward(model, tokens).logits);
    std::filesystem::remove_all(dir);
}

TEST_CASE("from_checkpoint rejects non-policy containers") {
    Checkpoint empty;
    empty.tensors = {TensorData{"x", DType::F64, {2}, {1.0, 2.0}}};
    CHECK_THROWS_AS(PolicyModel::from_checkpoint(empty, 2), FormatError);

    const auto cfg = small_config(8, 2, 1, 1);
    auto good = PolicyModel::init(cfg).to_checkpoint(0);
    auto missing = good;
    std::erase_if(missing.tensors, [](const TensorData& t) { return t.name == "blk0.attn.q"; });
    CHECK_THROWS_AS(PolicyModel::from_checkpoint(missing, 2), FormatError);

    auto reshaped = good;
    for (auto& t : reshaped.tensors)
        if (t.name == "head") t.dims = {4, 16};
    CHECK_THROWS_AS(PolicyModel::from_checkpoint(reshaped, 2), FormatError);
}

TEST_CASE("snapshot round trip and size checking") {
    const auto cfg = small_config(8, 2, 1, 2);
    auto model = PolicyModel::init(cfg);
    const auto saved = model.snapshot();
    CHECK(saved.size() == model.param_count());

    auto perturbed = saved;
    perturbed[0] += 1.0f;
    model.load_snapshot(perturbed);
    CHECK(model.snapshot() == perturbed);
    model.load_snapshot(saved);
    CHECK(model.snapshot() == saved);

    CHECK_THROWS_AS(model.load_snapshot(std::vector<float>(3)), ConfigError);
    CHECK_THROWS_AS(model.tensor("nope"), ConfigError);
}

TEST_CASE("resolve_model_load reads trajectory metadata") {
    Trajectory traj;
    traj.metadata["model.n_heads"] = "4";
    traj.metadata["model.ln_eps"] = "1e-6";
    const auto mls = resolve_model_load(traj);
    CHECK(mls.n_heads == 4);
    CHECK(mls.ln_eps == 1e-6);

    const auto forced = resolve_model_load(traj, 8);
    CHECK(forced.n_heads == 8);

    Trajectory bare;
    CHECK_THROWS_AS(resolve_model_load(bare), ConfigError);
    CHECK(resolve_model_load(bare, 2).n_heads == 2);
}
