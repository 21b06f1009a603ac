// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "linex/analyzer.hpp"
#include "linex/csv.hpp"

using namespace linex;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const char* tag) {
        path = std::filesystem::temp_directory_path() /
               (std::string("linex_analyzer_") + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

ModelConfig small_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.context_len = 16;
    cfg.seed = seed;
    return cfg;
}

Trajectory make_trajectory(const std::filesystem::path& dir,
                           std::span<const Checkpoint> ckpts) {
    Trajectory traj;
    traj.run_id = "test";
    traj.base_dir = dir;
    for (const auto& ck : ckpts) {
        const std::string file = "ckpt_" + std::to_string(ck.step) + ".lnxt";
        write_checkpoint(ck, dir / file);
        traj.entries.push_back({ck.step, file});
    }
    return traj;
}

// Trajectory whose stored values are exact affine functions of the step.
Trajectory linear_trajectory(const std::filesystem::path& dir,
                             std::span<const std::uint64_t> steps,
                             std::span<const double> intercepts,
                             std::span<const double> slopes) {
    std::vector<Checkpoint> ckpts;
    for (const auto s : steps) {
        Checkpoint ck;
        ck.step = s;
        TensorData t;
        t.name = "w";
        t.dtype = DType::F64;
        t.dims = {intercepts.size()};
        for (std::size_t i = 0; i < intercepts.size(); ++i)
            t.values.push_back(intercepts[i] + slopes[i] * static_cast<double>(s));
        ck.tensors.push_back(std::move(t));
        ckpts.push_back(std::move(ck));
    }
    return make_trajectory(dir, ckpts);
}

LogprobMatrix three_row_matrix() {
    LogprobMatrix m;
    m.steps = {0, 10, 20};
    m.rows = {{2, "2", 5}, {13, "<eos>", 6}, {7, "7", 1}};
    m.values = {-0.5, -0.5, -0.5,   // constant
                -9.0, -6.0, -3.0,   // exact line, steep
                -1.0, -9.0, -1.0};  // symmetric vee, slope 0
    return m;
}

}  // namespace

TEST_CASE("sampled indices are deterministic, sorted, distinct, and clamped") {
    SamplingPlan plan;
    plan.fraction = 0.5;
    plan.seed = 42;

    const auto a = sampled_indices(plan, "emb.tok", 100);
    const auto b = sampled_indices(plan, "emb.tok", 100);
    CHECK(a == b);
    CHECK(a.size() == 50);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    for (auto i : a) CHECK(i < 100);

    // Per-tensor keying: a different name draws a different set.
    const auto other = sampled_indices(plan, "head", 100);
    CHECK(a != other);
    plan.per_tensor = false;
    CHECK(sampled_indices(plan, "emb.tok", 100) == sampled_indices(plan, "head", 100));
    plan.per_tensor = true;

    // Count clamps: at least one index, at most all of them.
    SamplingPlan tiny;
    tiny.fraction = 1e-9;
    CHECK(sampled_indices(tiny, "w", 10).size() == 1);
    SamplingPlan full;
    full.fraction = 1.0;
    std::vector<std::uint64_t> want(10);
    for (std::uint64_t i = 0; i < 10; ++i) want[i] = i;
    CHECK(sampled_indices(full, "w", 10) == want);
    CHECK(sampled_indices(plan, "w", 0).empty());

    // Dense fractions use the partial-shuffle path; same guarantees.
    SamplingPlan dense;
    dense.fraction = 0.9;
    const auto d = sampled_indices(dense, "w", 10);
    CHECK(d.size() == 9);
    CHECK(std::is_sorted(d.begin(), d.end()));
    CHECK(std::adjacent_find(d.begin(), d.end()) == d.end());

    SamplingPlan bad;
    bad.fraction = 0.0;
    CHECK_THROWS_AS(sampled_indices(bad, "w", 10), ConfigError);
    bad.fraction = 1.5;
    CHECK_THROWS_AS(sampled_indices(bad, "w", 10), ConfigError);
}

TEST_CASE("r2 histogram edges span [0, 1] in 0.05 steps") {
    const auto edges = r2_histogram_edges();
    REQUIRE(edges.size() == 21);
    CHECK(edges.front() == 0.0);
    CHECK(edges.back() == 1.0);
    CHECK(edges[13] == doctest::Approx(0.65).epsilon(1e-15));
}

TEST_CASE("weight analysis recovers exact linear evolution") {
    TempDir dir("linear");
    const std::vector<std::uint64_t> steps{0, 10, 20, 30};
    const std::vector<double> intercepts{1.0, 2.0, -3.0, 0.25};
    const std::vector<double> slopes{0.01, -0.02, 0.5, 0.0};  // last one constant
    const auto traj = linear_trajectory(dir.path, steps, intercepts, slopes);

    SamplingPlan plan;
    plan.fraction = 1.0;
    FilterPolicy filter;
    filter.min_changes = 3;

    const auto wa = analyze_weights(traj, plan, filter, 0, 1);
    CHECK(wa.steps == steps);
    CHECK_FALSE(wa.few_checkpoints);
    CHECK(wa.warmup_steps == 0);
    REQUIRE(wa.rows.size() == 4);
    for (const auto& row : wa.rows) {
        CHECK(row.tensor == "w");
        const auto i = row.index;
        if (slopes[i] == 0.0) {
            CHECK(row.fit.constant);
            CHECK(row.fit.filtered);
        } else {
            CHECK_FALSE(row.fit.filtered);
            CHECK(row.fit.slope == doctest::Approx(slopes[i]).epsilon(1e-12));
            CHECK(row.fit.intercept == doctest::Approx(intercepts[i]).epsilon(1e-12));
            CHECK(row.fit.r2 >= 1.0 - 1e-10);
        }
    }
    REQUIRE(wa.tensors.size() == 1);
    const auto& ga = wa.tensors[0];
    CHECK(ga.name == "w");
    CHECK(ga.sampled == 4);
    CHECK(ga.filtered == 1);
    CHECK(ga.constant == 1);
    CHECK(ga.mean_r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ga.fraction_above_threshold == 1.0);
    CHECK(wa.hist.total == 3);
    CHECK(wa.hist.median_r2 >= 1.0 - 1e-10);
    CHECK(wa.hist.fraction_above_threshold == 1.0);

    // Warmup cut keeps only the tail; two checkpoints flag trivial fits.
    const auto tail = analyze_weights(traj, plan, filter, 15, 1);
    CHECK(tail.steps == std::vector<std::uint64_t>{20, 30});
    CHECK(tail.few_checkpoints);
    CHECK(tail.warmup_steps == 15);

    CHECK_THROWS_AS(analyze_weights(traj, plan, filter, 25, 1), ConfigError);

    // Worker count must not change any fit.
    const auto wa4 = analyze_weights(traj, plan, filter, 0, 4);
    REQUIRE(wa4.rows.size() == wa.rows.size());
    for (std::size_t i = 0; i < wa.rows.size(); ++i) {
        CHECK(wa4.rows[i].fit.slope == wa.rows[i].fit.slope);
        CHECK(wa4.rows[i].fit.r2 == wa.rows[i].fit.r2);
    }
}

TEST_CASE("weight analysis rejects a manifest/header step mismatch") {
    TempDir dir("mismatch");
    Checkpoint ck;
    ck.step = 99;  // file says 99
    TensorData t;
    t.name = "w";
    t.dtype = DType::F64;
    t.dims = {2};
    t.values = {1.0, 2.0};
    ck.tensors.push_back(t);
    write_checkpoint(ck, dir.path / "a.lnxt");
    ck.step = 10;
    write_checkpoint(ck, dir.path / "b.lnxt");

    Trajectory traj;
    traj.base_dir = dir.path;
    traj.entries = {{0, "a.lnxt"}, {10, "b.lnxt"}};  // manifest says 0

    SamplingPlan plan;
    plan.fraction = 1.0;
    CHECK_THROWS_WITH_AS(analyze_weights(traj, plan, FilterPolicy{}, 0, 1),
                         doctest::Contains("manifest"), FormatError);
}

TEST_CASE("weight summary artifacts carry the documented schema") {
    TempDir dir("wjson");
    const std::vector<std::uint64_t> steps{0, 10, 20};
    const std::vector<double> intercepts{1.0, 2.0};
    const std::vector<double> slopes{0.1, 0.2};
    const auto traj = linear_trajectory(dir.path, steps, intercepts, slopes);
    SamplingPlan plan;
    plan.fraction = 1.0;
    FilterPolicy filter;
    filter.min_changes = 2;
    const auto wa = analyze_weights(traj, plan, filter, 0, 1);

    const auto fits_csv = dir.path / "fits.csv";
    write_weight_fits_csv(fits_csv, wa.rows);
    const auto fit_rows = read_csv(fits_csv);
    REQUIRE(fit_rows.size() == 3);
    CHECK(fit_rows[0] == std::vector<std::string>{"tensor", "index", "slope", "intercept",
                                                  "r2", "filtered"});
    CHECK(fit_rows[1][0] == "w");
    CHECK(fit_rows[1][5] == "0");

    const auto summary_csv = dir.path / "layers.csv";
    write_layer_summary_csv(summary_csv, wa.tensors);
    const auto sum_rows = read_csv(summary_csv);
    REQUIRE(sum_rows.size() == 2);
    CHECK(sum_rows[0] == std::vector<std::string>{"group", "sampled", "filtered", "constant",
                                                  "mean_r2", "fraction_r2_gt_0.7"});

    const auto json_path = dir.path / "summary.json";
    write_weight_summary_json(json_path, wa, plan, filter);
    std::ifstream in(json_path);
    REQUIRE(in);
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("kind") == "weights");
    CHECK(j.at("tool_version") == kToolVersion);
    CHECK(j.at("steps").get<std::vector<std::uint64_t>>() == steps);
    CHECK(j.at("n_series").get<std::size_t>() == 2);
    CHECK(j.at("median_r2").get<double>() >= 1.0 - 1e-10);
    CHECK(j.at("sampling").at("fraction").get<double>() == 1.0);
    CHECK(j.at("filter").at("min_changes").get<std::uint64_t>() == 2);
    CHECK(j.at("histogram").at("counts").size() == 20);
    CHECK(j.at("groups").size() == 1);
    CHECK(j.at("groups")[0].at("name") == "w");
}

TEST_CASE("probe generation prefixes sampled prompts and tracks completions") {
    const auto model = PolicyModel::init(small_config(77));
    TaskSpec task;
    task.kind = TaskKind::ModArith;
    task.modulus = 5;
    ProbeGenOptions opts;
    opts.n_prompts = 2;
    opts.samples_per_prompt = 3;
    opts.seed = 5150;

    const auto probes = generate_probes(model, task, opts);
    REQUIRE(probes.size() == 6);
    for (int p = 0; p < 2; ++p) {
        Rng prng(derive_seed(opts.seed, static_cast<std::uint64_t>(p), 0, 1));
        const auto prompt = task.sample_prompt(prng);
        for (int s = 0; s < 3; ++s) {
            const auto& probe = probes[static_cast<std::size_t>(p * 3 + s)];
            CHECK(probe.track_from == prompt.size());
            REQUIRE(probe.tokens.size() > prompt.size());
            CHECK(std::equal(prompt.begin(), prompt.end(), probe.tokens.begin()));
            CHECK(static_cast<int>(probe.tokens.size() - prompt.size()) <=
                  task.max_completion_tokens());
        }
    }
    const auto again = generate_probes(model, task, opts);
    REQUIRE(again.size() == probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
        CHECK(again[i].tokens == probes[i].tokens);
        CHECK(again[i].track_from == probes[i].track_from);
    }

    ProbeGenOptions bad = opts;
    bad.n_prompts = 0;
    CHECK_THROWS_AS(generate_probes(model, task, bad), ConfigError);
    bad = opts;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(generate_probes(model, task, bad), ConfigError);
}

TEST_CASE("probe logprob matrix matches direct teacher forcing") {
    TempDir dir("probes");
    std::vector<Checkpoint> ckpts;
    std::vector<PolicyModel> models;
    const std::uint64_t steps[3] = {0, 10, 20};
    const std::uint64_t seeds[3] = {101, 202, 303};
    for (int i = 0; i < 3; ++i) {
        models.push_back(PolicyModel::init(small_config(seeds[i])));
        ckpts.push_back(models.back().to_checkpoint(steps[i]));
    }
    const auto traj = make_trajectory(dir.path, ckpts);
    const ModelLoadSpec mls{2, 1e-5};

    std::vector<Probe> probes;
    probes.push_back({{kTokBos, 3, kTokPlus, 4, kTokEquals, 2, kTokEos}, 5});
    probes.push_back({{kTokBos, 1, kTokTimes, 2}, 0});  // track_from clamps to 1

    const auto m = probe_logprobs(traj, probes, mls, 0, 1);
    CHECK(m.steps == std::vector<std::uint64_t>{0, 10, 20});
    REQUIRE(m.rows.size() == 5);  // positions 5,6 then 1,2,3
    CHECK(m.rows[0].pos == 5);
    CHECK(m.rows[0].token_id == 2);
    CHECK(m.rows[0].token_str == "2");
    CHECK(m.rows[1].pos == 6);
    CHECK(m.rows[1].token_id == kTokEos);
    CHECK(m.rows[2].pos == 1);
    CHECK(m.rows[4].pos == 3);
    REQUIRE(m.values.size() == 15);

    const int V = models[0].config().vocab_size;
    for (std::size_t j = 0; j < 3; ++j) {
        std::size_t row = 0;
        for (const auto& probe : probes) {
            const auto fr = forward(models[j], probe.tokens);
            for (std::size_t i = std::max<std::size_t>(probe.track_from, 1);
                 i < probe.tokens.size(); ++i, ++row) {
                std::span<const double> logits(
                    fr.logits.data() + (i - 1) * static_cast<std::size_t>(V),
                    static_cast<std::size_t>(V));
                CHECK(m.at(row, j) == token_logprob(logits, probe.tokens[i], 1.0));
            }
        }
    }

    // Worker count must not change the matrix.
    const auto m3 = probe_logprobs(traj, probes, mls, 0, 3);
    CHECK(m3.values == m.values);

    // Warmup keeps {10, 20}; columns shift accordingly.
    const auto warm = probe_logprobs(traj, probes, mls, 5, 1);
    CHECK(warm.steps == std::vector<std::uint64_t>{10, 20});
    CHECK(warm.at(0, 0) == m.at(0, 1));

    CHECK_THROWS_AS(probe_logprobs(traj, {}, mls, 0, 1), ConfigError);
    CHECK_THROWS_AS(probe_logprobs(traj, probes, mls, 15, 1), ConfigError);
    std::vector<Probe> no_positions;
    no_positions.push_back({{kTokBos, 1}, 2});  // tracks nothing
    CHECK_THROWS_AS(probe_logprobs(traj, no_positions, mls, 0, 1), ConfigError);
    std::vector<Probe> too_long;
    too_long.push_back({std::vector<int>(17, 1), 1});
    CHECK_THROWS_AS(probe_logprobs(traj, too_long, mls, 0, 1), ConfigError);
    std::vector<Probe> bad_token;
    bad_token.push_back({{kTokBos, 24}, 1});
    CHECK_THROWS_AS(probe_logprobs(traj, bad_token, mls, 0, 1), ConfigError);
}

TEST_CASE("logprob matrix export and import round trip") {
    TempDir dir("matrix");
    const auto m = three_row_matrix();
    const auto path = dir.path / "m.csv";
    export_logprob_matrix(m, path);

    const auto raw = read_csv(path);
    REQUIRE(raw.size() == 4);
    CHECK(raw[0] == std::vector<std::string>{"token_id", "token_str", "pos", "step_0",
                                             "step_10", "step_20"});

    const auto back = import_logprob_matrix(path);
    CHECK(back.steps == m.steps);
    REQUIRE(back.rows.size() == m.rows.size());
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
        CHECK(back.rows[r].token_id == m.rows[r].token_id);
        CHECK(back.rows[r].token_str == m.rows[r].token_str);
        CHECK(back.rows[r].pos == m.rows[r].pos);
    }
    CHECK(back.values == m.values);
}

TEST_CASE("logprob matrix import rejects malformed files with line numbers") {
    TempDir dir("badmatrix");
    const auto path = dir.path / "bad.csv";

    auto write_text = [&](const std::string& text) {
        std::ofstream out(path);
        out << text;
    };

    write_text("");
    CHECK_THROWS_AS(import_logprob_matrix(path), FormatError);

    write_text("token_id,token_str,pos\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path), doctest::Contains("line 1"), FormatError);

    write_text("wrong,token_str,pos,step_0\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path), doctest::Contains("line 1"), FormatError);

    write_text("token_id,token_str,pos,step_10,step_5\n1,x,1,-1,-2\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path),
                         doctest::Contains("strictly increasing"), FormatError);

    write_text("token_id,token_str,pos,step_5,step_5\n1,x,1,-1,-2\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path),
                         doctest::Contains("strictly increasing"), FormatError);

    write_text("token_id,token_str,pos,chapter_5\n1,x,1,-1\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path), doctest::Contains("step_"), FormatError);

    write_text("token_id,token_str,pos,step_0\n1,x,1,-1\n2,y,2\n");
    CHECK_THROWS_WITH_AS(import_logprob_matrix(path), doctest::Contains("line 3"), FormatError);

    write_text("token_id,token_str,pos,step_0\n1,x,1,abc\n");
    CHECK_THROWS_AS(import_logprob_matrix(path), FormatError);

    write_text("token_id,token_str,pos,step_0\nnope,x,1,-1\n");
    CHECK_THROWS_AS(import_logprob_matrix(path), FormatError);
}

TEST_CASE("token categorization separates stable, linear, and volatile rows") {
    const auto m = three_row_matrix();
    const auto ta = categorize_tokens(m, 0.1, 0.7);
    CHECK(ta.var_threshold == 0.1);
    CHECK(ta.r2_threshold == 0.7);
    REQUIRE(ta.rows.size() == 3);

    CHECK(ta.rows[0].category == TokenCategory::Stable);
    CHECK(ta.rows[0].std_logprob == 0.0);
    CHECK(ta.rows[1].category == TokenCategory::ConnectorLinear);
    CHECK(ta.rows[1].std_logprob == doctest::Approx(std::sqrt(6.0)).epsilon(1e-12));
    CHECK(ta.rows[1].fit.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ta.rows[1].fit.slope == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(ta.rows[2].category == TokenCategory::Volatile);
    CHECK(ta.rows[2].fit.r2 == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ta.n_stable == 1);
    CHECK(ta.n_connector_linear == 1);
    CHECK(ta.n_volatile == 1);

    CHECK(token_category_name(TokenCategory::Stable) == "STABLE");
    CHECK(token_category_name(TokenCategory::ConnectorLinear) == "CONNECTOR_LINEAR");
    CHECK(token_category_name(TokenCategory::Volatile) == "VOLATILE");

    // A generous variance threshold reclassifies everything as stable.
    const auto loose = categorize_tokens(m, 100.0, 0.7);
    CHECK(loose.n_stable == 3);

    LogprobMatrix two = m;
    two.steps = {0, 10};
    two.values = {-0.5, -0.5, -9.0, -6.0, -1.0, -9.0};
    CHECK_THROWS_AS(categorize_tokens(two, 0.1, 0.7), ConfigError);

    LogprobMatrix ragged = m;
    ragged.values.pop_back();
    CHECK_THROWS_AS(categorize_tokens(ragged, 0.1, 0.7), FormatError);
}

TEST_CASE("token analysis artifacts") {
    TempDir dir("tokens");
    const auto ta = categorize_tokens(three_row_matrix(), 0.1, 0.7);

    const auto csv_path = dir.path / "tokens.csv";
    write_token_fits_csv(csv_path, ta);
    const auto rows = read_csv(csv_path);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == std::vector<std::string>{"token_id", "token_str", "pos", "slope",
                                              "intercept", "r2", "std", "category"});
    CHECK(rows[1][7] == "STABLE");
    CHECK(rows[2][7] == "CONNECTOR_LINEAR");
    CHECK(rows[3][7] == "VOLATILE");

    const auto json_path = dir.path / "tokens.json";
    write_token_summary_json(json_path, ta);
    std::ifstream in(json_path);
    REQUIRE(in);
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("kind") == "tokens");
    CHECK(j.at("n_rows").get<std::size_t>() == 3);
    CHECK(j.at("counts").at("STABLE").get<int>() == 1);
    CHECK(j.at("counts").at("CONNECTOR_LINEAR").get<int>() == 1);
    CHECK(j.at("counts").at("VOLATILE").get<int>() == 1);
}

TEST_CASE("activation analysis over identical checkpoints marks everything constant") {
    TempDir dir("actconst");
    const auto model = PolicyModel::init(small_config(7));
    const std::vector<Checkpoint> ckpts{model.to_checkpoint(0), model.to_checkpoint(10),
                                        model.to_checkpoint(20)};
    const auto traj = make_trajectory(dir.path, ckpts);
    const ModelLoadSpec mls{2, 1e-5};

    std::vector<Probe> probes;
    probes.push_back({{kTokBos, 3, kTokPlus, 4}, 1});
    SamplingPlan plan;
    plan.fraction = 0.25;

    const auto aa = analyze_activations(traj, probes, {}, plan, FilterPolicy{}, mls, 0, 1);
    CHECK(aa.steps == std::vector<std::uint64_t>{0, 10, 20});
    CHECK_FALSE(aa.few_checkpoints);
    CHECK(aa.rows.size() > 0);
    for (const auto& row : aa.rows) {
        CHECK(row.fit.constant);
        CHECK(row.fit.filtered);
    }
    // Default taps for a one-block model.
    REQUIRE(aa.taps.size() == 2);
    CHECK(aa.taps[0].name == "blk0.out");
    CHECK(aa.taps[1].name == "logits");
    for (const auto& ga : aa.taps) {
        CHECK(ga.filtered == ga.sampled);
        CHECK(std::isnan(ga.mean_r2));
    }
    CHECK(aa.hist.empty);
    CHECK(aa.hist.total == 0);
}

TEST_CASE("activation analysis row layout, thread invariance, and artifacts") {
    TempDir dir("act");
    const std::vector<Checkpoint> ckpts{
        PolicyModel::init(small_config(101)).to_checkpoint(0),
        PolicyModel::init(small_config(202)).to_checkpoint(10)};
    const auto traj = make_trajectory(dir.path, ckpts);
    const ModelLoadSpec mls{2, 1e-5};

    std::vector<Probe> probes;
    probes.push_back({{kTokBos, 3, kTokPlus, 4}, 1});        // 4 positions
    probes.push_back({{kTokBos, 1, kTokTimes, 2, kTokEquals}, 1});  // 5 positions
    SamplingPlan plan;
    plan.fraction = 1.0;
    FilterPolicy filter;
    filter.min_changes = 1;

    const std::vector<std::string> taps{"blk0.out", "logits"};
    const auto aa = analyze_activations(traj, probes, taps, plan, filter, mls, 0, 1);
    CHECK(aa.few_checkpoints);
    // All coordinates sampled: 9 positions x 16 dims + 9 x 24 vocab.
    REQUIRE(aa.rows.size() == 9 * 16 + 9 * 24);
    for (const auto& row : aa.rows) {
        const int dim = row.tap == "logits" ? 24 : 16;
        const int n_pos = row.probe == 0 ? 4 : 5;
        CHECK(row.pos < n_pos);
        CHECK(row.coord < dim);
        CHECK(row.fit.n == 2);
    }
    std::uint64_t filtered_total = 0;
    for (const auto& ga : aa.taps) filtered_total += ga.filtered;
    CHECK(aa.hist.total + filtered_total == aa.rows.size());

    const auto aa3 = analyze_activations(traj, probes, taps, plan, filter, mls, 0, 3);
    REQUIRE(aa3.rows.size() == aa.rows.size());
    for (std::size_t i = 0; i < aa.rows.size(); ++i) {
        CHECK(aa3.rows[i].fit.slope == aa.rows[i].fit.slope);
        CHECK(aa3.rows[i].fit.r2 == aa.rows[i].fit.r2);
    }

    const auto csv_path = dir.path / "act.csv";
    write_activation_fits_csv(csv_path, aa.rows);
    const auto rows = read_csv(csv_path);
    CHECK(rows[0] == std::vector<std::string>{"tap", "probe", "pos", "coord", "slope",
                                              "intercept", "r2", "filtered"});
    CHECK(rows.size() == aa.rows.size() + 1);

    const auto json_path = dir.path / "act.json";
    write_activation_summary_json(json_path, aa, plan);
    std::ifstream in(json_path);
    REQUIRE(in);
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("kind") == "activations");
    CHECK(j.at("few_checkpoints").get<bool>());
    CHECK(j.at("groups").size() == 2);

    CHECK_THROWS_WITH_AS(analyze_activations(traj, probes, {"blk7.out"}, plan, filter, mls,
                                             0, 1),
                         doctest::Contains("valid taps"), ConfigError);
    CHECK_THROWS_AS(analyze_activations(traj, {}, taps, plan, filter, mls, 0, 1), ConfigError);
}

TEST_CASE("output-change decomposition: hand case and exact identity") {
    // W0 = I; W1 adds a one in the corner; x moves along the second axis.
    const Matrix w0{2, 2, {1.0, 0.0, 0.0, 1.0}};
    const Matrix w1{2, 2, {1.0, 1.0, 0.0, 1.0}};
    const std::vector<double> x0{1.0, 0.0};
    const std::vector<double> x1{1.0, 1.0};
    const auto rep = decompose_output_change(w0, w1, x0, x1);
    CHECK(rep.first_order_weight == 0.0);
    CHECK(rep.first_order_input == 1.0);
    CHECK(rep.second_order == 1.0);
    CHECK(rep.total == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    CHECK(rep.residual == 0.0);

    // Random instances satisfy the identity to roundoff.
    Rng rng(99);
    for (int rep_i = 0; rep_i < 100; ++rep_i) {
        Matrix a{4, 4, {}};
        Matrix b{4, 4, {}};
        std::vector<double> u(4), v(4);
        for (int i = 0; i < 16; ++i) a.v.push_back(rng.normal());
        for (int i = 0; i < 16; ++i) b.v.push_back(rng.normal());
        for (int i = 0; i < 4; ++i) u[static_cast<std::size_t>(i)] = rng.normal();
        for (int i = 0; i < 4; ++i) v[static_cast<std::size_t>(i)] = rng.normal();
        const auto r = decompose_output_change(a, b, u, v);
        CHECK(r.residual <= 1e-12);
        CHECK(r.total >= 0.0);
    }

    // Nothing changed: every term is exactly zero.
    const auto zero = decompose_output_change(w0, w0, x0, x0);
    CHECK(zero.first_order_weight == 0.0);
    CHECK(zero.first_order_input == 0.0);
    CHECK(zero.second_order == 0.0);
    CHECK(zero.total == 0.0);
    CHECK(zero.residual == 0.0);

    const Matrix wide{2, 3, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0}};
    CHECK_THROWS_AS(decompose_output_change(w0, wide, x0, x1), ConfigError);
    const std::vector<double> x_long{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(decompose_output_change(w0, w1, x_long, x1), ConfigError);
    Matrix short_v = w0;
    short_v.v.pop_back();
    CHECK_THROWS_AS(decompose_output_change(short_v, w1, x0, x1), ConfigError);
}

TEST_CASE("trajectory decomposition wires taps and weights per probe position") {
    TempDir dir("decomp");
    const auto m0 = PolicyModel::init(small_config(101));
    const auto m1 = PolicyModel::init(small_config(202));
    const std::vector<Checkpoint> ckpts{m0.to_checkpoint(0), m1.to_checkpoint(10)};
    const auto traj = make_trajectory(dir.path, ckpts);
    const ModelLoadSpec mls{2, 1e-5};

    std::vector<Probe> probes;
    probes.push_back({{kTokBos, 3, kTokPlus, 4, kTokEquals}, 1});
    probes.push_back({{kTokBos, 2}, 1});

    const auto rows = decompose_trajectory(traj, 0, 10, probes, 0, mls);
    REQUIRE(rows.size() == 7);  // 5 + 2 positions
    CHECK(rows[0].probe == 0);
    CHECK(rows[0].pos == 0);
    CHECK(rows[5].probe == 1);
    CHECK(rows[6].pos == 1);

    // Replicate one row by hand from the public pieces.
    const auto& up0 = m0.tensor("blk0.mlp.up");
    const auto& up1 = m1.tensor("blk0.mlp.up");
    Matrix w0{up0.dims[0], up0.dims[1], {up0.v.begin(), up0.v.end()}};
    Matrix w1{up1.dims[0], up1.dims[1], {up1.v.begin(), up1.v.end()}};
    const std::vector<std::string> taps{"blk0.mlp_in"};
    const auto f0 = forward(m0, probes[0].tokens, &taps);
    const auto f1 = forward(m1, probes[0].tokens, &taps);
    const auto& x0 = f0.taps.at("blk0.mlp_in");
    const auto& x1 = f1.taps.at("blk0.mlp_in");
    const std::size_t dim = w0.cols;
    const std::size_t pos = 2;
    const auto want = decompose_output_change(
        w0, w1, std::span<const double>(x0.data() + pos * dim, dim),
        std::span<const double>(x1.data() + pos * dim, dim));
    CHECK(rows[2].rep.first_order_weight == want.first_order_weight);
    CHECK(rows[2].rep.first_order_input == want.first_order_input);
    CHECK(rows[2].rep.second_order == want.second_order);
    CHECK(rows[2].rep.total == want.total);
    const double first = want.first_order_weight + want.first_order_input;
    CHECK(rows[2].ratio_second_to_first == want.second_order / first);
    for (const auto& r : rows) CHECK(r.rep.residual <= 1e-10);

    // Identical endpoints: every term vanishes.
    TempDir dir2("decompzero");
    const std::vector<Checkpoint> same{m0.to_checkpoint(0), m0.to_checkpoint(10)};
    const auto traj2 = make_trajectory(dir2.path, same);
    const auto zeros = decompose_trajectory(traj2, 0, 10, probes, 0, mls);
    for (const auto& r : zeros) {
        CHECK(r.rep.first_order_weight == 0.0);
        CHECK(r.rep.first_order_input == 0.0);
        CHECK(r.rep.second_order == 0.0);
        CHECK(r.rep.total == 0.0);
        CHECK(r.ratio_second_to_first == 0.0);
    }

    const auto csv_path = dir.path / "decomp.csv";
    write_decomposition_csv(csv_path, rows);
    const auto csv = read_csv(csv_path);
    REQUIRE(csv.size() == 8);
    CHECK(csv[0] == std::vector<std::string>{"probe", "pos", "first_order_weight",
                                             "first_order_input", "second_order", "total",
                                             "residual", "ratio_second_to_first"});

    CHECK_THROWS_AS(decompose_trajectory(traj, 0, 10, probes, 1, mls), ConfigError);
    CHECK_THROWS_AS(decompose_trajectory(traj, 0, 10, probes, -1, mls), ConfigError);
    CHECK_THROWS_WITH_AS(decompose_trajectory(traj, 0, 7, probes, 0, mls),
                         doctest::Contains("available"), ConfigError);
    CHECK_THROWS_AS(decompose_trajectory(traj, 0, 10, {}, 0, mls), ConfigError);
}
