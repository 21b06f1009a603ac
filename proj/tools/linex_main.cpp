// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0
//
// linex: train a small RLVR policy, measure how its weights, activations,
// and token log-probs evolve across checkpoints, and extrapolate along that
// trajectory (virtual lookahead checkpoints, decode-time logit mixing).
//
// Results go to stdout; progress and warnings go to stderr. Exit codes:
// 0 success, 2 bad configuration or input, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "linex/analyzer.hpp"
#include "linex/config.hpp"
#include "linex/csv.hpp"
#include "linex/extrapolate.hpp"
#include "linex/rlvr.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Every command drops one of these next to its outputs; re-running the
// recorded argv reproduces the outputs bit-identically apart from wall_ms.
struct Manifest {
    ordered_json j;
    Clock::time_point start = Clock::now();

    Manifest(const std::string& command, int argc, char** argv) {
        j["command"] = command;
        std::vector<std::string> args(argv, argv + argc);
        j["argv"] = args;
        j["tool_version"] = linex::kToolVersion;
    }

    void write(const fs::path& dir) {
        j["wall_ms"] = ms_since(start);
        const fs::path path = dir / "run_manifest.json";
        std::ofstream out(path);
        if (!out) throw linex::IoError("cannot open for writing: " + path.string());
        out << j.dump(2) << '\n';
    }
};

fs::path ensure_out_dir(const std::string& out) {
    if (out.empty()) throw linex::ConfigError("--out is required");
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw linex::IoError("cannot create output directory " + dir.string() + ": " +
                                 ec.message());
    return dir;
}

// --traj accepts the manifest file or the run directory containing it.
linex::Trajectory load_traj_arg(const std::string& arg) {
    fs::path p(arg);
    if (fs::is_directory(p)) p /= "trajectory.json";
    if (!fs::exists(p)) throw linex::ConfigError("trajectory manifest not found: " + p.string());
    return linex::load_trajectory(p);
}

struct ProbeFlags {
    int n_prompts = 8;
    int samples_per_prompt = 16;
    double temperature = 1.0;
    std::uint64_t seed = 4242;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--probe-prompts", n_prompts, "Prompts sampled for probes");
        cmd->add_option("--probe-samples", samples_per_prompt, "Completions decoded per prompt");
        cmd->add_option("--probe-temperature", temperature, "Probe decode temperature");
        cmd->add_option("--probe-seed", seed, "Probe prompt/decode seed");
    }

    // Probes always come from the earliest checkpoint so every later
    // checkpoint is scored on the same fixed sequences.
    std::vector<linex::Probe> make(const linex::Trajectory& traj,
                                   const linex::ModelLoadSpec& mls) const {
        if (traj.entries.empty()) throw linex::ConfigError("trajectory has no checkpoints");
        linex::CheckpointReader reader(traj.base_dir / traj.entries.front().file);
        const auto model = linex::PolicyModel::from_checkpoint(reader, mls.n_heads, mls.ln_eps);
        linex::ProbeGenOptions opts;
        opts.n_prompts = n_prompts;
        opts.samples_per_prompt = samples_per_prompt;
        opts.temperature = temperature;
        opts.seed = seed;
        return linex::generate_probes(model, linex::task_from_metadata(traj), opts);
    }

    ordered_json json() const {
        return {{"prompts", n_prompts},
                {"samples_per_prompt", samples_per_prompt},
                {"temperature", temperature},
                {"seed", seed}};
    }
};

linex::ScheduleSpec parse_schedule_arg(const std::string& arg) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : arg) {
        if (c == ',') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    if (parts.size() < 2 || parts.size() > 3)
        throw linex::ConfigError("--schedule expects m,n[,beta], got \"" + arg + "\"");
    linex::ScheduleSpec s;
    s.m = static_cast<int>(linex::parse_int(parts[0], "--schedule m"));
    s.n = static_cast<int>(linex::parse_int(parts[1], "--schedule n"));
    if (parts.size() == 3) s.beta = linex::parse_double(parts[2], "--schedule beta");
    return s;
}

// ------------------------------------------------------------------ train

struct TrainCmd {
    std::string config_path, out_dir, schedule, run_id, anchor, extra_adam;
    std::uint64_t steps = 0, ckpt_every = 0, seed = 0;
    int threads = -1;
    bool quiet = false;
    CLI::Option *o_out = nullptr, *o_schedule = nullptr, *o_steps = nullptr, *o_ckpt = nullptr,
                *o_seed = nullptr, *o_threads = nullptr, *o_run_id = nullptr, *o_anchor = nullptr,
                *o_extra = nullptr;

    void add_to(CLI::App& app) {
        auto* cmd = app.add_subcommand("train", "Run GRPO with an optional extrapolation schedule");
        cmd->add_option("--config", config_path, "Config file (sections model/task/grpo/schedule/io)");
        o_out = cmd->add_option("--out", out_dir, "Output directory");
        o_schedule = cmd->add_option("--schedule", schedule, "m,n[,beta] cycle spec");
        o_steps = cmd->add_option("--steps", steps, "Total global steps");
        o_ckpt = cmd->add_option("--ckpt-every", ckpt_every, "Checkpoint cadence in steps");
        o_seed = cmd->add_option("--seed", seed, "Run seed (model init derives from it)");
        o_threads = cmd->add_option("--threads", threads, "Worker threads (0: LINEX_THREADS or cores)");
        o_run_id = cmd->add_option("--run-id", run_id, "Run identifier in the manifest");
        o_anchor = cmd->add_option("--anchor", anchor, "Extrapolation anchor: chain|last_grad_pair");
        o_extra = cmd->add_option("--extra-adam", extra_adam, "Adam state across EXTRA: freeze|reset");
        cmd->add_flag("--quiet", quiet, "Suppress per-step progress on stderr");
        cmd->callback([this] { run(); });
    }

    void run() {
        linex::TrainConfig cfg;
        if (!config_path.empty()) cfg = linex::parse_train_config(config_path);
        if (o_out->count()) cfg.io.out_dir = out_dir;
        if (o_schedule->count()) {
            const auto s = parse_schedule_arg(schedule);
            cfg.schedule.m = s.m;
            cfg.schedule.n = s.n;
            cfg.schedule.beta = s.beta;
        }
        if (o_steps->count()) cfg.io.steps = steps;
        if (o_ckpt->count()) cfg.io.checkpoint_every = ckpt_every;
        if (o_seed->count()) cfg.io.seed = seed;
        if (o_threads->count()) cfg.io.threads = threads;
        if (o_run_id->count()) cfg.io.run_id = run_id;
        if (o_anchor->count()) cfg.schedule.anchor = linex::anchor_mode_from_name(anchor);
        if (o_extra->count()) cfg.schedule.extra_adam = linex::extra_adam_mode_from_name(extra_adam);
        cfg.resolve_seeds();
        cfg.validate();

        Manifest man("train", app_argc, app_argv);
        const fs::path dir = ensure_out_dir(cfg.io.out_dir.string());

        linex::TrainOptions topts;
        topts.total_steps = cfg.io.steps;
        topts.checkpoint_every = cfg.io.checkpoint_every;
        topts.seed = cfg.io.seed;
        topts.threads = cfg.io.threads;
        topts.out_dir = dir;
        topts.run_id = cfg.io.run_id;
        topts.quiet = quiet;

        const auto res = linex::train(cfg.model, cfg.task, cfg.grpo, cfg.schedule, topts);

        double last_reward = 0.0;
        for (const auto& m : res.metrics)
            if (m.phase == "GRAD") last_reward = m.mean_reward;
        std::printf("trained %llu steps (%zu checkpoints) -> %s\n",
                    static_cast<unsigned long long>(cfg.io.steps),
                    res.trajectory.entries.size(), dir.string().c_str());
        std::printf("final GRAD-step mean reward %s\n", linex::format_double(last_reward).c_str());

        man.j["config"] = linex::train_config_json(cfg);
        man.j["seeds"] = {{"run", cfg.io.seed}, {"model", cfg.model.seed}};
        man.j["outputs"] = {res.trajectory_path.string(), res.metrics_path.string()};
        man.write(dir);
    }

    int app_argc = 0;
    char** app_argv = nullptr;
};

// ---------------------------------------------------------------- analyze

struct AnalyzeCommon {
    std::string traj, out;
    double sample_frac = 0.001;
    std::uint64_t seed = 1;
    std::uint64_t warmup = 0;
    std::uint64_t min_changes = 3;
    int threads = 0;
    int n_heads = 0;

    void add_shared(CLI::App* cmd, bool with_sampling) {
        cmd->add_option("--traj", traj, "Trajectory manifest (file or run directory)");
        cmd->add_option("--out", out, "Output directory")->required();
        if (with_sampling) {
            cmd->add_option("--sample-frac", sample_frac, "Fraction of coordinates fit per tensor");
            cmd->add_option("--seed", seed, "Sampling seed");
            cmd->add_option("--min-changes", min_changes,
                            "Series with fewer distinct value changes are excluded");
        }
        cmd->add_option("--warmup-steps", warmup, "Ignore checkpoints before this step");
        cmd->add_option("--threads", threads, "Worker threads (0: LINEX_THREADS or cores)");
        cmd->add_option("--n-heads", n_heads, "Override head count when metadata lacks it");
    }

    linex::SamplingPlan plan() const { return {sample_frac, seed, true}; }
    linex::FilterPolicy filter() const {
        linex::FilterPolicy f;
        f.min_changes = min_changes;
        return f;
    }
};

struct AnalyzeWeightsCmd {
    AnalyzeCommon c;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App* analyze) {
        auto* cmd = analyze->add_subcommand("weights",
                                            "Fit each sampled weight against the step index");
        c.add_shared(cmd, true);
        cmd->callback([this] { run(); });
    }

    void run() {
        if (c.traj.empty()) throw linex::ConfigError("--traj is required");
        Manifest man("analyze weights", argc, argv);
        const auto traj = load_traj_arg(c.traj);
        const fs::path dir = ensure_out_dir(c.out);
        const auto wa = linex::analyze_weights(traj, c.plan(), c.filter(), c.warmup, c.threads);
        if (wa.few_checkpoints)
            std::fprintf(stderr,
                         "warning: only 2 checkpoints after warmup; every 2-point fit is exact\n");
        linex::write_weight_fits_csv(dir / "weight_fits.csv", wa.rows);
        linex::write_layer_summary_csv(dir / "layer_summary.csv", wa.tensors);
        linex::write_weight_summary_json(dir / "summary.json", wa, c.plan(), c.filter());
        std::printf("fit %zu weight series over %zu checkpoints: median r2 %s, fraction > 0.7 %s\n",
                    wa.rows.size(), wa.steps.size(),
                    linex::format_double(wa.hist.median_r2).c_str(),
                    linex::format_double(wa.hist.fraction_above_threshold).c_str());
        man.j["seeds"] = {{"sampling", c.seed}};
        man.j["inputs"] = {{"trajectory", c.traj}};
        man.j["outputs"] = {"weight_fits.csv", "layer_summary.csv", "summary.json"};
        man.write(dir);
    }
};

struct AnalyzeTokensCmd {
    AnalyzeCommon c;
    ProbeFlags probes;
    std::string import_path;
    double var_threshold = 0.1;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App* analyze) {
        auto* cmd = analyze->add_subcommand(
            "tokens", "Track probe-token log-probs across checkpoints and categorize them");
        c.add_shared(cmd, false);
        probes.add_to(cmd);
        cmd->add_option("--import", import_path,
                        "Categorize an existing exported log-prob matrix instead of a trajectory");
        cmd->add_option("--var-threshold", var_threshold,
                        "Stability cutoff on the log-prob std in nats");
        cmd->callback([this] { run(); });
    }

    void run() {
        Manifest man("analyze tokens", argc, argv);
        const fs::path dir = ensure_out_dir(c.out);
        linex::LogprobMatrix matrix;
        ordered_json outputs = ordered_json::array();
        if (!import_path.empty()) {
            matrix = linex::import_logprob_matrix(import_path);
            man.j["inputs"] = {{"matrix", import_path}};
        } else {
            if (c.traj.empty())
                throw linex::ConfigError("analyze tokens needs --traj or --import");
            const auto traj = load_traj_arg(c.traj);
            const auto mls = linex::resolve_model_load(traj, c.n_heads);
            matrix = linex::probe_logprobs(traj, probes.make(traj, mls), mls, c.warmup, c.threads);
            linex::export_logprob_matrix(matrix, dir / "logprob_matrix.csv");
            outputs.push_back("logprob_matrix.csv");
            man.j["inputs"] = {{"trajectory", c.traj}};
            man.j["probes"] = probes.json();
        }
        const auto ta = linex::categorize_tokens(matrix, var_threshold);
        linex::write_token_fits_csv(dir / "token_fits.csv", ta);
        linex::write_token_summary_json(dir / "summary.json", ta);
        outputs.push_back("token_fits.csv");
        outputs.push_back("summary.json");
        std::printf("categorized %zu token positions: %llu stable, %llu connector-linear, "
                    "%llu volatile\n",
                    ta.rows.size(), static_cast<unsigned long long>(ta.n_stable),
                    static_cast<unsigned long long>(ta.n_connector_linear),
                    static_cast<unsigned long long>(ta.n_volatile));
        man.j["seeds"] = {{"probe", probes.seed}};
        man.j["outputs"] = outputs;
        man.write(dir);
    }
};

struct AnalyzeActivationsCmd {
    AnalyzeCommon c;
    ProbeFlags probes;
    std::vector<std::string> taps;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App* analyze) {
        auto* cmd = analyze->add_subcommand(
            "activations", "Fit tapped activations on fixed probes against the step index");
        c.add_shared(cmd, true);
        probes.add_to(cmd);
        cmd->add_option("--tap", taps, "Tap names to analyze (default: all block outputs + logits)");
        cmd->callback([this] { run(); });
    }

    void run() {
        if (c.traj.empty()) throw linex::ConfigError("--traj is required");
        Manifest man("analyze activations", argc, argv);
        const auto traj = load_traj_arg(c.traj);
        const auto mls = linex::resolve_model_load(traj, c.n_heads);
        const fs::path dir = ensure_out_dir(c.out);
        const auto aa = linex::analyze_activations(traj, probes.make(traj, mls), taps, c.plan(),
                                                   c.filter(), mls, c.warmup, c.threads);
        if (aa.few_checkpoints)
            std::fprintf(stderr,
                         "warning: only 2 checkpoints after warmup; every 2-point fit is exact\n");
        linex::write_activation_fits_csv(dir / "activation_fits.csv", aa.rows);
        linex::write_layer_summary_csv(dir / "layer_summary.csv", aa.taps);
        linex::write_activation_summary_json(dir / "summary.json", aa, c.plan());
        std::printf("fit %zu activation series over %zu checkpoints: median r2 %s\n",
                    aa.rows.size(), aa.steps.size(),
                    linex::format_double(aa.hist.median_r2).c_str());
        man.j["seeds"] = {{"sampling", c.seed}, {"probe", probes.seed}};
        man.j["inputs"] = {{"trajectory", c.traj}};
        man.j["probes"] = probes.json();
        man.j["outputs"] = {"activation_fits.csv", "layer_summary.csv", "summary.json"};
        man.write(dir);
    }
};

// ------------------------------------------------------------ extrapolate

struct EvalFlags {
    int n_prompts = 64;
    int samples = 4;
    double temperature = 1.0;
    std::uint64_t seed = 9001;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--eval-prompts", n_prompts, "Held-out prompts per evaluation");
        cmd->add_option("--eval-samples", samples, "Decoded samples per prompt");
        cmd->add_option("--eval-temperature", temperature, "Evaluation decode temperature");
        cmd->add_option("--eval-seed", seed, "Evaluation seed (disjoint from training streams)");
    }

    linex::EvalOptions opts(int threads) const {
        linex::EvalOptions e;
        e.n_prompts = n_prompts;
        e.samples_per_prompt = samples;
        e.temperature = temperature;
        e.seed = seed;
        e.threads = threads;
        return e;
    }

    ordered_json json() const {
        return {{"prompts", n_prompts},
                {"samples_per_prompt", samples},
                {"temperature", temperature},
                {"seed", seed}};
    }
};

struct ExtrapolateWeightsCmd {
    std::string traj, out;
    std::int64_t t0 = 0, t1 = 0;
    std::vector<std::int64_t> targets;
    bool eval = false;
    EvalFlags ef;
    int threads = 0, n_heads = 0;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App* extrap) {
        auto* cmd = extrap->add_subcommand(
            "weights", "Project a virtual checkpoint past (t0, t1) along the weight line");
        cmd->add_option("--traj", traj, "Trajectory manifest (file or run directory)")->required();
        cmd->add_option("--t0", t0, "Anchor step t0")->required();
        cmd->add_option("--t1", t1, "Anchor step t1 (> t0)")->required();
        cmd->add_option("--target", targets, "Virtual step t'; repeatable")->required();
        cmd->add_option("--out", out, "Output directory")->required();
        cmd->add_flag("--eval", eval, "Also score every target on held-out prompts");
        ef.add_to(cmd);
        cmd->add_option("--threads", threads, "Worker threads (0: LINEX_THREADS or cores)");
        cmd->add_option("--n-heads", n_heads, "Override head count when metadata lacks it");
        cmd->callback([this] { run(); });
    }

    void run() {
        Manifest man("extrapolate weights", argc, argv);
        const auto trajectory = load_traj_arg(traj);
        const fs::path dir = ensure_out_dir(out);
        ordered_json outputs = ordered_json::array();
        for (std::int64_t target : targets) {
            linex::ExtrapolationSpec spec{t0, t1, target};
            char name[64];
            std::snprintf(name, sizeof(name), "extrap_step_%lld.lnxt",
                          static_cast<long long>(target));
            const auto res = linex::extrapolate_weights(trajectory, spec, dir / name);
            if (res.interpolation)
                std::fprintf(stderr,
                             "warning: target %lld gives coefficient %s <= 1; this interpolates "
                             "between the anchors instead of extrapolating\n",
                             static_cast<long long>(target),
                             linex::format_double(res.coefficient).c_str());
            std::printf("step %lld: coefficient %s -> %s\n", static_cast<long long>(target),
                        linex::format_double(res.coefficient).c_str(),
                        res.checkpoint_path.string().c_str());
            outputs.push_back(res.checkpoint_path.filename().string());
            outputs.push_back(res.metadata_path.filename().string());
        }
        if (eval) {
            const auto task = linex::task_from_metadata(trajectory);
            const auto mls = linex::resolve_model_load(trajectory, n_heads);
            std::vector<std::int64_t> grid = targets;
            std::sort(grid.begin(), grid.end());
            const auto points = linex::sweep_weight_extrapolation(trajectory, t0, t1, grid, task,
                                                                  ef.opts(threads), mls);
            linex::write_weight_sweep_csv(dir / "weight_sweep.csv", points);
            outputs.push_back("weight_sweep.csv");
            for (const auto& p : points)
                std::printf("eval step %llu: mean reward %s\n",
                            static_cast<unsigned long long>(p.t_prime),
                            p.failed ? p.error.c_str()
                                     : linex::format_double(p.mean_reward).c_str());
            man.j["eval"] = ef.json();
        }
        man.j["inputs"] = {{"trajectory", traj}, {"t0", t0}, {"t1", t1}};
        man.j["outputs"] = outputs;
        man.write(dir);
    }
};

struct ExtrapolateLogitsCmd {
    std::string traj, out;
    std::int64_t t0 = 0, t1 = 0;
    std::vector<double> alphas;
    EvalFlags ef;
    int threads = 0, n_heads = 0;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App* extrap) {
        auto* cmd = extrap->add_subcommand(
            "logits", "Decode with logits mixed across (t0, t1) and score against real t1");
        cmd->add_option("--traj", traj, "Trajectory manifest (file or run directory)")->required();
        cmd->add_option("--t0", t0, "Anchor step t0")->required();
        cmd->add_option("--t1", t1, "Anchor step t1 (> t0)")->required();
        cmd->add_option("--alpha", alphas, "Mixing coefficient; repeatable (default 1.0)");
        cmd->add_option("--out", out, "Output directory")->required();
        ef.add_to(cmd);
        cmd->add_option("--threads", threads, "Worker threads (0: LINEX_THREADS or cores)");
        cmd->add_option("--n-heads", n_heads, "Override head count when metadata lacks it");
        cmd->callback([this] { run(); });
    }

    void run() {
        Manifest man("extrapolate logits", argc, argv);
        const auto trajectory = load_traj_arg(traj);
        const fs::path dir = ensure_out_dir(out);
        if (alphas.empty()) alphas.push_back(1.0);
        const auto task = linex::task_from_metadata(trajectory);
        const auto mls = linex::resolve_model_load(trajectory, n_heads);
        const std::vector<std::pair<std::int64_t, std::int64_t>> pairs = {{t0, t1}};
        const auto points = linex::compare_logit_extrapolation(trajectory, pairs, alphas, task,
                                                               ef.opts(threads), mls);
        linex::write_logit_compare_csv(dir / "logit_compare.csv", points);
        for (const auto& p : points)
            std::printf("alpha %s: extrapolated reward %s vs real t1 %s\n",
                        linex::format_double(p.alpha).c_str(),
                        p.failed ? p.error.c_str()
                                 : linex::format_double(p.mean_reward_extrapolated).c_str(),
                        linex::format_double(p.mean_reward_real_t1).c_str());
        man.j["inputs"] = {{"trajectory", traj}, {"t0", t0}, {"t1", t1}};
        man.j["eval"] = ef.json();
        man.j["outputs"] = {"logit_compare.csv"};
        man.write(dir);
    }
};

// -------------------------------------------------------------- decompose

struct DecomposeCmd {
    std::string traj, out;
    std::int64_t t0 = 0, t1 = 0;
    int layer = 0;
    ProbeFlags probes;
    int n_heads = 0;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App& app) {
        auto* cmd = app.add_subcommand(
            "decompose",
            "Split one block's MLP output change into weight, input, and cross terms");
        cmd->add_option("--traj", traj, "Trajectory manifest (file or run directory)")->required();
        cmd->add_option("--t0", t0, "Earlier step")->required();
        cmd->add_option("--t1", t1, "Later step")->required();
        cmd->add_option("--layer", layer, "Block index");
        cmd->add_option("--out", out, "Output directory")->required();
        probes.add_to(cmd);
        cmd->add_option("--n-heads", n_heads, "Override head count when metadata lacks it");
        cmd->callback([this] { run(); });
    }

    void run() {
        Manifest man("decompose", argc, argv);
        const auto trajectory = load_traj_arg(traj);
        const auto mls = linex::resolve_model_load(trajectory, n_heads);
        const fs::path dir = ensure_out_dir(out);
        const auto rows = linex::decompose_trajectory(trajectory, t0, t1,
                                                      probes.make(trajectory, mls), layer, mls);
        linex::write_decomposition_csv(dir / "decomposition.csv", rows);
        double ratio_sum = 0.0;
        for (const auto& r : rows) ratio_sum += r.ratio_second_to_first;
        std::printf("decomposed %zu probe positions; mean second/first ratio %s\n", rows.size(),
                    linex::format_double(rows.empty() ? 0.0
                                                      : ratio_sum / static_cast<double>(rows.size()))
                        .c_str());
        man.j["inputs"] = {{"trajectory", traj}, {"t0", t0}, {"t1", t1}, {"layer", layer}};
        man.j["probes"] = probes.json();
        man.j["outputs"] = {"decomposition.csv"};
        man.write(dir);
    }
};

// ----------------------------------------------------------------- report

// Rebuilds fit results from an exported fits CSV (only r2 and the filter
// flag matter for summarization). filtered_col of SIZE_MAX means the format
// has no filter column.
std::vector<linex::FitResult> fits_from_csv(const fs::path& path, std::size_t r2_col,
                                            std::size_t filtered_col) {
    const auto cells = linex::read_csv(path);
    std::vector<linex::FitResult> fits;
    const std::size_t need = filtered_col == SIZE_MAX ? r2_col : std::max(r2_col, filtered_col);
    for (std::size_t i = 1; i < cells.size(); ++i) {
        const auto& row = cells[i];
        const std::string ctx = path.string() + " line " + std::to_string(i + 1);
        if (row.size() <= need) throw linex::FormatError(ctx + ": too few columns");
        linex::FitResult f;
        f.r2 = linex::parse_double(row[r2_col], ctx);
        f.filtered = filtered_col < row.size() && row[filtered_col] == "1";
        fits.push_back(f);
    }
    return fits;
}

ordered_json histogram_summary_json(const std::vector<linex::FitResult>& fits) {
    const auto edges = linex::r2_histogram_edges();
    const auto h = linex::histogram(fits, edges);
    ordered_json j;
    j["n_series"] = fits.size();
    j["surviving"] = h.total;
    j["median_r2"] = h.empty ? ordered_json(nullptr) : ordered_json(h.median_r2);
    j["fraction_r2_gt_0.7"] =
        h.empty ? ordered_json(nullptr) : ordered_json(h.fraction_above_threshold);
    j["histogram"] = {{"edges", h.edges}, {"counts", h.counts}, {"total", h.total}};
    return j;
}

struct ReportCmd {
    std::string in_dir, out_path;
    int window = 10;
    int argc = 0;
    char** argv = nullptr;

    void add_to(CLI::App& app) {
        auto* cmd = app.add_subcommand(
            "report", "Merge analysis CSVs under a directory into one summary.json");
        cmd->add_option("--in", in_dir, "Directory scanned recursively for analysis CSVs")
            ->required();
        cmd->add_option("--out", out_path, "Merged JSON path (default <in>/summary.json)");
        cmd->add_option("--window", window, "GRAD steps per gradient-stability window");
        cmd->callback([this] { run(); });
    }

    void run() {
        Manifest man("report", argc, argv);
        const fs::path root(in_dir);
        if (!fs::is_directory(root))
            throw linex::ConfigError("--in is not a directory: " + root.string());

        std::vector<fs::path> found;
        for (const auto& entry : fs::recursive_directory_iterator(root)) {
            if (!entry.is_regular_file()) continue;
            const auto name = entry.path().filename().string();
            if (name == "weight_fits.csv" || name == "token_fits.csv" ||
                name == "activation_fits.csv" || name == "decomposition.csv" ||
                name == "metrics.csv" || name == "weight_sweep.csv" ||
                name == "logit_compare.csv")
                found.push_back(entry.path());
        }
        std::sort(found.begin(), found.end());
        if (found.empty())
            throw linex::ConfigError("no analysis CSVs found under " + root.string());

        ordered_json j;
        j["tool_version"] = linex::kToolVersion;
        j["inputs"] = ordered_json::array();
        for (const auto& p : found) j["inputs"].push_back(p.string());

        for (const auto& p : found) {
            const auto name = p.filename().string();
            if (name == "weight_fits.csv") {
                j["weights"] = histogram_summary_json(fits_from_csv(p, 4, 5));
            } else if (name == "activation_fits.csv") {
                j["activations"] = histogram_summary_json(fits_from_csv(p, 6, 7));
            } else if (name == "token_fits.csv") {
                auto fits = fits_from_csv(p, 5, SIZE_MAX);
                auto tj = histogram_summary_json(fits);
                const auto cells = linex::read_csv(p);
                std::map<std::string, std::uint64_t> counts;
                for (std::size_t i = 1; i < cells.size(); ++i)
                    if (cells[i].size() >= 8) ++counts[cells[i][7]];
                tj["categories"] = counts;
                j["tokens"] = tj;
            } else if (name == "decomposition.csv") {
                const auto cells = linex::read_csv(p);
                double ratio_sum = 0.0, ratio_max = 0.0, resid_max = 0.0;
                std::size_t n = 0;
                for (std::size_t i = 1; i < cells.size(); ++i) {
                    const auto& row = cells[i];
                    if (row.size() < 8) continue;
                    const std::string ctx = p.string() + " line " + std::to_string(i + 1);
                    const double ratio = linex::parse_double(row[7], ctx);
                    resid_max = std::max(resid_max, linex::parse_double(row[6], ctx));
                    ratio_sum += ratio;
                    ratio_max = std::max(ratio_max, ratio);
                    ++n;
                }
                j["decomposition"] = {{"rows", n},
                                      {"mean_ratio_second_to_first",
                                       n ? ratio_sum / static_cast<double>(n) : 0.0},
                                      {"max_ratio_second_to_first", ratio_max},
                                      {"max_residual", resid_max}};
            } else if (name == "metrics.csv") {
                const auto metrics = linex::read_metrics_csv(p);
                double final_reward = 0.0, mean_reward = 0.0;
                std::size_t grad_steps = 0, extra_steps = 0;
                for (const auto& m : metrics) {
                    if (m.phase == "GRAD") {
                        final_reward = m.mean_reward;
                        mean_reward += m.mean_reward;
                        ++grad_steps;
                    } else {
                        ++extra_steps;
                    }
                }
                ordered_json tj;
                tj["steps"] = metrics.size();
                tj["grad_steps"] = grad_steps;
                tj["extra_steps"] = extra_steps;
                tj["final_grad_reward"] = final_reward;
                tj["mean_grad_reward"] =
                    grad_steps ? mean_reward / static_cast<double>(grad_steps) : 0.0;
                try {
                    const auto windows = linex::gradient_stability(metrics, window);
                    ordered_json arr = ordered_json::array();
                    for (const auto& w : windows)
                        arr.push_back({{"window", w.index},
                                       {"start_step", w.start_step},
                                       {"end_step", w.end_step},
                                       {"mean_cosine", w.mean_cosine},
                                       {"cv_abs_dw", w.cv_abs_dw}});
                    tj["stability"] = arr;
                } catch (const linex::ConfigError&) {
                    // Too few GRAD steps for the window size: omit the section.
                }
                j["training"] = tj;
            } else if (name == "weight_sweep.csv" || name == "logit_compare.csv") {
                const auto cells = linex::read_csv(p);
                if (cells.empty()) continue;
                ordered_json rows = ordered_json::array();
                for (std::size_t i = 1; i < cells.size(); ++i) {
                    ordered_json row;
                    for (std::size_t k = 0; k < cells[i].size() && k < cells[0].size(); ++k)
                        row[cells[0][k]] = cells[i][k];
                    rows.push_back(row);
                }
                j[name == "weight_sweep.csv" ? "weight_sweep" : "logit_compare"] = rows;
            }
        }

        const fs::path outp = out_path.empty() ? root / "summary.json" : fs::path(out_path);
        std::ofstream out(outp);
        if (!out) throw linex::IoError("cannot open for writing: " + outp.string());
        out << j.dump(2) << '\n';
        std::printf("merged %zu files -> %s\n", found.size(), outp.string().c_str());
        man.j["inputs_dir"] = root.string();
        man.j["outputs"] = {outp.string()};
        man.write(outp.parent_path());
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"linear trajectory analysis and extrapolation for a desk-scale RLVR stack"};
    app.require_subcommand(1);

    TrainCmd train;
    train.app_argc = argc;
    train.app_argv = argv;
    train.add_to(app);

    auto* analyze = app.add_subcommand("analyze", "Fit checkpoint series and categorize them");
    analyze->require_subcommand(1);
    AnalyzeWeightsCmd aw;
    aw.argc = argc;
    aw.argv = argv;
    aw.add_to(analyze);
    AnalyzeTokensCmd at;
    at.argc = argc;
    at.argv = argv;
    at.add_to(analyze);
    AnalyzeActivationsCmd aa;
    aa.argc = argc;
    aa.argv = argv;
    aa.add_to(analyze);

    auto* extrap = app.add_subcommand("extrapolate", "Project weights or logits along (t0, t1)");
    extrap->require_subcommand(1);
    ExtrapolateWeightsCmd ew;
    ew.argc = argc;
    ew.argv = argv;
    ew.add_to(extrap);
    ExtrapolateLogitsCmd el;
    el.argc = argc;
    el.argv = argv;
    el.add_to(extrap);

    DecomposeCmd dec;
    dec.argc = argc;
    dec.argv = argv;
    dec.add_to(app);

    ReportCmd rep;
    rep.argc = argc;
    rep.argv = argv;
    rep.add_to(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const linex::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const linex::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const linex::NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
