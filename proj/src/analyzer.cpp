// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <unordered_set>

#include "linex/csv.hpp"
#include "linex/parallel.hpp"
#include "nlohmann/json.hpp"

namespace linex {

namespace {

constexpr std::size_t kAnalyzeChunks = 16;
constexpr std::uint64_t kSeedSampling = 3;  // stream tag; 1/2 are train-side

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::filesystem::path entry_path(const Trajectory& traj, const TrajectoryEntry& e) {
    return traj.base_dir / e.file;
}

// Checkpoints at or after the warmup cut, in step order.
std::vector<TrajectoryEntry> kept_entries(const Trajectory& traj, std::uint64_t warmup_steps) {
    std::vector<TrajectoryEntry> kept;
    for (const auto& e : traj.entries)
        if (e.step >= warmup_steps) kept.push_back(e);
    return kept;
}

void require_checkpoints(std::size_t kept, std::size_t total, std::uint64_t warmup) {
    if (kept < 2)
        throw ConfigError("need at least 2 checkpoints at or after warmup step " +
                          std::to_string(warmup) + "; have " + std::to_string(kept) + " of " +
                          std::to_string(total));
}

PolicyModel load_model(const std::filesystem::path& path, const ModelLoadSpec& mls) {
    CheckpointReader reader(path);
    return PolicyModel::from_checkpoint(reader, mls.n_heads, mls.ln_eps);
}

void check_probe(const Probe& probe, std::size_t idx, const ModelConfig& cfg) {
    if (probe.tokens.empty()) throw ConfigError("probe " + std::to_string(idx) + " is empty");
    if (static_cast<int>(probe.tokens.size()) > cfg.context_len)
        throw ConfigError("probe " + std::to_string(idx) + " has " +
                          std::to_string(probe.tokens.size()) + " tokens, context_len is " +
                          std::to_string(cfg.context_len));
    for (int t : probe.tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw ConfigError("probe " + std::to_string(idx) + " token " + std::to_string(t) +
                              " outside vocab of " + std::to_string(cfg.vocab_size));
}

// First tracked position: position 0 has no conditioning context.
std::size_t track_start(const Probe& probe) { return std::max<std::size_t>(probe.track_from, 1); }

GroupAggregate aggregate_fits(const std::string& name, std::span<const FitResult> fits) {
    GroupAggregate ga;
    ga.name = name;
    ga.sampled = fits.size();
    double r2_sum = 0.0;
    std::uint64_t above = 0, surviving = 0;
    for (const auto& f : fits) {
        if (f.constant) ++ga.constant;
        if (f.filtered) {
            ++ga.filtered;
            continue;
        }
        ++surviving;
        r2_sum += f.r2;
        if (f.r2 > kR2Threshold) ++above;
    }
    const double nan = std::nan("");
    ga.mean_r2 = surviving ? r2_sum / static_cast<double>(surviving) : nan;
    ga.fraction_above_threshold =
        surviving ? static_cast<double>(above) / static_cast<double>(surviving) : nan;
    return ga;
}

std::vector<std::string> group_summary_row(const GroupAggregate& ga) {
    return {ga.name,
            std::to_string(ga.sampled),
            std::to_string(ga.filtered),
            std::to_string(ga.constant),
            format_double(ga.mean_r2),
            format_double(ga.fraction_above_threshold)};
}

nlohmann::ordered_json json_double(double v) {
    // JSON has no nan; emit null explicitly rather than relying on the
    // serializer's fallback.
    if (!std::isfinite(v)) return nullptr;
    return v;
}

nlohmann::ordered_json histogram_json(const HistogramSummary& h) {
    nlohmann::ordered_json j;
    j["edges"] = h.edges;
    j["counts"] = h.counts;
    j["total"] = h.total;
    j["empty"] = h.empty;
    return j;
}

nlohmann::ordered_json groups_json(std::span<const GroupAggregate> groups) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& ga : groups) {
        nlohmann::ordered_json g;
        g["name"] = ga.name;
        g["sampled"] = ga.sampled;
        g["filtered"] = ga.filtered;
        g["constant"] = ga.constant;
        g["mean_r2"] = json_double(ga.mean_r2);
        g["fraction_r2_gt_0.7"] = json_double(ga.fraction_above_threshold);
        arr.push_back(std::move(g));
    }
    return arr;
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failure: " + path.string());
}

}  // namespace

void SamplingPlan::validate() const {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("sampling fraction must be in (0, 1], got " + format_double(fraction));
}

std::vector<std::uint64_t> sampled_indices(const SamplingPlan& plan, std::string_view name,
                                           std::uint64_t numel) {
    plan.validate();
    if (numel == 0) return {};
    auto count = static_cast<std::uint64_t>(std::llround(plan.fraction * static_cast<double>(numel)));
    count = std::clamp<std::uint64_t>(count, 1, numel);
    if (count == numel) {
        std::vector<std::uint64_t> all(numel);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    const std::uint64_t key = plan.per_tensor ? fnv1a(name) : 0;
    Rng rng(derive_seed(plan.seed, key, numel, kSeedSampling));
    std::vector<std::uint64_t> idx;
    idx.reserve(count);
    if (count * 2 <= numel) {
        std::unordered_set<std::uint64_t> seen;
        seen.reserve(count * 2);
        while (idx.size() < count) {
            const std::uint64_t i = rng.below(numel);
            if (seen.insert(i).second) idx.push_back(i);
        }
    } else {
        std::vector<std::uint64_t> all(numel);
        std::iota(all.begin(), all.end(), 0);
        for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint64_t j = i + rng.below(numel - i);
            std::swap(all[i], all[j]);
        }
        idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> r2_histogram_edges() {
    std::vector<double> edges;
    for (int i = 0; i <= 20; ++i) edges.push_back(static_cast<double>(i) / 20.0);
    return edges;
}

// ---------------------------------------------------------------- weights

WeightAnalysis analyze_weights(const Trajectory& traj, const SamplingPlan& plan,
                               const FilterPolicy& filter, std::uint64_t warmup_steps,
                               int threads) {
    plan.validate();
    const auto kept = kept_entries(traj, warmup_steps);
    require_checkpoints(kept.size(), traj.entries.size(), warmup_steps);

    WeightAnalysis wa;
    wa.warmup_steps = warmup_steps;
    wa.few_checkpoints = kept.size() == 2;
    for (const auto& e : kept) wa.steps.push_back(e.step);

    // Schema and sampled index sets come from the first kept checkpoint.
    struct Series {
        std::string name;
        std::uint64_t numel = 0;
        std::vector<std::uint64_t> idx;
        std::vector<FitAccumulator> accs;
    };
    std::vector<Series> series;
    {
        CheckpointReader first(entry_path(traj, kept.front()));
        for (const auto& meta : first.tensors()) {
            Series s;
            s.name = meta.name;
            s.numel = meta.numel();
            s.idx = sampled_indices(plan, s.name, s.numel);
            s.accs.resize(s.idx.size());
            series.push_back(std::move(s));
        }
    }

    for (const auto& entry : kept) {
        const auto path = entry_path(traj, entry);
        CheckpointReader reader(path);
        if (reader.step() != entry.step)
            throw FormatError(path.string() + ": header step " + std::to_string(reader.step()) +
                              " does not match manifest step " + std::to_string(entry.step));
        const double t = static_cast<double>(entry.step);
        parallel_chunks(series.size(), kAnalyzeChunks, threads,
                        [&](std::size_t, std::size_t begin, std::size_t end) {
                            for (std::size_t si = begin; si < end; ++si) {
                                auto& s = series[si];
                                const auto values = reader.read_values(s.name);
                                if (values.size() != s.numel)
                                    throw FormatError(path.string() + ": tensor " + s.name +
                                                      " has " + std::to_string(values.size()) +
                                                      " elements, expected " +
                                                      std::to_string(s.numel));
                                for (std::size_t k = 0; k < s.idx.size(); ++k)
                                    s.accs[k].add(t, values[s.idx[k]]);
                            }
                        });
    }

    std::vector<FitResult> all_fits;
    for (auto& s : series) {
        std::vector<FitResult> fits;
        fits.reserve(s.idx.size());
        for (std::size_t k = 0; k < s.idx.size(); ++k) {
            FitResult fit = finalize(s.accs[k], filter);
            fits.push_back(fit);
            wa.rows.push_back({s.name, s.idx[k], fit});
        }
        wa.tensors.push_back(aggregate_fits(s.name, fits));
        all_fits.insert(all_fits.end(), fits.begin(), fits.end());
    }
    const auto edges = r2_histogram_edges();
    wa.hist = histogram(all_fits, edges);
    return wa;
}

void write_weight_fits_csv(const std::filesystem::path& path, std::span<const WeightFitRow> rows) {
    CsvWriter w(path);
    w.row({"tensor", "index", "slope", "intercept", "r2", "filtered"});
    for (const auto& r : rows)
        w.row({r.tensor, std::to_string(r.index), format_double(r.fit.slope),
               format_double(r.fit.intercept), format_double(r.fit.r2),
               r.fit.filtered ? "1" : "0"});
}

void write_layer_summary_csv(const std::filesystem::path& path,
                             std::span<const GroupAggregate> tensors) {
    CsvWriter w(path);
    w.row({"group", "sampled", "filtered", "constant", "mean_r2", "fraction_r2_gt_0.7"});
    for (const auto& ga : tensors) w.row(group_summary_row(ga));
}

void write_weight_summary_json(const std::filesystem::path& path, const WeightAnalysis& wa,
                               const SamplingPlan& plan, const FilterPolicy& filter) {
    nlohmann::ordered_json j;
    j["kind"] = "weights";
    j["tool_version"] = kToolVersion;
    j["steps"] = wa.steps;
    j["warmup_steps"] = wa.warmup_steps;
    j["few_checkpoints"] = wa.few_checkpoints;
    j["sampling"] = {{"fraction", plan.fraction}, {"seed", plan.seed},
                     {"per_tensor", plan.per_tensor}};
    j["filter"] = {{"min_changes", filter.min_changes},
                   {"abs_change_floor", filter.abs_change_floor}};
    j["n_series"] = wa.rows.size();
    j["median_r2"] = json_double(wa.hist.median_r2);
    j["fraction_r2_gt_0.7"] = json_double(wa.hist.fraction_above_threshold);
    j["histogram"] = histogram_json(wa.hist);
    j["groups"] = groups_json(wa.tensors);
    write_json(path, j);
}

// ----------------------------------------------------------------- probes

std::vector<Probe> generate_probes(const PolicyModel& model, const TaskSpec& task,
                                   const ProbeGenOptions& opts) {
    task.validate();
    if (opts.n_prompts < 1 || opts.samples_per_prompt < 1)
        throw ConfigError("probe generation needs at least 1 prompt and 1 sample per prompt");
    if (!(opts.temperature > 0.0)) throw ConfigError("probe temperature must be positive");

    SamplingParams sp;
    sp.temperature = opts.temperature;
    sp.top_p = opts.top_p;
    sp.max_new = task.max_completion_tokens();
    sp.stop_token = kTokEos;

    std::vector<Probe> probes;
    probes.reserve(static_cast<std::size_t>(opts.n_prompts) *
                   static_cast<std::size_t>(opts.samples_per_prompt));
    for (int p = 0; p < opts.n_prompts; ++p) {
        Rng prng(derive_seed(opts.seed, static_cast<std::uint64_t>(p), 0, 1));
        const auto prompt = task.sample_prompt(prng);
        for (int s = 0; s < opts.samples_per_prompt; ++s) {
            const auto dr = decode(model, prompt, sp,
                                   derive_seed(opts.seed, static_cast<std::uint64_t>(p),
                                               static_cast<std::uint64_t>(s), 2));
            Probe probe;
            probe.tokens = prompt;
            probe.tokens.insert(probe.tokens.end(), dr.tokens.begin(), dr.tokens.end());
            probe.track_from = prompt.size();
            probes.push_back(std::move(probe));
        }
    }
    return probes;
}

LogprobMatrix probe_logprobs(const Trajectory& traj, const std::vector<Probe>& probes,
                             const ModelLoadSpec& mls, std::uint64_t warmup_steps, int threads) {
    if (probes.empty()) throw ConfigError("no probes given");
    const auto kept = kept_entries(traj, warmup_steps);
    require_checkpoints(kept.size(), traj.entries.size(), warmup_steps);

    LogprobMatrix m;
    for (const auto& e : kept) m.steps.push_back(e.step);

    // Row layout is fixed up front: probes in order, tracked positions in
    // order within each probe.
    std::vector<std::size_t> row_offset(probes.size() + 1, 0);
    {
        const auto cfg_probe = load_model(entry_path(traj, kept.front()), mls).config();
        for (std::size_t pi = 0; pi < probes.size(); ++pi) {
            check_probe(probes[pi], pi, cfg_probe);
            const auto& toks = probes[pi].tokens;
            for (std::size_t i = track_start(probes[pi]); i < toks.size(); ++i)
                m.rows.push_back({toks[i], token_str(toks[i]), static_cast<int>(i)});
            row_offset[pi + 1] = m.rows.size();
        }
    }
    if (m.rows.empty()) throw ConfigError("probes track no positions");

    const std::size_t n_steps = kept.size();
    m.values.assign(m.rows.size() * n_steps, 0.0);

    parallel_chunks(n_steps, kAnalyzeChunks, threads,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t j = begin; j < end; ++j) {
                            const auto model = load_model(entry_path(traj, kept[j]), mls);
                            const int vocab = model.config().vocab_size;
                            for (std::size_t pi = 0; pi < probes.size(); ++pi) {
                                const auto& toks = probes[pi].tokens;
                                const auto fr = forward(model, toks);
                                std::size_t row = row_offset[pi];
                                for (std::size_t i = track_start(probes[pi]); i < toks.size();
                                     ++i, ++row) {
                                    std::span<const double> logits(
                                        fr.logits.data() + (i - 1) * static_cast<std::size_t>(vocab),
                                        static_cast<std::size_t>(vocab));
                                    m.values[row * n_steps + j] =
                                        token_logprob(logits, toks[i], 1.0);
                                }
                            }
                        }
                    });
    return m;
}

void export_logprob_matrix(const LogprobMatrix& m, const std::filesystem::path& path) {
    CsvWriter w(path);
    std::vector<std::string> header = {"token_id", "token_str", "pos"};
    for (auto s : m.steps) header.push_back("step_" + std::to_string(s));
    w.row(header);
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
        std::vector<std::string> cells = {std::to_string(m.rows[r].token_id), m.rows[r].token_str,
                                          std::to_string(m.rows[r].pos)};
        for (std::size_t j = 0; j < m.steps.size(); ++j) cells.push_back(format_double(m.at(r, j)));
        w.row(cells);
    }
}

LogprobMatrix import_logprob_matrix(const std::filesystem::path& path) {
    const auto cells = read_csv(path);
    const std::string where = path.string();
    if (cells.empty()) throw FormatError(where + ": empty file");

    const auto& header = cells.front();
    if (header.size() < 4 || header[0] != "token_id" || header[1] != "token_str" ||
        header[2] != "pos")
        throw FormatError(where + " line 1: header must start with token_id,token_str,pos "
                                  "followed by step columns");
    LogprobMatrix m;
    for (std::size_t k = 3; k < header.size(); ++k) {
        const auto& h = header[k];
        if (h.rfind("step_", 0) != 0)
            throw FormatError(where + " line 1: column " + std::to_string(k + 1) +
                              " must be named step_<n>, got \"" + h + "\"");
        const long long step = parse_int(h.substr(5), where + " line 1 column " +
                                                         std::to_string(k + 1));
        if (step < 0 || (!m.steps.empty() && static_cast<std::uint64_t>(step) <= m.steps.back()))
            throw FormatError(where + " line 1: step columns must be strictly increasing");
        m.steps.push_back(static_cast<std::uint64_t>(step));
    }

    for (std::size_t r = 1; r < cells.size(); ++r) {
        const auto& row = cells[r];
        const std::string ctx = where + " line " + std::to_string(r + 1);
        if (row.size() != header.size())
            throw FormatError(ctx + ": has " + std::to_string(row.size()) + " fields, expected " +
                              std::to_string(header.size()));
        LogprobMatrix::Row lr;
        lr.token_id = static_cast<int>(parse_int(row[0], ctx + " token_id"));
        lr.token_str = row[1];
        lr.pos = static_cast<int>(parse_int(row[2], ctx + " pos"));
        m.rows.push_back(std::move(lr));
        for (std::size_t k = 3; k < row.size(); ++k)
            m.values.push_back(parse_double(row[k], ctx + " column " + std::to_string(k + 1)));
    }
    return m;
}

std::string token_category_name(TokenCategory c) {
    switch (c) {
        case TokenCategory::ConnectorLinear: return "CONNECTOR_LINEAR";
        case TokenCategory::Volatile: return "VOLATILE";
        case TokenCategory::Stable: return "STABLE";
    }
    throw ConfigError("unknown token category");
}

TokenAnalysis categorize_tokens(const LogprobMatrix& m, double var_threshold,
                                double r2_threshold) {
    const std::size_t n_steps = m.steps.size();
    if (n_steps < 3)
        throw ConfigError("token categorization needs at least 3 checkpoints, have " +
                          std::to_string(n_steps));
    if (m.values.size() != m.rows.size() * n_steps)
        throw FormatError("logprob matrix has " + std::to_string(m.values.size()) +
                          " values for " + std::to_string(m.rows.size()) + " rows x " +
                          std::to_string(n_steps) + " steps");

    TokenAnalysis ta;
    ta.var_threshold = var_threshold;
    ta.r2_threshold = r2_threshold;

    // No change filter here: these series come from F64 log-probs, not
    // low-precision storage.
    FilterPolicy no_filter;
    no_filter.min_changes = 0;
    no_filter.abs_change_floor = 0.0;

    for (std::size_t r = 0; r < m.rows.size(); ++r) {
        FitAccumulator acc;
        double mean = 0.0;
        for (std::size_t j = 0; j < n_steps; ++j) {
            acc.add(static_cast<double>(m.steps[j]), m.at(r, j));
            mean += m.at(r, j);
        }
        mean /= static_cast<double>(n_steps);
        double ss = 0.0;
        for (std::size_t j = 0; j < n_steps; ++j) {
            const double d = m.at(r, j) - mean;
            ss += d * d;
        }
        TokenFitRow row;
        row.row = m.rows[r];
        row.fit = finalize(acc, no_filter);
        row.std_logprob = std::sqrt(ss / static_cast<double>(n_steps));
        if (row.std_logprob < var_threshold) {
            row.category = TokenCategory::Stable;
            ++ta.n_stable;
        } else if (row.fit.r2 > r2_threshold) {
            row.category = TokenCategory::ConnectorLinear;
            ++ta.n_connector_linear;
        } else {
            row.category = TokenCategory::Volatile;
            ++ta.n_volatile;
        }
        ta.rows.push_back(std::move(row));
    }
    return ta;
}

void write_token_fits_csv(const std::filesystem::path& path, const TokenAnalysis& ta) {
    CsvWriter w(path);
    w.row({"token_id", "token_str", "pos", "slope", "intercept", "r2", "std", "category"});
    for (const auto& r : ta.rows)
        w.row({std::to_string(r.row.token_id), r.row.token_str, std::to_string(r.row.pos),
               format_double(r.fit.slope), format_double(r.fit.intercept),
               format_double(r.fit.r2), format_double(r.std_logprob),
               token_category_name(r.category)});
}

void write_token_summary_json(const std::filesystem::path& path, const TokenAnalysis& ta) {
    nlohmann::ordered_json j;
    j["kind"] = "tokens";
    j["tool_version"] = kToolVersion;
    j["var_threshold"] = ta.var_threshold;
    j["r2_threshold"] = ta.r2_threshold;
    j["n_rows"] = ta.rows.size();
    j["counts"] = {{"STABLE", ta.n_stable},
                   {"CONNECTOR_LINEAR", ta.n_connector_linear},
                   {"VOLATILE", ta.n_volatile}};
    write_json(path, j);
}

// ------------------------------------------------------------ activations

ActivationAnalysis analyze_activations(const Trajectory& traj, const std::vector<Probe>& probes,
                                       const std::vector<std::string>& taps,
                                       const SamplingPlan& plan, const FilterPolicy& filter,
                                       const ModelLoadSpec& mls, std::uint64_t warmup_steps,
                                       int threads) {
    plan.validate();
    if (probes.empty()) throw ConfigError("no probes given");
    const auto kept = kept_entries(traj, warmup_steps);
    require_checkpoints(kept.size(), traj.entries.size(), warmup_steps);

    const auto cfg = load_model(entry_path(traj, kept.front()), mls).config();
    const auto valid = valid_taps(cfg);
    std::vector<std::string> use_taps = taps.empty() ? valid : taps;
    for (const auto& t : use_taps) {
        if (std::find(valid.begin(), valid.end(), t) == valid.end()) {
            std::string list;
            for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
            throw ConfigError("unknown activation tap \"" + t + "\"; valid taps: " + list);
        }
    }
    for (std::size_t pi = 0; pi < probes.size(); ++pi) check_probe(probes[pi], pi, cfg);

    ActivationAnalysis aa;
    aa.few_checkpoints = kept.size() == 2;
    for (const auto& e : kept) aa.steps.push_back(e.step);

    // One series per sampled coordinate of each (tap, probe) pair; the
    // tapped tensor is T x dim flattened row-major.
    struct Series {
        std::size_t tap = 0;
        std::size_t probe = 0;
        std::uint64_t flat = 0;
        int dim = 0;
    };
    std::vector<Series> series;
    for (std::size_t ti = 0; ti < use_taps.size(); ++ti) {
        const int dim = use_taps[ti] == "logits" ? cfg.vocab_size : cfg.d_model;
        for (std::size_t pi = 0; pi < probes.size(); ++pi) {
            const std::uint64_t numel = probes[pi].tokens.size() * static_cast<std::uint64_t>(dim);
            const auto idx =
                sampled_indices(plan, use_taps[ti] + "/" + std::to_string(pi), numel);
            for (auto f : idx) series.push_back({ti, pi, f, dim});
        }
    }

    const std::size_t n_steps = kept.size();
    std::vector<double> values(series.size() * n_steps, 0.0);
    // Series grouped by probe, so one forward per (checkpoint, probe) serves
    // every tap.
    parallel_chunks(n_steps, kAnalyzeChunks, threads,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t j = begin; j < end; ++j) {
                            const auto model = load_model(entry_path(traj, kept[j]), mls);
                            std::vector<ForwardResult> results;
                            results.reserve(probes.size());
                            for (const auto& probe : probes)
                                results.push_back(forward(model, probe.tokens, &use_taps));
                            for (std::size_t si = 0; si < series.size(); ++si) {
                                const auto& s = series[si];
                                const auto& tapped =
                                    results[s.probe].taps.at(use_taps[s.tap]);
                                values[si * n_steps + j] = tapped[s.flat];
                            }
                        }
                    });

    std::vector<std::vector<FitResult>> per_tap(use_taps.size());
    std::vector<FitResult> all_fits;
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        FitAccumulator acc;
        for (std::size_t j = 0; j < n_steps; ++j)
            acc.add(static_cast<double>(kept[j].step), values[si * n_steps + j]);
        const FitResult fit = finalize(acc, filter);
        ActivationFitRow row;
        row.tap = use_taps[s.tap];
        row.probe = static_cast<int>(s.probe);
        row.pos = static_cast<int>(s.flat / static_cast<std::uint64_t>(s.dim));
        row.coord = static_cast<int>(s.flat % static_cast<std::uint64_t>(s.dim));
        row.fit = fit;
        aa.rows.push_back(std::move(row));
        per_tap[s.tap].push_back(fit);
        all_fits.push_back(fit);
    }
    for (std::size_t ti = 0; ti < use_taps.size(); ++ti)
        aa.taps.push_back(aggregate_fits(use_taps[ti], per_tap[ti]));
    const auto edges = r2_histogram_edges();
    aa.hist = histogram(all_fits, edges);
    return aa;
}

void write_activation_fits_csv(const std::filesystem::path& path,
                               std::span<const ActivationFitRow> rows) {
    CsvWriter w(path);
    w.row({"tap", "probe", "pos", "coord", "slope", "intercept", "r2", "filtered"});
    for (const auto& r : rows)
        w.row({r.tap, std::to_string(r.probe), std::to_string(r.pos), std::to_string(r.coord),
               format_double(r.fit.slope), format_double(r.fit.intercept),
               format_double(r.fit.r2), r.fit.filtered ? "1" : "0"});
}

void write_activation_summary_json(const std::filesystem::path& path,
                                   const ActivationAnalysis& aa, const SamplingPlan& plan) {
    nlohmann::ordered_json j;
    j["kind"] = "activations";
    j["tool_version"] = kToolVersion;
    j["steps"] = aa.steps;
    j["few_checkpoints"] = aa.few_checkpoints;
    j["sampling"] = {{"fraction", plan.fraction}, {"seed", plan.seed},
                     {"per_tensor", plan.per_tensor}};
    j["n_series"] = aa.rows.size();
    j["median_r2"] = json_double(aa.hist.median_r2);
    j["fraction_r2_gt_0.7"] = json_double(aa.hist.fraction_above_threshold);
    j["histogram"] = histogram_json(aa.hist);
    j["groups"] = groups_json(aa.taps);
    write_json(path, j);
}

// --------------------------------------------------------- decomposition

namespace {

std::vector<double> matvec_f64(const Matrix& w, std::span<const double> x) {
    std::vector<double> y(w.rows, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) acc += w.at(r, c) * x[c];
        y[r] = acc;
    }
    return y;
}

double norm2(std::span<const double> v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    return std::sqrt(ss);
}

}  // namespace

DecompositionReport decompose_output_change(const Matrix& w0, const Matrix& w1,
                                            std::span<const double> x0,
                                            std::span<const double> x1) {
    if (w0.rows != w1.rows || w0.cols != w1.cols)
        throw ConfigError("weight matrices must share a shape");
    if (w0.v.size() != w0.rows * w0.cols || w1.v.size() != w1.rows * w1.cols)
        throw ConfigError("matrix value count does not match its shape");
    if (x0.size() != w0.cols || x1.size() != w0.cols)
        throw ConfigError("input vectors must have " + std::to_string(w0.cols) + " elements");

    Matrix dw{w0.rows, w0.cols, {}};
    dw.v.resize(w0.v.size());
    for (std::size_t i = 0; i < w0.v.size(); ++i) dw.v[i] = w1.v[i] - w0.v[i];
    std::vector<double> dx(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) dx[i] = x1[i] - x0[i];

    const auto y0 = matvec_f64(w0, x0);
    const auto y1 = matvec_f64(w1, x1);
    const auto a = matvec_f64(dw, x0);   // weight-change term at fixed input
    const auto b = matvec_f64(w0, dx);   // input-change term at fixed weights
    const auto c = matvec_f64(dw, dx);   // cross term

    std::vector<double> total(w0.rows), resid(w0.rows);
    for (std::size_t r = 0; r < w0.rows; ++r) {
        total[r] = y1[r] - y0[r];
        resid[r] = total[r] - a[r] - b[r] - c[r];
    }

    DecompositionReport rep;
    rep.first_order_weight = norm2(a);
    rep.first_order_input = norm2(b);
    rep.second_order = norm2(c);
    rep.total = norm2(total);
    rep.residual = norm2(resid);
    return rep;
}

std::vector<DecompositionRow> decompose_trajectory(const Trajectory& traj, std::int64_t t0,
                                                   std::int64_t t1,
                                                   const std::vector<Probe>& probes, int layer,
                                                   const ModelLoadSpec& mls) {
    if (probes.empty()) throw ConfigError("no probes given");
    auto find = [&](std::int64_t t) -> const TrajectoryEntry& {
        const auto* e = t >= 0 ? traj.find_step(static_cast<std::uint64_t>(t)) : nullptr;
        if (!e) {
            std::string steps;
            for (const auto& x : traj.entries)
                steps += (steps.empty() ? "" : ", ") + std::to_string(x.step);
            throw ConfigError("step " + std::to_string(t) +
                              " not in trajectory; available: " + steps);
        }
        return *e;
    };
    const auto m0 = load_model(entry_path(traj, find(t0)), mls);
    const auto m1 = load_model(entry_path(traj, find(t1)), mls);
    const auto& cfg = m0.config();
    if (layer < 0 || layer >= cfg.n_layers)
        throw ConfigError("layer " + std::to_string(layer) + " out of range; model has " +
                          std::to_string(cfg.n_layers) + " blocks");

    const std::string wname = "blk" + std::to_string(layer) + ".mlp.up";
    const std::string tap = "blk" + std::to_string(layer) + ".mlp_in";
    auto as_matrix = [&](const PolicyModel& m) {
        const auto& t = m.tensor(wname);
        Matrix w;
        w.rows = t.dims.at(0);
        w.cols = t.dims.at(1);
        w.v.assign(t.v.begin(), t.v.end());
        return w;
    };
    const Matrix w0 = as_matrix(m0);
    const Matrix w1 = as_matrix(m1);

    const std::vector<std::string> taps = {tap};
    std::vector<DecompositionRow> rows;
    for (std::size_t pi = 0; pi < probes.size(); ++pi) {
        check_probe(probes[pi], pi, cfg);
        const auto f0 = forward(m0, probes[pi].tokens, &taps);
        const auto f1 = forward(m1, probes[pi].tokens, &taps);
        const auto& x0 = f0.taps.at(tap);
        const auto& x1 = f1.taps.at(tap);
        const std::size_t dim = w0.cols;
        for (std::size_t pos = 0; pos < probes[pi].tokens.size(); ++pos) {
            DecompositionRow row;
            row.probe = static_cast<int>(pi);
            row.pos = static_cast<int>(pos);
            row.rep = decompose_output_change(
                w0, w1, std::span<const double>(x0.data() + pos * dim, dim),
                std::span<const double>(x1.data() + pos * dim, dim));
            const double first = row.rep.first_order_weight + row.rep.first_order_input;
            row.ratio_second_to_first = first > 0.0 ? row.rep.second_order / first : 0.0;
            rows.push_back(row);
        }
    }
    return rows;
}

void write_decomposition_csv(const std::filesystem::path& path,
                             std::span<const DecompositionRow> rows) {
    CsvWriter w(path);
    w.row({"probe", "pos", "first_order_weight", "first_order_input", "second_order", "total",
           "residual", "ratio_second_to_first"});
    for (const auto& r : rows)
        w.row({std::to_string(r.probe), std::to_string(r.pos),
               format_double(r.rep.first_order_weight), format_double(r.rep.first_order_input),
               format_double(r.rep.second_order), format_double(r.rep.total),
               format_double(r.rep.residual), format_double(r.ratio_second_to_first)});
}

}  // namespace linex
