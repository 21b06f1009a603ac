// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "linex/csv.hpp"

namespace linex {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Cuts a trailing comment; respects double quotes.
std::string strip_comment(std::string_view line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return std::string(line.substr(0, i));
    }
    return std::string(line);
}

std::string unquote(const std::string& v, const std::string& ctx) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
        return v.substr(1, v.size() - 2);
    if (!v.empty() && (v.front() == '"' || v.back() == '"'))
        throw ConfigError(ctx + ": unbalanced quotes in \"" + v + "\"");
    return v;
}

std::uint64_t parse_u64(const std::string& v, const std::string& ctx) {
    const long long x = parse_int(v, ctx);
    if (x < 0) throw ConfigError(ctx + ": value must be non-negative, got " + v);
    return static_cast<std::uint64_t>(x);
}

int parse_i(const std::string& v, const std::string& ctx) {
    return static_cast<int>(parse_int(v, ctx));
}

}  // namespace

void TrainConfig::resolve_seeds() {
    if (!model_seed_set) model.seed = io.seed;
}

void TrainConfig::validate() const {
    model.validate();
    task.validate();
    grpo.validate();
    schedule.validate();
    if (io.steps < 1) throw ConfigError("io.steps must be at least 1");
    if (io.checkpoint_every < 1) throw ConfigError("io.checkpoint_every must be at least 1");
    if (io.threads < 0) throw ConfigError("io.threads must be non-negative");
    if (io.run_id.empty()) throw ConfigError("io.run_id must not be empty");
}

TrainConfig parse_train_config_text(std::string_view text, const std::string& where) {
    TrainConfig cfg;
    std::string section;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string ctx = where + " line " + std::to_string(lineno);
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(ctx + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "task" && section != "grpo" &&
                section != "schedule" && section != "io")
                throw ConfigError(ctx + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(ctx + ": expected key = value");
        if (section.empty()) throw ConfigError(ctx + ": key outside any section");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = unquote(trim(line.substr(eq + 1)), ctx);
        if (key.empty()) throw ConfigError(ctx + ": empty key");
        const std::string full = section + "." + key;
        if (!seen.insert(full).second) throw ConfigError(ctx + ": duplicate key " + full);

        if (full == "model.vocab_size") cfg.model.vocab_size = parse_i(value, ctx);
        else if (full == "model.context_len") cfg.model.context_len = parse_i(value, ctx);
        else if (full == "model.d_model") cfg.model.d_model = parse_i(value, ctx);
        else if (full == "model.n_heads") cfg.model.n_heads = parse_i(value, ctx);
        else if (full == "model.n_layers") cfg.model.n_layers = parse_i(value, ctx);
        else if (full == "model.ln_eps") cfg.model.ln_eps = parse_double(value, ctx);
        else if (full == "model.seed") {
            cfg.model.seed = parse_u64(value, ctx);
            cfg.model_seed_set = true;
        } else if (full == "task.kind") cfg.task.kind = task_kind_from_name(value);
        else if (full == "task.modulus") cfg.task.modulus = parse_i(value, ctx);
        else if (full == "task.min_copy_len") cfg.task.min_copy_len = parse_i(value, ctx);
        else if (full == "task.max_copy_len") cfg.task.max_copy_len = parse_i(value, ctx);
        else if (full == "grpo.group_size") cfg.grpo.group_size = parse_i(value, ctx);
        else if (full == "grpo.prompts_per_batch") cfg.grpo.prompts_per_batch = parse_i(value, ctx);
        else if (full == "grpo.clip_lo") cfg.grpo.clip_lo = parse_double(value, ctx);
        else if (full == "grpo.clip_hi") cfg.grpo.clip_hi = parse_double(value, ctx);
        else if (full == "grpo.temperature") cfg.grpo.temperature = parse_double(value, ctx);
        else if (full == "grpo.lr") cfg.grpo.lr = parse_double(value, ctx);
        else if (full == "grpo.adv_epsilon") cfg.grpo.adv_epsilon = parse_double(value, ctx);
        else if (full == "grpo.minibatch_epochs") cfg.grpo.minibatch_epochs = parse_i(value, ctx);
        else if (full == "schedule.m") cfg.schedule.m = parse_i(value, ctx);
        else if (full == "schedule.n") cfg.schedule.n = parse_i(value, ctx);
        else if (full == "schedule.beta") cfg.schedule.beta = parse_double(value, ctx);
        else if (full == "schedule.anchor") cfg.schedule.anchor = anchor_mode_from_name(value);
        else if (full == "schedule.extra_adam")
            cfg.schedule.extra_adam = extra_adam_mode_from_name(value);
        else if (full == "io.out_dir") cfg.io.out_dir = value;
        else if (full == "io.steps") cfg.io.steps = parse_u64(value, ctx);
        else if (full == "io.checkpoint_every") cfg.io.checkpoint_every = parse_u64(value, ctx);
        else if (full == "io.seed") cfg.io.seed = parse_u64(value, ctx);
        else if (full == "io.threads") cfg.io.threads = parse_i(value, ctx);
        else if (full == "io.run_id") cfg.io.run_id = value;
        else throw ConfigError(ctx + ": unknown key " + full);
    }
    return cfg;
}

TrainConfig parse_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_train_config_text(buf.str(), path.string());
}

nlohmann::ordered_json train_config_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["model"] = {{"vocab_size", cfg.model.vocab_size},
                  {"context_len", cfg.model.context_len},
                  {"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},
                  {"n_layers", cfg.model.n_layers},
                  {"ln_eps", cfg.model.ln_eps},
                  {"seed", cfg.model.seed}};
    j["task"] = {{"kind", task_kind_name(cfg.task.kind)},
                 {"modulus", cfg.task.modulus},
                 {"min_copy_len", cfg.task.min_copy_len},
                 {"max_copy_len", cfg.task.max_copy_len}};
    j["grpo"] = {{"group_size", cfg.grpo.group_size},
                 {"prompts_per_batch", cfg.grpo.prompts_per_batch},
                 {"clip_lo", cfg.grpo.clip_lo},
                 {"clip_hi", cfg.grpo.clip_hi},
                 {"temperature", cfg.grpo.temperature},
                 {"lr", cfg.grpo.lr},
                 {"adv_epsilon", cfg.grpo.adv_epsilon},
                 {"minibatch_epochs", cfg.grpo.minibatch_epochs}};
    j["schedule"] = {{"m", cfg.schedule.m},
                     {"n", cfg.schedule.n},
                     {"beta", cfg.schedule.beta},
                     {"anchor", anchor_mode_name(cfg.schedule.anchor)},
                     {"extra_adam", extra_adam_mode_name(cfg.schedule.extra_adam)}};
    j["io"] = {{"out_dir", cfg.io.out_dir.string()},
               {"steps", cfg.io.steps},
               {"checkpoint_every", cfg.io.checkpoint_every},
               {"seed", cfg.io.seed},
               {"threads", cfg.io.threads},
               {"run_id", cfg.io.run_id}};
    return j;
}

}  // namespace linex
