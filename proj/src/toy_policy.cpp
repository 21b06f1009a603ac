// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/toy_policy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>

#include "linex/csv.hpp"

namespace linex {

namespace {

std::atomic<std::uint64_t> g_forward_calls{0};
std::atomic<std::uint64_t> g_backward_calls{0};

constexpr double kSqrt2 = 1.41421356237309504880;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / kSqrt2)); }

double gelu_grad(double z) {
    return 0.5 * (1.0 + std::erf(z / kSqrt2)) + z * kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

// y = W x, W stored F32 row-major [out x in], math in F64. Four independent
// accumulators keep the association fixed while letting the compiler
// vectorize the hot loop.
void matvec(const float* w, const double* x, double* y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const float* row = w + static_cast<std::size_t>(o) * in;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        int i = 0;
        for (; i + 4 <= in; i += 4) {
            s0 += static_cast<double>(row[i]) * x[i];
            s1 += static_cast<double>(row[i + 1]) * x[i + 1];
            s2 += static_cast<double>(row[i + 2]) * x[i + 2];
            s3 += static_cast<double>(row[i + 3]) * x[i + 3];
        }
        for (; i < in; ++i) s0 += static_cast<double>(row[i]) * x[i];
        y[o] = ((s0 + s1) + (s2 + s3));
    }
}

// dx += W^T dy
void matvec_t_acc(const float* w, const double* dy, double* dx, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const float* row = w + static_cast<std::size_t>(o) * in;
        const double d = dy[o];
        if (d == 0.0) continue;
        for (int i = 0; i < in; ++i) dx[i] += static_cast<double>(row[i]) * d;
    }
}

// dW += dy x^T
void outer_acc(double* dw, const double* dy, const double* x, int out, int in) {
    for (int o = 0; o < out; ++o) {
        double* row = dw + static_cast<std::size_t>(o) * in;
        const double d = dy[o];
        if (d == 0.0) continue;
        for (int i = 0; i < in; ++i) row[i] += d * x[i];
    }
}

struct LayerCache {
    std::vector<double> x_in;                  // T x D residual stream entering the block
    std::vector<double> ln1_xhat, ln1_sigma;   // T x D, T
    std::vector<double> q, k, v;               // T x D
    std::vector<double> probs;                 // H x T x T softmax weights
    std::vector<double> ctx;                   // T x D
    std::vector<double> x_mid;                 // T x D residual after attention
    std::vector<double> ln2_xhat, ln2_sigma;
    std::vector<double> mlp_in;                // T x D  (= ln2 output)
    std::vector<double> u_pre, u;              // T x F
};

struct Cache {
    std::vector<LayerCache> layers;
    std::vector<double> x_final;               // T x D before final LN
    std::vector<double> lnf_xhat, lnf_sigma;
    std::vector<double> hf;                    // T x D
    std::vector<double> logits;                // T x V
    std::vector<std::vector<double>> block_out;  // per layer, T x D
};

// y = g * (x - mean)/sigma + b, sigma = sqrt(var + eps); caches xhat, sigma.
void layernorm(const double* x, const float* g, const float* b, int d, double eps, double* y,
               double* xhat, double* sigma_out) {
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= d;
    const double sigma = std::sqrt(var + eps);
    const double inv = 1.0 / sigma;
    for (int i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mean) * inv;
        y[i] = static_cast<double>(g[i]) * xhat[i] + static_cast<double>(b[i]);
    }
    *sigma_out = sigma;
}

// Accumulates dg, db and writes dx (overwrites).
void layernorm_backward(const double* dy, const double* xhat, double sigma, const float* g, int d,
                        double* dg, double* db, double* dx) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        const double dxhat = dy[i] * static_cast<double>(g[i]);
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat[i];
    }
    const double inv = 1.0 / sigma;
    const double mean_dxhat = sum_dxhat / d;
    const double mean_dxhat_xhat = sum_dxhat_xhat / d;
    for (int i = 0; i < d; ++i) {
        const double dxhat = dy[i] * static_cast<double>(g[i]);
        dx[i] = inv * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

struct BlockParams {
    const float* ln1_g;
    const float* ln1_b;
    const float* wq;
    const float* wk;
    const float* wv;
    const float* wo;
    const float* ln2_g;
    const float* ln2_b;
    const float* w_up;
    const float* w_down;
};

struct ParamView {
    const float* emb_tok;
    const float* emb_pos;
    std::vector<BlockParams> blocks;
    const float* lnf_g;
    const float* lnf_b;
    const float* head;
};

ParamView make_view(const PolicyModel& model) {
    const auto& cfg = model.config();
    ParamView pv;
    pv.emb_tok = model.tensor("emb.tok").v.data();
    pv.emb_pos = model.tensor("emb.pos").v.data();
    pv.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blk" + std::to_string(l) + ".";
        auto& bp = pv.blocks[static_cast<std::size_t>(l)];
        bp.ln1_g = model.tensor(p + "ln1.g").v.data();
        bp.ln1_b = model.tensor(p + "ln1.b").v.data();
        bp.wq = model.tensor(p + "attn.q").v.data();
        bp.wk = model.tensor(p + "attn.k").v.data();
        bp.wv = model.tensor(p + "attn.v").v.data();
        bp.wo = model.tensor(p + "attn.o").v.data();
        bp.ln2_g = model.tensor(p + "ln2.g").v.data();
        bp.ln2_b = model.tensor(p + "ln2.b").v.data();
        bp.w_up = model.tensor(p + "mlp.up").v.data();
        bp.w_down = model.tensor(p + "mlp.down").v.data();
    }
    pv.lnf_g = model.tensor("ln_f.g").v.data();
    pv.lnf_b = model.tensor("ln_f.b").v.data();
    pv.head = model.tensor("head").v.data();
    return pv;
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw ConfigError("empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.context_len)
        throw ConfigError("sequence length " + std::to_string(tokens.size()) +
                          " exceeds context_len " + std::to_string(cfg.context_len));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw ConfigError("token " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " outside vocabulary of size " +
                              std::to_string(cfg.vocab_size));
}

void run_forward(const PolicyModel& model, std::span<const int> tokens, Cache& c,
                 bool keep_block_out) {
    g_forward_calls.fetch_add(1, std::memory_order_relaxed);
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    const ParamView pv = make_view(model);

    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int F = cfg.d_ff();
    const int H = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int V = cfg.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    const std::size_t td = static_cast<std::size_t>(T) * D;

    std::vector<double> x(td);
    for (int t = 0; t < T; ++t) {
        const float* e = pv.emb_tok + static_cast<std::size_t>(tokens[t]) * D;
        const float* p = pv.emb_pos + static_cast<std::size_t>(t) * D;
        for (int i = 0; i < D; ++i)
            x[static_cast<std::size_t>(t) * D + i] =
                static_cast<double>(e[i]) + static_cast<double>(p[i]);
    }

    c.layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
    if (keep_block_out) c.block_out.assign(static_cast<std::size_t>(cfg.n_layers), {});

    std::vector<double> a(td);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lc = c.layers[static_cast<std::size_t>(l)];
        const auto& bp = pv.blocks[static_cast<std::size_t>(l)];
        lc.x_in = x;
        lc.ln1_xhat.resize(td);
        lc.ln1_sigma.resize(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t)
            layernorm(&x[static_cast<std::size_t>(t) * D], bp.ln1_g, bp.ln1_b, D, cfg.ln_eps,
                      &a[static_cast<std::size_t>(t) * D], &lc.ln1_xhat[static_cast<std::size_t>(t) * D],
                      &lc.ln1_sigma[static_cast<std::size_t>(t)]);

        lc.q.resize(td);
        lc.k.resize(td);
        lc.v.resize(td);
        for (int t = 0; t < T; ++t) {
            const double* at = &a[static_cast<std::size_t>(t) * D];
            matvec(bp.wq, at, &lc.q[static_cast<std::size_t>(t) * D], D, D);
            matvec(bp.wk, at, &lc.k[static_cast<std::size_t>(t) * D], D, D);
            matvec(bp.wv, at, &lc.v[static_cast<std::size_t>(t) * D], D, D);
        }

        lc.probs.assign(static_cast<std::size_t>(H) * T * T, 0.0);
        lc.ctx.assign(td, 0.0);
        std::vector<double> scores(static_cast<std::size_t>(T));
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < T; ++t) {
                const double* qt = &lc.q[static_cast<std::size_t>(t) * D + off];
                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    const double* ku = &lc.k[static_cast<std::size_t>(u) * D + off];
                    double s = 0.0;
                    for (int i = 0; i < Dh; ++i) s += qt[i] * ku[i];
                    s *= scale;
                    scores[static_cast<std::size_t>(u)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const double e = std::exp(scores[static_cast<std::size_t>(u)] - mx);
                    scores[static_cast<std::size_t>(u)] = e;
                    z += e;
                }
                double* prow = &lc.probs[(static_cast<std::size_t>(h) * T + t) * T];
                double* ctx = &lc.ctx[static_cast<std::size_t>(t) * D + off];
                for (int u = 0; u <= t; ++u) {
                    const double p = scores[static_cast<std::size_t>(u)] / z;
                    prow[u] = p;
                    const double* vu = &lc.v[static_cast<std::size_t>(u) * D + off];
                    for (int i = 0; i < Dh; ++i) ctx[i] += p * vu[i];
                }
            }
        }

        lc.x_mid.resize(td);
        std::vector<double> attn_out(static_cast<std::size_t>(D));
        for (int t = 0; t < T; ++t) {
            matvec(bp.wo, &lc.ctx[static_cast<std::size_t>(t) * D], attn_out.data(), D, D);
            for (int i = 0; i < D; ++i)
                lc.x_mid[static_cast<std::size_t>(t) * D + i] =
                    x[static_cast<std::size_t>(t) * D + i] + attn_out[i];
        }

        lc.ln2_xhat.resize(td);
        lc.ln2_sigma.resize(static_cast<std::size_t>(T));
        lc.mlp_in.resize(td);
        for (int t = 0; t < T; ++t)
            layernorm(&lc.x_mid[static_cast<std::size_t>(t) * D], bp.ln2_g, bp.ln2_b, D, cfg.ln_eps,
                      &lc.mlp_in[static_cast<std::size_t>(t) * D],
                      &lc.ln2_xhat[static_cast<std::size_t>(t) * D],
                      &lc.ln2_sigma[static_cast<std::size_t>(t)]);

        lc.u_pre.resize(static_cast<std::size_t>(T) * F);
        lc.u.resize(static_cast<std::size_t>(T) * F);
        std::vector<double> mlp_out(static_cast<std::size_t>(D));
        for (int t = 0; t < T; ++t) {
            double* up = &lc.u_pre[static_cast<std::size_t>(t) * F];
            double* uu = &lc.u[static_cast<std::size_t>(t) * F];
            matvec(bp.w_up, &lc.mlp_in[static_cast<std::size_t>(t) * D], up, F, D);
            for (int i = 0; i < F; ++i) uu[i] = gelu(up[i]);
            matvec(bp.w_down, uu, mlp_out.data(), D, F);
            for (int i = 0; i < D; ++i)
                x[static_cast<std::size_t>(t) * D + i] =
                    lc.x_mid[static_cast<std::size_t>(t) * D + i] + mlp_out[i];
        }
        if (keep_block_out) c.block_out[static_cast<std::size_t>(l)] = x;
    }

    c.x_final = x;
    c.lnf_xhat.resize(td);
    c.lnf_sigma.resize(static_cast<std::size_t>(T));
    c.hf.resize(td);
    for (int t = 0; t < T; ++t)
        layernorm(&x[static_cast<std::size_t>(t) * D], pv.lnf_g, pv.lnf_b, D, cfg.ln_eps,
                  &c.hf[static_cast<std::size_t>(t) * D], &c.lnf_xhat[static_cast<std::size_t>(t) * D],
                  &c.lnf_sigma[static_cast<std::size_t>(t)]);

    c.logits.resize(static_cast<std::size_t>(T) * V);
    for (int t = 0; t < T; ++t)
        matvec(pv.head, &c.hf[static_cast<std::size_t>(t) * D],
               &c.logits[static_cast<std::size_t>(t) * V], V, D);
}

double log_sum_exp(const double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(v[i] - mx);
    return mx + std::log(z);
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || context_len < 1 || d_model < 1 || n_heads < 1 || n_layers < 1)
        throw ConfigError("model extents must all be >= 1");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
}

PolicyModel make_model_shell(const ModelConfig& cfg) {
    cfg.validate();
    PolicyModel m;
    m.cfg_ = cfg;
    const auto V = static_cast<std::uint64_t>(cfg.vocab_size);
    const auto C = static_cast<std::uint64_t>(cfg.context_len);
    const auto D = static_cast<std::uint64_t>(cfg.d_model);
    const auto F = static_cast<std::uint64_t>(cfg.d_ff());
    auto add = [&](std::string name, std::vector<std::uint64_t> dims) {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        m.params_.push_back({std::move(name), std::move(dims), std::vector<float>(n, 0.0f)});
    };
    add("emb.tok", {V, D});
    add("emb.pos", {C, D});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blk" + std::to_string(l) + ".";
        add(p + "ln1.g", {D});
        add(p + "ln1.b", {D});
        add(p + "attn.q", {D, D});
        add(p + "attn.k", {D, D});
        add(p + "attn.v", {D, D});
        add(p + "attn.o", {D, D});
        add(p + "ln2.g", {D});
        add(p + "ln2.b", {D});
        add(p + "mlp.up", {F, D});
        add(p + "mlp.down", {D, F});
    }
    add("ln_f.g", {D});
    add("ln_f.b", {D});
    add("head", {V, D});
    m.rebuild_index();
    return m;
}

PolicyModel PolicyModel::init(const ModelConfig& cfg) {
    PolicyModel m = make_model_shell(cfg);
    Rng rng(derive_seed(cfg.seed, 0x6D6F64656C));  // "model"
    constexpr double kInitStd = 0.02;
    for (auto& t : m.params_) {
        const bool is_gain = t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".g") == 0;
        const bool is_bias = t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".b") == 0;
        if (is_gain) {
            std::fill(t.v.begin(), t.v.end(), 1.0f);
        } else if (is_bias) {
            std::fill(t.v.begin(), t.v.end(), 0.0f);
        } else {
            for (auto& w : t.v) w = static_cast<float>(rng.normal(0.0, kInitStd));
        }
    }
    return m;
}

PolicyModel PolicyModel::from_checkpoint(const CheckpointReader& reader, int n_heads,
                                         double ln_eps) {
    return from_checkpoint(reader.read_all(), n_heads, ln_eps);
}

PolicyModel PolicyModel::from_checkpoint(const Checkpoint& ckpt, int n_heads, double ln_eps) {
    const TensorData* emb = ckpt.find("emb.tok");
    const TensorData* pos = ckpt.find("emb.pos");
    if (!emb || emb->dims.size() != 2 || !pos || pos->dims.size() != 2)
        throw FormatError("checkpoint lacks emb.tok/emb.pos policy tensors");
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(emb->dims[0]);
    cfg.d_model = static_cast<int>(emb->dims[1]);
    cfg.context_len = static_cast<int>(pos->dims[0]);
    cfg.n_heads = n_heads;
    cfg.ln_eps = ln_eps;
    cfg.n_layers = 0;
    while (ckpt.find("blk" + std::to_string(cfg.n_layers) + ".attn.q")) ++cfg.n_layers;
    if (cfg.n_layers == 0) throw FormatError("checkpoint has no transformer blocks");

    PolicyModel m = make_model_shell(cfg);
    for (auto& t : m.params_) {
        const TensorData* td = ckpt.find(t.name);
        if (!td) throw FormatError("checkpoint missing tensor " + t.name);
        if (td->dims != t.dims)
            throw FormatError("checkpoint tensor " + t.name + " has unexpected shape");
        for (std::size_t i = 0; i < td->values.size(); ++i)
            t.v[i] = static_cast<float>(td->values[i]);
    }
    return m;
}

void PolicyModel::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

ParamTensor& PolicyModel::tensor(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no such parameter tensor: " + std::string(name));
    return params_[it->second];
}

const ParamTensor& PolicyModel::tensor(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no such parameter tensor: " + std::string(name));
    return params_[it->second];
}

std::size_t PolicyModel::param_count() const {
    std::size_t n = 0;
    for (const auto& t : params_) n += t.v.size();
    return n;
}

Checkpoint PolicyModel::to_checkpoint(std::uint64_t step) const {
    Checkpoint ckpt;
    ckpt.step = step;
    for (const auto& t : params_) {
        TensorData td;
        td.name = t.name;
        td.dtype = DType::F32;
        td.dims = t.dims;
        td.values.assign(t.v.begin(), t.v.end());
        ckpt.tensors.push_back(std::move(td));
    }
    return ckpt;
}

std::vector<float> PolicyModel::snapshot() const {
    std::vector<float> flat;
    flat.reserve(param_count());
    for (const auto& t : params_) flat.insert(flat.end(), t.v.begin(), t.v.end());
    return flat;
}

void PolicyModel::load_snapshot(std::span<const float> flat) {
    if (flat.size() != param_count())
        throw ConfigError("snapshot size mismatch: " + std::to_string(flat.size()) + " vs " +
                          std::to_string(param_count()));
    std::size_t off = 0;
    for (auto& t : params_) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + t.v.size()), t.v.begin());
        off += t.v.size();
    }
}

ModelLoadSpec resolve_model_load(const Trajectory& traj, int n_heads_override) {
    ModelLoadSpec mls;
    if (n_heads_override > 0) {
        mls.n_heads = n_heads_override;
    } else if (auto v = traj.metadata_value("model.n_heads")) {
        mls.n_heads = static_cast<int>(parse_int(*v, "trajectory metadata model.n_heads"));
    } else {
        throw ConfigError(
            "trajectory metadata lacks model.n_heads; pass the head count explicitly");
    }
    if (auto v = traj.metadata_value("model.ln_eps"))
        mls.ln_eps = parse_double(*v, "trajectory metadata model.ln_eps");
    return mls;
}

std::vector<std::string> valid_taps(const ModelConfig& cfg) {
    std::vector<std::string> taps;
    for (int l = 0; l < cfg.n_layers; ++l) taps.push_back("blk" + std::to_string(l) + ".out");
    taps.push_back("logits");
    return taps;
}

ForwardResult forward(const PolicyModel& model, std::span<const int> tokens,
                      const std::vector<std::string>* taps) {
    bool want_block_out = false;
    if (taps)
        for (const auto& t : *taps)
            if (t != "logits") want_block_out = true;

    Cache c;
    run_forward(model, tokens, c, want_block_out);

    ForwardResult fr;
    fr.logits = std::move(c.logits);
    if (taps) {
        const auto& cfg = model.config();
        for (const auto& name : *taps) {
            if (name == "logits") {
                fr.taps[name] = fr.logits;
                continue;
            }
            bool matched = false;
            for (int l = 0; l < cfg.n_layers; ++l) {
                if (name == "blk" + std::to_string(l) + ".out") {
                    fr.taps[name] = c.block_out[static_cast<std::size_t>(l)];
                    matched = true;
                } else if (name == "blk" + std::to_string(l) + ".mlp_in") {
                    fr.taps[name] = c.layers[static_cast<std::size_t>(l)].mlp_in;
                    matched = true;
                }
            }
            if (!matched) {
                std::string valid;
                for (const auto& v : valid_taps(cfg)) {
                    if (!valid.empty()) valid += ", ";
                    valid += v;
                }
                throw ConfigError("unknown tap '" + name + "'; valid taps: [" + valid + "]");
            }
        }
    }
    return fr;
}

Gradients Gradients::zeros_like(const PolicyModel& model) {
    Gradients g;
    g.g.reserve(model.tensors().size());
    for (const auto& t : model.tensors()) g.g.emplace_back(t.v.size(), 0.0);
    return g;
}

void Gradients::accumulate(const Gradients& other) {
    if (g.size() != other.g.size()) throw ConfigError("gradient structure mismatch");
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] += other.g[i][j];
}

void Gradients::scale(double s) {
    for (auto& t : g)
        for (auto& v : t) v *= s;
}

double Gradients::squared_norm() const {
    double s = 0.0;
    for (const auto& t : g)
        for (double v : t) s += v * v;
    return s;
}

std::vector<double> Gradients::flatten() const {
    std::vector<double> flat;
    std::size_t n = 0;
    for (const auto& t : g) n += t.size();
    flat.reserve(n);
    for (const auto& t : g) flat.insert(flat.end(), t.begin(), t.end());
    return flat;
}

double backward(const PolicyModel& model, std::span<const int> tokens,
                std::span<const double> weights, Gradients* out, double temperature) {
    g_backward_calls.fetch_add(1, std::memory_order_relaxed);
    const auto& cfg = model.config();
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    if (weights.size() != tokens.size())
        throw ConfigError("loss weights size " + std::to_string(weights.size()) +
                          " does not match token count " + std::to_string(tokens.size()));
    for (std::size_t i = 0; i < weights.size(); ++i)
        if (!std::isfinite(weights[i]))
            throw NumericError("non-finite loss weight at position " + std::to_string(i));
    if (!out) throw ConfigError("backward requires a gradient output");
    if (out->g.size() != model.tensors().size()) *out = Gradients::zeros_like(model);

    Cache c;
    run_forward(model, tokens, c, false);
    const ParamView pv = make_view(model);

    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int F = cfg.d_ff();
    const int H = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int V = cfg.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    const std::size_t td = static_cast<std::size_t>(T) * D;

    // Objective value and dJ/dlogits.
    double objective = 0.0;
    std::vector<double> dlogits(static_cast<std::size_t>(T) * V, 0.0);
    std::vector<double> scaled(static_cast<std::size_t>(V));
    for (int i = 1; i < T; ++i) {
        const double w = weights[static_cast<std::size_t>(i)];
        if (w == 0.0) continue;
        const double* lrow = &c.logits[static_cast<std::size_t>(i - 1) * V];
        for (int j = 0; j < V; ++j) scaled[static_cast<std::size_t>(j)] = lrow[j] / temperature;
        const double lse = log_sum_exp(scaled.data(), V);
        objective += w * (scaled[static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)])] - lse);
        double* drow = &dlogits[static_cast<std::size_t>(i - 1) * V];
        const double wt = w / temperature;
        for (int j = 0; j < V; ++j)
            drow[j] -= wt * std::exp(scaled[static_cast<std::size_t>(j)] - lse);
        drow[tokens[static_cast<std::size_t>(i)]] += wt;
    }

    auto grad_of = [&](const std::string& name) -> double* {
        for (std::size_t i = 0; i < model.tensors().size(); ++i)
            if (model.tensors()[i].name == name) return out->g[i].data();
        throw ConfigError("gradient tensor not found: " + name);
    };

    // Head and final LN.
    std::vector<double> dx(td, 0.0);
    {
        double* d_head = grad_of("head");
        double* d_g = grad_of("ln_f.g");
        double* d_b = grad_of("ln_f.b");
        std::vector<double> dhf(static_cast<std::size_t>(D));
        for (int t = 0; t < T; ++t) {
            const double* drow = &dlogits[static_cast<std::size_t>(t) * V];
            std::fill(dhf.begin(), dhf.end(), 0.0);
            matvec_t_acc(pv.head, drow, dhf.data(), V, D);
            outer_acc(d_head, drow, &c.hf[static_cast<std::size_t>(t) * D], V, D);
            layernorm_backward(dhf.data(), &c.lnf_xhat[static_cast<std::size_t>(t) * D],
                               c.lnf_sigma[static_cast<std::size_t>(t)], pv.lnf_g, D, d_g, d_b,
                               &dx[static_cast<std::size_t>(t) * D]);
        }
    }

    std::vector<double> da(td), dq(td), dk(td), dv(td), dctx(td), dmid(td);
    std::vector<double> du(static_cast<std::size_t>(T) * F);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lc = c.layers[static_cast<std::size_t>(l)];
        const auto& bp = pv.blocks[static_cast<std::size_t>(l)];
        const std::string p = "blk" + std::to_string(l) + ".";
        double* d_ln1g = grad_of(p + "ln1.g");
        double* d_ln1b = grad_of(p + "ln1.b");
        double* d_wq = grad_of(p + "attn.q");
        double* d_wk = grad_of(p + "attn.k");
        double* d_wv = grad_of(p + "attn.v");
        double* d_wo = grad_of(p + "attn.o");
        double* d_ln2g = grad_of(p + "ln2.g");
        double* d_ln2b = grad_of(p + "ln2.b");
        double* d_up = grad_of(p + "mlp.up");
        double* d_down = grad_of(p + "mlp.down");

        // MLP backward: dx is d(block output); residual passes it through.
        std::fill(dmid.begin(), dmid.end(), 0.0);
        std::vector<double> dmlp_in(static_cast<std::size_t>(D));
        for (int t = 0; t < T; ++t) {
            const double* dxt = &dx[static_cast<std::size_t>(t) * D];
            double* dut = &du[static_cast<std::size_t>(t) * F];
            std::fill(dut, dut + F, 0.0);
            matvec_t_acc(bp.w_down, dxt, dut, D, F);
            outer_acc(d_down, dxt, &lc.u[static_cast<std::size_t>(t) * F], D, F);
            for (int i = 0; i < F; ++i)
                dut[i] *= gelu_grad(lc.u_pre[static_cast<std::size_t>(t) * F + i]);
            std::fill(dmlp_in.begin(), dmlp_in.end(), 0.0);
            matvec_t_acc(bp.w_up, dut, dmlp_in.data(), F, D);
            outer_acc(d_up, dut, &lc.mlp_in[static_cast<std::size_t>(t) * D], F, D);
            layernorm_backward(dmlp_in.data(), &lc.ln2_xhat[static_cast<std::size_t>(t) * D],
                               lc.ln2_sigma[static_cast<std::size_t>(t)], bp.ln2_g, D, d_ln2g,
                               d_ln2b, &dmid[static_cast<std::size_t>(t) * D]);
            for (int i = 0; i < D; ++i)
                dmid[static_cast<std::size_t>(t) * D + i] += dxt[i];  // residual
        }

        // Attention backward: dmid is d(x_mid).
        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const double* dmt = &dmid[static_cast<std::size_t>(t) * D];
            matvec_t_acc(bp.wo, dmt, &dctx[static_cast<std::size_t>(t) * D], D, D);
            outer_acc(d_wo, dmt, &lc.ctx[static_cast<std::size_t>(t) * D], D, D);
        }
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dp(static_cast<std::size_t>(T));
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < T; ++t) {
                const double* prow = &lc.probs[(static_cast<std::size_t>(h) * T + t) * T];
                const double* dctx_t = &dctx[static_cast<std::size_t>(t) * D + off];
                double dot_pd = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const double* vu = &lc.v[static_cast<std::size_t>(u) * D + off];
                    double s = 0.0;
                    for (int i = 0; i < Dh; ++i) s += dctx_t[i] * vu[i];
                    dp[static_cast<std::size_t>(u)] = s;
                    dot_pd += prow[u] * s;
                    double* dvu = &dv[static_cast<std::size_t>(u) * D + off];
                    for (int i = 0; i < Dh; ++i) dvu[i] += prow[u] * dctx_t[i];
                }
                const double* qt = &lc.q[static_cast<std::size_t>(t) * D + off];
                double* dqt = &dq[static_cast<std::size_t>(t) * D + off];
                for (int u = 0; u <= t; ++u) {
                    const double ds = prow[u] * (dp[static_cast<std::size_t>(u)] - dot_pd) * scale;
                    if (ds == 0.0) continue;
                    const double* ku = &lc.k[static_cast<std::size_t>(u) * D + off];
                    double* dku = &dk[static_cast<std::size_t>(u) * D + off];
                    for (int i = 0; i < Dh; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }

        // Projections and first LN; da collects all three branches.
        std::fill(da.begin(), da.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const std::size_t o = static_cast<std::size_t>(t) * D;
            matvec_t_acc(bp.wq, &dq[o], &da[o], D, D);
            matvec_t_acc(bp.wk, &dk[o], &da[o], D, D);
            matvec_t_acc(bp.wv, &dv[o], &da[o], D, D);
            // a = ln1(x_in); recompute a from xhat for the outer products.
        }
        std::vector<double> a_t(static_cast<std::size_t>(D));
        for (int t = 0; t < T; ++t) {
            const std::size_t o = static_cast<std::size_t>(t) * D;
            for (int i = 0; i < D; ++i)
                a_t[static_cast<std::size_t>(i)] =
                    static_cast<double>(bp.ln1_g[i]) * lc.ln1_xhat[o + i] +
                    static_cast<double>(bp.ln1_b[i]);
            outer_acc(d_wq, &dq[o], a_t.data(), D, D);
            outer_acc(d_wk, &dk[o], a_t.data(), D, D);
            outer_acc(d_wv, &dv[o], a_t.data(), D, D);
        }
        for (int t = 0; t < T; ++t) {
            const std::size_t o = static_cast<std::size_t>(t) * D;
            layernorm_backward(&da[o], &lc.ln1_xhat[o], lc.ln1_sigma[static_cast<std::size_t>(t)],
                               bp.ln1_g, D, d_ln1g, d_ln1b, &dx[o]);
            for (int i = 0; i < D; ++i) dx[o + i] += dmid[o + i];  // residual
        }
    }

    // Embeddings.
    {
        double* d_tok = grad_of("emb.tok");
        double* d_pos = grad_of("emb.pos");
        for (int t = 0; t < T; ++t) {
            const std::size_t o = static_cast<std::size_t>(t) * D;
            double* dt = d_tok + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * D;
            double* dpos = d_pos + static_cast<std::size_t>(t) * D;
            for (int i = 0; i < D; ++i) {
                dt[i] += dx[o + i];
                dpos[i] += dx[o + i];
            }
        }
    }
    return objective;
}

AdamState AdamState::init(const PolicyModel& model, double lr_in) {
    AdamState s;
    s.lr = lr_in;
    s.m.reserve(model.tensors().size());
    s.v.reserve(model.tensors().size());
    for (const auto& t : model.tensors()) {
        s.m.emplace_back(t.v.size(), 0.0);
        s.v.emplace_back(t.v.size(), 0.0);
    }
    return s;
}

AdamStepStats adam_step(PolicyModel& model, const Gradients& grads, AdamState& state) {
    auto& tensors = model.tensors();
    if (grads.g.size() != tensors.size() || state.m.size() != tensors.size())
        throw ConfigError("Adam state/gradient structure mismatch");
    for (std::size_t i = 0; i < grads.g.size(); ++i)
        for (std::size_t j = 0; j < grads.g[i].size(); ++j)
            if (!std::isfinite(grads.g[i][j]))
                throw NumericError("non-finite gradient in tensor " + tensors[i].name +
                                   " at index " + std::to_string(j) + "; step rejected");

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

    AdamStepStats stats;
    double sum_abs = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& w = tensors[i].v;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads.g[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            const double dw = -state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
            const double updated = static_cast<double>(w[j]) + dw;
            w[j] = static_cast<float>(updated);
            const double abs_dw = std::fabs(dw);
            sum_abs += abs_dw;
            stats.max_abs_dw = std::max(stats.max_abs_dw, abs_dw);
            ++count;
        }
    }
    stats.mean_abs_dw = count ? sum_abs / static_cast<double>(count) : 0.0;
    return stats;
}

int sample_from_logits(std::span<const double> logits, double temperature, double top_p, Rng& rng,
                       double* logprob_out) {
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    if (top_p <= 0.0 || top_p > 1.0) throw ConfigError("top_p must be in (0, 1]");
    const int n = static_cast<int>(logits.size());
    std::vector<double> scaled(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(logits[static_cast<std::size_t>(i)]))
            throw NumericError("non-finite logit at index " + std::to_string(i));
        scaled[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] / temperature;
    }
    const double lse = log_sum_exp(scaled.data(), n);
    std::vector<double> prob(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        prob[static_cast<std::size_t>(i)] = std::exp(scaled[static_cast<std::size_t>(i)] - lse);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double pa = prob[static_cast<std::size_t>(a)], pb = prob[static_cast<std::size_t>(b)];
        return pa != pb ? pa > pb : a < b;
    });

    // Nucleus: smallest prefix whose mass reaches top_p, at least one token.
    std::size_t keep = 0;
    double mass = 0.0;
    while (keep < order.size()) {
        mass += prob[static_cast<std::size_t>(order[keep])];
        ++keep;
        if (mass >= top_p) break;
    }

    const double u = rng.uniform01() * mass;
    double cum = 0.0;
    int chosen = order[keep - 1];
    for (std::size_t i = 0; i < keep; ++i) {
        cum += prob[static_cast<std::size_t>(order[i])];
        if (u < cum) {
            chosen = order[i];
            break;
        }
    }
    if (logprob_out) *logprob_out = scaled[static_cast<std::size_t>(chosen)] - lse;
    return chosen;
}

double token_logprob(std::span<const double> logits, int token, double temperature) {
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    const int n = static_cast<int>(logits.size());
    if (token < 0 || token >= n)
        throw ConfigError("token " + std::to_string(token) + " outside logit vector of size " +
                          std::to_string(n));
    std::vector<double> scaled(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(logits[static_cast<std::size_t>(i)]))
            throw NumericError("non-finite logit at index " + std::to_string(i));
        scaled[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] / temperature;
    }
    return scaled[static_cast<std::size_t>(token)] - log_sum_exp(scaled.data(), n);
}

DecodeResult decode(const PolicyModel& model, std::span<const int> prompt,
                    const SamplingParams& params, std::uint64_t seed) {
    const auto& cfg = model.config();
    check_tokens(cfg, prompt);
    if (static_cast<int>(prompt.size()) >= cfg.context_len)
        throw ConfigError("prompt of length " + std::to_string(prompt.size()) +
                          " leaves no room to generate within context_len " +
                          std::to_string(cfg.context_len));

    Rng rng(seed);
    std::vector<int> tokens(prompt.begin(), prompt.end());
    DecodeResult result;
    for (int step = 0; step < params.max_new; ++step) {
        const ForwardResult fr = forward(model, tokens);
        const int V = cfg.vocab_size;
        const std::size_t last = tokens.size() - 1;
        std::span<const double> last_logits(&fr.logits[last * static_cast<std::size_t>(V)],
                                            static_cast<std::size_t>(V));
        double lp = 0.0;
        const int tok = sample_from_logits(last_logits, params.temperature, params.top_p, rng, &lp);
        tokens.push_back(tok);
        result.tokens.push_back(tok);
        result.logprobs.push_back(lp);
        if (tok == params.stop_token) break;
        if (static_cast<int>(tokens.size()) >= cfg.context_len) break;
    }
    return result;
}

std::uint64_t forward_call_count() { return g_forward_calls.load(std::memory_order_relaxed); }
std::uint64_t backward_call_count() { return g_backward_calls.load(std::memory_order_relaxed); }

}  // namespace linex
