#include "stmask/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "stmask/rng.hpp"

namespace stmask::model {

namespace {

using ad::Tape;
using ad::Var;

std::uint64_t name_key(const std::string& name) {
    // FNV-1a; keyed initialization must not depend on registration order
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    return h;
}

int task_index(core::Task task) { return static_cast<int>(task); }

std::string task_suffix(core::Task task) { return core::task_name(task); }

Var ones_column(Tape& t, int rows, double fill = 1.0) {
    return t.constant(rows, 1, std::vector<double>(static_cast<std::size_t>(rows), fill));
}

/// Broadcast a 1x1 scalar var across a column of `rows` entries.
Var scalar_column(Tape& t, Var s, int rows) {
    return t.mul_scalar(ones_column(t, rows), s);
}

Var row_of(Tape& t, Var m, int row, int width) {
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(width));
    for (int j = 0; j < width; ++j) idx->push_back(row * width + j);
    return t.gather(m, idx, 1, width);
}

Var tile_to_batch(Tape& t, Var row, int batch) {
    const int w = t.cols(row);
    return t.gather(row, tile_rows_index(1, w, batch), batch, w);
}

} // namespace

void ModelConfig::validate() const {
    if (C < 1 || T < 1 || H < 1 || W < 1) throw std::invalid_argument("tensor dims must be positive");
    if (d < 1 || d_tau < 1 || enc_hidden < 1 || expand_tokens < 1)
        throw std::invalid_argument("latent widths must be positive");
    if (d != d_tau) throw std::invalid_argument("spatial affinity requires d == d_tau");
    if (groups < 2) throw std::invalid_argument("need at least two behavior groups");
    if (group_temp <= 0.0) throw std::invalid_argument("assignment temperature must be positive");
    if (refine_steps < 0 || refine_eta <= 0.0) throw std::invalid_argument("bad refinement settings");
    if (fisher_eps <= 0.0 || p_floor <= 0.0) throw std::invalid_argument("stabilizers must be positive");
    if (cold_epsilon < 0.0 || cold_epsilon > 1.0) throw std::invalid_argument("cold epsilon outside [0,1]");
    if (blocks < 1 || model_dim < 1 || heads < 1 || model_dim % heads != 0)
        throw std::invalid_argument("bad denoiser shape");
    if (pt < 1 || ph < 1 || pw < 1 || T % pt != 0 || H % ph != 0 || W % pw != 0)
        throw std::invalid_argument("patch dims must divide tensor dims");
    if (ffn_mult < 1) throw std::invalid_argument("ffn width multiplier must be positive");
    if (horizon < 1) throw std::invalid_argument("diffusion horizon must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("beta range must satisfy 0 < start <= end < 1");
    if (d % 4 != 0) throw std::invalid_argument("location codes need d divisible by 4");
    if (model_dim % 2 != 0) throw std::invalid_argument("timestep codes need even model_dim");
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.C = 2;
    cfg.T = 8;
    cfg.H = 4;
    cfg.W = 4;
    cfg.validate();
    return cfg;
}

// ----- initialization -----

namespace {

std::vector<double> normal_init(const std::string& name, std::uint64_t seed, int rows, int cols,
                                double stddev) {
    rng::Stream s(rng::derive(seed, rng::Tag::param_init, name_key(name)));
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    for (double& v : out) v = stddev * s.normal();
    return out;
}

void add_linear(params::ParameterStore& store, std::uint64_t seed, const std::string& w_name,
                int in, int out, const std::string& b_name = "") {
    store.add(w_name, in, out, normal_init(w_name, seed, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    if (!b_name.empty()) store.add_zeros(b_name, 1, out);
}

} // namespace

void init_params(params::ParameterStore& store, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int d = cfg.d, dt = cfg.d_tau, D = cfg.model_dim;
    const int P = cfg.patch_len(), Pe = cfg.ev_patch_len(), L = cfg.tokens();
    const int F = cfg.ffn_mult * D;

    add_linear(store, seed, "enc_w1", cfg.C * cfg.T, cfg.enc_hidden, "enc_b1");
    add_linear(store, seed, "enc_w2", cfg.enc_hidden, cfg.enc_hidden, "enc_b2");
    add_linear(store, seed, "enc_w3", cfg.enc_hidden, d, "enc_b3");

    add_linear(store, seed, "hier_expand_w", d, cfg.expand_tokens * d, "hier_expand_b");
    store.add("hier_query", 3, d, normal_init("hier_query", seed, 3, d, 1.0 / std::sqrt(static_cast<double>(d))));
    add_linear(store, seed, "hier_wk", d, d);
    add_linear(store, seed, "hier_wv", d, d);
    add_linear(store, seed, "hier_wo", d, d, "hier_bo");

    for (int ti = 0; ti < core::kNumTasks; ++ti) {
        const std::string sfx = task_suffix(static_cast<core::Task>(ti));
        add_linear(store, seed, "proj_w_" + sfx, 3 * d, dt, "proj_b_" + sfx);
        add_linear(store, seed, "fisher_w_" + sfx, dt, dt, "fisher_b_" + sfx);
        add_linear(store, seed, "refine_w1_" + sfx, d, d, "refine_b1_" + sfx);
        add_linear(store, seed, "refine_w2_" + sfx, d, d, "refine_b2_" + sfx);
    }

    add_linear(store, seed, "group_w", d, cfg.groups, "group_b");
    store.add("alpha_logit", 1, 1, {0.0});
    add_linear(store, seed, "rel_w", 3, 1);
    store.add_zeros("rel_c", 1, 1);
    // sigmoid(-1.0986) = 0.25: moderate default evidence demand per task
    store.add("base_ratio_logits", 1, core::kNumTasks,
              std::vector<double>(core::kNumTasks, std::log(0.25 / 0.75)));
    // softplus(0.5413) = 1: uniform temporal profile at start
    store.add("temporal_raw", core::kNumTasks, cfg.T,
              std::vector<double>(static_cast<std::size_t>(core::kNumTasks) * cfg.T,
                                  std::log(std::expm1(1.0))));
    store.add("task_embed", core::kNumTasks, d,
              normal_init("task_embed", seed, core::kNumTasks, d, 1.0 / std::sqrt(static_cast<double>(d))));
    store.add("mix_v", core::kNumTasks, d,
              normal_init("mix_v", seed, core::kNumTasks, d, 1.0 / std::sqrt(static_cast<double>(d))));
    store.add_zeros("mix_c", 1, core::kNumTasks);
    store.add("loc_embed", cfg.cells(), d, sinusoidal_location_codes(cfg));

    add_linear(store, seed, "patch_embed_w", P, D, "patch_embed_b");
    add_linear(store, seed, "ev_embed_w", Pe, D, "ev_embed_b");
    store.add("pos_embed", L, D, normal_init("pos_embed", seed, L, D, 0.02));
    add_linear(store, seed, "time_w", D, D, "time_b");
    add_linear(store, seed, "cond_hb_w", d, D);
    add_linear(store, seed, "cond_hu_w", d, D);
    add_linear(store, seed, "cond_ftask_w", dt, D);
    add_linear(store, seed, "cond_task_w", d, D);
    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string p = "blk" + std::to_string(i) + "_";
        store.add_zeros(p + "mod_w", D, 6 * D);  // zero-init: identity modulation at start
        store.add_zeros(p + "mod_b", 1, 6 * D);
        add_linear(store, seed, p + "attn_wq", D, D);
        add_linear(store, seed, p + "attn_wk", D, D);
        add_linear(store, seed, p + "attn_wv", D, D);
        add_linear(store, seed, p + "attn_wo", D, D);
        add_linear(store, seed, p + "cross_wq", D, D);
        add_linear(store, seed, p + "cross_wk", D, D);
        add_linear(store, seed, p + "cross_wv", D, D);
        add_linear(store, seed, p + "cross_wo", D, D);
        add_linear(store, seed, p + "ffn_w1", D, F, p + "ffn_b1");
        add_linear(store, seed, p + "ffn_w2", F, D, p + "ffn_b2");
    }
    store.add_zeros("head_w", D, P);  // zero-init output head
    store.add_zeros("head_b", 1, P);

    // softplus(raw) = 0.1 initial contrastive temperature
    store.add("nce_temp_raw", 1, 1, {std::log(std::expm1(0.1))});
}

// ----- variable binding -----

ModelVars::ModelVars(Tape& tape_in, const params::ParameterStore& store_in)
    : tape(&tape_in), store(&store_in) {
    vars.reserve(static_cast<std::size_t>(store->count()));
    for (int i = 0; i < store->count(); ++i) {
        const auto& e = store->entry(i);
        vars.push_back(tape->leaf(e.rows, e.cols, e.data.data()));
    }
}

Var ModelVars::operator[](const std::string& name) const {
    return vars[static_cast<std::size_t>(store->index_of(name))];
}

std::vector<std::vector<double>> ModelVars::collect_grads() const {
    std::vector<std::vector<double>> out;
    out.reserve(vars.size());
    for (std::size_t i = 0; i < vars.size(); ++i) {
        const auto& e = store->entry(static_cast<int>(i));
        if (tape->grad_enabled()) {
            out.push_back(tape->grad(vars[i]));
        } else {
            out.emplace_back(e.data.size(), 0.0);
        }
    }
    return out;
}

// ----- index maps and fixed codes -----

std::shared_ptr<const std::vector<int>> tile_rows_index(int rows, int cols, int copies) {
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(rows) * cols * copies);
    for (int u = 0; u < copies; ++u)
        for (int k = 0; k < rows * cols; ++k) idx->push_back(k);
    return idx;
}

std::shared_ptr<const std::vector<int>> patchify_index(const ModelConfig& cfg, int batch, int channels) {
    const int gt = cfg.T / cfg.pt, gh = cfg.H / cfg.ph, gw = cfg.W / cfg.pw;
    const int L = gt * gh * gw;
    const int P = channels * cfg.pt * cfg.ph * cfg.pw;
    const int flat = channels * cfg.T * cfg.H * cfg.W;
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(batch) * L * P);
    for (int b = 0; b < batch; ++b)
        for (int l = 0; l < L; ++l) {
            const int it = l / (gh * gw), ih = (l / gw) % gh, iw = l % gw;
            for (int c = 0; c < channels; ++c)
                for (int dt = 0; dt < cfg.pt; ++dt)
                    for (int dh = 0; dh < cfg.ph; ++dh)
                        for (int dw = 0; dw < cfg.pw; ++dw) {
                            const int t = it * cfg.pt + dt, h = ih * cfg.ph + dh, w = iw * cfg.pw + dw;
                            idx->push_back(b * flat + ((c * cfg.T + t) * cfg.H + h) * cfg.W + w);
                        }
        }
    return idx;
}

std::shared_ptr<const std::vector<int>> unpatchify_index(const ModelConfig& cfg, int batch) {
    const int gt = cfg.T / cfg.pt, gh = cfg.H / cfg.ph, gw = cfg.W / cfg.pw;
    const int L = gt * gh * gw;
    const int P = cfg.patch_len();
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(batch) * cfg.flat_len());
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < cfg.C; ++c)
            for (int t = 0; t < cfg.T; ++t)
                for (int h = 0; h < cfg.H; ++h)
                    for (int w = 0; w < cfg.W; ++w) {
                        const int l = (t / cfg.pt) * gh * gw + (h / cfg.ph) * gw + (w / cfg.pw);
                        const int col = ((c * cfg.pt + t % cfg.pt) * cfg.ph + h % cfg.ph) * cfg.pw + w % cfg.pw;
                        idx->push_back((b * L + l) * P + col);
                    }
    return idx;
}

std::shared_ptr<const std::vector<int>> temporal_field_index(const ModelConfig& cfg, int batch) {
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(batch) * cfg.coords());
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t < cfg.T; ++t)
            for (int cell = 0; cell < cfg.cells(); ++cell) idx->push_back(t);
    return idx;
}

std::shared_ptr<const std::vector<int>> spatial_field_index(const ModelConfig& cfg, int batch) {
    auto idx = std::make_shared<std::vector<int>>();
    idx->reserve(static_cast<std::size_t>(batch) * cfg.coords());
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t < cfg.T; ++t)
            for (int cell = 0; cell < cfg.cells(); ++cell) idx->push_back(b * cfg.cells() + cell);
    return idx;
}

std::vector<double> sinusoidal_location_codes(const ModelConfig& cfg) {
    const int d = cfg.d;
    std::vector<double> out(static_cast<std::size_t>(cfg.cells()) * d);
    for (int h = 0; h < cfg.H; ++h)
        for (int w = 0; w < cfg.W; ++w) {
            double* row = out.data() + static_cast<std::size_t>(h * cfg.W + w) * d;
            for (int j = 0; j < d / 4; ++j) {
                const double freq = std::pow(10000.0, -4.0 * j / d);
                row[4 * j + 0] = std::sin(h * freq);
                row[4 * j + 1] = std::cos(h * freq);
                row[4 * j + 2] = std::sin(w * freq);
                row[4 * j + 3] = std::cos(w * freq);
            }
        }
    return out;
}

std::vector<double> timestep_codes(const std::vector<int>& tsteps, int width, int horizon) {
    std::vector<double> out(tsteps.size() * static_cast<std::size_t>(width));
    for (std::size_t b = 0; b < tsteps.size(); ++b) {
        if (tsteps[b] < 1 || tsteps[b] > horizon) throw std::invalid_argument("diffusion step out of range");
        double* row = out.data() + b * static_cast<std::size_t>(width);
        for (int j = 0; j < width / 2; ++j) {
            const double freq = std::pow(10000.0, -2.0 * j / width);
            row[2 * j + 0] = std::sin(tsteps[b] * freq);
            row[2 * j + 1] = std::cos(tsteps[b] * freq);
        }
    }
    return out;
}

// ----- encoder chain -----

Var encode_behavior(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var x_flat) {
    const int B = t.rows(x_flat);
    if (t.cols(x_flat) != cfg.flat_len()) throw std::invalid_argument("encoder input width mismatch");
    Var grid = t.reshape(x_flat, B * cfg.C * cfg.T, cfg.cells());
    Var pooled = t.matmul(grid, ones_column(t, cfg.cells(), 1.0 / cfg.cells()));
    Var summary = t.reshape(pooled, B, cfg.C * cfg.T);
    Var a1 = t.tanh_(t.add_rowvec(t.matmul(summary, mv["enc_w1"]), mv["enc_b1"]));
    Var a2 = t.tanh_(t.add_rowvec(t.matmul(a1, mv["enc_w2"]), mv["enc_b2"]));
    return t.add_rowvec(t.matmul(a2, mv["enc_w3"]), mv["enc_b3"]);
}

Disentangled disentangle(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var h) {
    const int B = t.rows(h), d = cfg.d, Te = cfg.expand_tokens;
    Var expanded = t.add_rowvec(t.matmul(h, mv["hier_expand_w"]), mv["hier_expand_b"]);
    Var toks = t.reshape(expanded, B * Te, d);
    Var k = t.matmul(toks, mv["hier_wk"]);
    Var v = t.matmul(toks, mv["hier_wv"]);
    Var q = t.gather(mv["hier_query"], tile_rows_index(3, d, B), B * 3, d);
    Var att = t.attention(q, k, v, B, 1, 3, Te);
    Var out = t.add_rowvec(t.matmul(att, mv["hier_wo"]), mv["hier_bo"]);
    Disentangled f;
    Var* slots[3] = {&f.f_short, &f.f_long, &f.f_pat};
    for (int s = 0; s < 3; ++s) {
        auto idx = std::make_shared<std::vector<int>>();
        idx->reserve(static_cast<std::size_t>(B) * d);
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < d; ++j) idx->push_back((b * 3 + s) * d + j);
        *slots[s] = t.gather(out, idx, B, d);
    }
    return f;
}

Var task_project(Tape& t, const ModelVars& mv, const ModelConfig& cfg, const Disentangled& f,
                 core::Task task) {
    (void)cfg;
    const std::string sfx = task_suffix(task);
    Var cat = t.concat_cols({f.f_short, f.f_long, f.f_pat});
    return t.add_rowvec(t.matmul(cat, mv["proj_w_" + sfx]), mv["proj_b_" + sfx]);
}

Sensitivity sensitivity(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var f_task,
                        core::Task task) {
    const std::string sfx = task_suffix(task);
    Var g = t.add_rowvec(t.matmul(f_task, mv["fisher_w_" + sfx]), mv["fisher_b_" + sfx]);
    Sensitivity s;
    s.diag_fisher = t.add_scalar(t.mul(g, g), cfg.fisher_eps);
    s.lambda = t.sqrt_(s.diag_fisher);
    return s;
}

Var refine_pattern(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var f_pat, core::Task task) {
    const std::string sfx = task_suffix(task);
    Var z = f_pat;
    for (int k = 0; k < cfg.refine_steps; ++k) {
        Var hidden = t.tanh_(t.add_rowvec(t.matmul(z, mv["refine_w1_" + sfx]), mv["refine_b1_" + sfx]));
        Var delta = t.add_rowvec(t.matmul(hidden, mv["refine_w2_" + sfx]), mv["refine_b2_" + sfx]);
        z = t.add(z, t.scale(delta, cfg.refine_eta));
    }
    return z;
}

// ----- mask policy -----

Var assign_groups(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var z) {
    if (cfg.group_temp <= 0.0) throw std::invalid_argument("assignment temperature must be positive");
    Var logits = t.add_rowvec(t.matmul(z, mv["group_w"]), mv["group_b"]);
    return t.softmax_rows(t.scale(logits, 1.0 / cfg.group_temp));
}

Var batch_similarity(Tape& t, const ModelVars& mv, Var assignment, Var z) {
    Var alpha = t.sigmoid(mv["alpha_logit"]);
    Var one = t.constant_scalar(1.0);
    Var group_part = t.matmul(assignment, assignment, false, true);
    Var feat_part = t.matmul(t.l2_normalize_rows(z), t.l2_normalize_rows(z), false, true);
    return t.add(t.mul_scalar(group_part, alpha), t.mul_scalar(feat_part, t.sub(one, alpha)));
}

Var reliability_context(Tape& t, Var similarity, Var z, Var assignment) {
    const int B = t.rows(z);
    Var neighbor;
    if (B == 1) {
        neighbor = t.constant(1, 1, {0.0});  // no peers in a degenerate batch
    } else {
        const auto& sv = t.val(similarity);
        auto idx = std::make_shared<std::vector<int>>();
        idx->reserve(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            int best = b == 0 ? 1 : 0;
            for (int j = 0; j < B; ++j)
                if (j != b && sv[static_cast<std::size_t>(b) * B + j] > sv[static_cast<std::size_t>(b) * B + best])
                    best = j;
            idx->push_back(b * B + best);
        }
        neighbor = t.gather(similarity, idx, B, 1);
    }
    Var norm = t.sqrt_(t.matmul(t.mul(z, z), ones_column(t, t.cols(z))));
    // x*log(max(x, tiny)) keeps the x -> 0 entropy limit finite
    Var safe_log = t.log_(t.max_const(assignment, 1e-300));
    Var ent = t.scale(t.matmul(t.mul(assignment, safe_log), ones_column(t, t.cols(assignment))), -1.0);
    return t.concat_cols({neighbor, norm, ent});
}

Var scaling_factor(Tape& t, const ModelVars& mv, Var context) {
    Var lin = t.matmul(context, mv["rel_w"]);
    return t.sigmoid(t.add(lin, scalar_column(t, mv["rel_c"], t.rows(context))));
}

Var final_ratio(Tape& t, const ModelVars& mv, Var gamma, core::Task task) {
    auto idx = std::make_shared<std::vector<int>>(std::vector<int>{task_index(task)});
    Var rho = t.sigmoid(t.gather(mv["base_ratio_logits"], idx, 1, 1));
    return t.mul_scalar(gamma, rho);
}

Var spatial_affinity(Tape& t, const ModelVars& mv, Var z, Var lambda) {
    Var weighted = t.mul(z, lambda);
    Var qn = t.l2_normalize_rows(weighted);
    Var en = t.l2_normalize_rows(mv["loc_embed"]);
    return t.relu(t.matmul(qn, en, false, true));
}

Var mixing_coefficient(Tape& t, const ModelVars& mv, core::Task task) {
    const int ti = task_index(task);
    const int d = t.cols(mv["task_embed"]);
    Var e_row = row_of(t, mv["task_embed"], ti, d);
    Var v_row = row_of(t, mv["mix_v"], ti, d);
    Var dot = t.matmul(v_row, e_row, false, true);
    auto idx = std::make_shared<std::vector<int>>(std::vector<int>{ti});
    return t.sigmoid(t.add(dot, t.gather(mv["mix_c"], idx, 1, 1)));
}

RelevanceParts relevance(Tape& t, const ModelVars& mv, const ModelConfig& cfg, Var psi,
                         core::Task task) {
    const int B = t.rows(psi);
    if (t.cols(psi) != cfg.cells()) throw std::invalid_argument("spatial affinity width mismatch");
    RelevanceParts parts;
    parts.beta = mixing_coefficient(t, mv, task);
    parts.temporal = t.softplus(row_of(t, mv["temporal_raw"], task_index(task), cfg.T));
    parts.spatial = psi;
    Var tf = t.gather(parts.temporal, temporal_field_index(cfg, B), B, cfg.coords());
    Var sf = t.gather(psi, spatial_field_index(cfg, B), B, cfg.coords());
    Var one = t.constant_scalar(1.0);
    parts.raw = t.add(t.mul_scalar(tf, parts.beta), t.mul_scalar(sf, t.sub(one, parts.beta)));
    Var clamped = t.max_const(parts.raw, cfg.p_floor);
    Var row_sums = t.matmul(clamped, ones_column(t, cfg.coords()));
    parts.scores = t.mul_rows(clamped, t.reciprocal(row_sums));
    return parts;
}

Var cold_adjust(Tape& t, const ModelConfig& cfg, Var scores, double epsilon) {
    if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("cold epsilon outside [0,1]");
    return t.add_scalar(t.scale(scores, 1.0 - epsilon), epsilon / cfg.coords());
}

int budget_from_ratio(double rho_tilde, int coords) {
    const int k = static_cast<int>(std::floor(rho_tilde * coords));
    return std::clamp(k, 0, coords);
}

core::EvidenceMask sample_mask(const std::vector<double>& scores, int T, int H, int W, int budget,
                               core::Task task, std::uint64_t rng_key, bool deterministic) {
    const int N = T * H * W;
    if (scores.size() != static_cast<std::size_t>(N)) throw std::invalid_argument("score field size mismatch");
    if (budget < 0 || budget > N) throw std::invalid_argument("mask budget outside [0, N]");
    int positive = 0;
    for (double s : scores) {
        if (s < 0.0 || !std::isfinite(s)) throw std::invalid_argument("relevance scores must be finite and nonnegative");
        positive += s > 0.0 ? 1 : 0;
    }
    if (budget > positive) throw std::invalid_argument("mask budget exceeds positive-score support");

    rng::Stream noise(rng_key);
    std::vector<double> keys(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const double g = deterministic ? 0.0 : noise.gumbel();
        keys[static_cast<std::size_t>(i)] =
            scores[static_cast<std::size_t>(i)] > 0.0
                ? std::log(scores[static_cast<std::size_t>(i)]) + g
                : -std::numeric_limits<double>::infinity();
    }
    std::vector<int> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + budget, order.end(), [&](int a, int b) {
        if (keys[static_cast<std::size_t>(a)] != keys[static_cast<std::size_t>(b)])
            return keys[static_cast<std::size_t>(a)] > keys[static_cast<std::size_t>(b)];
        return a < b;  // deterministic tie-break by lowest linear index
    });

    core::EvidenceMask mask(T, H, W);
    mask.task = task;
    mask.budget = budget;
    for (int r = 0; r < budget; ++r) {
        const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(r)]);
        mask.binary[i] = 1;
        mask.weights[i] = scores[i];
    }
    mask.validate();
    return mask;
}

// ----- denoiser -----

Var conditioning_user_vec(Tape& t, const ModelVars& mv, Var h_b, Var h_u, Var f_task) {
    Var uv = t.matmul(h_b, mv["cond_hb_w"]);
    if (h_u != kNoVar) uv = t.add(uv, t.matmul(h_u, mv["cond_hu_w"]));
    return t.add(uv, t.matmul(f_task, mv["cond_ftask_w"]));
}

Var conditioning_task_vec(Tape& t, const ModelVars& mv, core::Task task) {
    const int d = t.cols(mv["task_embed"]);
    Var e_row = row_of(t, mv["task_embed"], task_index(task), d);
    return t.matmul(e_row, mv["cond_task_w"]);
}

Var denoise(Tape& t, const ModelVars& mv, const ModelConfig& cfg, const DenoiserInputs& in) {
    const int B = t.rows(in.x_in);
    const int L = cfg.tokens(), D = cfg.model_dim;
    if (t.cols(in.x_in) != cfg.flat_len()) throw std::invalid_argument("denoiser input width mismatch");
    if (t.cols(in.ev_planes) != (cfg.C + 1) * cfg.coords())
        throw std::invalid_argument("evidence plane width mismatch");
    if (static_cast<int>(in.tsteps.size()) != B) throw std::invalid_argument("timestep count mismatch");

    Var task_rows = t.rows(in.task_vec) == B ? in.task_vec : tile_to_batch(t, in.task_vec, B);
    Var cond = t.add(in.user_vec, task_rows);  // c = user_vec + task_vec, exact

    auto patch_idx = patchify_index(cfg, B, cfg.C);
    auto ev_idx = patchify_index(cfg, B, cfg.C + 1);
    auto pos_idx = tile_rows_index(L, D, B);
    auto out_idx = unpatchify_index(cfg, B);
    if (!in.token_perm.empty()) {
        if (static_cast<int>(in.token_perm.size()) != L) throw std::invalid_argument("token permutation length mismatch");
        std::vector<int> inv(static_cast<std::size_t>(L), -1);
        for (int r = 0; r < L; ++r) {
            const int v = in.token_perm[static_cast<std::size_t>(r)];
            if (v < 0 || v >= L || inv[static_cast<std::size_t>(v)] != -1)
                throw std::invalid_argument("token_perm is not a permutation");
            inv[static_cast<std::size_t>(v)] = r;
        }
        auto permute_rows = [&](const std::vector<int>& base, int row_len) {
            auto dst = std::make_shared<std::vector<int>>(base.size());
            for (int b = 0; b < B; ++b)
                for (int r = 0; r < L; ++r) {
                    const int src_row = in.token_perm[static_cast<std::size_t>(r)];
                    for (int j = 0; j < row_len; ++j)
                        (*dst)[static_cast<std::size_t>((b * L + r) * row_len + j)] =
                            base[static_cast<std::size_t>((b * L + src_row) * row_len + j)];
                }
            return dst;
        };
        patch_idx = permute_rows(*patch_idx, cfg.patch_len());
        ev_idx = permute_rows(*ev_idx, cfg.ev_patch_len());
        pos_idx = permute_rows(*pos_idx, D);
        // output coordinates must read the row where their token now lives
        auto fixed = std::make_shared<std::vector<int>>(out_idx->size());
        const int P = cfg.patch_len();
        for (std::size_t k = 0; k < out_idx->size(); ++k) {
            const int flat_tok = (*out_idx)[k];
            const int row = flat_tok / P, col = flat_tok % P;
            const int b = row / L, l = row % L;
            (*fixed)[k] = ((b * L + inv[static_cast<std::size_t>(l)]) * P) + col;
        }
        out_idx = fixed;
    }

    Var pe = t.gather(mv["pos_embed"], pos_idx, B * L, D);

    Var xp = t.gather(in.x_in, patch_idx, B * L, cfg.patch_len());
    Var x = t.add(t.add_rowvec(t.matmul(xp, mv["patch_embed_w"]), mv["patch_embed_b"]), pe);
    Var tc = t.constant(B, D, timestep_codes(in.tsteps, D, cfg.horizon));
    Var temb = t.add_rowvec(t.matmul(tc, mv["time_w"]), mv["time_b"]);
    x = t.add_block_rowvec(x, temb, L);

    Var ep = t.gather(in.ev_planes, ev_idx, B * L, cfg.ev_patch_len());
    Var ev = t.add(t.add_rowvec(t.matmul(ep, mv["ev_embed_w"]), mv["ev_embed_b"]), pe);

    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string p = "blk" + std::to_string(i) + "_";
        Var mod = t.add_rowvec(t.matmul(cond, mv[p + "mod_w"]), mv[p + "mod_b"]);
        Var xn = t.affine_blocks(t.layernorm_rows(x, cfg.ln_eps), t.slice_cols(mod, 0, D),
                                 t.slice_cols(mod, D, 2 * D), L);
        Var att = t.attention(t.matmul(xn, mv[p + "attn_wq"]), t.matmul(xn, mv[p + "attn_wk"]),
                              t.matmul(xn, mv[p + "attn_wv"]), B, cfg.heads, L, L);
        x = t.add(x, t.matmul(att, mv[p + "attn_wo"]));

        Var xc = t.affine_blocks(t.layernorm_rows(x, cfg.ln_eps), t.slice_cols(mod, 2 * D, 3 * D),
                                 t.slice_cols(mod, 3 * D, 4 * D), L);
        Var crs = t.attention(t.matmul(xc, mv[p + "cross_wq"]), t.matmul(ev, mv[p + "cross_wk"]),
                              t.matmul(ev, mv[p + "cross_wv"]), B, cfg.heads, L, L);
        x = t.add(x, t.matmul(crs, mv[p + "cross_wo"]));

        Var xf = t.affine_blocks(t.layernorm_rows(x, cfg.ln_eps), t.slice_cols(mod, 4 * D, 5 * D),
                                 t.slice_cols(mod, 5 * D, 6 * D), L);
        Var hidden = t.tanh_(t.add_rowvec(t.matmul(xf, mv[p + "ffn_w1"]), mv[p + "ffn_b1"]));
        x = t.add(x, t.add_rowvec(t.matmul(hidden, mv[p + "ffn_w2"]), mv[p + "ffn_b2"]));
    }

    Var out_tokens = t.add_rowvec(t.matmul(t.layernorm_rows(x, cfg.ln_eps), mv["head_w"]), mv["head_b"]);
    return t.gather(out_tokens, out_idx, B, cfg.flat_len());
}

} // namespace stmask::model
