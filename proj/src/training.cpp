#include "stmask/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "stmask/diffusion.hpp"
#include "stmask/rng.hpp"

namespace stmask::train {

using ad::Tape;
using ad::Var;

namespace {

Var ones_column(Tape& t, int n) {
    return t.constant(n, 1, std::vector<double>(static_cast<std::size_t>(n), 1.0));
}

// flat indices replicating a B x 1 column across B columns
std::shared_ptr<const std::vector<int>> column_broadcast_index(int b) {
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(b) * b);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) (*idx)[static_cast<std::size_t>(i) * b + j] = i;
    return idx;
}

std::shared_ptr<const std::vector<int>> diagonal_index(int b) {
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) (*idx)[static_cast<std::size_t>(i)] = i * b + i;
    return idx;
}

// B x N broadcast to B x (C*N): flat (b*C + c)*N + i reads b*N + i
std::shared_ptr<const std::vector<int>> tile_channels_index(const model::ModelConfig& cfg, int b) {
    const int N = cfg.coords();
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(b) * cfg.C * N);
    std::size_t k = 0;
    for (int u = 0; u < b; ++u)
        for (int c = 0; c < cfg.C; ++c)
            for (int i = 0; i < N; ++i) (*idx)[k++] = u * N + i;
    return idx;
}

void validate_plan(const BatchPlan& plan, const model::ModelConfig& cfg,
                   const std::vector<TrainExample>& data) {
    const std::size_t B = plan.users.size();
    if (B < 2) throw std::invalid_argument("batch needs at least two users");
    for (int u : plan.users) {
        if (u < 0 || static_cast<std::size_t>(u) >= data.size())
            throw std::invalid_argument("batch user index out of range");
        const core::BehaviorTensor* x = data[static_cast<std::size_t>(u)].x0;
        if (!x || x->C != cfg.C || x->T != cfg.T || x->H != cfg.H || x->W != cfg.W)
            throw std::invalid_argument("training tensor shape mismatch");
    }
    if (plan.tsteps.size() != B) throw std::invalid_argument("timestep count mismatch");
    for (int ts : plan.tsteps)
        if (ts < 1 || ts > cfg.horizon) throw std::invalid_argument("timestep outside schedule");
    if (plan.noise.size() != B * static_cast<std::size_t>(cfg.flat_len()))
        throw std::invalid_argument("forward noise shape mismatch");
    if (plan.gumbel_keys.size() != B) throw std::invalid_argument("gumbel key count mismatch");
    if (plan.frozen && (plan.selected.size() != B || plan.budgets.size() != B))
        throw std::invalid_argument("frozen plan lacks recorded selections");
}

std::string offending_array(const params::ParameterStore& store,
                            const std::vector<std::vector<double>>& grads) {
    for (int i = 0; i < store.count(); ++i)
        for (double g : grads[static_cast<std::size_t>(i)])
            if (!std::isfinite(g)) return store.entry(i).name;
    return "(unattributed)";
}

} // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw std::invalid_argument("learning_rate must be finite and nonnegative");
    if (!(lambda_con >= 0.0) || !std::isfinite(lambda_con))
        throw std::invalid_argument("lambda_con must be finite and nonnegative");
    if (precision != 32 && precision != 64)
        throw std::invalid_argument("precision must be 32 or 64");
}

BatchPlan make_batch_plan(std::uint64_t seed, int epoch, int batch_index, std::vector<int> users,
                          const model::ModelConfig& cfg) {
    BatchPlan plan;
    plan.users = std::move(users);
    const std::size_t B = plan.users.size();
    const auto ep = static_cast<std::uint64_t>(epoch);
    const auto bi = static_cast<std::uint64_t>(batch_index);

    rng::Stream task_s(rng::derive(seed, rng::Tag::task_pick, ep, bi));
    plan.task = static_cast<core::Task>(task_s.below(core::kNumTasks));

    rng::Stream step_s(rng::derive(seed, rng::Tag::timestep_pick, ep, bi));
    plan.tsteps.resize(B);
    for (std::size_t i = 0; i < B; ++i)
        plan.tsteps[i] = 1 + static_cast<int>(step_s.below(static_cast<std::uint64_t>(cfg.horizon)));

    rng::Stream noise_s(rng::derive(seed, rng::Tag::diff_forward, ep, bi));
    plan.noise.resize(B * static_cast<std::size_t>(cfg.flat_len()));
    for (double& v : plan.noise) v = noise_s.normal();

    plan.gumbel_keys.resize(B);
    for (std::size_t i = 0; i < B; ++i)
        plan.gumbel_keys[i] =
            rng::derive(seed, rng::Tag::mask_gumbel, ep, static_cast<std::uint64_t>(plan.users[i]),
                        static_cast<std::uint64_t>(plan.task));
    return plan;
}

Var mse_all(Tape& t, Var pred, Var target) {
    if (t.rows(pred) != t.rows(target) || t.cols(pred) != t.cols(target))
        throw std::invalid_argument("mse shape mismatch");
    Var d = t.sub(pred, target);
    return t.mean(t.mul(d, d));
}

Var infonce_loss(Tape& t, Var f_short, Var f_long, Var temperature) {
    const int B = t.rows(f_short);
    if (B < 2 || t.rows(f_long) != B || t.cols(f_long) != t.cols(f_short))
        throw std::invalid_argument("infonce needs matched batches of at least 2");
    if (t.rows(temperature) != 1 || t.cols(temperature) != 1 || !(t.scalar(temperature) > 0.0))
        throw std::invalid_argument("infonce temperature must be a positive scalar");

    Var logits = t.div_by_scalar(
        t.matmul(t.l2_normalize_rows(f_short), t.l2_normalize_rows(f_long), false, true),
        temperature);

    auto cross_entropy_rows = [&](Var lg) {
        // constant row-max shift: exact for both value and gradient
        std::vector<double> mx(static_cast<std::size_t>(B));
        const auto& v = t.val(lg);
        for (int i = 0; i < B; ++i) {
            double m = v[static_cast<std::size_t>(i) * B];
            for (int j = 1; j < B; ++j) m = std::max(m, v[static_cast<std::size_t>(i) * B + j]);
            mx[static_cast<std::size_t>(i)] = m;
        }
        Var m_col = t.constant(B, 1, mx);
        Var shifted = t.sub(lg, t.gather(m_col, column_broadcast_index(B), B, B));
        Var lse = t.add(t.log_(t.matmul(t.exp_(shifted), ones_column(t, B))), m_col);
        Var diag = t.gather(lg, diagonal_index(B), B, 1);
        return t.mean(t.sub(lse, diag));
    };

    return t.scale(t.add(cross_entropy_rows(logits), cross_entropy_rows(t.transpose(logits))), 0.5);
}

BatchGraph forward_batch(Tape& t, const model::ModelVars& mv, const model::ModelConfig& cfg,
                         const std::vector<TrainExample>& data, BatchPlan& plan,
                         double lambda_con) {
    validate_plan(plan, cfg, data);
    if (lambda_con < 0.0) throw std::invalid_argument("lambda_con must be nonnegative");
    const int B = static_cast<int>(plan.users.size());
    const int N = cfg.coords(), flat = cfg.flat_len();

    std::vector<double> x0v(static_cast<std::size_t>(B) * flat);
    for (int b = 0; b < B; ++b) {
        const auto& src = data[static_cast<std::size_t>(plan.users[static_cast<std::size_t>(b)])].x0->data;
        std::copy(src.begin(), src.end(), x0v.begin() + static_cast<std::size_t>(b) * flat);
    }
    Var x0 = t.constant(B, flat, x0v);

    Var h = model::encode_behavior(t, mv, cfg, x0);
    model::Disentangled f = model::disentangle(t, mv, cfg, h);
    Var f_task = model::task_project(t, mv, cfg, f, plan.task);
    model::Sensitivity sens = model::sensitivity(t, mv, cfg, f_task, plan.task);
    Var z = model::refine_pattern(t, mv, cfg, f.f_pat, plan.task);

    Var assign = model::assign_groups(t, mv, cfg, z);
    Var sim = model::batch_similarity(t, mv, assign, z);
    Var ctx = model::reliability_context(t, sim, z, assign);

    BatchGraph g;
    g.gamma = model::scaling_factor(t, mv, ctx);
    g.rho = model::final_ratio(t, mv, g.gamma, plan.task);
    Var psi = model::spatial_affinity(t, mv, z, sens.lambda);
    model::RelevanceParts parts = model::relevance(t, mv, cfg, psi, plan.task);
    g.scores = plan.task == core::Task::cold_start
                   ? model::cold_adjust(t, cfg, parts.scores, cfg.cold_epsilon)
                   : parts.scores;

    // copies: later pushes may reallocate tape storage
    const std::vector<double> sv = t.val(g.scores);
    const std::vector<double> rv = t.val(g.rho);
    if (!plan.frozen) {
        plan.selected.assign(static_cast<std::size_t>(B), {});
        plan.budgets.assign(static_cast<std::size_t>(B), 0);
        for (int b = 0; b < B; ++b) {
            const int budget = model::budget_from_ratio(rv[static_cast<std::size_t>(b)], N);
            std::vector<double> row(sv.begin() + static_cast<std::size_t>(b) * N,
                                    sv.begin() + static_cast<std::size_t>(b + 1) * N);
            core::EvidenceMask mask =
                model::sample_mask(row, cfg.T, cfg.H, cfg.W, budget, plan.task,
                                   plan.gumbel_keys[static_cast<std::size_t>(b)]);
            auto& sel = plan.selected[static_cast<std::size_t>(b)];
            for (int i = 0; i < N; ++i)
                if (mask.binary[static_cast<std::size_t>(i)]) sel.push_back(i);
            plan.budgets[static_cast<std::size_t>(b)] = budget;
        }
    }

    // straight-through: the indicator is a constant, scores keep the grad path
    std::vector<double> binv(static_cast<std::size_t>(B) * N, 0.0);
    for (int b = 0; b < B; ++b) {
        const auto& sel = plan.selected[static_cast<std::size_t>(b)];
        if (static_cast<int>(sel.size()) != plan.budgets[static_cast<std::size_t>(b)])
            throw std::invalid_argument("plan selection size disagrees with budget");
        for (int i : sel) {
            if (i < 0 || i >= N) throw std::invalid_argument("selected coordinate out of range");
            binv[static_cast<std::size_t>(b) * N + i] = 1.0;
        }
    }
    Var binary = t.constant(B, N, binv);
    Var weighted = t.mul(binary, g.scores);

    diff::Schedule sched = diff::make_schedule(cfg.horizon, cfg.beta_start, cfg.beta_end);
    std::vector<double> xtv(static_cast<std::size_t>(B) * flat);
    for (int b = 0; b < B; ++b) {
        const double abar =
            sched.alpha_bar[static_cast<std::size_t>(plan.tsteps[static_cast<std::size_t>(b)] - 1)];
        const double cs = std::sqrt(abar), cn = std::sqrt(1.0 - abar);
        for (int k = 0; k < flat; ++k) {
            const auto j = static_cast<std::size_t>(b) * flat + k;
            xtv[j] = cs * x0v[j] + cn * plan.noise[j];
        }
    }
    Var x_in = t.mul(t.gather(weighted, tile_channels_index(cfg, B), B, flat),
                     t.constant(B, flat, xtv));

    // evidence tokens carry the clean masked channels plus the indicator plane
    std::vector<double> evv(static_cast<std::size_t>(B) * (cfg.C + 1) * N, 0.0);
    for (int b = 0; b < B; ++b) {
        double* dst = evv.data() + static_cast<std::size_t>(b) * (cfg.C + 1) * N;
        const double* src = x0v.data() + static_cast<std::size_t>(b) * flat;
        const double* ind = binv.data() + static_cast<std::size_t>(b) * N;
        for (int c = 0; c < cfg.C; ++c)
            for (int i = 0; i < N; ++i)
                dst[static_cast<std::size_t>(c) * N + i] = ind[i] * src[static_cast<std::size_t>(c) * N + i];
        for (int i = 0; i < N; ++i) dst[static_cast<std::size_t>(cfg.C) * N + i] = ind[i];
    }
    Var ev = t.constant(B, (cfg.C + 1) * N, std::move(evv));

    Var h_u = model::kNoVar;
    bool all_embeds = true;
    for (int u : plan.users) all_embeds = all_embeds && !data[static_cast<std::size_t>(u)].user_embed.empty();
    if (all_embeds) {
        std::vector<double> hu(static_cast<std::size_t>(B) * cfg.d);
        for (int b = 0; b < B; ++b) {
            const auto& e = data[static_cast<std::size_t>(plan.users[static_cast<std::size_t>(b)])].user_embed;
            if (static_cast<int>(e.size()) != cfg.d)
                throw std::invalid_argument("user embedding width mismatch");
            std::copy(e.begin(), e.end(), hu.begin() + static_cast<std::size_t>(b) * cfg.d);
        }
        h_u = t.constant(B, cfg.d, std::move(hu));
    }

    model::DenoiserInputs din;
    din.x_in = x_in;
    din.ev_planes = ev;
    din.user_vec = model::conditioning_user_vec(t, mv, h, h_u, f_task);
    din.task_vec = model::conditioning_task_vec(t, mv, plan.task);
    din.tsteps = plan.tsteps;
    Var out = model::denoise(t, mv, cfg, din);

    g.loss_rec = mse_all(t, out, x0);
    g.loss_nce = infonce_loss(t, f.f_short, f.f_long, t.softplus(mv["nce_temp_raw"]));
    g.loss_total = t.add(g.loss_rec, t.scale(g.loss_nce, lambda_con));

    double rs = 0.0, gs = 0.0;
    const auto& gv = t.val(g.gamma);
    for (int b = 0; b < B; ++b) {
        rs += rv[static_cast<std::size_t>(b)];
        gs += gv[static_cast<std::size_t>(b)];
    }
    g.mean_rho = rs / B;
    g.mean_gamma = gs / B;
    return g;
}

std::vector<EpochMetrics> train(params::ParameterStore& store, const model::ModelConfig& cfg,
                                const std::vector<TrainExample>& data, const TrainConfig& config) {
    config.validate();
    cfg.validate();
    if (data.size() < 2) throw std::invalid_argument("training needs at least two users");

    params::AdamOptimizer opt(config.learning_rate);
    std::vector<EpochMetrics> metrics;
    metrics.reserve(static_cast<std::size_t>(config.epochs));

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<int> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng::Stream shuffle(rng::derive(config.seed, rng::Tag::batch_shuffle,
                                        static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.below(i))]);

        EpochMetrics em;
        em.epoch = epoch;
        int batches = 0, users_seen = 0;
        double rho_sum = 0.0, gamma_sum = 0.0;
        // a trailing chunk keeps peers for InfoNCE or is dropped
        for (std::size_t start = 0; start + 1 < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t take =
                std::min<std::size_t>(static_cast<std::size_t>(config.batch_size),
                                      order.size() - start);
            if (take < 2) break;
            std::vector<int> users(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(start + take));
            BatchPlan plan = make_batch_plan(config.seed, epoch, batches, std::move(users), cfg);

            ad::Tape t(true);
            model::ModelVars mv(t, store);
            BatchGraph bg = forward_batch(t, mv, cfg, data, plan, config.lambda_con);
            const double loss_v = t.scalar(bg.loss_total);
            t.backward(bg.loss_total);
            std::vector<std::vector<double>> grads = mv.collect_grads();
            if (!std::isfinite(loss_v))
                throw std::runtime_error("training diverged: non-finite loss, first bad array: " +
                                         offending_array(store, grads));

            opt.step(store, grads);
            if (config.precision == 32) store.quantize_float32();
            store.require_finite();

            em.loss_total += loss_v;
            em.loss_rec += t.scalar(bg.loss_rec);
            em.loss_infonce += t.scalar(bg.loss_nce);
            rho_sum += bg.mean_rho * static_cast<double>(take);
            gamma_sum += bg.mean_gamma * static_cast<double>(take);
            users_seen += static_cast<int>(take);
            ++batches;
        }
        em.loss_total /= batches;
        em.loss_rec /= batches;
        em.loss_infonce /= batches;
        em.mean_rho = rho_sum / users_seen;
        em.mean_gamma = gamma_sum / users_seen;
        metrics.push_back(em);
    }
    return metrics;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& metrics) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open metrics file: " + path);
    out << "epoch,loss_total,loss_rec,loss_infonce,mean_rho,mean_gamma\n";
    char line[256];
    for (const EpochMetrics& m : metrics) {
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.epoch,
                      m.loss_total, m.loss_rec, m.loss_infonce, m.mean_rho, m.mean_gamma);
        out << line;
    }
    if (!out) throw std::runtime_error("failed writing metrics file: " + path);
}

LossFn composite_loss(const model::ModelConfig& cfg, const std::vector<TrainExample>& data,
                      std::vector<BatchPlan> plans, double lambda_con) {
    if (plans.empty()) throw std::invalid_argument("composite loss needs at least one plan");
    auto state = std::make_shared<std::vector<BatchPlan>>(std::move(plans));
    auto examples = std::make_shared<std::vector<TrainExample>>(data);
    return [state, examples, cfg, lambda_con](Tape& t, const model::ModelVars& mv) -> Var {
        Var total = model::kNoVar;
        for (BatchPlan& plan : *state) {
            BatchGraph g = forward_batch(t, mv, cfg, *examples, plan, lambda_con);
            plan.frozen = true;  // selections pin on first evaluation
            total = total == model::kNoVar ? g.loss_total : t.add(total, g.loss_total);
        }
        return total;
    };
}

GradCheckReport grad_check(const params::ParameterStore& store, const LossFn& loss,
                           double tolerance, int max_entries) {
    if (max_entries < 1) throw std::invalid_argument("max_entries must be positive");
    if (!(tolerance > 0.0)) throw std::invalid_argument("tolerance must be positive");

    GradCheckReport report;
    std::vector<std::vector<double>> analytic;
    {
        ad::Tape t(true);
        model::ModelVars mv(t, store);
        Var l = loss(t, mv);
        if (t.rows(l) != 1 || t.cols(l) != 1) throw std::invalid_argument("loss must be scalar");
        t.backward(l);
        analytic = mv.collect_grads();
    }

    params::ParameterStore work = store;
    auto eval = [&work, &loss]() {
        ad::Tape t(false);
        model::ModelVars mv(t, work);
        return t.scalar(loss(t, mv));
    };

    for (int ai = 0; ai < store.count(); ++ai) {
        params::ParameterStore::Entry& entry = work.entry(ai);
        const int n = static_cast<int>(entry.data.size());
        const int stride = std::max(1, (n + max_entries - 1) / max_entries);
        for (int k = 0; k < n; k += stride) {
            const double theta = entry.data[static_cast<std::size_t>(k)];
            const double h = 1.5e-3 * std::max(1.0, std::abs(theta));
            auto at = [&](double x) {
                entry.data[static_cast<std::size_t>(k)] = x;
                const double v = eval();
                entry.data[static_cast<std::size_t>(k)] = theta;
                return v;
            };
            const double numeric =
                (8.0 * (at(theta + h) - at(theta - h)) - (at(theta + 2.0 * h) - at(theta - 2.0 * h))) /
                (12.0 * h);
            const double a = analytic[static_cast<std::size_t>(ai)][static_cast<std::size_t>(k)];
            // denominator floor 1e-4: below that magnitude the stencil noise
            // (evaluation rounding / h) drowns the signal
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_array = entry.name;
                report.worst_index = k;
            }
            if (rel > tolerance)
                report.failures.push_back({entry.name, k, a, numeric, rel});
        }
    }
    report.ok = report.failures.empty();
    return report;
}

} // namespace stmask::train
