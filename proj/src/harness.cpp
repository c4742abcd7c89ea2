#include "stmask/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "stmask/config.hpp"
#include "stmask/diffusion.hpp"
#include "stmask/rng.hpp"
#include "stmask/training.hpp"

namespace stmask::harness {

namespace {

using ad::Tape;
using ad::Var;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// One mask-policy forward over a stacked batch of behavior tensors.
struct PolicyOut {
    std::vector<double> scores;    // B x N, cold-mixed when the task is cold
    std::vector<double> rho;       // B
    std::vector<double> user_vec;  // B x model_dim
    std::vector<double> task_vec;  // 1 x model_dim
};

PolicyOut policy_forward(const params::ParameterStore& store, const model::ModelConfig& cfg,
                         const std::vector<double>& x_rows, int batch,
                         const std::vector<double>& profile_rows, core::Task task) {
    Tape t(false);
    model::ModelVars mv(t, store);
    Var x0 = t.constant(batch, cfg.flat_len(), x_rows);
    Var h = model::encode_behavior(t, mv, cfg, x0);
    model::Disentangled f = model::disentangle(t, mv, cfg, h);
    Var f_task = model::task_project(t, mv, cfg, f, task);
    model::Sensitivity sens = model::sensitivity(t, mv, cfg, f_task, task);
    Var z = model::refine_pattern(t, mv, cfg, f.f_pat, task);
    Var assign = model::assign_groups(t, mv, cfg, z);
    Var sim = model::batch_similarity(t, mv, assign, z);
    Var ctx = model::reliability_context(t, sim, z, assign);
    Var gamma = model::scaling_factor(t, mv, ctx);
    Var rho = model::final_ratio(t, mv, gamma, task);
    Var psi = model::spatial_affinity(t, mv, z, sens.lambda);
    model::RelevanceParts parts = model::relevance(t, mv, cfg, psi, task);
    Var scores = task == core::Task::cold_start
                     ? model::cold_adjust(t, cfg, parts.scores, cfg.cold_epsilon)
                     : parts.scores;
    Var h_u = model::kNoVar;
    if (!profile_rows.empty()) h_u = t.constant(batch, cfg.d, profile_rows);
    Var uv = model::conditioning_user_vec(t, mv, h, h_u, f_task);
    Var tv = model::conditioning_task_vec(t, mv, task);

    PolicyOut out;
    out.scores = t.val(scores);
    out.rho = t.val(rho);
    out.user_vec = t.val(uv);
    out.task_vec = t.val(tv);
    return out;
}

std::vector<std::uint8_t> random_support(const std::vector<std::uint8_t>& holdout, int budget,
                                         std::uint64_t key) {
    std::vector<int> observed;
    for (std::size_t i = 0; i < holdout.size(); ++i)
        if (!holdout[i]) observed.push_back(static_cast<int>(i));
    if (budget > static_cast<int>(observed.size()))
        throw std::invalid_argument("budget exceeds observable coordinates");
    rng::Stream s(key);
    for (int i = 0; i < budget; ++i) {
        const auto j = i + static_cast<int>(s.below(observed.size() - static_cast<std::size_t>(i)));
        std::swap(observed[static_cast<std::size_t>(i)], observed[static_cast<std::size_t>(j)]);
    }
    std::vector<std::uint8_t> bin(holdout.size(), 0);
    for (int i = 0; i < budget; ++i) bin[static_cast<std::size_t>(observed[static_cast<std::size_t>(i)])] = 1;
    return bin;
}

std::vector<std::uint8_t> block_support(const model::ModelConfig& cfg,
                                        const std::vector<std::uint8_t>& holdout, int budget) {
    // most recent observed slots first, cells in row-major order within a slot
    const int cells = cfg.cells();
    std::vector<std::uint8_t> bin(holdout.size(), 0);
    int left = budget;
    for (int ts = cfg.T - 1; ts >= 0 && left > 0; --ts)
        for (int cell = 0; cell < cells && left > 0; ++cell) {
            const auto i = static_cast<std::size_t>(ts) * cells + cell;
            if (holdout[i]) continue;
            bin[i] = 1;
            --left;
        }
    if (left > 0) throw std::invalid_argument("budget exceeds observable coordinates");
    return bin;
}

std::vector<std::uint8_t> policy_support(const EvalRegime& regime, const model::ModelConfig& cfg,
                                         const std::vector<std::uint8_t>& holdout,
                                         const std::vector<double>& scores, int budget, int user,
                                         std::uint64_t seed) {
    const auto ukey = static_cast<std::uint64_t>(user);
    const auto tkey = static_cast<std::uint64_t>(regime.task);
    switch (regime.policy) {
        case EvidencePolicy::adaptive: {
            core::EvidenceMask mask =
                model::sample_mask(scores, cfg.T, cfg.H, cfg.W, budget, regime.task,
                                   rng::derive(seed, rng::Tag::mask_gumbel, ukey, tkey));
            return mask.binary;
        }
        case EvidencePolicy::random_fixed:
            return random_support(holdout, budget,
                                  rng::derive(seed, rng::Tag::baseline_mask, ukey, tkey));
        case EvidencePolicy::block_fixed:
            return block_support(cfg, holdout, budget);
    }
    throw std::invalid_argument("unknown evidence policy");
}

int observed_count(const std::vector<std::uint8_t>& holdout) {
    int n = 0;
    for (std::uint8_t h : holdout)
        if (!h) ++n;
    return n;
}

} // namespace

std::string policy_name(EvidencePolicy p) {
    switch (p) {
        case EvidencePolicy::adaptive: return "adaptive";
        case EvidencePolicy::random_fixed: return "random-fixed";
        case EvidencePolicy::block_fixed: return "block-fixed";
    }
    throw std::invalid_argument("unknown evidence policy");
}

EvidencePolicy policy_from_name(const std::string& name) {
    if (name == "adaptive") return EvidencePolicy::adaptive;
    if (name == "random-fixed") return EvidencePolicy::random_fixed;
    if (name == "block-fixed") return EvidencePolicy::block_fixed;
    throw std::invalid_argument("unknown evidence policy: " + name);
}

void EvalRegime::validate(const model::ModelConfig& cfg) const {
    if (task == core::Task::cold_start) {
        if (holdout != cfg.T) throw std::invalid_argument("cold start holds out the whole horizon");
        return;
    }
    if (holdout < 1 || holdout >= cfg.T)
        throw std::invalid_argument("holdout must cover at least one slot and leave one observed");
}

EvalRegime regime_for(core::Task task, EvidencePolicy policy, const model::ModelConfig& cfg) {
    EvalRegime r;
    r.task = task;
    r.policy = policy;
    switch (task) {
        case core::Task::short_term: r.holdout = 4; break;
        case core::Task::long_term: r.holdout = 16; break;
        case core::Task::cold_start: r.holdout = cfg.T; break;
    }
    r.validate(cfg);
    return r;
}

std::vector<std::uint8_t> holdout_region(const model::ModelConfig& cfg, const EvalRegime& regime) {
    regime.validate(cfg);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(cfg.coords()), 0);
    const int first_hidden = cfg.T - regime.holdout;
    for (int ts = first_hidden; ts < cfg.T; ++ts)
        for (int cell = 0; cell < cfg.cells(); ++cell)
            out[static_cast<std::size_t>(ts) * cfg.cells() + cell] = 1;
    return out;
}

std::pair<double, double> rmse_mae_flat(const std::vector<double>& pred,
                                        const std::vector<double>& truth,
                                        const model::ModelConfig& cfg,
                                        const std::vector<std::uint8_t>& holdout) {
    const auto flat = static_cast<std::size_t>(cfg.flat_len());
    const auto N = static_cast<std::size_t>(cfg.coords());
    if (pred.size() != flat || truth.size() != flat)
        throw std::invalid_argument("tensor size mismatch");
    if (holdout.size() != N) throw std::invalid_argument("holdout size mismatch");
    double sq = 0.0, ab = 0.0;
    std::size_t n = 0;
    for (int c = 0; c < cfg.C; ++c)
        for (std::size_t i = 0; i < N; ++i) {
            if (!holdout[i]) continue;
            const double d = pred[static_cast<std::size_t>(c) * N + i] -
                             truth[static_cast<std::size_t>(c) * N + i];
            sq += d * d;
            ab += std::abs(d);
            ++n;
        }
    if (n == 0) throw std::invalid_argument("empty evaluation region");
    return {std::sqrt(sq / static_cast<double>(n)), ab / static_cast<double>(n)};
}

std::pair<double, double> rmse_mae(const core::BehaviorTensor& pred,
                                   const core::BehaviorTensor& truth,
                                   const std::vector<std::uint8_t>& holdout) {
    if (pred.C != truth.C || pred.T != truth.T || pred.H != truth.H || pred.W != truth.W)
        throw std::invalid_argument("tensor shape mismatch");
    model::ModelConfig cfg;
    cfg.C = pred.C;
    cfg.T = pred.T;
    cfg.H = pred.H;
    cfg.W = pred.W;
    return rmse_mae_flat(pred.data, truth.data, cfg, holdout);
}

std::vector<double> restrict_scores(const std::vector<double>& scores,
                                    const std::vector<std::uint8_t>& holdout) {
    if (scores.size() != holdout.size()) throw std::invalid_argument("score size mismatch");
    std::vector<double> out(scores.size(), 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (!holdout[i]) {
            out[i] = scores[i];
            mass += scores[i];
        }
    if (!(mass > 0.0)) throw std::invalid_argument("no observable relevance mass");
    for (double& v : out) v /= mass;
    return out;
}

RankMetrics rank_metrics(const std::vector<double>& scores, const std::vector<int>& relevant,
                         const std::vector<int>& cutoffs) {
    const int n = static_cast<int>(scores.size());
    std::vector<int> rel = relevant;
    std::sort(rel.begin(), rel.end());
    rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
    if (rel.empty()) throw std::invalid_argument("relevant set is empty");
    for (int r : rel)
        if (r < 0 || r >= n) throw std::invalid_argument("relevant item out of range");
    for (int k : cutoffs)
        if (k < 1) throw std::invalid_argument("cutoffs must be positive");

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    auto is_rel = [&](int item) { return std::binary_search(rel.begin(), rel.end(), item); };

    RankMetrics m;
    m.cutoffs = cutoffs;
    for (int k : cutoffs) {
        const int kk = std::min(k, n);
        int hits = 0;
        double dcg = 0.0, mrr = 0.0;
        for (int i = 0; i < kk; ++i) {
            if (!is_rel(order[static_cast<std::size_t>(i)])) continue;
            ++hits;
            dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
            if (mrr == 0.0) mrr = 1.0 / (static_cast<double>(i) + 1.0);
        }
        double idcg = 0.0;
        const int ideal = std::min<int>(kk, static_cast<int>(rel.size()));
        for (int i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
        m.recall.push_back(static_cast<double>(hits) / static_cast<double>(rel.size()));
        m.ndcg.push_back(idcg > 0.0 ? dcg / idcg : 0.0);
        m.mrr.push_back(mrr);
    }
    return m;
}

std::vector<double> app_engagement(const std::vector<double>& flat, const model::ModelConfig& cfg,
                                   const synth::GenConfig& gen,
                                   const std::vector<std::uint8_t>& holdout) {
    const int N = cfg.coords(), cells = cfg.cells();
    if (flat.size() != static_cast<std::size_t>(cfg.flat_len()))
        throw std::invalid_argument("tensor size mismatch");
    std::vector<double> scores(static_cast<std::size_t>(gen.apps), 0.0);
    for (int app = 0; app < gen.apps; ++app) {
        const int cell = synth::app_proxy_cell(gen, app);
        for (int ts = 0; ts < cfg.T; ++ts) {
            const auto i = static_cast<std::size_t>(ts) * cells + cell;
            if (!holdout[i]) continue;
            scores[static_cast<std::size_t>(app)] +=
                flat[static_cast<std::size_t>(synth::kAppChannel) * N + i];
        }
    }
    return scores;
}

std::vector<double> cell_engagement(const std::vector<double>& flat, const model::ModelConfig& cfg,
                                    const std::vector<std::uint8_t>& holdout) {
    const int N = cfg.coords(), cells = cfg.cells();
    if (flat.size() != static_cast<std::size_t>(cfg.flat_len()))
        throw std::invalid_argument("tensor size mismatch");
    std::vector<double> scores(static_cast<std::size_t>(cells), 0.0);
    for (int cell = 0; cell < cells; ++cell)
        for (int ts = 0; ts < cfg.T; ++ts) {
            const auto i = static_cast<std::size_t>(ts) * cells + cell;
            if (!holdout[i]) continue;
            scores[static_cast<std::size_t>(cell)] +=
                flat[static_cast<std::size_t>(synth::kOccupancyChannel) * N + i];
        }
    return scores;
}

std::vector<int> top_items(const std::vector<double>& scores, int r) {
    if (r < 1) throw std::invalid_argument("top_items needs a positive count");
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(r)));
    return order;
}

EvalSetup make_setup(const model::ModelConfig& cfg, const synth::Dataset& data,
                     const prof::FeaturizerConfig& feat) {
    EvalSetup setup;
    setup.cfg = cfg;
    setup.gen = data.cfg;
    for (const auto& u : data.users) {
        const auto& x = u.tensor;
        if (x.C != cfg.C || x.T != cfg.T || x.H != cfg.H || x.W != cfg.W)
            throw std::invalid_argument("dataset dims disagree with the model");
        setup.tensors.push_back(&u.tensor);
        setup.profiles.push_back(prof::embed(prof::summarize(u.events, feat), feat).vec);
    }
    return setup;
}

EvidenceBatch build_evidence(const params::ParameterStore& store, const EvalSetup& setup,
                             const EvalRegime& regime, const std::vector<int>& users,
                             std::uint64_t seed) {
    const model::ModelConfig& cfg = setup.cfg;
    regime.validate(cfg);
    if (users.empty()) throw std::invalid_argument("no users to evaluate");
    for (int u : users)
        if (u < 0 || static_cast<std::size_t>(u) >= setup.tensors.size())
            throw std::invalid_argument("user index out of range");
    const int B = static_cast<int>(users.size());
    const int N = cfg.coords(), flat = cfg.flat_len();
    const std::vector<std::uint8_t> holdout = holdout_region(cfg, regime);

    EvidenceBatch eb;
    eb.regime = regime;
    eb.users = users;
    eb.evidence.resize(static_cast<std::size_t>(B));

    auto profile_rows = [&](const std::vector<int>& idx) {
        std::vector<double> rows;
        if (setup.profiles.empty()) return rows;
        rows.reserve(idx.size() * static_cast<std::size_t>(cfg.d));
        for (int u : idx) {
            const auto& p = setup.profiles[static_cast<std::size_t>(u)];
            if (static_cast<int>(p.size()) != cfg.d)
                throw std::invalid_argument("profile width disagrees with the model");
            rows.insert(rows.end(), p.begin(), p.end());
        }
        return rows;
    };

    if (regime.task != core::Task::cold_start) {
        // observed-restricted tensors: held-out slots zeroed in every channel
        std::vector<double> x_rows(static_cast<std::size_t>(B) * flat, 0.0);
        for (int b = 0; b < B; ++b) {
            const auto& src = setup.tensors[static_cast<std::size_t>(users[static_cast<std::size_t>(b)])]->data;
            double* dst = x_rows.data() + static_cast<std::size_t>(b) * flat;
            for (int c = 0; c < cfg.C; ++c)
                for (int i = 0; i < N; ++i)
                    if (!holdout[static_cast<std::size_t>(i)])
                        dst[static_cast<std::size_t>(c) * N + i] =
                            src[static_cast<std::size_t>(c) * N + i];
        }
        PolicyOut po = policy_forward(store, cfg, x_rows, B, profile_rows(users), regime.task);
        const int obs = observed_count(holdout);
        for (int b = 0; b < B; ++b) {
            UserEvidence& ue = eb.evidence[static_cast<std::size_t>(b)];
            ue.value_user = users[static_cast<std::size_t>(b)];
            ue.rho_tilde = po.rho[static_cast<std::size_t>(b)];
            std::vector<double> row(po.scores.begin() + static_cast<std::size_t>(b) * N,
                                    po.scores.begin() + static_cast<std::size_t>(b + 1) * N);
            row = restrict_scores(row, holdout);
            ue.budget = std::min(model::budget_from_ratio(ue.rho_tilde, N), obs);
            ue.binary = policy_support(regime, cfg, holdout, row, ue.budget,
                                       users[static_cast<std::size_t>(b)], seed);
            ue.weights.assign(static_cast<std::size_t>(N), 0.0);
            for (int i = 0; i < N; ++i)
                if (ue.binary[static_cast<std::size_t>(i)])
                    ue.weights[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(i)];
        }
        eb.user_vec = po.user_vec;
        eb.task_vec.assign(static_cast<std::size_t>(B) * cfg.model_dim, 0.0);
        for (int b = 0; b < B; ++b)
            std::copy(po.task_vec.begin(), po.task_vec.end(),
                      eb.task_vec.begin() + static_cast<std::size_t>(b) * cfg.model_dim);
        return eb;
    }

    // cold start: evidence comes from the nearest profile peer's full history
    if (setup.profiles.empty())
        throw std::invalid_argument("cold start requires profile embeddings");
    if (setup.tensors.size() < 2)
        throw std::invalid_argument("cold start requires at least one peer");
    const std::vector<std::uint8_t> nothing_held(static_cast<std::size_t>(N), 0);

    std::map<int, std::pair<std::vector<double>, double>> peer_cache;  // peer -> (scores, rho)
    auto peer_policy = [&](int peer) -> const std::pair<std::vector<double>, double>& {
        auto it = peer_cache.find(peer);
        if (it == peer_cache.end()) {
            std::vector<double> x(setup.tensors[static_cast<std::size_t>(peer)]->data);
            PolicyOut po = policy_forward(store, cfg, x, 1, profile_rows({peer}), regime.task);
            it = peer_cache.emplace(peer, std::make_pair(std::move(po.scores), po.rho[0])).first;
        }
        return it->second;
    };

    for (int b = 0; b < B; ++b) {
        const int target = users[static_cast<std::size_t>(b)];
        const auto& mine = setup.profiles[static_cast<std::size_t>(target)];
        int peer = -1;
        double best = -2.0;
        for (std::size_t j = 0; j < setup.profiles.size(); ++j) {
            if (static_cast<int>(j) == target) continue;
            const auto& other = setup.profiles[j];
            double sim = 0.0;
            for (std::size_t k = 0; k < mine.size(); ++k) sim += mine[k] * other[k];
            if (sim > best) {
                best = sim;
                peer = static_cast<int>(j);
            }
        }
        const auto& [scores, rho] = peer_policy(peer);
        UserEvidence& ue = eb.evidence[static_cast<std::size_t>(b)];
        ue.value_user = peer;
        ue.rho_tilde = rho;
        ue.budget = std::min(model::budget_from_ratio(rho, N), N);
        ue.binary = policy_support(regime, cfg, nothing_held, scores, ue.budget, target, seed);
        ue.weights.assign(static_cast<std::size_t>(N), 0.0);
        for (int i = 0; i < N; ++i)
            if (ue.binary[static_cast<std::size_t>(i)])
                ue.weights[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(i)];
    }

    // conditioning: zero history, personalization only through the profile
    std::vector<double> zeros(static_cast<std::size_t>(B) * flat, 0.0);
    PolicyOut po = policy_forward(store, cfg, zeros, B, profile_rows(users), regime.task);
    eb.user_vec = po.user_vec;
    eb.task_vec.assign(static_cast<std::size_t>(B) * cfg.model_dim, 0.0);
    for (int b = 0; b < B; ++b)
        std::copy(po.task_vec.begin(), po.task_vec.end(),
                  eb.task_vec.begin() + static_cast<std::size_t>(b) * cfg.model_dim);
    return eb;
}

std::vector<double> complete(const params::ParameterStore& store, const EvalSetup& setup,
                             const EvidenceBatch& eb, std::uint64_t seed) {
    const model::ModelConfig& cfg = setup.cfg;
    const int B = static_cast<int>(eb.users.size());
    const int N = cfg.coords(), flat = cfg.flat_len();

    diff::ReversePlan plan;
    plan.batch = B;
    plan.x_evidence.assign(static_cast<std::size_t>(B) * flat, 0.0);
    plan.mask.assign(static_cast<std::size_t>(B) * N, 0);
    plan.weights.assign(static_cast<std::size_t>(B) * N, 0.0);
    plan.user_vec = eb.user_vec;
    plan.task_vec = eb.task_vec;
    plan.noise_ids.resize(static_cast<std::size_t>(B));

    for (int b = 0; b < B; ++b) {
        const UserEvidence& ue = eb.evidence[static_cast<std::size_t>(b)];
        const auto& src = setup.tensors[static_cast<std::size_t>(ue.value_user)]->data;
        for (int i = 0; i < N; ++i) {
            if (!ue.binary[static_cast<std::size_t>(i)]) continue;
            plan.mask[static_cast<std::size_t>(b) * N + i] = 1;
            for (int c = 0; c < cfg.C; ++c)
                plan.x_evidence[static_cast<std::size_t>(b) * flat +
                                static_cast<std::size_t>(c) * N + i] =
                    src[static_cast<std::size_t>(c) * N + i];
        }
        std::copy(ue.weights.begin(), ue.weights.end(),
                  plan.weights.begin() + static_cast<std::size_t>(b) * N);
        plan.noise_ids[static_cast<std::size_t>(b)] =
            static_cast<std::uint64_t>(eb.users[static_cast<std::size_t>(b)]);
    }

    diff::Schedule sched = diff::make_schedule(cfg.horizon, cfg.beta_start, cfg.beta_end);
    return diff::reverse_sample(store, cfg, sched, plan, seed);
}

RegimeMetrics evaluate_completion(const EvalSetup& setup, const EvidenceBatch& eb,
                                  const std::vector<double>& completed) {
    const model::ModelConfig& cfg = setup.cfg;
    const auto flat = static_cast<std::size_t>(cfg.flat_len());
    if (completed.size() != eb.users.size() * flat)
        throw std::invalid_argument("completion size mismatch");
    const std::vector<std::uint8_t> holdout = holdout_region(cfg, eb.regime);
    RegimeMetrics m;
    for (std::size_t b = 0; b < eb.users.size(); ++b) {
        std::vector<double> row(completed.begin() + static_cast<std::ptrdiff_t>(b * flat),
                                completed.begin() + static_cast<std::ptrdiff_t>((b + 1) * flat));
        const auto& truth = setup.tensors[static_cast<std::size_t>(eb.users[b])]->data;
        auto [rmse, mae] = rmse_mae_flat(row, truth, cfg, holdout);
        m.rmse += rmse;
        m.mae += mae;
    }
    m.rmse /= static_cast<double>(eb.users.size());
    m.mae /= static_cast<double>(eb.users.size());
    return m;
}

double CompareReport::mean_rmse(core::Task task, EvidencePolicy policy) const {
    double acc = 0.0;
    int n = 0;
    for (const CompareRow& r : rows)
        if (r.task == task && r.policy == policy) {
            acc += r.rmse;
            ++n;
        }
    if (n == 0) throw std::invalid_argument("no rows for the requested regime");
    return acc / n;
}

std::string CompareReport::csv() const {
    std::ostringstream out;
    out << "task,policy,seed,rmse,mae\n";
    for (const CompareRow& r : rows)
        out << core::task_name(r.task) << ',' << policy_name(r.policy) << ',' << r.seed << ','
            << fmt(r.rmse) << ',' << fmt(r.mae) << '\n';

    // per-policy means, then deltas against the adaptive mean
    std::map<std::pair<int, int>, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const CompareRow& r : rows) {
        auto& g = groups[{static_cast<int>(r.task), static_cast<int>(r.policy)}];
        g.first.push_back(r.rmse);
        g.second.push_back(r.mae);
    }
    auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    for (const auto& [key, vals] : groups)
        out << core::task_name(static_cast<core::Task>(key.first)) << ','
            << policy_name(static_cast<EvidencePolicy>(key.second)) << ",mean,"
            << fmt(mean(vals.first)) << ',' << fmt(mean(vals.second)) << '\n';
    for (const auto& [key, vals] : groups) {
        const auto task = static_cast<core::Task>(key.first);
        const auto policy = static_cast<EvidencePolicy>(key.second);
        if (policy == EvidencePolicy::adaptive) continue;
        auto ours = groups.find({key.first, static_cast<int>(EvidencePolicy::adaptive)});
        if (ours == groups.end()) continue;
        const double base_rmse = mean(vals.first), base_mae = mean(vals.second);
        const double d_rmse =
            base_rmse != 0.0 ? (base_rmse - mean(ours->second.first)) / base_rmse : 0.0;
        const double d_mae =
            base_mae != 0.0 ? (base_mae - mean(ours->second.second)) / base_mae : 0.0;
        out << core::task_name(task) << ",delta-" << policy_name(policy) << ",all,"
            << fmt(d_rmse) << ',' << fmt(d_mae) << '\n';
    }
    return out.str();
}

CompareReport compare_masking(const params::ParameterStore& store, const EvalSetup& setup,
                              const std::vector<core::Task>& tasks,
                              const std::vector<EvidencePolicy>& baselines,
                              const std::vector<std::uint64_t>& seeds,
                              const std::vector<int>& users) {
    if (tasks.empty() || seeds.empty()) throw std::invalid_argument("nothing to compare");
    CompareReport report;
    std::vector<EvidencePolicy> policies{EvidencePolicy::adaptive};
    for (EvidencePolicy p : baselines)
        if (std::find(policies.begin(), policies.end(), p) == policies.end()) policies.push_back(p);

    for (core::Task task : tasks)
        for (std::uint64_t seed : seeds)
            for (EvidencePolicy policy : policies) {
                EvalRegime regime = regime_for(task, policy, setup.cfg);
                EvidenceBatch eb = build_evidence(store, setup, regime, users, seed);
                const std::vector<double> done = complete(store, setup, eb, seed);
                RegimeMetrics m = evaluate_completion(setup, eb, done);
                report.rows.push_back({task, policy, seed, m.rmse, m.mae});
            }
    return report;
}

RankReport rank_evaluation(const EvalSetup& setup, const EvidenceBatch& eb,
                           const std::vector<double>& completed,
                           const std::vector<int>& cutoffs, int relevant_top) {
    const model::ModelConfig& cfg = setup.cfg;
    const auto flat = static_cast<std::size_t>(cfg.flat_len());
    if (completed.size() != eb.users.size() * flat)
        throw std::invalid_argument("completion size mismatch");
    const std::vector<std::uint8_t> holdout = holdout_region(cfg, eb.regime);

    RankReport rep;
    rep.cutoffs = cutoffs;
    rep.app_recall.assign(cutoffs.size(), 0.0);
    rep.app_ndcg.assign(cutoffs.size(), 0.0);
    rep.app_mrr.assign(cutoffs.size(), 0.0);
    rep.cell_recall.assign(cutoffs.size(), 0.0);
    rep.cell_ndcg.assign(cutoffs.size(), 0.0);
    rep.cell_mrr.assign(cutoffs.size(), 0.0);

    for (std::size_t b = 0; b < eb.users.size(); ++b) {
        std::vector<double> row(completed.begin() + static_cast<std::ptrdiff_t>(b * flat),
                                completed.begin() + static_cast<std::ptrdiff_t>((b + 1) * flat));
        const auto& truth = setup.tensors[static_cast<std::size_t>(eb.users[b])]->data;

        const std::vector<double> pred_app = app_engagement(row, cfg, setup.gen, holdout);
        const std::vector<double> true_app = app_engagement(truth, cfg, setup.gen, holdout);
        RankMetrics ma = rank_metrics(pred_app, top_items(true_app, relevant_top), cutoffs);

        const std::vector<double> pred_cell = cell_engagement(row, cfg, holdout);
        const std::vector<double> true_cell = cell_engagement(truth, cfg, holdout);
        RankMetrics mc = rank_metrics(pred_cell, top_items(true_cell, relevant_top), cutoffs);

        for (std::size_t k = 0; k < cutoffs.size(); ++k) {
            rep.app_recall[k] += ma.recall[k];
            rep.app_ndcg[k] += ma.ndcg[k];
            rep.app_mrr[k] += ma.mrr[k];
            rep.cell_recall[k] += mc.recall[k];
            rep.cell_ndcg[k] += mc.ndcg[k];
            rep.cell_mrr[k] += mc.mrr[k];
        }
    }
    const auto n = static_cast<double>(eb.users.size());
    for (std::size_t k = 0; k < cutoffs.size(); ++k) {
        rep.app_recall[k] /= n;
        rep.app_ndcg[k] /= n;
        rep.app_mrr[k] /= n;
        rep.cell_recall[k] /= n;
        rep.cell_ndcg[k] /= n;
        rep.cell_mrr[k] /= n;
    }
    return rep;
}

void write_masks_csv(std::ostream& out, const model::ModelConfig& cfg, const EvidenceBatch& eb) {
    out << "user,t,h,w,binary,weight\n";
    for (std::size_t b = 0; b < eb.users.size(); ++b) {
        const UserEvidence& ue = eb.evidence[b];
        for (int ts = 0; ts < cfg.T; ++ts)
            for (int h = 0; h < cfg.H; ++h)
                for (int w = 0; w < cfg.W; ++w) {
                    const auto i = static_cast<std::size_t>(ts) * cfg.cells() + h * cfg.W + w;
                    out << eb.users[b] << ',' << ts << ',' << h << ',' << w << ','
                        << static_cast<int>(ue.binary[i]) << ',' << fmt(ue.weights[i]) << '\n';
                }
    }
    if (!out) throw std::runtime_error("mask export failed");
}

std::vector<std::string> known_config_keys() {
    return {"run.dir",
            "data.users",
            "data.seed",
            "data.noise",
            "model.horizon",
            "model.cold_epsilon",
            "train.epochs",
            "train.batch_size",
            "train.learning_rate",
            "train.lambda_con",
            "train.seed",
            "train.precision",
            "eval.seeds",
            "eval.users",
            "eval.tasks",
            "eval.baselines",
            "eval.cutoffs",
            "eval.relevant_top"};
}

std::vector<int> PipelineSettings::eval_user_ids(int total) const {
    const int limit = eval_users == 0 ? total : std::min(eval_users, total);
    std::vector<int> users;
    users.reserve(static_cast<std::size_t>(limit));
    for (int u = 0; u < limit; ++u) users.push_back(u);
    return users;
}

PipelineSettings settings_from_config(const conf::ConfigFile& config) {
    config.require_known(known_config_keys());
    PipelineSettings s;

    s.run_dir = config.get_string("run", "dir", s.run_dir);
    s.gen.users = static_cast<int>(config.get_int("data", "users", s.gen.users));
    s.gen.seed = config.get_uint64("data", "seed", s.gen.seed);
    s.gen.noise = config.get_double("data", "noise", s.gen.noise);
    s.cfg.horizon = static_cast<int>(config.get_int("model", "horizon", s.cfg.horizon));
    s.cfg.cold_epsilon = config.get_double("model", "cold_epsilon", s.cfg.cold_epsilon);
    s.tc.epochs = static_cast<int>(config.get_int("train", "epochs", s.tc.epochs));
    s.tc.batch_size = static_cast<int>(config.get_int("train", "batch_size", s.tc.batch_size));
    s.tc.learning_rate = config.get_double("train", "learning_rate", s.tc.learning_rate);
    s.tc.lambda_con = config.get_double("train", "lambda_con", s.tc.lambda_con);
    s.tc.seed = config.get_uint64("train", "seed", s.tc.seed);
    s.tc.precision = static_cast<int>(config.get_int("train", "precision", s.tc.precision));

    if (config.has("eval", "seeds")) s.eval_seeds = config.get_uint64_list("eval", "seeds");
    if (s.eval_seeds.empty()) throw conf::ConfigError("eval.seeds must not be empty");
    if (config.has("eval", "tasks")) {
        s.tasks.clear();
        for (const std::string& name : config.get_list("eval", "tasks"))
            s.tasks.push_back(core::task_from_name(name));
        if (s.tasks.empty()) throw conf::ConfigError("eval.tasks must not be empty");
    }
    if (config.has("eval", "baselines")) {
        s.baselines.clear();
        for (const std::string& name : config.get_list("eval", "baselines"))
            s.baselines.push_back(policy_from_name(name));
    }
    if (config.has("eval", "cutoffs")) {
        s.cutoffs.clear();
        for (std::uint64_t v : config.get_uint64_list("eval", "cutoffs"))
            s.cutoffs.push_back(static_cast<int>(v));
        if (s.cutoffs.empty()) throw conf::ConfigError("eval.cutoffs must not be empty");
    }
    s.eval_users = static_cast<int>(config.get_int("eval", "users", s.eval_users));
    s.relevant_top = static_cast<int>(config.get_int("eval", "relevant_top", s.relevant_top));

    s.cfg.validate();
    s.gen.validate();
    if (s.tc.epochs < 0) throw conf::ConfigError("train.epochs must be nonnegative");
    if (s.tc.epochs > 0) s.tc.validate();
    if (s.eval_users < 0) throw conf::ConfigError("eval.users must be nonnegative");
    if (s.relevant_top < 1) throw conf::ConfigError("eval.relevant_top must be positive");
    return s;
}

prof::FeaturizerConfig featurizer_for(const PipelineSettings& s) {
    prof::FeaturizerConfig feat;
    feat.locations = s.cfg.cells();
    feat.apps = s.gen.apps;
    feat.slots_per_day = s.gen.slots_per_day;
    feat.embed_dim = s.cfg.d;
    return feat;
}

int run_pipeline(const std::string& config_path) {
    namespace fs = std::filesystem;

    conf::ConfigFile config;
    PipelineSettings s;
    try {
        config = conf::ConfigFile::parse_file(config_path);
        s = settings_from_config(config);
        fs::create_directories(s.run_dir);
        std::ofstream snap(fs::path(s.run_dir) / "config.ini", std::ios::binary);
        snap << config.raw_text();
        if (!snap) throw std::runtime_error("cannot write config snapshot");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    synth::Dataset data;
    params::ParameterStore store;
    try {
        data = synth::generate_dataset(s.gen);
        model::init_params(store, s.cfg, s.tc.seed);

        const prof::FeaturizerConfig feat = featurizer_for(s);
        std::vector<prof::UserEmbedding> embeds;
        for (const auto& u : data.users)
            embeds.push_back({u.events.user_id, prof::embed(prof::summarize(u.events, feat), feat)});
        prof::write_embeddings_csv_file((fs::path(s.run_dir) / "embeddings.csv").string(), embeds);

        if (s.tc.epochs > 0) {
            std::vector<train::TrainExample> examples;
            for (std::size_t i = 0; i < data.users.size(); ++i)
                examples.push_back({&data.users[i].tensor, embeds[i].embedding.vec});
            std::vector<train::EpochMetrics> metrics = train::train(store, s.cfg, examples, s.tc);
            train::write_metrics_csv((fs::path(s.run_dir) / "train_metrics.csv").string(), metrics);
        }
        params::write_checkpoint_file((fs::path(s.run_dir) / "checkpoint.stck").string(), store);
    } catch (const std::exception& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return 3;
    }

    try {
        EvalSetup setup = make_setup(s.cfg, data, featurizer_for(s));
        const std::vector<int> users = s.eval_user_ids(static_cast<int>(data.users.size()));

        CompareReport report =
            compare_masking(store, setup, s.tasks, s.baselines, s.eval_seeds, users);
        std::ofstream cmp(fs::path(s.run_dir) / "compare.csv");
        cmp << report.csv();
        if (!cmp) throw std::runtime_error("cannot write comparison report");

        if (std::find(s.tasks.begin(), s.tasks.end(), core::Task::cold_start) != s.tasks.end()) {
            EvalRegime regime =
                regime_for(core::Task::cold_start, EvidencePolicy::adaptive, s.cfg);
            EvidenceBatch eb = build_evidence(store, setup, regime, users, s.eval_seeds[0]);
            const std::vector<double> done = complete(store, setup, eb, s.eval_seeds[0]);
            RankReport rr = rank_evaluation(setup, eb, done, s.cutoffs, s.relevant_top);
            std::ofstream rank(fs::path(s.run_dir) / "rank_metrics.csv");
            rank << "item,metric";
            for (int k : rr.cutoffs) rank << ",at" << k;
            rank << '\n';
            auto row = [&](const char* item, const char* metric, const std::vector<double>& v) {
                rank << item << ',' << metric;
                for (double x : v) rank << ',' << fmt(x);
                rank << '\n';
            };
            row("app", "recall", rr.app_recall);
            row("app", "ndcg", rr.app_ndcg);
            row("app", "mrr", rr.app_mrr);
            row("cell", "recall", rr.cell_recall);
            row("cell", "ndcg", rr.cell_ndcg);
            row("cell", "mrr", rr.cell_mrr);
            if (!rank) throw std::runtime_error("cannot write ranking report");
        }
    } catch (const std::exception& e) {
        std::cerr << "evaluation error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}

} // namespace stmask::harness
