#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stmask/config.hpp"
#include "stmask/harness.hpp"
#include "stmask/model.hpp"
#include "stmask/params.hpp"
#include "stmask/rng.hpp"
#include "stmask/synthetic.hpp"
#include "stmask/tensor.hpp"

using namespace stmask;
using harness::EvidencePolicy;

namespace {

// Full desk dims with a shallow denoiser and short reverse chain: harness
// plumbing is dimension-sensitive but not depth-sensitive.
model::ModelConfig fast_cfg() {
    model::ModelConfig cfg;
    cfg.blocks = 2;
    cfg.horizon = 8;
    cfg.validate();
    return cfg;
}

synth::GenConfig fast_gen(int users, std::uint64_t seed = 17) {
    synth::GenConfig gen;
    gen.users = users;
    gen.seed = seed;
    gen.validate();
    return gen;
}

// Makes reverse sampling respond to evidence: zero-initialized output head
// and modulation would ignore the conditioning entirely.
void activate_denoiser(params::ParameterStore& store, const model::ModelConfig& cfg,
                       std::uint64_t key) {
    rng::Stream s(key);
    for (double& v : store.values("head_w")) v = 0.05 * s.normal();
    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string p = "blk" + std::to_string(i) + "_";
        for (double& v : store.values(p + "mod_w")) v = 0.05 * s.normal();
        for (double& v : store.values(p + "mod_b")) v = 0.05 * s.normal();
    }
}

struct World {
    model::ModelConfig cfg;
    synth::GenConfig gen;
    synth::Dataset data;
    params::ParameterStore store;
    harness::EvalSetup setup;
};

World make_world(int users, std::uint64_t seed = 17) {
    World w;
    w.cfg = fast_cfg();
    w.gen = fast_gen(users, seed);
    w.data = synth::generate_dataset(w.gen);
    model::init_params(w.store, w.cfg, 1);
    activate_denoiser(w.store, w.cfg, 2);

    prof::FeaturizerConfig feat;
    feat.locations = w.cfg.cells();
    feat.apps = w.gen.apps;
    feat.slots_per_day = w.gen.slots_per_day;
    feat.embed_dim = w.cfg.d;
    w.setup = harness::make_setup(w.cfg, w.data, feat);
    return w;
}

int popcount(const std::vector<std::uint8_t>& v) {
    int n = 0;
    for (std::uint8_t b : v) n += b;
    return n;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string temp_dir(const char* tag) {
    const auto dir = std::filesystem::temp_directory_path() / (std::string("stmask_") + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

} // namespace

TEST_CASE("policy and regime plumbing") {
    CHECK(harness::policy_name(EvidencePolicy::adaptive) == "adaptive");
    CHECK(harness::policy_name(EvidencePolicy::random_fixed) == "random-fixed");
    CHECK(harness::policy_name(EvidencePolicy::block_fixed) == "block-fixed");
    for (auto p : {EvidencePolicy::adaptive, EvidencePolicy::random_fixed,
                   EvidencePolicy::block_fixed})
        CHECK(harness::policy_from_name(harness::policy_name(p)) == p);
    CHECK_THROWS_AS(harness::policy_from_name("uniform"), std::invalid_argument);

    const model::ModelConfig cfg = fast_cfg();
    const auto s = harness::regime_for(core::Task::short_term, EvidencePolicy::adaptive, cfg);
    const auto l = harness::regime_for(core::Task::long_term, EvidencePolicy::adaptive, cfg);
    const auto c = harness::regime_for(core::Task::cold_start, EvidencePolicy::adaptive, cfg);
    CHECK(s.holdout == 4);
    CHECK(l.holdout == 16);
    CHECK(c.holdout == cfg.T);

    harness::EvalRegime bad = s;
    bad.holdout = 0;
    CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);
    bad.holdout = cfg.T;
    CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);
    bad = c;
    bad.holdout = cfg.T - 1;
    CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);

    const auto region_s = harness::holdout_region(cfg, s);
    CHECK(static_cast<int>(region_s.size()) == cfg.coords());
    CHECK(popcount(region_s) == 4 * cfg.cells());
    // only the trailing 4 slots are hidden
    for (int ts = 0; ts < cfg.T; ++ts)
        for (int cell = 0; cell < cfg.cells(); ++cell)
            CHECK(region_s[static_cast<std::size_t>(ts) * cfg.cells() + cell] ==
                  (ts >= cfg.T - 4 ? 1 : 0));
    CHECK(popcount(harness::holdout_region(cfg, l)) == 16 * cfg.cells());
    CHECK(popcount(harness::holdout_region(cfg, c)) == cfg.coords());
}

TEST_CASE("rmse and mae over the held-out region") {
    core::BehaviorTensor truth(1, 2, 1, 2);
    truth.data = {0.1, 0.2, 0.3, 0.4};

    SUBCASE("identical tensors score zero") {
        std::vector<std::uint8_t> region{0, 0, 1, 1};
        auto [rmse, mae] = harness::rmse_mae(truth, truth, region);
        CHECK(rmse == 0.0);
        CHECK(mae == 0.0);
    }
    SUBCASE("constant offset scores the offset") {
        core::BehaviorTensor pred = truth;
        for (double& v : pred.data) v += 0.1;
        std::vector<std::uint8_t> region{1, 1, 1, 1};
        auto [rmse, mae] = harness::rmse_mae(pred, truth, region);
        CHECK(rmse == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(mae == doctest::Approx(0.1).epsilon(1e-12));
    }
    SUBCASE("two-entry region, hand arithmetic") {
        core::BehaviorTensor pred = truth;
        pred.data[2] += 0.3;
        pred.data[3] -= 0.1;
        std::vector<std::uint8_t> region{0, 0, 1, 1};
        auto [rmse, mae] = harness::rmse_mae(pred, truth, region);
        CHECK(rmse == doctest::Approx(std::sqrt(0.05)).epsilon(1e-12));
        CHECK(mae == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("channels all contribute") {
        core::BehaviorTensor t2(2, 2, 1, 1);
        t2.data = {0.0, 0.0, 0.0, 0.0};
        core::BehaviorTensor p2 = t2;
        p2.data[1] = 0.3;   // channel 0, held-out coord
        p2.data[3] = -0.1;  // channel 1, same coord
        std::vector<std::uint8_t> region{0, 1};
        auto [rmse, mae] = harness::rmse_mae(p2, t2, region);
        CHECK(rmse == doctest::Approx(std::sqrt(0.05)).epsilon(1e-12));
        CHECK(mae == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("errors") {
        std::vector<std::uint8_t> empty_region{0, 0, 0, 0};
        CHECK_THROWS_AS(harness::rmse_mae(truth, truth, empty_region), std::invalid_argument);
        core::BehaviorTensor other(1, 1, 1, 2);
        other.data = {0.0, 0.0};
        std::vector<std::uint8_t> region{1, 1};
        CHECK_THROWS_AS(harness::rmse_mae(other, truth, region), std::invalid_argument);
        CHECK_THROWS_AS(
            harness::rmse_mae(truth, truth, std::vector<std::uint8_t>{1, 1, 1}),
            std::invalid_argument);
    }
}

TEST_CASE("score restriction to the observed region") {
    std::vector<double> scores{0.1, 0.2, 0.3, 0.4};
    std::vector<std::uint8_t> holdout{0, 1, 0, 1};
    const auto r = harness::restrict_scores(scores, holdout);
    CHECK(r[1] == 0.0);
    CHECK(r[3] == 0.0);
    CHECK(r[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r[2] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(r[0] + r[2] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(harness::restrict_scores(scores, {1, 1, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(harness::restrict_scores(scores, {0, 1}), std::invalid_argument);
    CHECK_THROWS_AS(harness::restrict_scores({0.0, 0.0, 1.0}, {0, 0, 1}),
                    std::invalid_argument);
}

TEST_CASE("ranking metric oracles") {
    SUBCASE("relevant item ranked first") {
        const auto m = harness::rank_metrics({0.9, 0.5, 0.1}, {0}, {1});
        CHECK(m.recall[0] == 1.0);
        CHECK(m.ndcg[0] == 1.0);
        CHECK(m.mrr[0] == 1.0);
    }
    SUBCASE("single relevant item ranked third at cutoff three") {
        const auto m = harness::rank_metrics({0.9, 0.5, 0.4, 0.1}, {2}, {3});
        CHECK(m.recall[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(m.mrr[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        CHECK(m.ndcg[0] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("no relevant item inside the cutoff") {
        const auto m = harness::rank_metrics({0.9, 0.5, 0.4, 0.1}, {3}, {2});
        CHECK(m.recall[0] == 0.0);
        CHECK(m.ndcg[0] == 0.0);
        CHECK(m.mrr[0] == 0.0);
    }
    SUBCASE("ties break toward the lower index") {
        // items 0 and 1 tie; 1 is relevant and must rank second
        const auto m = harness::rank_metrics({0.5, 0.5, 0.1}, {1}, {1, 2});
        CHECK(m.recall[0] == 0.0);
        CHECK(m.mrr[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("recall nondecreasing in the cutoff, everything in range") {
        rng::Stream s(91);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> scores(12);
            for (double& v : scores) v = s.uniform();
            std::vector<int> rel;
            for (int i = 0; i < 12; ++i)
                if (s.uniform() < 0.3) rel.push_back(i);
            if (rel.empty()) rel.push_back(static_cast<int>(s.below(12)));
            std::vector<int> cutoffs{1, 2, 3, 5, 8, 12};
            const auto m = harness::rank_metrics(scores, rel, cutoffs);
            for (std::size_t k = 0; k < cutoffs.size(); ++k) {
                CHECK(m.recall[k] >= 0.0);
                CHECK(m.recall[k] <= 1.0);
                CHECK(m.ndcg[k] >= 0.0);
                CHECK(m.ndcg[k] <= 1.0);
                CHECK(m.mrr[k] >= 0.0);
                CHECK(m.mrr[k] <= 1.0);
                if (k > 0) CHECK(m.recall[k] >= m.recall[k - 1]);
            }
            CHECK(m.recall.back() == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(harness::rank_metrics({0.1, 0.2}, {}, {1}), std::invalid_argument);
        CHECK_THROWS_AS(harness::rank_metrics({0.1, 0.2}, {5}, {1}), std::invalid_argument);
        CHECK_THROWS_AS(harness::rank_metrics({0.1, 0.2}, {0}, {0}), std::invalid_argument);
    }
}

TEST_CASE("engagement proxies and top items") {
    const model::ModelConfig cfg = fast_cfg();
    synth::GenConfig gen = fast_gen(2);
    const int N = cfg.coords();
    std::vector<double> flat(static_cast<std::size_t>(cfg.flat_len()), 0.0);

    harness::EvalRegime regime =
        harness::regime_for(core::Task::short_term, EvidencePolicy::adaptive, cfg);
    const auto holdout = harness::holdout_region(cfg, regime);

    // app 2 active at its proxy cell: 0.5 inside the held-out window, 9.0 outside
    const int cell2 = synth::app_proxy_cell(gen, 2);
    flat[static_cast<std::size_t>(synth::kAppChannel) * N +
         static_cast<std::size_t>(cfg.T - 1) * cfg.cells() + cell2] = 0.5;
    flat[static_cast<std::size_t>(synth::kAppChannel) * N +
         static_cast<std::size_t>(cfg.T - 2) * cfg.cells() + cell2] = 0.25;
    flat[static_cast<std::size_t>(synth::kAppChannel) * N + cell2] = 9.0;  // slot 0, observed

    const auto apps = harness::app_engagement(flat, cfg, gen, holdout);
    CHECK(static_cast<int>(apps.size()) == gen.apps);
    CHECK(apps[2] == doctest::Approx(0.75).epsilon(1e-12));
    for (int a = 0; a < gen.apps; ++a)
        if (a != 2) CHECK(apps[static_cast<std::size_t>(a)] == 0.0);

    // occupancy at cell 5, half in and half out of the window
    std::fill(flat.begin(), flat.end(), 0.0);
    flat[static_cast<std::size_t>(synth::kOccupancyChannel) * N +
         static_cast<std::size_t>(cfg.T - 3) * cfg.cells() + 5] = 1.0;
    flat[static_cast<std::size_t>(synth::kOccupancyChannel) * N + 5] = 1.0;
    const auto cells = harness::cell_engagement(flat, cfg, holdout);
    CHECK(static_cast<int>(cells.size()) == cfg.cells());
    CHECK(cells[5] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK(harness::top_items({0.1, 0.9, 0.9, 0.5}, 2) == std::vector<int>{1, 2});
    CHECK(harness::top_items({0.3, 0.3, 0.3}, 2) == std::vector<int>{0, 1});
    CHECK(harness::top_items({0.3, 0.7}, 5) == std::vector<int>{1, 0});
    CHECK_THROWS_AS(harness::top_items({0.1}, 0), std::invalid_argument);
}

TEST_CASE("evidence construction for observed-history regimes") {
    const World w = make_world(6);
    const int N = w.cfg.coords();
    const std::vector<int> users{0, 1, 2, 3, 4, 5};
    const std::uint64_t seed = 11;

    const auto regime_of = [&](EvidencePolicy p) {
        return harness::regime_for(core::Task::short_term, p, w.cfg);
    };
    const auto holdout = harness::holdout_region(w.cfg, regime_of(EvidencePolicy::adaptive));
    const int observed = N - popcount(holdout);

    const auto eb_a =
        harness::build_evidence(w.store, w.setup, regime_of(EvidencePolicy::adaptive), users, seed);
    const auto eb_r = harness::build_evidence(w.store, w.setup,
                                              regime_of(EvidencePolicy::random_fixed), users, seed);
    const auto eb_b = harness::build_evidence(w.store, w.setup,
                                              regime_of(EvidencePolicy::block_fixed), users, seed);

    for (std::size_t b = 0; b < users.size(); ++b) {
        const auto& a = eb_a.evidence[b];
        const auto& r = eb_r.evidence[b];
        const auto& blk = eb_b.evidence[b];

        CHECK(a.value_user == users[b]);
        CHECK(a.rho_tilde > 0.0);
        CHECK(a.rho_tilde < 1.0);
        CHECK(a.budget == std::min(model::budget_from_ratio(a.rho_tilde, N), observed));
        // fairness: baselines inherit the adaptive budget exactly
        CHECK(r.budget == a.budget);
        CHECK(blk.budget == a.budget);
        CHECK(r.rho_tilde == a.rho_tilde);

        for (const auto* ue : {&a, &r, &blk}) {
            CHECK(popcount(ue->binary) == ue->budget);
            double wsum = 0.0;
            for (int i = 0; i < N; ++i) {
                if (ue->binary[static_cast<std::size_t>(i)]) {
                    CHECK(holdout[static_cast<std::size_t>(i)] == 0);
                    CHECK(ue->weights[static_cast<std::size_t>(i)] > 0.0);
                    wsum += ue->weights[static_cast<std::size_t>(i)];
                } else {
                    CHECK(ue->weights[static_cast<std::size_t>(i)] == 0.0);
                }
            }
            CHECK(wsum <= 1.0 + 1e-9);
        }

        // fairness: identical importance weights wherever supports overlap
        int shared = 0;
        for (int i = 0; i < N; ++i)
            if (a.binary[static_cast<std::size_t>(i)] && r.binary[static_cast<std::size_t>(i)]) {
                ++shared;
                CHECK(a.weights[static_cast<std::size_t>(i)] ==
                      r.weights[static_cast<std::size_t>(i)]);
            }
        CHECK(shared > 0);
        CHECK(a.binary != r.binary);
        CHECK(a.binary != blk.binary);

        // block-fixed support: most recent observed slots, row-major cells
        std::vector<std::uint8_t> expect(static_cast<std::size_t>(N), 0);
        int left = blk.budget;
        for (int ts = w.cfg.T - 1; ts >= 0 && left > 0; --ts)
            for (int cell = 0; cell < w.cfg.cells() && left > 0; ++cell) {
                const auto i = static_cast<std::size_t>(ts) * w.cfg.cells() + cell;
                if (holdout[i]) continue;
                expect[i] = 1;
                --left;
            }
        CHECK(blk.binary == expect);
    }

    SUBCASE("rebuilds are bit-identical") {
        const auto again = harness::build_evidence(
            w.store, w.setup, regime_of(EvidencePolicy::adaptive), users, seed);
        for (std::size_t b = 0; b < users.size(); ++b) {
            CHECK(again.evidence[b].binary == eb_a.evidence[b].binary);
            CHECK(same_bits(again.evidence[b].weights, eb_a.evidence[b].weights));
        }
        CHECK(same_bits(again.user_vec, eb_a.user_vec));
        CHECK(same_bits(again.task_vec, eb_a.task_vec));
    }
    SUBCASE("a different seed moves the sampled support") {
        const auto other = harness::build_evidence(
            w.store, w.setup, regime_of(EvidencePolicy::adaptive), users, seed + 1);
        CHECK(other.evidence[0].binary != eb_a.evidence[0].binary);
        // the policy itself is seed-independent
        CHECK(other.evidence[0].rho_tilde == eb_a.evidence[0].rho_tilde);
        CHECK(same_bits(other.user_vec, eb_a.user_vec));
    }
    SUBCASE("input validation") {
        CHECK_THROWS_AS(harness::build_evidence(w.store, w.setup,
                                                regime_of(EvidencePolicy::adaptive), {}, seed),
                        std::invalid_argument);
        CHECK_THROWS_AS(harness::build_evidence(w.store, w.setup,
                                                regime_of(EvidencePolicy::adaptive), {9}, seed),
                        std::invalid_argument);
    }
}

TEST_CASE("cold-start evidence comes from the nearest peer") {
    const World w = make_world(6);
    const int N = w.cfg.coords();
    const std::vector<int> users{0, 1, 2, 3, 4, 5};
    const auto regime = harness::regime_for(core::Task::cold_start, EvidencePolicy::adaptive,
                                            w.cfg);
    const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 7);

    for (std::size_t b = 0; b < users.size(); ++b) {
        const auto& ue = eb.evidence[b];
        CHECK(ue.value_user != users[b]);
        CHECK(ue.value_user >= 0);
        CHECK(ue.value_user < 6);
        CHECK(popcount(ue.binary) == ue.budget);
        CHECK(ue.budget == std::min(model::budget_from_ratio(ue.rho_tilde, N), N));
        for (int i = 0; i < N; ++i)
            if (!ue.binary[static_cast<std::size_t>(i)])
                CHECK(ue.weights[static_cast<std::size_t>(i)] == 0.0);
    }

    // the chosen peer maximizes profile similarity
    for (std::size_t b = 0; b < users.size(); ++b) {
        const auto& mine = w.setup.profiles[b];
        double best = -2.0;
        int arg = -1;
        for (std::size_t j = 0; j < w.setup.profiles.size(); ++j) {
            if (j == b) continue;
            double sim = 0.0;
            for (std::size_t k = 0; k < mine.size(); ++k)
                sim += mine[k] * w.setup.profiles[j][k];
            if (sim > best) {
                best = sim;
                arg = static_cast<int>(j);
            }
        }
        CHECK(eb.evidence[b].value_user == arg);
    }

    SUBCASE("profiles are required") {
        harness::EvalSetup bare = w.setup;
        bare.profiles.clear();
        CHECK_THROWS_AS(harness::build_evidence(w.store, bare, regime, users, 7),
                        std::invalid_argument);
    }
    SUBCASE("a lone user has no peer") {
        const World solo = make_world(1);
        CHECK_THROWS_AS(harness::build_evidence(solo.store, solo.setup, regime, {0}, 7),
                        std::invalid_argument);
    }
}

TEST_CASE("sub-batch completion reproduces the full batch") {
    const World w = make_world(5);
    const std::vector<int> users{0, 1, 2, 3};
    const auto regime =
        harness::regime_for(core::Task::long_term, EvidencePolicy::adaptive, w.cfg);
    const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 3);
    const auto done = harness::complete(w.store, w.setup, eb, 3);
    const auto flat = static_cast<std::size_t>(w.cfg.flat_len());
    REQUIRE(done.size() == users.size() * flat);

    harness::EvidenceBatch sub;
    sub.regime = eb.regime;
    sub.users = {eb.users[1], eb.users[3]};
    sub.evidence = {eb.evidence[1], eb.evidence[3]};
    const auto D = static_cast<std::size_t>(w.cfg.model_dim);
    for (std::size_t b : {std::size_t{1}, std::size_t{3}}) {
        sub.user_vec.insert(sub.user_vec.end(), eb.user_vec.begin() + b * D,
                            eb.user_vec.begin() + (b + 1) * D);
        sub.task_vec.insert(sub.task_vec.end(), eb.task_vec.begin() + b * D,
                            eb.task_vec.begin() + (b + 1) * D);
    }
    const auto part = harness::complete(w.store, w.setup, sub, 3);
    REQUIRE(part.size() == 2 * flat);
    CHECK(std::equal(part.begin(), part.begin() + flat, done.begin() + 1 * flat));
    CHECK(std::equal(part.begin() + flat, part.end(), done.begin() + 3 * flat));
}

TEST_CASE("sampling never reads held-out truth") {
    World w = make_world(5);
    const std::vector<int> users{0, 1, 2, 3, 4};

    SUBCASE("observed-history regimes") {
        for (core::Task task : {core::Task::short_term, core::Task::long_term}) {
            const auto regime = harness::regime_for(task, EvidencePolicy::adaptive, w.cfg);
            const auto holdout = harness::holdout_region(w.cfg, regime);
            const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 5);
            const auto done = harness::complete(w.store, w.setup, eb, 5);

            // poison every user's held-out region
            synth::Dataset poisoned = w.data;
            const int N = w.cfg.coords();
            for (auto& u : poisoned.users)
                for (int c = 0; c < w.cfg.C; ++c)
                    for (int i = 0; i < N; ++i)
                        if (holdout[static_cast<std::size_t>(i)])
                            u.tensor.data[static_cast<std::size_t>(c) * N + i] = 0.77;

            prof::FeaturizerConfig feat;
            feat.locations = w.cfg.cells();
            feat.apps = w.gen.apps;
            feat.slots_per_day = w.gen.slots_per_day;
            feat.embed_dim = w.cfg.d;
            const auto setup2 = harness::make_setup(w.cfg, poisoned, feat);

            const auto eb2 = harness::build_evidence(w.store, setup2, regime, users, 5);
            for (std::size_t b = 0; b < users.size(); ++b) {
                CHECK(eb2.evidence[b].binary == eb.evidence[b].binary);
                CHECK(same_bits(eb2.evidence[b].weights, eb.evidence[b].weights));
            }
            CHECK(same_bits(eb2.user_vec, eb.user_vec));
            const auto done2 = harness::complete(w.store, setup2, eb2, 5);
            CHECK(same_bits(done2, done));
        }
    }

    SUBCASE("cold start never reads the target's tensor") {
        const auto regime =
            harness::regime_for(core::Task::cold_start, EvidencePolicy::adaptive, w.cfg);
        const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 5);
        const auto done = harness::complete(w.store, w.setup, eb, 5);
        const auto flat = static_cast<std::size_t>(w.cfg.flat_len());

        const int target = 1;
        REQUIRE(eb.evidence[target].value_user != target);

        synth::Dataset poisoned = w.data;
        for (double& v : poisoned.users[target].tensor.data) v = 0.33;
        prof::FeaturizerConfig feat;
        feat.locations = w.cfg.cells();
        feat.apps = w.gen.apps;
        feat.slots_per_day = w.gen.slots_per_day;
        feat.embed_dim = w.cfg.d;
        const auto setup2 = harness::make_setup(w.cfg, poisoned, feat);

        const auto eb2 = harness::build_evidence(w.store, setup2, regime, {target}, 5);
        CHECK(eb2.evidence[0].value_user == eb.evidence[target].value_user);
        CHECK(eb2.evidence[0].binary == eb.evidence[target].binary);
        const auto done2 = harness::complete(w.store, setup2, eb2, 5);
        REQUIRE(done2.size() == flat);
        CHECK(std::equal(done2.begin(), done2.end(),
                         done.begin() + static_cast<std::ptrdiff_t>(target) * flat));
    }
}

TEST_CASE("saturated budget equalizes every policy") {
    const World w = make_world(4);
    const std::vector<int> users{0, 1, 2, 3};
    const int N = w.cfg.coords();

    // hold out all but the first slot: 64 observable coordinates
    harness::EvalRegime regime;
    regime.task = core::Task::short_term;
    regime.holdout = w.cfg.T - 1;
    const auto holdout = harness::holdout_region(w.cfg, regime);
    const int observed = N - popcount(holdout);
    REQUIRE(observed == w.cfg.cells());

    std::vector<harness::EvidenceBatch> ebs;
    for (auto p : {EvidencePolicy::adaptive, EvidencePolicy::random_fixed,
                   EvidencePolicy::block_fixed}) {
        regime.policy = p;
        ebs.push_back(harness::build_evidence(w.store, w.setup, regime, users, 13));
    }
    for (std::size_t b = 0; b < users.size(); ++b) {
        // the ratio-derived budget must exceed the observable pool here
        REQUIRE(model::budget_from_ratio(ebs[0].evidence[b].rho_tilde, N) >= observed);
        for (const auto& eb : ebs) {
            CHECK(eb.evidence[b].budget == observed);
            for (int i = 0; i < N; ++i)
                CHECK(static_cast<int>(eb.evidence[b].binary[static_cast<std::size_t>(i)]) ==
                      (holdout[static_cast<std::size_t>(i)] ? 0 : 1));
        }
        CHECK(same_bits(ebs[1].evidence[b].weights, ebs[0].evidence[b].weights));
        CHECK(same_bits(ebs[2].evidence[b].weights, ebs[0].evidence[b].weights));
    }

    // identical evidence and shared noise: completions and metrics coincide
    const auto d0 = harness::complete(w.store, w.setup, ebs[0], 13);
    const auto d1 = harness::complete(w.store, w.setup, ebs[1], 13);
    CHECK(same_bits(d0, d1));
    const auto m0 = harness::evaluate_completion(w.setup, ebs[0], d0);
    const auto m1 = harness::evaluate_completion(w.setup, ebs[1], d1);
    CHECK(m0.rmse == m1.rmse);
    CHECK(m0.mae == m1.mae);
}

TEST_CASE("comparison report") {
    SUBCASE("hand-built rows: means and relative deltas") {
        harness::CompareReport rep;
        rep.rows = {
            {core::Task::short_term, EvidencePolicy::adaptive, 1, 0.5, 0.25},
            {core::Task::short_term, EvidencePolicy::adaptive, 2, 0.4, 0.15},
            {core::Task::short_term, EvidencePolicy::random_fixed, 1, 1.0, 0.5},
            {core::Task::short_term, EvidencePolicy::random_fixed, 2, 0.6, 0.3},
        };
        CHECK(rep.mean_rmse(core::Task::short_term, EvidencePolicy::adaptive) ==
              doctest::Approx(0.45).epsilon(1e-12));
        CHECK(rep.mean_rmse(core::Task::short_term, EvidencePolicy::random_fixed) ==
              doctest::Approx(0.8).epsilon(1e-12));
        CHECK_THROWS_AS(rep.mean_rmse(core::Task::long_term, EvidencePolicy::adaptive),
                        std::invalid_argument);

        const std::string csv = rep.csv();
        CHECK(csv.find("task,policy,seed,rmse,mae\n") == 0);
        CHECK(csv.find("short,adaptive,1,0.5,0.25\n") != std::string::npos);
        CHECK(csv.find("short,adaptive,mean,0.45") != std::string::npos);
        CHECK(csv.find("short,random-fixed,mean,0.8") != std::string::npos);
        // delta = (0.8 - 0.45) / 0.8 = 0.4375; mae: (0.4 - 0.2) / 0.4 = 0.5
        CHECK(csv.find("short,delta-random-fixed,all,0.4375,0.5\n") != std::string::npos);
    }
    SUBCASE("self-comparison yields zero delta") {
        harness::CompareReport rep;
        rep.rows = {
            {core::Task::long_term, EvidencePolicy::adaptive, 1, 0.3, 0.1},
            {core::Task::long_term, EvidencePolicy::adaptive, 2, 0.7, 0.2},
            {core::Task::long_term, EvidencePolicy::block_fixed, 1, 0.3, 0.1},
            {core::Task::long_term, EvidencePolicy::block_fixed, 2, 0.7, 0.2},
        };
        const std::string csv = rep.csv();
        CHECK(csv.find("long,delta-block-fixed,all,0,0\n") != std::string::npos);
    }
    SUBCASE("live comparison is deterministic and complete") {
        const World w = make_world(4);
        const std::vector<int> users{0, 1, 2};
        const std::vector<core::Task> tasks{core::Task::short_term};
        const std::vector<EvidencePolicy> baselines{EvidencePolicy::random_fixed};
        const std::vector<std::uint64_t> seeds{5, 6};

        const auto rep = harness::compare_masking(w.store, w.setup, tasks, baselines, seeds,
                                                  users);
        REQUIRE(rep.rows.size() == 4);  // 1 task x 2 seeds x 2 policies
        for (const auto& row : rep.rows) {
            CHECK(row.rmse > 0.0);
            CHECK(row.mae > 0.0);
            CHECK(row.task == core::Task::short_term);
        }
        const auto rep2 = harness::compare_masking(w.store, w.setup, tasks, baselines, seeds,
                                                   users);
        CHECK(rep.csv() == rep2.csv());
        CHECK_THROWS_AS(harness::compare_masking(w.store, w.setup, {}, baselines, seeds, users),
                        std::invalid_argument);
    }
}

TEST_CASE("rank evaluation over completed tensors") {
    const World w = make_world(5);
    const std::vector<int> users{0, 1, 2, 3, 4};
    const auto regime =
        harness::regime_for(core::Task::cold_start, EvidencePolicy::adaptive, w.cfg);
    const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 9);
    const auto done = harness::complete(w.store, w.setup, eb, 9);

    const std::vector<int> cutoffs{1, 3, 5};
    const auto rep = harness::rank_evaluation(w.setup, eb, done, cutoffs, 3);
    REQUIRE(rep.cutoffs == cutoffs);
    REQUIRE(rep.app_recall.size() == cutoffs.size());
    for (std::size_t k = 0; k < cutoffs.size(); ++k) {
        for (double v : {rep.app_recall[k], rep.app_ndcg[k], rep.app_mrr[k], rep.cell_recall[k],
                         rep.cell_ndcg[k], rep.cell_mrr[k]}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        if (k > 0) {
            CHECK(rep.app_recall[k] >= rep.app_recall[k - 1]);
            CHECK(rep.cell_recall[k] >= rep.cell_recall[k - 1]);
        }
    }

    CHECK_THROWS_AS(harness::rank_evaluation(w.setup, eb, std::vector<double>(3, 0.0), cutoffs, 3),
                    std::invalid_argument);
}

TEST_CASE("mask export") {
    const World w = make_world(3);
    const std::vector<int> users{0, 2};
    const auto regime =
        harness::regime_for(core::Task::short_term, EvidencePolicy::adaptive, w.cfg);
    const auto eb = harness::build_evidence(w.store, w.setup, regime, users, 21);

    std::ostringstream out;
    harness::write_masks_csv(out, w.cfg, eb);
    std::istringstream in(out.str());
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "user,t,h,w,binary,weight");

    int rows = 0;
    while (std::getline(in, line)) {
        int user = 0, ts = 0, h = 0, wd = 0, bin = 0;
        double weight = 0.0;
        REQUIRE(std::sscanf(line.c_str(), "%d,%d,%d,%d,%d,%lg", &user, &ts, &h, &wd, &bin,
                            &weight) == 6);
        const std::size_t b = user == 0 ? 0 : 1;
        const auto i = static_cast<std::size_t>(ts) * w.cfg.cells() + h * w.cfg.W + wd;
        CHECK(bin == static_cast<int>(eb.evidence[b].binary[i]));
        CHECK(weight == doctest::Approx(eb.evidence[b].weights[i]).epsilon(1e-15));
        ++rows;
    }
    CHECK(rows == 2 * w.cfg.coords());
}

TEST_CASE("config file parsing") {
    SUBCASE("sections, comments, and types") {
        std::istringstream in(
            "# leading comment\n"
            "[run]\n"
            "dir = out/path\n"
            "\n"
            "; alt comment\n"
            "[train]\n"
            "epochs = 12\n"
            "learning_rate = 2.5e-3\n"
            "resume = yes\n"
            "seed = 18446744073709551615\n"
            "tags = a, b , c,,\n"
            "seeds = 3, 5, 8\n");
        const auto cf = conf::ConfigFile::parse(in);
        CHECK(cf.get_string("run", "dir") == "out/path");
        CHECK(cf.get_int("train", "epochs") == 12);
        CHECK(cf.get_double("train", "learning_rate") == doctest::Approx(2.5e-3));
        CHECK(cf.get_bool("train", "resume") == true);
        CHECK(cf.get_uint64("train", "seed") == 18446744073709551615ull);
        CHECK(cf.get_list("train", "tags") == std::vector<std::string>{"a", "b", "c"});
        CHECK(cf.get_uint64_list("train", "seeds") == std::vector<std::uint64_t>{3, 5, 8});
        CHECK(cf.has("run", "dir"));
        CHECK_FALSE(cf.has("run", "missing"));
        CHECK(cf.get_int("run", "absent", 7) == 7);
        CHECK(cf.get_string("none", "absent", "d") == "d");
    }
    SUBCASE("errors") {
        auto parse = [](const char* text) {
            std::istringstream in(text);
            return conf::ConfigFile::parse(in);
        };
        CHECK_THROWS_AS(parse("[run]\nx = 1\nx = 2\n"), conf::ConfigError);
        CHECK_THROWS_AS(parse("[run\nx = 1\n"), conf::ConfigError);
        CHECK_THROWS_AS(parse("[]\n"), conf::ConfigError);
        CHECK_THROWS_AS(parse("[run]\n= 3\n"), conf::ConfigError);
        CHECK_THROWS_AS(parse("[run]\nnoequals\n"), conf::ConfigError);

        std::istringstream in("[a]\nx = 3.5\nneg = -4\nb = maybe\n");
        const auto cf = conf::ConfigFile::parse(in);
        CHECK_THROWS_AS(cf.get_int("a", "x"), conf::ConfigError);
        CHECK_THROWS_AS(cf.get_uint64("a", "neg"), conf::ConfigError);
        CHECK_THROWS_AS(cf.get_bool("a", "b"), conf::ConfigError);
        CHECK_THROWS_AS(cf.get_string("a", "nope"), conf::ConfigError);
        CHECK_THROWS_AS(cf.require_known({"a.x", "a.b"}), conf::ConfigError);
        CHECK_NOTHROW(cf.require_known({"a.x", "a.neg", "a.b"}));

        CHECK_THROWS_AS(conf::ConfigFile::parse_file("/definitely/not/here.ini"),
                        conf::ConfigError);
    }
    SUBCASE("raw text is preserved byte for byte") {
        const std::string text = "[run]\ndir = x\n# note\n";
        std::istringstream in(text);
        CHECK(conf::ConfigFile::parse(in).raw_text() == text);
    }
}

TEST_CASE("pipeline settings") {
    SUBCASE("defaults") {
        std::istringstream in("");
        const auto s = harness::settings_from_config(conf::ConfigFile::parse(in));
        CHECK(s.run_dir == "run");
        CHECK(s.gen.users == 128);
        CHECK(s.tc.epochs == 30);
        CHECK(s.eval_seeds == std::vector<std::uint64_t>{0, 1, 2});
        CHECK(s.tasks.size() == 3);
        CHECK(s.baselines == std::vector<EvidencePolicy>{EvidencePolicy::random_fixed});
        CHECK(s.cutoffs == std::vector<int>{1, 3, 5});
        CHECK(s.eval_users == 16);
        CHECK(s.eval_user_ids(10) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
        const auto feat = harness::featurizer_for(s);
        CHECK(feat.locations == s.cfg.cells());
        CHECK(feat.apps == s.gen.apps);
        CHECK(feat.embed_dim == s.cfg.d);
    }
    SUBCASE("overrides and validation") {
        std::istringstream in(
            "[data]\nusers = 5\nseed = 2\n"
            "[model]\nhorizon = 8\n"
            "[train]\nepochs = 0\n"
            "[eval]\nusers = 0\ntasks = short, cold\nbaselines = block-fixed\nseeds = 4\n");
        const auto s = harness::settings_from_config(conf::ConfigFile::parse(in));
        CHECK(s.gen.users == 5);
        CHECK(s.cfg.horizon == 8);
        CHECK(s.tc.epochs == 0);
        CHECK(s.eval_users == 0);
        CHECK(s.eval_user_ids(5) == std::vector<int>{0, 1, 2, 3, 4});
        CHECK(s.tasks ==
              std::vector<core::Task>{core::Task::short_term, core::Task::cold_start});
        CHECK(s.baselines == std::vector<EvidencePolicy>{EvidencePolicy::block_fixed});
        CHECK(s.eval_seeds == std::vector<std::uint64_t>{4});
    }
    SUBCASE("rejections") {
        auto settings_of = [](const char* text) {
            std::istringstream in(text);
            return harness::settings_from_config(conf::ConfigFile::parse(in));
        };
        CHECK_THROWS(settings_of("[data]\nbogus = 1\n"));
        CHECK_THROWS(settings_of("[train]\nepochs = -1\n"));
        CHECK_THROWS(settings_of("[eval]\ntasks = weekly\n"));
        CHECK_THROWS(settings_of("[eval]\nbaselines = uniform\n"));
        CHECK_THROWS(settings_of("[eval]\nusers = -2\n"));
        CHECK_THROWS(settings_of("[eval]\nseeds = \n"));
        CHECK_THROWS(settings_of("[model]\nhorizon = 0\n"));
    }
}

TEST_CASE("pipeline run") {
    const std::string dir = temp_dir("pipe");
    const std::string cfg_path = dir + "/config.ini";
    {
        std::ofstream out(cfg_path);
        out << "[run]\ndir = " << dir << "/out\n"
            << "[data]\nusers = 5\nseed = 2\n"
            << "[model]\nhorizon = 6\n"
            << "[train]\nepochs = 1\nbatch_size = 5\nseed = 4\n"
            << "[eval]\nusers = 2\nseeds = 1\ntasks = short, cold\nrelevant_top = 2\n";
    }

    SUBCASE("bad inputs exit with the config code") {
        CHECK(harness::run_pipeline(dir + "/absent.ini") == 2);
        {
            std::ofstream out(dir + "/unknown.ini");
            out << "[data]\nusers = 3\nmystery = 1\n";
        }
        CHECK(harness::run_pipeline(dir + "/unknown.ini") == 2);
        {
            std::ofstream out(dir + "/badval.ini");
            out << "[train]\nepochs = soon\n";
        }
        CHECK(harness::run_pipeline(dir + "/badval.ini") == 2);
    }
    SUBCASE("cold evaluation without peers exits with the evaluation code") {
        const std::string lone = dir + "/lone.ini";
        {
            std::ofstream out(lone);
            out << "[run]\ndir = " << dir << "/lone_out\n"
                << "[data]\nusers = 1\n"
                << "[model]\nhorizon = 4\n"
                << "[train]\nepochs = 0\n"
                << "[eval]\nusers = 1\nseeds = 1\ntasks = cold\n";
        }
        CHECK(harness::run_pipeline(lone) == 4);
    }
    SUBCASE("end to end, twice, byte-identical artifacts") {
        REQUIRE(harness::run_pipeline(cfg_path) == 0);
        const std::string out = dir + "/out";
        for (const char* name : {"config.ini", "embeddings.csv", "train_metrics.csv",
                                 "checkpoint.stck", "compare.csv", "rank_metrics.csv"})
            CHECK(std::filesystem::exists(out + "/" + name));

        const std::string compare1 = slurp(out + "/compare.csv");
        const std::string ckpt1 = slurp(out + "/checkpoint.stck");
        const std::string metrics1 = slurp(out + "/train_metrics.csv");
        const std::string rank1 = slurp(out + "/rank_metrics.csv");
        CHECK(slurp(out + "/config.ini") == slurp(cfg_path));

        REQUIRE(harness::run_pipeline(cfg_path) == 0);
        CHECK(slurp(out + "/compare.csv") == compare1);
        CHECK(slurp(out + "/checkpoint.stck") == ckpt1);
        CHECK(slurp(out + "/train_metrics.csv") == metrics1);
        CHECK(slurp(out + "/rank_metrics.csv") == rank1);

        // the comparison covers every task x policy x seed combination
        std::istringstream rows(compare1);
        std::string line;
        int short_rows = 0, cold_rows = 0;
        while (std::getline(rows, line)) {
            if (line.rfind("short,", 0) == 0) ++short_rows;
            if (line.rfind("cold,", 0) == 0) ++cold_rows;
        }
        CHECK(short_rows == 5);  // 2 policies + 2 means + 1 delta
        CHECK(cold_rows == 5);
    }
}
