#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "stmask/profile.hpp"
#include "stmask/rng.hpp"
#include "stmask/synthetic.hpp"
#include "stmask/tensor.hpp"

using namespace stmask;
using core::EventHistory;
using prof::BehaviorSummary;
using prof::FeaturizerConfig;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

EventHistory resample(const EventHistory& h, std::size_t n, std::uint64_t key) {
    EventHistory r;
    r.user_id = h.user_id;
    rng::Stream s(key);
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(s.below(h.size()));
        r.append(h.app_id[k], h.location_id[k], h.timestamp[k]);
    }
    return r;
}

EventHistory concat(const EventHistory& a, const EventHistory& b) {
    EventHistory u = a;
    for (std::size_t i = 0; i < b.size(); ++i)
        u.append(b.app_id[i], b.location_id[i], b.timestamp[i]);
    return u;
}

} // namespace

TEST_CASE("config validation") {
    FeaturizerConfig fc;
    CHECK_NOTHROW(fc.validate());
    FeaturizerConfig bad = fc;
    bad.apps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = fc;
    bad.time_bins = 16;  // exceeds slots_per_day
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = fc;
    bad.theta_corr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("summarize oracle cases") {
    FeaturizerConfig fc;

    SUBCASE("single event") {
        EventHistory h;
        h.append(3, 5, 10);  // slot 2, day 1
        BehaviorSummary s = prof::summarize(h, fc);
        for (int i = 0; i < 8; ++i)
            CHECK(s.time_hist[static_cast<std::size_t>(i)] == (i == 2 ? 1.0 : 0.0));
        double total = 0.0;
        for (double v : s.cooccur) total += v;
        CHECK(total == 1.0);
        CHECK(s.cooccur[5 * 16 + 3] == 1.0);
        CHECK(s.cooccur_rows[5 * 16 + 3] == 1.0);
        CHECK(s.session_regularity == 1.0);
    }

    SUBCASE("one event per day rotating through every bin") {
        EventHistory h;
        for (int i = 0; i < 8; ++i)
            h.append(0, 0, static_cast<std::int64_t>(i) * 8 + i);  // day i, slot i
        BehaviorSummary s = prof::summarize(h, fc);
        for (double v : s.time_hist) CHECK(v == 0.125);
        CHECK(s.session_regularity == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("identical daily start across seven days") {
        EventHistory h;
        for (int day = 0; day < 7; ++day) {
            h.append(1, 2, day * 8 + 3);
            h.append(2, 2, day * 8 + 5);  // later events do not move the start
        }
        BehaviorSummary s = prof::summarize(h, fc);
        CHECK(s.session_regularity == 1.0);
    }

    SUBCASE("empty history gives the all-zero summary") {
        EventHistory h;
        BehaviorSummary s = prof::summarize(h, fc);
        CHECK(s.session_regularity == 0.0);
        for (double v : s.time_hist) CHECK(v == 0.0);
        for (double v : s.cooccur) CHECK(v == 0.0);
        for (double v : s.cooccur_rows) CHECK(v == 0.0);
    }

    SUBCASE("time histogram sums to one with events present") {
        synth::GenConfig gen;
        gen.users = 2;
        gen.seed = 3;
        synth::Dataset ds = synth::generate_dataset(gen);
        BehaviorSummary s = prof::summarize(ds.users[0].events, fc);
        double total = 0.0;
        for (double v : s.time_hist) total += v;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(s.session_regularity >= 0.0);
        CHECK(s.session_regularity <= 1.0);
    }

    SUBCASE("order permutation leaves the summary unchanged") {
        synth::GenConfig gen;
        gen.users = 2;
        gen.seed = 4;
        synth::Dataset ds = synth::generate_dataset(gen);
        const EventHistory& h = ds.users[1].events;
        EventHistory rev;
        rev.user_id = h.user_id;
        for (std::size_t i = h.size(); i > 0; --i)
            rev.append(h.app_id[i - 1], h.location_id[i - 1], h.timestamp[i - 1]);
        BehaviorSummary a = prof::summarize(h, fc);
        BehaviorSummary b = prof::summarize(rev, fc);
        CHECK(a.time_hist == b.time_hist);
        CHECK(a.cooccur == b.cooccur);
        CHECK(a.cooccur_rows == b.cooccur_rows);
        CHECK(a.session_regularity == b.session_regularity);
    }

    SUBCASE("rejects out-of-vocabulary ids") {
        EventHistory h;
        h.append(16, 0, 0);
        CHECK_THROWS_AS(prof::summarize(h, fc), std::invalid_argument);
        EventHistory h2;
        h2.append(0, 64, 0);
        CHECK_THROWS_AS(prof::summarize(h2, fc), std::invalid_argument);
    }
}

TEST_CASE("profile embedding") {
    FeaturizerConfig fc;
    fc.embed_dim = 32;

    SUBCASE("identical summaries give identical unit embeddings") {
        EventHistory h;
        for (int day = 0; day < 4; ++day) {
            h.append(1, 10, day * 8 + 2);
            h.append(5, 12, day * 8 + 4);
        }
        BehaviorSummary s = prof::summarize(h, fc);
        prof::ProfileEmbedding a = prof::embed(s, fc);
        prof::ProfileEmbedding b = prof::embed(prof::summarize(h, fc), fc);
        CHECK(a.vec == b.vec);
        CHECK(a.provenance == prof::Provenance::deterministic);
        CHECK(norm2(a.vec) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(static_cast<int>(a.vec.size()) == fc.embed_dim);
    }

    SUBCASE("disjoint app sets score strictly below identical summaries") {
        EventHistory ha, hb;
        for (int day = 0; day < 4; ++day) {
            ha.append(0, 20, day * 8 + 2);
            ha.append(1, 21, day * 8 + 5);
            hb.append(8, 20, day * 8 + 2);
            hb.append(9, 21, day * 8 + 5);
        }
        prof::ProfileEmbedding ea = prof::embed(prof::summarize(ha, fc), fc);
        prof::ProfileEmbedding eb = prof::embed(prof::summarize(hb, fc), fc);
        prof::ProfileEmbedding ea2 = prof::embed(prof::summarize(ha, fc), fc);
        const double same = dot(ea.vec, ea2.vec);
        const double cross = dot(ea.vec, eb.vec);
        CHECK(same == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(cross < same);
    }

    SUBCASE("all-zero summary maps to the unknown-user basis vector") {
        prof::ProfileEmbedding e = prof::embed(prof::summarize(EventHistory{}, fc), fc);
        CHECK(e.vec[0] == 1.0);
        for (std::size_t i = 1; i < e.vec.size(); ++i) CHECK(e.vec[i] == 0.0);
    }

    SUBCASE("projection respects the Frobenius Lipschitz bound") {
        const double pnorm = prof::projection_frobenius_norm(fc);
        CHECK(pnorm > 0.0);
        rng::Stream s(99);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<double> f1(static_cast<std::size_t>(fc.feature_len()));
            std::vector<double> f2(f1.size());
            for (double& v : f1) v = s.uniform();
            for (double& v : f2) v = s.uniform();
            std::vector<double> p1 = prof::project(f1, fc);
            std::vector<double> p2 = prof::project(f2, fc);
            std::vector<double> dp(p1.size()), df(f1.size());
            for (std::size_t i = 0; i < p1.size(); ++i) dp[i] = p1[i] - p2[i];
            for (std::size_t i = 0; i < f1.size(); ++i) df[i] = f1[i] - f2[i];
            CHECK(norm2(dp) <= pnorm * norm2(df) * (1.0 + 1e-10) + 1e-12);
        }
    }
}

TEST_CASE("correlation gap") {
    FeaturizerConfig fc;

    SUBCASE("identical histories have exactly zero gap") {
        synth::GenConfig gen;
        gen.users = 1;
        gen.seed = 6;
        synth::Dataset ds = synth::generate_dataset(gen);
        CHECK(prof::correlation_gap(ds.users[0].events, ds.users[0].events, fc) == 0.0);
    }

    SUBCASE("an unobserved pair pushes the gap above zero") {
        EventHistory h, aug;
        h.append(0, 0, 0);
        h.append(0, 0, 8);
        aug.append(1, 0, 0);  // pair (app 1, loc 0) never observed
        CHECK(prof::correlation_gap(h, aug, fc) > 0.0);
    }

    SUBCASE("ten-times resampling stays under 0.1 in at least 95 of 100 seeds") {
        synth::GenConfig gen;
        gen.users = 2;
        gen.seed = 5;
        gen.T = 320;  // forty days of a fully regular routine
        for (int u = 0; u < 2; ++u) {
            synth::SyntheticUserProfile p = synth::make_profile(gen, u);
            p.regularity = 1.0;
            EventHistory h = synth::synth_events(gen, p);
            int below = 0;
            for (std::uint64_t seed = 0; seed < 100; ++seed) {
                EventHistory r = resample(h, 10 * h.size(),
                                          rng::derive(seed, rng::Tag::augment,
                                                      static_cast<std::uint64_t>(u)));
                if (prof::correlation_gap(h, r, fc) < 0.1) ++below;
            }
            CHECK(below >= 95);
        }
    }
}

TEST_CASE("augmentation") {
    FeaturizerConfig fc;
    synth::GenConfig gen;
    gen.users = 2;
    gen.seed = 8;
    gen.T = 320;
    synth::SyntheticUserProfile p = synth::make_profile(gen, 0);
    p.regularity = 1.0;
    EventHistory h = synth::synth_events(gen, p);

    SUBCASE("zero requested events give an empty augmentation") {
        EventHistory a = prof::augment(h, 0, 1, fc);
        CHECK(a.size() == 0);
        CHECK(a.user_id == h.user_id);
    }

    SUBCASE("empty source is rejected") {
        CHECK_THROWS_AS(prof::augment(EventHistory{}, 4, 1, fc), std::invalid_argument);
    }

    SUBCASE("single-event source yields replicas") {
        EventHistory one;
        one.user_id = 9;
        one.append(4, 7, 11);
        EventHistory a = prof::augment(one, 5, 2, fc);
        REQUIRE(a.size() == 5);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a.app_id[i] == 4);
            CHECK(a.location_id[i] == 7);
            CHECK(a.timestamp[i] == 11);
        }
    }

    SUBCASE("every emitted pair was observed in the source") {
        BehaviorSummary src = prof::summarize(h, fc);
        EventHistory a = prof::augment(h, static_cast<int>(4 * h.size()), 3, fc);
        REQUIRE(a.size() == 4 * h.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto cell = static_cast<std::size_t>(a.location_id[i]) * fc.apps + a.app_id[i];
            CHECK(src.cooccur[cell] > 0.0);
        }
    }

    SUBCASE("output satisfies the acceptance threshold at healthy sizes") {
        EventHistory a = prof::augment(h, static_cast<int>(10 * h.size()), 4, fc);
        CHECK(prof::correlation_gap(h, a, fc) <= fc.theta_corr);
    }

    SUBCASE("union with the source never widens the gap") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            EventHistory a = prof::augment(h, static_cast<int>(h.size()), seed, fc);
            const double alone = prof::correlation_gap(h, a, fc);
            const double joint = prof::correlation_gap(h, concat(h, a), fc);
            CHECK(joint <= alone + 1e-12);
        }
    }

    SUBCASE("deterministic in the seed") {
        EventHistory a = prof::augment(h, 50, 7, fc);
        EventHistory b = prof::augment(h, 50, 7, fc);
        CHECK(a.app_id == b.app_id);
        CHECK(a.location_id == b.location_id);
        CHECK(a.timestamp == b.timestamp);
    }
}

TEST_CASE("embedding csv round trip") {
    FeaturizerConfig fc;
    std::vector<prof::UserEmbedding> users;
    for (std::uint32_t u = 0; u < 3; ++u) {
        EventHistory h;
        h.user_id = u;
        for (int day = 0; day < 3; ++day)
            h.append((u + 1) % 16, (u * 5) % 64, day * 8 + 2 + static_cast<int>(u));
        users.push_back({u, prof::embed(prof::summarize(h, fc), fc)});
    }

    std::stringstream ss;
    prof::write_embeddings_csv(ss, users);
    std::string header;
    std::getline(ss, header);
    CHECK(header.rfind("user_id,e0,", 0) == 0);
    ss.seekg(0);
    std::vector<prof::UserEmbedding> back = prof::read_embeddings_csv(ss);
    REQUIRE(back.size() == users.size());
    for (std::size_t i = 0; i < users.size(); ++i) {
        CHECK(back[i].user_id == users[i].user_id);
        CHECK(back[i].embedding.provenance == prof::Provenance::external);
        REQUIRE(back[i].embedding.vec.size() == users[i].embedding.vec.size());
        for (std::size_t k = 0; k < users[i].embedding.vec.size(); ++k)
            CHECK(back[i].embedding.vec[k] == users[i].embedding.vec[k]);
    }

    std::stringstream bad("not_a_header\n1,0.5\n");
    CHECK_THROWS_AS(prof::read_embeddings_csv(bad), core::FormatError);
}
