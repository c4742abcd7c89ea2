#include "stmask/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "stmask/rng.hpp"

namespace stmask::synth {

namespace {

struct ArchetypeTemplate {
    int home_center, work_center;       // linear cells on the 8x8 reference grid
    int commute_out, commute_back;
    int work_start, work_len;
    int pref_group;                     // favored block of app ids
    double base_regularity;
};

// Four routine families: distinct anchor regions, shifted schedules,
// distinct favored app groups. Scaled to the configured grid below.
const ArchetypeTemplate kArchetypes[4] = {
    {0 * 8 + 1, 5 * 8 + 6, 2, 6, 3, 3, 0, 0.85},
    {1 * 8 + 6, 6 * 8 + 1, 2, 6, 3, 3, 1, 0.75},
    {6 * 8 + 6, 1 * 8 + 2, 3, 7, 4, 3, 2, 0.80},
    {7 * 8 + 1, 2 * 8 + 5, 3, 7, 4, 3, 3, 0.70},
};

int clamp_int(int v, int lo, int hi) { return std::max(lo, std::min(hi, v)); }

int scale_cell(const GenConfig& cfg, int ref_cell) {
    const int r = (ref_cell / 8) * cfg.H / 8;
    const int c = (ref_cell % 8) * cfg.W / 8;
    return clamp_int(r, 0, cfg.H - 1) * cfg.W + clamp_int(c, 0, cfg.W - 1);
}

int jitter_cell(const GenConfig& cfg, int cell, rng::Stream& s) {
    const int r = clamp_int(cell / cfg.W + static_cast<int>(s.below(3)) - 1, 0, cfg.H - 1);
    const int c = clamp_int(cell % cfg.W + static_cast<int>(s.below(3)) - 1, 0, cfg.W - 1);
    return r * cfg.W + c;
}

std::vector<int> path_cells(const GenConfig& cfg, int from, int to) {
    // straight-line walk between anchors, one cell per step
    int r0 = from / cfg.W, c0 = from % cfg.W;
    const int r1 = to / cfg.W, c1 = to % cfg.W;
    std::vector<int> path{from};
    while (r0 != r1 || c0 != c1) {
        if (std::abs(r1 - r0) >= std::abs(c1 - c0)) r0 += (r1 > r0) ? 1 : -1;
        else c0 += (c1 > c0) ? 1 : -1;
        path.push_back(r0 * cfg.W + c0);
    }
    return path;
}

enum class SlotState { sleep, home_idle, commute, work, evening };

SlotState slot_state(const SyntheticUserProfile& p, int slot) {
    if (slot < 2) return SlotState::sleep;
    if (slot == p.commute_out_slot || slot == p.commute_back_slot) return SlotState::commute;
    if (slot >= p.work_start && slot < p.work_start + p.work_len) return SlotState::work;
    if (slot > p.commute_back_slot) return SlotState::evening;
    return SlotState::home_idle;
}

double state_activity(SlotState s) {
    switch (s) {
        case SlotState::sleep: return 0.05;
        case SlotState::home_idle: return 0.45;
        case SlotState::commute: return 0.55;
        case SlotState::work: return 0.9;
        case SlotState::evening: return 0.75;
    }
    return 0.0;
}

float q(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

} // namespace

void GenConfig::validate() const {
    if (users < 1) throw std::invalid_argument("users must be >= 1");
    if (C != 3) throw std::invalid_argument("generator expects 3 channels");
    if (T < 1 || H < 1 || W < 1) throw std::invalid_argument("dims must be positive");
    if (slots_per_day < 8 || T % slots_per_day != 0)
        throw std::invalid_argument("T must be a multiple of slots_per_day (>= 8)");
    if (apps < 1 || apps > H * W) throw std::invalid_argument("apps must fit the grid");
    if (archetypes < 1 || archetypes > 4) throw std::invalid_argument("archetypes in [1,4]");
    if (noise < 0.0 || noise > 0.2) throw std::invalid_argument("noise in [0, 0.2]");
}

int app_proxy_cell(const GenConfig& cfg, int app) {
    // apps spread evenly over the grid in row-major order
    return app * (cfg.cells() / cfg.apps) + (cfg.cells() / cfg.apps) / 2;
}

SyntheticUserProfile make_profile(const GenConfig& cfg, std::uint32_t user_index) {
    const ArchetypeTemplate& a = kArchetypes[user_index % cfg.archetypes];
    SyntheticUserProfile p;
    p.user_index = user_index;
    p.seed = cfg.seed ^ user_index;
    p.archetype = static_cast<int>(user_index % cfg.archetypes);

    rng::Stream s(rng::derive(p.seed, rng::Tag::data_gen, 0xA11C));
    p.home_cell = jitter_cell(cfg, scale_cell(cfg, a.home_center), s);
    p.work_cell = jitter_cell(cfg, scale_cell(cfg, a.work_center), s);
    if (p.work_cell == p.home_cell) p.work_cell = (p.home_cell + 1) % cfg.cells();
    p.commute_out_slot = a.commute_out;
    p.commute_back_slot = a.commute_back;
    p.work_start = a.work_start;
    p.work_len = a.work_len;
    p.regularity = std::min(1.0, std::max(0.0, a.base_regularity + 0.2 * (s.uniform() - 0.5)));

    p.app_prefs.assign(cfg.apps, 0.0);
    const int group = cfg.apps / 4;
    double total = 0.0;
    for (int i = 0; i < cfg.apps; ++i) {
        const bool favored = group > 0 && i / group == a.pref_group;
        p.app_prefs[i] = (favored ? 4.0 : 0.5) * (0.5 + s.uniform());
        total += p.app_prefs[i];
    }
    for (double& v : p.app_prefs) v /= total;
    return p;
}

core::BehaviorTensor synth_tensor(const GenConfig& cfg, const SyntheticUserProfile& p) {
    core::BehaviorTensor x(cfg.C, cfg.T, cfg.H, cfg.W);
    rng::Stream s(rng::derive(p.seed, rng::Tag::data_gen, 0x7E45));
    const auto path = path_cells(cfg, p.home_cell, p.work_cell);

    for (int t = 0; t < cfg.T; ++t) {
        const int slot = t % cfg.slots_per_day;
        const SlotState state = slot_state(p, slot);
        const double act = state_activity(state);

        int cell;
        switch (state) {
            case SlotState::commute: cell = path[path.size() / 2]; break;
            case SlotState::work: cell = p.work_cell; break;
            default: cell = p.home_cell; break;
        }
        // routine deviation: wander to a random cell
        if (state != SlotState::commute && s.uniform() < (1.0 - p.regularity) * 0.8)
            cell = static_cast<int>(s.below(static_cast<std::uint64_t>(cfg.cells())));

        // occupancy: strong peak at the occupied cell
        x.at(kOccupancyChannel, t, cell / cfg.W, cell % cfg.W) = 0.7 + 0.3 * s.uniform();

        // traffic: elevated along the whole path during commute slots,
        // light signal at the occupied cell otherwise
        if (state == SlotState::commute) {
            for (int pc : path)
                x.at(kTrafficChannel, t, pc / cfg.W, pc % cfg.W) = 0.55 + 0.35 * s.uniform();
        } else {
            x.at(kTrafficChannel, t, cell / cfg.W, cell % cfg.W) = act * (0.25 + 0.15 * s.uniform());
        }

        // app activity: per-app usage at fixed proxy cells plus presence glow
        for (int a = 0; a < cfg.apps; ++a) {
            const double usage = p.app_prefs[a] * act * (0.8 + 0.4 * s.uniform());
            if (usage < 0.01) continue;
            const int pc = app_proxy_cell(cfg, a);
            x.at(kAppChannel, t, pc / cfg.W, pc % cfg.W) += 2.2 * usage;
        }
        x.at(kAppChannel, t, cell / cfg.W, cell % cfg.W) += 0.3 * act;
    }

    // background noise, then clamp and quantize to float32 grid
    for (double& v : x.data) {
        if (cfg.noise > 0.0) v += cfg.noise * s.uniform();
        v = q(v);
    }
    return x;
}

core::EventHistory synth_events(const GenConfig& cfg, const SyntheticUserProfile& p) {
    core::EventHistory ev;
    ev.user_id = p.user_index;
    rng::Stream s(rng::derive(p.seed, rng::Tag::data_gen, 0xE7E7));
    const auto path = path_cells(cfg, p.home_cell, p.work_cell);

    for (int t = 0; t < cfg.T; ++t) {
        const int slot = t % cfg.slots_per_day;
        const SlotState state = slot_state(p, slot);
        const double act = state_activity(state);
        int cell;
        switch (state) {
            case SlotState::commute: cell = path[path.size() / 2]; break;
            case SlotState::work: cell = p.work_cell; break;
            default: cell = p.home_cell; break;
        }
        if (state != SlotState::commute && s.uniform() < (1.0 - p.regularity) * 0.8)
            cell = static_cast<int>(s.below(static_cast<std::uint64_t>(cfg.cells())));

        int count = act > 0.6 ? 2 : (act > 0.3 ? 1 : 0);
        if (count == 0 && s.uniform() < act) count = 1;
        for (int e = 0; e < count; ++e) {
            double u = s.uniform();
            int app = cfg.apps - 1;
            double acc = 0.0;
            for (int a = 0; a < cfg.apps; ++a) {
                acc += p.app_prefs[a];
                if (u <= acc) { app = a; break; }
            }
            ev.append(static_cast<std::uint32_t>(app), static_cast<std::uint32_t>(cell),
                      static_cast<std::int64_t>(t));
        }
    }
    return ev;
}

Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    ds.users.reserve(static_cast<std::size_t>(cfg.users));
    for (int u = 0; u < cfg.users; ++u) {
        UserRecord rec;
        rec.profile = make_profile(cfg, static_cast<std::uint32_t>(u));
        rec.tensor = synth_tensor(cfg, rec.profile);
        rec.events = synth_events(cfg, rec.profile);
        bool all_zero = true;
        for (double v : rec.tensor.data)
            if (v != 0.0) { all_zero = false; break; }
        if (all_zero) throw std::logic_error("generated an all-zero tensor");
        ds.users.push_back(std::move(rec));
    }
    return ds;
}

std::vector<int> occupied_cells(const core::BehaviorTensor& x) {
    std::vector<int> cells(static_cast<std::size_t>(x.T));
    for (int t = 0; t < x.T; ++t) {
        int best = 0;
        double best_v = -1.0;
        for (int h = 0; h < x.H; ++h)
            for (int w = 0; w < x.W; ++w) {
                const double v = x.at(kOccupancyChannel, t, h, w);
                if (v > best_v) { best_v = v; best = h * x.W + w; }
            }
        cells[static_cast<std::size_t>(t)] = best;
    }
    return cells;
}

double location_entropy(const core::BehaviorTensor& x) {
    const auto cells = occupied_cells(x);
    std::vector<int> hist(static_cast<std::size_t>(x.H) * x.W, 0);
    for (int c : cells) hist[static_cast<std::size_t>(c)]++;
    double ent = 0.0;
    for (int n : hist) {
        if (n == 0) continue;
        const double p = static_cast<double>(n) / static_cast<double>(cells.size());
        ent -= p * std::log(p);
    }
    return ent;
}

} // namespace stmask::synth
