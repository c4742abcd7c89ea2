#pragma once

#include <cstdint>
#include <vector>

#include "stmask/tensor.hpp"

namespace stmask::synth {

// Channel layout of generated behavior tensors.
constexpr int kAppChannel = 0;
constexpr int kTrafficChannel = 1;
constexpr int kOccupancyChannel = 2;

struct GenConfig {
    int users = 128;
    int C = 3, T = 32, H = 8, W = 8;
    int slots_per_day = 8;
    int apps = 16;
    int archetypes = 4;
    std::uint64_t seed = 0;
    double noise = 0.02;  // background amplitude on all channels

    int days() const { return T / slots_per_day; }
    int cells() const { return H * W; }
    void validate() const;
};

/// Two-anchor daily routine. Slot indices are slots-of-day in [0, slots_per_day).
/// Sampled per user from the archetype template plus per-user jitter.
struct SyntheticUserProfile {
    std::uint32_t user_index = 0;
    std::uint64_t seed = 0;  // derived: dataset seed XOR user index
    int archetype = 0;
    int home_cell = 0;
    int work_cell = 0;
    int commute_out_slot = 2;
    int commute_back_slot = 6;
    int work_start = 3;
    int work_len = 3;
    std::vector<double> app_prefs;  // length apps, sums to 1
    double regularity = 0.8;        // [0,1]; 1 = never deviates from routine
};

struct UserRecord {
    SyntheticUserProfile profile;
    core::BehaviorTensor tensor;
    core::EventHistory events;
};

struct Dataset {
    GenConfig cfg;
    std::vector<UserRecord> users;
};

/// Grid cell that serves as the fixed spatial slot of an app's activity
/// in the app channel; ranking evaluation reads app scores from these cells.
int app_proxy_cell(const GenConfig& cfg, int app);

SyntheticUserProfile make_profile(const GenConfig& cfg, std::uint32_t user_index);

/// Deterministic in (cfg.seed, profile): repeated calls are bit-identical.
/// All values lie in [0,1] and are exactly float32-representable.
core::BehaviorTensor synth_tensor(const GenConfig& cfg, const SyntheticUserProfile& p);

core::EventHistory synth_events(const GenConfig& cfg, const SyntheticUserProfile& p);

Dataset generate_dataset(const GenConfig& cfg);

/// Occupied cell per slot from the occupancy channel (argmax, lowest index wins).
std::vector<int> occupied_cells(const core::BehaviorTensor& x);

/// Shannon entropy (nats) of the empirical distribution of occupied cells.
double location_entropy(const core::BehaviorTensor& x);

} // namespace stmask::synth
