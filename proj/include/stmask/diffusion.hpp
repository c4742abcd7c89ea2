#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "stmask/model.hpp"
#include "stmask/params.hpp"
#include "stmask/tensor.hpp"

namespace stmask::diff {

/// Variance-preserving noise schedule with linearly spaced beta.
struct Schedule {
    int horizon = 0;
    std::vector<double> beta;       // index t-1 holds beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // running product of alpha
};

Schedule make_schedule(int horizon, double beta_start, double beta_end);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, elementwise.
std::vector<double> forward_sample(const std::vector<double>& x0, int t,
                                   const std::vector<double>& noise, const Schedule& sched);
core::BehaviorTensor forward_sample(const core::BehaviorTensor& x0, int t,
                                    const core::BehaviorTensor& noise, const Schedule& sched);

/// Token matrix L x patch_len in the denoiser's patch order (pre-projection).
std::vector<double> patchify(const core::BehaviorTensor& x, const model::ModelConfig& cfg);
core::BehaviorTensor unpatchify(const std::vector<double>& tokens, const model::ModelConfig& cfg);

/// Everything reverse sampling needs for a batch of independent users.
/// Conditioning vectors come pre-projected (see model::conditioning_user_vec);
/// the denoiser adds user and task parts, so the global vector is their exact sum.
struct ReversePlan {
    int batch = 0;
    std::vector<double> x_evidence;  // batch x flat_len, clean values, zero off-support
    std::vector<std::uint8_t> mask;  // batch x coords binary evidence map
    std::vector<double> weights;     // batch x coords importance-weighted mask
    std::vector<double> user_vec;    // batch x model_dim
    std::vector<double> task_vec;    // batch x model_dim
    /// Stable per-row noise identities; empty means 0..batch-1. Rows with the
    /// same identity and seed follow the same noise trajectory in any batch.
    std::vector<std::uint64_t> noise_ids;
};

/// Called after every reverse step with the clamped state (step = t-1 reached).
using TrajectorySink = std::function<void(int step, const std::vector<double>& state)>;

/// Evidence-clamped ancestral sampling; returns batch x flat_len clean tensors.
/// Noise streams are keyed by (seed, user, step) so batch composition never
/// changes a user's trajectory.
std::vector<double> reverse_sample(const params::ParameterStore& store,
                                   const model::ModelConfig& cfg, const Schedule& sched,
                                   const ReversePlan& plan, std::uint64_t seed,
                                   const TrajectorySink* sink = nullptr);

} // namespace stmask::diff
