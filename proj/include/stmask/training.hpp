#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stmask/model.hpp"
#include "stmask/params.hpp"
#include "stmask/tensor.hpp"

namespace stmask::train {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double lambda_con = 0.1;
    std::uint64_t seed = 0;
    int precision = 64;  // 32 rounds parameters through float32 after each update

    void validate() const;  // throws std::invalid_argument
};

/// One training example. user_embed is the profile embedding h_u (length d)
/// or empty when no platform-level embedding exists; a batch uses embeddings
/// only if every member carries one.
struct TrainExample {
    const core::BehaviorTensor* x0 = nullptr;
    std::vector<double> user_embed;
};

/// Stochastic draws for one mini-batch, frozen up front so a pass can be
/// replayed exactly. selected/budgets are recorded by the first forward and
/// reused verbatim when frozen is set (straight-through selection).
struct BatchPlan {
    std::vector<int> users;  // indices into the dataset
    core::Task task = core::Task::short_term;
    std::vector<int> tsteps;                 // per user, 1..horizon
    std::vector<double> noise;               // B x flat_len forward noise
    std::vector<std::uint64_t> gumbel_keys;  // per user mask-noise streams
    bool frozen = false;
    std::vector<std::vector<int>> selected;  // per user, chosen coordinates
    std::vector<int> budgets;                // per user
};

BatchPlan make_batch_plan(std::uint64_t seed, int epoch, int batch_index,
                          std::vector<int> users, const model::ModelConfig& cfg);

/// Nodes of one composite forward pass plus value-level batch statistics.
struct BatchGraph {
    ad::Var loss_total, loss_rec, loss_nce;  // scalars
    ad::Var scores;                          // B x N after any cold adjustment
    ad::Var rho, gamma;                      // B x 1
    double mean_rho = 0.0, mean_gamma = 0.0;
};

/// Mean squared error over all entries of two equal-shape arrays.
ad::Var mse_all(ad::Tape& t, ad::Var pred, ad::Var target);

/// Symmetric InfoNCE over same-row pairs: cosine similarities divided by
/// temperature (1x1, > 0), cross-entropy against the diagonal averaged over
/// rows and columns.
ad::Var infonce_loss(ad::Tape& t, ad::Var f_short, ad::Var f_long, ad::Var temperature);

/// Full joint objective for one batch: encoder chain, mask policy,
/// straight-through Gumbel selection, noised denoising, L_rec + lambda * L_nce.
/// Samples selections into plan when not frozen.
BatchGraph forward_batch(ad::Tape& t, const model::ModelVars& mv, const model::ModelConfig& cfg,
                         const std::vector<TrainExample>& data, BatchPlan& plan,
                         double lambda_con);

struct EpochMetrics {
    int epoch = 0;
    double loss_total = 0.0, loss_rec = 0.0, loss_infonce = 0.0;
    double mean_rho = 0.0, mean_gamma = 0.0;
};

/// Runs the joint loop for config.epochs epochs, updating store in place.
/// Throws std::runtime_error naming the offending array if the loss or any
/// parameter goes non-finite.
std::vector<EpochMetrics> train(params::ParameterStore& store, const model::ModelConfig& cfg,
                                const std::vector<TrainExample>& data, const TrainConfig& config);

// CSV header: epoch,loss_total,loss_rec,loss_infonce,mean_rho,mean_gamma
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& metrics);

// ----- finite-difference verification -----

/// Builds a scalar loss node from the store binding of the current tape.
using LossFn = std::function<ad::Var(ad::Tape&, const model::ModelVars&)>;

/// Composite-loss builder over fixed plans (one per task keeps every
/// task-conditional parameter on some path). Selections freeze on first use.
LossFn composite_loss(const model::ModelConfig& cfg, const std::vector<TrainExample>& data,
                      std::vector<BatchPlan> plans, double lambda_con);

struct GradCheckEntry {
    std::string array;
    int index = 0;
    double analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct GradCheckReport {
    bool ok = false;
    int checked = 0;
    double max_rel_err = 0.0;
    std::string worst_array;
    int worst_index = 0;
    std::vector<GradCheckEntry> failures;  // entries above tolerance
};

/// Compares analytic gradients against a five-point central-difference
/// stencil entry by entry (at most max_entries per array, evenly strided).
/// Relative error is |a - f| / max(|a|, |f|, 1e-4); the denominator floor
/// keeps entries below the stencil's resolution from reading as pure noise.
GradCheckReport grad_check(const params::ParameterStore& store, const LossFn& loss,
                           double tolerance, int max_entries = 64);

} // namespace stmask::train
