#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "stmask/params.hpp"
#include "stmask/tape.hpp"
#include "stmask/tensor.hpp"

namespace stmask::model {

/// Absent optional tape variable (e.g. no platform embedding available).
inline constexpr ad::Var kNoVar = -1;

/// Architecture and policy hyperparameters. Defaults are the desk-scale
/// configuration every experiment runs at.
struct ModelConfig {
    int C = 3, T = 32, H = 8, W = 8;

    int d = 32;          // user embedding width
    int d_tau = 32;      // task projection width
    int enc_hidden = 64;
    int expand_tokens = 8;

    int groups = 4;           // behavior groups K
    double group_temp = 1.0;  // assignment temperature
    int refine_steps = 3;
    double refine_eta = 0.1;
    double fisher_eps = 1e-6;
    double p_floor = 1e-8;
    double cold_epsilon = 0.3;

    int blocks = 4, model_dim = 64, heads = 4;
    int pt = 4, ph = 2, pw = 2;  // patch dims (t0, h0, w0)
    int ffn_mult = 2;
    double ln_eps = 1e-6;

    int horizon = 50;  // diffusion steps T_d
    double beta_start = 1e-4, beta_end = 0.02;

    int coords() const { return T * H * W; }                       // N
    int cells() const { return H * W; }
    int tokens() const { return (T / pt) * (H / ph) * (W / pw); }  // L
    int patch_len() const { return C * pt * ph * pw; }
    int ev_patch_len() const { return (C + 1) * pt * ph * pw; }
    int flat_len() const { return C * T * H * W; }

    void validate() const;  // throws std::invalid_argument
};

/// Reduced instance for finite-difference checks: tensor dims (2,8,4,4).
ModelConfig small_config();

/// Registers every learnable array with its initial values. Initialization
/// is keyed by (seed, array name) so registration order never matters.
void init_params(params::ParameterStore& store, const ModelConfig& cfg, std::uint64_t seed);

/// Binds all store entries as tape leaves for one forward/backward pass.
struct ModelVars {
    ModelVars(ad::Tape& tape, const params::ParameterStore& store);

    ad::Tape* tape;
    const params::ParameterStore* store;
    std::vector<ad::Var> vars;  // aligned with store entry order

    ad::Var operator[](const std::string& name) const;
    /// Gradient per store entry, zero-filled on an inference tape.
    std::vector<std::vector<double>> collect_grads() const;
};

// Shared index-map builders (gather sources are flat row-major buffers).
std::shared_ptr<const std::vector<int>> tile_rows_index(int rows, int cols, int copies);
std::shared_ptr<const std::vector<int>> patchify_index(const ModelConfig& cfg, int batch, int channels);
std::shared_ptr<const std::vector<int>> unpatchify_index(const ModelConfig& cfg, int batch);
std::shared_ptr<const std::vector<int>> temporal_field_index(const ModelConfig& cfg, int batch);
std::shared_ptr<const std::vector<int>> spatial_field_index(const ModelConfig& cfg, int batch);

/// 2-D sinusoidal codes used to initialize the location embedding table, one
/// row per grid cell, width d.
std::vector<double> sinusoidal_location_codes(const ModelConfig& cfg);
/// Sinusoidal diffusion-step features, one row per batch entry, width D.
std::vector<double> timestep_codes(const std::vector<int>& tsteps, int width, int horizon);

// ----- encoder chain; batched over users, tensors stacked B x flat_len -----

ad::Var encode_behavior(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg, ad::Var x_flat);

struct Disentangled {
    ad::Var f_short, f_long, f_pat;  // each B x d
};
Disentangled disentangle(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg, ad::Var h);

ad::Var task_project(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg,
                     const Disentangled& f, core::Task task);

struct Sensitivity {
    ad::Var diag_fisher, lambda;  // each B x d_tau
};
Sensitivity sensitivity(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg,
                        ad::Var f_task, core::Task task);

ad::Var refine_pattern(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg,
                       ad::Var f_pat, core::Task task);

// ----- mask policy -----

ad::Var assign_groups(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg, ad::Var z);
ad::Var batch_similarity(ad::Tape& t, const ModelVars& mv, ad::Var assignment, ad::Var z);
/// Rows (max_{j!=b} S_bj, ||z_b||_2, entropy(A_b)); B = 1 gets neighbor 0.
ad::Var reliability_context(ad::Tape& t, ad::Var similarity, ad::Var z, ad::Var assignment);
ad::Var scaling_factor(ad::Tape& t, const ModelVars& mv, ad::Var context);
/// rho_tilde = sigmoid(base_ratio_logit[task]) * gamma, B x 1.
ad::Var final_ratio(ad::Tape& t, const ModelVars& mv, ad::Var gamma, core::Task task);
ad::Var spatial_affinity(ad::Tape& t, const ModelVars& mv, ad::Var z, ad::Var lambda);
ad::Var mixing_coefficient(ad::Tape& t, const ModelVars& mv, core::Task task);

struct RelevanceParts {
    ad::Var scores;    // B x N, canonicalized to a distribution per row
    ad::Var raw;       // B x N, pre-clamp mixture beta*phi + (1-beta)*psi
    ad::Var beta;      // 1 x 1
    ad::Var temporal;  // 1 x T (nonnegative profile)
    ad::Var spatial;   // B x (H*W)
};
RelevanceParts relevance(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg,
                         ad::Var psi, core::Task task);

/// Mixture with the uniform field; preserves row sums.
ad::Var cold_adjust(ad::Tape& t, const ModelConfig& cfg, ad::Var scores, double epsilon);

int budget_from_ratio(double rho_tilde, int coords);

/// Gumbel-Top-k selection over one relevance row (length T*H*W, summing to 1).
/// Zero scores are never selected; deterministic mode drops the noise and
/// breaks ties by lowest linear index.
core::EvidenceMask sample_mask(const std::vector<double>& scores, int T, int H, int W,
                               int budget, core::Task task, std::uint64_t rng_key,
                               bool deterministic = false);

// ----- denoiser -----

struct DenoiserInputs {
    ad::Var x_in;       // B x flat_len, already masked by the caller
    ad::Var ev_planes;  // B x ((C+1)*T*H*W): masked clean evidence planes + mask plane
    ad::Var user_vec;   // B x D
    ad::Var task_vec;   // B x D
    std::vector<int> tsteps;  // per-user diffusion step, 1..horizon
    /// Optional token reordering (a permutation of 0..L-1) applied jointly to
    /// patches and positional rows and undone on output; empty = identity.
    /// Exists to make permutation-equivariance testable.
    std::vector<int> token_perm;
};

/// Pass kNoVar for h_u when no platform-level embedding exists.
ad::Var conditioning_user_vec(ad::Tape& t, const ModelVars& mv, ad::Var h_b, ad::Var h_u,
                              ad::Var f_task);
ad::Var conditioning_task_vec(ad::Tape& t, const ModelVars& mv, core::Task task);

/// Full DiT stack; returns the B x flat_len prediction of the clean tensor.
ad::Var denoise(ad::Tape& t, const ModelVars& mv, const ModelConfig& cfg,
                const DenoiserInputs& in);

} // namespace stmask::model
