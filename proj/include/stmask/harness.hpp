#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "stmask/config.hpp"
#include "stmask/model.hpp"
#include "stmask/params.hpp"
#include "stmask/profile.hpp"
#include "stmask/synthetic.hpp"
#include "stmask/tensor.hpp"
#include "stmask/training.hpp"

namespace stmask::harness {

enum class EvidencePolicy { adaptive, random_fixed, block_fixed };

std::string policy_name(EvidencePolicy p);
EvidencePolicy policy_from_name(const std::string& name);

/// One evaluation condition: which task, which evidence-selection strategy,
/// and how many trailing time slots are hidden from the model. Cold start
/// hides the whole tensor and draws evidence from a peer user instead.
struct EvalRegime {
    core::Task task = core::Task::short_term;
    EvidencePolicy policy = EvidencePolicy::adaptive;
    int holdout = 4;

    void validate(const model::ModelConfig& cfg) const;
};

/// Canonical holdouts: short 4 slots, long 16 slots, cold the whole horizon.
EvalRegime regime_for(core::Task task, EvidencePolicy policy, const model::ModelConfig& cfg);

/// Length-N byte map over (t,h,w); 1 marks a held-out coordinate.
std::vector<std::uint8_t> holdout_region(const model::ModelConfig& cfg, const EvalRegime& regime);

/// RMSE and MAE over the held-out coordinates only, across all channels.
/// Throws if the region is empty.
std::pair<double, double> rmse_mae(const core::BehaviorTensor& pred,
                                   const core::BehaviorTensor& truth,
                                   const std::vector<std::uint8_t>& holdout);
std::pair<double, double> rmse_mae_flat(const std::vector<double>& pred,
                                        const std::vector<double>& truth,
                                        const model::ModelConfig& cfg,
                                        const std::vector<std::uint8_t>& holdout);

/// Zeroes held-out coordinates and renormalizes the rest to sum 1.
/// Throws if nothing observable carries positive mass.
std::vector<double> restrict_scores(const std::vector<double>& scores,
                                    const std::vector<std::uint8_t>& holdout);

struct RankMetrics {
    std::vector<int> cutoffs;
    std::vector<double> recall, ndcg, mrr;  // aligned with cutoffs
};

/// Binary-gain ranking metrics at each cutoff; ties rank by lower index.
/// Throws if the relevant set is empty.
RankMetrics rank_metrics(const std::vector<double>& scores, const std::vector<int>& relevant,
                         const std::vector<int>& cutoffs);

/// Item-scoring proxies for cold-start ranking: per-app engagement from the
/// app channel at each app's proxy cell, per-cell engagement from the
/// occupancy channel, both summed over held-out slots. Isolated here so the
/// mapping from completions to item scores stays replaceable.
std::vector<double> app_engagement(const std::vector<double>& flat, const model::ModelConfig& cfg,
                                   const synth::GenConfig& gen,
                                   const std::vector<std::uint8_t>& holdout);
std::vector<double> cell_engagement(const std::vector<double>& flat, const model::ModelConfig& cfg,
                                    const std::vector<std::uint8_t>& holdout);

/// Indices of the r highest scores, ties broken by lower index.
std::vector<int> top_items(const std::vector<double>& scores, int r);

/// Everything evaluation needs besides the checkpoint.
struct EvalSetup {
    model::ModelConfig cfg;
    synth::GenConfig gen;
    std::vector<const core::BehaviorTensor*> tensors;  // one per user
    std::vector<std::vector<double>> profiles;         // unit-norm rows, width cfg.d; may be empty
};

EvalSetup make_setup(const model::ModelConfig& cfg, const synth::Dataset& data,
                     const prof::FeaturizerConfig& feat);

/// Per-user evidence under a regime: which coordinates are revealed, their
/// importance weights, and whose tensor supplies the revealed values
/// (the user's own for short/long, the nearest profile peer's for cold).
struct UserEvidence {
    int value_user = 0;
    int budget = 0;
    double rho_tilde = 0.0;
    std::vector<std::uint8_t> binary;  // N
    std::vector<double> weights;       // N
};

struct EvidenceBatch {
    EvalRegime regime;
    std::vector<int> users;
    std::vector<UserEvidence> evidence;
    std::vector<double> user_vec;  // B x model_dim conditioning rows
    std::vector<double> task_vec;  // B x model_dim
};

/// Runs the mask policy and assembles evidence for the given users.
/// The policy forward always runs (baselines inherit the adaptive budget and
/// importance weights so only the selected support varies). Short/long
/// regimes restrict the encoder input and the relevance support to observed
/// slots; cold start encodes a zero tensor, scores the peer's full history,
/// and keys each selection by the target user.
EvidenceBatch build_evidence(const params::ParameterStore& store, const EvalSetup& setup,
                             const EvalRegime& regime, const std::vector<int>& users,
                             std::uint64_t seed);

/// Evidence-clamped reverse sampling for the batch; rows align with
/// eb.users and noise streams key on the user index, so any sub-batch
/// reproduces the full batch bit for bit.
std::vector<double> complete(const params::ParameterStore& store, const EvalSetup& setup,
                             const EvidenceBatch& eb, std::uint64_t seed);

struct RegimeMetrics {
    double rmse = 0.0, mae = 0.0;  // means of per-user values
};

RegimeMetrics evaluate_completion(const EvalSetup& setup, const EvidenceBatch& eb,
                                  const std::vector<double>& completed);

struct CompareRow {
    core::Task task;
    EvidencePolicy policy;
    std::uint64_t seed = 0;
    double rmse = 0.0, mae = 0.0;
};

struct CompareReport {
    std::vector<CompareRow> rows;
    /// CSV: task,policy,seed,rmse,mae with per-policy mean rows (seed column
    /// "mean") and per-baseline delta rows (policy column "delta-<name>",
    /// values (baseline - adaptive) / baseline).
    std::string csv() const;
    double mean_rmse(core::Task task, EvidencePolicy policy) const;
};

/// The static-vs-adaptive experiment: every (task, policy, seed) triple on
/// the same users, identical diffusion noise across policies.
CompareReport compare_masking(const params::ParameterStore& store, const EvalSetup& setup,
                              const std::vector<core::Task>& tasks,
                              const std::vector<EvidencePolicy>& baselines,
                              const std::vector<std::uint64_t>& seeds,
                              const std::vector<int>& users);

/// Mean cold-start ranking quality over users: app and cell rankings from
/// completed tensors scored against the truth's top-relevant_top items.
struct RankReport {
    std::vector<int> cutoffs;
    std::vector<double> app_recall, app_ndcg, app_mrr;
    std::vector<double> cell_recall, cell_ndcg, cell_mrr;
};

RankReport rank_evaluation(const EvalSetup& setup, const EvidenceBatch& eb,
                           const std::vector<double>& completed,
                           const std::vector<int>& cutoffs, int relevant_top);

// masks CSV: user,t,h,w,binary,weight rows for every coordinate.
void write_masks_csv(std::ostream& out, const model::ModelConfig& cfg, const EvidenceBatch& eb);

/// Everything the pipeline reads from its config file, with defaults.
struct PipelineSettings {
    std::string run_dir = "run";
    synth::GenConfig gen;
    model::ModelConfig cfg;
    train::TrainConfig tc;
    std::vector<std::uint64_t> eval_seeds{0, 1, 2};
    std::vector<core::Task> tasks{core::Task::short_term, core::Task::long_term,
                                  core::Task::cold_start};
    std::vector<EvidencePolicy> baselines{EvidencePolicy::random_fixed};
    std::vector<int> cutoffs{1, 3, 5};
    int eval_users = 16;  // 0 means every user
    int relevant_top = 3;

    /// First eval_users indices, capped at the dataset size.
    std::vector<int> eval_user_ids(int total) const;
};

/// Validates against known_config_keys and value constraints; throws
/// conf::ConfigError or std::invalid_argument.
PipelineSettings settings_from_config(const conf::ConfigFile& config);

/// Featurizer aligned with the generator's vocabularies and the model width.
prof::FeaturizerConfig featurizer_for(const PipelineSettings& s);

/// generate -> train -> evaluate -> report under the config's run directory,
/// with the config snapshot copied in. Returns a process exit code:
/// 0 success, 2 config error, 3 training divergence, 4 evaluation error.
int run_pipeline(const std::string& config_path);

/// Keys accepted by run_pipeline; anything else is a config error.
std::vector<std::string> known_config_keys();

} // namespace stmask::harness
