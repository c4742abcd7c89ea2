#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "stmask/tensor.hpp"

namespace stmask::prof {

/// Vocabulary sizes and knobs for the deterministic featurizer. The embedding
/// replaces an external text-profile pipeline with a seeded random projection
/// of the behavior summary; the projection is fixed by (embed_seed, feature
/// length, embed_dim), so embeddings are comparable across runs.
struct FeaturizerConfig {
    int locations = 64;           // |L|, grid cells
    int apps = 16;                // |A|
    int time_bins = 8;            // histogram bins per day
    int slots_per_day = 8;        // timestamp granularity of event histories
    int embed_dim = 32;           // matches the model's user-embedding width
    std::uint64_t embed_seed = 0;
    double theta_corr = 0.15;     // augmentation acceptance threshold

    void validate() const;
    int feature_len() const { return locations * apps + time_bins + 1; }
};

/// Statistical summary of one user's event history.
struct BehaviorSummary {
    int locations = 0, apps = 0;
    std::vector<double> time_hist;     // time_bins; sums to 1 when events exist
    std::vector<double> cooccur;       // locations x apps raw counts
    std::vector<double> cooccur_rows;  // row-normalized copy; zero rows stay zero
    double session_regularity = 0.0;   // sigma in [0,1]
};

enum class Provenance { deterministic, external };

struct ProfileEmbedding {
    std::vector<double> vec;  // embed_dim, unit l2 norm
    Provenance provenance = Provenance::deterministic;
};

struct UserEmbedding {
    std::uint32_t user_id = 0;
    ProfileEmbedding embedding;
};

/// Counts events into the summary. Timestamps are slot indices; slot-of-day
/// = ts % slots_per_day, mapped proportionally onto time_bins. Session
/// regularity is 1 minus the normalized entropy of the distribution of each
/// day's first-event bin. An empty history gives the all-zero summary with
/// regularity 0.
BehaviorSummary summarize(const core::EventHistory& history, const FeaturizerConfig& cfg);

/// Concatenated (row-normalized cooccur, time_hist, regularity) feature
/// vector, length cfg.feature_len().
std::vector<double> feature_vector(const BehaviorSummary& summary, const FeaturizerConfig& cfg);

/// Raw seeded random projection of a feature vector to embed_dim, without
/// normalization. Linear; exposed so the Lipschitz bound is testable.
std::vector<double> project(const std::vector<double>& features, const FeaturizerConfig& cfg);

/// Frobenius norm of the fixed projection matrix (upper-bounds its operator
/// norm, hence the pre-normalization Lipschitz constant of embed).
double projection_frobenius_norm(const FeaturizerConfig& cfg);

/// l2-normalized projection of the summary's features. An all-zero summary
/// maps to the canonical unknown-user embedding (first basis vector).
ProfileEmbedding embed(const BehaviorSummary& summary, const FeaturizerConfig& cfg);

/// Frobenius distance between the row-normalized co-occurrence matrices of
/// the two histories. Zero iff the normalized patterns agree.
double correlation_gap(const core::EventHistory& real, const core::EventHistory& augmented,
                       const FeaturizerConfig& cfg);

/// Resamples n_events whole (app, location, time) events from the empirical
/// joint distribution of the source history, so no unobserved app-location
/// pair can appear. Draws up to a fixed number of candidate sets and returns
/// the first whose correlation gap to the source is at most theta_corr, else
/// the best candidate seen; small n_events may therefore exceed the
/// threshold. Throws on an empty source.
core::EventHistory augment(const core::EventHistory& history, int n_events, std::uint64_t seed,
                           const FeaturizerConfig& cfg);

// CSV: header user_id,e0,...,e{d-1}; one row per user, full precision.
// Ingested embeddings are marked external.
void write_embeddings_csv(std::ostream& out, const std::vector<UserEmbedding>& users);
std::vector<UserEmbedding> read_embeddings_csv(std::istream& in);
void write_embeddings_csv_file(const std::string& path, const std::vector<UserEmbedding>& users);
std::vector<UserEmbedding> read_embeddings_csv_file(const std::string& path);

} // namespace stmask::prof
