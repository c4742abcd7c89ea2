#include "stmask/profile.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "stmask/rng.hpp"

namespace stmask::prof {

namespace {

int bin_of_slot(int slot, const FeaturizerConfig& cfg) {
    return slot * cfg.time_bins / cfg.slots_per_day;
}

std::vector<double> row_normalize(const std::vector<double>& counts, int rows, int cols) {
    std::vector<double> out(counts.size(), 0.0);
    for (int r = 0; r < rows; ++r) {
        double total = 0.0;
        for (int c = 0; c < cols; ++c) total += counts[static_cast<std::size_t>(r) * cols + c];
        if (total <= 0.0) continue;
        for (int c = 0; c < cols; ++c) {
            const auto i = static_cast<std::size_t>(r) * cols + c;
            out[i] = counts[i] / total;
        }
    }
    return out;
}

double frobenius_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

} // namespace

void FeaturizerConfig::validate() const {
    if (locations < 1 || apps < 1) throw std::invalid_argument("empty vocabulary");
    if (time_bins < 1 || slots_per_day < 1)
        throw std::invalid_argument("time resolution must be positive");
    if (time_bins > slots_per_day)
        throw std::invalid_argument("time_bins cannot exceed slots_per_day");
    if (embed_dim < 1) throw std::invalid_argument("embed_dim must be positive");
    if (!(theta_corr > 0.0)) throw std::invalid_argument("theta_corr must be positive");
}

BehaviorSummary summarize(const core::EventHistory& history, const FeaturizerConfig& cfg) {
    cfg.validate();
    BehaviorSummary s;
    s.locations = cfg.locations;
    s.apps = cfg.apps;
    s.time_hist.assign(static_cast<std::size_t>(cfg.time_bins), 0.0);
    s.cooccur.assign(static_cast<std::size_t>(cfg.locations) * cfg.apps, 0.0);

    // first-event bin per day; map keeps determinism independent of order
    std::map<std::int64_t, int> day_start;
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto app = static_cast<int>(history.app_id[i]);
        const auto loc = static_cast<int>(history.location_id[i]);
        const std::int64_t ts = history.timestamp[i];
        if (app < 0 || app >= cfg.apps) throw std::invalid_argument("app id outside vocabulary");
        if (loc < 0 || loc >= cfg.locations)
            throw std::invalid_argument("location id outside vocabulary");
        if (ts < 0) throw std::invalid_argument("negative timestamp");
        const int slot = static_cast<int>(ts % cfg.slots_per_day);
        const std::int64_t day = ts / cfg.slots_per_day;
        const int bin = bin_of_slot(slot, cfg);
        s.time_hist[static_cast<std::size_t>(bin)] += 1.0;
        s.cooccur[static_cast<std::size_t>(loc) * cfg.apps + app] += 1.0;
        auto it = day_start.find(day);
        if (it == day_start.end()) day_start.emplace(day, slot);
        else it->second = std::min(it->second, slot);
    }

    s.cooccur_rows = row_normalize(s.cooccur, cfg.locations, cfg.apps);

    if (history.size() > 0) {
        const double total = static_cast<double>(history.size());
        for (double& v : s.time_hist) v /= total;

        std::vector<double> starts(static_cast<std::size_t>(cfg.time_bins), 0.0);
        for (const auto& [day, slot] : day_start)
            starts[static_cast<std::size_t>(bin_of_slot(slot, cfg))] += 1.0;
        const double days = static_cast<double>(day_start.size());
        double entropy = 0.0;
        for (double c : starts)
            if (c > 0.0) {
                const double p = c / days;
                entropy -= p * std::log(p);
            }
        const double max_entropy = std::log(static_cast<double>(cfg.time_bins));
        s.session_regularity = max_entropy > 0.0 ? 1.0 - entropy / max_entropy : 1.0;
        s.session_regularity = std::clamp(s.session_regularity, 0.0, 1.0);
    }
    return s;
}

std::vector<double> feature_vector(const BehaviorSummary& summary, const FeaturizerConfig& cfg) {
    if (summary.locations != cfg.locations || summary.apps != cfg.apps ||
        static_cast<int>(summary.time_hist.size()) != cfg.time_bins)
        throw std::invalid_argument("summary shape disagrees with config");
    std::vector<double> f;
    f.reserve(static_cast<std::size_t>(cfg.feature_len()));
    f.insert(f.end(), summary.cooccur_rows.begin(), summary.cooccur_rows.end());
    f.insert(f.end(), summary.time_hist.begin(), summary.time_hist.end());
    f.push_back(summary.session_regularity);
    return f;
}

std::vector<double> project(const std::vector<double>& features, const FeaturizerConfig& cfg) {
    const int n = cfg.feature_len();
    if (static_cast<int>(features.size()) != n)
        throw std::invalid_argument("feature length disagrees with config");
    rng::Stream s(rng::derive(cfg.embed_seed, rng::Tag::embed_proj,
                              static_cast<std::uint64_t>(n),
                              static_cast<std::uint64_t>(cfg.embed_dim)));
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    std::vector<double> out(static_cast<std::size_t>(cfg.embed_dim), 0.0);
    // row-major draw order pins the matrix independent of the input
    for (int r = 0; r < cfg.embed_dim; ++r) {
        double acc = 0.0;
        for (int c = 0; c < n; ++c) acc += scale * s.normal() * features[static_cast<std::size_t>(c)];
        out[static_cast<std::size_t>(r)] = acc;
    }
    return out;
}

double projection_frobenius_norm(const FeaturizerConfig& cfg) {
    const int n = cfg.feature_len();
    rng::Stream s(rng::derive(cfg.embed_seed, rng::Tag::embed_proj,
                              static_cast<std::uint64_t>(n),
                              static_cast<std::uint64_t>(cfg.embed_dim)));
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    double acc = 0.0;
    for (int r = 0; r < cfg.embed_dim; ++r)
        for (int c = 0; c < n; ++c) {
            const double v = scale * s.normal();
            acc += v * v;
        }
    return std::sqrt(acc);
}

ProfileEmbedding embed(const BehaviorSummary& summary, const FeaturizerConfig& cfg) {
    ProfileEmbedding e;
    e.provenance = Provenance::deterministic;
    const std::vector<double> f = feature_vector(summary, cfg);
    const bool zero = std::all_of(f.begin(), f.end(), [](double v) { return v == 0.0; });
    e.vec.assign(static_cast<std::size_t>(cfg.embed_dim), 0.0);
    if (zero) {
        e.vec[0] = 1.0;  // canonical unknown-user embedding
        return e;
    }
    e.vec = project(f, cfg);
    double norm = 0.0;
    for (double v : e.vec) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
        std::fill(e.vec.begin(), e.vec.end(), 0.0);
        e.vec[0] = 1.0;
        return e;
    }
    for (double& v : e.vec) v /= norm;
    return e;
}

double correlation_gap(const core::EventHistory& real, const core::EventHistory& augmented,
                       const FeaturizerConfig& cfg) {
    const BehaviorSummary a = summarize(real, cfg);
    const BehaviorSummary b = summarize(augmented, cfg);
    return frobenius_distance(a.cooccur_rows, b.cooccur_rows);
}

core::EventHistory augment(const core::EventHistory& history, int n_events, std::uint64_t seed,
                           const FeaturizerConfig& cfg) {
    cfg.validate();
    if (history.size() == 0) throw std::invalid_argument("cannot augment an empty history");
    if (n_events < 0) throw std::invalid_argument("n_events must be nonnegative");

    core::EventHistory best;
    best.user_id = history.user_id;
    if (n_events == 0) return best;

    double best_gap = -1.0;
    constexpr int kAttempts = 16;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        core::EventHistory cand;
        cand.user_id = history.user_id;
        rng::Stream s(rng::derive(seed, rng::Tag::augment,
                                  static_cast<std::uint64_t>(history.user_id),
                                  static_cast<std::uint64_t>(attempt)));
        for (int i = 0; i < n_events; ++i) {
            const auto pick = static_cast<std::size_t>(s.below(history.size()));
            cand.append(history.app_id[pick], history.location_id[pick],
                        history.timestamp[pick]);
        }
        const double gap = correlation_gap(history, cand, cfg);
        if (best_gap < 0.0 || gap < best_gap) {
            best_gap = gap;
            best = std::move(cand);
        }
        if (best_gap <= cfg.theta_corr) break;
    }
    return best;
}

void write_embeddings_csv(std::ostream& out, const std::vector<UserEmbedding>& users) {
    int dim = -1;
    for (const auto& u : users) {
        if (dim < 0) dim = static_cast<int>(u.embedding.vec.size());
        if (static_cast<int>(u.embedding.vec.size()) != dim)
            throw core::FormatError("inconsistent embedding widths");
    }
    if (dim < 1) dim = 0;
    out << "user_id";
    for (int i = 0; i < dim; ++i) out << ",e" << i;
    out << '\n';
    char buf[32];
    for (const auto& u : users) {
        out << u.user_id;
        for (double v : u.embedding.vec) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw core::FormatError("embeddings write failed");
}

std::vector<UserEmbedding> read_embeddings_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw core::FormatError("empty embeddings file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("user_id", 0) != 0) throw core::FormatError("bad embeddings header");
    int dim = 0;
    for (char ch : line)
        if (ch == ',') ++dim;

    std::vector<UserEmbedding> users;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        UserEmbedding u;
        if (!std::getline(ss, field, ',')) throw core::FormatError("embeddings row truncated");
        u.user_id = static_cast<std::uint32_t>(std::stoul(field));
        u.embedding.provenance = Provenance::external;
        while (std::getline(ss, field, ','))
            u.embedding.vec.push_back(std::stod(field));
        if (static_cast<int>(u.embedding.vec.size()) != dim)
            throw core::FormatError("embeddings row width mismatch");
        users.push_back(std::move(u));
    }
    return users;
}

void write_embeddings_csv_file(const std::string& path, const std::vector<UserEmbedding>& users) {
    std::ofstream out(path);
    if (!out) throw core::FormatError("cannot open " + path);
    write_embeddings_csv(out, users);
}

std::vector<UserEmbedding> read_embeddings_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw core::FormatError("cannot open " + path);
    return read_embeddings_csv(in);
}

} // namespace stmask::prof
