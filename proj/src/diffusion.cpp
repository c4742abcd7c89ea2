#include "stmask/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include "stmask/rng.hpp"

namespace stmask::diff {

Schedule make_schedule(int horizon, double beta_start, double beta_end) {
    if (horizon < 1) throw std::invalid_argument("schedule horizon must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("beta range must satisfy 0 < start <= end < 1");
    Schedule s;
    s.horizon = horizon;
    s.beta.resize(static_cast<std::size_t>(horizon));
    s.alpha.resize(static_cast<std::size_t>(horizon));
    s.alpha_bar.resize(static_cast<std::size_t>(horizon));
    double running = 1.0;
    for (int i = 0; i < horizon; ++i) {
        const double frac = horizon == 1 ? 0.0 : static_cast<double>(i) / (horizon - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<std::size_t>(i)] = b;
        s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
        running *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(i)] = running;
    }
    return s;
}

std::vector<double> forward_sample(const std::vector<double>& x0, int t,
                                   const std::vector<double>& noise, const Schedule& sched) {
    if (t < 1 || t > sched.horizon) throw std::invalid_argument("diffusion step out of range");
    if (noise.size() != x0.size()) throw std::invalid_argument("noise shape mismatch");
    const double abar = sched.alpha_bar[static_cast<std::size_t>(t - 1)];
    const double cs = std::sqrt(abar), cn = std::sqrt(1.0 - abar);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = cs * x0[i] + cn * noise[i];
    return out;
}

core::BehaviorTensor forward_sample(const core::BehaviorTensor& x0, int t,
                                    const core::BehaviorTensor& noise, const Schedule& sched) {
    if (noise.C != x0.C || noise.T != x0.T || noise.H != x0.H || noise.W != x0.W)
        throw std::invalid_argument("noise shape mismatch");
    core::BehaviorTensor out(x0.C, x0.T, x0.H, x0.W);
    out.data = forward_sample(x0.data, t, noise.data, sched);
    return out;
}

std::vector<double> patchify(const core::BehaviorTensor& x, const model::ModelConfig& cfg) {
    if (x.C != cfg.C || x.T != cfg.T || x.H != cfg.H || x.W != cfg.W)
        throw std::invalid_argument("tensor dims do not match the configuration");
    cfg.validate();
    const auto idx = model::patchify_index(cfg, 1, cfg.C);
    std::vector<double> tokens(idx->size());
    for (std::size_t k = 0; k < tokens.size(); ++k)
        tokens[k] = x.data[static_cast<std::size_t>((*idx)[k])];
    return tokens;
}

core::BehaviorTensor unpatchify(const std::vector<double>& tokens, const model::ModelConfig& cfg) {
    cfg.validate();
    if (tokens.size() != static_cast<std::size_t>(cfg.tokens()) * cfg.patch_len())
        throw std::invalid_argument("token matrix size mismatch");
    const auto idx = model::unpatchify_index(cfg, 1);
    core::BehaviorTensor out(cfg.C, cfg.T, cfg.H, cfg.W);
    for (std::size_t k = 0; k < out.data.size(); ++k)
        out.data[k] = tokens[static_cast<std::size_t>((*idx)[k])];
    return out;
}

namespace {

void validate_plan(const ReversePlan& plan, const model::ModelConfig& cfg) {
    const auto B = static_cast<std::size_t>(plan.batch);
    if (plan.batch < 1) throw std::invalid_argument("reverse plan needs a positive batch");
    if (plan.x_evidence.size() != B * cfg.flat_len()) throw std::invalid_argument("evidence size mismatch");
    if (plan.mask.size() != B * cfg.coords()) throw std::invalid_argument("mask size mismatch");
    if (plan.weights.size() != B * cfg.coords()) throw std::invalid_argument("weight size mismatch");
    if (plan.user_vec.size() != B * cfg.model_dim) throw std::invalid_argument("user conditioning size mismatch");
    if (plan.task_vec.size() != B * cfg.model_dim) throw std::invalid_argument("task conditioning size mismatch");
    if (!plan.noise_ids.empty() && plan.noise_ids.size() != B)
        throw std::invalid_argument("noise identity count mismatch");
}

/// x := (1 - M) x + M evidence, selecting stored evidence bytes bit-exactly.
void clamp_evidence(std::vector<double>& x, const ReversePlan& plan, const model::ModelConfig& cfg) {
    const int coords = cfg.coords(), flat = cfg.flat_len();
    for (int b = 0; b < plan.batch; ++b)
        for (int i = 0; i < coords; ++i) {
            if (!plan.mask[static_cast<std::size_t>(b) * coords + i]) continue;
            for (int c = 0; c < cfg.C; ++c) {
                const auto k = static_cast<std::size_t>(b) * flat + static_cast<std::size_t>(c) * coords + i;
                x[k] = plan.x_evidence[k];
            }
        }
}

} // namespace

std::vector<double> reverse_sample(const params::ParameterStore& store,
                                   const model::ModelConfig& cfg, const Schedule& sched,
                                   const ReversePlan& plan, std::uint64_t seed,
                                   const TrajectorySink* sink) {
    validate_plan(plan, cfg);
    const int B = plan.batch, coords = cfg.coords(), flat = cfg.flat_len(), D = cfg.model_dim;

    // evidence planes are fixed across steps: C masked clean channels + mask plane
    std::vector<double> ev_planes(static_cast<std::size_t>(B) * (cfg.C + 1) * coords);
    for (int b = 0; b < B; ++b) {
        double* dst = ev_planes.data() + static_cast<std::size_t>(b) * (cfg.C + 1) * coords;
        const double* src = plan.x_evidence.data() + static_cast<std::size_t>(b) * flat;
        for (int k = 0; k < flat; ++k) dst[k] = src[k];
        for (int i = 0; i < coords; ++i)
            dst[static_cast<std::size_t>(cfg.C) * coords + i] =
                plan.mask[static_cast<std::size_t>(b) * coords + i] ? 1.0 : 0.0;
    }

    auto noise_id = [&plan](int b) {
        return plan.noise_ids.empty() ? static_cast<std::uint64_t>(b)
                                      : plan.noise_ids[static_cast<std::size_t>(b)];
    };
    std::vector<double> x(static_cast<std::size_t>(B) * flat);
    for (int b = 0; b < B; ++b) {
        rng::Stream init(rng::derive(seed, rng::Tag::diff_reverse, noise_id(b),
                                     static_cast<std::uint64_t>(sched.horizon) + 1));
        for (int k = 0; k < flat; ++k) x[static_cast<std::size_t>(b) * flat + k] = init.normal();
    }
    clamp_evidence(x, plan, cfg);

    std::vector<double> x_in(x.size());
    for (int t = sched.horizon; t >= 1; --t) {
        // denoiser sees the weighted-masked state, matching its training input
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < cfg.C; ++c)
                for (int i = 0; i < coords; ++i) {
                    const auto k = static_cast<std::size_t>(b) * flat + static_cast<std::size_t>(c) * coords + i;
                    x_in[k] = x[k] * plan.weights[static_cast<std::size_t>(b) * coords + i];
                }

        ad::Tape tape(false);
        model::ModelVars mv(tape, store);
        model::DenoiserInputs in;
        in.x_in = tape.constant(B, flat, x_in);
        in.ev_planes = tape.constant(B, (cfg.C + 1) * coords, ev_planes);
        in.user_vec = tape.constant(B, D, plan.user_vec);
        in.task_vec = tape.constant(B, D, plan.task_vec);
        in.tsteps.assign(static_cast<std::size_t>(B), t);
        const std::vector<double>& x0_hat = tape.val(model::denoise(tape, mv, cfg, in));

        const double abar_t = sched.alpha_bar[static_cast<std::size_t>(t - 1)];
        const double abar_prev = t > 1 ? sched.alpha_bar[static_cast<std::size_t>(t - 2)] : 1.0;
        const double beta_t = sched.beta[static_cast<std::size_t>(t - 1)];
        const double alpha_t = sched.alpha[static_cast<std::size_t>(t - 1)];
        const double c0 = std::sqrt(abar_prev) * beta_t / (1.0 - abar_t);
        const double ct = std::sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t);
        const double sigma = t > 1 ? std::sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_t) : 0.0;

        for (int b = 0; b < B; ++b) {
            rng::Stream noise(rng::derive(seed, rng::Tag::diff_reverse, noise_id(b),
                                          static_cast<std::uint64_t>(t)));
            for (int k = 0; k < flat; ++k) {
                const auto j = static_cast<std::size_t>(b) * flat + k;
                const double mean = c0 * x0_hat[j] + ct * x[j];
                x[j] = t > 1 ? mean + sigma * noise.normal() : mean;
            }
        }
        clamp_evidence(x, plan, cfg);
        if (sink && *sink) (*sink)(t - 1, x);
    }
    return x;
}

} // namespace stmask::diff
