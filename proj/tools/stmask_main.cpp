// stmask: workbench for adaptive evidence masking and diffusion completion
// over synthetic behavior tensors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "stmask/config.hpp"
#include "stmask/harness.hpp"
#include "stmask/params.hpp"
#include "stmask/profile.hpp"
#include "stmask/synthetic.hpp"
#include "stmask/tensor.hpp"
#include "stmask/training.hpp"

namespace fs = std::filesystem;
using namespace stmask;

namespace {

struct Options {
    std::string config_path;
    std::string out_dir;
    std::string checkpoint;
    std::string regime = "short";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int precision = 0;
    bool precision_set = false;
};

harness::PipelineSettings load_settings(const Options& opt) {
    conf::ConfigFile config = conf::ConfigFile::parse_file(opt.config_path);
    harness::PipelineSettings s = harness::settings_from_config(config);
    if (!opt.out_dir.empty()) s.run_dir = opt.out_dir;
    return s;
}

std::vector<prof::UserEmbedding> embed_users(const synth::Dataset& data,
                                             const prof::FeaturizerConfig& feat) {
    std::vector<prof::UserEmbedding> embeds;
    for (const auto& u : data.users)
        embeds.push_back({u.events.user_id, prof::embed(prof::summarize(u.events, feat), feat)});
    return embeds;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int cmd_gen(const Options& opt) {
    harness::PipelineSettings s;
    try {
        s = load_settings(opt);
        if (opt.seed_set) s.gen.seed = opt.seed;

        synth::Dataset data = synth::generate_dataset(s.gen);
        fs::create_directories(fs::path(s.run_dir) / "tensors");

        std::vector<core::EventHistory> events;
        for (const auto& u : data.users) events.push_back(u.events);
        core::write_events_csv_file((fs::path(s.run_dir) / "events.csv").string(), events);

        for (std::size_t i = 0; i < data.users.size(); ++i)
            core::write_tensor_file(
                (fs::path(s.run_dir) / "tensors" / ("user_" + std::to_string(i) + ".stbt"))
                    .string(),
                data.users[i].tensor);

        prof::write_embeddings_csv_file((fs::path(s.run_dir) / "embeddings.csv").string(),
                                        embed_users(data, harness::featurizer_for(s)));
        std::cout << "generated " << data.users.size() << " users under " << s.run_dir << '\n';
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

int cmd_train(const Options& opt) {
    harness::PipelineSettings s;
    try {
        s = load_settings(opt);
        if (opt.seed_set) s.tc.seed = opt.seed;
        if (opt.precision_set) s.tc.precision = opt.precision;
        if (s.tc.epochs > 0) s.tc.validate();
        fs::create_directories(s.run_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    try {
        synth::Dataset data = synth::generate_dataset(s.gen);
        params::ParameterStore store;
        model::init_params(store, s.cfg, s.tc.seed);

        if (s.tc.epochs > 0) {
            std::vector<prof::UserEmbedding> embeds =
                embed_users(data, harness::featurizer_for(s));
            std::vector<train::TrainExample> examples;
            for (std::size_t i = 0; i < data.users.size(); ++i)
                examples.push_back({&data.users[i].tensor, embeds[i].embedding.vec});
            std::vector<train::EpochMetrics> metrics = train::train(store, s.cfg, examples, s.tc);
            train::write_metrics_csv((fs::path(s.run_dir) / "train_metrics.csv").string(),
                                     metrics);
            std::cout << "epoch " << metrics.back().epoch << " loss "
                      << fmt(metrics.back().loss_total) << '\n';
        }
        const std::string ckpt = (fs::path(s.run_dir) / "checkpoint.stck").string();
        params::write_checkpoint_file(ckpt, store);
        std::cout << "checkpoint written to " << ckpt << '\n';
    } catch (const std::exception& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}

/// Shared setup for the checkpoint-consuming subcommands.
struct EvalContext {
    harness::PipelineSettings s;
    params::ParameterStore store;
    synth::Dataset data;
    harness::EvalSetup setup;
    std::vector<int> users;
    std::uint64_t seed = 0;
};

EvalContext eval_context(const Options& opt, const harness::PipelineSettings& s) {
    EvalContext ctx;
    ctx.s = s;
    ctx.store = params::read_checkpoint_file(opt.checkpoint);
    ctx.data = synth::generate_dataset(s.gen);
    ctx.setup = harness::make_setup(s.cfg, ctx.data, harness::featurizer_for(s));
    ctx.users = s.eval_user_ids(static_cast<int>(ctx.data.users.size()));
    ctx.seed = opt.seed_set ? opt.seed : s.eval_seeds.front();
    return ctx;
}

int require_checkpoint(const Options& opt) {
    if (!opt.checkpoint.empty()) return 0;
    std::cerr << "config error: this subcommand requires --checkpoint\n";
    return 2;
}

int cmd_eval(const Options& opt) {
    if (int rc = require_checkpoint(opt)) return rc;
    harness::PipelineSettings s;
    core::Task task;
    try {
        s = load_settings(opt);
        task = core::task_from_name(opt.regime);
        fs::create_directories(s.run_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    try {
        EvalContext ctx = eval_context(opt, s);
        harness::EvalRegime regime =
            harness::regime_for(task, harness::EvidencePolicy::adaptive, s.cfg);
        harness::EvidenceBatch eb =
            harness::build_evidence(ctx.store, ctx.setup, regime, ctx.users, ctx.seed);
        const std::vector<double> done = harness::complete(ctx.store, ctx.setup, eb, ctx.seed);

        const auto flat = static_cast<std::size_t>(s.cfg.flat_len());
        const std::vector<std::uint8_t> holdout = harness::holdout_region(s.cfg, regime);
        std::ofstream out(fs::path(s.run_dir) / ("eval_" + opt.regime + ".csv"));
        out << "user,rmse,mae\n";
        for (std::size_t b = 0; b < eb.users.size(); ++b) {
            std::vector<double> row(done.begin() + static_cast<std::ptrdiff_t>(b * flat),
                                    done.begin() + static_cast<std::ptrdiff_t>((b + 1) * flat));
            auto [rmse, mae] = harness::rmse_mae_flat(
                row, ctx.setup.tensors[static_cast<std::size_t>(eb.users[b])]->data, s.cfg,
                holdout);
            out << eb.users[b] << ',' << fmt(rmse) << ',' << fmt(mae) << '\n';
        }
        harness::RegimeMetrics m = harness::evaluate_completion(ctx.setup, eb, done);
        out << "mean," << fmt(m.rmse) << ',' << fmt(m.mae) << '\n';
        if (!out) throw std::runtime_error("cannot write evaluation report");

        if (task == core::Task::cold_start) {
            harness::RankReport rr =
                harness::rank_evaluation(ctx.setup, eb, done, s.cutoffs, s.relevant_top);
            std::ofstream rank(fs::path(s.run_dir) / "rank_metrics.csv");
            rank << "item,metric";
            for (int k : rr.cutoffs) rank << ",at" << k;
            rank << '\n';
            auto line = [&](const char* item, const char* metric, const std::vector<double>& v) {
                rank << item << ',' << metric;
                for (double x : v) rank << ',' << fmt(x);
                rank << '\n';
            };
            line("app", "recall", rr.app_recall);
            line("app", "ndcg", rr.app_ndcg);
            line("app", "mrr", rr.app_mrr);
            line("cell", "recall", rr.cell_recall);
            line("cell", "ndcg", rr.cell_ndcg);
            line("cell", "mrr", rr.cell_mrr);
            if (!rank) throw std::runtime_error("cannot write ranking report");
        }
        std::cout << opt.regime << " rmse " << fmt(m.rmse) << " mae " << fmt(m.mae) << '\n';
    } catch (const std::exception& e) {
        std::cerr << "evaluation error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}

int cmd_compare(const Options& opt) {
    if (int rc = require_checkpoint(opt)) return rc;
    harness::PipelineSettings s;
    try {
        s = load_settings(opt);
        if (opt.seed_set) s.eval_seeds = {opt.seed};
        fs::create_directories(s.run_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    try {
        EvalContext ctx = eval_context(opt, s);
        harness::CompareReport report = harness::compare_masking(
            ctx.store, ctx.setup, s.tasks, s.baselines, s.eval_seeds, ctx.users);
        const std::string csv = report.csv();
        std::ofstream out(fs::path(s.run_dir) / "compare.csv");
        out << csv;
        if (!out) throw std::runtime_error("cannot write comparison report");
        std::cout << csv;
    } catch (const std::exception& e) {
        std::cerr << "evaluation error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}

int cmd_sample(const Options& opt) {
    if (int rc = require_checkpoint(opt)) return rc;
    harness::PipelineSettings s;
    core::Task task;
    try {
        s = load_settings(opt);
        task = core::task_from_name(opt.regime);
        fs::create_directories(fs::path(s.run_dir) / "samples");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    try {
        EvalContext ctx = eval_context(opt, s);
        harness::EvalRegime regime =
            harness::regime_for(task, harness::EvidencePolicy::adaptive, s.cfg);
        harness::EvidenceBatch eb =
            harness::build_evidence(ctx.store, ctx.setup, regime, ctx.users, ctx.seed);
        const std::vector<double> done = harness::complete(ctx.store, ctx.setup, eb, ctx.seed);

        const auto flat = static_cast<std::size_t>(s.cfg.flat_len());
        for (std::size_t b = 0; b < eb.users.size(); ++b) {
            core::BehaviorTensor x(s.cfg.C, s.cfg.T, s.cfg.H, s.cfg.W);
            std::copy(done.begin() + static_cast<std::ptrdiff_t>(b * flat),
                      done.begin() + static_cast<std::ptrdiff_t>((b + 1) * flat),
                      x.data.begin());
            core::write_tensor_file(
                (fs::path(s.run_dir) / "samples" /
                 ("sample_" + opt.regime + "_u" + std::to_string(eb.users[b]) + ".stbt"))
                    .string(),
                x);
        }
        std::cout << "wrote " << eb.users.size() << " completions under "
                  << (fs::path(s.run_dir) / "samples").string() << '\n';
    } catch (const std::exception& e) {
        std::cerr << "evaluation error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}

int cmd_export_masks(const Options& opt) {
    if (int rc = require_checkpoint(opt)) return rc;
    harness::PipelineSettings s;
    core::Task task;
    try {
        s = load_settings(opt);
        task = core::task_from_name(opt.regime);
        fs::create_directories(s.run_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }

    try {
        EvalContext ctx = eval_context(opt, s);
        harness::EvalRegime regime =
            harness::regime_for(task, harness::EvidencePolicy::adaptive, s.cfg);
        harness::EvidenceBatch eb =
            harness::build_evidence(ctx.store, ctx.setup, regime, ctx.users, ctx.seed);
        const std::string path =
            (fs::path(s.run_dir) / ("masks_" + opt.regime + ".csv")).string();
        std::ofstream out(path);
        harness::write_masks_csv(out, s.cfg, eb);
        std::cout << "wrote " << path << '\n';
    } catch (const std::exception& e) {
        std::cerr << "evaluation error: " << e.what() << '\n';
        return 4;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive evidence masking and diffusion completion workbench"};
    app.require_subcommand(1);

    Options opt;
    auto add_common = [&](CLI::App* sub, bool regime_flag, bool precision_flag) {
        sub->add_option("--config", opt.config_path, "configuration file (sections of key = value)")
            ->required();
        sub->add_option("--out", opt.out_dir, "run directory (overrides run.dir)");
        sub->add_option("--seed", opt.seed, "seed override for this subcommand");
        if (regime_flag)
            sub->add_option("--regime", opt.regime, "task regime")
                ->check(CLI::IsMember({"short", "long", "cold"}));
        if (precision_flag)
            sub->add_option("--precision", opt.precision, "parameter precision")
                ->check(CLI::IsMember({32, 64}));
        return sub;
    };
    auto add_checkpoint = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", opt.checkpoint, "trained parameter file (.stck)");
        return sub;
    };

    CLI::App* run = app.add_subcommand("run", "full pipeline: generate, train, evaluate, report");
    run->add_option("--config", opt.config_path, "configuration file (sections of key = value)")
        ->required();

    CLI::App* gen =
        add_common(app.add_subcommand("gen", "generate the synthetic dataset and embeddings"),
                   false, false);
    CLI::App* tr = add_common(app.add_subcommand("train", "train and write a checkpoint"), false,
                              true);
    CLI::App* ev = add_checkpoint(add_common(
        app.add_subcommand("eval", "held-out completion metrics for one regime"), true, false));
    CLI::App* cmp = add_checkpoint(add_common(
        app.add_subcommand("compare", "adaptive vs fixed masking across regimes and seeds"),
        false, false));
    CLI::App* smp = add_checkpoint(add_common(
        app.add_subcommand("sample", "write completed tensors for one regime"), true, false));
    CLI::App* exm = add_checkpoint(add_common(
        app.add_subcommand("export-masks", "dump the selected evidence masks as CSV"), true,
        false));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    CLI::App* active = app.get_subcommands().front();
    auto count_of = [&](const std::string& name) {
        const CLI::Option* o = active->get_option_no_throw(name);
        return o ? o->count() : std::size_t{0};
    };
    opt.seed_set = count_of("--seed") > 0;
    opt.precision_set = count_of("--precision") > 0;

    if (active == run) return harness::run_pipeline(opt.config_path);
    if (active == gen) return cmd_gen(opt);
    if (active == tr) return cmd_train(opt);
    if (active == ev) return cmd_eval(opt);
    if (active == cmp) return cmd_compare(opt);
    if (active == smp) return cmd_sample(opt);
    if (active == exm) return cmd_export_masks(opt);
    return 2;
}
