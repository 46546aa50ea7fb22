#pragma once

// dtl-count command-line front end. run_cli returns the process exit code:
// 0 success, 1 verification failure, 2 usage, config or input error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dtlc/checkpoint.hpp"
#include "dtlc/config.hpp"
#include "dtlc/domain.hpp"
#include "dtlc/synthesis.hpp"
#include "dtlc/synthetic_dataset.hpp"
#include "dtlc/transfer.hpp"
#include "dtlc/verification.hpp"

namespace dtlc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerification = 1;
inline constexpr int kExitUsage = 2;

/// A check the command performs on its own results did not hold.
class VerificationFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace cli {

namespace fs = std::filesystem;

using Table = std::vector<std::vector<std::string>>;

/// Left-aligned columns separated by two spaces.
inline void print_aligned(std::ostream& out, const Table& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (width.size() <= i) width.push_back(0);
            width[i] = std::max(width[i], r[i].size());
        }
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t i = 0; i < r.size(); ++i) {
            line += r[i];
            if (i + 1 < r.size()) line += std::string(width[i] - r[i].size() + 2, ' ');
        }
        out << line << '\n';
    }
}

inline std::string to_tsv(const Table& rows) {
    std::string s;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "\t" : "") + r[i];
        s += '\n';
    }
    return s;
}

inline Table read_tsv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path.string());
    Table rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        rows.push_back(std::move(fields));
    }
    return rows;
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline std::string real(double v) { return detail::format_real(v); }

/// Options every command accepts.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> workers;
};

inline void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config file (INI)");
    cmd->add_option("--seed", c.seed, "global seed, overrides the config");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--workers", c.workers, "worker threads for compositing and evaluation")->check(CLI::PositiveNumber);
}

inline ExperimentConfig resolve_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.workers) cfg.synthesis.workers = *c.workers;
    validate_config(cfg);
    return cfg;
}

inline fs::path out_dir(const Common& c, const ExperimentConfig& cfg) { return c.out.empty() ? fs::path(cfg.output_dir) : fs::path(c.out); }

inline std::size_t workers(const ExperimentConfig& cfg) { return std::max<std::size_t>(1, cfg.synthesis.workers); }

inline void save_config(const ExperimentConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    write_config(cfg, dir / "config.ini");
}

// --- datasets -----------------------------------------------------------------------

enum class Split { source, few, test };

inline std::vector<AnnotatedImage> generate_split(const ExperimentConfig& cfg, Split split) {
    switch (split) {
        case Split::source: return generate_domain(cfg.source, cfg.source_images, cfg.source_seed());
        case Split::few: return generate_domain(cfg.target, cfg.target_few, cfg.few_seed());
        case Split::test: return generate_domain(cfg.target, cfg.target_test, cfg.test_seed());
    }
    return {};
}

inline std::uint64_t split_seed(const ExperimentConfig& cfg, Split split) {
    switch (split) {
        case Split::source: return cfg.source_seed();
        case Split::few: return cfg.few_seed();
        case Split::test: return cfg.test_seed();
    }
    return 0;
}

/// Loads `override_dir` if set, else the config's dataset path for the
/// split, else generates the split in memory.
inline std::vector<AnnotatedImage> split_data(const ExperimentConfig& cfg, Split split, const std::string& override_dir) {
    std::string dir = override_dir;
    if (dir.empty()) dir = split == Split::source ? cfg.source_dataset : split == Split::few ? cfg.few_dataset : cfg.test_dataset;
    if (dir.empty()) return generate_split(cfg, split);
    return load_annotated_dataset(dir);
}

inline std::pair<double, double> count_stats(const std::vector<AnnotatedImage>& images) {
    if (images.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (const auto& i : images) mean += static_cast<double>(i.count());
    mean /= static_cast<double>(images.size());
    double var = 0.0;
    for (const auto& i : images) var += (static_cast<double>(i.count()) - mean) * (static_cast<double>(i.count()) - mean);
    return {mean, std::sqrt(var / static_cast<double>(images.size()))};
}

// --- trained states on disk -----------------------------------------------------------

inline void save_state(const TrainedState& s, const fs::path& dir, const std::string& ckpt_name) {
    fs::create_directories(dir);
    save_checkpoint(s.checkpoint, dir / ckpt_name);
    if (!s.extractor.empty()) save_archive(extractor_to_archive(s.extractor), dir / "extractor.dtlc");
}

inline TrainedState load_state(const fs::path& ckpt_path) {
    TrainedState s;
    s.checkpoint = load_checkpoint(ckpt_path);
    const auto ex = ckpt_path.parent_path() / "extractor.dtlc";
    if (s.checkpoint.config.disentangle) {
        if (!fs::exists(ex)) throw FormatError("missing " + ex.string() + " next to " + ckpt_path.string());
        s.extractor = extractor_from_archive<float>(load_archive(ex));
    }
    return s;
}

// --- reports --------------------------------------------------------------------------

inline const std::vector<std::string> kReportHeader = {"dataset", "N",     "method", "stage",      "epochs",    "lr",
                                                       "items",   "loss",  "mse",    "perceptual", "train_mae", "mae"};

inline Table report_table(const std::string& dataset, std::size_t n, Ablation method, const std::vector<StageRow>& rows) {
    Table t{kReportHeader};
    for (const auto& r : rows)
        t.push_back({dataset, std::to_string(n), to_string(method), r.stage, std::to_string(r.epochs), real(r.learning_rate),
                     std::to_string(r.items), real(r.train.total), real(r.train.mse), real(r.train.perceptual),
                     real(r.train.mae), real(r.mae)});
    return t;
}

inline Table eval_table(const std::vector<AnnotatedImage>& images, const EvalReport& report) {
    Table t{{"id", "truth", "predicted", "abs_error"}};
    for (std::size_t i = 0; i < report.counts.size(); ++i) {
        const auto [truth, pred] = report.counts[i];
        t.push_back({images[i].id, real(truth), real(pred), real(std::abs(pred - truth))});
    }
    return t;
}

inline TransferPlan make_plan(const ExperimentConfig& cfg, std::vector<AnnotatedImage> source,
                              std::vector<AnnotatedImage> few, std::vector<AnnotatedImage> test) {
    TransferPlan plan;
    plan.model = cfg.effective_model();
    plan.source = std::move(source);
    plan.target_few = std::move(few);
    plan.target_test = std::move(test);
    plan.synthesis = cfg.synthesis;
    plan.epochs = cfg.epochs;
    plan.rates = cfg.rates;
    plan.batch_size = cfg.batch_size;
    plan.augment_source = cfg.source_augment;
    plan.direct_epochs = cfg.direct_epochs;
    plan.direct_rate = cfg.direct_rate;
    plan.seed = cfg.seed;
    plan.ablation = cfg.ablation;
    plan.workers = workers(cfg);
    return plan;
}

/// Runs one transfer plan and writes final.ckpt, extractor.dtlc,
/// report.tsv, eval.tsv and config.ini into `dir`.
inline TransferResult run_and_write_transfer(const ExperimentConfig& cfg, const TransferPlan& plan, const fs::path& dir,
                                             std::ostream& out) {
    save_config(cfg, dir);
    auto result = run_progressive_transfer(plan);
    save_state(result.final, dir, "final.ckpt");
    const auto table = report_table(cfg.target.name, plan.target_few.size(), plan.ablation, result.rows);
    write_text(dir / "report.tsv", to_tsv(table));
    const auto eval = evaluate(result.final.checkpoint, plan.target_test, plan.workers);
    write_text(dir / "eval.tsv", to_tsv(eval_table(plan.target_test, eval)));
    Table shown{{"stage", "epochs", "lr", "items", "loss", "perceptual", "train_mae", "test_mae"}};
    for (const auto& r : result.rows)
        shown.push_back({r.stage, std::to_string(r.epochs), real(r.learning_rate), std::to_string(r.items),
                         real(r.train.total), real(r.train.perceptual), real(r.train.mae), real(r.mae)});
    print_aligned(out, shown);
    return result;
}

inline SynthesisResult synthesize_and_write(const ExperimentConfig& cfg, const std::vector<AnnotatedImage>& few,
                                            const fs::path& dir, std::ostream& out) {
    SynthesisConfig sc = cfg.synthesis;
    sc.seed = synthesis_seed(cfg.seed);
    auto result = synthesize_dataset(few, sc);
    save_config(cfg, dir);
    save_synthesized_dataset(dir, result);
    const auto bad = verify_synthesized_dataset(dir);
    if (!bad.empty()) {
        std::string msg = "synthesized dataset failed verification:";
        for (const auto& b : bad) msg += "\n  " + b.id + ": " + b.reason;
        throw VerificationFailure(msg);
    }
    out << "synthesized " << result.samples.size() << " images from " << few.size() << " annotated inputs, counts "
        << result.count_range.first << ".." << result.count_range.second << ", " << result.real_patches.size()
        << " real + " << result.generated_patches.size() << " generated patches\n";
    if (!result.gan_log.empty()) {
        const auto& g = result.gan_log.back();
        out << "gan final: d_loss " << real(g.d_loss) << " g_loss " << real(g.g_loss) << "\n";
    }
    return result;
}

inline TrainedState pretrain_and_write(const ExperimentConfig& cfg, const std::vector<AnnotatedImage>& source,
                                       const fs::path& dir, std::ostream& out) {
    const auto samples = make_samples(source, cfg.synthesis.sigma);
    EpochMetrics m;
    auto state = pretrain_source(cfg.effective_model(), samples, cfg.epochs.pretrain, cfg.rates.pretrain, cfg.batch_size,
                                 pretrain_seed(cfg.seed), &m, cfg.source_augment);
    save_config(cfg, dir);
    save_state(state, dir, "source.ckpt");
    out << "pretrained " << cfg.epochs.pretrain << " epochs on " << source.size() << " source images: loss "
        << real(m.total) << " mse " << real(m.mse) << " perceptual " << real(m.perceptual) << " train_mae " << real(m.mae)
        << "\n";
    return state;
}

// --- commands -------------------------------------------------------------------------

inline int cmd_generate(const Common& common, const std::string& domain, std::ostream& out) {
    const auto cfg = resolve_config(common);
    const Split split = domain == "source" ? Split::source : domain == "target-few" ? Split::few : Split::test;
    const auto images = generate_split(cfg, split);
    const auto dir = out_dir(common, cfg);
    save_config(cfg, dir);
    save_annotated_dataset(dir, images, split_seed(cfg, split));
    const auto [mean, sd] = count_stats(images);
    out << "images " << images.size() << "\ncount mean " << real(mean) << " std " << real(sd) << "\n";
    return kExitOk;
}

inline int cmd_pretrain(const Common& common, const std::string& data, std::ostream& out) {
    const auto cfg = resolve_config(common);
    pretrain_and_write(cfg, split_data(cfg, Split::source, data), out_dir(common, cfg), out);
    return kExitOk;
}

inline int cmd_synthesize(const Common& common, const std::string& few, std::ostream& out) {
    const auto cfg = resolve_config(common);
    const auto images = split_data(cfg, Split::few, few);
    if (images.empty()) throw std::invalid_argument("no annotated images" + (few.empty() ? std::string() : " in " + few));
    synthesize_and_write(cfg, images, out_dir(common, cfg), out);
    return kExitOk;
}

struct TransferArgs {
    std::optional<std::string> ablation;
    std::string pretrained;
    std::string synth;
    std::string source;
    std::string few;
    std::string test;
};

inline int cmd_transfer(const Common& common, const TransferArgs& a, std::ostream& out, std::ostream& err) {
    auto cfg = resolve_config(common);
    if (a.ablation) cfg.ablation = parse_ablation(*a.ablation);
    auto plan = make_plan(cfg, split_data(cfg, Split::source, a.source), split_data(cfg, Split::few, a.few),
                          split_data(cfg, Split::test, a.test));
    if (!a.pretrained.empty()) {
        plan.pretrained = load_state(fs::path(a.pretrained) / "source.ckpt");
        ModelConfig wanted = plan.model;
        if (plan.ablation == Ablation::no_disentangle) wanted.disentangle = false;
        if (plan.ablation != Ablation::direct && plan.pretrained->checkpoint.config != wanted)
            err << "note: pretrained checkpoint has a different model config; pretraining again\n";
    }
    if (!a.synth.empty()) plan.synthesized = load_synthesized_samples(a.synth);
    run_and_write_transfer(cfg, plan, out_dir(common, cfg), out);
    return kExitOk;
}

inline int cmd_evaluate(const Common& common, const std::string& ckpt, const std::string& data, std::ostream& out) {
    const auto cfg = resolve_config(common);
    const auto checkpoint = load_checkpoint(ckpt);
    const auto images = load_annotated_dataset(data);
    if (images.empty()) throw std::invalid_argument("dataset " + data + " holds no annotated images");
    const auto report = evaluate(checkpoint, images, workers(cfg));
    const auto table = eval_table(images, report);
    out << "mae " << real(report.mae) << "\n";
    print_aligned(out, table);
    if (!common.out.empty()) {
        save_config(cfg, common.out);
        write_text(fs::path(common.out) / "eval.tsv", to_tsv(table));
    }
    return kExitOk;
}

inline int cmd_gradcheck(const Common& common, double threshold, std::ostream& out) {
    const auto cfg = resolve_config(common);
    const auto checks = run_gradchecks(cfg.seed);
    Table t{{"op", "max_rel_error", "probes", "status"}};
    bool ok = true;
    for (const auto& c : checks) {
        const bool pass = c.max_rel_error < threshold;
        ok = ok && pass;
        t.push_back({c.name, real(c.max_rel_error), std::to_string(c.probes), pass ? "ok" : "FAIL"});
    }
    print_aligned(out, t);
    if (!common.out.empty()) {
        save_config(cfg, common.out);
        write_text(fs::path(common.out) / "gradcheck.tsv", to_tsv(t));
    }
    if (!ok) throw VerificationFailure("relative error at or above threshold " + real(threshold));
    return kExitOk;
}

/// Final-stage MAE of each run directory, as (dataset, N, method, mae).
inline Table combined_report(const std::vector<std::string>& dirs) {
    std::vector<std::tuple<std::string, std::size_t, std::string, std::string>> rows;
    for (const auto& d : dirs) {
        const auto path = fs::path(d) / "report.tsv";
        if (!fs::exists(path)) throw FormatError("run directory " + d + " has no report.tsv");
        const auto t = read_tsv(path);
        if (t.size() < 2 || t.front() != kReportHeader) throw FormatError(path.string() + ": not a transfer report");
        const auto& last = t.back();
        if (last.size() != kReportHeader.size()) throw FormatError(path.string() + ": malformed row");
        rows.emplace_back(last[0], detail::parse_size(last[1], "N"), last[2], last[11]);
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a)) < std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b));
    });
    Table t{{"dataset", "N", "method", "mae"}};
    for (const auto& [ds, n, method, mae] : rows) t.push_back({ds, std::to_string(n), method, mae});
    return t;
}

inline int cmd_report(const std::vector<std::string>& dirs, const std::string& out_file, std::ostream& out) {
    const auto t = combined_report(dirs);
    if (out_file.empty()) {
        out << to_tsv(t);
    } else {
        write_text(out_file, to_tsv(t));
        print_aligned(out, t);
    }
    return kExitOk;
}

inline bool needs_pretrain(Ablation a) { return a != Ablation::direct; }
inline bool needs_synthesis(Ablation a) { return a != Ablation::direct && a != Ablation::no_synth; }

/// generate -> pretrain -> synthesize -> transfer -> evaluate for every
/// bench seed and method. Layout: <out>/seed_<s>/{data,pretrain,synth,<method>}.
inline int cmd_bench(const Common& common, std::ostream& out) {
    const auto base = resolve_config(common);
    const auto root = out_dir(common, base);
    save_config(base, root);
    if (base.bench_seeds.empty() || base.bench_methods.empty()) throw ConfigError("bench needs bench_seeds and bench_methods");
    Table bench{{"seed", "method", "mae"}};
    std::map<std::string, std::vector<double>> by_method;
    for (const auto s : base.bench_seeds) {
        ExperimentConfig cfg = base;
        cfg.seed = s;
        const auto dir = root / ("seed_" + std::to_string(s));
        out << "== seed " << s << "\n";

        for (const auto split : {Split::source, Split::few, Split::test}) {
            const char* name = split == Split::source ? "source" : split == Split::few ? "few" : "test";
            save_annotated_dataset(dir / "data" / name, generate_split(cfg, split), split_seed(cfg, split));
        }
        const auto source = load_annotated_dataset(dir / "data" / "source");
        const auto few = load_annotated_dataset(dir / "data" / "few");
        const auto test = load_annotated_dataset(dir / "data" / "test");

        const auto any = [&](auto pred) { return std::any_of(base.bench_methods.begin(), base.bench_methods.end(), pred); };
        std::optional<TrainedState> pretrained;
        if (any(needs_pretrain)) {
            pretrain_and_write(cfg, source, dir / "pretrain", out);
            pretrained = load_state(dir / "pretrain" / "source.ckpt");
        }
        std::optional<std::vector<Sample>> synth;
        if (any(needs_synthesis)) {
            synthesize_and_write(cfg, few, dir / "synth", out);
            synth = load_synthesized_samples(dir / "synth");
        }

        for (const auto method : base.bench_methods) {
            ExperimentConfig mc = cfg;
            mc.ablation = method;
            auto plan = make_plan(mc, source, few, test);
            plan.pretrained = pretrained;
            plan.synthesized = synth;
            out << "-- " << to_string(method) << "\n";
            const auto result = run_and_write_transfer(mc, plan, dir / to_string(method), out);
            const double mae = result.rows.back().mae;
            bench.push_back({std::to_string(s), to_string(method), real(mae)});
            by_method[to_string(method)].push_back(mae);
        }
    }
    write_text(root / "bench.tsv", to_tsv(bench));
    Table summary{{"method", "seeds", "mean_mae"}};
    for (const auto method : base.bench_methods) {
        const auto& v = by_method[to_string(method)];
        double mean = 0.0;
        for (double x : v) mean += x;
        summary.push_back({to_string(method), std::to_string(v.size()), real(mean / static_cast<double>(v.size()))});
    }
    write_text(root / "summary.tsv", to_tsv(summary));
    out << "== summary\n";
    print_aligned(out, summary);
    return kExitOk;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Few-shot cell counting by progressive transfer learning", "dtl-count"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every command");

    cli::Common common;
    std::string domain = "source", data, few, ckpt, report_out;
    double threshold = 1e-4;
    cli::TransferArgs targs;
    std::vector<std::string> dirs;

    auto* gen = app.add_subcommand("generate", "write a procedurally generated dataset");
    cli::add_common(gen, common);
    gen->add_option("--domain", domain, "which split to generate")
        ->check(CLI::IsMember({"source", "target-few", "target-test"}));

    auto* pre = app.add_subcommand("pretrain", "train on the source domain; writes source.ckpt");
    cli::add_common(pre, common);
    pre->add_option("--data", data, "source dataset directory (default: config or generated)");

    auto* syn = app.add_subcommand("synthesize", "synthesize target images from a few annotated ones");
    cli::add_common(syn, common);
    syn->add_option("--few", few, "annotated target dataset directory (default: config or generated)");

    auto* tra = app.add_subcommand("transfer", "progressive transfer; writes final.ckpt and report.tsv");
    cli::add_common(tra, common);
    tra->add_option("--ablation", targs.ablation, "none, no_disentangle, no_synth, joint_finetune or direct");
    tra->add_option("--pretrained", targs.pretrained, "directory holding source.ckpt from `pretrain`");
    tra->add_option("--synth", targs.synth, "directory written by `synthesize`");
    tra->add_option("--source", targs.source, "source dataset directory");
    tra->add_option("--few", targs.few, "annotated target dataset directory");
    tra->add_option("--test", targs.test, "held-out target dataset directory");

    auto* eva = app.add_subcommand("evaluate", "count MAE of a checkpoint on an annotated dataset");
    cli::add_common(eva, common);
    eva->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eva->add_option("--data", data, "annotated dataset directory")->required();

    auto* gra = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op and the full loss");
    cli::add_common(gra, common);
    gra->add_option("--threshold", threshold, "maximum allowed relative error");

    auto* rep = app.add_subcommand("report", "combine report.tsv files of several runs");
    rep->add_option("dirs", dirs, "run directories")->required();
    rep->add_option("--out", report_out, "TSV output file (default: TSV to stdout)");

    auto* ben = app.add_subcommand("bench", "generate, pretrain, synthesize, transfer and evaluate per bench seed");
    cli::add_common(ben, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cli::cmd_generate(common, domain, out);
        if (pre->parsed()) return cli::cmd_pretrain(common, data, out);
        if (syn->parsed()) return cli::cmd_synthesize(common, few, out);
        if (tra->parsed()) return cli::cmd_transfer(common, targs, out, err);
        if (eva->parsed()) return cli::cmd_evaluate(common, ckpt, data, out);
        if (gra->parsed()) return cli::cmd_gradcheck(common, threshold, out);
        if (rep->parsed()) return cli::cmd_report(dirs, report_out, out);
        if (ben->parsed()) return cli::cmd_bench(common, out);
    } catch (const VerificationFailure& e) {
        err << "verification failed: " << e.what() << "\n";
        return kExitVerification;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace dtlc
