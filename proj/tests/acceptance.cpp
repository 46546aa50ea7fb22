// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance <bench.ini>

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>

#include "dtlc/cli.hpp"
#include "support.hpp"

namespace dtlc {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Verdict {
    bool pass;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int run_command(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "dtl-count");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

Verdict gradients() {
    const auto t0 = Clock::now();
    std::string out, err;
    const int code = run_command({"gradcheck", "--seed", "1", "--threshold", "1e-4"}, &out, &err);
    const double t = seconds_since(t0);
    double worst = 0.0;
    std::size_t listed = 0;
    for (const auto& c : run_gradchecks(1)) {
        worst = std::max(worst, c.max_rel_error);
        if (out.find(c.name) != std::string::npos) ++listed;
    }
    const bool has_loss = out.find("total_loss") != std::string::npos;
    std::ostringstream d;
    d << "exit " << code << ", " << listed << " ops listed, max rel error " << worst << ", " << t << " s";
    return {code == 0 && has_loss && listed == differentiable_ops().size() && worst < 1e-4 && t < 120.0, d.str()};
}

Verdict density_oracle() {
    Rng rng(20240601);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, 200));
        const std::size_t h = 64 + 8 * static_cast<std::size_t>(rng.uniform_int(0, 8));
        const std::size_t w = 64 + 8 * static_cast<std::size_t>(rng.uniform_int(0, 8));
        DotAnnotations a{{}, w, h};
        for (std::size_t i = 0; i < k; ++i)
            a.points.push_back({rng.uniform(0.0, static_cast<double>(w) - 1e-9), rng.uniform(0.0, static_cast<double>(h) - 1e-9)});
        worst = std::max(worst, std::abs(estimate_count(render_density_map(a)) - static_cast<double>(k)));
    }
    return {worst <= 1e-6, "100 sets, max |integral - count| = " + detail::format_real(worst)};
}

template <typename T>
std::size_t nonzero_grads(ParamGroup<T>& g) {
    std::size_t n = 0;
    for (auto& p : g.params) {
        if (!p.tensor.has_grad()) continue;
        for (T v : p.tensor.grad()) n += v != T{0};
    }
    return n;
}

Verdict disentangling() {
    std::size_t leaks = 0, reached = 0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        auto m = gradcheck_model(seed);
        const auto ex = PerceptualExtractor<double>::snapshot(m);
        const std::size_t batch = 1 + seed % 3;
        const auto x = test::random_tensor<double>({batch, 1, 16, 16}, 100 + seed, 0.0, 1.0);
        const auto y = test::random_tensor<double>({batch, 1, 16, 16}, 200 + seed, 0.0, 0.05);
        const auto s = test::random_tensor<double>({batch, 1, 16, 16}, 300 + seed, 0.0, 1.0);

        auto out = m.forward(x);
        auto loss = total_loss(out.density, y, out.style, &s, &ex, 100.0);
        backward(loss.mse);
        leaks += nonzero_grads(m.decoder_specific());
        reached += nonzero_grads(m.decoder_agnostic()) > 0;
        m.zero_grad();

        out = m.forward(x);
        loss = total_loss(out.density, y, out.style, &s, &ex, 100.0);
        backward(*loss.perceptual);
        leaks += nonzero_grads(m.decoder_agnostic());
        reached += nonzero_grads(m.decoder_specific()) > 0;
    }
    return {leaks == 0 && reached == 16,
            "8 random batches, " + std::to_string(leaks) + " nonzero cross-gradient entries, " + std::to_string(reached) +
                "/16 own-path gradients present"};
}

Verdict synthesis_consistency() {
    const auto few = generate_domain(toy_target_domain(), 3, 77);
    SynthesisConfig cfg;
    cfg.num_images = 200;
    cfg.gan.steps = 200;
    cfg.gan_patches = 32;
    cfg.seed = 5;
    const auto result = synthesize_dataset(few, cfg);
    double worst = 0.0;
    std::size_t changed = 0, checked = 0;
    for (const auto& s : result.samples) {
        worst = std::max(worst, std::abs(estimate_count(s.density) - static_cast<double>(s.annotations.points.size())));
        const std::size_t plane = s.style.area();
        for (std::size_t y = 0; y < s.style.height; ++y)
            for (std::size_t x = 0; x < s.style.width; ++x) {
                bool far = true;
                for (const auto& p : s.annotations.points)
                    if (std::abs(static_cast<double>(x) - p.x) <= 17.0 && std::abs(static_cast<double>(y) - p.y) <= 17.0) far = false;
                if (!far) continue;
                for (std::size_t c = 0; c < s.style.channels; ++c) {
                    ++checked;
                    changed += s.image.pixels[c * plane + y * s.style.width + x] != s.style.pixels[c * plane + y * s.style.width + x];
                }
            }
    }
    std::size_t inpaint_changed = 0;
    for (const auto& img : few) {
        const auto mask = extract_patches(img).hole_mask;
        const auto filled = inpaint(img.pixels, mask);
        for (std::size_t c = 0; c < img.pixels.channels; ++c)
            for (std::size_t i = 0; i < img.pixels.area(); ++i)
                if (!mask.values[i]) inpaint_changed += filled.pixels[c * img.pixels.area() + i] != img.pixels.pixels[c * img.pixels.area() + i];
    }
    std::ostringstream d;
    d << result.samples.size() << " samples, max |integral - count| " << worst << ", " << changed << "/" << checked
      << " far-field pixels changed, " << inpaint_changed << " unmasked pixels changed by inpainting";
    return {result.samples.size() == 200 && worst <= 1e-6 && changed == 0 && checked > 0 && inpaint_changed == 0, d.str()};
}

Verdict surgery() {
    ModelConfig cfg = tiny_model_config(3);
    const auto src = pretrain_source(cfg, make_samples(generate_domain(toy_source_domain(), 4, 9)), 1, 1e-3, 2, 4).checkpoint;
    const auto out = replace_domain_specific_decoder(src, 1234);
    std::size_t same = 0, others = 0, differ = 0, specific = 0;
    for (std::size_t i = 0; i < src.tensors.size(); ++i) {
        const auto& a = src.tensors[i];
        const auto& b = out.tensors[i];
        const bool bitwise = a.name == b.name && a.values.size() == b.values.size() &&
                             std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
        if (group_of(a.name) == "decoder_specific") {
            ++specific;
            differ += !bitwise;
        } else {
            ++others;
            same += bitwise;
        }
    }
    std::ostringstream d;
    d << same << "/" << others << " other tensors bitwise equal, " << differ << "/" << specific
      << " decoder_specific tensors redrawn, stage " << out.stage;
    return {same == others && others > 0 && specific > 0 && differ == specific && out.stage == "surgered", d.str()};
}

std::map<std::string, double> read_summary(const fs::path& path) {
    std::map<std::string, double> out;
    const auto rows = cli::read_tsv(path);
    for (std::size_t i = 1; i < rows.size(); ++i) out[rows[i][0]] = std::stod(rows[i][2]);
    return out;
}

Verdict benchmark(const std::string& config, const fs::path& dir) {
    const auto t0 = Clock::now();
    std::string err;
    const int code = run_command({"bench", "--config", config, "--out", dir.string()}, nullptr, &err);
    const double t = seconds_since(t0);
    if (code != 0) return {false, "bench exited " + std::to_string(code) + ": " + err};
    const auto summary = read_summary(dir / "summary.tsv");
    const auto rows = cli::read_tsv(dir / "bench.tsv");
    const double ours = summary.at("none"), direct = summary.at("direct");
    std::ostringstream d;
    d << "3-seed mean MAE progressive " << ours << " vs direct " << direct << " (" << rows.size() - 1 << " runs), "
      << t / 60.0 << " min";
    return {ours < direct && rows.size() == 7 && t < 45 * 60.0, d.str()};
}

const std::vector<std::string> kAllMethods = {"none", "no_disentangle", "no_synth", "joint_finetune", "direct"};

std::string ablation_config() {
    return test::small_config_text(11) + "bench_seeds = 11\nbench_methods = none,no_disentangle,no_synth,joint_finetune,direct\n";
}

Verdict ablations(const fs::path& dir) {
    const auto rows = cli::read_tsv(dir / "bench.tsv");
    std::size_t complete = 0, nonzero_perceptual = 0, perceptual_values = 0;
    for (const auto& m : kAllMethods) {
        const auto report = cli::read_tsv(dir / "seed_11" / m / "report.tsv");
        if (report.size() >= 2 && report.front() == cli::kReportHeader && std::isfinite(std::stod(report.back()[11]))) ++complete;
    }
    const auto report = cli::read_tsv(dir / "seed_11" / "no_disentangle" / "report.tsv");
    for (std::size_t i = 1; i < report.size(); ++i) {
        ++perceptual_values;
        nonzero_perceptual += std::stod(report[i][9]) != 0.0;
    }
    const auto ckpt = load_checkpoint(dir / "seed_11" / "no_disentangle" / "final.ckpt");
    for (const auto& line : ckpt.metrics) {
        ++perceptual_values;
        nonzero_perceptual += detail::parse_metric_line(line).perceptual != 0.0;
    }
    std::size_t style_tensors = 0;
    for (const auto& t : ckpt.tensors) style_tensors += group_of(t.name) == "decoder_specific";
    std::ostringstream d;
    d << complete << "/" << kAllMethods.size() << " methods reported a final MAE; no_disentangle perceptual nonzero in "
      << nonzero_perceptual << " of " << perceptual_values << " report rows and metric lines";
    return {complete == kAllMethods.size() && rows.size() == kAllMethods.size() + 1 && nonzero_perceptual == 0 &&
                perceptual_values > 0 && style_tensors == 0,
            d.str()};
}

std::map<std::string, std::string> snapshot_files(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = test::slurp(e.path());
    return files;
}

Verdict determinism(const fs::path& a, const fs::path& b) {
    const auto fa = snapshot_files(a), fb = snapshot_files(b);
    std::size_t ckpts = 0, reports = 0, mismatched = 0;
    for (const auto& [name, bytes] : fa) {
        const auto it = fb.find(name);
        if (it == fb.end() || it->second != bytes) ++mismatched;
        ckpts += name.ends_with(".ckpt");
        reports += name.ends_with("report.tsv");
    }
    std::ostringstream d;
    d << fa.size() << " files (" << ckpts << " checkpoints, " << reports << " reports), " << mismatched
      << " differ or are missing";
    return {fa.size() == fb.size() && mismatched == 0 && ckpts > 0 && reports > 0, d.str()};
}

Verdict gan_sanity() {
    const std::vector<CellPatch> constant(8, CellPatch(32, 32, 1, 0.3f));
    PatchGanConfig cfg;
    cfg.steps = 2000;
    cfg.seed = 17;
    const auto gan = train_patch_gan(constant, cfg);
    const auto samples = sample_patches(gan, 200, 18);
    double mean = 0.0;
    std::size_t n = 0;
    for (const auto& p : samples)
        for (float v : p.pixels) {
            mean += v;
            ++n;
        }
    mean /= static_cast<double>(n);
    return {std::abs(mean - 0.3) < 0.1, "sample mean " + detail::format_real(mean) + " after 2000 steps (target 0.3)"};
}

}  // namespace
}  // namespace dtlc

int main(int argc, char** argv) {
    using namespace dtlc;
    const std::string bench_config = argc > 1 ? argv[1] : "configs/bench.ini";
    test::TempDir work("acceptance");
    test::spit(work / "ablation.ini", ablation_config());

    bool ok = true;
    const auto report = [&](int n, const std::function<Verdict()>& check) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        ok = ok && v.pass;
        std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
    };

    report(1, gradients);
    report(2, density_oracle);
    report(3, disentangling);
    report(4, synthesis_consistency);
    report(5, surgery);
    report(6, [&] { return benchmark(bench_config, work / "bench"); });
    const auto run_twice = [&] {
        for (const char* name : {"run_a", "run_b"}) {
            std::string err;
            if (run_command({"bench", "--config", (work / "ablation.ini").string(), "--out", (work / name).string()}, nullptr, &err) != 0)
                throw std::runtime_error(std::string("bench failed: ") + err);
        }
    };
    bool ran = false;
    report(7, [&] {
        run_twice();
        ran = true;
        return ablations(work / "run_a");
    });
    report(8, [&] {
        if (!ran) run_twice();
        return determinism(work / "run_a", work / "run_b");
    });
    report(9, gan_sanity);
    return ok ? 0 : 1;
}
