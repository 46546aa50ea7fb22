#pragma once

// Progressive transfer: source pretraining, domain-specific decoder
// replacement, fine-tuning on synthesized target images, then on the few
// annotated real target images. Ablations drop or merge stages.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtlc/checkpoint.hpp"
#include "dtlc/domain.hpp"
#include "dtlc/model.hpp"
#include "dtlc/optim.hpp"
#include "dtlc/parallel.hpp"
#include "dtlc/synthesis.hpp"
#include "dtlc/training.hpp"

namespace dtlc {

enum class Ablation { none, no_disentangle, no_synth, joint_finetune, direct };

inline const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_disentangle: return "no_disentangle";
        case Ablation::no_synth: return "no_synth";
        case Ablation::joint_finetune: return "joint_finetune";
        case Ablation::direct: return "direct";
    }
    return "?";
}

inline Ablation parse_ablation(const std::string& s) {
    for (auto a : {Ablation::none, Ablation::no_disentangle, Ablation::no_synth, Ablation::joint_finetune, Ablation::direct})
        if (s == to_string(a)) return a;
    throw std::invalid_argument("unknown ablation '" + s + "' (none, no_disentangle, no_synth, joint_finetune, direct)");
}

/// Position of a stage tag in the fixed progression, or -1.
inline int stage_rank(const std::string& tag) {
    for (int i = 0; i < static_cast<int>(std::size(kStageTags)); ++i)
        if (tag == kStageTags[i]) return i;
    return -1;
}

struct StageEpochs {
    std::size_t pretrain = 200;
    std::size_t synth = 20;
    std::size_t real = 50;
};

struct StageRates {
    double pretrain = 1e-3;
    double synth = 1e-4;
    double real = 1e-5;
};

struct TrainedState {
    Checkpoint checkpoint;
    PerceptualExtractor<float> extractor;  // empty without a style decoder
};

struct TransferPlan {
    ModelConfig model;
    std::vector<AnnotatedImage> source;       // needs ground-truth style images
    std::vector<AnnotatedImage> target_few;   // the N annotated real target images
    std::vector<AnnotatedImage> target_test;  // held-out target images for the report
    SynthesisConfig synthesis;
    StageEpochs epochs;
    StageRates rates;
    std::size_t batch_size = 4;
    /// Random flips and quarter turns of the source images while pretraining.
    bool augment_source = true;
    /// Training budget of the `direct` baseline (from scratch on target_few).
    std::size_t direct_epochs = 200;
    double direct_rate = 1e-3;
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::none;
    std::size_t workers = 1;  // evaluation only
    /// Stage-1 result to reuse instead of pretraining. Used only when its
    /// model config matches the one this plan trains.
    std::optional<TrainedState> pretrained;
    /// Stage-3 training set to reuse instead of synthesizing.
    std::optional<std::vector<Sample>> synthesized;
};

struct EvalReport {
    double mae = 0.0;
    std::vector<std::pair<double, double>> counts;  // (truth, predicted) per image

    bool operator==(const EvalReport&) const = default;
};

struct StageRow {
    std::string stage;
    std::size_t epochs = 0;
    double learning_rate = 0.0;
    std::size_t items = 0;
    EpochMetrics train;  // last epoch
    double mae = 0.0;    // on the target test set

    bool operator==(const StageRow&) const = default;
};

struct TransferResult {
    TrainedState final;
    std::vector<StageRow> rows;
};

namespace detail {

inline std::string metric_line(const std::string& stage, std::size_t epoch, const EpochMetrics& m) {
    return "stage=" + stage + " epoch=" + std::to_string(epoch) + " loss=" + format_real(m.total) +
           " mse=" + format_real(m.mse) + " perceptual=" + format_real(m.perceptual) + " mae=" + format_real(m.mae);
}

/// Inverse of metric_line for the fields EpochMetrics keeps.
inline EpochMetrics parse_metric_line(const std::string& line) {
    EpochMetrics m;
    std::istringstream in(line);
    std::string field;
    while (in >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const auto key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "loss") m.total = parse_real(value, key);
        else if (key == "mse") m.mse = parse_real(value, key);
        else if (key == "perceptual") m.perceptual = parse_real(value, key);
        else if (key == "mae") m.mae = parse_real(value, key);
    }
    return m;
}

inline void require_advance(const std::string& from, const std::string& to) {
    const int a = stage_rank(from), b = stage_rank(to);
    if (a < 0 || b < 0 || b <= a) throw std::logic_error("stage tag cannot move from '" + from + "' to '" + to + "'");
}

}  // namespace detail

/// Trains the checkpoint for `epochs` passes over `data` and advances its
/// stage tag. Adam state starts fresh; epoch e shuffles with
/// derive_seed(seed, e). With `augment`, epoch e sees every sample under
/// a random symmetry drawn from derive_seed(derive_seed(seed, e), 1).
inline TrainedState finetune(const TrainedState& start, std::span<const Sample> data, std::size_t epochs, double lr,
                             std::size_t batch_size, std::uint64_t seed, const std::string& stage,
                             EpochMetrics* last = nullptr, bool augment = false) {
    if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
    detail::require_advance(start.checkpoint.stage, stage);
    auto model = model_from_checkpoint<float>(start.checkpoint);
    const PerceptualExtractor<float>* extractor = model.config().disentangle ? &start.extractor : nullptr;
    AdamState adam;
    adam.learning_rate = lr;
    TrainedState out = start;
    EpochMetrics m;
    for (std::size_t e = 0; e < epochs; ++e) {
        if (augment) {
            const auto seen = random_dihedral(data, derive_seed(derive_seed(seed, e), 1));
            m = train_epoch(model, std::span<const Sample>(seen), adam, batch_size, derive_seed(seed, e), extractor);
        } else {
            m = train_epoch(model, data, adam, batch_size, derive_seed(seed, e), extractor);
        }
        out.checkpoint.metrics.push_back(detail::metric_line(stage, e + 1, m));
    }
    const auto metrics = std::move(out.checkpoint.metrics);
    out.checkpoint = checkpoint_from_model(model, stage, start.checkpoint.seed);
    out.checkpoint.metrics = metrics;
    out.checkpoint.rng_state = derive_seed(seed, epochs);
    if (last) *last = m;
    return out;
}

/// Freshly initialized model tagged `init`, with an extractor snapshot of
/// its encoder.
inline TrainedState initial_state(const ModelConfig& config) {
    TrainedState init;
    const CounterModel<float> model(config);
    init.checkpoint = checkpoint_from_model(model, "init", config.seed);
    if (config.disentangle) init.extractor = PerceptualExtractor<float>::snapshot(model);
    return init;
}

/// Stage 1. Trains a freshly initialized model on the source set. While
/// pretraining, the perceptual extractor is a frozen copy of the
/// initialized encoder; the returned extractor is the trained encoder,
/// frozen for the later stages.
inline TrainedState pretrain_source(const ModelConfig& config, std::span<const Sample> source, std::size_t epochs,
                                    double lr, std::size_t batch_size, std::uint64_t seed, EpochMetrics* last = nullptr,
                                    bool augment = true) {
    if (source.empty()) throw std::invalid_argument("pretrain_source: empty source set");
    const auto init = initial_state(config);
    auto out = epochs == 0 ? init : finetune(init, source, epochs, lr, batch_size, seed, "source", last, augment);
    out.checkpoint.stage = "source";
    if (config.disentangle) out.extractor = PerceptualExtractor<float>::snapshot(model_from_checkpoint<float>(out.checkpoint));
    return out;
}

/// Redraws every decoder_specific tensor from `seed`; all other tensors
/// are copied unchanged.
inline Checkpoint replace_domain_specific_decoder(const Checkpoint& ckpt, std::uint64_t seed) {
    for (const auto& t : ckpt.tensors) {
        const auto g = group_of(t.name);
        if (std::find_if(std::begin(kGroupNames), std::end(kGroupNames), [&](const char* n) { return g == n; }) ==
            std::end(kGroupNames))
            throw std::invalid_argument("replace_domain_specific_decoder: tensor '" + t.name + "' is in no parameter group");
    }
    CounterModel<float> fresh(ckpt.config);
    initialize_group(fresh.decoder_specific(), seed);
    Checkpoint out = ckpt;
    for (auto& t : out.tensors) {
        if (group_of(t.name) != kGroupNames[2]) continue;
        const NamedTensor<float>* src = nullptr;
        for (const auto& p : fresh.decoder_specific().params)
            if (p.name == t.name) src = &p;
        if (!src || src->tensor.shape() != t.shape)
            throw std::invalid_argument("replace_domain_specific_decoder: tensor '" + t.name + "' does not match the config");
        const auto d = src->tensor.data();
        t.values.assign(d.begin(), d.end());
    }
    out.stage = "surgered";
    return out;
}

inline EvalReport evaluate(const Checkpoint& ckpt, std::span<const AnnotatedImage> test, std::size_t workers = 1) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    const auto model = model_from_checkpoint<float>(ckpt);
    EvalReport report;
    report.counts.resize(test.size());
    parallel_for(test.size(), workers, [&](std::size_t i) {
        const Image& img = test[i].pixels;
        const auto predicted = predict_counts(model, std::span<const Image>(&img, 1), 1);
        report.counts[i] = {static_cast<double>(test[i].count()), predicted[0]};
    });
    std::vector<double> truth, pred;
    for (const auto& [t, p] : report.counts) {
        truth.push_back(t);
        pred.push_back(p);
    }
    report.mae = mae(pred, truth);
    return report;
}

/// Inpainted style ground truth for annotated real images.
inline std::vector<Image> inpainted_styles(std::span<const AnnotatedImage> images, const InpaintOptions& options = {}) {
    std::vector<Image> out;
    for (const auto& img : images) out.push_back(inpaint(img.pixels, extract_patches(img).hole_mask, options));
    return out;
}

/// Seeds of the individual stages, so stages run separately (for example
/// from the command line) reproduce the chained pipeline exactly.
inline std::uint64_t pretrain_seed(std::uint64_t plan_seed) { return derive_seed(plan_seed, 10); }
inline std::uint64_t synthesis_seed(std::uint64_t plan_seed) { return derive_seed(plan_seed, 30); }

inline TransferResult run_progressive_transfer(const TransferPlan& plan) {
    if (plan.target_few.empty()) throw std::invalid_argument("run_progressive_transfer: no annotated target images");
    if (plan.target_test.empty()) throw std::invalid_argument("run_progressive_transfer: empty target test set");
    ModelConfig config = plan.model;
    if (plan.ablation == Ablation::no_disentangle) config.disentangle = false;

    TransferResult result;
    const auto add_row = [&](const std::string& stage, std::size_t epochs, double lr, std::size_t items,
                             const EpochMetrics& m, const TrainedState& state) {
        result.rows.push_back({stage, epochs, lr, items, m, evaluate(state.checkpoint, plan.target_test, plan.workers).mae});
    };
    const auto real_styles = inpainted_styles(plan.target_few, plan.synthesis.inpaint);
    const auto real = styled_samples(plan.target_few, real_styles, plan.synthesis.sigma);

    if (plan.ablation == Ablation::direct) {
        EpochMetrics m;
        auto state = finetune(initial_state(config), real, plan.direct_epochs, plan.direct_rate, plan.batch_size, derive_seed(plan.seed, 40),
                         "real_ft", &m);
        add_row("direct", plan.direct_epochs, plan.direct_rate, real.size(), m, state);
        result.final = std::move(state);
        return result;
    }

    EpochMetrics m;
    TrainedState state;
    if (plan.pretrained && plan.pretrained->checkpoint.config == config) {
        state = *plan.pretrained;
        if (state.checkpoint.stage != "source")
            throw std::invalid_argument("run_progressive_transfer: pretrained checkpoint is tagged '" +
                                        state.checkpoint.stage + "', expected 'source'");
        if (!state.checkpoint.metrics.empty()) m = detail::parse_metric_line(state.checkpoint.metrics.back());
        add_row("source", plan.epochs.pretrain, plan.rates.pretrain, plan.source.size(), m, state);
    } else {
        const auto source = make_samples(plan.source, plan.synthesis.sigma);
        state = pretrain_source(config, source, plan.epochs.pretrain, plan.rates.pretrain, plan.batch_size,
                                pretrain_seed(plan.seed), &m, plan.augment_source);
        add_row("source", plan.epochs.pretrain, plan.rates.pretrain, source.size(), m, state);
    }

    state.checkpoint = replace_domain_specific_decoder(state.checkpoint, derive_seed(plan.seed, 20));
    add_row("surgered", 0, 0.0, 0, EpochMetrics{}, state);

    std::vector<Sample> synth;
    if (plan.ablation != Ablation::no_synth) {
        if (plan.synthesized) {
            synth = *plan.synthesized;
        } else {
            SynthesisConfig sc = plan.synthesis;
            sc.seed = synthesis_seed(plan.seed);
            synth = synthesized_samples(synthesize_dataset(plan.target_few, sc).samples);
        }
    }

    if (plan.ablation == Ablation::joint_finetune) {
        std::vector<Sample> joint = synth;
        joint.insert(joint.end(), real.begin(), real.end());
        state = finetune(state, joint, plan.epochs.synth, plan.rates.synth, plan.batch_size, derive_seed(plan.seed, 31),
                         "real_ft", &m);
        add_row("joint_ft", plan.epochs.synth, plan.rates.synth, joint.size(), m, state);
    } else {
        if (plan.ablation != Ablation::no_synth) {
            if (synth.empty()) throw std::invalid_argument("run_progressive_transfer: synthesis produced no images");
            state = finetune(state, synth, plan.epochs.synth, plan.rates.synth, plan.batch_size,
                             derive_seed(plan.seed, 31), "synth_ft", &m);
            add_row("synth_ft", plan.epochs.synth, plan.rates.synth, synth.size(), m, state);
        }
        state = finetune(state, real, plan.epochs.real, plan.rates.real, plan.batch_size, derive_seed(plan.seed, 32),
                         "real_ft", &m);
        add_row("real_ft", plan.epochs.real, plan.rates.real, real.size(), m, state);
    }
    result.final = std::move(state);
    return result;
}

}  // namespace dtlc
