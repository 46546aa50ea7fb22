#include <gtest/gtest.h>

#include "support.hpp"

namespace dtlc {
namespace {

ModelConfig desk_model(std::size_t width, std::uint64_t seed) {
    ModelConfig c;
    c.base_width = width;
    c.encoder_blocks = default_encoder_blocks(width);
    c.agnostic_decoder_channels = {2 * width, width, 1};
    c.specific_decoder_channels = {2 * width, width, 1};
    c.seed = seed;
    return c;
}

double mean_count(const std::vector<AnnotatedImage>& images) {
    double m = 0.0;
    for (const auto& i : images) m += static_cast<double>(i.count());
    return m / static_cast<double>(images.size());
}

TEST(TrainingRun, OverfitsTenImages) {
    CounterModel<float> m(desk_model(4, 21));
    const auto ex = PerceptualExtractor<float>::snapshot(m);
    const auto data = make_samples(generate_domain(toy_source_domain(), 10, 22));
    AdamState adam;
    double first = 0.0, last = 0.0;
    for (std::size_t e = 0; e < 200; ++e) {
        const auto metrics = train_epoch(m, std::span<const Sample>(data), adam, 4, derive_seed(23, e), &ex);
        if (e == 0) first = metrics.mae;
        last = metrics.mae;
    }
    EXPECT_LE(last, 0.5 * first) << "epoch 1 " << first << ", epoch 200 " << last;
}

TEST(TrainingRun, SourcePretrainingGeneralizes) {
    const auto source = generate_domain(toy_source_domain(), 40, 31);
    const auto validation = generate_domain(toy_source_domain(), 20, 32);
    const auto state = pretrain_source(desk_model(8, 33), make_samples(source), 200, 1e-3, 4, 34);
    const auto report = evaluate(state.checkpoint, validation);
    EXPECT_LT(report.mae, 0.2 * mean_count(validation)) << "validation MAE " << report.mae;
}

TEST(TrainingRun, SyntheticStageImprovesOnTheSurgeredModel) {
    int improved = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        TransferPlan p;
        p.model = desk_model(4, derive_seed(seed, 1));
        p.source = generate_domain(toy_source_domain(), 16, derive_seed(seed, 2));
        p.target_few = generate_domain(toy_target_domain(), 5, derive_seed(seed, 3));
        p.target_test = generate_domain(toy_target_domain(), 10, derive_seed(seed, 4));
        p.synthesis.num_images = 40;
        p.synthesis.gan.steps = 300;
        p.synthesis.gan_patches = 32;
        p.epochs = {20, 5, 0};
        p.seed = seed;
        const auto r = run_progressive_transfer(p);
        ASSERT_EQ(r.rows[1].stage, "surgered");
        ASSERT_EQ(r.rows[2].stage, "synth_ft");
        improved += r.rows[2].mae < r.rows[1].mae;
    }
    EXPECT_GE(improved, 2);
}

}  // namespace
}  // namespace dtlc
