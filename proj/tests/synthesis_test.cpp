#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

namespace dtlc {
namespace {

Image ramp_image(std::size_t h, std::size_t w, std::size_t c = 1) {
    Image img(h, w, c);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                img.at(ch, y, x) = static_cast<float>((y * w + x + 7 * ch) % 251) / 250.0f;
    return img;
}

AnnotatedImage annotated(Image img, std::vector<Point> points) {
    AnnotatedImage a;
    a.annotations = {std::move(points), img.width, img.height};
    a.pixels = std::move(img);
    return a;
}

/// Mirror padding written out case by case.
std::size_t mirror(long i, std::size_t n) {
    const long last = static_cast<long>(n) - 1;
    while (i < 0 || i > last) {
        if (i < 0) i = -i;
        if (i > last) i = 2 * last - i;
    }
    return static_cast<std::size_t>(i);
}

TEST(ExtractPatches, InteriorAnnotations) {
    const auto img = annotated(ramp_image(96, 96), {{20, 20}, {50, 30}, {70, 70}, {30, 60}, {48, 48}});
    const auto ps = extract_patches(img);
    ASSERT_EQ(ps.patches.size(), 5u);
    for (const auto& p : ps.patches) {
        EXPECT_EQ(p.height, kPatchSize);
        EXPECT_EQ(p.width, kPatchSize);
    }
    EXPECT_LE(ps.hole_mask.area(), 5u * 1024u);
    EXPECT_GT(ps.hole_mask.area(), 1024u);
    // The first window lies fully inside: a plain crop.
    for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(ps.patches[0].at(0, y, x), img.pixels.at(0, 4 + y, 4 + x));
}

TEST(ExtractPatches, NoAnnotations) {
    const auto ps = extract_patches(annotated(ramp_image(64, 64), {}));
    EXPECT_TRUE(ps.patches.empty());
    EXPECT_EQ(ps.hole_mask.area(), 0u);
}

TEST(ExtractPatches, BorderWindowIsReflected) {
    const auto img = annotated(ramp_image(64, 80, 3), {{8, 8}});
    const auto ps = extract_patches(img);
    ASSERT_EQ(ps.patches.size(), 1u);
    const auto& p = ps.patches[0];
    EXPECT_EQ(p.height, 32u);
    EXPECT_EQ(p.width, 32u);
    for (std::size_t c = 0; c < 3; ++c)
        for (long y = 0; y < 32; ++y)
            for (long x = 0; x < 32; ++x)
                EXPECT_EQ(p.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)),
                          img.pixels.at(c, mirror(y - 8, 64), mirror(x - 8, 80)));
    // Mask is the window clipped to the image: rows/cols 0..23.
    EXPECT_EQ(ps.hole_mask.area(), 24u * 24u);
    EXPECT_EQ(ps.hole_mask.at(23, 23), 1);
    EXPECT_EQ(ps.hole_mask.at(24, 0), 0);
}

TEST(ExtractPatches, OutOfBoundsAnnotationIsRejected) {
    EXPECT_THROW(extract_patches(annotated(ramp_image(64, 64), {{70, 3}})), AnnotationError);
}

TEST(Inpaint, EmptyMaskIsIdentity) {
    const auto img = ramp_image(40, 50, 3);
    EXPECT_EQ(inpaint(img, Mask(40, 50)), img);
}

TEST(Inpaint, ConstantImageStaysConstant) {
    Image img(48, 48, 1, 0.42f);
    Mask m(48, 48);
    for (std::size_t y = 10; y < 30; ++y)
        for (std::size_t x = 5; x < 40; ++x) m.at(y, x) = 1;
    const auto out = inpaint(img, m);
    for (float v : out.pixels) EXPECT_NEAR(v, 0.42f, 1e-4);
}

TEST(Inpaint, MaximumPrincipleOnAGradient) {
    Image img(48, 64, 1);
    for (std::size_t y = 0; y < 48; ++y)
        for (std::size_t x = 0; x < 64; ++x) img.at(0, y, x) = static_cast<float>(x) / 63.0f;
    Mask m(48, 64);
    for (std::size_t y = 16; y < 32; ++y)
        for (std::size_t x = 24; x < 40; ++x) {
            m.at(y, x) = 1;
            img.at(0, y, x) = 5.0f;  // garbage under the hole
        }
    float lo = 1e9f, hi = -1e9f;
    for (std::size_t y = 15; y <= 32; ++y)
        for (std::size_t x = 23; x <= 40; ++x)
            if (!m.at(y, x)) {
                lo = std::min(lo, img.at(0, y, x));
                hi = std::max(hi, img.at(0, y, x));
            }
    const auto out = inpaint(img, m);
    for (std::size_t y = 0; y < 48; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
            if (m.at(y, x)) {
                EXPECT_GE(out.at(0, y, x), lo - 1e-6f);
                EXPECT_LE(out.at(0, y, x), hi + 1e-6f);
            } else {
                EXPECT_EQ(out.at(0, y, x), img.at(0, y, x));
            }
        }
}

TEST(Inpaint, NeverTouchesUnmaskedPixels) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto img = ramp_image(32, 40, 1 + 2 * (trial % 2));
        Mask m(32, 40);
        for (auto& v : m.values) v = rng.uniform() < 0.3 ? 1 : 0;
        const auto out = inpaint(img, m, {200, 1e-4});
        for (std::size_t c = 0; c < img.channels; ++c)
            for (std::size_t i = 0; i < img.area(); ++i) {
                if (!m.values[i]) {
                    EXPECT_EQ(out.pixels[c * img.area() + i], img.pixels[c * img.area() + i]);
                }
            }
    }
}

TEST(Inpaint, Errors) {
    Image img(8, 8, 1, 0.5f);
    Mask all(8, 8);
    std::fill(all.values.begin(), all.values.end(), 1);
    EXPECT_THROW(inpaint(img, all), std::invalid_argument);
    EXPECT_THROW(inpaint(img, Mask(8, 9)), DimensionError);
}

TEST(Augment, IdentitiesHold) {
    const auto img = ramp_image(32, 32, 3);
    EXPECT_EQ(augment(img, AugmentSpec{}), img);
    const AugmentSpec flip{0, true, false, 1.0};
    EXPECT_EQ(augment(augment(img, flip), flip), img);
    const AugmentSpec vflip{0, false, true, 1.0};
    EXPECT_EQ(augment(augment(img, vflip), vflip), img);
    const AugmentSpec turn{1, false, false, 1.0};
    auto r = img;
    for (int i = 0; i < 4; ++i) r = augment(r, turn);
    EXPECT_EQ(r, img);
    EXPECT_NE(augment(img, turn), img);
}

TEST(Augment, QuarterTurnIsCounterClockwise) {
    Image img(2, 2, 1);
    img.pixels = {1, 2, 3, 4};
    const auto r = augment(img, AugmentSpec{1, false, false, 1.0});
    EXPECT_EQ(r.pixels, (std::vector<float>{2, 4, 1, 3}));
}

TEST(Augment, RangeAndShapeErrors) {
    EXPECT_THROW(augment(ramp_image(32, 32), AugmentSpec{0, false, false, 2.0}), std::invalid_argument);
    EXPECT_THROW(augment(ramp_image(32, 48), AugmentSpec{1, false, false, 1.0}), std::invalid_argument);
    EXPECT_EQ(augment(ramp_image(32, 48), AugmentSpec{2, false, false, 1.0}).height, 32u);
}

TEST(Augment, SeededDrawIsDeterministic) {
    const auto img = ramp_image(32, 32);
    EXPECT_EQ(augment(img, AugmentRange{}, 5), augment(img, AugmentRange{}, 5));
    const auto scaled = augment(img, AugmentSpec{0, false, false, 1.2});
    for (float v : scaled.pixels) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(PatchGan, SameSeedSameLog) {
    std::vector<CellPatch> patches(3, CellPatch(32, 32, 1, 0.4f));
    patches[1] = ramp_image(32, 32);
    PatchGanConfig cfg;
    cfg.steps = 25;
    cfg.batch_size = 4;
    cfg.seed = 11;
    const auto a = train_patch_gan(patches, cfg);
    const auto b = train_patch_gan(patches, cfg);
    ASSERT_EQ(a.log.size(), 25u);
    EXPECT_EQ(a.log, b.log);
    cfg.seed = 12;
    EXPECT_NE(train_patch_gan(patches, cfg).log, a.log);
}

TEST(PatchGan, Errors) {
    PatchGanConfig cfg;
    cfg.steps = 1;
    EXPECT_THROW(train_patch_gan(std::vector<CellPatch>{}, cfg), std::invalid_argument);
    EXPECT_THROW(train_patch_gan(std::vector<CellPatch>{CellPatch(16, 16, 1)}, cfg), DimensionError);
}

TEST(SamplePatches, CountDeterminismAndRange) {
    const PatchGenerator gan(1, 8, 3);
    EXPECT_TRUE(sample_patches(gan, 0, 1).empty());
    const auto a = sample_patches(gan, 5, 9), b = sample_patches(gan, 5, 9);
    ASSERT_EQ(a.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(a[i], b[i]);
        EXPECT_EQ(a[i].height, kPatchSize);
        for (float v : a[i].pixels) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(ComposeImage, ZeroCountCopiesTheStyle) {
    const auto style = ramp_image(64, 64);
    ComposeOptions opt;
    const auto s = compose_image(style, std::vector<CellPatch>{}, opt, 4);
    EXPECT_EQ(s.image, style);
    EXPECT_TRUE(s.annotations.points.empty());
    for (double v : s.density.values) EXPECT_EQ(v, 0.0);
}

TEST(ComposeImage, FixedCountAndSpacing) {
    const auto style = ramp_image(96, 96);
    const std::vector<CellPatch> pool{CellPatch(32, 32, 1, 0.9f), ramp_image(32, 32)};
    ComposeOptions opt;
    opt.count_min = opt.count_max = 7;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = compose_image(style, pool, opt, seed);
        ASSERT_EQ(s.annotations.points.size(), 7u);
        EXPECT_NEAR(estimate_count(s.density), 7.0, 1e-6);
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t j = i + 1; j < 7; ++j) {
                const auto& p = s.annotations.points[i];
                const auto& q = s.annotations.points[j];
                EXPECT_GE(std::hypot(p.x - q.x, p.y - q.y), opt.min_distance);
            }
    }
}

TEST(ComposeImage, PixelsOutsideAlphaSupportAreUntouched) {
    const auto style = ramp_image(96, 96, 3);
    const std::vector<CellPatch> pool{CellPatch(32, 32, 3, 0.0f)};
    for (const bool feather : {true, false}) {
        ComposeOptions opt;
        opt.count_min = 3;
        opt.count_max = 9;
        opt.feather = feather;
        const auto alpha = patch_alpha(feather);
        const auto s = compose_image(style, pool, opt, 77);
        std::vector<char> support(style.area(), 0);
        for (const auto& p : s.annotations.points) {
            const long top = std::lround(p.y) - 16, left = std::lround(p.x) - 16;
            for (long y = 0; y < 32; ++y)
                for (long x = 0; x < 32; ++x)
                    if (alpha[static_cast<std::size_t>(y * 32 + x)] > 0.0f)
                        support[static_cast<std::size_t>((top + y) * 96 + left + x)] = 1;
        }
        std::size_t outside = 0;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < style.area(); ++i)
                if (!support[i]) {
                    ++outside;
                    EXPECT_EQ(s.image.pixels[c * style.area() + i], style.pixels[c * style.area() + i]);
                }
        EXPECT_GT(outside, 0u);
    }
}

TEST(ComposeImage, SmallMarginClipsPatchesAtTheBorder) {
    const auto style = ramp_image(64, 64);
    const std::vector<CellPatch> pool{CellPatch(32, 32, 1, 0.0f)};
    ComposeOptions opt;
    opt.count_min = opt.count_max = 5;
    opt.min_distance = 0.0;
    opt.margin = 1.0;
    opt.feather = false;
    opt.augment_patches = false;
    std::size_t near_border = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = compose_image(style, pool, opt, seed);
        EXPECT_NEAR(estimate_count(s.density), 5.0, 1e-6);
        std::vector<char> covered(64 * 64, 0);
        for (const auto& p : s.annotations.points) {
            EXPECT_GE(p.x, 1.0);
            EXPECT_LT(p.x, 63.0);
            near_border += p.x < 16.0 || p.y < 16.0 || p.x > 48.0 || p.y > 48.0;
            const long top = std::lround(p.y) - 16, left = std::lround(p.x) - 16;
            for (long y = std::max(0L, top); y < std::min(64L, top + 32); ++y)
                for (long x = std::max(0L, left); x < std::min(64L, left + 32); ++x) covered[static_cast<std::size_t>(y * 64 + x)] = 1;
        }
        for (std::size_t i = 0; i < covered.size(); ++i)
            EXPECT_EQ(s.image.pixels[i], covered[i] ? 0.0f : style.pixels[i]) << "seed " << seed << " pixel " << i;
    }
    EXPECT_GT(near_border, 0u);
    opt.margin = -1.0;
    EXPECT_THROW(compose_image(style, pool, opt, 1), std::invalid_argument);
    opt.margin = 32.0;
    EXPECT_THROW(compose_image(style, pool, opt, 1), std::invalid_argument);
}

TEST(ComposeImage, FeatherProfile) {
    const auto a = patch_alpha(true);
    EXPECT_EQ(a[16 * 32 + 16], 1.0f);
    EXPECT_EQ(a[16 * 32 + 26], 1.0f);  // radius 10
    EXPECT_EQ(a[0], 0.0f);             // corner, radius > 16
    EXPECT_NEAR(a[16 * 32 + 29], 0.5 * (1 + std::cos(std::numbers::pi * 3.0 / 6.0)), 1e-6);
    for (float v : patch_alpha(false)) EXPECT_EQ(v, 1.0f);
}

TEST(ComposeImage, Errors) {
    const auto style = ramp_image(64, 64);
    ComposeOptions opt;
    opt.count_min = 3;
    opt.count_max = 2;
    EXPECT_THROW(compose_image(style, std::vector<CellPatch>{CellPatch(32, 32, 1)}, opt, 1), std::invalid_argument);
    opt.count_min = opt.count_max = 40;
    opt.min_distance = 30.0;
    try {
        compose_image(style, std::vector<CellPatch>{CellPatch(32, 32, 1)}, opt, 1);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("lower"), std::string::npos);
    }
    opt.count_min = opt.count_max = 1;
    EXPECT_THROW(compose_image(style, std::vector<CellPatch>{}, opt, 1), std::invalid_argument);
}

SynthesisConfig quick_synthesis(std::size_t n) {
    SynthesisConfig cfg;
    cfg.num_images = n;
    cfg.gan.steps = 20;
    cfg.gan.batch_size = 4;
    cfg.gan_patches = 8;
    cfg.seed = 5;
    return cfg;
}

TEST(SynthesizeDataset, ZeroImagesStillTrainsTheGan) {
    const auto few = test::toy_images(2, 3, true);
    const auto r = synthesize_dataset(few, quick_synthesis(0));
    EXPECT_TRUE(r.samples.empty());
    EXPECT_EQ(r.gan_log.size(), 20u);
    EXPECT_EQ(r.real_styles.size(), 2u);
}

TEST(SynthesizeDataset, TriplesAreConsistent) {
    const auto few = test::toy_images(2, 3, true);
    auto cfg = quick_synthesis(200);
    cfg.workers = 2;
    const auto r = synthesize_dataset(few, cfg);
    ASSERT_EQ(r.samples.size(), 200u);
    const std::size_t lo = std::min(few[0].count(), few[1].count()), hi = std::max(few[0].count(), few[1].count());
    EXPECT_EQ(r.count_range, std::make_pair(lo, hi));
    for (const auto& s : r.samples) {
        EXPECT_TRUE(s.image.same_extent(s.style));
        EXPECT_EQ(s.density.height, s.image.height);
        EXPECT_EQ(s.density.width, s.image.width);
        EXPECT_GE(s.annotations.points.size(), lo);
        EXPECT_LE(s.annotations.points.size(), hi);
        EXPECT_NEAR(estimate_count(s.density), static_cast<double>(s.annotations.points.size()), 1e-6);
    }
    cfg.workers = 1;
    const auto serial = synthesize_dataset(few, cfg);
    for (std::size_t i = 0; i < 200; ++i) {
        EXPECT_EQ(serial.samples[i].image, r.samples[i].image);
        EXPECT_EQ(serial.samples[i].seed, r.samples[i].seed);
    }
}

TEST(SynthesizeDataset, WrittenDatasetVerifiesAndReloads) {
    test::TempDir dir("synth");
    const auto few = test::toy_images(2, 8, true);
    const auto r = synthesize_dataset(few, quick_synthesis(6));
    save_synthesized_dataset(dir.path(), r);
    EXPECT_TRUE(verify_synthesized_dataset(dir.path()).empty());
    const auto samples = load_synthesized_samples(dir.path());
    ASSERT_EQ(samples.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(samples[i].image, r.samples[i].image);
        EXPECT_EQ(samples[i].style, r.samples[i].style);
        ASSERT_EQ(samples[i].density.values.size(), r.samples[i].density.values.size());
        for (std::size_t k = 0; k < samples[i].density.values.size(); ++k)
            EXPECT_EQ(samples[i].density.values[k], static_cast<float>(r.samples[i].density.values[k]));
        EXPECT_EQ(samples[i].count, r.samples[i].annotations.points.size());
    }

    // Drop one annotation row: the verification pass must notice.
    const auto csv = dir.path() / "annotations" / "0000.csv";
    const auto text = test::slurp(csv);
    const auto cut = text.find_last_of('\n', text.size() - 2);
    ASSERT_NE(cut, std::string::npos);
    test::spit(csv, text.substr(0, cut + 1));
    const auto bad = verify_synthesized_dataset(dir.path());
    ASSERT_EQ(bad.size(), 1u);
    EXPECT_EQ(bad[0].id, "0000");
}

TEST(SynthesizeDataset, Errors) {
    EXPECT_THROW(synthesize_dataset(std::vector<AnnotatedImage>{}, quick_synthesis(1)), std::invalid_argument);
}

}  // namespace
}  // namespace dtlc
