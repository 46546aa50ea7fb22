#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"

namespace dtlc {
namespace {

using test::random_tensor;

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

ModelConfig small_double_config(std::uint64_t seed) {
    ModelConfig c;
    c.base_width = 4;
    c.encoder_blocks = default_encoder_blocks(4);
    c.agnostic_decoder_channels = {8, 4, 1};
    c.specific_decoder_channels = {8, 4, 1};
    c.seed = seed;
    return c;
}

std::size_t conv_params(std::size_t out, std::size_t in) { return out * in * 9 + out; }

TEST(Model, SameSeedSameParameters) {
    const CounterModel<float> a(tiny_model_config(7)), b(tiny_model_config(7)), c(tiny_model_config(8));
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
        any_diff = any_diff || !std::equal(pa[i].data().begin(), pa[i].data().end(), pc[i].data().begin());
    }
    EXPECT_TRUE(any_diff);
}

TEST(Model, InitializationIsHeScaledWithZeroBiases) {
    const CounterModel<double> m(ModelConfig{});
    for (const auto& g : m.groups())
        for (const auto& p : g.params) {
            if (p.tensor.rank() == 1) {
                for (double v : p.tensor.data()) EXPECT_EQ(v, 0.0) << p.name;
                continue;
            }
            if (p.tensor.numel() < 500) continue;
            std::size_t fan_in = p.tensor.numel() / p.tensor.dim(0);
            double ss = 0.0;
            for (double v : p.tensor.data()) ss += v * v;
            const double sd = std::sqrt(ss / static_cast<double>(p.tensor.numel()));
            EXPECT_NEAR(sd, std::sqrt(2.0 / static_cast<double>(fan_in)), 0.15 * sd) << p.name;
        }
}

TEST(Model, DefaultEncoderHalvesThreeTimes) {
    const CounterModel<float> m(ModelConfig{});
    const auto y = m.encode(Tensor<float>::zeros({1, 1, 64, 64}));
    EXPECT_EQ(y.shape(), (Shape{1, 64, 8, 8}));
}

TEST(Model, ParameterCountMatchesClosedForm) {
    for (const auto& c : {ModelConfig{}, tiny_model_config(), small_double_config(0)}) {
        std::size_t expect = 0, in = c.input_channels;
        for (const auto& b : c.encoder_blocks)
            for (std::size_t i = 0; i < b.convs; ++i) {
                expect += conv_params(b.channels, in);
                in = b.channels;
            }
        const std::size_t f = c.feature_channels(), a = std::max<std::size_t>(1, f / 4);
        expect += conv_params(a, f) + conv_params(1, a) + (a * f + a) + (f * a + f);
        expect += c.dilation_rates.size() * conv_params(f, f);
        for (const auto* widths : {&c.agnostic_decoder_channels, &c.specific_decoder_channels}) {
            std::size_t din = f;
            for (auto w : *widths) {
                expect += conv_params(w, din);
                din = w;
            }
        }
        EXPECT_EQ(CounterModel<float>(c).parameter_count(), expect);
    }
}

TEST(Model, GroupsPartitionTheParameters) {
    CounterModel<float> m(tiny_model_config());
    std::set<std::string> names;
    std::size_t total = 0;
    for (std::size_t g = 0; g < 4; ++g) {
        EXPECT_EQ(m.groups()[g].name, kGroupNames[g]);
        for (const auto& p : m.groups()[g].params) {
            EXPECT_EQ(group_of(p.name), kGroupNames[g]);
            names.insert(p.name);
            ++total;
        }
    }
    EXPECT_EQ(names.size(), total);
    EXPECT_EQ(m.parameters().size(), total);
    auto no_style = tiny_model_config();
    no_style.disentangle = false;
    EXPECT_TRUE(CounterModel<float>(no_style).decoder_specific().empty());
}

TEST(Model, InvalidConfigsAreRejected) {
    auto c = tiny_model_config();
    c.encoder_blocks.pop_back();
    EXPECT_THROW(CounterModel<float>{c}, ConfigError);
    c = tiny_model_config();
    c.dilation_rates = {1, 2};
    EXPECT_THROW(CounterModel<float>{c}, ConfigError);
    c = tiny_model_config();
    c.agnostic_decoder_channels = {3, 2, 2};
    EXPECT_THROW(CounterModel<float>{c}, ConfigError);
    c = tiny_model_config();
    c.base_width = 5;
    EXPECT_THROW(CounterModel<float>{c}, ConfigError);
}

TEST(Model, ConfigKeyValueRoundTrip) {
    auto c = small_double_config(99);
    c.dilation_rates = {1, 1, 2, 3, 2, 1};
    c.disentangle = false;
    c.density_scale = 37.5;
    EXPECT_EQ(model_config_from_kv(model_config_to_kv(c)), c);
}

TEST(SpatialAttention, SaturatedAndZeroMasks) {
    CounterModel<double> m(tiny_model_config(1));
    const auto f = random_tensor({2, 4, 4, 4}, 3, 0.1, 1.0);
    auto& g = m.enhancement();
    for (std::size_t i = 0; i < 4; ++i)
        for (auto& v : g.at(i).data()) v = 0.0;
    const auto half = m.spatial_attention()(f);
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(half.data()[i], 0.5 * f.data()[i]);

    for (auto& v : g.at(3).data()) v = 50.0;  // mask bias
    const auto full = m.spatial_attention()(f);
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(full.data()[i], f.data()[i], 1e-12);
}

TEST(ChannelAttention, ZeroWeightsHalveEveryChannel) {
    CounterModel<double> m(tiny_model_config(1));
    for (std::size_t i = 4; i < 8; ++i)
        for (auto& v : m.enhancement().at(i).data()) v = 0.0;
    const auto f = random_tensor({2, 4, 3, 3}, 4);
    const auto y = m.channel_attention()(f);
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], 0.5 * f.data()[i]);
}

TEST(Attention, NeverAmplifies) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        CounterModel<double> m(tiny_model_config(seed));
        for (auto& g : m.groups())
            for (auto& p : g.params)
                for (auto& v : p.tensor.data()) v *= 3.0;
        const auto f = random_tensor({2, 4, 6, 6}, 100 + seed, -2.0, 2.0);
        for (const auto& y : {m.spatial_attention()(f), m.channel_attention()(f)})
            for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(y.data()[i]), std::abs(f.data()[i]));
    }
}

TEST(ChannelAttention, PermutationEquivariance) {
    CounterModel<double> m(tiny_model_config(2));
    const auto att = m.channel_attention();
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    const std::size_t C = 4, A = att.w1.dim(0), HW = 9;
    const auto f = random_tensor({2, C, 3, 3}, 5);

    std::vector<double> fp(f.numel()), w1p(att.w1.numel()), w2p(att.w2.numel()), b2p(C);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) fp[(b * C + c) * HW + i] = f.data()[(b * C + perm[c]) * HW + i];
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t c = 0; c < C; ++c) w1p[a * C + c] = att.w1.data()[a * C + perm[c]];
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t a = 0; a < A; ++a) w2p[c * A + a] = att.w2.data()[perm[c] * A + a];
        b2p[c] = att.b2.data()[perm[c]];
    }
    const ChannelAttention<double> permuted{Tensor<double>(att.w1.shape(), w1p), att.b1,
                                            Tensor<double>(att.w2.shape(), w2p), Tensor<double>({C}, b2p)};
    const auto y = att(f);
    const auto yp = permuted(Tensor<double>(f.shape(), fp));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i)
                EXPECT_NEAR(yp.data()[(b * C + c) * HW + i], y.data()[(b * C + perm[c]) * HW + i], 1e-12);
}

TEST(Enhance, PreservesSpatialSize) {
    auto c = tiny_model_config(3);
    c.dilation_rates = {1, 2, 4, 8, 4, 2};
    const CounterModel<double> m(c);
    for (std::size_t h : {16u, 17u, 24u})
        for (std::size_t w : {16u, 20u}) {
            const auto y = m.enhance(random_tensor({1, 4, h, w}, h * w));
            EXPECT_EQ(y.shape(), (Shape{1, 4, h, w}));
        }
}

TEST(Enhance, ZeroInZeroOut) {
    const CounterModel<double> m(tiny_model_config(3));
    const auto y = m.enhance(Tensor<double>::zeros({2, 4, 8, 8}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Enhance, ReceptiveFieldOfDilatedStack) {
    auto c = tiny_model_config(3);
    c.dilation_rates = {1, 2, 4, 8, 4, 2};
    CounterModel<double> m(c);
    for (std::size_t i = 8; i < m.enhancement().size(); ++i)
        for (auto& v : m.enhancement().at(i).data()) v = m.enhancement().at(i).rank() == 1 ? 0.0 : 0.1;
    const std::size_t S = 64, mid = 32;
    std::vector<double> x(4 * S * S, 0.0);
    x[mid * S + mid] = 1.0;
    const auto y = m.dilated_stack()(Tensor<double>({1, 4, S, S}, x));
    std::size_t lo = S, hi = 0;
    for (std::size_t r = 0; r < S; ++r)
        if (y.data()[r * S + mid] != 0.0) {
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
    std::size_t rates = 0;
    for (auto d : c.dilation_rates) rates += d;
    EXPECT_EQ(hi - lo + 1, 1 + 2 * rates);
}

TEST(Forward, ShapesRangesAndDeterminism) {
    const CounterModel<double> m(small_double_config(5));
    const auto x = random_tensor({2, 1, 32, 40}, 6, 0.0, 1.0);
    const auto out = m.forward(x);
    EXPECT_EQ(out.density.shape(), (Shape{2, 1, 32, 40}));
    ASSERT_TRUE(out.style);
    EXPECT_EQ(out.style->shape(), (Shape{2, 1, 32, 40}));
    for (double v : out.density.data()) EXPECT_GE(v, 0.0);
    for (double v : out.style->data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    const auto again = m.forward(x);
    EXPECT_EQ(values(again.density), values(out.density));
    EXPECT_EQ(values(*again.style), values(*out.style));

    const CounterModel<float> mf(tiny_model_config(5));
    const auto xf = random_tensor<float>({3, 1, 24, 24}, 8, 0.0, 1.0);
    const auto a = mf.forward(xf), b = mf.forward(xf);
    EXPECT_TRUE(std::equal(a.density.data().begin(), a.density.data().end(), b.density.data().begin()));
}

TEST(Forward, RejectsIndivisibleExtents) {
    const CounterModel<float> m(tiny_model_config());
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 1, 30, 32})), DimensionError);
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 3, 32, 32})), DimensionError);
}

TEST(PerceptualLoss, HandComposition) {
    const CounterModel<double> m(tiny_model_config(9));
    const auto ex = PerceptualExtractor<double>::snapshot(m);
    const auto s_hat = random_tensor({2, 1, 16, 16}, 10, 0.0, 1.0);
    const auto s = random_tensor({2, 1, 16, 16}, 11, 0.0, 1.0);
    EXPECT_EQ(perceptual_loss(s, s, ex).item(), 0.0);

    const auto features = [&](Tensor<double> x) {
        for (const auto& layer : m.encoder_block(0)) x = relu(conv2d(x, layer));
        x = max_pool2d(x);
        for (const auto& layer : m.encoder_block(1)) x = relu(conv2d(x, layer));
        return x;
    };
    const double expect = mse_loss(features(s_hat), features(s)).item();
    const double got = perceptual_loss(s_hat, s, ex).item();
    EXPECT_NEAR(got, expect, 1e-15);
    EXPECT_GE(got, 0.0);
    EXPECT_THROW(perceptual_loss(s_hat, random_tensor({2, 1, 8, 16}, 1), ex), DimensionError);
}

TEST(PerceptualLoss, ExtractorIsFrozen) {
    CounterModel<double> m(tiny_model_config(9));
    const auto ex = PerceptualExtractor<double>::snapshot(m);
    auto s_hat = random_tensor({1, 1, 16, 16}, 12, 0.0, 1.0, true);
    auto loss = perceptual_loss(s_hat, random_tensor({1, 1, 16, 16}, 13, 0.0, 1.0), ex);
    backward(loss);
    EXPECT_TRUE(s_hat.has_grad());
    for (const auto& p : m.encoder().params) EXPECT_FALSE(p.tensor.has_grad());
}

TEST(TotalLoss, DefinitionAndScaling) {
    const CounterModel<double> m(tiny_model_config(9));
    const auto ex = PerceptualExtractor<double>::snapshot(m);
    const auto y = random_tensor({2, 1, 16, 16}, 20, 0.0, 0.01);
    const auto s = random_tensor({2, 1, 16, 16}, 21, 0.0, 1.0);
    const std::optional<Tensor<double>> same_style = s;
    EXPECT_EQ(total_loss(y, y, same_style, &s, &ex, 100.0).total.item(), 0.0);

    const auto y_hat = random_tensor({2, 1, 16, 16}, 22, 0.0, 0.01);
    const std::optional<Tensor<double>> s_hat = random_tensor({2, 1, 16, 16}, 23, 0.0, 1.0);
    for (double scale_factor : {1.0, 100.0}) {
        const auto l = total_loss(y_hat, y, s_hat, &s, &ex, scale_factor);
        EXPECT_DOUBLE_EQ(l.report.total, l.report.mse + l.report.perceptual);
        EXPECT_GT(l.report.perceptual, 0.0);

        std::vector<double> doubled(y.numel());
        for (std::size_t i = 0; i < y.numel(); ++i) doubled[i] = y.data()[i] + 2.0 * (y_hat.data()[i] - y.data()[i]);
        const auto l2 = total_loss(Tensor<double>(y.shape(), doubled), y, s_hat, &s, &ex, scale_factor);
        EXPECT_NEAR(l2.report.mse, 4.0 * l.report.mse, 1e-12 * l.report.mse);
        EXPECT_EQ(l2.report.perceptual, l.report.perceptual);
    }
    const auto plain = total_loss<double>(y_hat, y, std::nullopt, nullptr, nullptr, 100.0);
    EXPECT_EQ(plain.report.perceptual, 0.0);
    EXPECT_EQ(plain.report.total, plain.report.mse);
    EXPECT_THROW(total_loss<double>(y_hat, y, s_hat, nullptr, &ex), std::invalid_argument);
}

bool all_zero(const ParamGroup<double>& g) {
    for (const auto& p : g.params)
        if (p.tensor.has_grad())
            for (double v : const_cast<Tensor<double>&>(p.tensor).grad())
                if (v != 0.0) return false;
    return true;
}

bool any_nonzero(const ParamGroup<double>& g) { return !all_zero(g); }

TEST(Disentangling, EachLossReachesOnlyItsDecoder) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        CounterModel<double> m = gradcheck_model(seed);
        const auto ex = PerceptualExtractor<double>::snapshot(m);
        const auto x = random_tensor({2, 1, 16, 16}, 30 + seed, 0.0, 1.0);
        const auto y = random_tensor({2, 1, 16, 16}, 40 + seed, 0.0, 0.02);
        const auto s = random_tensor({2, 1, 16, 16}, 50 + seed, 0.0, 1.0);

        auto out = m.forward(x);
        auto l = total_loss(out.density, y, out.style, &s, &ex, 100.0);
        backward(l.mse);
        EXPECT_TRUE(all_zero(m.decoder_specific()));
        EXPECT_TRUE(any_nonzero(m.decoder_agnostic()));
        EXPECT_TRUE(any_nonzero(m.encoder()));
        EXPECT_TRUE(any_nonzero(m.enhancement()));
        m.zero_grad();

        out = m.forward(x);
        l = total_loss(out.density, y, out.style, &s, &ex, 100.0);
        backward(*l.perceptual);
        EXPECT_TRUE(all_zero(m.decoder_agnostic()));
        EXPECT_TRUE(any_nonzero(m.decoder_specific()));
        EXPECT_TRUE(any_nonzero(m.encoder()));
        EXPECT_TRUE(any_nonzero(m.enhancement()));
    }
}

TEST(Model, CastPreservesValues) {
    const CounterModel<double> m(tiny_model_config(6));
    const auto f = m.cast<float>();
    const auto pd = m.parameters();
    const auto pf = f.parameters();
    for (std::size_t i = 0; i < pd.size(); ++i)
        for (std::size_t k = 0; k < pd[i].numel(); ++k) EXPECT_EQ(pf[i].data()[k], static_cast<float>(pd[i].data()[k]));
}

}  // namespace
}  // namespace dtlc
