#pragma once

// Dual-decoder counting network: encoder, feature enhancement (spatial and
// channel attention followed by a dilated convolution stack), a
// domain-agnostic decoder that emits the density map, and a domain-specific
// decoder that emits the style image.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "dtlc/ops.hpp"
#include "dtlc/rng.hpp"
#include "dtlc/tensor.hpp"

namespace dtlc {

struct EncoderBlock {
    std::size_t convs = 2;
    std::size_t channels = 16;

    bool operator==(const EncoderBlock&) const = default;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::vector<EncoderBlock> default_encoder_blocks(std::size_t base_width) {
    return {{2, base_width}, {2, 2 * base_width}, {3, 4 * base_width}};
}

struct ModelConfig {
    std::size_t input_channels = 1;
    std::size_t base_width = 16;
    std::vector<EncoderBlock> encoder_blocks = default_encoder_blocks(16);
    std::vector<std::size_t> dilation_rates = {1, 2, 4, 8, 4, 2};
    std::vector<std::size_t> agnostic_decoder_channels = {32, 16, 1};
    std::vector<std::size_t> specific_decoder_channels = {32, 16, 1};
    std::size_t style_channels = 1;
    /// false drops the domain-specific decoder entirely.
    bool disentangle = true;
    /// Density maps are regressed and compared in units of 1/density_scale
    /// cells per pixel; the head divides by it so outputs stay true densities.
    double density_scale = 100.0;
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;

    std::size_t feature_channels() const { return encoder_blocks.back().channels; }
    std::size_t attention_channels() const { return std::max<std::size_t>(1, feature_channels() / 4); }

    void validate() const {
        if (input_channels != 1 && input_channels != 3) throw ConfigError("input_channels must be 1 or 3");
        if (encoder_blocks.size() != 3)
            throw ConfigError("encoder needs exactly 3 pooled blocks, got " + std::to_string(encoder_blocks.size()));
        for (const auto& b : encoder_blocks)
            if (b.convs < 1 || b.channels < 1) throw ConfigError("encoder blocks need >= 1 conv and >= 1 channel");
        if (encoder_blocks.front().channels != base_width)
            throw ConfigError("base_width " + std::to_string(base_width) + " disagrees with the first encoder block (" +
                              std::to_string(encoder_blocks.front().channels) + ")");
        if (dilation_rates.size() != 6)
            throw ConfigError("dilation_rates needs 6 entries, got " + std::to_string(dilation_rates.size()));
        for (auto d : dilation_rates)
            if (d < 1) throw ConfigError("dilation rates must be positive");
        if (agnostic_decoder_channels.size() != 3 || specific_decoder_channels.size() != 3)
            throw ConfigError("each decoder needs exactly 3 conv widths");
        if (agnostic_decoder_channels.back() != 1) throw ConfigError("the density decoder must end in 1 channel");
        if (specific_decoder_channels.back() != style_channels)
            throw ConfigError("the style decoder must end in style_channels channels");
        if (style_channels != input_channels)
            throw ConfigError("style_channels must equal input_channels (the perceptual extractor reads style images "
                              "with the encoder's first blocks)");
        if (!(density_scale > 0.0) || !std::isfinite(density_scale)) throw ConfigError("density_scale must be > 0");
        for (auto c : agnostic_decoder_channels)
            if (c < 1) throw ConfigError("decoder widths must be positive");
        for (auto c : specific_decoder_channels)
            if (c < 1) throw ConfigError("decoder widths must be positive");
    }

    std::size_t max_dilation() const { return *std::max_element(dilation_rates.begin(), dilation_rates.end()); }
};

/// Smallest configuration that still exercises every layer; used for
/// gradient verification.
inline ModelConfig tiny_model_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.base_width = 2;
    c.encoder_blocks = {{1, 2}, {1, 3}, {2, 4}};
    c.dilation_rates = {1, 2, 1, 2, 1, 1};
    c.agnostic_decoder_channels = {3, 2, 1};
    c.specific_decoder_channels = {3, 2, 1};
    c.seed = seed;
    return c;
}

// --- config text form -------------------------------------------------------

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::size_t parse_size(const std::string& text, const std::string& key) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &pos);
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + text + "' is not a non-negative integer");
    }
    if (pos != text.size() || text.empty() || text[0] == '-')
        throw ConfigError(key + ": '" + text + "' is not a non-negative integer");
    return static_cast<std::size_t>(v);
}

inline double parse_real(const std::string& text, const std::string& key) {
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty() || !std::isfinite(v))
        throw ConfigError(key + ": '" + text + "' is not a finite decimal number");
    return v;
}

inline std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& key) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(item, key));
    return out;
}

}  // namespace detail

/// Flat key=value form used in checkpoint metadata and config files.
inline std::map<std::string, std::string> model_config_to_kv(const ModelConfig& c) {
    std::string blocks;
    for (std::size_t i = 0; i < c.encoder_blocks.size(); ++i)
        blocks += (i ? "," : "") + std::to_string(c.encoder_blocks[i].convs) + "x" +
                  std::to_string(c.encoder_blocks[i].channels);
    return {
        {"input_channels", std::to_string(c.input_channels)},
        {"base_width", std::to_string(c.base_width)},
        {"encoder_blocks", blocks},
        {"dilation_rates", detail::join_sizes(c.dilation_rates)},
        {"agnostic_decoder_channels", detail::join_sizes(c.agnostic_decoder_channels)},
        {"specific_decoder_channels", detail::join_sizes(c.specific_decoder_channels)},
        {"style_channels", std::to_string(c.style_channels)},
        {"disentangle", c.disentangle ? "true" : "false"},
        {"density_scale", detail::format_real(c.density_scale)},
        {"seed", std::to_string(c.seed)},
    };
}

/// Applies `key` to `c`. Returns false for keys that are not model keys.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_size;
    using detail::parse_sizes;
    if (key == "input_channels") {
        c.input_channels = parse_size(value, key);
    } else if (key == "base_width") {
        c.base_width = parse_size(value, key);
        c.encoder_blocks = default_encoder_blocks(c.base_width);
    } else if (key == "encoder_blocks") {
        c.encoder_blocks.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto x = item.find('x');
            if (x == std::string::npos) throw ConfigError(key + ": expected CONVSxCHANNELS, got '" + item + "'");
            c.encoder_blocks.push_back({parse_size(item.substr(0, x), key), parse_size(item.substr(x + 1), key)});
        }
        if (!c.encoder_blocks.empty()) c.base_width = c.encoder_blocks.front().channels;
    } else if (key == "dilation_rates") {
        c.dilation_rates = parse_sizes(value, key);
    } else if (key == "agnostic_decoder_channels") {
        c.agnostic_decoder_channels = parse_sizes(value, key);
    } else if (key == "specific_decoder_channels") {
        c.specific_decoder_channels = parse_sizes(value, key);
    } else if (key == "style_channels") {
        c.style_channels = parse_size(value, key);
    } else if (key == "disentangle") {
        if (value != "true" && value != "false") throw ConfigError(key + ": expected true or false");
        c.disentangle = value == "true";
    } else if (key == "density_scale") {
        c.density_scale = detail::parse_real(value, key);
    } else if (key == "seed") {
        c.seed = parse_size(value, key);
    } else {
        return false;
    }
    return true;
}

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    // base_width first so an explicit encoder_blocks entry wins.
    if (auto it = kv.find("base_width"); it != kv.end()) apply_model_key(c, it->first, it->second);
    for (const auto& [k, v] : kv) {
        if (k == "base_width") continue;
        if (!apply_model_key(c, k, v)) throw ConfigError("unknown model key '" + k + "'");
    }
    c.validate();
    return c;
}

// --- parameters -------------------------------------------------------------

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct ParamGroup {
    std::string name;
    std::vector<NamedTensor<T>> params;

    Tensor<T>& at(std::size_t i) { return params.at(i).tensor; }
    const Tensor<T>& at(std::size_t i) const { return params.at(i).tensor; }
    std::size_t size() const { return params.size(); }
    bool empty() const { return params.empty(); }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.tensor.numel();
        return n;
    }

    void add(std::string param_name, Shape shape) {
        params.push_back({name + "." + std::move(param_name), Tensor<T>::zeros(std::move(shape), true)});
    }
};

inline constexpr const char* kGroupNames[4] = {"encoder", "enhancement", "decoder_specific", "decoder_agnostic"};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases. A group's
/// values depend only on (seed, group name), so one group can be redrawn
/// without touching the others.
template <typename T>
void initialize_group(ParamGroup<T>& group, std::uint64_t seed) {
    std::uint64_t stream = 0;
    for (char ch : group.name) stream = stream * 131 + static_cast<unsigned char>(ch);
    Rng rng(derive_seed(seed, stream));
    for (auto& p : group.params) {
        auto& t = p.tensor;
        auto data = t.data();
        if (t.rank() == 1) {
            std::fill(data.begin(), data.end(), T{0});
            continue;
        }
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < t.rank(); ++i) fan_in *= t.dim(i);
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
    }
}

template <typename T>
struct SpatialAttention {
    ConvParams<T> hidden;  // C -> C/4, ReLU
    ConvParams<T> mask;    // C/4 -> 1, sigmoid

    Tensor<T> operator()(const Tensor<T>& f) const {
        const auto m = sigmoid(conv2d(relu(conv2d(f, hidden)), mask));
        return spatial_gate(f, m);
    }
};

template <typename T>
struct ChannelAttention {
    Tensor<T> w1, b1;  // C -> C/4, ReLU
    Tensor<T> w2, b2;  // C/4 -> C, sigmoid

    Tensor<T> weights(const Tensor<T>& f) const {
        return sigmoid(dense(relu(dense(global_avg_pool(f), w1, b1)), w2, b2));
    }
    Tensor<T> operator()(const Tensor<T>& f) const { return channel_gate(f, weights(f)); }
};

template <typename T>
struct DilatedStack {
    std::vector<ConvParams<T>> layers;

    Tensor<T> operator()(Tensor<T> f) const {
        for (const auto& layer : layers) f = relu(conv2d(f, layer));
        return f;
    }
};

template <typename T>
struct ModelOutput {
    Tensor<T> density;
    std::optional<Tensor<T>> style;
};

template <typename T>
class CounterModel {
public:
    explicit CounterModel(ModelConfig config) : config_(std::move(config)) {
        config_.validate();
        groups_[0].name = kGroupNames[0];
        groups_[1].name = kGroupNames[1];
        groups_[2].name = kGroupNames[2];
        groups_[3].name = kGroupNames[3];
        declare();
        for (auto& g : groups_) initialize_group(g, config_.seed);
    }

    const ModelConfig& config() const { return config_; }

    ParamGroup<T>& encoder() { return groups_[0]; }
    ParamGroup<T>& enhancement() { return groups_[1]; }
    ParamGroup<T>& decoder_specific() { return groups_[2]; }
    ParamGroup<T>& decoder_agnostic() { return groups_[3]; }
    const ParamGroup<T>& encoder() const { return groups_[0]; }
    const ParamGroup<T>& enhancement() const { return groups_[1]; }
    const ParamGroup<T>& decoder_specific() const { return groups_[2]; }
    const ParamGroup<T>& decoder_agnostic() const { return groups_[3]; }

    std::array<ParamGroup<T>, 4>& groups() { return groups_; }
    const std::array<ParamGroup<T>, 4>& groups() const { return groups_; }

    ParamGroup<T>* group(const std::string& name) {
        for (auto& g : groups_)
            if (g.name == name) return &g;
        return nullptr;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (const auto& g : groups_)
            for (const auto& p : g.params) out.push_back(p.tensor);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& g : groups_) n += g.numel();
        return n;
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.tensor.zero_grad();
    }

    /// Conv layers of encoder block `b`, in order.
    std::vector<ConvParams<T>> encoder_block(std::size_t b) const {
        std::size_t first = 0;
        for (std::size_t i = 0; i < b; ++i) first += config_.encoder_blocks[i].convs;
        std::vector<ConvParams<T>> layers;
        for (std::size_t i = 0; i < config_.encoder_blocks[b].convs; ++i) layers.push_back(conv(encoder(), 2 * (first + i), 1, 1));
        return layers;
    }

    SpatialAttention<T> spatial_attention() const {
        return {conv(enhancement(), 0, 1, 1), conv(enhancement(), 2, 1, 1)};
    }

    ChannelAttention<T> channel_attention() const {
        const auto& g = enhancement();
        return {g.at(4), g.at(5), g.at(6), g.at(7)};
    }

    DilatedStack<T> dilated_stack() const {
        DilatedStack<T> stack;
        for (std::size_t i = 0; i < config_.dilation_rates.size(); ++i) {
            const auto d = config_.dilation_rates[i];
            stack.layers.push_back(conv(enhancement(), 8 + 2 * i, d, d));
        }
        return stack;
    }

    Tensor<T> encode(Tensor<T> x) const {
        for (std::size_t b = 0; b < config_.encoder_blocks.size(); ++b) {
            for (const auto& layer : encoder_block(b)) x = relu(conv2d(x, layer));
            x = max_pool2d(x);
        }
        return x;
    }

    Tensor<T> enhance(const Tensor<T>& features) const {
        return dilated_stack()(channel_attention()(spatial_attention()(features)));
    }

    ModelOutput<T> forward(const Tensor<T>& batch) const {
        if (batch.rank() != 4) throw DimensionError("forward", "rank", 4, batch.rank());
        if (batch.dim(1) != config_.input_channels)
            throw DimensionError("forward", "channels", config_.input_channels, batch.dim(1));
        if (batch.dim(2) % 8 != 0 || batch.dim(3) % 8 != 0 || batch.dim(2) == 0 || batch.dim(3) == 0)
            throw DimensionError("forward", "spatial",
                                 "height and width must be positive multiples of 8, got " + shape_str(batch.shape()));
        const auto enhanced = enhance(encode(batch));
        const auto raw = decode(decoder_agnostic(), enhanced, Activation::relu);
        ModelOutput<T> out{scale(raw, static_cast<T>(1.0 / config_.density_scale)), std::nullopt};
        if (config_.disentangle) out.style = decode(decoder_specific(), enhanced, Activation::sigmoid);
        return out;
    }

    /// Upsample, 3x3 conv, repeated three times; ReLU between stages and
    /// the given activation at the head.
    Tensor<T> decode(const ParamGroup<T>& group, Tensor<T> x, Activation head) const {
        for (std::size_t i = 0; i < 3; ++i) {
            x = conv2d(upsample_nearest(x, 2), conv(group, 2 * i, 1, 1));
            x = activation(x, i + 1 < 3 ? Activation::relu : head);
        }
        return x;
    }

    /// Copy of the parameter values at another precision.
    template <typename U>
    CounterModel<U> cast() const {
        CounterModel<U> out(config_);
        for (std::size_t g = 0; g < 4; ++g)
            for (std::size_t i = 0; i < groups_[g].params.size(); ++i) {
                auto src = groups_[g].params[i].tensor.data();
                auto dst = out.groups()[g].params[i].tensor.data();
                for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<U>(src[k]);
            }
        return out;
    }

private:
    static ConvParams<T> conv(const ParamGroup<T>& g, std::size_t index, std::size_t padding, std::size_t dilation) {
        return {g.at(index), g.at(index + 1), 1, padding, dilation};
    }

    void declare() {
        const auto& c = config_;
        auto conv_shape = [](std::size_t out, std::size_t in) { return Shape{out, in, 3, 3}; };

        std::size_t in = c.input_channels;
        for (std::size_t b = 0; b < c.encoder_blocks.size(); ++b)
            for (std::size_t i = 0; i < c.encoder_blocks[b].convs; ++i) {
                const std::string prefix = "block" + std::to_string(b) + ".conv" + std::to_string(i);
                encoder().add(prefix + ".weight", conv_shape(c.encoder_blocks[b].channels, in));
                encoder().add(prefix + ".bias", {c.encoder_blocks[b].channels});
                in = c.encoder_blocks[b].channels;
            }

        const std::size_t f = c.feature_channels();
        const std::size_t a = c.attention_channels();
        enhancement().add("spatial.conv0.weight", conv_shape(a, f));
        enhancement().add("spatial.conv0.bias", {a});
        enhancement().add("spatial.conv1.weight", conv_shape(1, a));
        enhancement().add("spatial.conv1.bias", {1});
        enhancement().add("channel.dense0.weight", {a, f});
        enhancement().add("channel.dense0.bias", {a});
        enhancement().add("channel.dense1.weight", {f, a});
        enhancement().add("channel.dense1.bias", {f});
        for (std::size_t i = 0; i < c.dilation_rates.size(); ++i) {
            enhancement().add("dilated.conv" + std::to_string(i) + ".weight", conv_shape(f, f));
            enhancement().add("dilated.conv" + std::to_string(i) + ".bias", {f});
        }

        auto declare_decoder = [&](ParamGroup<T>& g, const std::vector<std::size_t>& widths) {
            std::size_t din = f;
            for (std::size_t i = 0; i < 3; ++i) {
                g.add("conv" + std::to_string(i) + ".weight", conv_shape(widths[i], din));
                g.add("conv" + std::to_string(i) + ".bias", {widths[i]});
                din = widths[i];
            }
        };
        if (c.disentangle) declare_decoder(decoder_specific(), c.specific_decoder_channels);
        declare_decoder(decoder_agnostic(), c.agnostic_decoder_channels);
    }

    ModelConfig config_;
    std::array<ParamGroup<T>, 4> groups_;
};

/// Frozen feature extractor for the perceptual loss: a detached copy of the
/// encoder's first two blocks (ReLU convs, with pooling between blocks).
template <typename T>
class PerceptualExtractor {
public:
    PerceptualExtractor() = default;

    static PerceptualExtractor snapshot(const CounterModel<T>& model, std::size_t blocks = 2) {
        PerceptualExtractor ex;
        for (std::size_t b = 0; b < blocks; ++b) {
            std::vector<ConvParams<T>> frozen;
            for (const auto& layer : model.encoder_block(b))
                frozen.push_back({layer.weights.detach(), layer.bias.detach(), layer.stride, layer.padding, layer.dilation});
            ex.blocks_.push_back(std::move(frozen));
        }
        return ex;
    }

    bool empty() const { return blocks_.empty(); }

    Tensor<T> operator()(Tensor<T> x) const {
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            if (b > 0) x = max_pool2d(x);
            for (const auto& layer : blocks_[b]) x = relu(conv2d(x, layer));
        }
        return x;
    }

    template <typename U>
    PerceptualExtractor<U> cast() const {
        PerceptualExtractor<U> out;
        for (const auto& block : blocks_) {
            std::vector<ConvParams<U>> layers;
            for (const auto& l : block)
                layers.push_back({tensor_cast<U>(l.weights), tensor_cast<U>(l.bias), l.stride, l.padding, l.dilation});
            out.push_block(std::move(layers));
        }
        return out;
    }

    void push_block(std::vector<ConvParams<T>> layers) { blocks_.push_back(std::move(layers)); }
    const std::vector<std::vector<ConvParams<T>>>& blocks() const { return blocks_; }

private:
    std::vector<std::vector<ConvParams<T>>> blocks_;
};

struct LossReport {
    double total = 0.0;
    double mse = 0.0;
    double perceptual = 0.0;
    std::size_t batch_size = 0;
};

template <typename T>
struct Loss {
    Tensor<T> total;
    Tensor<T> mse;
    std::optional<Tensor<T>> perceptual;
    LossReport report;
};

/// Mean squared difference of extractor features. The target side is
/// detached, so gradients reach only the predicted style image.
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& predicted_style, const Tensor<T>& true_style,
                          const PerceptualExtractor<T>& extractor) {
    detail::require_same_shape("perceptual_loss", predicted_style.shape(), true_style.shape());
    const auto target = extractor(true_style.detach()).detach();
    return mse_loss(extractor(predicted_style), target);
}

/// Pixel MSE on the density map plus the perceptual loss on the style image.
/// Both density maps are measured in units of 1/density_scale before the
/// MSE. Without a style prediction the perceptual term is exactly zero.
template <typename T>
Loss<T> total_loss(const Tensor<T>& predicted_density, const Tensor<T>& true_density,
                   const std::optional<Tensor<T>>& predicted_style, const Tensor<T>* true_style,
                   const PerceptualExtractor<T>* extractor, double density_scale = 1.0) {
    Loss<T> loss;
    if (density_scale == 1.0) {
        loss.mse = mse_loss(predicted_density, true_density);
    } else {
        const T s = static_cast<T>(density_scale);
        loss.mse = mse_loss(scale(predicted_density, s), scale(true_density, s));
    }
    loss.report.batch_size = predicted_density.rank() > 0 ? predicted_density.dim(0) : 1;
    loss.report.mse = static_cast<double>(loss.mse.item());
    if (predicted_style) {
        if (!true_style || !extractor) throw std::invalid_argument("total_loss: style prediction without style target");
        loss.perceptual = perceptual_loss(*predicted_style, *true_style, *extractor);
        loss.total = add(loss.mse, *loss.perceptual);
        loss.report.perceptual = static_cast<double>(loss.perceptual->item());
    } else {
        loss.total = loss.mse;
        loss.report.perceptual = 0.0;
    }
    loss.report.total = static_cast<double>(loss.total.item());
    return loss;
}

}  // namespace dtlc
