#pragma once

// Experiment configuration: one INI-style file with sections [source],
// [target], [synthesis], [training], [transfer] and [output]. A `seed` key
// may precede the first section. Unknown sections and keys are errors.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtlc/domain.hpp"
#include "dtlc/model.hpp"
#include "dtlc/synthesis.hpp"
#include "dtlc/transfer.hpp"

namespace dtlc {

struct ExperimentConfig {
    std::uint64_t seed = 1;

    DomainSpec source = toy_source_domain();
    std::size_t source_images = 40;
    std::string source_dataset;  // empty: generate in memory

    DomainSpec target = toy_target_domain();
    std::size_t target_few = 5;
    std::size_t target_test = 20;
    std::string few_dataset;
    std::string test_dataset;

    SynthesisConfig synthesis{};

    ModelConfig model{};
    std::size_t batch_size = 4;
    bool source_augment = true;

    StageEpochs epochs{};
    StageRates rates{};
    std::size_t direct_epochs = 200;
    double direct_rate = 1e-3;
    Ablation ablation = Ablation::none;
    std::vector<std::uint64_t> bench_seeds = {1, 2, 3};
    std::vector<Ablation> bench_methods = {Ablation::none, Ablation::direct};

    std::string output_dir = "runs";

    /// Model with its seed mixed with the global seed.
    ModelConfig effective_model() const {
        ModelConfig m = model;
        m.seed = derive_seed(seed, 1000 + model.seed);
        return m;
    }
    std::uint64_t source_seed() const { return derive_seed(seed, 2000 + source.seed); }
    std::uint64_t few_seed() const { return derive_seed(derive_seed(seed, 3000 + target.seed), 0); }
    std::uint64_t test_seed() const { return derive_seed(derive_seed(seed, 3000 + target.seed), 1); }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

template <typename T>
std::string join(const std::vector<T>& v, auto&& fmt) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.emplace_back(trim(item));
    return out;
}

}  // namespace detail

using ConfigSections = std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>;

/// Fully resolved key/value listing, in file order.
inline ConfigSections config_sections(const ExperimentConfig& c) {
    using detail::bool_str;
    using detail::format_real;
    ConfigSections s;
    s.push_back({"", {{"seed", std::to_string(c.seed)}}});

    std::vector<std::pair<std::string, std::string>> src;
    for (const auto& kv : domain_spec_to_kv(c.source)) src.push_back(kv);
    src.emplace_back("images", std::to_string(c.source_images));
    src.emplace_back("dataset", c.source_dataset);
    s.push_back({"source", src});

    std::vector<std::pair<std::string, std::string>> tgt;
    for (const auto& kv : domain_spec_to_kv(c.target)) tgt.push_back(kv);
    tgt.emplace_back("few", std::to_string(c.target_few));
    tgt.emplace_back("test", std::to_string(c.target_test));
    tgt.emplace_back("few_dataset", c.few_dataset);
    tgt.emplace_back("test_dataset", c.test_dataset);
    s.push_back({"target", tgt});

    const auto& y = c.synthesis;
    s.push_back({"synthesis",
                 {{"num_images", std::to_string(y.num_images)},
                  {"count_range", y.count_range ? std::to_string(y.count_range->first) + "," +
                                                      std::to_string(y.count_range->second)
                                                : "auto"},
                  {"min_distance", format_real(y.min_distance)},
                  {"margin", format_real(y.margin)},
                  {"feather", bool_str(y.feather)},
                  {"augment_patches", bool_str(y.augment_patches)},
                  {"scale_min", format_real(y.augment.scale_min)},
                  {"scale_max", format_real(y.augment.scale_max)},
                  {"gan_patches", std::to_string(y.gan_patches)},
                  {"gan_steps", std::to_string(y.gan.steps)},
                  {"gan_batch", std::to_string(y.gan.batch_size)},
                  {"latent_dim", std::to_string(y.gan.latent_dim)},
                  {"gan_lr", format_real(y.gan.learning_rate)},
                  {"gan_beta1", format_real(y.gan.beta1)},
                  {"inpaint_iterations", std::to_string(y.inpaint.max_iterations)},
                  {"inpaint_tolerance", format_real(y.inpaint.tolerance)},
                  {"sigma", format_real(y.sigma)},
                  {"workers", std::to_string(y.workers)}}});

    std::vector<std::pair<std::string, std::string>> tr;
    for (const auto& kv : model_config_to_kv(c.model)) tr.push_back(kv);
    tr.emplace_back("batch_size", std::to_string(c.batch_size));
    tr.emplace_back("source_augment", detail::bool_str(c.source_augment));
    s.push_back({"training", tr});

    s.push_back({"transfer",
                 {{"pretrain_epochs", std::to_string(c.epochs.pretrain)},
                  {"synth_epochs", std::to_string(c.epochs.synth)},
                  {"real_epochs", std::to_string(c.epochs.real)},
                  {"pretrain_lr", format_real(c.rates.pretrain)},
                  {"synth_lr", format_real(c.rates.synth)},
                  {"real_lr", format_real(c.rates.real)},
                  {"direct_epochs", std::to_string(c.direct_epochs)},
                  {"direct_lr", format_real(c.direct_rate)},
                  {"ablation", to_string(c.ablation)},
                  {"bench_seeds", detail::join(c.bench_seeds, [](std::uint64_t v) { return std::to_string(v); })},
                  {"bench_methods", detail::join(c.bench_methods, [](Ablation a) { return std::string(to_string(a)); })}}});

    s.push_back({"output", {{"dir", c.output_dir}}});
    return s;
}

inline std::string config_to_text(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [section, keys] : config_sections(c)) {
        if (!section.empty()) out += "\n[" + section + "]\n";
        for (const auto& [k, v] : keys) out += k + " = " + v + "\n";
    }
    return out;
}

inline void apply_config_key(ExperimentConfig& c, const std::string& section, const std::string& key,
                             const std::string& value) {
    using detail::parse_bool;
    using detail::parse_real;
    using detail::parse_size;
    const auto unknown = [&] {
        return ConfigError("unknown key '" + key + "'" + (section.empty() ? "" : " in section [" + section + "]"));
    };
    if (section.empty()) {
        if (key != "seed") throw unknown();
        c.seed = parse_size(value, key);
    } else if (section == "source") {
        if (key == "images") c.source_images = parse_size(value, key);
        else if (key == "dataset") c.source_dataset = value;
        else if (!apply_domain_key(c.source, key, value)) throw unknown();
    } else if (section == "target") {
        if (key == "few") c.target_few = parse_size(value, key);
        else if (key == "test") c.target_test = parse_size(value, key);
        else if (key == "few_dataset") c.few_dataset = value;
        else if (key == "test_dataset") c.test_dataset = value;
        else if (!apply_domain_key(c.target, key, value)) throw unknown();
    } else if (section == "synthesis") {
        auto& y = c.synthesis;
        if (key == "num_images") y.num_images = parse_size(value, key);
        else if (key == "count_range") {
            if (value == "auto") {
                y.count_range.reset();
            } else {
                const auto parts = detail::split_list(value);
                if (parts.size() != 2) throw ConfigError(key + ": expected 'auto' or 'lo,hi'");
                y.count_range = std::make_pair(parse_size(parts[0], key), parse_size(parts[1], key));
                if (y.count_range->second < y.count_range->first) throw ConfigError(key + ": hi < lo");
            }
        } else if (key == "min_distance") y.min_distance = parse_real(value, key);
        else if (key == "margin") y.margin = parse_real(value, key);
        else if (key == "feather") y.feather = parse_bool(value, key);
        else if (key == "augment_patches") y.augment_patches = parse_bool(value, key);
        else if (key == "scale_min") y.augment.scale_min = parse_real(value, key);
        else if (key == "scale_max") y.augment.scale_max = parse_real(value, key);
        else if (key == "gan_patches") y.gan_patches = parse_size(value, key);
        else if (key == "gan_steps") y.gan.steps = parse_size(value, key);
        else if (key == "gan_batch") y.gan.batch_size = parse_size(value, key);
        else if (key == "latent_dim") y.gan.latent_dim = parse_size(value, key);
        else if (key == "gan_lr") y.gan.learning_rate = parse_real(value, key);
        else if (key == "gan_beta1") y.gan.beta1 = parse_real(value, key);
        else if (key == "inpaint_iterations") y.inpaint.max_iterations = parse_size(value, key);
        else if (key == "inpaint_tolerance") y.inpaint.tolerance = parse_real(value, key);
        else if (key == "sigma") y.sigma = parse_real(value, key);
        else if (key == "workers") y.workers = parse_size(value, key);
        else throw unknown();
    } else if (section == "training") {
        if (key == "batch_size") c.batch_size = parse_size(value, key);
        else if (key == "source_augment") c.source_augment = parse_bool(value, key);
        else if (!apply_model_key(c.model, key, value)) throw unknown();
    } else if (section == "transfer") {
        if (key == "pretrain_epochs") c.epochs.pretrain = parse_size(value, key);
        else if (key == "synth_epochs") c.epochs.synth = parse_size(value, key);
        else if (key == "real_epochs") c.epochs.real = parse_size(value, key);
        else if (key == "pretrain_lr") c.rates.pretrain = parse_real(value, key);
        else if (key == "synth_lr") c.rates.synth = parse_real(value, key);
        else if (key == "real_lr") c.rates.real = parse_real(value, key);
        else if (key == "direct_epochs") c.direct_epochs = parse_size(value, key);
        else if (key == "direct_lr") c.direct_rate = parse_real(value, key);
        else if (key == "ablation") {
            try {
                c.ablation = parse_ablation(value);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "bench_seeds") {
            c.bench_seeds.clear();
            for (const auto& s : detail::split_list(value)) c.bench_seeds.push_back(parse_size(s, key));
        } else if (key == "bench_methods") {
            c.bench_methods.clear();
            for (const auto& s : detail::split_list(value)) {
                try {
                    c.bench_methods.push_back(parse_ablation(s));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(e.what());
                }
            }
        } else throw unknown();
    } else if (section == "output") {
        if (key == "dir") c.output_dir = value;
        else throw unknown();
    } else {
        throw ConfigError("unknown section [" + section + "]");
    }
}

/// Cross-field checks that single keys cannot express.
inline void validate_config(ExperimentConfig& c) {
    c.source.validate();
    c.target.validate();
    c.model.validate();
    if (c.source.channels != c.model.input_channels || c.target.channels != c.model.input_channels)
        throw ConfigError("[source]/[target] channels must equal [training] input_channels");
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (c.synthesis.augment.scale_min > c.synthesis.augment.scale_max || c.synthesis.augment.scale_min <= 0.0)
        throw ConfigError("synthesis scale range must satisfy 0 < scale_min <= scale_max");
    if (c.synthesis.gan.batch_size == 0) throw ConfigError("gan_batch must be >= 1");
    if (!(c.synthesis.margin >= 0.0)) throw ConfigError("synthesis margin must be >= 0");
}

/// Parses INI text. Lines are `key = value`; `#` and `;` start comments.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no) + ": ";
        std::string line(detail::trim(raw));
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header");
            section = std::string(detail::trim(std::string_view(line).substr(1, line.size() - 2)));
            static const char* known[] = {"source", "target", "synthesis", "training", "transfer", "output"};
            if (std::find(std::begin(known), std::end(known), section) == std::end(known))
                throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key(detail::trim(std::string_view(line).substr(0, eq)));
        const std::string value(detail::trim(std::string_view(line).substr(eq + 1)));
        try {
            apply_config_key(c, section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    validate_config(c);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

inline void write_config(const ExperimentConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    out << config_to_text(c);
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace dtlc
