#pragma once

// Named-tensor archive.
//
//   "DTLC" | u32 version | u32 tensor count
//   per tensor: u32 name length | name (UTF-8) | u32 rank | u64 extent * rank | f32 value * numel
//   u32 metadata length | metadata (UTF-8 key=value lines)
//
// All integers and floats are little-endian. Model checkpoints carry the
// model config, stage tag, seed, rng state and metric history in the
// metadata block.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtlc/density.hpp"
#include "dtlc/model.hpp"
#include "dtlc/tensor.hpp"

namespace dtlc {

inline constexpr char kArchiveMagic[4] = {'D', 'T', 'L', 'C'};
inline constexpr std::uint32_t kArchiveVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(std::size_t offset, const std::string& message)
        : std::runtime_error("checkpoint byte " + std::to_string(offset) + ": " + message), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

struct ArchiveTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const ArchiveTensor&) const = default;
};

/// Tensors plus ordered metadata lines.
struct Archive {
    std::vector<ArchiveTensor> tensors;
    std::vector<std::pair<std::string, std::string>> metadata;

    const ArchiveTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    const std::string* meta(const std::string& key) const {
        for (const auto& [k, v] : metadata)
            if (k == key) return &v;
        return nullptr;
    }

    bool operator==(const Archive&) const = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n)
            throw CheckpointError(pos_, std::string("truncated ") + what + " (need " + std::to_string(n) + " bytes, " +
                                            std::to_string(remaining()) + " left)");
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, bytes_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, bytes_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void floats(float* dst, std::size_t n, const char* what) {
        if (n > remaining() / 4) need(n * 4, what);
        std::memcpy(dst, bytes_.data() + pos_, n * 4);
        pos_ += n * 4;
    }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_archive(const Archive& a) {
    std::string out(kArchiveMagic, 4);
    detail::put_u32(out, kArchiveVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(a.tensors.size()));
    for (const auto& t : a.tensors) {
        if (shape_numel(t.shape) != t.values.size())
            throw std::invalid_argument("archive tensor '" + t.name + "': shape " + shape_str(t.shape) + " holds " +
                                        std::to_string(shape_numel(t.shape)) + " values, got " + std::to_string(t.values.size()));
        detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) detail::put_u64(out, d);
        out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * 4);
    }
    std::string meta;
    for (const auto& [k, v] : a.metadata) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw std::invalid_argument("archive metadata '" + k + "' contains '=' or a newline");
        meta += k + "=" + v + "\n";
    }
    detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    return out;
}

inline Archive parse_archive(const std::string& bytes) {
    detail::Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) throw CheckpointError(0, "bad magic, expected 'DTLC'");
    r.text(4, "magic");
    const std::size_t version_at = r.offset();
    const auto version = r.u32("version");
    if (version != kArchiveVersion)
        throw CheckpointError(version_at, "unsupported format version " + std::to_string(version));
    const auto count = r.u32("tensor count");
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveTensor t;
        const auto name_len = r.u32("tensor name length");
        t.name = r.text(name_len, "tensor name");
        const std::size_t rank_at = r.offset();
        const auto rank = r.u32("tensor rank");
        if (rank > 8) throw CheckpointError(rank_at, "implausible rank " + std::to_string(rank) + " for '" + t.name + "'");
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::size_t extent_at = r.offset();
            const auto e = r.u64("tensor extent");
            if (e != 0 && numel > bytes.size() / e)
                throw CheckpointError(extent_at, "tensor '" + t.name + "' is larger than the file");
            t.shape.push_back(static_cast<std::size_t>(e));
            numel *= static_cast<std::size_t>(e);
        }
        t.values.resize(numel);
        r.floats(t.values.data(), numel, "tensor values");
        a.tensors.push_back(std::move(t));
    }
    const auto meta_len = r.u32("metadata length");
    const std::size_t meta_at = r.offset();
    const std::string meta = r.text(meta_len, "metadata");
    if (r.remaining() != 0)
        throw CheckpointError(r.offset(), std::to_string(r.remaining()) + " trailing bytes after the metadata block");
    std::size_t line_start = 0;
    while (line_start < meta.size()) {
        const auto end = meta.find('\n', line_start);
        if (end == std::string::npos) throw CheckpointError(meta_at + line_start, "metadata line without newline");
        const std::string line = meta.substr(line_start, end - line_start);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError(meta_at + line_start, "metadata line without '='");
        a.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        line_start = end + 1;
    }
    return a;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline void save_archive(const Archive& a, const std::filesystem::path& path) { write_file_bytes(path, serialize_archive(a)); }
inline Archive load_archive(const std::filesystem::path& path) { return parse_archive(read_file_bytes(path)); }

// --- density maps ---------------------------------------------------------------

/// Single-tensor archive `density` [H, W] with `sigma` metadata.
inline Archive density_archive(const DensityMap& map) {
    Archive a;
    a.tensors.push_back({"density", {map.height, map.width}, std::vector<float>(map.values.begin(), map.values.end())});
    a.metadata.emplace_back("sigma", detail::format_real(map.sigma));
    return a;
}

inline DensityMap density_from_archive(const Archive& a) {
    const auto* t = a.find("density");
    if (!t || t->shape.size() != 2 || a.tensors.size() != 1)
        throw CheckpointError(0, "expected a single rank-2 tensor named 'density'");
    DensityMap map{t->shape[0], t->shape[1], std::vector<double>(t->values.begin(), t->values.end()), 0.0};
    if (const auto* s = a.meta("sigma")) map.sigma = detail::parse_real(*s, "sigma");
    return map;
}

// --- model checkpoints ----------------------------------------------------------

inline constexpr const char* kStageTags[] = {"init", "source", "surgered", "synth_ft", "real_ft"};

struct Checkpoint {
    std::vector<ArchiveTensor> tensors;  // parameter order of the model
    ModelConfig config;
    std::string stage = "init";
    std::uint64_t seed = 0;
    std::uint64_t rng_state = 0;
    std::vector<std::string> metrics;  // one history line per recorded epoch or stage

    const ArchiveTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    bool operator==(const Checkpoint&) const = default;
};

inline std::string group_of(const std::string& tensor_name) { return tensor_name.substr(0, tensor_name.find('.')); }

inline Archive checkpoint_to_archive(const Checkpoint& c) {
    Archive a;
    a.tensors = c.tensors;
    a.metadata.emplace_back("stage", c.stage);
    a.metadata.emplace_back("seed", std::to_string(c.seed));
    a.metadata.emplace_back("rng", std::to_string(c.rng_state));
    for (const auto& [k, v] : model_config_to_kv(c.config)) a.metadata.emplace_back("config." + k, v);
    for (const auto& m : c.metrics) a.metadata.emplace_back("metric", m);
    return a;
}

inline Checkpoint checkpoint_from_archive(const Archive& a) {
    Checkpoint c;
    c.tensors = a.tensors;
    std::map<std::string, std::string> config_kv;
    bool have_stage = false;
    for (const auto& [k, v] : a.metadata) {
        if (k == "stage") {
            c.stage = v;
            have_stage = true;
        } else if (k == "seed") {
            c.seed = detail::parse_size(v, k);
        } else if (k == "rng") {
            c.rng_state = detail::parse_size(v, k);
        } else if (k == "metric") {
            c.metrics.push_back(v);
        } else if (k.rfind("config.", 0) == 0) {
            config_kv[k.substr(7)] = v;
        } else {
            throw CheckpointError(0, "unknown metadata key '" + k + "'");
        }
    }
    if (!have_stage) throw CheckpointError(0, "metadata lacks a stage tag");
    try {
        c.config = model_config_from_kv(config_kv);
    } catch (const ConfigError& e) {
        throw CheckpointError(0, std::string("bad model config: ") + e.what());
    }
    for (const auto& t : c.tensors) {
        const auto g = group_of(t.name);
        bool known = false;
        for (const char* name : kGroupNames) known = known || g == name;
        if (!known) throw CheckpointError(0, "tensor '" + t.name + "' belongs to no parameter group");
    }
    return c;
}

inline std::string serialize_checkpoint(const Checkpoint& c) { return serialize_archive(checkpoint_to_archive(c)); }
inline Checkpoint parse_checkpoint(const std::string& bytes) { return checkpoint_from_archive(parse_archive(bytes)); }
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { write_file_bytes(path, serialize_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file_bytes(path)); }

template <typename T>
Checkpoint checkpoint_from_model(const CounterModel<T>& model, std::string stage, std::uint64_t seed) {
    Checkpoint c;
    c.config = model.config();
    c.stage = std::move(stage);
    c.seed = seed;
    for (const auto& g : model.groups())
        for (const auto& p : g.params) {
            const auto d = p.tensor.data();
            std::vector<float> values(d.size());
            for (std::size_t i = 0; i < d.size(); ++i) values[i] = static_cast<float>(d[i]);
            c.tensors.push_back({p.name, p.tensor.shape(), std::move(values)});
        }
    return c;
}

/// Builds the model from the checkpoint config and copies every parameter
/// by name. Missing, extra or misshapen tensors are errors.
template <typename T>
CounterModel<T> model_from_checkpoint(const Checkpoint& c) {
    CounterModel<T> model(c.config);
    std::size_t expected = 0;
    for (auto& g : model.groups())
        for (auto& p : g.params) {
            ++expected;
            const auto* t = c.find(p.name);
            if (!t) throw CheckpointError(0, "missing tensor '" + p.name + "'");
            if (t->shape != p.tensor.shape())
                throw CheckpointError(0, "tensor '" + p.name + "' has shape " + shape_str(t->shape) + ", model expects " +
                                             shape_str(p.tensor.shape()));
            auto d = p.tensor.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(t->values[i]);
        }
    if (c.tensors.size() != expected)
        throw CheckpointError(0, "checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model has " +
                                     std::to_string(expected));
    return model;
}

// --- perceptual extractor -------------------------------------------------------

template <typename T>
Archive extractor_to_archive(const PerceptualExtractor<T>& ex) {
    Archive a;
    for (std::size_t b = 0; b < ex.blocks().size(); ++b)
        for (std::size_t i = 0; i < ex.blocks()[b].size(); ++i) {
            const auto& layer = ex.blocks()[b][i];
            const std::string prefix = "extractor.block" + std::to_string(b) + ".conv" + std::to_string(i);
            for (const auto* t : {&layer.weights, &layer.bias}) {
                const auto d = t->data();
                a.tensors.push_back({prefix + (t == &layer.weights ? ".weight" : ".bias"), t->shape(),
                                     std::vector<float>(d.begin(), d.end())});
            }
        }
    a.metadata.emplace_back("stage", "extractor");
    a.metadata.emplace_back("blocks", std::to_string(ex.blocks().size()));
    return a;
}

template <typename T>
PerceptualExtractor<T> extractor_from_archive(const Archive& a) {
    const auto* blocks = a.meta("blocks");
    if (!blocks) throw CheckpointError(0, "extractor archive lacks 'blocks'");
    const auto n_blocks = detail::parse_size(*blocks, "blocks");
    PerceptualExtractor<T> ex;
    std::size_t used = 0;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        std::vector<ConvParams<T>> layers;
        for (std::size_t i = 0;; ++i) {
            const std::string prefix = "extractor.block" + std::to_string(b) + ".conv" + std::to_string(i);
            const auto* w = a.find(prefix + ".weight");
            const auto* bias = a.find(prefix + ".bias");
            if (!w || !bias) break;
            layers.push_back({Tensor<T>(w->shape, std::vector<T>(w->values.begin(), w->values.end())),
                              Tensor<T>(bias->shape, std::vector<T>(bias->values.begin(), bias->values.end())), 1, 1, 1});
            used += 2;
        }
        if (layers.empty()) throw CheckpointError(0, "extractor block " + std::to_string(b) + " has no layers");
        ex.push_block(std::move(layers));
    }
    if (used != a.tensors.size()) throw CheckpointError(0, "extractor archive holds unexpected tensors");
    return ex;
}

}  // namespace dtlc
