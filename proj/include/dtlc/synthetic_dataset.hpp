#pragma once

// On-disk layout of a synthesized target dataset:
//   images/NNNN.png  styles/NNNN.png  annotations/NNNN.csv
//   densities/NNNN.dtlc  real_styles/NNNN.png  manifest.tsv (id count seed)

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dtlc/checkpoint.hpp"
#include "dtlc/domain.hpp"
#include "dtlc/synthesis.hpp"

namespace dtlc {

inline void save_synthesized_dataset(const std::filesystem::path& dir, const SynthesisResult& result) {
    namespace fs = std::filesystem;
    for (const char* sub : {"images", "styles", "annotations", "densities", "real_styles"}) fs::create_directories(dir / sub);
    std::ofstream manifest(dir / "manifest.tsv", std::ios::binary);
    manifest << "id\tcount\tseed\n";
    for (std::size_t i = 0; i < result.samples.size(); ++i) {
        const auto& s = result.samples[i];
        const auto stem = sample_stem(i);
        write_png(dir / "images" / (stem + ".png"), s.image);
        write_png(dir / "styles" / (stem + ".png"), s.style);
        write_annotations_csv(dir / "annotations" / (stem + ".csv"), s.annotations.points);
        save_archive(density_archive(s.density), dir / "densities" / (stem + ".dtlc"));
        manifest << stem << '\t' << s.annotations.points.size() << '\t' << s.seed << '\n';
    }
    for (std::size_t i = 0; i < result.real_styles.size(); ++i)
        write_png(dir / "real_styles" / (sample_stem(i) + ".png"), result.real_styles[i]);
    if (!manifest) throw FormatError("cannot write " + (dir / "manifest.tsv").string());
}

struct ManifestRow {
    std::string id;
    std::size_t count = 0;
    std::uint64_t seed = 0;
};

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path.string());
    std::vector<ManifestRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1) {
            if (line != "id\tcount\tseed") throw FormatError(path.string() + ":1: unexpected header");
            continue;
        }
        if (line.empty()) continue;
        std::istringstream fields(line);
        ManifestRow r;
        std::string count, seed, extra;
        if (!std::getline(fields, r.id, '\t') || !std::getline(fields, count, '\t') || !std::getline(fields, seed, '\t') ||
            std::getline(fields, extra, '\t'))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
        const std::string where = path.string() + ":" + std::to_string(line_no);
        const auto number = [&](const std::string& text) {
            std::uint64_t v = 0;
            const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
            if (text.empty() || res.ec != std::errc{} || res.ptr != text.data() + text.size())
                throw FormatError(where + ": malformed number '" + text + "'");
            return v;
        };
        r.count = static_cast<std::size_t>(number(count));
        r.seed = number(seed);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Training items read back from a synthesized dataset directory.
inline std::vector<Sample> load_synthesized_samples(const std::filesystem::path& dir) {
    std::vector<Sample> out;
    for (const auto& row : read_manifest(dir / "manifest.tsv")) {
        Sample s;
        s.image = read_png(dir / "images" / (row.id + ".png"));
        s.style = read_png(dir / "styles" / (row.id + ".png"));
        s.density = density_from_archive(load_archive(dir / "densities" / (row.id + ".dtlc")));
        s.count = row.count;
        if (s.density.height != s.image.height || s.density.width != s.image.width)
            throw FormatError(row.id + ": density extent differs from its image");
        out.push_back(std::move(s));
    }
    return out;
}

struct SynthesisMismatch {
    std::string id;
    std::string reason;
};

/// Re-reads a written dataset and checks every manifest count against its
/// annotation file and its density integral (within `tolerance`).
inline std::vector<SynthesisMismatch> verify_synthesized_dataset(const std::filesystem::path& dir,
                                                                 double tolerance = 1e-6) {
    std::vector<SynthesisMismatch> bad;
    for (const auto& row : read_manifest(dir / "manifest.tsv")) {
        const auto points = read_annotations_csv(dir / "annotations" / (row.id + ".csv"));
        if (points.size() != row.count)
            bad.push_back({row.id, "manifest count " + std::to_string(row.count) + " but " +
                                       std::to_string(points.size()) + " annotations"});
        const double integral = estimate_count(density_from_archive(load_archive(dir / "densities" / (row.id + ".dtlc"))));
        if (std::abs(integral - static_cast<double>(row.count)) > tolerance)
            bad.push_back({row.id, "density integral " + detail::format_double(integral) + " != count " +
                                       std::to_string(row.count)});
    }
    return bad;
}

}  // namespace dtlc
