#pragma once

// Planar float images in [0, 1], 8-bit PNG storage, and the `x,y`
// annotation CSV format.

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dtlc/density.hpp"

namespace dtlc {

/// Channel-planar image: pixels[(c * height + y) * width + x].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<float> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    std::size_t area() const { return height * width; }
    bool same_extent(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    bool operator==(const Image&) const = default;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline float quantize8(float v) {
    const float q = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
    return q / 255.0f;
}

inline void quantize8(Image& img) {
    for (auto& v : img.pixels) v = quantize8(v);
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw FormatError("write_png: only 1 or 3 channels are supported, got " + std::to_string(img.channels));
    std::vector<std::uint8_t> buffer(img.area() * img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c)
                buffer[(y * img.width + x) * img.channels + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));

    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("write_png " + path.string() + ": " + msg);
    }
}

inline Image read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.string().c_str()))
        throw FormatError("read_png " + path.string() + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const std::size_t channels = color ? 3 : 1;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("read_png " + path.string() + ": " + msg);
    }
    Image img(image.height, image.width, channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                img.at(c, y, x) = static_cast<float>(buffer[(y * img.width + x) * channels + c]) / 255.0f;
    return img;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text, const std::string& where) {
    double v = 0.0;
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last || !std::isfinite(v))
        throw FormatError(where + ": '" + std::string(text) + "' is not a finite decimal number");
    return v;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace detail

inline void write_annotations_csv(const std::filesystem::path& path, const std::vector<Point>& points) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "x,y\n";
    for (const auto& p : points) out << detail::format_double(p.x) << ',' << detail::format_double(p.y) << '\n';
}

/// Strict reader: header `x,y`, then one `x,y` row per cell. Blank lines
/// are rejected like any other malformed row.
inline std::vector<Point> read_annotations_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path.string());
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw FormatError(path.string() + ":1: missing header 'x,y'");
    ++line_no;
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
        static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
        line.erase(0, 3);
    if (detail::trim(line) != "x,y") throw FormatError(path.string() + ":1: expected header 'x,y'");
    std::vector<Point> points;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        const std::string_view row = detail::trim(line);
        const auto comma = row.find(',');
        if (comma == std::string_view::npos || row.find(',', comma + 1) != std::string_view::npos)
            throw FormatError(where + ": expected exactly two comma-separated fields");
        points.push_back({detail::parse_double(detail::trim(row.substr(0, comma)), where),
                          detail::parse_double(detail::trim(row.substr(comma + 1)), where)});
    }
    return points;
}

}  // namespace dtlc
