#include "crtseg/render.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace crtseg {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& body) {
    put_u32(out, static_cast<std::uint32_t>(body.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

RgbImage overlay(const Image2D& image, const MaskMap& mask, Rgb color, double opacity) {
    if (mask.height != image.height || mask.width != image.width)
        throw ValidationError("overlay: mask and image shapes differ");
    if (!(opacity >= 0.0 && opacity <= 1.0)) throw ValidationError("overlay: opacity must lie in [0, 1]");
    RgbImage out{image.height, image.width, std::vector<std::uint8_t>(image.size() * 3)};
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double g = std::clamp(image.data[i], 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
            const double v = mask.data[i] != 0 ? (1.0 - opacity) * g + opacity * color[c] / 255.0 : g;
            out.data[3 * i + c] = to_byte(v);
        }
    }
    return out;
}

RgbImage colorize_segments(const SuperpixelMap& spx) {
    RgbImage out{spx.height, spx.width, std::vector<std::uint8_t>(spx.labels.size() * 3)};
    for (std::size_t i = 0; i < spx.labels.size(); ++i) {
        const std::uint64_t h = mix_seed(static_cast<std::uint64_t>(spx.labels[i]));
        for (int c = 0; c < 3; ++c) out.data[3 * i + c] = static_cast<std::uint8_t>(64 + ((h >> (8 * c)) & 0xFF) * 191 / 255);
    }
    return out;
}

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
    if (img.height == 0 || img.width == 0 || img.data.size() != img.height * img.width * 3)
        throw ValidationError("encode_png: malformed image");
    std::vector<std::uint8_t> raw;
    raw.reserve(img.height * (img.width * 3 + 1));
    for (std::size_t r = 0; r < img.height; ++r) {
        raw.push_back(0);
        raw.insert(raw.end(), img.data.begin() + r * img.width * 3, img.data.begin() + (r + 1) * img.width * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> packed(bound);
    if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw Error("encode_png: zlib compression failed");
    packed.resize(bound);

    std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(img.width));
    put_u32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor, deflate, no filter, no interlace
    chunk(out, "IHDR", ihdr);
    chunk(out, "IDAT", packed);
    chunk(out, "IEND", {});
    return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
    const std::vector<std::uint8_t> bytes = encode_png(image);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing " + path.string());
}

void export_superpixels(const std::filesystem::path& dir, const SuperpixelMap& spx) {
    std::filesystem::create_directories(dir);
    MaskMap labels(spx.height, spx.width);
    labels.data = spx.labels;
    write_raster(dir / "superpixels.i32", labels);
    write_png(dir / "superpixels.png", colorize_segments(spx));
}

void export_score_maps(const std::filesystem::path& dir, const ScoreMaps& scores) {
    std::filesystem::create_directories(dir);
    for (std::size_t l = 0; l < scores.scores.rows; ++l) {
        Image2D map(scores.height, scores.width);
        const auto row = scores.scores.row(l);
        std::copy(row.begin(), row.end(), map.data.begin());
        char name[64];
        std::snprintf(name, sizeof name, "score_%03zu_class%d.f32", l, scores.prototype_class[l]);
        write_raster(dir / name, map);
    }
}

}  // namespace crtseg
