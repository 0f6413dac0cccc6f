#pragma once

// Binary PGM (P5) / PPM (P6) codecs with maxval 255, tensor conversion and
// deterministic synthetic test images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

struct ImageBuffer {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1; // 1 (PGM) or 3 (PPM)
    std::vector<std::uint8_t> samples; // row-major, channels interleaved

    ImageBuffer() = default;
    ImageBuffer(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), samples(w * h * c, fill) {
        if (c != 1 && c != 3) throw DimensionError("image channels must be 1 or 3");
    }

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
        return samples[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return samples[(y * width + x) * channels + c];
    }

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

// ---- tensor conversion ----------------------------------------------------------

/// HxWxC tensor with samples / 255.
inline Tensor to_tensor(const ImageBuffer& img) {
    Tensor t(Shape{img.height, img.width, img.channels});
    for (std::size_t i = 0; i < img.samples.size(); ++i) t[i] = img.samples[i] / 255.0;
    return t;
}

/// Clamps to [0,1] and quantizes with round-half-up: floor(255 v + 0.5).
inline ImageBuffer from_tensor(const Tensor& t) {
    if (t.rank() != 3) throw DimensionError("image tensor must be HxWxC, got " + shape_string(t.shape()));
    ImageBuffer img(t.dim(1), t.dim(0), t.dim(2));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        const double v = std::clamp(t[i], 0.0, 1.0);
        img.samples[i] = static_cast<std::uint8_t>(std::floor(255.0 * v + 0.5));
    }
    return img;
}

// ---- netpbm codec -----------------------------------------------------------------

namespace detail {

class PnmHeaderReader {
public:
    explicit PnmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    // Skips whitespace and '#' comments (to end of line).
    void skip_space() {
        while (pos_ < bytes_.size()) {
            const auto c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space();
        const std::size_t start = pos_;
        std::size_t v = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > (std::size_t{1} << 32)) throw ParseError(std::string(what) + " too large", start);
            ++pos_;
        }
        if (pos_ == start) {
            if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated header: expected ") + what, pos_);
            throw ParseError(std::string("expected ") + what, pos_);
        }
        return v;
    }

    std::size_t pos_ = 0;
    std::span<const std::uint8_t> bytes_;
};

} // namespace detail

inline ImageBuffer decode_pnm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2) throw ParseError("truncated header: expected magic", bytes.size());
    std::size_t channels = 0;
    if (bytes[0] == 'P' && bytes[1] == '5') {
        channels = 1;
    } else if (bytes[0] == 'P' && bytes[1] == '6') {
        channels = 3;
    } else {
        throw ParseError("bad magic: expected P5 or P6", 0);
    }
    detail::PnmHeaderReader r(bytes);
    r.pos_ = 2;
    const auto width = r.number("width");
    const auto height = r.number("height");
    const auto maxval_at = r.pos_;
    const auto maxval = r.number("maxval");
    if (width == 0 || height == 0) throw ParseError("zero image dimension", maxval_at);
    if (maxval != 255) throw ParseError("maxval must be 255, got " + std::to_string(maxval), maxval_at);
    if (r.pos_ >= bytes.size()) throw ParseError("truncated header: expected whitespace", r.pos_);
    const auto sep = bytes[r.pos_];
    if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r') {
        throw ParseError("expected single whitespace after maxval", r.pos_);
    }
    const std::size_t payload = r.pos_ + 1;
    const std::size_t need = width * height * channels;
    if (bytes.size() - payload < need) {
        throw ParseError("truncated payload: expected " + std::to_string(need) + " samples, found " +
                             std::to_string(bytes.size() - payload),
                         bytes.size());
    }
    ImageBuffer img(width, height, channels);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(payload), need, img.samples.begin());
    return img;
}

inline std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
    if (img.channels != 1 && img.channels != 3) throw DimensionError("image channels must be 1 or 3");
    if (img.samples.size() != img.width * img.height * img.channels) {
        throw DimensionError("image sample count does not match its dimensions");
    }
    const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                               std::to_string(img.width) + " " + std::to_string(img.height) +
                               "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.samples.begin(), img.samples.end());
    return out;
}

inline ImageBuffer read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pnm(bytes);
}

inline void write_image(const std::string& path, const ImageBuffer& img) {
    const auto bytes = encode_pnm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

/// ".pgm" for one channel, ".ppm" for three.
inline const char* image_extension(std::size_t channels) { return channels == 3 ? ".ppm" : ".pgm"; }

// ---- synthetic images ---------------------------------------------------------------

enum class SynthKind { gradient, blocks, light_background };

inline SynthKind parse_synth_kind(std::string_view s) {
    if (s == "gradient") return SynthKind::gradient;
    if (s == "blocks") return SynthKind::blocks;
    if (s == "light-background") return SynthKind::light_background;
    throw ContractError("unknown synthetic image kind '" + std::string(s) + "'");
}

/// Deterministic test images.
///
///  gradient: diagonal ramp, seed unused. Channel 0 (and every channel of a
///    grayscale image) is floor(255 (x + y) / (w + h - 2)); for RGB, channel 1
///    is floor(255 x / (w - 1)) and channel 2 is floor(255 y / (h - 1)).
///  blocks: random background level plus 3-5 random axis-aligned rectangles.
///  light-background: near-white background (240-255) with dark or colored
///    rectangles confined to a (3w/5) x (3h/5) window, so at least 64% of
///    pixels stay >= 240 in every channel.
inline ImageBuffer synth_image(SynthKind kind, std::size_t width, std::size_t height,
                               std::size_t channels, std::uint64_t seed) {
    if (width < 4 || height < 4) throw GeometryError("synthetic images need at least 4x4 pixels");
    ImageBuffer img(width, height, channels);
    SeedRng rng(seed);
    auto fill_rect = [&](std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                         const std::vector<std::uint8_t>& color) {
        for (std::size_t y = y0; y < y0 + h; ++y)
            for (std::size_t x = x0; x < x0 + w; ++x)
                for (std::size_t c = 0; c < channels; ++c) img.at(x, y, c) = color[c];
    };
    auto random_color = [&](std::uint64_t lo, std::uint64_t hi) {
        std::vector<std::uint8_t> col(channels);
        for (auto& v : col) v = static_cast<std::uint8_t>(lo + rng.below(hi - lo + 1));
        return col;
    };

    switch (kind) {
    case SynthKind::gradient:
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                img.at(x, y, 0) = static_cast<std::uint8_t>(255 * (x + y) / (width + height - 2));
                if (channels == 3) {
                    img.at(x, y, 1) = static_cast<std::uint8_t>(255 * x / (width - 1));
                    img.at(x, y, 2) = static_cast<std::uint8_t>(255 * y / (height - 1));
                }
            }
        break;
    case SynthKind::blocks: {
        fill_rect(0, 0, width, height, random_color(0, 255));
        const auto count = 3 + rng.below(3);
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto w = 2 + rng.below(width / 2);
            const auto h = 2 + rng.below(height / 2);
            const auto x0 = rng.below(width - w + 1);
            const auto y0 = rng.below(height - h + 1);
            fill_rect(x0, y0, w, h, random_color(0, 255));
        }
        break;
    }
    case SynthKind::light_background: {
        for (auto& s : img.samples) s = static_cast<std::uint8_t>(240 + rng.below(16));
        const std::size_t rw = std::max<std::size_t>(1, width * 3 / 5);
        const std::size_t rh = std::max<std::size_t>(1, height * 3 / 5);
        const auto ox = rng.below(width - rw + 1);
        const auto oy = rng.below(height - rh + 1);
        const auto count = 2 + rng.below(3);
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto w = 1 + rng.below(rw);
            const auto h = 1 + rng.below(rh);
            const auto x0 = ox + rng.below(rw - w + 1);
            const auto y0 = oy + rng.below(rh - h + 1);
            fill_rect(x0, y0, w, h, random_color(0, 200));
        }
        break;
    }
    }
    return img;
}

} // namespace gradleak
