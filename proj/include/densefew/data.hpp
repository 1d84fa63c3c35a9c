#pragma once

// Dataset ingestion and the deterministic synthetic glyph generator.
//
// Dataset file layout (little-endian):
//   magic "FSLT", u32 version = 1
//   u32 count, u32 height, u32 width, u32 channels
//   f64 pixel_mean, f64 pixel_stddev   (dataset-level stats header extension)
//   f32 payload, row-major, image-major (count * h * w * c)
//   u32 labels[count]
//   u32 class_count

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "densefew/errors.hpp"
#include "densefew/rng.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes little-endian host");

inline constexpr char kDatasetMagic[4] = {'F', 'S', 'L', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
    std::int64_t count = 0, height = 0, width = 0, channels = 0;
    std::int64_t num_classes = 0;
    std::vector<float> pixels;  // raw values in [0, 1]
    std::vector<std::int64_t> labels;
    double pixel_mean = 0.0;
    double pixel_stddev = 1.0;

    std::int64_t image_size() const { return height * width * channels; }

    // Normalized image as a constant graph leaf {h, w, c}.
    Var image(std::int64_t i) const {
        if (i < 0 || i >= count) throw IndexError("dataset image " + std::to_string(i));
        std::vector<double> v(static_cast<std::size_t>(image_size()));
        const float* src = pixels.data() + i * image_size();
        double inv = 1.0 / (pixel_stddev > 0.0 ? pixel_stddev : 1.0);
        for (std::size_t p = 0; p < v.size(); ++p)
            v[p] = (static_cast<double>(src[p]) - pixel_mean) * inv;
        return constant({height, width, channels}, std::move(v));
    }

    // Normalized batch {n, h, w, c} gathering the given indices.
    Var batch(const std::vector<std::int64_t>& indices) const {
        std::vector<double> v(indices.size() * static_cast<std::size_t>(image_size()));
        double inv = 1.0 / (pixel_stddev > 0.0 ? pixel_stddev : 1.0);
        for (std::size_t k = 0; k < indices.size(); ++k) {
            std::int64_t i = indices[k];
            if (i < 0 || i >= count) throw IndexError("dataset image " + std::to_string(i));
            const float* src = pixels.data() + i * image_size();
            double* dst = v.data() + k * image_size();
            for (std::int64_t p = 0; p < image_size(); ++p)
                dst[p] = (static_cast<double>(src[p]) - pixel_mean) * inv;
        }
        return constant({static_cast<std::int64_t>(indices.size()), height, width, channels},
                        std::move(v));
    }

    std::vector<std::int64_t> class_members(std::int64_t cls) const {
        std::vector<std::int64_t> out;
        for (std::int64_t i = 0; i < count; ++i)
            if (labels[static_cast<std::size_t>(i)] == cls) out.push_back(i);
        return out;
    }

    std::vector<std::int64_t> label_histogram() const {
        std::vector<std::int64_t> hist(static_cast<std::size_t>(num_classes), 0);
        for (auto y : labels) ++hist[static_cast<std::size_t>(y)];
        return hist;
    }
};

namespace detail {

template <typename T>
T read_or_throw(std::istream& is, const char* what) {
    T v{};
    auto at = is.tellg();
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw FormatError(std::string("dataset truncated reading ") + what + " at byte offset " +
                          std::to_string(static_cast<long long>(at)));
    return v;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open dataset for writing: " + path);
    os.write(kDatasetMagic, 4);
    auto w32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64f = [&os](double v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    w32(kDatasetVersion);
    w32(static_cast<std::uint32_t>(ds.count));
    w32(static_cast<std::uint32_t>(ds.height));
    w32(static_cast<std::uint32_t>(ds.width));
    w32(static_cast<std::uint32_t>(ds.channels));
    w64f(ds.pixel_mean);
    w64f(ds.pixel_stddev);
    os.write(reinterpret_cast<const char*>(ds.pixels.data()),
             static_cast<std::streamsize>(ds.pixels.size() * sizeof(float)));
    for (auto y : ds.labels) w32(static_cast<std::uint32_t>(y));
    w32(static_cast<std::uint32_t>(ds.num_classes));
    if (!os) throw FormatError("short write while saving dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open dataset: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw FormatError("bad dataset magic at byte offset 0 in " + path);
    auto version = detail::read_or_throw<std::uint32_t>(is, "version");
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    ds.count = detail::read_or_throw<std::uint32_t>(is, "count");
    ds.height = detail::read_or_throw<std::uint32_t>(is, "height");
    ds.width = detail::read_or_throw<std::uint32_t>(is, "width");
    ds.channels = detail::read_or_throw<std::uint32_t>(is, "channels");
    ds.pixel_mean = detail::read_or_throw<double>(is, "pixel mean");
    ds.pixel_stddev = detail::read_or_throw<double>(is, "pixel stddev");
    ds.pixels.resize(static_cast<std::size_t>(ds.count * ds.image_size()));
    if (!ds.pixels.empty()) {
        auto at = is.tellg();
        if (!is.read(reinterpret_cast<char*>(ds.pixels.data()),
                     static_cast<std::streamsize>(ds.pixels.size() * sizeof(float))))
            throw FormatError("dataset truncated in pixel payload at byte offset " +
                              std::to_string(static_cast<long long>(at)));
    }
    ds.labels.resize(static_cast<std::size_t>(ds.count));
    for (auto& y : ds.labels) y = detail::read_or_throw<std::uint32_t>(is, "label");
    ds.num_classes = detail::read_or_throw<std::uint32_t>(is, "class count");
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        if (ds.labels[i] >= ds.num_classes)
            throw FormatError("label " + std::to_string(ds.labels[i]) + " of image " +
                              std::to_string(i) + " >= class count " +
                              std::to_string(ds.num_classes));
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic glyphs

struct GlyphSpec {
    std::int64_t classes = 40;
    std::int64_t per_class = 100;
    std::int64_t height = 32, width = 32, channels = 3;
    std::uint64_t seed = 17;
    double jitter = 0.04;  // positional / angular jitter amplitude
    double noise = 0.02;   // Gaussian pixel noise stddev
};

namespace detail {

struct GlyphBar {
    double cx, cy, angle, len, thick;
    double color[3];
};

inline std::vector<GlyphBar> glyph_recipe(const GlyphSpec& spec, std::int64_t cls) {
    Rng rng = Rng(spec.seed).stream(static_cast<std::uint64_t>(cls) + 1);
    std::int64_t nbars = 2 + static_cast<std::int64_t>(rng.below(3));
    std::vector<GlyphBar> bars;
    for (std::int64_t b = 0; b < nbars; ++b) {
        GlyphBar bar;
        bar.cx = rng.uniform(0.2, 0.8);
        bar.cy = rng.uniform(0.2, 0.8);
        bar.angle = rng.uniform(0.0, 3.141592653589793);
        bar.len = rng.uniform(0.35, 0.65);
        bar.thick = rng.uniform(0.05, 0.10);
        for (auto& ch : bar.color) ch = rng.uniform(0.35, 1.0);
        bars.push_back(bar);
    }
    return bars;
}

inline double segment_distance(double px, double py, const GlyphBar& bar) {
    double dx = std::cos(bar.angle) * bar.len * 0.5;
    double dy = std::sin(bar.angle) * bar.len * 0.5;
    double ax = bar.cx - dx, ay = bar.cy - dy;
    double bx = bar.cx + dx, by = bar.cy + dy;
    double vx = bx - ax, vy = by - ay;
    double t = ((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy);
    t = std::clamp(t, 0.0, 1.0);
    double qx = ax + t * vx, qy = ay + t * vy;
    return std::hypot(px - qx, py - qy);
}

}  // namespace detail

// Deterministic synthetic benchmark: each class is a fixed layout of
// oriented colored bars; each image adds per-image jitter and pixel noise.
inline Dataset generate_glyphs(const GlyphSpec& spec) {
    if (spec.classes < 2) throw ArgumentError("generate_glyphs: need at least 2 classes");
    Dataset ds;
    ds.count = spec.classes * spec.per_class;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.channels = spec.channels;
    ds.num_classes = spec.classes;
    ds.pixels.resize(static_cast<std::size_t>(ds.count * ds.image_size()));
    ds.labels.resize(static_cast<std::size_t>(ds.count));

    std::int64_t img_idx = 0;
    for (std::int64_t cls = 0; cls < spec.classes; ++cls) {
        auto recipe = detail::glyph_recipe(spec, cls);
        for (std::int64_t i = 0; i < spec.per_class; ++i, ++img_idx) {
            Rng rng = Rng(spec.seed).stream(
                0x10000ull + static_cast<std::uint64_t>(cls) * 1000003ull +
                static_cast<std::uint64_t>(i));
            auto bars = recipe;
            for (auto& bar : bars) {
                bar.cx += rng.normal(0.0, spec.jitter);
                bar.cy += rng.normal(0.0, spec.jitter);
                bar.angle += rng.normal(0.0, spec.jitter * 2.0);
            }
            float* img = ds.pixels.data() + img_idx * ds.image_size();
            for (std::int64_t y = 0; y < spec.height; ++y)
                for (std::int64_t x = 0; x < spec.width; ++x) {
                    double px = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.width);
                    double py = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.height);
                    double pix[3] = {0.05, 0.05, 0.05};
                    for (const auto& bar : bars) {
                        double dist = detail::segment_distance(px, py, bar);
                        if (dist < bar.thick) {
                            double w = 1.0 - dist / bar.thick;
                            for (std::int64_t ch = 0; ch < 3 && ch < spec.channels; ++ch)
                                pix[ch] = std::max(pix[ch], bar.color[ch] * (0.5 + 0.5 * w));
                        }
                    }
                    for (std::int64_t ch = 0; ch < spec.channels; ++ch) {
                        double v = pix[ch < 3 ? ch : 2];
                        if (spec.noise > 0.0) v += rng.normal(0.0, spec.noise);
                        v = std::clamp(v, 0.0, 1.0);
                        img[(y * spec.width + x) * spec.channels + ch] = static_cast<float>(v);
                    }
                }
            ds.labels[static_cast<std::size_t>(img_idx)] = cls;
        }
    }

    // dataset-level normalization statistics
    double sum = 0.0, sq = 0.0;
    for (float v : ds.pixels) {
        sum += v;
        sq += static_cast<double>(v) * v;
    }
    double n = static_cast<double>(ds.pixels.size());
    ds.pixel_mean = n > 0 ? sum / n : 0.0;
    double var = n > 0 ? sq / n - ds.pixel_mean * ds.pixel_mean : 1.0;
    ds.pixel_stddev = std::sqrt(std::max(var, 1e-12));
    return ds;
}

// ---------------------------------------------------------------------------
// split manifest: lines "class_id<TAB>split_name", each class exactly once

enum class SplitName { Base, Val, Novel };

inline const char* split_str(SplitName s) {
    switch (s) {
        case SplitName::Base: return "base";
        case SplitName::Val: return "val";
        case SplitName::Novel: return "novel";
    }
    return "?";
}

struct SplitManifest {
    std::map<std::int64_t, SplitName> assignment;

    std::vector<std::int64_t> classes_of(SplitName s) const {
        std::vector<std::int64_t> out;
        for (const auto& [cls, name] : assignment)
            if (name == s) out.push_back(cls);
        return out;
    }
};

inline SplitManifest default_split(std::int64_t num_classes, std::int64_t base_n,
                                   std::int64_t val_n, std::int64_t novel_n) {
    if (base_n + val_n + novel_n != num_classes)
        throw ArgumentError("split sizes do not cover " + std::to_string(num_classes) + " classes");
    SplitManifest m;
    for (std::int64_t c = 0; c < base_n; ++c) m.assignment[c] = SplitName::Base;
    for (std::int64_t c = base_n; c < base_n + val_n; ++c) m.assignment[c] = SplitName::Val;
    for (std::int64_t c = base_n + val_n; c < num_classes; ++c) m.assignment[c] = SplitName::Novel;
    return m;
}

inline void save_split(const SplitManifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open split manifest for writing: " + path);
    for (const auto& [cls, name] : m.assignment) os << cls << "\t" << split_str(name) << "\n";
}

inline SplitManifest load_split(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open split manifest: " + path);
    SplitManifest m;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::int64_t cls;
        std::string name;
        if (!(ls >> cls >> name))
            throw FormatError("split manifest line " + std::to_string(lineno) + " malformed");
        SplitName sn;
        if (name == "base") sn = SplitName::Base;
        else if (name == "val") sn = SplitName::Val;
        else if (name == "novel") sn = SplitName::Novel;
        else throw FormatError("split manifest line " + std::to_string(lineno) + ": unknown split '" + name + "'");
        if (m.assignment.count(cls))
            throw FormatError("split manifest assigns class " + std::to_string(cls) + " twice");
        m.assignment[cls] = sn;
    }
    return m;
}

}  // namespace densefew
