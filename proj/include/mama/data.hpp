#pragma once

// Labeled image sets. The built-in "glyphs" set renders seven-segment digit
// shapes on a small grayscale canvas with random rotation, scale, shift,
// stroke width, contrast and pixel noise. A CSV loader reads external data
// ("label,p0,p1,..." per line, pixels in [0,1]).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/core.hpp"
#include "mama/seeding.hpp"

namespace mama::data {

struct Dataset {
    std::string tag;
    ImageShape shape;
    std::size_t num_classes = 0;
    Tensor images;  // N x D
    std::vector<std::size_t> labels;

    [[nodiscard]] std::size_t size() const { return labels.size(); }
    [[nodiscard]] std::size_t dim() const { return shape.size(); }

    [[nodiscard]] LabeledExample example(std::size_t i) const { return {images.row_copy(i), labels.at(i)}; }

    [[nodiscard]] Dataset subset(const std::vector<std::size_t>& idx) const {
        Dataset d;
        d.tag = tag;
        d.shape = shape;
        d.num_classes = num_classes;
        d.images = Tensor::uninitialized(idx.size(), dim());
        d.labels.reserve(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            d.images.set_row(r, images.row_span(idx[r]));
            d.labels.push_back(labels.at(idx[r]));
        }
        return d;
    }

    /// The first n examples (all of them if n >= size).
    [[nodiscard]] Dataset head(std::size_t n) const {
        std::vector<std::size_t> idx(std::min(n, size()));
        std::iota(idx.begin(), idx.end(), 0);
        return subset(idx);
    }

    /// Uniform draw of `batch` indices with replacement.
    template <typename Rng>
    [[nodiscard]] Dataset sample(std::size_t batch, Rng& rng) const {
        if (size() == 0) throw ConfigError("cannot sample from an empty dataset");
        std::uniform_int_distribution<std::size_t> pick(0, size() - 1);
        std::vector<std::size_t> idx(batch);
        for (auto& i : idx) i = pick(rng);
        return subset(idx);
    }

    void validate() const {
        if (images.rows() != labels.size()) throw ConfigError("dataset: image/label count mismatch");
        if (images.cols() != dim()) throw ConfigError("dataset: image width does not match shape");
        for (double v : images.data()) {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("dataset: pixel outside [0,1]");
        }
        for (auto y : labels) {
            if (y >= num_classes) throw ConfigError("dataset: label " + std::to_string(y) + " out of range");
        }
    }
};

struct Split {
    Dataset train;
    Dataset test;
};

// ---------------------------------------------------------------------------
// Glyphs

struct GlyphOptions {
    std::size_t side = 8;
    double max_rotation = 0.2;  // radians
    double min_scale = 0.85;
    double max_scale = 1.1;
    double max_shift = 0.08;  // fraction of the canvas
    double min_width = 0.07;
    double max_width = 0.12;
    double min_contrast = 0.7;
    double noise = 0.06;
};

namespace detail {

struct Segment {
    double x0, y0, x1, y1;
};

// a b c d e f g, canvas coordinates with y pointing down
inline const std::array<Segment, 7>& segments() {
    static const std::array<Segment, 7> s{{{0.28, 0.15, 0.72, 0.15},
                                           {0.72, 0.15, 0.72, 0.5},
                                           {0.72, 0.5, 0.72, 0.85},
                                           {0.28, 0.85, 0.72, 0.85},
                                           {0.28, 0.5, 0.28, 0.85},
                                           {0.28, 0.15, 0.28, 0.5},
                                           {0.28, 0.5, 0.72, 0.5}}};
    return s;
}

inline const std::array<const char*, 10>& digit_segments() {
    static const std::array<const char*, 10> d{"abcdef", "bc",    "abdeg", "abcdg",   "bcfg",
                                               "acdfg",  "acdefg", "abc",  "abcdefg", "abcdfg"};
    return d;
}

inline double segment_distance(double px, double py, const Segment& s) {
    const double dx = s.x1 - s.x0;
    const double dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = s.x0 + t * dx - px;
    const double ey = s.y0 + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Renders one glyph of class `label` (0..9).
template <typename Rng>
std::vector<double> render_glyph(std::size_t label, const GlyphOptions& opt, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    const double theta = uniform(-opt.max_rotation, opt.max_rotation);
    const double scale = uniform(opt.min_scale, opt.max_scale);
    const double sx = uniform(-opt.max_shift, opt.max_shift);
    const double sy = uniform(-opt.max_shift, opt.max_shift);
    const double width = uniform(opt.min_width, opt.max_width);
    const double contrast = uniform(opt.min_contrast, 1.0);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    auto transform = [&](double x, double y, double& ox, double& oy) {
        x -= 0.5;
        y -= 0.5;
        ox = 0.5 + sx + scale * (c * x - s * y);
        oy = 0.5 + sy + scale * (s * x + c * y);
    };
    std::vector<detail::Segment> segs;
    for (const char* p = detail::digit_segments().at(label); *p; ++p) {
        auto seg = detail::segments()[static_cast<std::size_t>(*p - 'a')];
        detail::Segment t{};
        transform(seg.x0, seg.y0, t.x0, t.y0);
        transform(seg.x1, seg.y1, t.x1, t.y1);
        segs.push_back(t);
    }
    std::normal_distribution<double> noise(0.0, opt.noise);
    std::vector<double> img(opt.side * opt.side);
    for (std::size_t r = 0; r < opt.side; ++r) {
        for (std::size_t col = 0; col < opt.side; ++col) {
            const double px = (static_cast<double>(col) + 0.5) / static_cast<double>(opt.side);
            const double py = (static_cast<double>(r) + 0.5) / static_cast<double>(opt.side);
            double d = 1e9;
            for (const auto& seg : segs) d = std::min(d, detail::segment_distance(px, py, seg));
            // full ink inside the stroke, linear falloff over one pixel
            const double pixel = 1.0 / static_cast<double>(opt.side);
            const double ink = std::clamp(1.0 - (d - width / 2.0) / pixel, 0.0, 1.0);
            const double v = contrast * ink + (opt.noise > 0.0 ? noise(rng) : 0.0);
            img[r * opt.side + col] = std::clamp(v, 0.0, 1.0);
        }
    }
    return img;
}

/// Balanced glyph set: example i has label i mod 10.
inline Dataset make_glyphs(std::size_t count, std::uint64_t seed, const GlyphOptions& opt = {}) {
    Dataset d;
    d.tag = "glyphs" + std::to_string(opt.side);
    d.shape = {1, opt.side, opt.side};
    d.num_classes = 10;
    d.images = Tensor(count, opt.side * opt.side);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t y = i % 10;
        d.images.set_row(i, render_glyph(y, opt, rng));
        d.labels.push_back(y);
    }
    return d;
}

inline Split make_glyph_split(std::size_t train, std::size_t test, std::uint64_t seed, const GlyphOptions& opt = {}) {
    Split s{make_glyphs(train, derive_seed(seed, {1}), opt), make_glyphs(test, derive_seed(seed, {2}), opt)};
    s.test.tag = s.train.tag;
    return s;
}

// ---------------------------------------------------------------------------
// CSV

inline Dataset load_csv(const std::filesystem::path& path, ImageShape shape, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset " + path.string());
    Dataset d;
    d.tag = path.stem().string();
    d.shape = shape;
    d.num_classes = num_classes;
    std::vector<double> pixels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        if (row.size() != shape.size() + 1) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(shape.size() + 1) + " fields, got " + std::to_string(row.size()));
        }
        if (row[0] < 0.0 || row[0] != std::floor(row[0])) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad label");
        }
        d.labels.push_back(static_cast<std::size_t>(row[0]));
        pixels.insert(pixels.end(), row.begin() + 1, row.end());
    }
    d.images = Tensor(d.labels.size(), shape.size(), pixels);
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Dataset specs as they appear in recipes and configs

struct DatasetSpec {
    std::string kind = "glyphs";  // glyphs | csv
    std::size_t train = 6000;
    std::size_t test = 1000;
    std::uint64_t seed = 7;
    std::size_t side = 8;
    double noise = GlyphOptions{}.noise;
    std::string train_path;
    std::string test_path;
    ImageShape shape;
    std::size_t num_classes = 10;

    [[nodiscard]] std::string tag() const {
        if (kind == "glyphs") {
            return "glyphs" + std::to_string(side) + ":" + std::to_string(train) + "/" + std::to_string(test) +
                   ":seed" + std::to_string(seed);
        }
        return "csv:" + train_path + "|" + test_path;
    }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
    if (d.kind == "glyphs") {
        j = {{"kind", d.kind}, {"train", d.train}, {"test", d.test}, {"seed", d.seed}, {"side", d.side},
             {"noise", d.noise}};
    } else {
        j = {{"kind", d.kind},
             {"train_path", d.train_path},
             {"test_path", d.test_path},
             {"shape", {d.shape.channels, d.shape.height, d.shape.width}},
             {"num_classes", d.num_classes}};
    }
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
    d = DatasetSpec{};
    d.kind = j.value("kind", d.kind);
    if (d.kind == "glyphs") {
        d.train = j.value("train", d.train);
        d.test = j.value("test", d.test);
        d.seed = j.value("seed", d.seed);
        d.side = j.value("side", d.side);
        d.noise = j.value("noise", d.noise);
        if (d.side < 4) throw ConfigError("glyphs: side must be >= 4");
    } else if (d.kind == "csv") {
        d.train_path = j.at("train_path").get<std::string>();
        d.test_path = j.at("test_path").get<std::string>();
        const auto s = j.at("shape").get<std::vector<std::size_t>>();
        if (s.size() != 3) throw ConfigError("csv dataset: shape must be [C,H,W]");
        d.shape = {s[0], s[1], s[2]};
        d.num_classes = j.at("num_classes").get<std::size_t>();
    } else {
        throw ConfigError("unknown dataset kind '" + d.kind + "'");
    }
}

inline Split load_split(const DatasetSpec& spec) {
    Split s;
    if (spec.kind == "glyphs") {
        GlyphOptions opt;
        opt.side = spec.side;
        opt.noise = spec.noise;
        s = make_glyph_split(spec.train, spec.test, spec.seed, opt);
    } else {
        s.train = load_csv(spec.train_path, spec.shape, spec.num_classes);
        s.test = load_csv(spec.test_path, spec.shape, spec.num_classes);
    }
    s.train.tag = s.test.tag = spec.tag();
    return s;
}

}  // namespace mama::data
