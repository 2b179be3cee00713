#pragma once

// Synthetic crowd scenes drawn from parameterized domains.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/ops.hpp"
#include "dpd/tensor.hpp"

namespace dpd {

enum class Texture { flat, gradient, speckle };

inline std::string_view to_string(Texture t) {
    switch (t) {
        case Texture::flat: return "flat";
        case Texture::gradient: return "gradient";
        case Texture::speckle: return "speckle";
    }
    return "flat";
}

inline Texture texture_from_string(std::string_view s) {
    if (s == "flat") return Texture::flat;
    if (s == "gradient") return Texture::gradient;
    if (s == "speckle") return Texture::speckle;
    throw ConfigError("unknown background texture '" + std::string(s) + "'");
}

/// Generative parameters of one synthetic crowd domain.
///
/// resolution_factor > 1 renders the scene, box-averages it down by that
/// factor and upsamples it back, which removes fine detail while keeping
/// the image size and the annotation grid unchanged.
struct DomainSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    int count_min = 6;
    int count_max = 14;
    int radius_min = 2;
    int radius_max = 3;
    double brightness = 0.5;
    double contrast = 1.0;
    double noise_sigma = 0.02;
    Texture texture = Texture::flat;
    std::size_t resolution_factor = 1;
    std::uint64_t seed_stream = 0;

    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;

    void validate() const {
        if (height == 0 || width == 0) throw ConfigError("DomainSpec: image size must be positive");
        if (count_min < 0 || count_min > count_max) throw ConfigError("DomainSpec: invalid count_range");
        if (radius_min < 1 || radius_min > radius_max) throw ConfigError("DomainSpec: invalid head_radius_range");
        if (brightness < 0.0 || brightness > 1.0) throw ConfigError("DomainSpec: brightness outside [0,1]");
        if (!(contrast > 0.0) || contrast > 2.0) throw ConfigError("DomainSpec: contrast outside (0,2]");
        if (noise_sigma < 0.0) throw ConfigError("DomainSpec: negative noise_sigma");
        if (resolution_factor < 1 || height % resolution_factor || width % resolution_factor)
            throw ConfigError("DomainSpec: resolution_factor must divide the image size");
        if (2 * static_cast<std::size_t>(radius_max) + 1 > std::min(height, width))
            throw ConfigError("DomainSpec: heads larger than the image");
    }
};

struct HeadPoint {
    int row = 0;
    int col = 0;
    int radius = 1;
    friend bool operator==(const HeadPoint&, const HeadPoint&) = default;
};

struct Scene {
    Tensor image;       // [3,H,W] in [0,1]
    std::vector<HeadPoint> points;
    Tensor gt_binary;   // [1,H,W] in {0,1}
    friend bool operator==(const Scene&, const Scene&) = default;
};

/// Independent geometry and style streams for one scene.
struct SceneRng {
    std::mt19937_64 geometry;
    std::mt19937_64 style;
};

inline SceneRng make_scene_rng(std::uint64_t seed_stream, std::uint64_t index) {
    auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
    auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
    std::seed_seq g{lo(seed_stream), hi(seed_stream), lo(index), hi(index), 0x9e3779b9u};
    std::seed_seq s{lo(seed_stream), hi(seed_stream), lo(index), hi(index), 0x7f4a7c15u};
    return SceneRng{std::mt19937_64(g), std::mt19937_64(s)};
}

/// Union of lattice discs; a pixel is set iff it lies within some head radius.
inline Tensor render_binary_map(const std::vector<HeadPoint>& points, std::size_t height, std::size_t width) {
    Tensor map = Tensor::chw(1, height, width);
    for (const auto& p : points) {
        const int r = p.radius;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                if (dy * dy + dx * dx > r * r) continue;
                const int y = p.row + dy, x = p.col + dx;
                if (y < 0 || x < 0 || y >= static_cast<int>(height) || x >= static_cast<int>(width)) continue;
                map.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0;
            }
    }
    return map;
}

namespace detail {

inline std::vector<HeadPoint> sample_heads(const DomainSpec& spec, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
    std::uniform_int_distribution<int> radius_dist(spec.radius_min, spec.radius_max);
    const int n = count_dist(rng);
    std::vector<HeadPoint> heads;
    heads.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int r = radius_dist(rng);
        std::uniform_int_distribution<int> row_dist(r, static_cast<int>(spec.height) - 1 - r);
        std::uniform_int_distribution<int> col_dist(r, static_cast<int>(spec.width) - 1 - r);
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const HeadPoint cand{row_dist(rng), col_dist(rng), r};
            // Discs must not touch under 4-connectivity: centre distance > r_i + r_j + 1.
            bool ok = true;
            for (const auto& h : heads) {
                const int dy = h.row - cand.row, dx = h.col - cand.col;
                const int sep = h.radius + cand.radius + 1;
                if (dy * dy + dx * dx <= sep * sep) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                heads.push_back(cand);
                placed = true;
            }
        }
        if (!placed) {
            throw CapacityError("sample_scene: could not place head " + std::to_string(i + 1) + " of " +
                                std::to_string(n) + " after 1000 attempts; count_range too dense for " +
                                std::to_string(spec.height) + "x" + std::to_string(spec.width));
        }
    }
    return heads;
}

inline Tensor render_background(const DomainSpec& spec, std::mt19937_64& style) {
    static constexpr std::array<double, 3> tint{1.0, 0.95, 0.88};
    const std::size_t h = spec.height, w = spec.width;
    Tensor img = Tensor::chw(3, h, w);
    std::uniform_real_distribution<double> speck(-0.15, 0.15);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double base = 0.35;
            switch (spec.texture) {
                case Texture::flat: break;
                case Texture::gradient:
                    base = 0.2 + 0.3 * static_cast<double>(y) / static_cast<double>(h > 1 ? h - 1 : 1);
                    break;
                case Texture::speckle: base += speck(style); break;
            }
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = base * tint[c];
        }
    return img;
}

inline void composite_heads(Tensor& img, const std::vector<HeadPoint>& heads, std::mt19937_64& style) {
    std::uniform_real_distribution<double> jitter(-0.08, 0.08);
    const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
    for (const auto& p : heads) {
        const std::array<double, 3> color{0.9 + jitter(style), 0.78 + jitter(style), 0.66 + jitter(style)};
        const double reach = p.radius + 1.0;
        for (int dy = -p.radius - 1; dy <= p.radius + 1; ++dy)
            for (int dx = -p.radius - 1; dx <= p.radius + 1; ++dx) {
                const int y = p.row + dy, x = p.col + dx;
                if (y < 0 || x < 0 || y >= h || x >= w) continue;
                const double d = std::sqrt(static_cast<double>(dy * dy + dx * dx));
                if (d >= reach) continue;
                const double a = 0.5 * (1.0 + std::cos(std::numbers::pi * d / reach));
                for (std::size_t c = 0; c < 3; ++c) {
                    double& v = img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
                    v = std::max(v, a * color[c]);
                }
            }
    }
}

inline void apply_style(Tensor& img, const DomainSpec& spec, std::mt19937_64& style) {
    if (spec.resolution_factor > 1) {
        img = ops::bilinear_upsample(ops::avg_pool(img, spec.resolution_factor), spec.resolution_factor);
    }
    std::normal_distribution<double> noise(0.0, 1.0);
    for (auto& v : img.data()) {
        double s = (v - 0.5) * spec.contrast + spec.brightness;
        if (spec.noise_sigma > 0.0) s += spec.noise_sigma * noise(style);
        v = std::clamp(s, 0.0, 1.0);
    }
}

}  // namespace detail

/// Draws one scene. Geometry comes only from rng.geometry and appearance only
/// from rng.style, so style-only domain shifts keep head layouts intact.
inline Scene sample_scene(const DomainSpec& spec, SceneRng& rng) {
    spec.validate();
    Scene scene;
    scene.points = detail::sample_heads(spec, rng.geometry);
    scene.image = detail::render_background(spec, rng.style);
    detail::composite_heads(scene.image, scene.points, rng.style);
    detail::apply_style(scene.image, spec, rng.style);
    scene.gt_binary = render_binary_map(scene.points, spec.height, spec.width);
    return scene;
}

/// Scene `index` of the domain's stream.
inline Scene sample_scene(const DomainSpec& spec, std::uint64_t index) {
    SceneRng rng = make_scene_rng(spec.seed_stream, index);
    return sample_scene(spec, rng);
}

inline std::vector<Scene> sample_scenes(const DomainSpec& spec, std::size_t n, std::uint64_t first_index = 0) {
    std::vector<Scene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample_scene(spec, first_index + i));
    return out;
}

/// Image/GT crop with top-left corner (y0, x0).
inline std::pair<Tensor, Tensor> crop(const Scene& s, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    if (y0 + h > s.image.dim(1) || x0 + w > s.image.dim(2)) throw ShapeError("crop: window exceeds scene bounds");
    Tensor img = Tensor::chw(3, h, w), gt = Tensor::chw(1, h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = s.image.at(c, y0 + y, x0 + x);
            gt.at(0, y, x) = s.gt_binary.at(0, y0 + y, x0 + x);
        }
    return {std::move(img), std::move(gt)};
}

// ---------------------------------------------------------------------------
// Shift presets (version 1)

enum class ShiftPreset { scale_up, density_up, style_dark, resolution_down, mixed };

inline constexpr std::array<ShiftPreset, 5> all_presets{ShiftPreset::scale_up, ShiftPreset::density_up,
                                                        ShiftPreset::style_dark, ShiftPreset::resolution_down,
                                                        ShiftPreset::mixed};

inline std::string_view to_string(ShiftPreset p) {
    switch (p) {
        case ShiftPreset::scale_up: return "scale_up";
        case ShiftPreset::density_up: return "density_up";
        case ShiftPreset::style_dark: return "style_dark";
        case ShiftPreset::resolution_down: return "resolution_down";
        case ShiftPreset::mixed: return "mixed";
    }
    return "mixed";
}

inline ShiftPreset preset_from_string(std::string_view s) {
    for (auto p : all_presets)
        if (to_string(p) == s) return p;
    throw ConfigError("unknown shift preset '" + std::string(s) +
                      "' (expected scale_up, density_up, style_dark, resolution_down or mixed)");
}

inline constexpr int kPresetVersion = 1;

/// Source domain shared by every preset.
inline DomainSpec source_spec() {
    DomainSpec s;
    s.seed_stream = 1000;
    return s;
}

/// Fixed (source, target) pair; the target differs from the source only in
/// the named factor, except `mixed` which moves several at once.
inline std::pair<DomainSpec, DomainSpec> shift_preset(ShiftPreset preset) {
    const DomainSpec src = source_spec();
    DomainSpec tgt = src;
    tgt.seed_stream = 2000 + static_cast<std::uint64_t>(preset);
    switch (preset) {
        case ShiftPreset::scale_up:
            tgt.radius_min = 4;
            tgt.radius_max = 5;
            break;
        case ShiftPreset::density_up:
            tgt.count_min = 20;
            tgt.count_max = 28;
            break;
        case ShiftPreset::style_dark:
            tgt.brightness = 0.3;
            tgt.contrast = 0.65;
            break;
        case ShiftPreset::resolution_down:
            tgt.resolution_factor = 2;
            break;
        case ShiftPreset::mixed:
            tgt.radius_min = 3;
            tgt.radius_max = 4;
            tgt.count_min = 10;
            tgt.count_max = 18;
            tgt.brightness = 0.38;
            tgt.contrast = 0.8;
            tgt.noise_sigma = 0.04;
            tgt.texture = Texture::gradient;
            break;
    }
    return {src, tgt};
}

inline std::pair<DomainSpec, DomainSpec> shift_preset(std::string_view name) {
    return shift_preset(preset_from_string(name));
}

/// Domain halfway between two specs; discrete fields take the nearer side of
/// `a` when they cannot be averaged.
inline DomainSpec midpoint_spec(const DomainSpec& a, const DomainSpec& b) {
    DomainSpec m = a;
    auto mid = [](int x, int y) { return static_cast<int>(std::lround(0.5 * (x + y))); };
    m.count_min = mid(a.count_min, b.count_min);
    m.count_max = std::max(m.count_min, mid(a.count_max, b.count_max));
    m.radius_min = mid(a.radius_min, b.radius_min);
    m.radius_max = std::max(m.radius_min, mid(a.radius_max, b.radius_max));
    m.brightness = 0.5 * (a.brightness + b.brightness);
    m.contrast = 0.5 * (a.contrast + b.contrast);
    m.noise_sigma = 0.5 * (a.noise_sigma + b.noise_sigma);
    m.texture = a.texture;
    m.resolution_factor = a.resolution_factor;
    m.seed_stream = a.seed_stream ^ (b.seed_stream * 0x9e3779b97f4a7c15ull) ^ 0x5bd1e995ull;
    return m;
}

// ---------------------------------------------------------------------------
// Export

inline constexpr char kSceneMagic[8] = {'D', 'P', 'D', 'S', 'C', 'N', '0', '1'};

/// Flat binary: magic, u32 H, u32 W, u32 count, f64 image[3HW], f64 gt[HW],
/// then count x (i32 row, i32 col, i32 radius). Host byte order.
inline void write_scene(const std::string& path, const Scene& s) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const std::uint32_t h = static_cast<std::uint32_t>(s.image.dim(1)), w = static_cast<std::uint32_t>(s.image.dim(2));
    const std::uint32_t n = static_cast<std::uint32_t>(s.points.size());
    os.write(kSceneMagic, 8);
    os.write(reinterpret_cast<const char*>(&h), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(&n), 4);
    os.write(reinterpret_cast<const char*>(s.image.data().data()), static_cast<std::streamsize>(s.image.size() * 8));
    os.write(reinterpret_cast<const char*>(s.gt_binary.data().data()),
             static_cast<std::streamsize>(s.gt_binary.size() * 8));
    for (const auto& p : s.points) {
        const std::int32_t v[3] = {p.row, p.col, p.radius};
        os.write(reinterpret_cast<const char*>(v), sizeof v);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline Scene read_scene(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[8];
    std::uint32_t h = 0, w = 0, n = 0;
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kSceneMagic, 8) != 0) throw IoError(path + ": not a scene file");
    is.read(reinterpret_cast<char*>(&h), 4);
    is.read(reinterpret_cast<char*>(&w), 4);
    is.read(reinterpret_cast<char*>(&n), 4);
    Scene s;
    s.image = Tensor::chw(3, h, w);
    s.gt_binary = Tensor::chw(1, h, w);
    is.read(reinterpret_cast<char*>(s.image.data().data()), static_cast<std::streamsize>(s.image.size() * 8));
    is.read(reinterpret_cast<char*>(s.gt_binary.data().data()), static_cast<std::streamsize>(s.gt_binary.size() * 8));
    s.points.resize(n);
    for (auto& p : s.points) {
        std::int32_t v[3];
        is.read(reinterpret_cast<char*>(v), sizeof v);
        p = {v[0], v[1], v[2]};
    }
    if (!is) throw IoError(path + ": truncated scene file");
    return s;
}

/// Binary PPM (P6) of a [3,H,W] or PGM (P5) of a [1,H,W] tensor in [0,1].
inline void write_netpbm(const std::string& path, const Tensor& t) {
    const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    if (c != 1 && c != 3) throw ShapeError("write_netpbm: expected 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = std::clamp(t.at(ch, y, x), 0.0, 1.0);
                os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace dpd
