#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "xdelta/dataset.hpp"
#include "xdelta/rng.hpp"

namespace xdelta {

// Procedural 32x32 scene dataset with ten shape classes. Several class pairs
// differ only in small parts (mug/bucket by the handle, cat/dog by the ears),
// so narrow networks systematically miss them — which is exactly the regime
// the analysis stages are built to explain. Every image carries part-level
// segment annotations and a target bounding box.
struct SyntheticConfig {
    long count = 1000;
    std::uint64_t seed = 1;
    double pixel_noise = 0.06;    // gaussian sigma in [0,1] units
    long max_distractors = 3;
    double color_jitter = 0.25;
    DatasetNorm norm;
};

namespace synth_detail {

struct Canvas {
    long h, w;
    std::vector<float> rgb;                 // 3*h*w, [0,1] planar
    std::vector<std::uint8_t> part_scratch;  // h*w, pixels painted by current part

    Canvas(long h_, long w_) : h(h_), w(w_), rgb(static_cast<std::size_t>(3 * h_ * w_), 0.0f),
                               part_scratch(static_cast<std::size_t>(h_ * w_), 0) {}

    void put(long x, long y, const std::array<float, 3>& c) {
        if (x < 0 || x >= w || y < 0 || y >= h) return;
        for (long ch = 0; ch < 3; ++ch)
            rgb[static_cast<std::size_t>((ch * h + y) * w + x)] = c[static_cast<std::size_t>(ch)];
        part_scratch[static_cast<std::size_t>(y * w + x)] = 1;
    }

    void begin_part() { std::fill(part_scratch.begin(), part_scratch.end(), 0); }
};

inline void fill_rect(Canvas& cv, double x0, double y0, double x1, double y1,
                      const std::array<float, 3>& c) {
    for (long y = static_cast<long>(std::floor(y0)); y <= static_cast<long>(std::ceil(y1)); ++y)
        for (long x = static_cast<long>(std::floor(x0)); x <= static_cast<long>(std::ceil(x1)); ++x)
            if (x + 0.5 >= x0 && x + 0.5 <= x1 && y + 0.5 >= y0 && y + 0.5 <= y1) cv.put(x, y, c);
}

inline void fill_ellipse(Canvas& cv, double cx, double cy, double rx, double ry,
                         const std::array<float, 3>& c) {
    for (long y = static_cast<long>(cy - ry) - 1; y <= static_cast<long>(cy + ry) + 1; ++y)
        for (long x = static_cast<long>(cx - rx) - 1; x <= static_cast<long>(cx + rx) + 1; ++x) {
            double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) cv.put(x, y, c);
        }
}

inline void fill_triangle(Canvas& cv, double ax, double ay, double bx, double by, double px,
                          double py, const std::array<float, 3>& c) {
    double minx = std::min({ax, bx, px}), maxx = std::max({ax, bx, px});
    double miny = std::min({ay, by, py}), maxy = std::max({ay, by, py});
    auto edge = [](double x0, double y0, double x1, double y1, double x, double y) {
        return (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
    };
    for (long y = static_cast<long>(miny) - 1; y <= static_cast<long>(maxy) + 1; ++y)
        for (long x = static_cast<long>(minx) - 1; x <= static_cast<long>(maxx) + 1; ++x) {
            double cx = x + 0.5, cy = y + 0.5;
            double e0 = edge(ax, ay, bx, by, cx, cy);
            double e1 = edge(bx, by, px, py, cx, cy);
            double e2 = edge(px, py, ax, ay, cx, cy);
            if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) cv.put(x, y, c);
        }
}

inline std::array<float, 3> random_color(Rng& rng, float lo = 0.1f, float hi = 0.95f) {
    return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
            static_cast<float>(rng.uniform(lo, hi))};
}

inline std::array<float, 3> shade(const std::array<float, 3>& c, float f) {
    return {std::clamp(c[0] * f, 0.0f, 1.0f), std::clamp(c[1] * f, 0.0f, 1.0f),
            std::clamp(c[2] * f, 0.0f, 1.0f)};
}

}  // namespace synth_detail

inline const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> names = {"bucket", "car",  "cat",  "dog",   "house",
                                                   "mug",    "plane", "ship", "tree", "truck"};
    return names;
}

// Generates one scene; appends segment annotations for each painted part.
inline void render_scene(synth_detail::Canvas& cv, long cls, Rng& rng,
                         std::vector<SegmentAnnotation>& segs, Box& box,
                         const SyntheticConfig& cfg) {
    using namespace synth_detail;
    const double W = static_cast<double>(cv.w), H = static_cast<double>(cv.h);

    // background wash + blotches
    std::array<float, 3> bg = random_color(rng, 0.05f, 0.9f);
    fill_rect(cv, 0, 0, W, H, bg);
    long blobs = rng.uniform_int(1, 3);
    for (long b = 0; b < blobs; ++b)
        fill_ellipse(cv, rng.uniform(0, W), rng.uniform(0, H), rng.uniform(3, 10), rng.uniform(3, 10),
                     shade(bg, static_cast<float>(rng.uniform(0.7, 1.3))));

    // distractor shapes behind the target
    long nd = rng.uniform_int(0, cfg.max_distractors);
    for (long d = 0; d < nd; ++d) {
        auto c = random_color(rng);
        double x = rng.uniform(2, W - 2), y = rng.uniform(2, H - 2);
        switch (rng.uniform_int(0, 2)) {
            case 0: fill_rect(cv, x - 3, y - 2, x + 3, y + 2, c); break;
            case 1: fill_ellipse(cv, x, y, rng.uniform(2, 4), rng.uniform(2, 4), c); break;
            default: fill_triangle(cv, x - 3, y + 3, x + 3, y + 3, x, y - 3, c); break;
        }
    }

    double s = rng.uniform(0.75, 1.15);                       // target scale
    double ox = rng.uniform(-4.0, 4.0), oy = rng.uniform(-3.0, 3.0);  // target offset
    auto X = [&](double u) { return W / 2 + (u)*s + ox; };
    auto Y = [&](double v) { return H / 2 + (v)*s + oy; };

    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> parts;
    auto part = [&](const std::string& label, auto&& paint) {
        cv.begin_part();
        paint();
        parts.emplace_back(label, cv.part_scratch);
    };

    auto body_color = random_color(rng);
    auto accent = random_color(rng);
    auto dark = shade(body_color, 0.35f);

    const std::string& name = synthetic_class_names()[static_cast<std::size_t>(cls)];
    if (name == "mug") {
        part("body", [&] { fill_rect(cv, X(-6), Y(-5), X(5), Y(6), body_color); });
        part("rim", [&] { fill_rect(cv, X(-6), Y(-6), X(5), Y(-4.4), shade(body_color, 1.5f)); });
        part("handle", [&] {
            fill_rect(cv, X(5), Y(-3), X(8.5), Y(2.5), accent);
            fill_rect(cv, X(5), Y(-1.4), X(7), Y(1), bg);  // hole
        });
    } else if (name == "bucket") {
        part("body", [&] {
            fill_triangle(cv, X(-7), Y(-5), X(7), Y(-5), X(0), Y(14), body_color);
            fill_rect(cv, X(-4.2), Y(3), X(4.2), Y(6.5), body_color);
        });
        part("rim", [&] { fill_rect(cv, X(-7), Y(-6), X(7), Y(-4.4), shade(body_color, 1.5f)); });
    } else if (name == "cat") {
        part("body", [&] { fill_ellipse(cv, X(0), Y(3), 6.5 * s, 4.5 * s, body_color); });
        part("head", [&] { fill_ellipse(cv, X(4), Y(-4), 3.8 * s, 3.4 * s, shade(body_color, 1.15f)); });
        part("ear", [&] {  // upright triangular ears
            fill_triangle(cv, X(1.4), Y(-6), X(3.4), Y(-5.6), X(1.8), Y(-10.5), accent);
            fill_triangle(cv, X(4.6), Y(-6.4), X(6.6), Y(-6), X(6.4), Y(-10.8), accent);
        });
        part("eye", [&] { fill_ellipse(cv, X(5), Y(-4.5), 0.9, 0.9, dark); });
    } else if (name == "dog") {
        part("body", [&] { fill_ellipse(cv, X(0), Y(3), 6.5 * s, 4.5 * s, body_color); });
        part("head", [&] { fill_ellipse(cv, X(4), Y(-4), 3.8 * s, 3.4 * s, shade(body_color, 1.15f)); });
        part("ear", [&] {  // floppy ears hanging beside the head
            fill_rect(cv, X(0.6), Y(-6), X(2.2), Y(-0.5), accent);
            fill_rect(cv, X(6.2), Y(-6), X(7.8), Y(-0.5), accent);
        });
        part("eye", [&] { fill_ellipse(cv, X(5), Y(-4.5), 0.9, 0.9, dark); });
    } else if (name == "car") {
        part("body", [&] { fill_rect(cv, X(-8), Y(0), X(8), Y(4.5), body_color); });
        part("cabin", [&] { fill_rect(cv, X(-3.5), Y(-4), X(3.5), Y(0), shade(body_color, 1.2f)); });
        part("window", [&] { fill_rect(cv, X(-2.3), Y(-3), X(2.3), Y(-0.7), accent); });
        part("wheel", [&] {
            fill_ellipse(cv, X(-5), Y(5), 2.2 * s, 2.2 * s, dark);
            fill_ellipse(cv, X(5), Y(5), 2.2 * s, 2.2 * s, dark);
        });
    } else if (name == "truck") {
        part("body", [&] { fill_rect(cv, X(-9), Y(-3.5), X(3), Y(4.5), body_color); });
        part("cab", [&] { fill_rect(cv, X(3.5), Y(-1), X(9), Y(4.5), accent); });
        part("wheel", [&] {
            fill_ellipse(cv, X(-6), Y(5.5), 2.0 * s, 2.0 * s, dark);
            fill_ellipse(cv, X(-1), Y(5.5), 2.0 * s, 2.0 * s, dark);
            fill_ellipse(cv, X(6), Y(5.5), 2.0 * s, 2.0 * s, dark);
        });
    } else if (name == "ship") {
        part("sea", [&] { fill_rect(cv, 0, Y(6), W, H, accent); });
        part("hull", [&] { fill_triangle(cv, X(-9), Y(2), X(9), Y(2), X(0), Y(9.5), body_color); });
        part("mast", [&] { fill_rect(cv, X(-0.8), Y(-9), X(0.8), Y(2), dark); });
        part("sail", [&] { fill_triangle(cv, X(1), Y(-8.5), X(7), Y(0), X(1), Y(0), shade(accent, 1.4f)); });
    } else if (name == "plane") {
        part("fuselage", [&] { fill_ellipse(cv, X(0), Y(0), 8.5 * s, 2.2 * s, body_color); });
        part("wing", [&] {
            fill_triangle(cv, X(-1), Y(-1), X(3), Y(-1), X(-3), Y(-8), accent);
            fill_triangle(cv, X(-1), Y(1), X(3), Y(1), X(-3), Y(8), accent);
        });
        part("tail", [&] { fill_triangle(cv, X(-8.5), Y(-1), X(-5.5), Y(-1), X(-8), Y(-5.5), accent); });
    } else if (name == "tree") {
        part("trunk", [&] { fill_rect(cv, X(-1.2), Y(1), X(1.2), Y(9), dark); });
        part("canopy", [&] {
            fill_ellipse(cv, X(0), Y(-4), 6 * s, 5 * s, body_color);
            fill_ellipse(cv, X(-3.5), Y(-1), 3.5 * s, 3 * s, shade(body_color, 0.9f));
            fill_ellipse(cv, X(3.5), Y(-1), 3.5 * s, 3 * s, shade(body_color, 1.1f));
        });
    } else {  // house
        part("wall", [&] { fill_rect(cv, X(-6.5), Y(-1), X(6.5), Y(8), body_color); });
        part("roof", [&] { fill_triangle(cv, X(-8), Y(-1), X(8), Y(-1), X(0), Y(-8.5), accent); });
        part("door", [&] { fill_rect(cv, X(-1.5), Y(3), X(1.5), Y(8), dark); });
    }

    // target box = bounding box over all part pixels; segments keep only
    // pixels still visible (later parts may overpaint earlier ones).
    long minx = cv.w, miny = cv.h, maxx = -1, maxy = -1;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto visible = parts[p].second;
        for (std::size_t q = p + 1; q < parts.size(); ++q)
            for (std::size_t i = 0; i < visible.size(); ++i)
                if (parts[q].second[i]) visible[i] = 0;
        for (long y = 0; y < cv.h; ++y)
            for (long x = 0; x < cv.w; ++x)
                if (parts[p].second[static_cast<std::size_t>(y * cv.w + x)]) {
                    minx = std::min(minx, x);
                    maxx = std::max(maxx, x);
                    miny = std::min(miny, y);
                    maxy = std::max(maxy, y);
                }
        bool any = false;
        for (auto v : visible)
            if (v) { any = true; break; }
        if (any) segs.push_back({parts[p].first, std::move(visible)});
    }
    if (maxx >= minx) box = Box{minx, miny, maxx - minx + 1, maxy - miny + 1};

    // global photometric jitter + pixel noise
    float gain = static_cast<float>(rng.uniform(1.0 - cfg.color_jitter, 1.0 + cfg.color_jitter));
    for (auto& v : cv.rgb)
        v = std::clamp(v * gain + static_cast<float>(rng.normal(0.0, cfg.pixel_noise)), 0.0f, 1.0f);
}

inline LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
    LabeledDataset data;
    data.height = 32;
    data.width = 32;
    data.channels = 3;
    data.norm = cfg.norm;
    data.class_names = synthetic_class_names();
    Rng rng(cfg.seed);
    for (long i = 0; i < cfg.count; ++i) {
        long cls = static_cast<long>(i % 10);
        synth_detail::Canvas cv(32, 32);
        std::vector<SegmentAnnotation> segs;
        Box box;
        render_scene(cv, cls, rng, segs, box, cfg);
        Tensor img({3, 32, 32});
        for (long k = 0; k < img.size(); ++k)
            img[static_cast<std::size_t>(k)] =
                (cv.rgb[static_cast<std::size_t>(k)] - cfg.norm.mean) / cfg.norm.stddev;
        data.images.push_back(std::move(img));
        data.labels.push_back(cls);
        data.ids.push_back(data.class_names[static_cast<std::size_t>(cls)] + "/gen" +
                           std::to_string(i) + ".ppm");
        data.segments.push_back(std::move(segs));
        data.boxes.push_back(box);
    }
    data.validate();
    return data;
}

}  // namespace xdelta
