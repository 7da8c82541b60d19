// Image emission for inspection: "accumulate" sums ON events per pixel over
// the first N voxel grids into a grayscale PGM whose sample values equal the
// raw counts; "spacetime" plots events over a time axis (ON on a warm
// gradient, OFF on a cool one) with the per-step mean event position
// overplotted, as a color PPM.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/events.hpp"
#include "evgen/voxel.hpp"

namespace evgen {

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::uint32_t maxval = 255;
    std::vector<std::uint32_t> px;  // row-major, values in [0, maxval]

    std::uint32_t& at(std::size_t x, std::size_t y) { return px[y * width + x]; }
    std::uint32_t at(std::size_t x, std::size_t y) const { return px[y * width + x]; }
};

struct ColorImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        std::uint8_t* p = &rgb[(y * width + x) * 3];
        p[0] = r; p[1] = g; p[2] = b;
    }
};

// Binary PGM (P5); samples are 1 byte up to maxval 255, 2 bytes big-endian above.
inline void write_pgm(const GrayImage& img, const std::string& path) {
    if (img.width == 0 || img.height == 0) throw ValidationError("pgm: zero-area image");
    if (img.maxval == 0 || img.maxval > 65535) throw ValidationError("pgm: maxval must be in [1, 65535]");
    if (img.px.size() != img.width * img.height) throw ValidationError("pgm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n" << img.maxval << "\n";
    for (std::uint32_t v : img.px) {
        if (v > img.maxval) throw ValidationError("pgm: sample exceeds maxval");
        if (img.maxval > 255) out.put(char(v >> 8));
        out.put(char(v & 0xff));
    }
    if (!out) throw IoError("write failed: " + path);
}

// Binary PPM (P6), 8 bits per channel.
inline void write_ppm(const ColorImage& img, const std::string& path) {
    if (img.width == 0 || img.height == 0) throw ValidationError("ppm: zero-area image");
    if (img.rgb.size() != img.width * img.height * 3) throw ValidationError("ppm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
    if (!out) throw IoError("write failed: " + path);
}

// Per-pixel ON sums over the first max_grids grids (0 = all). Pixel values
// are the rounded sums themselves, clamped to the PGM ceiling of 65535, so
// count grids render to exact counts.
inline GrayImage render_accumulate(const std::vector<Grid>& grids, std::size_t max_grids = 100) {
    if (grids.empty()) throw ValidationError("render: no grids");
    const Grid& g0 = grids[0];
    GrayImage img;
    img.width = g0.W;
    img.height = g0.H;
    img.px.assign(img.width * img.height, 0);
    std::vector<double> sums(img.px.size(), 0.0);
    const std::size_t n = max_grids == 0 ? grids.size() : std::min(grids.size(), max_grids);
    for (std::size_t i = 0; i < n; ++i) {
        const Grid& g = grids[i];
        if (g.W != g0.W || g.H != g0.H || g.C != g0.C)
            throw ValidationError("render: grid shapes differ");
        for (std::uint32_t c = 0; c < g.C; ++c)  // ON channels only
            for (std::uint32_t y = 0; y < g.H; ++y)
                for (std::uint32_t x = 0; x < g.W; ++x)
                    sums[y * g.W + x] += double(g.at(c, x, y));
    }
    std::uint32_t peak = 1;
    for (std::size_t i = 0; i < sums.size(); ++i) {
        const double r = std::round(std::max(0.0, sums[i]));
        img.px[i] = std::uint32_t(std::min(r, 65535.0));
        peak = std::max(peak, img.px[i]);
    }
    img.maxval = peak;
    return img;
}

// Convenience: slice a stream by fixed count, voxelize and accumulate.
inline GrayImage render_accumulate_stream(const EventStream& s, std::size_t slice_events,
                                          std::uint32_t channels, std::size_t max_grids = 100) {
    if (s.width == 0 || s.height == 0) throw ValidationError("render: zero-area stream");
    if (s.events.empty()) {
        GrayImage img;
        img.width = s.width;
        img.height = s.height;
        img.maxval = 1;
        img.px.assign(img.width * img.height, 0);
        return img;  // blank; callers warn
    }
    std::vector<Grid> grids;
    for (const EventSlice& slice : slice_by_count(s, slice_events, true)) {
        if (grids.size() == max_grids && max_grids != 0) break;
        grids.push_back(voxelize(slice, channels, s.width, s.height));
    }
    return render_accumulate(grids, max_grids);
}

namespace detail {

// Warm gradient for ON (dark red -> yellow), cool for OFF (dark blue -> cyan);
// u is the normalized time of the event.
inline void polarity_color(std::int8_t p, double u, std::uint8_t rgb[3]) {
    const double v = std::clamp(u, 0.0, 1.0);
    if (p > 0) {
        rgb[0] = std::uint8_t(140 + 115 * v);
        rgb[1] = std::uint8_t(220 * v);
        rgb[2] = 0;
    } else {
        rgb[0] = 0;
        rgb[1] = std::uint8_t(220 * v);
        rgb[2] = std::uint8_t(140 + 115 * v);
    }
}

}  // namespace detail

// Space-time view: columns are time bins, rows are the y coordinate. Events
// overwrite in arrival order; the mean event y per time step is overplotted
// in white afterwards. Empty stream -> all-black image (callers warn).
inline ColorImage render_spacetime(const EventStream& s, std::size_t time_bins = 256) {
    if (s.width == 0 || s.height == 0) throw ValidationError("render: zero-area stream");
    if (time_bins == 0) throw ValidationError("render: time_bins must be >= 1");
    ColorImage img;
    img.width = time_bins;
    img.height = s.height;
    img.rgb.assign(img.width * img.height * 3, 0);
    if (s.events.empty()) return img;

    const std::int64_t t0 = s.events.front().t, t1 = s.events.back().t;
    const double span = double(t1 - t0);
    std::vector<double> y_sum(time_bins, 0.0);
    std::vector<std::size_t> y_n(time_bins, 0);
    for (const Event& e : s.events) {
        const double u = span > 0 ? double(e.t - t0) / span : 0.0;
        const std::size_t col = std::min(std::size_t(u * double(time_bins)), time_bins - 1);
        std::uint8_t rgb[3];
        detail::polarity_color(e.p, u, rgb);
        img.set(col, e.y, rgb[0], rgb[1], rgb[2]);
        y_sum[col] += double(e.y);
        ++y_n[col];
    }
    for (std::size_t col = 0; col < time_bins; ++col) {
        if (y_n[col] == 0) continue;
        const std::size_t my = std::min(
            std::size_t(std::llround(y_sum[col] / double(y_n[col]))), std::size_t(s.height - 1));
        img.set(col, my, 255, 255, 255);
    }
    return img;
}

}  // namespace evgen
