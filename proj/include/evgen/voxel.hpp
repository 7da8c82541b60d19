// Spatio-temporal voxel grids: construction from event slices, probability
// normalization/boosting, Bernoulli event sampling and the EVG1 file format.
//
// A grid has 2C channels of W x H values: channels 0..C-1 are the ON time
// bins in temporal order, channels C..2C-1 the OFF bins. Storage is
// (channel, y, x) row-major, matching the on-disk layout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/preprocess.hpp"
#include "evgen/rng.hpp"

namespace evgen {

struct Grid {
    std::uint32_t C = 1;  // time bins per polarity
    std::uint32_t W = 0;
    std::uint32_t H = 0;
    std::vector<float> data;  // 2C * H * W values, all nonnegative

    Grid() = default;
    Grid(std::uint32_t c, std::uint32_t w, std::uint32_t h)
        : C(c), W(w), H(h), data(std::size_t(2) * c * w * h, 0.0f) {}

    std::size_t channels() const { return std::size_t(2) * C; }
    std::size_t numel() const { return data.size(); }

    float& at(std::uint32_t channel, std::uint32_t x, std::uint32_t y) {
        return data[(std::size_t(channel) * H + y) * W + x];
    }
    float at(std::uint32_t channel, std::uint32_t x, std::uint32_t y) const {
        return data[(std::size_t(channel) * H + y) * W + x];
    }

    double sum() const {
        double s = 0;
        for (float v : data) s += v;
        return s;
    }
    double channel_sum(std::uint32_t channel) const {
        double s = 0;
        const std::size_t base = std::size_t(channel) * H * W;
        for (std::size_t i = 0; i < std::size_t(H) * W; ++i) s += data[base + i];
        return s;
    }
    float max_value() const {
        float m = 0;
        for (float v : data) m = std::max(m, v);
        return m;
    }
};

// VoxelGrid (counts) and ProbGrid ([0,1] probabilities) share the layout.
using VoxelGrid = Grid;
using ProbGrid = Grid;

// Event counts per (polarity, time bin, pixel). An event with normalized time
// u lands in bin min(floor(u*C), C-1); ON events use channels [0,C), OFF
// events [C,2C).
inline VoxelGrid voxelize(const EventSlice& slice, std::uint32_t C, std::uint32_t W,
                          std::uint32_t H) {
    if (C == 0 || W == 0 || H == 0) throw ValidationError("voxel grid dimensions must be positive");
    VoxelGrid g(C, W, H);
    for (std::size_t i = 0; i < slice.events.size(); ++i) {
        const Event& e = slice.events[i];
        if (e.x >= W || e.y >= H)
            throw ValidationError("event " + std::to_string(i) + " outside voxel geometry");
        std::uint32_t bin = std::min<std::uint32_t>(std::uint32_t(slice.normalized_t[i] * C), C - 1);
        std::uint32_t channel = e.p > 0 ? bin : C + bin;
        g.at(channel, e.x, e.y) += 1.0f;
    }
    return g;
}

// v -> min(v / cap, 1). With the default cap of 1 this binarizes occupancy.
inline ProbGrid to_prob(const VoxelGrid& g, double cap = 1.0) {
    if (cap <= 0) throw ValidationError("cap must be positive");
    ProbGrid p = g;
    for (float& v : p.data) v = float(std::min(double(v) / cap, 1.0));
    return p;
}

// v -> min(v * factor, 1), factor >= 1.
inline ProbGrid boost(const ProbGrid& p, double factor) {
    if (factor < 1.0) throw ValidationError("boost factor must be >= 1");
    ProbGrid out = p;
    for (float& v : out.data) v = float(std::min(double(v) * factor, 1.0));
    return out;
}

// Each voxel independently emits one event with its stored probability. The
// timestamp is uniform within the voxel's time-bin sub-interval of
// [t_start_us, t_end_us]. Counter-based seeding: the draw for a voxel depends
// only on (seed, voxel index).
inline EventSlice bernoulli_sample(const ProbGrid& p, std::int64_t t_start_us,
                                   std::int64_t t_end_us, std::uint64_t seed) {
    if (t_end_us <= t_start_us) throw ValidationError("t_end must be greater than t_start");
    std::vector<Event> events;
    const double bin_len = double(t_end_us - t_start_us) / double(p.C);
    std::size_t idx = 0;
    for (std::uint32_t channel = 0; channel < p.channels(); ++channel) {
        const std::uint32_t bin = channel % p.C;
        const std::int64_t bin_start = t_start_us + std::int64_t(bin * bin_len);
        for (std::uint32_t y = 0; y < p.H; ++y)
            for (std::uint32_t x = 0; x < p.W; ++x, ++idx) {
                const float prob = p.data[idx];
                if (prob <= 0.0f) continue;
                if (counter_uniform(seed, idx) < double(prob)) {
                    Event e;
                    e.x = std::uint16_t(x);
                    e.y = std::uint16_t(y);
                    e.p = channel < p.C ? 1 : -1;
                    e.t = bin_start + std::int64_t(counter_uniform(seed, idx, 1) * bin_len);
                    if (e.t > t_end_us) e.t = t_end_us;
                    events.push_back(e);
                }
            }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return detail::make_slice(events.data(), events.size());
}

// ---------------------------------------------------------------------------
// EVG1 grid file: magic "EVG1", C,W,H u32 LE, then 2C*W*H f32 LE values in
// (channel, y, x) row-major order.
// ---------------------------------------------------------------------------

inline void write_grid(const Grid& g, std::ostream& os) {
    detail::write_magic(os, "EVG1");
    detail::write_le<std::uint32_t>(os, g.C);
    detail::write_le<std::uint32_t>(os, g.W);
    detail::write_le<std::uint32_t>(os, g.H);
    for (float v : g.data) detail::write_f32le(os, v);
}

inline void write_grid(const Grid& g, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    write_grid(g, f);
    if (!f) throw IoError("write failed: " + path);
}

inline Grid read_grid(std::istream& is) {
    detail::expect_magic(is, "EVG1", "grid file");
    Grid g;
    g.C = detail::read_le<std::uint32_t>(is);
    g.W = detail::read_le<std::uint32_t>(is);
    g.H = detail::read_le<std::uint32_t>(is);
    if (g.C == 0 || g.W == 0 || g.H == 0) throw FormatError("grid file with empty dimensions");
    g.data.resize(std::size_t(2) * g.C * g.W * g.H);
    for (float& v : g.data) v = detail::read_f32le(is);
    return g;
}

inline Grid read_grid(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return read_grid(f);
}

}  // namespace evgen
