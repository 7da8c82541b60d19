// Event-stream data model, the EVS1/CSV file formats and a synthetic labelled
// gesture generator used as a desk-scale stand-in for recorded DVS data.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/rng.hpp"

namespace evgen {

struct Event {
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int64_t t = 0;  // microseconds
    std::int8_t p = 1;   // +1 or -1

    friend bool operator==(const Event&, const Event&) = default;
};

struct EventStream {
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    std::int32_t label = -1;  // -1 = unlabeled
    std::vector<Event> events;

    bool sorted() const {
        for (std::size_t i = 1; i < events.size(); ++i)
            if (events[i].t < events[i - 1].t) return false;
        return true;
    }
};

// Throws ValidationError naming the first offending record.
inline void validate_stream(const EventStream& s) {
    if (s.width == 0 || s.height == 0) throw ValidationError("stream has zero-area geometry");
    for (std::size_t i = 0; i < s.events.size(); ++i) {
        const Event& e = s.events[i];
        if (e.x >= s.width || e.y >= s.height)
            throw ValidationError("event " + std::to_string(i) + " at (" + std::to_string(e.x) +
                                  "," + std::to_string(e.y) + ") outside " +
                                  std::to_string(s.width) + "x" + std::to_string(s.height));
        if (e.p != 1 && e.p != -1)
            throw ValidationError("event " + std::to_string(i) + " has polarity " +
                                  std::to_string(int(e.p)));
        if (e.t < 0) throw ValidationError("event " + std::to_string(i) + " has negative timestamp");
    }
}

enum class EventFormat { binary, csv };

// ---------------------------------------------------------------------------
// EVS1 binary layout: magic "EVS1", width u16 LE, height u16 LE,
// count u64 LE, label i32 LE (-1 = unlabeled), then per event
// {x u16, y u16, t i64, p i8}, 13 bytes each.
// ---------------------------------------------------------------------------

inline void write_events(const EventStream& s, std::ostream& os, EventFormat fmt) {
    validate_stream(s);
    if (fmt == EventFormat::binary) {
        detail::write_magic(os, "EVS1");
        detail::write_le<std::uint16_t>(os, s.width);
        detail::write_le<std::uint16_t>(os, s.height);
        detail::write_le<std::uint64_t>(os, s.events.size());
        detail::write_le<std::int32_t>(os, s.label);
        for (const Event& e : s.events) {
            detail::write_le<std::uint16_t>(os, e.x);
            detail::write_le<std::uint16_t>(os, e.y);
            detail::write_le<std::int64_t>(os, e.t);
            detail::write_le<std::int8_t>(os, e.p);
        }
    } else {
        os << "x,y,t,p\n";
        for (const Event& e : s.events)
            os << e.x << ',' << e.y << ',' << e.t << ',' << int(e.p) << '\n';
        if (!os) throw IoError("write failed");
    }
}

inline void write_events(const EventStream& s, const std::string& path, EventFormat fmt) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    write_events(s, f, fmt);
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

inline EventStream read_events_binary(std::istream& is) {
    EventStream s;
    detail::expect_magic(is, "EVS1", "event file");
    s.width = detail::read_le<std::uint16_t>(is);
    s.height = detail::read_le<std::uint16_t>(is);
    std::uint64_t count = detail::read_le<std::uint64_t>(is);
    s.label = detail::read_le<std::int32_t>(is);
    s.events.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Event& e = s.events[i];
        try {
            e.x = detail::read_le<std::uint16_t>(is);
            e.y = detail::read_le<std::uint16_t>(is);
            e.t = detail::read_le<std::int64_t>(is);
            e.p = detail::read_le<std::int8_t>(is);
        } catch (const FormatError&) {
            throw FormatError("truncated event record " + std::to_string(i));
        }
    }
    return s;
}

inline EventStream read_events_csv(std::istream& is, std::uint16_t width, std::uint16_t height) {
    EventStream s;
    s.width = width;
    s.height = height;
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty csv file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "x,y,t,p") throw FormatError("csv header must be 'x,y,t,p', got '" + line + "'");
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        long long vx, vy, vt, vp;
        char c1, c2, c3;
        std::istringstream ss(line);
        if (!(ss >> vx >> c1 >> vy >> c2 >> vt >> c3 >> vp) || c1 != ',' || c2 != ',' || c3 != ',')
            throw FormatError("malformed csv row " + std::to_string(row));
        Event e;
        e.x = static_cast<std::uint16_t>(vx);
        e.y = static_cast<std::uint16_t>(vy);
        e.t = vt;
        e.p = static_cast<std::int8_t>(vp);
        // width/height of 0 mean "derive from the data" (checked by the caller)
        if (vx < 0 || vy < 0 || (width != 0 && vx >= width) || (height != 0 && vy >= height))
            throw ValidationError("csv row " + std::to_string(row) + " outside geometry");
        s.events.push_back(e);
        ++row;
    }
    return s;
}

// CSV carries no geometry; callers pass it (defaults accommodate any coords).
inline EventStream read_events(const std::string& path, EventFormat fmt,
                               std::uint16_t csv_width = 0, std::uint16_t csv_height = 0) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    EventStream s;
    if (fmt == EventFormat::binary) {
        s = read_events_binary(f);
    } else {
        s = read_events_csv(f, csv_width, csv_height);
        if (csv_width == 0 || csv_height == 0) {
            // derive a bounding geometry when none was given
            std::uint16_t w = 1, h = 1;
            for (const Event& e : s.events) {
                w = std::max<std::uint16_t>(w, static_cast<std::uint16_t>(e.x + 1));
                h = std::max<std::uint16_t>(h, static_cast<std::uint16_t>(e.y + 1));
            }
            if (csv_width == 0) s.width = w;
            if (csv_height == 0) s.height = h;
        }
    }
    if (!s.sorted()) {
        std::cerr << "warning: " << path << " is not sorted by timestamp, re-sorting\n";
        std::stable_sort(s.events.begin(), s.events.end(),
                         [](const Event& a, const Event& b) { return a.t < b.t; });
    }
    validate_stream(s);
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic gestures: a bright disk on a dark background follows a parametric
// trajectory; pixels the disk newly covers emit ON events, pixels it uncovers
// emit OFF events, plus uniform background noise.
// ---------------------------------------------------------------------------

struct Motion {
    enum class Kind { rotation, translation };
    Kind kind = Kind::rotation;
    // all spatial quantities are fractions of the sensor size
    double center_x = 0.5, center_y = 0.5;  // rotation: orbit center
    double orbit_radius = 0.3;              // rotation: orbit radius
    double rev_per_sec = 1.0;               // rotation: signed (+ = clockwise on screen)
    double vel_x = 0.0, vel_y = 0.0;        // translation: sensor widths/heights per second
    double shape_radius = 0.09;             // disk radius
};

struct GestureClass {
    std::int32_t id = 0;
    std::string name;
    Motion motion;
};

// The four built-in classes. Clockwise/counter-clockwise differ only in the
// sign of the angular velocity.
inline std::vector<GestureClass> builtin_gesture_classes() {
    std::vector<GestureClass> v;
    GestureClass cw{0, "cw", {}};
    cw.motion.kind = Motion::Kind::rotation;
    cw.motion.rev_per_sec = 1.0;
    GestureClass ccw{1, "ccw", {}};
    ccw.motion = cw.motion;
    ccw.motion.rev_per_sec = -1.0;
    GestureClass right{2, "right", {}};
    right.motion.kind = Motion::Kind::translation;
    right.motion.vel_x = 0.8;
    right.motion.vel_y = 0.0;
    GestureClass left{3, "left", {}};
    left.motion = right.motion;
    left.motion.vel_x = -0.8;
    v.push_back(cw);
    v.push_back(ccw);
    v.push_back(right);
    v.push_back(left);
    return v;
}

namespace detail {

struct DiskPos {
    double x, y;
};

inline DiskPos motion_position(const Motion& m, double frac_of_duration, double phase,
                               std::uint16_t w, std::uint16_t h, double duration_s) {
    double scale = std::min(w, h);
    if (m.kind == Motion::Kind::rotation) {
        double angle = 6.283185307179586 * (phase + m.rev_per_sec * frac_of_duration * duration_s);
        return {m.center_x * w + m.orbit_radius * scale * std::cos(angle),
                m.center_y * h + m.orbit_radius * scale * std::sin(angle)};
    }
    // translation: wrap around so the disk stays in frame on long runs
    double px = (phase + m.vel_x * frac_of_duration * duration_s);
    double py = (0.5 + m.vel_y * frac_of_duration * duration_s);
    px -= std::floor(px);
    py -= std::floor(py);
    return {px * w, py * h};
}

inline std::vector<std::uint32_t> disk_pixels(DiskPos c, double r, std::uint16_t w,
                                              std::uint16_t h) {
    std::vector<std::uint32_t> out;
    int x0 = std::max(0, int(std::floor(c.x - r)));
    int x1 = std::min(int(w) - 1, int(std::ceil(c.x + r)));
    int y0 = std::max(0, int(std::floor(c.y - r)));
    int y1 = std::min(int(h) - 1, int(std::ceil(c.y + r)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
            if (dx * dx + dy * dy <= r * r) out.push_back(std::uint32_t(y) << 16 | std::uint32_t(x));
        }
    return out;  // already sorted by (y,x)
}

}  // namespace detail

inline EventStream synth_gesture(const GestureClass& cls, std::int64_t duration_us,
                                 std::uint16_t width, std::uint16_t height, double events_per_us,
                                 double noise_rate, std::uint64_t seed) {
    if (width == 0 || height == 0) throw ValidationError("zero-area geometry");
    if (duration_us <= 0) throw ValidationError("duration must be positive");
    if (events_per_us < 0 || noise_rate < 0) throw ValidationError("rates must be nonnegative");

    EventStream s;
    s.width = width;
    s.height = height;
    s.label = cls.id;

    const Motion& m = cls.motion;
    double scale = std::min(width, height);
    double dur_s = double(duration_us) * 1e-6;
    double path_px = m.kind == Motion::Kind::rotation
                         ? std::abs(m.rev_per_sec) * dur_s * 6.283185307179586 * m.orbit_radius * scale
                         : std::hypot(m.vel_x * width, m.vel_y * height) * dur_s;
    std::size_t steps = std::size_t(std::clamp(path_px * 2.0, 32.0, 4096.0));
    double phase = counter_uniform(seed, 0xfa5e);  // per-sample starting phase

    double r_px = m.shape_radius * scale;
    auto prev = detail::disk_pixels(detail::motion_position(m, 0.0, phase, width, height, dur_s),
                                    r_px, width, height);
    double step_us = double(duration_us) / double(steps);

    for (std::size_t k = 1; k <= steps; ++k) {
        double frac = double(k) / double(steps);
        auto cur = detail::disk_pixels(detail::motion_position(m, frac, phase, width, height, dur_s),
                                       r_px, width, height);
        std::vector<std::uint32_t> on, off;
        std::set_difference(cur.begin(), cur.end(), prev.begin(), prev.end(),
                            std::back_inserter(on));
        std::set_difference(prev.begin(), prev.end(), cur.begin(), cur.end(),
                            std::back_inserter(off));
        prev = std::move(cur);

        std::int64_t t0 = std::int64_t((k - 1) * step_us);
        std::int64_t t1 = std::max<std::int64_t>(t0 + 1, std::int64_t(k * step_us));
        if (t1 > duration_us) t1 = duration_us;

        // signal events on the moving edges
        std::size_t cands = on.size() + off.size();
        if (cands > 0 && events_per_us > 0) {
            std::uint64_t n = poisson_icdf(events_per_us * step_us, counter_uniform(seed, 1, k));
            for (std::uint64_t j = 0; j < n; ++j) {
                std::size_t pick =
                    std::size_t(counter_uniform(seed, 2, k, j) * double(cands)) % cands;
                std::uint32_t px = pick < on.size() ? on[pick] : off[pick - on.size()];
                Event e;
                e.x = std::uint16_t(px & 0xffff);
                e.y = std::uint16_t(px >> 16);
                e.p = pick < on.size() ? 1 : -1;
                e.t = t0 + std::int64_t(counter_uniform(seed, 3, k, j) * double(t1 - t0));
                s.events.push_back(e);
            }
        }
        // uniform background noise
        if (noise_rate > 0) {
            std::uint64_t n = poisson_icdf(noise_rate * step_us, counter_uniform(seed, 4, k));
            for (std::uint64_t j = 0; j < n; ++j) {
                Event e;
                e.x = std::uint16_t(counter_uniform(seed, 5, k, j) * width) % width;
                e.y = std::uint16_t(counter_uniform(seed, 6, k, j) * height) % height;
                e.p = counter_uniform(seed, 7, k, j) < 0.5 ? 1 : -1;
                e.t = t0 + std::int64_t(counter_uniform(seed, 8, k, j) * double(t1 - t0));
                s.events.push_back(e);
            }
        }
    }

    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return s;
}

}  // namespace evgen
