// Time-slice active-patch noise filtering and fixed-event-count slicing with
// per-slice timestamp normalization.
#pragma once

#include <cstdint>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/events.hpp"

namespace evgen {

struct FilterConfig {
    std::int64_t window_us = 20000;  // 20 ms
    std::uint32_t patch_px = 8;
    std::uint32_t threshold = 7;  // patches with fewer combined ON+OFF events are dropped

    void validate() const {
        if (window_us <= 0 || patch_px == 0 || threshold == 0)
            throw ValidationError("filter config fields must be strictly positive");
    }
};

// Windows are anchored at the first event's timestamp. Within each window a
// patch grid is overlaid; every event of a patch whose combined ON+OFF count
// is strictly below the threshold is removed. Surviving events keep their
// order and timestamps.
inline EventStream active_patch_filter(const EventStream& s, const FilterConfig& cfg) {
    cfg.validate();
    validate_stream(s);
    EventStream out;
    out.width = s.width;
    out.height = s.height;
    out.label = s.label;
    if (s.events.empty()) return out;

    const std::uint32_t pw = (s.width + cfg.patch_px - 1) / cfg.patch_px;
    const std::uint32_t ph = (s.height + cfg.patch_px - 1) / cfg.patch_px;
    const std::int64_t t0 = s.events.front().t;

    std::vector<std::uint32_t> counts(std::size_t(pw) * ph);
    std::size_t begin = 0;
    while (begin < s.events.size()) {
        const std::int64_t win = (s.events[begin].t - t0) / cfg.window_us;
        std::size_t end = begin;
        while (end < s.events.size() && (s.events[end].t - t0) / cfg.window_us == win) ++end;

        std::fill(counts.begin(), counts.end(), 0u);
        for (std::size_t i = begin; i < end; ++i) {
            const Event& e = s.events[i];
            ++counts[std::size_t(e.y / cfg.patch_px) * pw + e.x / cfg.patch_px];
        }
        for (std::size_t i = begin; i < end; ++i) {
            const Event& e = s.events[i];
            if (counts[std::size_t(e.y / cfg.patch_px) * pw + e.x / cfg.patch_px] >= cfg.threshold)
                out.events.push_back(e);
        }
        begin = end;
    }
    return out;
}

struct EventSlice {
    std::vector<Event> events;
    std::int64_t t_start = 0;
    std::int64_t t_end = 0;
    std::vector<double> normalized_t;  // first event 0, last event 1
};

namespace detail {

inline EventSlice make_slice(const Event* first, std::size_t n) {
    EventSlice sl;
    sl.events.assign(first, first + n);
    sl.normalized_t.resize(n);
    if (n == 0) return sl;
    sl.t_start = sl.events.front().t;
    sl.t_end = sl.events.back().t;
    const double span = double(sl.t_end - sl.t_start);
    for (std::size_t i = 0; i < n; ++i)
        // single-timestamp slices normalize to 0 for every event
        sl.normalized_t[i] = span > 0 ? double(sl.events[i].t - sl.t_start) / span : 0.0;
    return sl;
}

}  // namespace detail

// Consecutive non-overlapping slices of exactly n events in stream order; the
// trailing remainder is dropped unless keep_remainder.
inline std::vector<EventSlice> slice_by_count(const EventStream& s, std::size_t n,
                                              bool keep_remainder = false) {
    if (n == 0) throw ValidationError("slice size must be >= 1");
    std::vector<EventSlice> out;
    std::size_t i = 0;
    while (i + n <= s.events.size()) {
        out.push_back(detail::make_slice(s.events.data() + i, n));
        i += n;
    }
    if (keep_remainder && i < s.events.size())
        out.push_back(detail::make_slice(s.events.data() + i, s.events.size() - i));
    return out;
}

// Map a stream onto a coarser geometry (floor scaling of coordinates).
inline EventStream rescale_stream(const EventStream& s, std::uint16_t new_w, std::uint16_t new_h) {
    if (new_w == 0 || new_h == 0) throw ValidationError("zero-area geometry");
    EventStream out;
    out.width = new_w;
    out.height = new_h;
    out.label = s.label;
    out.events = s.events;
    for (Event& e : out.events) {
        e.x = std::uint16_t(std::uint32_t(e.x) * new_w / s.width);
        e.y = std::uint16_t(std::uint32_t(e.y) * new_h / s.height);
    }
    return out;
}

}  // namespace evgen
