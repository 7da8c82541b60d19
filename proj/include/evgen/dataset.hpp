// Dataset plumbing shared by the training commands and the evaluation
// harness: synthetic gesture datasets, the stream -> prob-grid slice
// pipeline (filter, rescale, slice, voxelize, normalize) and the
// stream -> stacked-latent pipeline feeding the diffusion model.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evgen/autoencoder.hpp"
#include "evgen/common.hpp"
#include "evgen/events.hpp"
#include "evgen/preprocess.hpp"
#include "evgen/rng.hpp"
#include "evgen/tensor.hpp"
#include "evgen/voxel.hpp"

namespace evgen {

// Grids and rank-3 tensors share the [channel, y, x] layout.
inline nn::Tensor grid_to_tensor(const Grid& g) {
    nn::Tensor t({g.channels(), g.H, g.W});
    for (std::size_t i = 0; i < g.data.size(); ++i) t.v[i] = double(g.data[i]);
    return t;
}

inline Grid tensor_to_grid(const nn::Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] % 2 != 0)
        throw ValidationError("tensor_to_grid: expected [2C, H, W]");
    Grid g(std::uint32_t(t.shape[0] / 2), std::uint32_t(t.shape[2]), std::uint32_t(t.shape[1]));
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = float(t.v[i]);
    return g;
}

// ---------------------------------------------------------------------------
// Synthetic labeled gesture datasets
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::vector<GestureClass> classes;  // label = class id
    std::size_t samples_per_class = 24;
    std::int64_t duration_us = 400000;
    std::uint16_t width = 32, height = 32;
    double events_per_us = 0.03;
    double noise_rate = 0.002;

    void validate() const {
        if (classes.empty()) throw ValidationError("synth: need at least one class");
        if (samples_per_class == 0) throw ValidationError("synth: samples_per_class must be >= 1");
        if (duration_us <= 0) throw ValidationError("synth: duration must be positive");
        if (width == 0 || height == 0) throw ValidationError("synth: zero-area geometry");
        if (events_per_us < 0 || noise_rate < 0) throw ValidationError("synth: rates must be >= 0");
    }
};

inline std::vector<EventStream> synth_dataset(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::vector<EventStream> out;
    out.reserve(cfg.classes.size() * cfg.samples_per_class);
    for (const GestureClass& cls : cfg.classes)
        for (std::size_t i = 0; i < cfg.samples_per_class; ++i)
            out.push_back(synth_gesture(cls, cfg.duration_us, cfg.width, cfg.height,
                                        cfg.events_per_us, cfg.noise_rate,
                                        hash_counters(seed, 0xda7aULL, std::uint64_t(cls.id), i)));
    return out;
}

// ---------------------------------------------------------------------------
// Stream -> slice grids
// ---------------------------------------------------------------------------

struct PreprocessParams {
    FilterConfig filter{};     // paper-default active-patch filtering
    std::size_t channels = 1;  // C: time bins per polarity
    double prob_cap = 1.0;     // to_prob cap

    void validate() const {
        filter.validate();
        if (channels == 0) throw ValidationError("preprocess: channels must be >= 1");
        if (!(prob_cap > 0)) throw ValidationError("preprocess: prob_cap must be > 0");
    }
};

// One prob-grid tensor [2C, res, res] per fixed-count slice of the filtered,
// rescaled stream. Returns an empty vector if nothing survives filtering.
inline std::vector<nn::Tensor> stream_to_grids(const EventStream& s, const PreprocessParams& pp,
                                               std::size_t resolution, std::size_t slice_events,
                                               bool keep_remainder = false) {
    pp.validate();
    if (resolution == 0) throw ValidationError("stream_to_grids: resolution must be >= 1");
    if (slice_events == 0) throw ValidationError("stream_to_grids: slice_events must be >= 1");
    EventStream filtered = active_patch_filter(s, pp.filter);
    if (filtered.events.empty()) return {};
    EventStream scaled = rescale_stream(filtered, std::uint16_t(resolution), std::uint16_t(resolution));
    std::vector<nn::Tensor> out;
    for (const EventSlice& slice : slice_by_count(scaled, slice_events, keep_remainder)) {
        VoxelGrid counts = voxelize(slice, std::uint32_t(pp.channels), std::uint32_t(resolution),
                                    std::uint32_t(resolution));
        out.push_back(grid_to_tensor(to_prob(counts, pp.prob_cap)));
    }
    return out;
}

// Deterministic stream-level split, then expansion into per-slice grids, so
// no stream contributes to both sides.
inline GridDataset build_ae_dataset(const std::vector<EventStream>& streams,
                                    const PreprocessParams& pp, std::size_t resolution,
                                    std::size_t slice_events, double val_fraction,
                                    std::uint64_t seed) {
    if (!(val_fraction >= 0 && val_fraction < 1))
        throw ValidationError("build_ae_dataset: val_fraction must be in [0, 1)");
    std::vector<std::size_t> idx(streams.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(hash_counters(seed, 0x5b11ULL));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const std::size_t val_n = std::size_t(double(streams.size()) * val_fraction);
    GridDataset ds;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto grids = stream_to_grids(streams[idx[i]], pp, resolution, slice_events);
        auto& side = i < val_n ? ds.val : ds.train;
        for (auto& g : grids) side.push_back(std::move(g));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Stream -> latent sequence (x0 for the diffusion model)
// ---------------------------------------------------------------------------

// Encodes each slice grid with the trained autoencoder and stacks the
// latents; shorter sequences are zero-padded, longer ones truncated.
inline nn::Tensor stream_to_latent_sequence(const EventStream& s, StagedAutoencoder& ae,
                                            const PreprocessParams& pp, std::size_t num_slices,
                                            std::size_t slice_events) {
    if (num_slices == 0) throw ValidationError("latent sequence: num_slices must be >= 1");
    const std::size_t latent = ae.config().latent_dim;
    nn::Tensor seq({num_slices, latent});
    auto grids = stream_to_grids(s, pp, ae.stage_resolution(), slice_events);
    const std::size_t n = std::min(grids.size(), num_slices);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> z = ae.encode_one(grids[i]);
        std::copy(z.begin(), z.end(), seq.v.begin() + i * latent);
    }
    return seq;
}

// Latent sequences plus their condition keys (class names resolved from the
// stream labels). Streams with unknown labels are rejected.
inline std::pair<std::vector<nn::Tensor>, std::vector<std::string>> build_latent_dataset(
    const std::vector<EventStream>& streams, const std::vector<GestureClass>& classes,
    StagedAutoencoder& ae, const PreprocessParams& pp, std::size_t num_slices,
    std::size_t slice_events) {
    std::vector<nn::Tensor> seqs;
    std::vector<std::string> keys;
    for (const EventStream& s : streams) {
        const GestureClass* cls = nullptr;
        for (const GestureClass& c : classes)
            if (c.id == s.label) cls = &c;
        if (!cls)
            throw ValidationError("latent dataset: stream label " + std::to_string(s.label) +
                                  " has no matching class");
        seqs.push_back(stream_to_latent_sequence(s, ae, pp, num_slices, slice_events));
        keys.push_back(cls->name);
    }
    return {std::move(seqs), std::move(keys)};
}

// Deterministic split of whole items (used for classifier train/val).
inline std::pair<std::vector<EventStream>, std::vector<EventStream>> split_streams(
    const std::vector<EventStream>& streams, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction >= 0 && val_fraction < 1))
        throw ValidationError("split: val_fraction must be in [0, 1)");
    std::vector<std::size_t> idx(streams.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(hash_counters(seed, 0x521caULL));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const std::size_t val_n = std::size_t(double(streams.size()) * val_fraction);
    std::pair<std::vector<EventStream>, std::vector<EventStream>> out;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < val_n ? out.second : out.first).push_back(streams[idx[i]]);
    return out;
}

}  // namespace evgen
