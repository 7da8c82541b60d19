// Gesture classifier: the autoencoder's final-stage encoder topology
// (independently initialized) applied per slice, temporal max+mean pooling
// over the slice axis, and a three-layer dense head producing K logits.
// Also hosts the event-removal augmentation and the classify() entry point
// used by the evaluation harness.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evgen/autoencoder.hpp"
#include "evgen/checkpoint.hpp"
#include "evgen/common.hpp"
#include "evgen/dataset.hpp"
#include "evgen/events.hpp"
#include "evgen/nn.hpp"
#include "evgen/preprocess.hpp"
#include "evgen/rng.hpp"

namespace evgen {

struct ClsConfig {
    AeConfig encoder{};          // slice-encoder topology (weights are fresh, not shared)
    std::size_t num_classes = 2; // K
    std::size_t head_hidden = 64;
    double p_drop = 0.2;         // event-removal augmentation rate (training only)
    std::size_t slice_events = 512;
    std::size_t max_slices = 16; // 0 = unlimited
    bool keep_remainder = true;  // short final slices still carry signal here
    FilterConfig filter{};
    double prob_cap = 1.0;

    void validate() const {
        encoder.validate();
        if (num_classes < 2) throw ValidationError("classifier: need at least 2 classes");
        if (head_hidden == 0) throw ValidationError("classifier: head_hidden must be >= 1");
        if (!(p_drop >= 0 && p_drop <= 1)) throw ValidationError("classifier: p_drop must be in [0, 1]");
        if (slice_events == 0) throw ValidationError("classifier: slice_events must be >= 1");
        filter.validate();
        if (!(prob_cap > 0)) throw ValidationError("classifier: prob_cap must be > 0");
    }

    PreprocessParams preprocess() const { return {filter, encoder.channels, prob_cap}; }
};

// Slice stack [S, 2C, M, M] for one stream under the classifier's
// preprocessing, or nullopt when nothing survives filtering.
inline std::optional<nn::Tensor> classifier_slices(const EventStream& s, const ClsConfig& cfg) {
    auto grids = stream_to_grids(s, cfg.preprocess(), cfg.encoder.resolution, cfg.slice_events,
                                 cfg.keep_remainder);
    if (grids.empty()) return std::nullopt;
    std::size_t n = grids.size();
    if (cfg.max_slices > 0) n = std::min(n, cfg.max_slices);
    const std::size_t plane = grids[0].numel();
    nn::Tensor out({n, grids[0].shape[0], grids[0].shape[1], grids[0].shape[2]});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(grids[i].v.begin(), grids[i].v.end(), out.v.begin() + i * plane);
    return out;
}

class Classifier {
  public:
    Classifier(ClsConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(hash_counters(seed, 0xc145ULL));
        build_encoder(rng);
        build_head(rng);
    }

    const ClsConfig& config() const { return cfg_; }

    // slices [S, 2C, M, M] -> logits [1, K]; caches for one backward pass.
    nn::Tensor forward_slices(const nn::Tensor& slices, bool training, Rng& rng) {
        if (slices.shape.size() != 4) throw ValidationError("classifier: expected [S, 2C, M, M]");
        feats_ = enc_.forward(slices, training, rng);  // [S, F]
        const std::size_t s_n = feats_.shape[0], f_n = feats_.shape[1];
        argmax_.assign(f_n, 0);
        nn::Tensor pooled({std::size_t(1), 2 * f_n});
        for (std::size_t f = 0; f < f_n; ++f) {
            double mx = feats_.v[f], sum = 0;
            for (std::size_t s = 0; s < s_n; ++s) {
                const double v = feats_.v[s * f_n + f];
                sum += v;
                if (v > mx) { mx = v; argmax_[f] = s; }
            }
            pooled.v[f] = mx;
            pooled.v[f_n + f] = sum / double(s_n);
        }
        have_cache_ = true;
        return head_.forward(pooled, training, rng);
    }

    // Adds into parameter grads (callers accumulate over a batch).
    void backward(const nn::Tensor& dlogits) {
        if (!have_cache_) throw UsageError("classifier backward without cached forward");
        have_cache_ = false;
        const nn::Tensor dpooled = head_.backward(dlogits);
        const std::size_t s_n = feats_.shape[0], f_n = feats_.shape[1];
        nn::Tensor dfeats({s_n, f_n});
        for (std::size_t f = 0; f < f_n; ++f) {
            dfeats.v[argmax_[f] * f_n + f] += dpooled.v[f];
            const double dm = dpooled.v[f_n + f] / double(s_n);
            for (std::size_t s = 0; s < s_n; ++s) dfeats.v[s * f_n + f] += dm;
        }
        enc_.backward(dfeats);
    }

    std::vector<nn::Parameter*> params() {
        auto out = enc_.params();
        auto h = head_.params();
        out.insert(out.end(), h.begin(), h.end());
        return out;
    }

    void save(const std::string& path) {
        std::vector<nn::CheckpointRecord> extras;
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.channels", float(cfg_.encoder.channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.resolution", float(cfg_.encoder.resolution)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.latent_dim", float(cfg_.encoder.latent_dim)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.core_channels", float(cfg_.encoder.core_channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.core_hidden", float(cfg_.encoder.core_hidden)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.min_channels", float(cfg_.encoder.min_channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.enc.dropout", float(cfg_.encoder.dropout)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.num_classes", float(cfg_.num_classes)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.head_hidden", float(cfg_.head_hidden)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.p_drop", float(cfg_.p_drop)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.slice_events", float(cfg_.slice_events)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.max_slices", float(cfg_.max_slices)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.keep_remainder", cfg_.keep_remainder ? 1.f : 0.f));
        extras.push_back(nn::CheckpointRecord::scalar("meta.filter.window_us", float(cfg_.filter.window_us)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.filter.patch_px", float(cfg_.filter.patch_px)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.filter.threshold", float(cfg_.filter.threshold)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.prob_cap", float(cfg_.prob_cap)));
        nn::save_params(path, params(), extras);
    }

    static Classifier load(const std::string& path) {
        auto records = nn::read_checkpoint(path);
        auto meta = [&](const std::string& name) {
            auto it = records.find(name);
            if (it == records.end()) throw FormatError("classifier checkpoint missing " + name);
            return double(it->second.values.at(0));
        };
        ClsConfig cfg;
        cfg.encoder.channels = std::size_t(meta("meta.enc.channels"));
        cfg.encoder.resolution = std::size_t(meta("meta.enc.resolution"));
        cfg.encoder.latent_dim = std::size_t(meta("meta.enc.latent_dim"));
        cfg.encoder.core_channels = std::size_t(meta("meta.enc.core_channels"));
        cfg.encoder.core_hidden = std::size_t(meta("meta.enc.core_hidden"));
        cfg.encoder.min_channels = std::size_t(meta("meta.enc.min_channels"));
        cfg.encoder.dropout = meta("meta.enc.dropout");
        cfg.num_classes = std::size_t(meta("meta.num_classes"));
        cfg.head_hidden = std::size_t(meta("meta.head_hidden"));
        cfg.p_drop = meta("meta.p_drop");
        cfg.slice_events = std::size_t(meta("meta.slice_events"));
        cfg.max_slices = std::size_t(meta("meta.max_slices"));
        cfg.keep_remainder = meta("meta.keep_remainder") != 0;
        cfg.filter.window_us = std::int64_t(meta("meta.filter.window_us"));
        cfg.filter.patch_px = std::uint32_t(meta("meta.filter.patch_px"));
        cfg.filter.threshold = std::uint64_t(meta("meta.filter.threshold"));
        cfg.prob_cap = meta("meta.prob_cap");
        Classifier model(cfg, 0);
        nn::load_params(records, model.params());
        return model;
    }

  private:
    // Final-stage AE encoder shape: input adapter, one conv+pool block per
    // outer stage, then the flatten/fc core cut at the latent.
    void build_encoder(Rng& rng) {
        const AeConfig& ae = cfg_.encoder;
        const std::size_t stages = ae.num_stages();
        enc_ = nn::Sequential();
        enc_.append(std::make_shared<nn::Conv2d>("cls.enc.adapt", 2 * ae.channels,
                                                 ae.width(stages - 1), rng));
        for (std::size_t k = stages - 1; k >= 1; --k) {
            const std::string base = "cls.enc.k" + std::to_string(k);
            enc_.append(std::make_shared<nn::Conv2d>(base + ".conv", ae.width(k), ae.width(k - 1), rng));
            enc_.append(std::make_shared<nn::Gelu>());
            enc_.append(std::make_shared<nn::MaxPool2>());
        }
        const std::size_t flat = ae.width(0) * 8 * 8;
        enc_.append(std::make_shared<nn::Flatten>());
        enc_.append(std::make_shared<nn::Dense>("cls.core.fc1", flat, ae.core_hidden, rng));
        enc_.append(std::make_shared<nn::Gelu>());
        enc_.append(std::make_shared<nn::Dropout>(ae.dropout));
        enc_.append(std::make_shared<nn::Dense>("cls.core.fc2", ae.core_hidden, ae.latent_dim, rng));
    }

    void build_head(Rng& rng) {
        const std::size_t in = 2 * cfg_.encoder.latent_dim;
        head_ = nn::Sequential();
        head_.append(std::make_shared<nn::Dense>("cls.head.d1", in, cfg_.head_hidden, rng));
        head_.append(std::make_shared<nn::Gelu>());
        head_.append(std::make_shared<nn::Dense>("cls.head.d2", cfg_.head_hidden, cfg_.head_hidden, rng));
        head_.append(std::make_shared<nn::Gelu>());
        head_.append(std::make_shared<nn::Dense>("cls.head.d3", cfg_.head_hidden, cfg_.num_classes, rng));
    }

    ClsConfig cfg_;
    nn::Sequential enc_, head_;
    nn::Tensor feats_;
    std::vector<std::size_t> argmax_;
    bool have_cache_ = false;
};

// Drops each event independently with probability p (training augmentation).
inline EventStream drop_events(const EventStream& s, double p, Rng& rng) {
    if (!(p >= 0 && p <= 1)) throw ValidationError("drop_events: p must be in [0, 1]");
    EventStream out;
    out.width = s.width;
    out.height = s.height;
    out.label = s.label;
    for (const Event& e : s.events)
        if (rng.uniform() >= p) out.events.push_back(e);
    return out;
}

struct ClassifyResult {
    bool classifiable = false;  // false: stream empty after preprocessing
    std::size_t class_id = 0;
    std::vector<double> logits;
};

inline ClassifyResult classify(Classifier& model, const EventStream& s) {
    auto slices = classifier_slices(s, model.config());
    if (!slices) return {};
    Rng rng(0);  // eval mode: no stochastic layers active
    const nn::Tensor logits = model.forward_slices(*slices, false, rng);
    ClassifyResult r;
    r.classifiable = true;
    r.logits.assign(logits.v.begin(), logits.v.end());
    r.class_id = std::size_t(std::max_element(r.logits.begin(), r.logits.end()) - r.logits.begin());
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ClsTrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 8;
    double lr = 1e-4;

    void validate() const {
        if (epochs == 0 || batch_size == 0) throw ValidationError("classifier: epochs/batch_size must be >= 1");
        if (!(lr > 0)) throw ValidationError("classifier: lr must be > 0");
    }
};

struct ClsEpochLog {
    std::size_t epoch = 0;
    double train_loss = 0, train_acc = 0, val_acc = 0;
};

struct ClsTrainReport {
    std::vector<ClsEpochLog> epochs;
    double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
};

namespace detail {

// Unclassifiable streams score as incorrect (conservative).
inline double accuracy_over(Classifier& model, const std::vector<EventStream>& streams) {
    if (streams.empty()) return 0.0;
    std::size_t correct = 0;
    for (const EventStream& s : streams) {
        const ClassifyResult r = classify(model, s);
        if (r.classifiable && std::int32_t(r.class_id) == s.label) ++correct;
    }
    return double(correct) / double(streams.size());
}

}  // namespace detail

// Cross-entropy training with event-removal augmentation. Streams that come
// out of preprocessing empty (e.g. p_drop = 1) train on one all-zero slice so
// the loss stays defined and accuracy falls to chance.
inline ClsTrainReport train_classifier(Classifier& model, const std::vector<EventStream>& train,
                                       const std::vector<EventStream>& val,
                                       const ClsTrainConfig& tc, std::uint64_t seed) {
    tc.validate();
    const ClsConfig& cfg = model.config();
    {
        std::vector<std::int32_t> labels;
        for (const EventStream& s : train) {
            if (s.label < 0 || std::size_t(s.label) >= cfg.num_classes)
                throw ValidationError("classifier: stream label " + std::to_string(s.label) +
                                      " outside [0, " + std::to_string(cfg.num_classes) + ")");
            if (std::find(labels.begin(), labels.end(), s.label) == labels.end())
                labels.push_back(s.label);
        }
        if (labels.size() < 2) throw ValidationError("classifier: training set has fewer than 2 classes");
    }

    const AeConfig& enc = cfg.encoder;
    const nn::Tensor zero_slice({std::size_t(1), 2 * enc.channels, enc.resolution, enc.resolution});
    nn::AdamWConfig opt_cfg;
    opt_cfg.lr = tc.lr;
    nn::AdamW opt(opt_cfg);
    auto params = model.params();
    Rng rng(hash_counters(seed, 0xc7a1ULL));

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    ClsTrainReport report;
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double loss_sum = 0;
        std::size_t correct = 0, in_batch = 0;
        nn::zero_grads(params);
        for (std::size_t i = 0; i < order.size(); ++i) {
            const EventStream& s = train[order[i]];
            const EventStream aug = drop_events(s, cfg.p_drop, rng);
            auto slices = classifier_slices(aug, cfg);
            const nn::Tensor logits =
                model.forward_slices(slices ? *slices : zero_slice, true, rng);
            auto [loss, dlogits] =
                nn::softmax_cross_entropy(logits, {std::size_t(s.label)});
            loss_sum += loss;
            const std::size_t pred = std::size_t(
                std::max_element(logits.v.begin(), logits.v.end()) - logits.v.begin());
            if (std::int32_t(pred) == s.label) ++correct;
            const std::size_t batch_n = std::min(tc.batch_size, order.size() - (i / tc.batch_size) * tc.batch_size);
            for (double& d : dlogits.v) d /= double(batch_n);
            model.backward(dlogits);
            if (++in_batch == batch_n) {
                opt.step(params);
                nn::zero_grads(params);
                in_batch = 0;
            }
        }
        ClsEpochLog log;
        log.epoch = epoch;
        log.train_loss = train.empty() ? 0.0 : loss_sum / double(train.size());
        log.train_acc = train.empty() ? 0.0 : double(correct) / double(train.size());
        log.val_acc = detail::accuracy_over(model, val);
        report.epochs.push_back(log);
    }
    return report;
}

}  // namespace evgen
