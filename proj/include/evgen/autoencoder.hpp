// Staged sparse autoencoder. Training starts at 8x8 with only the dense core
// and a pair of convolutional adapters; every later stage doubles the
// resolution, discards the old adapters, freezes everything inherited and
// adds one new conv block per side plus fresh adapters. A final fine-tune
// unfreezes the whole network.
//
// Encoder chain at stage s:  adapter conv -> [conv+GELU+maxpool] x (s-1)
//                            -> flatten -> fc1 -> GELU -> dropout -> fc2
// Decoder chain:             GELU -> dropout -> fc3 -> unflatten
//                            -> [conv+GELU+upsample] x (s-1) -> conv -> sigmoid
// The latent is the fc2 output. Conv blocks are named by their distance k
// from the core so names stay stable as stages grow; channel widths halve
// outward from core_channels, floored at min_channels.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evgen/checkpoint.hpp"
#include "evgen/common.hpp"
#include "evgen/losses.hpp"
#include "evgen/nn.hpp"
#include "evgen/rng.hpp"
#include "evgen/tensor.hpp"

namespace evgen {

struct AeConfig {
    std::size_t channels = 1;       // C: time bins per polarity (grids carry 2C channels)
    std::size_t resolution = 32;    // M: full resolution, must be 8 * 2^k
    std::size_t latent_dim = 64;
    std::size_t core_channels = 32;
    std::size_t core_hidden = 256;
    std::size_t min_channels = 8;
    double dropout = 0.1;

    void validate() const {
        if (channels == 0) throw ValidationError("ae: channels must be >= 1");
        if (resolution < 8 || (resolution & (resolution - 1)) != 0)
            throw ValidationError("ae: resolution must be 8 * 2^k");
        if (latent_dim == 0 || core_hidden == 0 || core_channels == 0 || min_channels == 0)
            throw ValidationError("ae: all width fields must be >= 1");
        if (!(dropout >= 0 && dropout < 1)) throw ValidationError("ae: dropout must be in [0, 1)");
    }

    std::size_t num_stages() const {
        std::size_t n = 1, r = 8;
        while (r < resolution) { r *= 2; ++n; }
        return n;
    }

    std::size_t stage_resolution(std::size_t s) const {
        std::size_t r = 8;
        for (std::size_t i = 1; i < s; ++i) r *= 2;
        return std::min(r, resolution);
    }

    // conv width at distance k from the core (k = 0 is the core itself)
    std::size_t width(std::size_t k) const {
        std::size_t w = core_channels;
        for (std::size_t i = 0; i < k && w / 2 >= min_channels; ++i) w /= 2;
        return std::max(w, min_channels);
    }
};

struct StageConfig {
    std::size_t stage = 1;
    std::size_t resolution = 8;    // M_s
    std::size_t max_events = 128;  // slice cap used when building this stage's grids
    std::size_t epochs = 30;
    std::size_t warmup_epochs = 6;  // q
    std::size_t batch_size = 16;
    double lr = 1e-4;

    void validate(const AeConfig& ae) const {
        if (stage == 0 || stage > ae.num_stages())
            throw ValidationError("stage: index out of range for this resolution ladder");
        if (resolution != ae.stage_resolution(stage))
            throw ValidationError("stage: resolution does not match 8 * 2^(s-1)");
        if (batch_size == 0) throw ValidationError("stage: batch_size must be >= 1");
        if (max_events == 0) throw ValidationError("stage: max_events must be >= 1");
        if (!(lr > 0)) throw ValidationError("stage: lr must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Occupancy warm-up: for the first q epochs, a shrinking central square of
// every grid is overwritten with the batch-wide maximum value.
// ---------------------------------------------------------------------------

// Border length z = max(floor(8 * M_s / M), 1) * (n - 1).
inline std::size_t warmup_border(std::size_t epoch_n, std::size_t ms, std::size_t m) {
    if (epoch_n < 1) throw ValidationError("warmup_border: epochs are 1-based");
    const std::size_t unit = std::max<std::size_t>(8 * ms / m, 1);
    return unit * (epoch_n - 1);
}

struct WarmupRegion {
    std::size_t lo = 0, hi = 0;  // [lo, hi) in both dimensions
    bool empty() const { return lo >= hi; }
};

inline WarmupRegion warmup_region(std::size_t epoch_n, std::size_t ms, std::size_t m) {
    const std::size_t z = warmup_border(epoch_n, ms, m);
    if (z >= ms || z >= ms - z) return {0, 0};
    return {z, ms - z};
}

// batch: [N, 2C, H, W]; identity once epoch_n > q or the region is empty.
inline void apply_warmup(nn::Tensor& batch, std::size_t epoch_n, std::size_t q, std::size_t ms,
                         std::size_t m) {
    if (batch.shape.size() != 4) throw ValidationError("apply_warmup: expected [N,C,H,W]");
    if (batch.shape[2] != ms || batch.shape[3] != ms)
        throw ValidationError("apply_warmup: batch resolution does not match the stage");
    if (epoch_n > q) return;
    const WarmupRegion r = warmup_region(epoch_n, ms, m);
    if (r.empty()) return;
    double mx = 0;  // batch-wide maximum across all grids and channels
    for (double v : batch.v) mx = std::max(mx, v);
    const std::size_t n = batch.shape[0], c = batch.shape[1];
    for (std::size_t i = 0; i < n * c; ++i) {
        double* plane = &batch.v[i * ms * ms];
        for (std::size_t y = r.lo; y < r.hi; ++y)
            for (std::size_t x = r.lo; x < r.hi; ++x) plane[y * ms + x] = mx;
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class StagedAutoencoder {
  public:
    explicit StagedAutoencoder(AeConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const AeConfig& config() const { return cfg_; }
    std::size_t stage() const { return stage_; }
    std::size_t stage_resolution() const { return cfg_.stage_resolution(stage_); }
    bool at_final_stage() const { return stage_ == cfg_.num_stages(); }

    // Stage 1 builds adapters + core; stage s = stage()+1 freezes everything
    // inherited, drops the old adapters and adds one outer block per side.
    void build_stage(std::size_t s, std::uint64_t seed) {
        if (s != stage_ + 1)
            throw UsageError("build_stage: stages must be built in order, next is " +
                             std::to_string(stage_ + 1));
        if (s > cfg_.num_stages())
            throw UsageError("build_stage: resolution ladder ends at stage " +
                             std::to_string(cfg_.num_stages()));
        Rng rng(hash_counters(seed, 0xae, s));
        const std::size_t c2 = 2 * cfg_.channels;
        if (s == 1) {
            const std::size_t flat = cfg_.core_channels * 8 * 8;
            core_enc_ = {std::make_shared<nn::Flatten>(),
                         std::make_shared<nn::Dense>("ae.core.fc1", flat, cfg_.core_hidden, rng),
                         std::make_shared<nn::Gelu>(),
                         std::make_shared<nn::Dropout>(cfg_.dropout),
                         std::make_shared<nn::Dense>("ae.core.fc2", cfg_.core_hidden,
                                                     cfg_.latent_dim, rng)};
            core_dec_ = {std::make_shared<nn::Gelu>(), std::make_shared<nn::Dropout>(cfg_.dropout),
                         std::make_shared<nn::Dense>("ae.core.fc3", cfg_.latent_dim, flat, rng),
                         std::make_shared<nn::Unflatten>(cfg_.core_channels, 8, 8)};
        } else {
            nn::set_frozen(params(), true);
            const std::size_t k = s - 1;  // distance of the new blocks from the core
            enc_blocks_.push_back(
                {std::make_shared<nn::Conv2d>("ae.enc.k" + std::to_string(k) + ".conv",
                                              cfg_.width(k), cfg_.width(k - 1), rng),
                 std::make_shared<nn::Gelu>(), std::make_shared<nn::MaxPool2>()});
            dec_blocks_.push_back(
                {std::make_shared<nn::Conv2d>("ae.dec.k" + std::to_string(k) + ".conv",
                                              cfg_.width(k - 1), cfg_.width(k), rng),
                 std::make_shared<nn::Gelu>(), std::make_shared<nn::Upsample2>()});
        }
        const std::string ss = std::to_string(s);
        in_adapter_ = std::make_shared<nn::Conv2d>("ae.adapt.in.s" + ss, c2, cfg_.width(s - 1), rng);
        out_adapter_ = std::make_shared<nn::Conv2d>("ae.adapt.out.s" + ss, cfg_.width(s - 1), c2, rng);
        stage_ = s;
        rebuild_chains();
    }

    // [N, 2C, M_s, M_s] -> [N, latent_dim]
    nn::Tensor encode(const nn::Tensor& grids, bool training, Rng& rng) {
        check_input(grids);
        return enc_.forward(grids, training, rng);
    }

    // [N, latent_dim] -> [N, 2C, M_s, M_s], values in (0,1)
    nn::Tensor decode(const nn::Tensor& latents, bool training, Rng& rng) {
        if (latents.shape.size() != 2 || latents.shape[1] != cfg_.latent_dim)
            throw ValidationError("decode: expected [N, " + std::to_string(cfg_.latent_dim) + "]");
        return dec_.forward(latents, training, rng);
    }

    nn::Tensor forward(const nn::Tensor& grids, bool training, Rng& rng) {
        return decode(encode(grids, training, rng), training, rng);
    }

    // Chain through decoder then encoder; forward must have been called.
    nn::Tensor backward(const nn::Tensor& dxhat) { return enc_.backward(dec_.backward(dxhat)); }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> out;
        auto add = [&](nn::Layer& l) {
            for (nn::Parameter* p : l.params()) out.push_back(p);
        };
        add(enc_);
        add(dec_);
        return out;
    }

    // Convenience single-sample eval-mode paths.
    std::vector<double> encode_one(const nn::Tensor& grid) {
        nn::Tensor batch = batch_one(grid);
        Rng rng(0);
        nn::Tensor z = encode(batch, false, rng);
        return std::vector<double>(z.v.begin(), z.v.end());
    }

    nn::Tensor decode_one(const std::vector<double>& latent) {
        if (latent.size() != cfg_.latent_dim) throw ValidationError("decode_one: bad latent size");
        nn::Tensor z({1, cfg_.latent_dim});
        z.v = latent;
        Rng rng(0);
        nn::Tensor out = decode(z, false, rng);
        const std::size_t ms = stage_resolution();
        return out.reshaped({2 * cfg_.channels, ms, ms});
    }

    void unfreeze_all() { nn::set_frozen(params(), false); }

    void save(const std::string& path) {
        std::vector<nn::CheckpointRecord> extras;
        extras.push_back(nn::CheckpointRecord::scalar("meta.stage", double(stage_)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.channels", double(cfg_.channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.resolution", double(cfg_.resolution)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.latent_dim", double(cfg_.latent_dim)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.core_channels", double(cfg_.core_channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.core_hidden", double(cfg_.core_hidden)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.min_channels", double(cfg_.min_channels)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.dropout", cfg_.dropout));
        nn::save_params(path, params(), extras);
    }

    static StagedAutoencoder load(const std::string& path) {
        auto records = nn::read_checkpoint(path);
        auto meta = [&](const char* name) {
            auto it = records.find(std::string("meta.") + name);
            if (it == records.end())
                throw FormatError(std::string("autoencoder checkpoint missing meta.") + name);
            return double(it->second.values.at(0));
        };
        AeConfig cfg;
        cfg.channels = std::size_t(meta("channels"));
        cfg.resolution = std::size_t(meta("resolution"));
        cfg.latent_dim = std::size_t(meta("latent_dim"));
        cfg.core_channels = std::size_t(meta("core_channels"));
        cfg.core_hidden = std::size_t(meta("core_hidden"));
        cfg.min_channels = std::size_t(meta("min_channels"));
        cfg.dropout = meta("dropout");
        StagedAutoencoder model(cfg);
        const std::size_t target = std::size_t(meta("stage"));
        for (std::size_t s = 1; s <= target; ++s) model.build_stage(s, 0);
        nn::load_params(records, model.params());
        return model;
    }

  private:
    void check_input(const nn::Tensor& grids) const {
        if (stage_ == 0) throw UsageError("autoencoder: no stage built yet");
        const std::size_t ms = cfg_.stage_resolution(stage_);
        const nn::Shape want{grids.shape.empty() ? 0 : grids.shape[0], 2 * cfg_.channels, ms, ms};
        if (grids.shape.size() != 4 || grids.shape[1] != want[1] || grids.shape[2] != ms ||
            grids.shape[3] != ms)
            throw ValidationError("encode: expected [N, " + std::to_string(2 * cfg_.channels) +
                                  ", " + std::to_string(ms) + ", " + std::to_string(ms) + "], got " +
                                  nn::shape_str(grids.shape));
    }

    nn::Tensor batch_one(const nn::Tensor& grid) const {
        if (grid.shape.size() != 3) throw ValidationError("expected a [C,H,W] grid");
        nn::Tensor b({1, grid.shape[0], grid.shape[1], grid.shape[2]});
        b.v = grid.v;
        return b;
    }

    void rebuild_chains() {
        std::vector<nn::LayerPtr> enc, dec;
        enc.push_back(in_adapter_);
        for (std::size_t i = enc_blocks_.size(); i-- > 0;)  // outermost block first
            for (const auto& l : enc_blocks_[i]) enc.push_back(l);
        for (const auto& l : core_enc_) enc.push_back(l);
        for (const auto& l : core_dec_) dec.push_back(l);
        for (const auto& blk : dec_blocks_)  // innermost block first
            for (const auto& l : blk) dec.push_back(l);
        dec.push_back(out_adapter_);
        dec.push_back(std::make_shared<nn::Sigmoid>());
        enc_ = nn::Sequential(std::move(enc));
        dec_ = nn::Sequential(std::move(dec));
    }

    AeConfig cfg_;
    std::size_t stage_ = 0;
    nn::LayerPtr in_adapter_, out_adapter_;
    std::vector<std::vector<nn::LayerPtr>> enc_blocks_, dec_blocks_;  // index k-1, inner first
    std::vector<nn::LayerPtr> core_enc_, core_dec_;
    nn::Sequential enc_, dec_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct GridDataset {
    std::vector<nn::Tensor> train;  // each [2C, H, W]
    std::vector<nn::Tensor> val;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_f1 = 0;
};

struct TrainReport {
    std::vector<EpochLog> epochs;
    double final_val_f1() const { return epochs.empty() ? 0.0 : epochs.back().val_f1; }
    double final_val_loss() const { return epochs.empty() ? 0.0 : epochs.back().val_loss; }
};

namespace detail {

inline nn::Tensor stack_grids(const std::vector<nn::Tensor>& items,
                              const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    const nn::Shape& g = items[idx[lo]].shape;
    nn::Tensor out({hi - lo, g[0], g[1], g[2]});
    const std::size_t n = g[0] * g[1] * g[2];
    for (std::size_t i = lo; i < hi; ++i) {
        const nn::Tensor& t = items[idx[i]];
        if (t.shape != g) throw ValidationError("dataset grids disagree on shape");
        std::copy(t.v.begin(), t.v.end(), out.v.begin() + (i - lo) * n);
    }
    return out;
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

// Mean validation loss and F1 in eval mode, no warm-up.
inline std::pair<double, double> eval_split(StagedAutoencoder& model,
                                            const std::vector<nn::Tensor>& val,
                                            const LossConfig& loss_cfg, std::size_t batch_size) {
    if (val.empty()) return {0.0, 0.0};
    Rng rng(0);
    std::vector<std::size_t> idx(val.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    double loss_sum = 0, f1_sum = 0;
    for (std::size_t lo = 0; lo < val.size(); lo += batch_size) {
        const std::size_t hi = std::min(val.size(), lo + batch_size);
        nn::Tensor x = stack_grids(val, idx, lo, hi);
        nn::Tensor xhat = model.forward(x, false, rng);
        const std::size_t grid = x.shape[1] * x.shape[2] * x.shape[3];
        for (std::size_t i = lo; i < hi; ++i) {
            nn::Tensor xi({x.shape[1], x.shape[2], x.shape[3]});
            nn::Tensor hi_t = xi;
            std::copy(x.v.begin() + (i - lo) * grid, x.v.begin() + (i - lo + 1) * grid, xi.v.begin());
            std::copy(xhat.v.begin() + (i - lo) * grid, xhat.v.begin() + (i - lo + 1) * grid,
                      hi_t.v.begin());
            loss_sum += total_loss(xi, hi_t, loss_cfg);
            f1_sum += f1_nonzero(xi, hi_t, loss_cfg.act_threshold);
        }
    }
    return {loss_sum / double(val.size()), f1_sum / double(val.size())};
}

inline TrainReport run_epochs(StagedAutoencoder& model, const GridDataset& data,
                              std::size_t epochs, std::size_t warmup_q, std::size_t batch_size,
                              double lr, const LossConfig& loss_cfg, std::uint64_t seed) {
    if (data.train.empty()) throw ValidationError("train: empty dataset");
    loss_cfg.validate();
    const std::size_t ms = model.stage_resolution();
    const std::size_t m = model.config().resolution;
    nn::AdamW opt;
    opt.config().lr = lr;
    Rng rng(hash_counters(seed, 0x7121, model.stage()));
    std::vector<std::size_t> idx(data.train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    TrainReport report;
    for (std::size_t e = 1; e <= epochs; ++e) {
        shuffle_indices(idx, rng);
        double loss_sum = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += batch_size) {
            const std::size_t hi = std::min(idx.size(), lo + batch_size);
            nn::Tensor x = stack_grids(data.train, idx, lo, hi);
            apply_warmup(x, e, warmup_q, ms, m);  // input and target are the augmented batch
            nn::Tensor xhat = model.forward(x, true, rng);
            auto [loss, dxhat] = total_loss_grad(x, xhat, loss_cfg);
            auto ps = model.params();
            nn::zero_grads(ps);
            model.backward(dxhat);
            opt.step(ps);
            loss_sum += loss * double(hi - lo);
        }
        EpochLog log;
        log.epoch = e;
        log.train_loss = loss_sum / double(idx.size());
        std::tie(log.val_loss, log.val_f1) = eval_split(model, data.val, loss_cfg, batch_size);
        report.epochs.push_back(log);
    }
    return report;
}

}  // namespace detail

inline TrainReport train_stage(StagedAutoencoder& model, const GridDataset& data,
                               const StageConfig& stage, const LossConfig& loss_cfg,
                               std::uint64_t seed) {
    stage.validate(model.config());
    if (model.stage() != stage.stage)
        throw UsageError("train_stage: model is at stage " + std::to_string(model.stage()) +
                         ", config says " + std::to_string(stage.stage));
    return detail::run_epochs(model, data, stage.epochs, stage.warmup_epochs, stage.batch_size,
                              stage.lr, loss_cfg, seed);
}

// All parameters unfrozen, no warm-up. Requires the final stage.
inline TrainReport finetune(StagedAutoencoder& model, const GridDataset& data, std::size_t epochs,
                            std::size_t batch_size, double lr, const LossConfig& loss_cfg,
                            std::uint64_t seed) {
    if (!model.at_final_stage()) throw UsageError("finetune: model must be at the final stage");
    model.unfreeze_all();
    return detail::run_epochs(model, data, epochs, 0, batch_size, lr, loss_cfg,
                              hash_counters(seed, 0xf1e));
}

}  // namespace evgen
