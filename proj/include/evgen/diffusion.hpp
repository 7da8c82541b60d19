// Conditional latent diffusion over stacked autoencoder latents.
//
// A LatentSequence [num_slices, latent_dim] is flattened and treated as one
// data point x0. The denoiser predicts the injected noise from (z_t, t, c);
// sampling runs the ancestral reverse process with classifier-free guidance,
// re-noising the current x0 estimate to the next (lower) noise level and
// returning the estimate itself on the final step.
//
// Steps are indexed t = 0..T-1 from least to most noisy: gamma (signal
// scale) is strictly decreasing in t, sigma (noise scale) strictly
// increasing, gamma^2 + sigma^2 = 1 at every step.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "evgen/checkpoint.hpp"
#include "evgen/common.hpp"
#include "evgen/nn.hpp"
#include "evgen/rng.hpp"
#include "evgen/tensor.hpp"

namespace evgen {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { linear, cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ValidationError("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

inline const char* schedule_kind_name(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "cosine";
}

struct DiffusionSchedule {
    std::size_t T = 0;
    std::vector<double> gamma, sigma;  // per step, gamma^2 + sigma^2 = 1

    void validate() const {
        if (T < 2 || gamma.size() != T || sigma.size() != T)
            throw ValidationError("schedule: malformed");
        for (std::size_t t = 0; t < T; ++t) {
            if (std::abs(gamma[t] * gamma[t] + sigma[t] * sigma[t] - 1.0) > 1e-12)
                throw ValidationError("schedule: gamma^2 + sigma^2 != 1 at step " + std::to_string(t));
            if (!(gamma[t] > 0 && gamma[t] <= 1)) throw ValidationError("schedule: gamma out of (0,1]");
            if (t > 0 && !(gamma[t] < gamma[t - 1]))
                throw ValidationError("schedule: gamma must strictly decrease");
        }
    }
};

// linear: beta ramps 1e-4 -> 0.02 scaled by 1000/T; cosine: squared-cosine
// cumulative signal with per-step beta clipped at 0.999. Both store
// gamma = sqrt(prod(1-beta)) and sigma = sqrt(1 - prod(1-beta)).
inline DiffusionSchedule make_schedule(std::size_t T, ScheduleKind kind) {
    if (T < 2) throw ValidationError("schedule: T must be >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.gamma.resize(T);
    s.sigma.resize(T);
    double abar = 1.0;
    if (kind == ScheduleKind::linear) {
        const double scale = 1000.0 / double(T);
        for (std::size_t t = 0; t < T; ++t) {
            double beta = scale * (1e-4 + (0.02 - 1e-4) * double(t) / double(T - 1));
            beta = std::min(beta, 0.999);
            abar *= 1.0 - beta;
            s.gamma[t] = std::sqrt(abar);
            s.sigma[t] = std::sqrt(1.0 - abar);
        }
    } else {
        const double off = 0.008;
        auto f = [off](double u) {
            const double c = std::cos((u + off) / (1.0 + off) * 1.5707963267948966);
            return c * c;
        };
        const double f0 = f(0.0);
        double prev = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double target = f(double(t + 1) / double(T)) / f0;
            double beta = 1.0 - target / prev;
            beta = std::min(std::max(beta, 1e-8), 0.999);
            prev = target;
            abar *= 1.0 - beta;
            s.gamma[t] = std::sqrt(abar);
            s.sigma[t] = std::sqrt(1.0 - abar);
        }
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Elementwise process algebra
// ---------------------------------------------------------------------------

inline nn::Tensor forward_noise(const nn::Tensor& x0, std::size_t t, const nn::Tensor& eps,
                                const DiffusionSchedule& sched) {
    if (!x0.same_shape(eps)) throw ValidationError("forward_noise: shape mismatch");
    if (t >= sched.T) throw ValidationError("forward_noise: step out of range");
    nn::Tensor z(x0.shape);
    const double g = sched.gamma[t], si = sched.sigma[t];
    for (std::size_t i = 0; i < z.numel(); ++i) z.v[i] = g * x0.v[i] + si * eps.v[i];
    return z;
}

// Classifier-free guidance: eps~ = w * eps_cond + (1 - w) * eps_uncond.
inline nn::Tensor cfg_epsilon(const nn::Tensor& eps_cond, const nn::Tensor& eps_uncond, double w) {
    if (!eps_cond.same_shape(eps_uncond)) throw ValidationError("cfg_epsilon: shape mismatch");
    nn::Tensor out(eps_cond.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.v[i] = w * eps_cond.v[i] + (1.0 - w) * eps_uncond.v[i];
    return out;
}

// x^ = (z_t - sigma_t * eps~) / gamma_t
inline nn::Tensor predict_x0(const nn::Tensor& z, const nn::Tensor& eps, std::size_t t,
                             const DiffusionSchedule& sched) {
    if (!z.same_shape(eps)) throw ValidationError("predict_x0: shape mismatch");
    if (t >= sched.T) throw ValidationError("predict_x0: step out of range");
    const double g = sched.gamma[t], si = sched.sigma[t];
    if (g == 0.0) throw ValidationError("predict_x0: gamma is zero at step " + std::to_string(t));
    nn::Tensor x(z.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) x.v[i] = (z.v[i] - si * eps.v[i]) / g;
    return x;
}

// ---------------------------------------------------------------------------
// Condition embeddings. Class-table mode holds a trainable row per key;
// file mode loads fixed vectors from an EVEM file. The unconditional
// embedding is the all-zero vector in both modes.
// ---------------------------------------------------------------------------

struct EmbeddingFile {
    std::size_t dim = 0;
    std::vector<std::pair<std::string, std::vector<float>>> entries;
};

inline void write_embeddings(const std::string& path, const EmbeddingFile& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    detail::write_magic(os, "EVEM");
    detail::write_le<std::uint32_t>(os, std::uint32_t(f.entries.size()));
    detail::write_le<std::uint32_t>(os, std::uint32_t(f.dim));
    for (const auto& [key, vals] : f.entries) {
        if (vals.size() != f.dim) throw ValidationError("embedding '" + key + "' has wrong dim");
        detail::write_le<std::uint32_t>(os, std::uint32_t(key.size()));
        detail::put_bytes(os, key.data(), key.size());
        for (float v : vals) detail::write_f32le(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline EmbeddingFile read_embeddings(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    detail::expect_magic(is, "EVEM", "embedding file");
    EmbeddingFile f;
    const std::uint32_t count = detail::read_le<std::uint32_t>(is);
    f.dim = detail::read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t klen = detail::read_le<std::uint32_t>(is);
        std::string key(klen, '\0');
        detail::get_bytes(is, key.data(), klen);
        std::vector<float> vals(f.dim);
        for (float& v : vals) v = detail::read_f32le(is);
        f.entries.emplace_back(std::move(key), std::move(vals));
    }
    return f;
}

class EmbeddingProvider {
  public:
    // Trainable class table, one row per key, small random init.
    EmbeddingProvider(std::vector<std::string> keys, std::size_t dim, std::uint64_t seed,
                      bool trainable = true)
        : dim_(dim), keys_(std::move(keys)), table_("dm.embed.table", {keys_.size(), dim}) {
        if (dim_ == 0) throw ValidationError("embeddings: dim must be >= 1");
        if (keys_.empty()) throw ValidationError("embeddings: need at least one key");
        for (std::size_t i = 0; i < keys_.size(); ++i) {
            if (!index_.emplace(keys_[i], i).second)
                throw ValidationError("embeddings: duplicate key '" + keys_[i] + "'");
        }
        table_.frozen = !trainable;
        Rng rng(hash_counters(seed, 0xe3bedULL));
        for (double& v : table_.value.v) v = 0.1 * rng.normal();
    }

    // Fixed vectors from an EVEM file; rows are frozen.
    static EmbeddingProvider from_file(const std::string& path) {
        EmbeddingFile f = read_embeddings(path);
        std::vector<std::string> keys;
        keys.reserve(f.entries.size());
        for (const auto& e : f.entries) keys.push_back(e.first);
        EmbeddingProvider p(std::move(keys), f.dim, 0, false);
        for (std::size_t i = 0; i < f.entries.size(); ++i)
            for (std::size_t j = 0; j < f.dim; ++j)
                p.table_.value.v[i * f.dim + j] = double(f.entries[i].second[j]);
        return p;
    }

    std::size_t dim() const { return dim_; }
    const std::vector<std::string>& keys() const { return keys_; }
    bool trainable() const { return !table_.frozen; }

    std::size_t row_of(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) {
            std::string msg = "unknown embedding key '" + key + "'; available:";
            for (const auto& k : keys_) msg += " " + k;
            throw ValidationError(msg);
        }
        return it->second;
    }

    std::vector<double> embed(const std::string& key) const {
        const std::size_t r = row_of(key);
        return std::vector<double>(table_.value.v.begin() + r * dim_,
                                   table_.value.v.begin() + (r + 1) * dim_);
    }

    std::vector<double> unconditional() const { return std::vector<double>(dim_, 0.0); }

    nn::Parameter& table() { return table_; }
    const nn::Parameter& table() const { return table_; }

    void save(const std::string& path) const {
        EmbeddingFile f;
        f.dim = dim_;
        for (std::size_t i = 0; i < keys_.size(); ++i) {
            std::vector<float> vals(dim_);
            for (std::size_t j = 0; j < dim_; ++j) vals[j] = float(table_.value.v[i * dim_ + j]);
            f.entries.emplace_back(keys_[i], std::move(vals));
        }
        write_embeddings(path, f);
    }

  private:
    std::size_t dim_;
    std::vector<std::string> keys_;
    std::map<std::string, std::size_t> index_;
    nn::Parameter table_;
};

// ---------------------------------------------------------------------------
// Denoiser: dense encoder-decoder trunk with one skip connection. The
// flattened latent is concatenated with a sinusoidal time embedding and the
// condition vector; every hidden layer is additionally modulated by an
// affine (FiLM-style) transform computed from [time | condition].
// ---------------------------------------------------------------------------

struct DmConfig {
    std::size_t num_slices = 32;
    std::size_t latent_dim = 64;
    std::size_t embed_dim = 64;
    std::size_t time_dim = 32;
    std::size_t hidden1 = 256;
    std::size_t hidden2 = 128;
    std::size_t steps = 200;  // T
    ScheduleKind schedule = ScheduleKind::linear;
    double guidance = 7.5;  // default w

    std::size_t flat_dim() const { return num_slices * latent_dim; }

    void validate() const {
        if (num_slices == 0 || latent_dim == 0 || embed_dim == 0 || hidden1 == 0 || hidden2 == 0)
            throw ValidationError("dm: all dimensions must be >= 1");
        if (time_dim < 2) throw ValidationError("dm: time_dim must be >= 2");
        if (steps < 2) throw ValidationError("dm: steps must be >= 2");
        if (!(guidance == guidance)) throw ValidationError("dm: guidance must be a number");
    }
};

inline void time_embedding(std::size_t t, std::size_t dim, double* out) {
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out[2 * i] = std::sin(double(t) * freq);
        out[2 * i + 1] = std::cos(double(t) * freq);
    }
    if (dim % 2 == 1) out[dim - 1] = 0.0;
}

class Denoiser {
  public:
    Denoiser(const DmConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), init_rng_(hash_counters(seed, 0xd3002ULL)),
          d1_("dm.net.d1", cfg.flat_dim() + cfg.time_dim + cfg.embed_dim, cfg.hidden1, init_rng_),
          d2_("dm.net.d2", cfg.hidden1, cfg.hidden2, init_rng_),
          d3_("dm.net.d3", cfg.hidden2, cfg.hidden1, init_rng_),
          d4_("dm.net.d4", cfg.hidden1, cfg.flat_dim(), init_rng_),
          f1_("dm.net.f1", cfg.time_dim + cfg.embed_dim, 2 * cfg.hidden1, init_rng_),
          f2_("dm.net.f2", cfg.time_dim + cfg.embed_dim, 2 * cfg.hidden2, init_rng_),
          f3_("dm.net.f3", cfg.time_dim + cfg.embed_dim, 2 * cfg.hidden1, init_rng_) {
        cfg_.validate();
    }

    const DmConfig& config() const { return cfg_; }

    // z [N, flat], t per element, cond [N, embed_dim] -> predicted noise [N, flat]
    nn::Tensor forward(const nn::Tensor& z, const std::vector<std::size_t>& t,
                       const nn::Tensor& cond, bool training, Rng& rng) {
        const std::size_t d = cfg_.flat_dim(), dt = cfg_.time_dim, de = cfg_.embed_dim;
        if (z.shape.size() != 2 || z.shape[1] != d)
            throw ValidationError("denoiser: expected z of [N, " + std::to_string(d) + "]");
        const std::size_t n = z.shape[0];
        if (t.size() != n || cond.shape.size() != 2 || cond.shape[0] != n || cond.shape[1] != de)
            throw ValidationError("denoiser: t/cond batch mismatch");

        nn::Tensor g({n, dt + de});  // [time | condition], shared by the FiLM branches
        for (std::size_t i = 0; i < n; ++i) {
            time_embedding(t[i], dt, &g.v[i * (dt + de)]);
            std::copy(cond.v.begin() + i * de, cond.v.begin() + (i + 1) * de,
                      g.v.begin() + i * (dt + de) + dt);
        }
        nn::Tensor in({n, d + dt + de});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(z.v.begin() + i * d, z.v.begin() + (i + 1) * d, in.v.begin() + i * (d + dt + de));
            std::copy(g.v.begin() + i * (dt + de), g.v.begin() + (i + 1) * (dt + de),
                      in.v.begin() + i * (d + dt + de) + d);
        }

        p1_ = d1_.forward(in, training, rng);
        nn::Tensor h1 = gelu_fwd(p1_);
        a1_ = film_fwd(f1_, g, h1, s1_, training, rng);
        p2_ = d2_.forward(a1_, training, rng);
        h2_ = gelu_fwd(p2_);
        nn::Tensor a2 = film_fwd(f2_, g, h2_, s2_, training, rng);
        p3_ = d3_.forward(a2, training, rng);
        nn::Tensor h3 = gelu_fwd(p3_);
        u_ = h3;
        for (std::size_t i = 0; i < u_.numel(); ++i) u_.v[i] += a1_.v[i];  // skip connection
        nn::Tensor a3 = film_fwd(f3_, g, u_, s3_, training, rng);
        h1_ = std::move(h1);
        have_cache_ = true;
        return d4_.forward(a3, training, rng);
    }

    // Returns (dz, dcond); consumes the forward cache.
    std::pair<nn::Tensor, nn::Tensor> backward(const nn::Tensor& dout) {
        if (!have_cache_) throw UsageError("denoiser: backward without a matching forward");
        have_cache_ = false;
        const std::size_t d = cfg_.flat_dim(), dt = cfg_.time_dim, de = cfg_.embed_dim;
        const std::size_t n = dout.shape[0];

        nn::Tensor dg({n, dt + de});
        nn::Tensor da3 = d4_.backward(dout);
        nn::Tensor du = film_bwd(f3_, da3, u_, s3_, dg);
        nn::Tensor da1 = du;                       // skip branch
        nn::Tensor dp3 = gelu_bwd(du, p3_);
        nn::Tensor da2 = d3_.backward(dp3);
        nn::Tensor dh2 = film_bwd(f2_, da2, h2_, s2_, dg);
        nn::Tensor dp2 = gelu_bwd(dh2, p2_);
        nn::Tensor da1b = d2_.backward(dp2);
        for (std::size_t i = 0; i < da1.numel(); ++i) da1.v[i] += da1b.v[i];
        nn::Tensor dh1 = film_bwd(f1_, da1, h1_, s1_, dg);
        nn::Tensor dp1 = gelu_bwd(dh1, p1_);
        nn::Tensor din = d1_.backward(dp1);

        nn::Tensor dz({n, d}), dcond({n, de});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(din.v.begin() + i * (d + dt + de), din.v.begin() + i * (d + dt + de) + d,
                      dz.v.begin() + i * d);
            for (std::size_t j = 0; j < de; ++j)
                dcond.v[i * de + j] = din.v[i * (d + dt + de) + d + dt + j] +
                                      dg.v[i * (dt + de) + dt + j];
        }
        return {std::move(dz), std::move(dcond)};
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> out;
        for (nn::Dense* l : {&d1_, &d2_, &d3_, &d4_, &f1_, &f2_, &f3_})
            for (nn::Parameter* p : l->params()) out.push_back(p);
        return out;
    }

  private:
    static nn::Tensor gelu_fwd(const nn::Tensor& x) {
        nn::Tensor y(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) y.v[i] = nn::gelu_value(x.v[i]);
        return y;
    }

    static nn::Tensor gelu_bwd(const nn::Tensor& dy, const nn::Tensor& x) {
        nn::Tensor dx(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) dx.v[i] = dy.v[i] * nn::gelu_derivative(x.v[i]);
        return dx;
    }

    // a = h * (1 + s) + b with [s | b] = f(g); stores s for backward.
    nn::Tensor film_fwd(nn::Dense& f, const nn::Tensor& g, const nn::Tensor& h, nn::Tensor& s_out,
                        bool training, Rng& rng) {
        nn::Tensor sb = f.forward(g, training, rng);
        const std::size_t n = h.shape[0], w = h.shape[1];
        nn::Tensor a({n, w});
        s_out = nn::Tensor({n, w});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const double s = sb.v[i * 2 * w + j], b = sb.v[i * 2 * w + w + j];
                s_out.v[i * w + j] = s;
                a.v[i * w + j] = h.v[i * w + j] * (1.0 + s) + b;
            }
        return a;
    }

    // Given da: dh = da * (1 + s); accumulates f's input gradient into dg.
    nn::Tensor film_bwd(nn::Dense& f, const nn::Tensor& da, const nn::Tensor& h,
                        const nn::Tensor& s, nn::Tensor& dg) {
        const std::size_t n = h.shape[0], w = h.shape[1];
        nn::Tensor dsb({n, 2 * w}), dh({n, w});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const double g = da.v[i * w + j];
                dh.v[i * w + j] = g * (1.0 + s.v[i * w + j]);
                dsb.v[i * 2 * w + j] = g * h.v[i * w + j];
                dsb.v[i * 2 * w + w + j] = g;
            }
        nn::Tensor dgp = f.backward(dsb);
        for (std::size_t i = 0; i < dg.numel(); ++i) dg.v[i] += dgp.v[i];
        return dh;
    }

    DmConfig cfg_;
    Rng init_rng_;
    nn::Dense d1_, d2_, d3_, d4_, f1_, f2_, f3_;
    nn::Tensor p1_, p2_, p3_, h1_, h2_, u_, s1_, s2_, s3_, a1_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Training and sampling primitives. Noise and step draws are counter-based
// so results are independent of evaluation order.
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t draw_step(std::uint64_t seed, std::uint64_t step, std::size_t i, std::size_t T) {
    return std::size_t(hash_counters(seed, 0x7421ULL + step, i) % T);
}

inline nn::Tensor draw_noise(std::uint64_t seed, std::uint64_t step, const nn::Shape& shape) {
    nn::Tensor eps(shape);
    for (std::size_t i = 0; i < eps.numel(); ++i)
        eps.v[i] = counter_normal(seed, 0xe9aULL + step, i);
    return eps;
}

}  // namespace detail

// Loss of one batch without touching gradients: the denoiser sees each
// element twice, once conditioned and once with the zero embedding, and the
// squared error to the true noise is averaged over both passes.
// Net needs: forward(z, t, cond, training, rng).
template <class Net>
double diffusion_batch_loss(Net& net, const nn::Tensor& x0, const nn::Tensor& cond,
                            const DiffusionSchedule& sched, std::uint64_t seed,
                            std::uint64_t step) {
    if (x0.shape.size() != 2 || x0.shape[0] == 0)
        throw ValidationError("diffusion: expected a non-empty [N, D] batch");
    const std::size_t n = x0.shape[0], d = x0.shape[1];
    std::vector<std::size_t> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = detail::draw_step(seed, step, i, sched.T);
    nn::Tensor eps = detail::draw_noise(seed, step, x0.shape);
    nn::Tensor z({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double g = sched.gamma[t[i]], si = sched.sigma[t[i]];
        for (std::size_t j = 0; j < d; ++j)
            z.v[i * d + j] = g * x0.v[i * d + j] + si * eps.v[i * d + j];
    }
    const nn::Tensor zero_cond({n, cond.shape[1]});
    Rng rng(hash_counters(seed, 0x10557ULL, step));
    double loss = 0;
    for (const nn::Tensor* c : {&cond, &zero_cond}) {
        nn::Tensor pred = net.forward(z, t, *c, false, rng);
        double s = 0;
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const double e = pred.v[i] - eps.v[i];
            s += e * e;
        }
        loss += s / double(n * d);
    }
    return loss / 2.0;
}

// Full training step: same draws as diffusion_batch_loss, plus gradients and
// an optimizer step. on_dcond receives the condition gradient [N, E] of the
// conditional pass (for the trainable embedding table). Returns the loss.
template <class Net>
double diffusion_train_step(Net& net, const nn::Tensor& x0, const nn::Tensor& cond,
                            const DiffusionSchedule& sched, nn::AdamW& opt,
                            const std::vector<nn::Parameter*>& all_params,
                            const std::function<void(const nn::Tensor&)>& on_dcond,
                            std::uint64_t seed, std::uint64_t step) {
    if (x0.shape.size() != 2 || x0.shape[0] == 0)
        throw ValidationError("diffusion: expected a non-empty [N, D] batch");
    const std::size_t n = x0.shape[0], d = x0.shape[1];
    std::vector<std::size_t> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = detail::draw_step(seed, step, i, sched.T);
    nn::Tensor eps = detail::draw_noise(seed, step, x0.shape);
    nn::Tensor z({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double g = sched.gamma[t[i]], si = sched.sigma[t[i]];
        for (std::size_t j = 0; j < d; ++j)
            z.v[i * d + j] = g * x0.v[i * d + j] + si * eps.v[i * d + j];
    }
    nn::Tensor zero_cond({n, cond.shape[1]});
    Rng rng(hash_counters(seed, 0x10557ULL, step));
    nn::zero_grads(all_params);
    double loss = 0;
    for (int pass = 0; pass < 2; ++pass) {
        const bool conditional = pass == 0;
        nn::Tensor pred = net.forward(z, t, conditional ? cond : zero_cond, true, rng);
        nn::Tensor dpred(pred.shape);
        double s = 0;
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const double e = pred.v[i] - eps.v[i];
            s += e * e;
            dpred.v[i] = e / double(n * d);  // d/dpred of (mse_cond + mse_uncond)/2
        }
        loss += s / double(n * d);
        auto [dz, dcond] = net.backward(dpred);
        (void)dz;
        if (conditional && on_dcond) on_dcond(dcond);
    }
    opt.step(all_params);
    return loss / 2.0;
}

// Decreasing step-index subsequence for the reverse process.
inline std::vector<std::size_t> sampling_steps(std::size_t T, std::size_t steps) {
    if (steps == 0 || steps > T) throw ValidationError("sample: steps must be in [1, T]");
    std::vector<std::size_t> out(steps);
    if (steps == 1) {
        out[0] = T - 1;
        return out;
    }
    for (std::size_t k = 0; k < steps; ++k)
        out[k] = ((T - 1) * (steps - 1 - k) + (steps - 1) / 2) / (steps - 1);
    return out;
}

// Ancestral reverse process with classifier-free guidance. Starts from
// standard normal noise, re-noises the x0 estimate to each next level with
// fresh noise, and returns the final estimate deterministically.
template <class Net>
nn::Tensor sample_latent(Net& net, const DiffusionSchedule& sched, const std::vector<double>& cond,
                         const std::vector<double>& uncond, double w, std::size_t steps,
                         std::uint64_t seed, std::size_t rows, std::size_t cols) {
    const std::size_t d = rows * cols;
    const std::vector<std::size_t> ts = sampling_steps(sched.T, steps);
    nn::Tensor z({1, d});
    for (std::size_t j = 0; j < d; ++j) z.v[j] = counter_normal(seed, 0x5a3ULL, 0, j);
    nn::Tensor cvec({1, cond.size()}), uvec({1, uncond.size()});
    cvec.v = cond;
    uvec.v = uncond;
    Rng rng(0);
    nn::Tensor xhat;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const std::size_t t = ts[k];
        const std::vector<std::size_t> tb{t};
        nn::Tensor eps_c = net.forward(z, tb, cvec, false, rng);
        nn::Tensor eps_u = net.forward(z, tb, uvec, false, rng);
        nn::Tensor eps = cfg_epsilon(eps_c, eps_u, w);
        xhat = predict_x0(z, eps, t, sched);
        if (k + 1 < ts.size()) {
            const std::size_t tn = ts[k + 1];
            const double g = sched.gamma[tn], si = sched.sigma[tn];
            for (std::size_t j = 0; j < d; ++j)
                z.v[j] = g * xhat.v[j] + si * counter_normal(seed, 0x5a3ULL, k + 1, j);
        }
    }
    return xhat.reshaped({rows, cols});
}

// ---------------------------------------------------------------------------
// Model wrapper: denoiser + schedule + embeddings + latent normalization.
// Latents are normalized (per-dimension mean, global RMS scale) before
// training; samples are denormalized on the way out.
// ---------------------------------------------------------------------------

struct DmTrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr = 1e-5;  // diffusion-training default; AE/classifier use 1e-4

    void validate() const {
        if (batch_size == 0) throw ValidationError("dm train: batch_size must be >= 1");
        if (!(lr > 0)) throw ValidationError("dm train: lr must be > 0");
    }
};

struct DmTrainReport {
    std::vector<double> epoch_loss;
};

class DiffusionModel {
  public:
    DiffusionModel(DmConfig cfg, EmbeddingProvider embed, std::uint64_t seed)
        : cfg_(cfg), sched_(make_schedule(cfg.steps, cfg.schedule)), net_(cfg, seed),
          embed_(std::move(embed)), norm_mean_(cfg.flat_dim(), 0.0) {
        cfg_.validate();
        if (embed_.dim() != cfg_.embed_dim)
            throw ValidationError("dm: embedding dim does not match config");
    }

    const DmConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    Denoiser& net() { return net_; }
    EmbeddingProvider& provider() { return embed_; }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> out = net_.params();
        out.push_back(&embed_.table());
        return out;
    }

    void set_normalization(std::vector<double> mean, double scale) {
        if (mean.size() != cfg_.flat_dim()) throw ValidationError("dm: bad normalization size");
        if (!(scale > 0)) throw ValidationError("dm: normalization scale must be > 0");
        norm_mean_ = std::move(mean);
        norm_scale_ = scale;
    }

    // [S, L] -> flattened normalized [D]
    std::vector<double> normalize(const nn::Tensor& seq) const {
        check_sequence(seq);
        std::vector<double> out(cfg_.flat_dim());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = (seq.v[i] - norm_mean_[i]) / norm_scale_;
        return out;
    }

    nn::Tensor denormalize(const nn::Tensor& flat) const {
        nn::Tensor out({cfg_.num_slices, cfg_.latent_dim});
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.v[i] = flat.v[i] * norm_scale_ + norm_mean_[i];
        return out;
    }

    // One optimizer step on a batch of raw latent sequences with their keys.
    double train_step(const std::vector<nn::Tensor>& seqs, const std::vector<std::string>& keys,
                      nn::AdamW& opt, std::uint64_t seed, std::uint64_t step) {
        if (seqs.empty() || seqs.size() != keys.size())
            throw ValidationError("dm train_step: batch is empty or keys mismatch");
        const std::size_t n = seqs.size(), d = cfg_.flat_dim(), e = cfg_.embed_dim;
        nn::Tensor x0({n, d}), cond({n, e});
        std::vector<std::size_t> rows(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> norm = normalize(seqs[i]);
            std::copy(norm.begin(), norm.end(), x0.v.begin() + i * d);
            rows[i] = embed_.row_of(keys[i]);
            std::copy(embed_.table().value.v.begin() + rows[i] * e,
                      embed_.table().value.v.begin() + (rows[i] + 1) * e, cond.v.begin() + i * e);
        }
        auto on_dcond = [&](const nn::Tensor& dcond) {
            if (embed_.table().frozen) return;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < e; ++j)
                    embed_.table().grad.v[rows[i] * e + j] += dcond.v[i * e + j];
        };
        return diffusion_train_step(net_, x0, cond, sched_, opt, params(), on_dcond, seed, step);
    }

    // Reverse process for one key; returns a denormalized [S, L] sequence.
    nn::Tensor sample(const std::string& key, double w, std::size_t steps, std::uint64_t seed) {
        nn::Tensor flat = sample_latent(net_, sched_, embed_.embed(key), embed_.unconditional(), w,
                                        steps, seed, 1, cfg_.flat_dim());
        return denormalize(flat);
    }

    void save(const std::string& path) {
        std::vector<nn::CheckpointRecord> extras;
        extras.push_back(nn::CheckpointRecord::scalar("meta.num_slices", double(cfg_.num_slices)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.latent_dim", double(cfg_.latent_dim)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.embed_dim", double(cfg_.embed_dim)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.time_dim", double(cfg_.time_dim)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.hidden1", double(cfg_.hidden1)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.hidden2", double(cfg_.hidden2)));
        extras.push_back(nn::CheckpointRecord::scalar("meta.steps", double(cfg_.steps)));
        extras.push_back(nn::CheckpointRecord::scalar(
            "meta.schedule", cfg_.schedule == ScheduleKind::linear ? 0.0 : 1.0));
        extras.push_back(nn::CheckpointRecord::scalar("meta.guidance", cfg_.guidance));
        nn::Tensor mean({cfg_.flat_dim()});
        mean.v = norm_mean_;
        extras.push_back(nn::CheckpointRecord::from_tensor("dm.norm.mean", mean));
        extras.push_back(nn::CheckpointRecord::scalar("dm.norm.scale", norm_scale_));
        nn::save_params(path, params(), extras);
        embed_.save(path + ".evem");
    }

    static DiffusionModel load(const std::string& path) {
        auto records = nn::read_checkpoint(path);
        auto meta = [&](const char* name) {
            auto it = records.find(std::string("meta.") + name);
            if (it == records.end())
                throw FormatError(std::string("dm checkpoint missing meta.") + name);
            return double(it->second.values.at(0));
        };
        DmConfig cfg;
        cfg.num_slices = std::size_t(meta("num_slices"));
        cfg.latent_dim = std::size_t(meta("latent_dim"));
        cfg.embed_dim = std::size_t(meta("embed_dim"));
        cfg.time_dim = std::size_t(meta("time_dim"));
        cfg.hidden1 = std::size_t(meta("hidden1"));
        cfg.hidden2 = std::size_t(meta("hidden2"));
        cfg.steps = std::size_t(meta("steps"));
        cfg.schedule = meta("schedule") == 0.0 ? ScheduleKind::linear : ScheduleKind::cosine;
        cfg.guidance = meta("guidance");
        EmbeddingProvider embed = EmbeddingProvider::from_file(path + ".evem");
        DiffusionModel model(cfg, std::move(embed), 0);
        nn::load_params(records, model.params());
        auto mit = records.find("dm.norm.mean");
        auto sit = records.find("dm.norm.scale");
        if (mit == records.end() || sit == records.end())
            throw FormatError("dm checkpoint missing normalization records");
        model.norm_mean_.assign(mit->second.values.begin(), mit->second.values.end());
        model.norm_scale_ = double(sit->second.values.at(0));
        return model;
    }

  private:
    void check_sequence(const nn::Tensor& seq) const {
        if (seq.shape != nn::Shape{cfg_.num_slices, cfg_.latent_dim})
            throw ValidationError("dm: expected a [" + std::to_string(cfg_.num_slices) + ", " +
                                  std::to_string(cfg_.latent_dim) + "] latent sequence, got " +
                                  nn::shape_str(seq.shape));
    }

    DmConfig cfg_;
    DiffusionSchedule sched_;
    Denoiser net_;
    EmbeddingProvider embed_;
    std::vector<double> norm_mean_;
    double norm_scale_ = 1.0;
};

// Normalization statistics from a set of sequences: per-dimension mean and a
// single RMS scale of the centered data (floored to keep division safe).
inline std::pair<std::vector<double>, double> latent_normalization(
    const std::vector<nn::Tensor>& seqs) {
    if (seqs.empty()) throw ValidationError("dm: no sequences to normalize");
    const std::size_t d = seqs[0].numel();
    std::vector<double> mean(d, 0.0);
    for (const nn::Tensor& s : seqs) {
        if (s.numel() != d) throw ValidationError("dm: sequences disagree on size");
        for (std::size_t i = 0; i < d; ++i) mean[i] += s.v[i];
    }
    for (double& m : mean) m /= double(seqs.size());
    double ss = 0;
    for (const nn::Tensor& s : seqs)
        for (std::size_t i = 0; i < d; ++i) {
            const double c = s.v[i] - mean[i];
            ss += c * c;
        }
    const double scale = std::max(std::sqrt(ss / double(seqs.size() * d)), 1e-8);
    return {std::move(mean), scale};
}

inline DmTrainReport train_dm(DiffusionModel& model, const std::vector<nn::Tensor>& seqs,
                              const std::vector<std::string>& keys, const DmTrainConfig& cfg,
                              std::uint64_t seed) {
    cfg.validate();
    if (seqs.empty() || seqs.size() != keys.size())
        throw ValidationError("dm train: empty dataset or key mismatch");
    auto [mean, scale] = latent_normalization(seqs);
    model.set_normalization(std::move(mean), scale);

    nn::AdamW opt;
    opt.config().lr = cfg.lr;
    Rng rng(hash_counters(seed, 0xd8a1ULL));
    std::vector<std::size_t> idx(seqs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    DmTrainReport report;
    std::uint64_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        double loss_sum = 0;
        std::size_t count = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += cfg.batch_size) {
            const std::size_t hi = std::min(idx.size(), lo + cfg.batch_size);
            std::vector<nn::Tensor> batch;
            std::vector<std::string> bkeys;
            for (std::size_t i = lo; i < hi; ++i) {
                batch.push_back(seqs[idx[i]]);
                bkeys.push_back(keys[idx[i]]);
            }
            loss_sum += model.train_step(batch, bkeys, opt, seed, step++) * double(hi - lo);
            count += hi - lo;
        }
        report.epoch_loss.push_back(loss_sum / double(count));
    }
    return report;
}

}  // namespace evgen
