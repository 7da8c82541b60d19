// Minimal differentiable-kernel engine: the layer set used by the models in
// this repository, reverse-mode gradients via per-layer cached activations,
// the AdamW optimizer and finite-difference gradient checking.
//
// Conventions: every tensor carries a leading batch dimension. Dense layers
// take [N, in], spatial layers [N, C, H, W]. A layer caches what it needs
// during forward; backward consumes that cache (and invalidates it),
// accumulates parameter gradients, and returns the input gradient. Gradients
// never flow into frozen parameters, but do flow through them.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/rng.hpp"
#include "evgen/tensor.hpp"

namespace evgen::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;

    explicit Parameter(std::string n, Shape s) : name(std::move(n)), value(s), grad(std::move(s)) {}

    void zero_grad() { grad.fill(0.0); }
};

inline void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

inline void set_frozen(const std::vector<Parameter*>& params, bool frozen) {
    for (Parameter* p : params) p->frozen = frozen;
}

inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / double(fan_in + fan_out));
}

// ---------------------------------------------------------------------------
// Layer base
// ---------------------------------------------------------------------------

class Layer {
  public:
    virtual ~Layer() = default;

    virtual const char* kind() const = 0;
    virtual Tensor forward(const Tensor& x, bool training, Rng& rng) = 0;
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual std::vector<Parameter*> params() { return {}; }

  protected:
    void require_cache(bool have) const {
        if (!have) throw UsageError(std::string(kind()) + ": backward without a matching forward");
    }
};

using LayerPtr = std::shared_ptr<Layer>;

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

class Dense : public Layer {
  public:
    Dense(std::string name, std::size_t in, std::size_t out, Rng& rng)
        : in_(in), out_(out), w_(name + ".w", {out, in}), b_(name + ".b", {out}) {
        const double s = glorot_limit(in, out);
        for (double& v : w_.value.v) v = rng.uniform(-s, s);
    }

    const char* kind() const override { return "dense"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        if (x.shape.size() != 2 || x.shape[1] != in_)
            throw ValidationError("dense: input " + shape_str(x.shape) + ", expected [N x " +
                                  std::to_string(in_) + "]");
        const std::size_t n = x.shape[0];
        Tensor y({n, out_});
        parallel_for(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                const double* xin = &x.v[i * in_];
                double* yout = &y.v[i * out_];
                for (std::size_t o = 0; o < out_; ++o) {
                    const double* wr = &w_.value.v[o * in_];
                    double acc = b_.value.v[o];
                    for (std::size_t k = 0; k < in_; ++k) acc += wr[k] * xin[k];
                    yout[o] = acc;
                }
            }
        });
        x_ = x;
        have_cache_ = true;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        const std::size_t n = x_.shape[0];
        if (dy.shape != Shape{n, out_}) throw ValidationError("dense: bad output gradient shape");
        Tensor dx({n, in_});
        parallel_for(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                double* dxr = &dx.v[i * in_];
                const double* dyr = &dy.v[i * out_];
                for (std::size_t o = 0; o < out_; ++o) {
                    const double g = dyr[o];
                    const double* wr = &w_.value.v[o * in_];
                    for (std::size_t k = 0; k < in_; ++k) dxr[k] += g * wr[k];
                }
            }
        });
        if (!w_.frozen) {
            parallel_for(out_, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t o = lo; o < hi; ++o) {
                    double* dwr = &w_.grad.v[o * in_];
                    for (std::size_t i = 0; i < n; ++i) {
                        const double g = dy.v[i * out_ + o];
                        const double* xr = &x_.v[i * in_];
                        for (std::size_t k = 0; k < in_; ++k) dwr[k] += g * xr[k];
                    }
                }
            });
        }
        if (!b_.frozen) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < out_; ++o) b_.grad.v[o] += dy.v[i * out_ + o];
        }
        return dx;
    }

    std::vector<Parameter*> params() override { return {&w_, &b_}; }

  private:
    std::size_t in_, out_;
    Parameter w_, b_;
    Tensor x_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Conv2d: odd kernel, stride 1, zero padding preserving the spatial size.
// ---------------------------------------------------------------------------

class Conv2d : public Layer {
  public:
    Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, Rng& rng, std::size_t k = 3)
        : ci_(in_ch), co_(out_ch), k_(k), w_(name + ".w", {out_ch, in_ch, k, k}),
          b_(name + ".b", {out_ch}) {
        if (k % 2 == 0) throw ValidationError("conv2d: kernel size must be odd");
        const double s = glorot_limit(in_ch * k * k, out_ch * k * k);
        for (double& v : w_.value.v) v = rng.uniform(-s, s);
    }

    const char* kind() const override { return "conv2d"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        check_input(x);
        const std::size_t n = x.shape[0], h = x.shape[2], w = x.shape[3];
        const long pad = long(k_ / 2);
        Tensor y({n, co_, h, w});
        parallel_for(n * co_, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t job = lo; job < hi; ++job) {
                const std::size_t i = job / co_, oc = job % co_;
                double* yp = &y.v[((i * co_ + oc) * h) * w];
                const double bias = b_.value.v[oc];
                for (std::size_t q = 0; q < h * w; ++q) yp[q] = bias;
                for (std::size_t ic = 0; ic < ci_; ++ic) {
                    const double* xp = &x.v[((i * ci_ + ic) * h) * w];
                    for (std::size_t ky = 0; ky < k_; ++ky)
                        for (std::size_t kx = 0; kx < k_; ++kx) {
                            const double wv = w_.value.v[(((oc * ci_ + ic) * k_) + ky) * k_ + kx];
                            const long dy0 = long(ky) - pad, dx0 = long(kx) - pad;
                            const long y0 = std::max(0l, -dy0), y1 = long(h) - std::max(0l, dy0);
                            const long x0 = std::max(0l, -dx0), x1 = long(w) - std::max(0l, dx0);
                            for (long yy = y0; yy < y1; ++yy) {
                                double* yrow = yp + yy * long(w);
                                const double* xrow = xp + (yy + dy0) * long(w) + dx0;
                                for (long xx = x0; xx < x1; ++xx) yrow[xx] += wv * xrow[xx];
                            }
                        }
                }
            }
        });
        x_ = x;
        have_cache_ = true;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        const std::size_t n = x_.shape[0], h = x_.shape[2], w = x_.shape[3];
        if (dy.shape != Shape{n, co_, h, w}) throw ValidationError("conv2d: bad output gradient shape");
        const long pad = long(k_ / 2);
        Tensor dx({n, ci_, h, w});

        parallel_for(n * ci_, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t job = lo; job < hi; ++job) {
                const std::size_t i = job / ci_, ic = job % ci_;
                double* dxp = &dx.v[((i * ci_ + ic) * h) * w];
                for (std::size_t oc = 0; oc < co_; ++oc) {
                    const double* dyp = &dy.v[((i * co_ + oc) * h) * w];
                    for (std::size_t ky = 0; ky < k_; ++ky)
                        for (std::size_t kx = 0; kx < k_; ++kx) {
                            const double wv = w_.value.v[(((oc * ci_ + ic) * k_) + ky) * k_ + kx];
                            const long dy0 = long(ky) - pad, dx0 = long(kx) - pad;
                            // x index receives from output index shifted by -d
                            const long y0 = std::max(0l, dy0), y1 = long(h) + std::min(0l, dy0);
                            const long x0 = std::max(0l, dx0), x1 = long(w) + std::min(0l, dx0);
                            for (long yy = y0; yy < y1; ++yy) {
                                double* dxrow = dxp + yy * long(w);
                                const double* dyrow = dyp + (yy - dy0) * long(w) - dx0;
                                for (long xx = x0; xx < x1; ++xx) dxrow[xx] += wv * dyrow[xx];
                            }
                        }
                }
            }
        });

        if (!w_.frozen) {
            parallel_for(co_, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t oc = lo; oc < hi; ++oc)
                    for (std::size_t ic = 0; ic < ci_; ++ic)
                        for (std::size_t ky = 0; ky < k_; ++ky)
                            for (std::size_t kx = 0; kx < k_; ++kx) {
                                const long dy0 = long(ky) - pad, dx0 = long(kx) - pad;
                                const long y0 = std::max(0l, -dy0), y1 = long(h) - std::max(0l, dy0);
                                const long x0 = std::max(0l, -dx0), x1 = long(w) - std::max(0l, dx0);
                                double acc = 0;
                                for (std::size_t i = 0; i < n; ++i) {
                                    const double* dyp = &dy.v[((i * co_ + oc) * h) * w];
                                    const double* xp = &x_.v[((i * ci_ + ic) * h) * w];
                                    for (long yy = y0; yy < y1; ++yy) {
                                        const double* dyrow = dyp + yy * long(w);
                                        const double* xrow = xp + (yy + dy0) * long(w) + dx0;
                                        for (long xx = x0; xx < x1; ++xx) acc += dyrow[xx] * xrow[xx];
                                    }
                                }
                                w_.grad.v[(((oc * ci_ + ic) * k_) + ky) * k_ + kx] += acc;
                            }
            });
        }
        if (!b_.frozen) {
            for (std::size_t oc = 0; oc < co_; ++oc) {
                double acc = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* dyp = &dy.v[((i * co_ + oc) * h) * w];
                    for (std::size_t q = 0; q < h * w; ++q) acc += dyp[q];
                }
                b_.grad.v[oc] += acc;
            }
        }
        return dx;
    }

    std::vector<Parameter*> params() override { return {&w_, &b_}; }

    Parameter& weight() { return w_; }
    Parameter& bias() { return b_; }

  private:
    void check_input(const Tensor& x) const {
        if (x.shape.size() != 4 || x.shape[1] != ci_)
            throw ValidationError("conv2d: input " + shape_str(x.shape) + ", expected [N x " +
                                  std::to_string(ci_) + " x H x W]");
    }

    std::size_t ci_, co_, k_;
    Parameter w_, b_;
    Tensor x_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// MaxPool2: 2x2, stride 2. Ties resolve to the first maximum in scan order.
// ---------------------------------------------------------------------------

class MaxPool2 : public Layer {
  public:
    const char* kind() const override { return "maxpool2"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        if (x.shape.size() != 4) throw ValidationError("maxpool2: input must be [N x C x H x W]");
        const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        if (h % 2 || w % 2) throw ValidationError("maxpool2: spatial dims must be even");
        in_shape_ = x.shape;
        Tensor y({n, c, h / 2, w / 2});
        argmax_.assign(y.numel(), 0);
        for (std::size_t ncc = 0; ncc < n * c; ++ncc) {
            const double* xp = &x.v[ncc * h * w];
            double* yp = &y.v[ncc * (h / 2) * (w / 2)];
            std::size_t* ap = &argmax_[ncc * (h / 2) * (w / 2)];
            for (std::size_t oy = 0; oy < h / 2; ++oy)
                for (std::size_t ox = 0; ox < w / 2; ++ox) {
                    std::size_t best = (2 * oy) * w + 2 * ox;
                    double bv = xp[best];
                    const std::size_t cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                                 (2 * oy + 1) * w + 2 * ox + 1};
                    for (std::size_t q : cand)
                        if (xp[q] > bv) {
                            bv = xp[q];
                            best = q;
                        }
                    yp[oy * (w / 2) + ox] = bv;
                    ap[oy * (w / 2) + ox] = ncc * h * w + best;
                }
        }
        have_cache_ = true;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        if (dy.numel() != argmax_.size()) throw ValidationError("maxpool2: bad output gradient shape");
        Tensor dx(in_shape_);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx.v[argmax_[i]] += dy.v[i];
        return dx;
    }

  private:
    Shape in_shape_;
    std::vector<std::size_t> argmax_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Upsample2: nearest-neighbour x2.
// ---------------------------------------------------------------------------

class Upsample2 : public Layer {
  public:
    const char* kind() const override { return "upsample2"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        if (x.shape.size() != 4) throw ValidationError("upsample2: input must be [N x C x H x W]");
        const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        in_shape_ = x.shape;
        Tensor y({n, c, 2 * h, 2 * w});
        for (std::size_t ncc = 0; ncc < n * c; ++ncc) {
            const double* xp = &x.v[ncc * h * w];
            double* yp = &y.v[ncc * 4 * h * w];
            for (std::size_t iy = 0; iy < h; ++iy)
                for (std::size_t ix = 0; ix < w; ++ix) {
                    const double v = xp[iy * w + ix];
                    double* r0 = yp + (2 * iy) * (2 * w) + 2 * ix;
                    double* r1 = r0 + 2 * w;
                    r0[0] = r0[1] = r1[0] = r1[1] = v;
                }
        }
        have_cache_ = true;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        const std::size_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
        if (dy.shape != Shape{n, c, 2 * h, 2 * w})
            throw ValidationError("upsample2: bad output gradient shape");
        Tensor dx(in_shape_);
        for (std::size_t ncc = 0; ncc < n * c; ++ncc) {
            double* dxp = &dx.v[ncc * h * w];
            const double* dyp = &dy.v[ncc * 4 * h * w];
            for (std::size_t iy = 0; iy < h; ++iy)
                for (std::size_t ix = 0; ix < w; ++ix) {
                    const double* r0 = dyp + (2 * iy) * (2 * w) + 2 * ix;
                    const double* r1 = r0 + 2 * w;
                    dxp[iy * w + ix] += r0[0] + r0[1] + r1[0] + r1[1];
                }
        }
        return dx;
    }

  private:
    Shape in_shape_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Flatten / Unflatten
// ---------------------------------------------------------------------------

class Flatten : public Layer {
  public:
    const char* kind() const override { return "flatten"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        if (x.shape.empty()) throw ValidationError("flatten: scalar input");
        in_shape_ = x.shape;
        have_cache_ = true;
        return x.reshaped({x.shape[0], x.numel() / x.shape[0]});
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        return dy.reshaped(in_shape_);
    }

  private:
    Shape in_shape_;
    bool have_cache_ = false;
};

class Unflatten : public Layer {
  public:
    Unflatten(std::size_t c, std::size_t h, std::size_t w) : c_(c), h_(h), w_(w) {}

    const char* kind() const override { return "unflatten"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        if (x.shape.size() != 2 || x.shape[1] != c_ * h_ * w_)
            throw ValidationError("unflatten: input " + shape_str(x.shape) + ", expected [N x " +
                                  std::to_string(c_ * h_ * w_) + "]");
        have_cache_ = true;
        return x.reshaped({x.shape[0], c_, h_, w_});
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        return dy.reshaped({dy.shape[0], c_ * h_ * w_});
    }

  private:
    std::size_t c_, h_, w_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

// Exact Gaussian-CDF form: gelu(x) = x * Phi(x).
inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
    return cdf + x * pdf;
}

class Gelu : public Layer {
  public:
    const char* kind() const override { return "gelu"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        x_ = x;
        have_cache_ = true;
        Tensor y = x;
        for (double& v : y.v) v = gelu_value(v);
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        if (!dy.same_shape(x_)) throw ValidationError("gelu: bad output gradient shape");
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.numel(); ++i) dx.v[i] *= gelu_derivative(x_.v[i]);
        return dx;
    }

  private:
    Tensor x_;
    bool have_cache_ = false;
};

class Sigmoid : public Layer {
  public:
    const char* kind() const override { return "sigmoid"; }

    Tensor forward(const Tensor& x, bool, Rng&) override {
        Tensor y = x;
        for (double& v : y.v) v = 1.0 / (1.0 + std::exp(-v));
        y_ = y;
        have_cache_ = true;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        if (!dy.same_shape(y_)) throw ValidationError("sigmoid: bad output gradient shape");
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.numel(); ++i) dx.v[i] *= y_.v[i] * (1.0 - y_.v[i]);
        return dx;
    }

  private:
    Tensor y_;
    bool have_cache_ = false;
};

// Inverted dropout: active only in training mode.
class Dropout : public Layer {
  public:
    explicit Dropout(double p) : p_(p) {
        if (p < 0.0 || p > 1.0) throw ValidationError("dropout: p must be in [0,1]");
    }

    const char* kind() const override { return "dropout"; }

    Tensor forward(const Tensor& x, bool training, Rng& rng) override {
        have_cache_ = true;
        if (!training || p_ == 0.0) {
            mask_.clear();
            shape_ = x.shape;
            return x;
        }
        shape_ = x.shape;
        mask_.resize(x.numel());
        Tensor y = x;
        const double scale = p_ >= 1.0 ? 0.0 : 1.0 / (1.0 - p_);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            mask_[i] = rng.uniform() >= p_ ? scale : 0.0;
            y.v[i] *= mask_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        require_cache(have_cache_);
        have_cache_ = false;
        if (dy.shape != shape_) throw ValidationError("dropout: bad output gradient shape");
        if (mask_.empty()) return dy;
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.numel(); ++i) dx.v[i] *= mask_[i];
        return dx;
    }

  private:
    double p_;
    Shape shape_;
    std::vector<double> mask_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Sequential composition
// ---------------------------------------------------------------------------

class Sequential : public Layer {
  public:
    Sequential() = default;
    explicit Sequential(std::vector<LayerPtr> layers) : layers_(std::move(layers)) {}

    void append(LayerPtr l) { layers_.push_back(std::move(l)); }

    const char* kind() const override { return "sequential"; }

    Tensor forward(const Tensor& x, bool training, Rng& rng) override {
        Tensor h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            try {
                h = layers_[i]->forward(h, training, rng);
            } catch (const ValidationError& e) {
                throw ValidationError("layer " + std::to_string(i) + " (" + layers_[i]->kind() +
                                      "): " + e.what());
            }
        }
        return h;
    }

    Tensor backward(const Tensor& dy) override {
        Tensor g = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
        return g;
    }

    std::vector<Parameter*> params() override {
        std::vector<Parameter*> out;
        for (auto& l : layers_)
            for (Parameter* p : l->params()) out.push_back(p);
        return out;
    }

    std::size_t size() const { return layers_.size(); }
    Layer& at(std::size_t i) { return *layers_[i]; }
    const std::vector<LayerPtr>& layers() const { return layers_; }

  private:
    std::vector<LayerPtr> layers_;
};

// ---------------------------------------------------------------------------
// Layer specification (used by the grad-check tool and tests)
// ---------------------------------------------------------------------------

enum class LayerKind { dense, conv2d, maxpool2, upsample2, flatten, unflatten, gelu, sigmoid, dropout };

struct LayerSpec {
    LayerKind kind;
    std::size_t in = 0, out = 0;         // dense / conv2d channel sizes
    std::size_t c = 0, h = 0, w = 0;     // unflatten target
    std::size_t kernel = 3;              // conv2d
    double p = 0.1;                      // dropout
};

inline LayerPtr make_layer(const LayerSpec& s, const std::string& name, Rng& rng) {
    switch (s.kind) {
        case LayerKind::dense: return std::make_shared<Dense>(name, s.in, s.out, rng);
        case LayerKind::conv2d: return std::make_shared<Conv2d>(name, s.in, s.out, rng, s.kernel);
        case LayerKind::maxpool2: return std::make_shared<MaxPool2>();
        case LayerKind::upsample2: return std::make_shared<Upsample2>();
        case LayerKind::flatten: return std::make_shared<Flatten>();
        case LayerKind::unflatten: return std::make_shared<Unflatten>(s.c, s.h, s.w);
        case LayerKind::gelu: return std::make_shared<Gelu>();
        case LayerKind::sigmoid: return std::make_shared<Sigmoid>();
        case LayerKind::dropout: return std::make_shared<Dropout>(s.p);
    }
    throw ValidationError("unknown layer kind");
}

inline Sequential build_sequential(const std::vector<LayerSpec>& specs, std::uint64_t seed,
                                   const std::string& prefix = "net") {
    Rng rng(seed);
    Sequential seq;
    for (std::size_t i = 0; i < specs.size(); ++i)
        seq.append(make_layer(specs[i], prefix + "." + std::to_string(i), rng));
    return seq;
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay). Frozen parameters are skipped entirely.
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Parameter*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (Parameter* p : params) {
            if (p->frozen) continue;
            State& st = state(p);
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad.v[i];
                st.m.v[i] = cfg_.beta1 * st.m.v[i] + (1.0 - cfg_.beta1) * g;
                st.vv.v[i] = cfg_.beta2 * st.vv.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = st.m.v[i] / bc1;
                const double vhat = st.vv.v[i] / bc2;
                p->value.v[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                            cfg_.weight_decay * p->value.v[i]);
            }
        }
    }

    AdamWConfig& config() { return cfg_; }
    std::int64_t steps_taken() const { return t_; }

    // exposed for checkpointing
    struct State {
        Tensor m, vv;
    };
    const std::vector<std::pair<std::string, const State*>> named_states() const {
        std::vector<std::pair<std::string, const State*>> out;
        for (const auto& [name, st] : by_name_) out.emplace_back(name, &st);
        return out;
    }
    void restore_state(const std::string& name, Tensor m, Tensor vv) {
        by_name_[name] = State{std::move(m), std::move(vv)};
    }
    void set_steps_taken(std::int64_t t) { t_ = t; }

  private:
    State& state(Parameter* p) {
        auto it = by_name_.find(p->name);
        if (it == by_name_.end()) {
            State st{Tensor(p->value.shape), Tensor(p->value.shape)};
            it = by_name_.emplace(p->name, std::move(st)).first;
        }
        return it->second;
    }

    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, State> by_name_;
};

// ---------------------------------------------------------------------------
// Cross entropy over logits (softmax folded in), mean over the batch.
// ---------------------------------------------------------------------------

inline std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits,
                                                       const std::vector<std::size_t>& labels) {
    if (logits.shape.size() != 2 || logits.shape[0] != labels.size())
        throw ValidationError("softmax_cross_entropy: logits/labels mismatch");
    const std::size_t n = logits.shape[0], k = logits.shape[1];
    Tensor dlogits({n, k});
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = &logits.v[i * k];
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        loss += logz - row[labels[i]];
        for (std::size_t j = 0; j < k; ++j)
            dlogits.v[i * k + j] = (std::exp(row[j] - logz) - (j == labels[i] ? 1.0 : 0.0)) / double(n);
    }
    return {loss / double(n), dlogits};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check. The dropout mask (if any) is pinned by
// reseeding the same Rng before every forward evaluation.
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool all_below(double tol) const { return max_rel_err < tol; }
};

inline GradCheckReport grad_check(Layer& net, const Tensor& input, double fd_eps = 1e-4,
                                  std::uint64_t seed = 7, bool training = true) {
    // scalar objective: sum of outputs weighted by a fixed random projection
    Rng proj_rng(seed ^ 0xabcdef);
    auto objective = [&](const Tensor& x) {
        Rng rng(seed);  // identical dropout masks on every evaluation
        Tensor y = net.forward(x, training, rng);
        double s = 0;
        std::uint64_t st = seed ^ 0x77;
        for (std::size_t i = 0; i < y.numel(); ++i)
            s += y.v[i] * (u64_to_unit(hash_counters(st, i)) - 0.5);
        return s;
    };

    // analytic pass
    std::vector<Parameter*> params = net.params();
    zero_grads(params);
    Rng rng(seed);
    Tensor y = net.forward(input, training, rng);
    Tensor dy(y.shape);
    std::uint64_t st = seed ^ 0x77;
    for (std::size_t i = 0; i < y.numel(); ++i) dy.v[i] = u64_to_unit(hash_counters(st, i)) - 0.5;
    Tensor dx = net.backward(dy);

    GradCheckReport report;
    auto check_buffer = [&](const std::string& name, std::vector<double>& buf,
                            const std::vector<double>& analytic, const Tensor& x) {
        GradCheckEntry entry{name, 0.0};
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const double keep = buf[i];
            buf[i] = keep + fd_eps;
            const double lp = objective(x);
            buf[i] = keep - fd_eps;
            const double lm = objective(x);
            buf[i] = keep;
            const double numeric = (lp - lm) / (2.0 * fd_eps);
            const double rel = std::abs(analytic[i] - numeric) /
                               std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(entry);
    };

    Tensor x = input;
    for (Parameter* p : params)
        if (!p->frozen) check_buffer(p->name, p->value.v, p->grad.v, x);
    check_buffer("input", x.v, dx.v, x);
    return report;
}

}  // namespace evgen::nn
