// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Minimal feed-forward layers with backpropagation, templated on the scalar
// type: float for training speed, double for finite-difference gradient
// checks. Layout is row-major batches; 1-D feature maps are stored
// [channel][position] per row.

#ifndef SIDELAB_NN_HPP
#define SIDELAB_NN_HPP

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "sidelab/rng.hpp"
#include "sidelab/util.hpp"

namespace sidelab::nn {

template <class T> struct Batch {
    std::size_t rows = 0, cols = 0;
    std::vector<T> v;

    void resize(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        v.assign(r * c, T(0));
    }
    T *row(std::size_t r) { return v.data() + r * cols; }
    const T *row(std::size_t r) const { return v.data() + r * cols; }
};

template <class T> class Layer {
  public:
    virtual ~Layer() = default;
    /// Pure computation; safe to call concurrently on a shared layer.
    virtual void infer(const Batch<T> &in, Batch<T> &out) const = 0;
    /// infer plus the activation caching backward() needs; not thread-safe.
    virtual void forward(const Batch<T> &in, Batch<T> &out) = 0;
    /// Consumes the gradient w.r.t. the output, accumulates parameter
    /// gradients, and produces the gradient w.r.t. the input. Uses the
    /// input cached by the preceding forward call.
    virtual void backward(const Batch<T> &grad_out, Batch<T> &grad_in) = 0;
    virtual std::span<T> params() { return {}; }
    virtual std::span<T> grads() { return {}; }
    virtual std::size_t output_cols(std::size_t input_cols) const = 0;
};

template <class T> class Dense : public Layer<T> {
  public:
    Dense(std::size_t in, std::size_t out, Rng &rng) : in_(in), out_(out) {
        w_.resize(in * out + out);
        g_.assign(w_.size(), T(0));
        // Glorot-style uniform init scaled by fan-in/fan-out.
        double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        for (std::size_t i = 0; i < in * out; ++i)
            w_[i] = static_cast<T>(rng.uniform(-limit, limit));
        for (std::size_t i = in * out; i < w_.size(); ++i)
            w_[i] = T(0);
    }

    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out.resize(in.rows, out_);
        const T *bias = w_.data() + in_ * out_;
        for (std::size_t r = 0; r < in.rows; ++r) {
            const T *x = in.row(r);
            T *y = out.row(r);
            for (std::size_t o = 0; o < out_; ++o) {
                const T *wrow = w_.data() + o * in_;
                T acc = bias[o];
                for (std::size_t i = 0; i < in_; ++i)
                    acc += wrow[i] * x[i];
                y[o] = acc;
            }
        }
    }

    void forward(const Batch<T> &in, Batch<T> &out) override {
        input_ = in;
        infer(in, out);
    }

    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in.resize(input_.rows, in_);
        T *gw = g_.data();
        T *gb = g_.data() + in_ * out_;
        for (std::size_t r = 0; r < input_.rows; ++r) {
            const T *x = input_.row(r);
            const T *gy = grad_out.row(r);
            T *gx = grad_in.row(r);
            for (std::size_t o = 0; o < out_; ++o) {
                T g = gy[o];
                gb[o] += g;
                const T *wrow = w_.data() + o * in_;
                T *gwrow = gw + o * in_;
                for (std::size_t i = 0; i < in_; ++i) {
                    gwrow[i] += g * x[i];
                    gx[i] += g * wrow[i];
                }
            }
        }
    }

    std::span<T> params() override { return w_; }
    std::span<T> grads() override { return g_; }
    std::size_t output_cols(std::size_t) const override { return out_; }

  private:
    std::size_t in_, out_;
    std::vector<T> w_, g_;
    Batch<T> input_;
};

template <class T> class ReLU : public Layer<T> {
  public:
    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out = in;
        for (auto &v : out.v)
            v = v > T(0) ? v : T(0);
    }
    void forward(const Batch<T> &in, Batch<T> &out) override {
        input_ = in;
        infer(in, out);
    }
    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in = grad_out;
        for (std::size_t i = 0; i < grad_in.v.size(); ++i)
            if (input_.v[i] <= T(0))
                grad_in.v[i] = T(0);
    }
    std::size_t output_cols(std::size_t c) const override { return c; }

  private:
    Batch<T> input_;
};

template <class T> class Sigmoid : public Layer<T> {
  public:
    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out = in;
        for (auto &v : out.v)
            v = T(1) / (T(1) + std::exp(-v));
    }
    void forward(const Batch<T> &in, Batch<T> &out) override {
        infer(in, out);
        output_ = out;
    }
    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in = grad_out;
        for (std::size_t i = 0; i < grad_in.v.size(); ++i)
            grad_in.v[i] *= output_.v[i] * (T(1) - output_.v[i]);
    }
    std::size_t output_cols(std::size_t c) const override { return c; }

  private:
    Batch<T> output_;
};

template <class T> class Tanh : public Layer<T> {
  public:
    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out = in;
        for (auto &v : out.v)
            v = std::tanh(v);
    }
    void forward(const Batch<T> &in, Batch<T> &out) override {
        infer(in, out);
        output_ = out;
    }
    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in = grad_out;
        for (std::size_t i = 0; i < grad_in.v.size(); ++i)
            grad_in.v[i] *= T(1) - output_.v[i] * output_.v[i];
    }
    std::size_t output_cols(std::size_t c) const override { return c; }

  private:
    Batch<T> output_;
};

/// Valid (no padding) 1-D convolution over [channels_in][length] rows.
template <class T> class Conv1d : public Layer<T> {
  public:
    Conv1d(std::size_t channels_in, std::size_t channels_out, std::size_t kernel, std::size_t input_length,
           Rng &rng)
        : cin_(channels_in), cout_(channels_out), k_(kernel), len_(input_length) {
        if (kernel < 1 || kernel > input_length)
            throw Error("conv kernel must be in [1, feature length]");
        out_len_ = input_length - kernel + 1;
        w_.resize(cout_ * cin_ * k_ + cout_);
        g_.assign(w_.size(), T(0));
        double limit = std::sqrt(6.0 / static_cast<double>(cin_ * k_ + cout_ * k_));
        for (std::size_t i = 0; i < cout_ * cin_ * k_; ++i)
            w_[i] = static_cast<T>(rng.uniform(-limit, limit));
        for (std::size_t i = cout_ * cin_ * k_; i < w_.size(); ++i)
            w_[i] = T(0);
    }

    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out.resize(in.rows, cout_ * out_len_);
        const T *bias = w_.data() + cout_ * cin_ * k_;
        for (std::size_t r = 0; r < in.rows; ++r) {
            const T *x = in.row(r);
            T *y = out.row(r);
            for (std::size_t oc = 0; oc < cout_; ++oc) {
                T *yc = y + oc * out_len_;
                for (std::size_t p = 0; p < out_len_; ++p)
                    yc[p] = bias[oc];
                for (std::size_t ic = 0; ic < cin_; ++ic) {
                    const T *xc = x + ic * len_;
                    const T *wrow = w_.data() + (oc * cin_ + ic) * k_;
                    for (std::size_t j = 0; j < k_; ++j) {
                        T wj = wrow[j];
                        const T *xs = xc + j;
                        for (std::size_t p = 0; p < out_len_; ++p)
                            yc[p] += wj * xs[p];
                    }
                }
            }
        }
    }

    void forward(const Batch<T> &in, Batch<T> &out) override {
        input_ = in;
        infer(in, out);
    }

    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in.resize(input_.rows, cin_ * len_);
        T *gw = g_.data();
        T *gb = g_.data() + cout_ * cin_ * k_;
        for (std::size_t r = 0; r < input_.rows; ++r) {
            const T *x = input_.row(r);
            const T *gy = grad_out.row(r);
            T *gx = grad_in.row(r);
            for (std::size_t oc = 0; oc < cout_; ++oc) {
                const T *gyc = gy + oc * out_len_;
                for (std::size_t p = 0; p < out_len_; ++p)
                    gb[oc] += gyc[p];
                for (std::size_t ic = 0; ic < cin_; ++ic) {
                    const T *xc = x + ic * len_;
                    T *gxc = gx + ic * len_;
                    const T *wrow = w_.data() + (oc * cin_ + ic) * k_;
                    T *gwrow = gw + (oc * cin_ + ic) * k_;
                    for (std::size_t j = 0; j < k_; ++j) {
                        T acc = T(0);
                        const T *xs = xc + j;
                        T *gxs = gxc + j;
                        T wj = wrow[j];
                        for (std::size_t p = 0; p < out_len_; ++p) {
                            acc += gyc[p] * xs[p];
                            gxs[p] += gyc[p] * wj;
                        }
                        gwrow[j] += acc;
                    }
                }
            }
        }
    }

    std::span<T> params() override { return w_; }
    std::span<T> grads() override { return g_; }
    std::size_t output_cols(std::size_t) const override { return cout_ * out_len_; }
    std::size_t output_length() const { return out_len_; }

  private:
    std::size_t cin_, cout_, k_, len_, out_len_;
    std::vector<T> w_, g_;
    Batch<T> input_;
};

/// Non-overlapping average pooling; a trailing remainder shorter than the
/// pool length is dropped.
template <class T> class AvgPool1d : public Layer<T> {
  public:
    AvgPool1d(std::size_t channels, std::size_t pool, std::size_t input_length)
        : ch_(channels), p_(pool), len_(input_length) {
        if (pool < 1 || pool > input_length)
            throw Error("pool length must be in [1, feature length]");
        out_len_ = input_length / pool;
    }

    void infer(const Batch<T> &in, Batch<T> &out) const override {
        out.resize(in.rows, ch_ * out_len_);
        T inv = T(1) / static_cast<T>(p_);
        for (std::size_t r = 0; r < in.rows; ++r) {
            const T *x = in.row(r);
            T *y = out.row(r);
            for (std::size_t c = 0; c < ch_; ++c) {
                const T *xc = x + c * len_;
                T *yc = y + c * out_len_;
                for (std::size_t o = 0; o < out_len_; ++o) {
                    T acc = T(0);
                    for (std::size_t j = 0; j < p_; ++j)
                        acc += xc[o * p_ + j];
                    yc[o] = acc * inv;
                }
            }
        }
    }

    void forward(const Batch<T> &in, Batch<T> &out) override {
        rows_ = in.rows;
        infer(in, out);
    }

    void backward(const Batch<T> &grad_out, Batch<T> &grad_in) override {
        grad_in.resize(rows_, ch_ * len_);
        T inv = T(1) / static_cast<T>(p_);
        for (std::size_t r = 0; r < rows_; ++r) {
            const T *gy = grad_out.row(r);
            T *gx = grad_in.row(r);
            for (std::size_t c = 0; c < ch_; ++c) {
                const T *gyc = gy + c * out_len_;
                T *gxc = gx + c * len_;
                for (std::size_t o = 0; o < out_len_; ++o)
                    for (std::size_t j = 0; j < p_; ++j)
                        gxc[o * p_ + j] = gyc[o] * inv;
            }
        }
    }

    std::size_t output_cols(std::size_t) const override { return ch_ * out_len_; }
    std::size_t output_length() const { return out_len_; }

  private:
    std::size_t ch_, p_, len_, out_len_, rows_ = 0;
};

template <class T> class Network {
  public:
    std::vector<std::unique_ptr<Layer<T>>> layers;

    /// Pure inference with local scratch; safe on a shared const network.
    void infer(const Batch<T> &in, Batch<T> &out) const {
        Batch<T> a = in, b;
        for (const auto &layer : layers) {
            layer->infer(a, b);
            std::swap(a, b);
        }
        out = std::move(a);
    }

    void forward(const Batch<T> &in, Batch<T> &out) {
        scratch_.resize(layers.size() + 1);
        scratch_[0] = in;
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i]->forward(scratch_[i], scratch_[i + 1]);
        out = scratch_.back();
    }

    /// Backpropagates the loss gradient through every layer.
    void backward(const Batch<T> &grad_logits) {
        Batch<T> g = grad_logits, next;
        for (std::size_t i = layers.size(); i-- > 0;) {
            layers[i]->backward(g, next);
            std::swap(g, next);
        }
    }

    std::size_t param_count() const {
        std::size_t total = 0;
        for (const auto &l : layers)
            total += const_cast<Layer<T> *>(l.get())->params().size();
        return total;
    }

    void zero_grads() {
        for (auto &l : layers)
            for (auto &g : l->grads())
                g = T(0);
    }

    std::vector<T> flat_params() const {
        std::vector<T> out;
        for (const auto &l : layers) {
            auto p = const_cast<Layer<T> *>(l.get())->params();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    void set_flat_params(std::span<const T> flat) {
        std::size_t off = 0;
        for (auto &l : layers) {
            auto p = l->params();
            for (auto &w : p)
                w = flat[off++];
        }
        if (off != flat.size())
            throw Error("parameter blob size mismatch");
    }

  private:
    std::vector<Batch<T>> scratch_;
};

template <class T> void softmax_rows(Batch<T> &b) {
    for (std::size_t r = 0; r < b.rows; ++r) {
        T *x = b.row(r);
        T mx = x[0];
        for (std::size_t c = 1; c < b.cols; ++c)
            mx = std::max(mx, x[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < b.cols; ++c) {
            x[c] = std::exp(x[c] - mx);
            sum += x[c];
        }
        for (std::size_t c = 0; c < b.cols; ++c)
            x[c] /= sum;
    }
}

/// Softmax cross-entropy: returns the mean loss and writes the fused
/// gradient (softmax - onehot) / rows into grad.
template <class T>
double cross_entropy(const Batch<T> &logits, std::span<const uint8_t> labels, Batch<T> &grad) {
    Batch<T> probs = logits;
    softmax_rows(probs);
    grad = probs;
    double loss = 0;
    T inv = T(1) / static_cast<T>(logits.rows);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        T *g = grad.row(r);
        double p = std::max(static_cast<double>(probs.row(r)[labels[r]]), 1e-30);
        loss -= std::log(p);
        g[labels[r]] -= T(1);
        for (std::size_t c = 0; c < logits.cols; ++c)
            g[c] *= inv;
    }
    return loss / static_cast<double>(logits.rows);
}

/// RMSprop: cache = decay*cache + (1-decay)*g^2; w -= lr * g / (sqrt(cache)+eps).
template <class T> class RmsProp {
  public:
    RmsProp(double learning_rate, double decay = 0.9, double epsilon = 1e-8)
        : lr_(learning_rate), decay_(decay), eps_(epsilon) {}

    void step(Network<T> &net) {
        std::size_t total = net.param_count();
        if (cache_.size() != total)
            cache_.assign(total, 0.0);
        std::size_t off = 0;
        for (auto &l : net.layers) {
            auto p = l->params();
            auto g = l->grads();
            for (std::size_t i = 0; i < p.size(); ++i, ++off) {
                double gi = static_cast<double>(g[i]);
                cache_[off] = decay_ * cache_[off] + (1.0 - decay_) * gi * gi;
                p[i] -= static_cast<T>(lr_ * gi / (std::sqrt(cache_[off]) + eps_));
            }
        }
    }

  private:
    double lr_, decay_, eps_;
    std::vector<double> cache_;
};

} // namespace sidelab::nn

#endif
