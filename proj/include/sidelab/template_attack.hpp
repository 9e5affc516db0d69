// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Classical template attack / QDA: one multivariate Gaussian per class,
// shrinkage-regularized covariances, and likelihood-based classification.

#ifndef SIDELAB_TEMPLATE_ATTACK_HPP
#define SIDELAB_TEMPLATE_ATTACK_HPP

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "sidelab/dataset.hpp"
#include "sidelab/util.hpp"

namespace sidelab::ta {

/// In-place Cholesky factorization of a symmetric positive-definite matrix
/// (row-major n x n); the lower triangle receives L with A = L L^T.
/// Returns false if a non-positive pivot is met.
inline bool cholesky_in_place(std::vector<double> &a, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k)
            d -= a[j * n + k] * a[j * n + k];
        if (d <= 0.0 || !std::isfinite(d))
            return false;
        double root = std::sqrt(d);
        a[j * n + j] = root;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            const double *ri = &a[i * n], *rj = &a[j * n];
            for (std::size_t k = 0; k < j; ++k)
                s -= ri[k] * rj[k];
            a[i * n + j] = s / root;
        }
    }
    // Zero the strict upper triangle so the factor is self-contained.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            a[i * n + j] = 0.0;
    return true;
}

/// Solves L y = b by forward substitution.
inline void solve_lower(const std::vector<double> &chol, std::size_t n, std::vector<double> &b) {
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        const double *row = &chol[i * n];
        for (std::size_t k = 0; k < i; ++k)
            s -= row[k] * b[k];
        b[i] = s / row[i];
    }
}

/// Sample mean and unbiased sample covariance of one class.
struct ClassMoments {
    std::vector<double> mean;       // n
    std::vector<double> covariance; // n x n, symmetric
    std::size_t count = 0;
};

inline ClassMoments class_moments(const data::Dataset &ds, int cls) {
    ClassMoments m;
    std::size_t n = ds.n;
    m.mean.assign(n, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.records[i].label != cls)
            continue;
        ++m.count;
        auto t = ds.trace(i);
        for (std::size_t j = 0; j < n; ++j)
            m.mean[j] += t[j];
    }
    if (m.count < 2)
        throw Error("class " + std::to_string(cls) + " has " + std::to_string(m.count) +
                    " trace(s); templates need at least 2 per class");
    for (auto &v : m.mean)
        v /= static_cast<double>(m.count);

    m.covariance.assign(n * n, 0.0);
    std::vector<double> centered(n);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.records[i].label != cls)
            continue;
        auto t = ds.trace(i);
        for (std::size_t j = 0; j < n; ++j)
            centered[j] = t[j] - m.mean[j];
        for (std::size_t r = 0; r < n; ++r) {
            double cr = centered[r];
            double *row = &m.covariance[r * n];
            for (std::size_t c = r; c < n; ++c)
                row[c] += cr * centered[c];
        }
    }
    double inv = 1.0 / static_cast<double>(m.count - 1);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = r; c < n; ++c) {
            m.covariance[r * n + c] *= inv;
            m.covariance[c * n + r] = m.covariance[r * n + c];
        }
    return m;
}

struct TemplateModel {
    int class_count = 0;
    uint32_t n = 0;
    double lambda = 0.1;
    double ridge = 1e-6;
    std::vector<double> priors;                  // class_count
    std::vector<std::vector<double>> mean;       // per class, n
    std::vector<std::vector<double>> chol;       // per class, lower factor of the regularized covariance
    std::vector<double> log_det;                 // per class, log |Sigma|
};

/// Estimates per-class mean and covariance, then shrinks
/// Sigma <- (1-lambda) Sigma + lambda diag(Sigma) + ridge I before
/// factorizing. Classes are fitted concurrently.
inline TemplateModel fit_templates(const data::Dataset &ds, double lambda = 0.1, double ridge = 1e-6) {
    TemplateModel model;
    model.class_count = ds.model.class_count();
    model.n = ds.n;
    model.lambda = lambda;
    model.ridge = ridge;
    model.priors.assign(model.class_count, 0.0);
    model.mean.resize(model.class_count);
    model.chol.resize(model.class_count);
    model.log_det.assign(model.class_count, 0.0);

    for (const auto &r : ds.records) {
        if (r.label >= model.class_count)
            throw Error("label " + std::to_string(r.label) + " out of range for " +
                        std::to_string(model.class_count) + " classes");
        model.priors[r.label] += 1.0;
    }
    for (auto &p : model.priors)
        p /= static_cast<double>(ds.size());

    std::vector<std::string> failures(model.class_count);
    parallel_for(model.class_count, [&](std::size_t cls) {
        try {
            ClassMoments m = class_moments(ds, static_cast<int>(cls));
            std::size_t n = ds.n;
            auto &cov = m.covariance;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) {
                    double v = (1.0 - lambda) * cov[r * n + c];
                    if (r == c)
                        v += lambda * cov[r * n + c] + ridge;
                    cov[r * n + c] = v;
                }
            if (!cholesky_in_place(cov, n))
                throw Error("covariance of class " + std::to_string(cls) +
                            " is not positive definite after regularization; raise lambda or ridge");
            double logdet = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                logdet += 2.0 * std::log(cov[j * n + j]);
            model.mean[cls] = std::move(m.mean);
            model.chol[cls] = std::move(cov);
            model.log_det[cls] = logdet;
        } catch (const std::exception &e) {
            failures[cls] = e.what();
        }
    });
    for (const auto &f : failures)
        if (!f.empty())
            throw Error(f);
    return model;
}

/// Log of the multivariate normal density of `trace` under class `cls`,
/// using the regularized covariance.
inline double log_likelihood(const TemplateModel &model, std::span<const float> trace, int cls) {
    if (trace.size() != model.n)
        throw Error("trace length mismatch: got " + std::to_string(trace.size()) + ", model expects " +
                    std::to_string(model.n));
    std::size_t n = model.n;
    std::vector<double> y(n);
    const auto &mu = model.mean[cls];
    for (std::size_t j = 0; j < n; ++j)
        y[j] = trace[j] - mu[j];
    solve_lower(model.chol[cls], n, y);
    double quad = 0.0;
    for (double v : y)
        quad += v * v;
    return -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + model.log_det[cls] + quad);
}

/// Posterior over classes: normalized exp(log-likelihood + log prior),
/// stabilized with log-sum-exp. The argmax equals the maximum-likelihood
/// class when priors are equal.
inline PredictionVector ta_classify(const TemplateModel &model, std::span<const float> trace) {
    std::vector<double> logp(model.class_count);
    for (int c = 0; c < model.class_count; ++c) {
        double prior = model.priors[c] > 0 ? std::log(model.priors[c]) : -1e100;
        logp[c] = log_likelihood(model, trace, c) + prior;
    }
    double mx = *std::max_element(logp.begin(), logp.end());
    double sum = 0.0;
    PredictionVector out(model.class_count);
    for (int c = 0; c < model.class_count; ++c) {
        out[c] = std::exp(logp[c] - mx);
        sum += out[c];
    }
    for (auto &v : out)
        v /= sum;
    return out;
}

inline std::vector<PredictionVector> ta_classify_batch(const TemplateModel &model, const data::Dataset &ds) {
    std::vector<PredictionVector> out(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) { out[i] = ta_classify(model, ds.trace(i)); });
    return out;
}

// Serialization: magic "SLT1", u32 class_count, u32 n, f64 lambda, f64 ridge,
// then per class: f64 prior, n f64 mean, n*n f64 cholesky factor, f64 logdet.

inline void write_template_model(const std::filesystem::path &path, const TemplateModel &m) {
    std::string out = "SLT1";
    data::detail::put<uint32_t>(out, static_cast<uint32_t>(m.class_count));
    data::detail::put<uint32_t>(out, m.n);
    data::detail::put<double>(out, m.lambda);
    data::detail::put<double>(out, m.ridge);
    for (int c = 0; c < m.class_count; ++c) {
        data::detail::put<double>(out, m.priors[c]);
        out.append(reinterpret_cast<const char *>(m.mean[c].data()), m.n * sizeof(double));
        out.append(reinterpret_cast<const char *>(m.chol[c].data()),
                   static_cast<std::size_t>(m.n) * m.n * sizeof(double));
        data::detail::put<double>(out, m.log_det[c]);
    }
    write_file(path, out);
}

inline TemplateModel read_template_model(const std::filesystem::path &path) {
    std::string in = read_file(path);
    if (in.size() < 4 || in.compare(0, 4, "SLT1") != 0)
        throw Error("not a template model file: " + path.string());
    std::size_t pos = 4;
    TemplateModel m;
    m.class_count = static_cast<int>(data::detail::get<uint32_t>(in, pos));
    m.n = data::detail::get<uint32_t>(in, pos);
    m.lambda = data::detail::get<double>(in, pos);
    m.ridge = data::detail::get<double>(in, pos);
    m.priors.resize(m.class_count);
    m.mean.resize(m.class_count);
    m.chol.resize(m.class_count);
    m.log_det.resize(m.class_count);
    std::size_t nn = static_cast<std::size_t>(m.n) * m.n;
    for (int c = 0; c < m.class_count; ++c) {
        m.priors[c] = data::detail::get<double>(in, pos);
        m.mean[c].resize(m.n);
        if (pos + m.n * sizeof(double) > in.size())
            throw Error("truncated template model file");
        std::memcpy(m.mean[c].data(), in.data() + pos, m.n * sizeof(double));
        pos += m.n * sizeof(double);
        m.chol[c].resize(nn);
        if (pos + nn * sizeof(double) > in.size())
            throw Error("truncated template model file");
        std::memcpy(m.chol[c].data(), in.data() + pos, nn * sizeof(double));
        pos += nn * sizeof(double);
        m.log_det[c] = data::detail::get<double>(in, pos);
    }
    return m;
}

} // namespace sidelab::ta

#endif
