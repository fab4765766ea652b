#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evmdoc/errors.hpp"

namespace evmdoc {

using Real = double;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

inline void check_finite(const Mat& x, const char* where) {
    if (!x.allFinite())
        throw NumericFault(std::string("non-finite values in ") + where);
}

inline void check_finite(const Vec& x, const char* where) {
    if (!x.allFinite())
        throw NumericFault(std::string("non-finite values in ") + where);
}

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

// Checked wrappers; most code multiplies Eigen types directly once shapes are
// pinned by construction, these guard the entry points.
inline Mat matmul(const Mat& a, const Mat& b) {
    require_shape(a.cols() == b.rows(),
                  "matmul " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " * " +
                      std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    return a * b;
}

inline Vec matvec(const Mat& a, const Vec& x) {
    require_shape(a.cols() == x.size(), "matvec dimension mismatch");
    return a * x;
}

inline Mat add(const Mat& a, const Mat& b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                  "add shape mismatch");
    return a + b;
}

inline Real sigmoid(Real x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec sigmoid(const Vec& x) {
    return x.unaryExpr([](Real v) { return sigmoid(v); });
}

inline Vec tanh_v(const Vec& x) {
    return x.unaryExpr([](Real v) { return std::tanh(v); });
}

// Max-subtracted softmax. Masked-off positions come out exactly 0 and take no
// part in the normalization.
inline Vec softmax(const Vec& x, const std::vector<uint8_t>* mask = nullptr) {
    if (mask) require_shape(static_cast<Eigen::Index>(mask->size()) == x.size(),
                            "softmax mask length");
    Real best = -std::numeric_limits<Real>::infinity();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        best = std::max(best, x[i]);
    }
    if (best == -std::numeric_limits<Real>::infinity())
        throw MaskError("softmax over fully masked input");
    Vec out = Vec::Zero(x.size());
    Real total = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        out[i] = std::exp(x[i] - best);
        total += out[i];
    }
    out /= total;
    check_finite(out, "softmax");
    return out;
}

// d(softmax)/dx pulled back: given y = softmax(x) and dy, return dx.
inline Vec softmax_backward(const Vec& y, const Vec& dy) {
    Real dot = y.dot(dy);
    return y.cwiseProduct((dy.array() - dot).matrix());
}

// ---------------------------------------------------------------------------
// Parameters and the optimizer.

struct Parameter {
    std::string name;
    Mat value, grad, adam_m, adam_v;

    Parameter() = default;
    Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)),
          value(Mat::Zero(rows, cols)),
          grad(Mat::Zero(rows, cols)),
          adam_m(Mat::Zero(rows, cols)),
          adam_v(Mat::Zero(rows, cols)) {}

    Eigen::Index rows() const { return value.rows(); }
    Eigen::Index cols() const { return value.cols(); }
};

inline void init_uniform(Parameter& p, std::mt19937_64& rng, Real lo = -0.08,
                         Real hi = 0.08) {
    std::uniform_real_distribution<Real> dist(lo, hi);
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c)
            p.value(r, c) = dist(rng);
}

struct LrSchedule {
    Real base_lr = 5e-4;
    uint64_t warmup = 4000;

    Real lr(uint64_t t) const {
        if (t < 1) throw StepError("learning-rate step must be >= 1");
        Real ft = static_cast<Real>(t);
        Real fw = static_cast<Real>(warmup);
        return base_lr * std::min(ft / fw, std::sqrt(fw / ft));
    }
};

inline constexpr Real kAdamBeta1 = 0.9;
inline constexpr Real kAdamBeta2 = 0.999;
inline constexpr Real kAdamEps = 1e-8;

// Returns the pre-clip global gradient norm; scales grads in place when the
// norm exceeds max_norm.
inline Real clip_global_norm(const std::vector<Parameter*>& params,
                             Real max_norm) {
    Real sq = 0;
    for (const Parameter* p : params) sq += p->grad.squaredNorm();
    Real norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        Real scale = max_norm / norm;
        for (Parameter* p : params) p->grad *= scale;
    }
    return norm;
}

// Bias-corrected Adam; grads are consumed (zeroed) by the step.
inline void adam_step(const std::vector<Parameter*>& params, uint64_t t,
                      const LrSchedule& schedule) {
    Real lr = schedule.lr(t);  // throws StepError for t < 1
    Real bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<Real>(t));
    Real bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<Real>(t));
    for (Parameter* p : params) {
        p->adam_m = kAdamBeta1 * p->adam_m + (1.0 - kAdamBeta1) * p->grad;
        p->adam_v =
            kAdamBeta2 * p->adam_v +
            (1.0 - kAdamBeta2) * p->grad.cwiseProduct(p->grad);
        Mat m_hat = p->adam_m / bc1;
        Mat v_hat = p->adam_v / bc2;
        p->value.array() -=
            lr * m_hat.array() / (v_hat.array().sqrt() + kAdamEps);
        check_finite(p->value, p->name.c_str());
        p->grad.setZero();
    }
}

// ---------------------------------------------------------------------------
// Dropout as an explicit mask so the backward pass can reuse it. Entries are
// 0 or 1/(1-rate); inference (or rate 0) gives all-ones.
inline Vec dropout_mask(Eigen::Index n, Real rate, bool training,
                        std::mt19937_64& rng) {
    if (!training || rate == 0.0) return Vec::Ones(n);
    std::uniform_real_distribution<Real> dist(0.0, 1.0);
    Vec mask(n);
    Real keep_scale = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < n; ++i)
        mask[i] = dist(rng) < rate ? 0.0 : keep_scale;
    return mask;
}

// ---------------------------------------------------------------------------
// LSTM cell. Weights pack the four gates row-wise in the order
// input, forget, candidate, output: W is (4H x in+H), b is (4H).

struct LstmCache {
    Vec x, h_prev, c_prev;
    Vec i, f, g, o, c, tanh_c, h;
};

inline LstmCache lstm_forward(const Parameter& W, const Parameter& b,
                              const Vec& x, const Vec& h_prev,
                              const Vec& c_prev) {
    Eigen::Index hidden = h_prev.size();
    require_shape(W.rows() == 4 * hidden && b.rows() == 4 * hidden &&
                      W.cols() == x.size() + hidden && c_prev.size() == hidden,
                  "lstm_forward shapes");
    Vec xh(x.size() + hidden);
    xh << x, h_prev;
    Vec z = W.value * xh + b.value.col(0);
    LstmCache cache;
    cache.x = x;
    cache.h_prev = h_prev;
    cache.c_prev = c_prev;
    cache.i = sigmoid(z.segment(0, hidden));
    cache.f = sigmoid(z.segment(hidden, hidden));
    cache.g = tanh_v(z.segment(2 * hidden, hidden));
    cache.o = sigmoid(z.segment(3 * hidden, hidden));
    cache.c = cache.f.cwiseProduct(c_prev) + cache.i.cwiseProduct(cache.g);
    cache.tanh_c = tanh_v(cache.c);
    cache.h = cache.o.cwiseProduct(cache.tanh_c);
    check_finite(cache.h, "lstm h");
    return cache;
}

struct LstmGrad {
    Vec dx, dh_prev, dc_prev;
};

// Accumulates into W.grad / b.grad; dh and dc are the gradients flowing into
// this step's h and c outputs.
inline LstmGrad lstm_backward(Parameter& W, Parameter& b,
                              const LstmCache& cache, const Vec& dh,
                              const Vec& dc_in) {
    Eigen::Index hidden = cache.h_prev.size();
    Vec do_ = dh.cwiseProduct(cache.tanh_c);
    Vec dc = dc_in + dh.cwiseProduct(cache.o).cwiseProduct(
                         (1.0 - cache.tanh_c.array().square()).matrix());
    Vec di = dc.cwiseProduct(cache.g);
    Vec df = dc.cwiseProduct(cache.c_prev);
    Vec dg = dc.cwiseProduct(cache.i);

    Vec dz(4 * hidden);
    dz.segment(0, hidden) =
        di.cwiseProduct(cache.i).cwiseProduct((1.0 - cache.i.array()).matrix());
    dz.segment(hidden, hidden) =
        df.cwiseProduct(cache.f).cwiseProduct((1.0 - cache.f.array()).matrix());
    dz.segment(2 * hidden, hidden) =
        dg.cwiseProduct((1.0 - cache.g.array().square()).matrix());
    dz.segment(3 * hidden, hidden) =
        do_.cwiseProduct(cache.o).cwiseProduct((1.0 - cache.o.array()).matrix());

    Vec xh(cache.x.size() + hidden);
    xh << cache.x, cache.h_prev;
    W.grad.noalias() += dz * xh.transpose();
    b.grad.col(0) += dz;

    Vec dxh = W.value.transpose() * dz;
    LstmGrad out;
    out.dx = dxh.segment(0, cache.x.size());
    out.dh_prev = dxh.segment(cache.x.size(), hidden);
    out.dc_prev = dc.cwiseProduct(cache.f);
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. `evaluate(true)` must zero grads, run
// forward+backward and return the loss; `evaluate(false)` must be a pure
// forward pass with the current parameter values.

struct GradCheckReport {
    Real max_rel_err = 0;
    std::string worst_param;
    Eigen::Index worst_row = -1, worst_col = -1;
    Real analytic = 0, numeric = 0;
};

inline GradCheckReport grad_check(const std::vector<Parameter*>& params,
                                  const std::function<Real(bool)>& evaluate,
                                  Real eps = 1e-5) {
    Real base = evaluate(true);
    if (!std::isfinite(base)) throw NumericFault("grad_check loss not finite");
    std::vector<Mat> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
                Real saved = p->value(r, c);
                p->value(r, c) = saved + eps;
                Real up = evaluate(false);
                p->value(r, c) = saved - eps;
                Real down = evaluate(false);
                p->value(r, c) = saved;
                if (!std::isfinite(up) || !std::isfinite(down))
                    throw NumericFault("grad_check perturbed loss not finite");
                Real numeric = (up - down) / (2 * eps);
                Real a = analytic[pi](r, c);
                Real denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
                Real rel = std::fabs(a - numeric) / denom;
                if (rel > report.max_rel_err) {
                    report.max_rel_err = rel;
                    report.worst_param = p->name;
                    report.worst_row = r;
                    report.worst_col = c;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    // restore the analytic grads the backward pass produced
    for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic[pi];
    return report;
}

}  // namespace evmdoc
