// SPDX-License-Identifier: Apache-2.0
//
// diffcore.hpp - flat parameter vectors, gradient evaluation and update rules.
//
// Every objective in madapt is a callable `double(span<const double> w,
// span<double> grad)` that returns the loss at `w` and accumulates dL/dw into
// `grad`. Gradients are produced by hand-written reverse passes over a small
// primitive set (affine, tanh, relu, softplus, squared norm, Rodrigues,
// weak-perspective projection). A central-difference oracle is provided for
// verification.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace madapt {

/// Thrown when a primitive produces NaN/Inf. `primitive()` names the first
/// offending primitive.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(std::string primitive)
        : std::runtime_error("non-finite value produced by primitive '" + primitive + "'"),
          primitive_(std::move(primitive)) {}
    const std::string& primitive() const noexcept { return primitive_; }

private:
    std::string primitive_;
};

class LayoutError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void check_finite(const char* primitive, std::span<const double> xs) {
    if (!all_finite(xs)) throw NonFiniteError(primitive);
}

inline void check_finite(const char* primitive, double x) {
    if (!std::isfinite(x)) throw NonFiniteError(primitive);
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

struct LayerShape {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
    bool operator==(const LayerShape&) const = default;
};

/// Ordered list of named blocks describing how a flat vector maps onto layers.
/// Matrices are stored column-major (Eigen default).
class Layout {
public:
    Layout() = default;
    explicit Layout(std::vector<LayerShape> layers) : layers_(std::move(layers)) {
        offsets_.reserve(layers_.size());
        for (const auto& l : layers_) {
            offsets_.push_back(total_);
            total_ += l.size();
        }
    }

    std::size_t total_size() const { return total_; }
    std::size_t layer_count() const { return layers_.size(); }
    const LayerShape& layer(std::size_t i) const { return layers_.at(i); }
    std::size_t offset(std::size_t i) const { return offsets_.at(i); }
    const std::vector<LayerShape>& layers() const { return layers_; }

    bool operator==(const Layout& o) const { return layers_ == o.layers_; }

private:
    std::vector<LayerShape> layers_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

inline LayoutPtr make_layout(std::vector<LayerShape> layers) {
    return std::make_shared<const Layout>(std::move(layers));
}

inline LayoutPtr flat_layout(std::size_t n, std::string name = "w") {
    return make_layout({LayerShape{std::move(name), n, 1}});
}

// ---------------------------------------------------------------------------
// FlatVector: immutable values + shared layout. Tag gives distinct types for
// parameters and gradients.
// ---------------------------------------------------------------------------

template <class Tag>
class FlatVector {
public:
    FlatVector() : layout_(flat_layout(0)) {}

    FlatVector(LayoutPtr layout, std::vector<double> values)
        : layout_(std::move(layout)), values_(std::move(values)) {
        if (!layout_) throw LayoutError("null layout");
        if (values_.size() != layout_->total_size())
            throw LayoutError("vector length " + std::to_string(values_.size()) +
                              " does not match layout size " +
                              std::to_string(layout_->total_size()));
        if (!all_finite(values_)) throw NonFiniteError(Tag::name);
    }

    static FlatVector zeros(LayoutPtr layout) {
        const auto n = layout->total_size();
        return FlatVector(std::move(layout), std::vector<double>(n, 0.0));
    }

    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    const LayoutPtr& layout_ptr() const { return layout_; }
    const Layout& layout() const { return *layout_; }

    bool same_layout(const Layout& other) const { return *layout_ == other; }

    /// Copy of the values, e.g. as a scratch buffer for a new vector.
    std::vector<double> to_vector() const { return values_; }

    bool operator==(const FlatVector& o) const {
        return *layout_ == *o.layout_ && values_ == o.values_;
    }

private:
    LayoutPtr layout_;
    std::vector<double> values_;
};

struct ParamTag {
    static constexpr const char* name = "ParamVector";
};
struct GradientTag {
    static constexpr const char* name = "GradientVector";
};

using ParamVector = FlatVector<ParamTag>;
using GradientVector = FlatVector<GradientTag>;

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Loss value at w; dL/dw accumulated into grad (zeroed by the caller).
template <class F>
concept DifferentiableObjective =
    requires(const F& f, std::span<const double> w, std::span<double> g) {
        { f(w, g) } -> std::convertible_to<double>;
    };

template <class F>
concept ScalarFunction = requires(const F& f, std::span<const double> w) {
    { f(w) } -> std::convertible_to<double>;
};

struct ValueAndGradient {
    double value = 0.0;
    GradientVector gradient;
};

/// Raw-buffer form used by the training loops; `grad` is overwritten.
template <DifferentiableObjective F>
double evaluate_into(const F& loss, std::span<const double> w, std::span<double> grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double v = loss(w, grad);
    check_finite("loss", v);
    check_finite("gradient", std::span<const double>(grad.data(), grad.size()));
    return v;
}

template <DifferentiableObjective F>
ValueAndGradient evaluate_with_gradient(const F& loss, const ParamVector& params) {
    std::vector<double> g(params.size(), 0.0);
    const double v = evaluate_into(loss, params.values(), g);
    return {v, GradientVector(params.layout_ptr(), std::move(g))};
}

/// Drops the gradient half of an objective so it can feed the FD oracle.
template <DifferentiableObjective F>
auto value_only(const F& loss) {
    return [&loss](std::span<const double> w) {
        std::vector<double> scratch(w.size(), 0.0);
        return loss(w, scratch);
    };
}

/// Central differences: (f(p + h e_i) - f(p - h e_i)) / 2h per coordinate.
template <ScalarFunction F>
GradientVector finite_difference_gradient(const F& loss, const ParamVector& params, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
    std::vector<double> w = params.to_vector();
    std::vector<double> g(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double orig = w[i];
        w[i] = orig + h;
        const double fp = loss(std::span<const double>(w));
        w[i] = orig - h;
        const double fm = loss(std::span<const double>(w));
        w[i] = orig;
        check_finite("finite_difference", fp);
        check_finite("finite_difference", fm);
        g[i] = (fp - fm) / (2.0 * h);
    }
    return GradientVector(params.layout_ptr(), std::move(g));
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// derivative is ~0 from producing meaningless ratios.
inline double relative_error(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const GradientVector& a, const GradientVector& b,
                                 double floor = 1e-8) {
    if (a.size() != b.size()) throw LayoutError("gradient size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, relative_error(a[i], b[i], floor));
    return worst;
}

// ---------------------------------------------------------------------------
// Update rules
// ---------------------------------------------------------------------------

inline void require_same_layout(const Layout& a, const Layout& b, const char* what) {
    if (!(a == b)) throw LayoutError(std::string(what) + ": layout mismatch");
}

/// out[i] = w[i] - lr * g[i], in place on raw buffers.
inline void sgd_update(std::span<double> w, std::span<const double> g, double lr) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
}

inline ParamVector sgd_step(const ParamVector& params, const GradientVector& grad, double lr) {
    require_same_layout(params.layout(), grad.layout(), "sgd_step");
    if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be > 0");
    std::vector<double> out = params.to_vector();
    sgd_update(out, grad.values(), lr);
    check_finite("sgd_step", std::span<const double>(out));
    return ParamVector(params.layout_ptr(), std::move(out));
}

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    LayoutPtr layout;
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;

    static AdamState zeros(LayoutPtr layout) {
        const auto n = layout->total_size();
        return AdamState{std::move(layout), std::vector<double>(n, 0.0),
                         std::vector<double>(n, 0.0), 0};
    }
};

/// In-place Adam with bias correction on raw buffers.
inline void adam_update(AdamState& s, std::span<double> w, std::span<const double> g,
                        const AdamHyper& hp) {
    s.step += 1;
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = hp.beta1 * s.m[i] + (1.0 - hp.beta1) * g[i];
        s.v[i] = hp.beta2 * s.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / c1;
        const double vhat = s.v[i] / c2;
        w[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
}

inline std::pair<ParamVector, AdamState> adam_step(AdamState state, const ParamVector& params,
                                                   const GradientVector& grad,
                                                   const AdamHyper& hp) {
    require_same_layout(params.layout(), grad.layout(), "adam_step");
    if (!state.layout) throw LayoutError("adam_step: state without layout");
    require_same_layout(*state.layout, params.layout(), "adam_step state");
    if (!(hp.beta1 >= 0.0 && hp.beta1 < 1.0 && hp.beta2 >= 0.0 && hp.beta2 < 1.0))
        throw std::invalid_argument("adam_step: betas must lie in [0, 1)");
    std::vector<double> out = params.to_vector();
    adam_update(state, out, grad.values(), hp);
    check_finite("adam_step", std::span<const double>(out));
    return {ParamVector(params.layout_ptr(), std::move(out)), std::move(state)};
}

// ---------------------------------------------------------------------------
// Dense primitives. Forward passes check their outputs; backward passes
// accumulate into the provided gradient buffers.
// ---------------------------------------------------------------------------
namespace diff {

using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using MatMap = Eigen::Map<Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

/// y = W x + b
inline Eigen::VectorXd affine(const ConstMatMap& W, const ConstVecMap& b,
                              const Eigen::VectorXd& x) {
    Eigen::VectorXd y = b;
    y.noalias() += W * x;
    check_finite("affine", std::span<const double>(y.data(), y.size()));
    return y;
}

/// dW += dy x^T, db += dy; returns dx = W^T dy when requested.
inline void affine_backward(const ConstMatMap& W, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& dy, MatMap dW, VecMap db,
                            Eigen::VectorXd* dx) {
    dW.noalias() += dy * x.transpose();
    db += dy;
    if (dx) dx->noalias() = W.transpose() * dy;
}

inline void tanh_inplace(Eigen::VectorXd& x) {
    x = x.array().tanh();
    check_finite("tanh", std::span<const double>(x.data(), x.size()));
}

/// Given y = tanh(x), dx = dy * (1 - y^2).
inline void tanh_backward(const Eigen::VectorXd& y, Eigen::VectorXd& dy) {
    dy.array() *= (1.0 - y.array().square());
}

inline void relu_inplace(Eigen::VectorXd& x) {
    x = x.cwiseMax(0.0);
    check_finite("relu", std::span<const double>(x.data(), x.size()));
}

inline void relu_backward(const Eigen::VectorXd& y, Eigen::VectorXd& dy) {
    dy.array() *= (y.array() > 0.0).cast<double>();
}

/// Numerically stable log(1 + e^x).
inline double softplus(double x) {
    const double y = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    check_finite("softplus", y);
    return y;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

template <class Derived>
double squared_norm(const Eigen::MatrixBase<Derived>& v) {
    const double s = v.squaredNorm();
    check_finite("squared_norm", s);
    return s;
}

}  // namespace diff
}  // namespace madapt
