#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "linalg.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// L2-regularized logistic regression with exact gradient and Hessian.

namespace detail {

/// log(1 + exp(-z)) without overflow for any z.
inline double log1p_exp_neg(double z) {
    if (z >= 0.0) return std::log1p(std::exp(-z));
    return -z + std::log1p(std::exp(z));
}

/// sigma(-z) = 1 / (1 + exp(z)), evaluated stably.
inline double sigmoid_neg(double z) {
    if (z >= 0.0) {
        double e = std::exp(-z);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(z));
}

}  // namespace detail

/// f(theta) = (1/M) sum_j log(1 + exp(-y_j x_j^T theta)) + (lambda/2) |theta|^2
/// over one client's shard. Labels must be exactly -1 or +1. With lambda > 0
/// the objective is lambda-strongly convex. Batch sums run in ascending
/// sample order, so evaluation is bit-reproducible.
class LogisticL2Objective {
public:
    LogisticL2Objective(std::vector<Vec> features, std::vector<int> labels, double lambda)
        : features_(std::move(features)), labels_(std::move(labels)), lambda_(lambda) {
        if (features_.size() != labels_.size())
            throw DimensionMismatch("logistic objective: features/labels size mismatch");
        for (int y : labels_)
            if (y != 1 && y != -1)
                throw NonBinaryLabel("logistic objective: label " + std::to_string(y) +
                                     " is not +1/-1");
        dim_ = features_.empty() ? 0 : features_.front().size();
        for (const Vec& x : features_)
            if (x.size() != dim_)
                throw DimensionMismatch("logistic objective: inconsistent feature length");
    }

    static LogisticL2Objective from_shard(const Dataset& ds, std::span<const std::size_t> shard,
                                          double lambda) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        xs.reserve(shard.size());
        ys.reserve(shard.size());
        for (std::size_t i : shard) {
            xs.push_back(ds.features[i]);
            ys.push_back(ds.labels[i]);
        }
        LogisticL2Objective obj(std::move(xs), std::move(ys), lambda);
        obj.dim_ = ds.dim;
        for (const Vec& x : obj.features_)
            if (x.size() != obj.dim_)
                throw DimensionMismatch("logistic objective: inconsistent feature length");
        return obj;
    }

    std::size_t dim() const { return dim_; }
    std::size_t samples() const { return features_.size(); }
    double lambda() const { return lambda_; }

    double value(const Vec& theta) const {
        check_dim(theta);
        double s = 0.0;
        for (std::size_t j = 0; j < features_.size(); ++j) {
            double z = labels_[j] * dot(features_[j], theta);
            s += detail::log1p_exp_neg(z);
        }
        if (!features_.empty()) s /= static_cast<double>(features_.size());
        return s + 0.5 * lambda_ * dot(theta, theta);
    }

    Vec gradient(const Vec& theta) const {
        check_dim(theta);
        Vec g(dim_, 0.0);
        for (std::size_t j = 0; j < features_.size(); ++j) {
            double z = labels_[j] * dot(features_[j], theta);
            double w = -detail::sigmoid_neg(z) * labels_[j];
            for (std::size_t k = 0; k < dim_; ++k) g[k] += w * features_[j][k];
        }
        if (!features_.empty()) {
            double m = static_cast<double>(features_.size());
            for (double& x : g) x /= m;
        }
        for (std::size_t k = 0; k < dim_; ++k) g[k] += lambda_ * theta[k];
        return g;
    }

    Matrix hessian(const Vec& theta) const {
        check_dim(theta);
        Matrix h(dim_, dim_);
        for (std::size_t j = 0; j < features_.size(); ++j) {
            double z = labels_[j] * dot(features_[j], theta);
            double sn = detail::sigmoid_neg(z);
            double w = sn * (1.0 - sn);
            const Vec& x = features_[j];
            for (std::size_t r = 0; r < dim_; ++r)
                for (std::size_t c = 0; c < dim_; ++c) h(r, c) += w * x[r] * x[c];
        }
        if (!features_.empty()) {
            double m = static_cast<double>(features_.size());
            for (double& x : h.entries()) x /= m;
        }
        for (std::size_t k = 0; k < dim_; ++k) h(k, k) += lambda_;
        return symmetrize(h);
    }

private:
    void check_dim(const Vec& theta) const {
        if (theta.size() != dim_)
            throw DimensionMismatch("logistic objective: parameter length " +
                                    std::to_string(theta.size()) + ", expected " +
                                    std::to_string(dim_));
    }

    std::vector<Vec> features_;
    std::vector<int> labels_;
    double lambda_;
    std::size_t dim_;
};

// ---------------------------------------------------------------------------
// vec / unvec between a flat segment and an in x out weight matrix.
// The flat order stacks columns: entry (i, j) lives at j * in + i.

inline Vec vec_matrix(const Matrix& g) {
    Vec out(g.rows() * g.cols());
    for (std::size_t j = 0; j < g.cols(); ++j)
        for (std::size_t i = 0; i < g.rows(); ++i) out[j * g.rows() + i] = g(i, j);
    return out;
}

inline Matrix unvec_matrix(std::span<const double> segment, std::size_t in, std::size_t out) {
    if (segment.size() != in * out)
        throw LengthMismatch("unvec: segment length " + std::to_string(segment.size()) +
                             " does not match " + std::to_string(in) + "x" + std::to_string(out));
    Matrix g(in, out);
    for (std::size_t j = 0; j < out; ++j)
        for (std::size_t i = 0; i < in; ++i) g(i, j) = segment[j * in + i];
    return g;
}

// ---------------------------------------------------------------------------
// Fully connected network: ReLU hidden layers, softmax cross-entropy output.
// Layer inputs are augmented with a constant 1, so biases are ordinary rows
// of each weight matrix and every parameter sits under a FOOF block.

/// Maps flat parameter segments to per-layer weight matrices of shape
/// (n_{l-1} + 1) x n_l.
struct MlpLayout {
    std::vector<std::size_t> dims;  // n_0, n_1, ..., n_L

    std::size_t layers() const { return dims.size() - 1; }
    std::size_t in_dim(std::size_t l) const { return dims[l] + 1; }
    std::size_t out_dim(std::size_t l) const { return dims[l + 1]; }

    std::size_t offset(std::size_t l) const {
        std::size_t off = 0;
        for (std::size_t k = 0; k < l; ++k) off += in_dim(k) * out_dim(k);
        return off;
    }

    std::size_t flat_dim() const { return offset(layers()); }

    Matrix layer_matrix(const Vec& theta, std::size_t l) const {
        std::span<const double> seg(theta.data() + offset(l), in_dim(l) * out_dim(l));
        return unvec_matrix(seg, in_dim(l), out_dim(l));
    }
};

/// Per-layer uncentered input covariance A_l = (1/M) sum a a^T over the
/// bias-augmented inputs of each layer, plus the sample count used.
struct FoofStats {
    std::vector<Matrix> blocks;
    std::size_t sample_count = 0;

    static FoofStats identity(const MlpLayout& layout) {
        FoofStats s;
        for (std::size_t l = 0; l < layout.layers(); ++l)
            s.blocks.push_back(Matrix::identity(layout.in_dim(l)));
        return s;
    }
};

/// Logits of the network at x; used for predictions and by the loss.
inline Vec mlp_logits(const MlpLayout& layout, const Vec& theta, const Vec& x) {
    Vec act = x;
    for (std::size_t l = 0; l < layout.layers(); ++l) {
        act.push_back(1.0);  // bias input
        Matrix w = layout.layer_matrix(theta, l);
        Vec z(layout.out_dim(l), 0.0);
        for (std::size_t j = 0; j < layout.out_dim(l); ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < layout.in_dim(l); ++i) s += w(i, j) * act[i];
            z[j] = s;
        }
        if (l + 1 < layout.layers())
            for (double& v : z) v = v > 0.0 ? v : 0.0;
        act = std::move(z);
    }
    return act;
}

class MlpObjective {
public:
    MlpObjective(MlpLayout layout, std::vector<Vec> features, std::vector<int> labels)
        : layout_(std::move(layout)), features_(std::move(features)), labels_(std::move(labels)) {
        if (features_.size() != labels_.size())
            throw DimensionMismatch("mlp objective: features/labels size mismatch");
        for (const Vec& x : features_)
            if (x.size() != layout_.dims.front())
                throw DimensionMismatch("mlp objective: feature length does not match input width");
        for (int y : labels_)
            if (y < 0 || static_cast<std::size_t>(y) >= layout_.dims.back())
                throw DimensionMismatch("mlp objective: class label out of range");
    }

    static MlpObjective from_shard(const Dataset& ds, std::span<const std::size_t> shard,
                                   MlpLayout layout) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        for (std::size_t i : shard) {
            xs.push_back(ds.features[i]);
            ys.push_back(ds.labels[i]);
        }
        return MlpObjective(std::move(layout), std::move(xs), std::move(ys));
    }

    const MlpLayout& layout() const { return layout_; }
    std::size_t dim() const { return layout_.flat_dim(); }
    std::size_t samples() const { return features_.size(); }

    /// Mean softmax cross-entropy and its exact flat gradient over a batch of
    /// sample indices, accumulated in ascending batch position.
    std::pair<double, Vec> loss_and_gradient(const Vec& theta, std::span<const std::size_t> batch) const {
        if (theta.size() != dim())
            throw DimensionMismatch("mlp objective: parameter length mismatch");
        if (batch.empty()) throw EmptyBatch("mlp objective: empty batch");

        const std::size_t layers = layout_.layers();
        std::vector<Matrix> weights;
        weights.reserve(layers);
        for (std::size_t l = 0; l < layers; ++l) weights.push_back(layout_.layer_matrix(theta, l));

        double loss = 0.0;
        Vec grad(dim(), 0.0);
        std::vector<Vec> inputs(layers);      // bias-augmented input of each layer
        std::vector<Vec> preacts(layers);     // pre-activation of each layer

        for (std::size_t b : batch) {
            const Vec& x = features_[b];
            int y = labels_[b];

            Vec act = x;
            for (std::size_t l = 0; l < layers; ++l) {
                act.push_back(1.0);
                inputs[l] = act;
                const Matrix& w = weights[l];
                Vec z(layout_.out_dim(l), 0.0);
                for (std::size_t j = 0; j < layout_.out_dim(l); ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < layout_.in_dim(l); ++i) s += w(i, j) * act[i];
                    z[j] = s;
                }
                preacts[l] = z;
                if (l + 1 < layers)
                    for (double& v : z) v = v > 0.0 ? v : 0.0;
                act = std::move(z);
            }

            // Stable log-sum-exp and softmax.
            const Vec& logits = act;
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double sum = 0.0;
            for (double v : logits) sum += std::exp(v - mx);
            double lse = mx + std::log(sum);
            loss += lse - logits[static_cast<std::size_t>(y)];

            Vec delta(logits.size());
            for (std::size_t j = 0; j < logits.size(); ++j)
                delta[j] = std::exp(logits[j] - mx) / sum;
            delta[static_cast<std::size_t>(y)] -= 1.0;

            for (std::size_t li = layers; li-- > 0;) {
                const Vec& a = inputs[li];
                double* gseg = grad.data() + layout_.offset(li);
                const std::size_t in = layout_.in_dim(li);
                const std::size_t out = layout_.out_dim(li);
                for (std::size_t j = 0; j < out; ++j)
                    for (std::size_t i = 0; i < in; ++i) gseg[j * in + i] += a[i] * delta[j];
                if (li == 0) break;
                const Matrix& w = weights[li];
                Vec next(layout_.dims[li], 0.0);  // drop the bias coordinate
                for (std::size_t i = 0; i < next.size(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < out; ++j) s += w(i, j) * delta[j];
                    next[i] = preacts[li - 1][i] > 0.0 ? s : 0.0;
                }
                delta = std::move(next);
            }
        }

        double m = static_cast<double>(batch.size());
        loss /= m;
        for (double& g : grad) g /= m;
        return {loss, grad};
    }

    double value(const Vec& theta) const { return loss_and_gradient(theta, all_indices()).first; }

    Vec gradient(const Vec& theta) const { return loss_and_gradient(theta, all_indices()).second; }

    /// FOOF statistics at theta over the given samples: for each layer,
    /// A_l = (1/M) sum_j a_j a_j^T with a_j the bias-augmented layer input.
    FoofStats foof_stats(const Vec& theta, std::span<const std::size_t> samples) const {
        if (theta.size() != dim())
            throw DimensionMismatch("mlp objective: parameter length mismatch");
        if (samples.empty()) throw EmptyBatch("foof stats: empty sample set");

        const std::size_t layers = layout_.layers();
        FoofStats stats;
        stats.sample_count = samples.size();
        for (std::size_t l = 0; l < layers; ++l)
            stats.blocks.emplace_back(layout_.in_dim(l), layout_.in_dim(l));

        std::vector<Matrix> weights;
        for (std::size_t l = 0; l < layers; ++l) weights.push_back(layout_.layer_matrix(theta, l));

        for (std::size_t s : samples) {
            Vec act = features_[s];
            for (std::size_t l = 0; l < layers; ++l) {
                act.push_back(1.0);
                Matrix& blk = stats.blocks[l];
                for (std::size_t i = 0; i < act.size(); ++i)
                    for (std::size_t j = 0; j < act.size(); ++j) blk(i, j) += act[i] * act[j];
                if (l + 1 == layers) break;
                const Matrix& w = weights[l];
                Vec z(layout_.out_dim(l), 0.0);
                for (std::size_t j = 0; j < layout_.out_dim(l); ++j) {
                    double sum = 0.0;
                    for (std::size_t i = 0; i < layout_.in_dim(l); ++i) sum += w(i, j) * act[i];
                    z[j] = sum > 0.0 ? sum : 0.0;
                }
                act = std::move(z);
            }
        }
        double m = static_cast<double>(samples.size());
        for (Matrix& blk : stats.blocks) {
            for (double& v : blk.entries()) v /= m;
            blk = symmetrize(blk);
        }
        return stats;
    }

    FoofStats foof_stats(const Vec& theta) const { return foof_stats(theta, all_indices()); }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(features_.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }

private:
    MlpLayout layout_;
    std::vector<Vec> features_;
    std::vector<int> labels_;
};

}  // namespace fedsim
