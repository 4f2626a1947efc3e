#include "peftqa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "peftqa/errors.hpp"
#include "peftqa/quantization.hpp"

namespace peftqa::ops {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using StridedC = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using CVecMap = Eigen::Map<const Eigen::VectorXf>;

using detail::make_result;
using detail::Node;

CMapM cmat(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
    return CMapM(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MapM mmat(std::span<float> v, std::size_t rows, std::size_t cols) {
    return MapM(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + " expects a rank-" + std::to_string(rank) + " tensor, got " +
                             shape_str(t.shape()));
    }
}

enum class Broadcast { kSame, kLastAxis };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() == b.shape()) return Broadcast::kSame;
    if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::kLastAxis;
    throw DimensionError(std::string(what) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

// Sums a gradient of a's shape down to b when b was broadcast along the last axis.
void accumulate_reduced(Node& target, std::span<const float> g, Broadcast kind, std::size_t width) {
    auto dst = target.ensure_grad();
    if (kind == Broadcast::kSame) {
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) dst[i % width] += g[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    auto kind = broadcast_kind(a, b, "add");
    const std::size_t w = b.numel();
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[kind == Broadcast::kSame ? i : i % w];
    return make_result(a.shape(), std::move(out), "add", {a, b}, [kind, w](Node& self) {
        if (self.inputs[0]->requires_grad) accumulate_reduced(*self.inputs[0], self.grad, Broadcast::kSame, 0);
        if (self.inputs[1]->requires_grad) accumulate_reduced(*self.inputs[1], self.grad, kind, w);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    auto kind = broadcast_kind(a, b, "sub");
    const std::size_t w = b.numel();
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[kind == Broadcast::kSame ? i : i % w];
    return make_result(a.shape(), std::move(out), "sub", {a, b}, [kind, w](Node& self) {
        if (self.inputs[0]->requires_grad) accumulate_reduced(*self.inputs[0], self.grad, Broadcast::kSame, 0);
        if (self.inputs[1]->requires_grad) {
            std::vector<float> neg(self.grad.size());
            for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
            accumulate_reduced(*self.inputs[1], neg, kind, w);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    auto kind = broadcast_kind(a, b, "mul");
    const std::size_t w = b.numel();
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[kind == Broadcast::kSame ? i : i % w];
    return make_result(a.shape(), std::move(out), "mul", {a, b}, [kind, w](Node& self) {
        const auto& ad = self.inputs[0]->data;
        const auto& bd = self.inputs[1]->data;
        const std::size_t n = self.grad.size();
        if (self.inputs[0]->requires_grad) {
            auto ga = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bd[kind == Broadcast::kSame ? i : i % w];
        }
        if (self.inputs[1]->requires_grad) {
            std::vector<float> g(n);
            for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * ad[i];
            accumulate_reduced(*self.inputs[1], g, kind, w);
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    auto kind = broadcast_kind(a, b, "div");
    const std::size_t w = b.numel();
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[kind == Broadcast::kSame ? i : i % w];
    return make_result(a.shape(), std::move(out), "div", {a, b}, [kind, w](Node& self) {
        const auto& ad = self.inputs[0]->data;
        const auto& bd = self.inputs[1]->data;
        const std::size_t n = self.grad.size();
        if (self.inputs[0]->requires_grad) {
            auto ga = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] / bd[kind == Broadcast::kSame ? i : i % w];
        }
        if (self.inputs[1]->requires_grad) {
            std::vector<float> g(n);
            for (std::size_t i = 0; i < n; ++i) {
                float bv = bd[kind == Broadcast::kSame ? i : i % w];
                g[i] = -self.grad[i] * ad[i] / (bv * bv);
            }
            accumulate_reduced(*self.inputs[1], g, kind, w);
        }
    });
}

Tensor scale(const Tensor& a, float factor) {
    std::vector<float> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    return make_result(a.shape(), std::move(out), "scale", {a}, [factor](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor gelu(const Tensor& x) {
    constexpr float kInvSqrt2 = 0.70710678118654752f;
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5f * xd[i] * (1.0f + std::erf(xd[i] * kInvSqrt2));
    return make_result(x.shape(), std::move(out), "gelu", {x}, [](Node& self) {
        constexpr float kInvSqrt2Pi = 0.39894228040143268f;
        constexpr float kInvSqrt2 = 0.70710678118654752f;
        const auto& xd = self.inputs[0]->data;
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            float v = xd[i];
            float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    return make_result({1}, {static_cast<float>(acc)}, "sum", {x}, [](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
    if (b.dim(0) != n) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(m * p);
    mmat(out, m, p).noalias() = cmat(a.node()->data, m, n) * cmat(b.node()->data, n, p);
    return make_result({m, p}, std::move(out), "matmul", {a, b}, [m, n, p](Node& self) {
        auto dc = cmat(self.grad, m, p);
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (an.requires_grad) mmat(an.ensure_grad(), m, n).noalias() += dc * cmat(bn.data, n, p).transpose();
        if (bn.requires_grad) mmat(bn.ensure_grad(), n, p).noalias() += cmat(an.data, m, n).transpose() * dc;
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<float> out(r * c);
    mmat(out, c, r) = cmat(a.node()->data, r, c).transpose();
    return make_result({c, r}, std::move(out), "transpose", {a}, [r, c](Node& self) {
        mmat(self.inputs[0]->ensure_grad(), r, c) += cmat(self.grad, c, r).transpose();
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes size");
    }
    std::vector<float> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), "reshape", {a}, [](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const std::size_t n = x.dim(0), k = x.dim(1), d = weight.dim(0);
    if (weight.dim(1) != k) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d)) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    std::vector<float> out(n * d);
    auto y = mmat(out, n, d);
    y.noalias() = cmat(x.node()->data, n, k) * cmat(weight.node()->data, d, k).transpose();
    if (bias.defined()) y.rowwise() += CVecMap(bias.data().data(), static_cast<Eigen::Index>(d)).transpose();

    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result({n, d}, std::move(out), "linear", std::move(inputs), [n, k, d](Node& self) {
        auto dy = cmat(self.grad, n, d);
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        if (xn.requires_grad) mmat(xn.ensure_grad(), n, k).noalias() += dy * cmat(wn.data, d, k);
        if (wn.requires_grad) mmat(wn.ensure_grad(), d, k).noalias() += dy.transpose() * cmat(xn.data, n, k);
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            VecMap(self.inputs[2]->ensure_grad().data(), static_cast<Eigen::Index>(d)) += dy.colwise().sum().transpose();
        }
    });
}

Tensor quantized_linear(const Tensor& x, std::shared_ptr<const QuantizedTensor> wq, const Tensor& bias) {
    if (!wq) throw ContractError("quantized_linear: null weight");
    const QuantizedTensor& weight = *wq;
    require_rank(x, 2, "quantized_linear");
    if (weight.shape().size() != 2) throw DimensionError("quantized_linear: weight must be rank 2");
    const std::size_t n = x.dim(0), k = x.dim(1), d = weight.shape()[0];
    if (weight.shape()[1] != k) {
        throw DimensionError("quantized_linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d)) {
        throw DimensionError("quantized_linear: bias " + shape_str(bias.shape()) + " does not match weight");
    }
    std::vector<float> out(n * d);
    {
        std::vector<float> scratch(d * k);
        dequantize_into(weight, scratch);
        auto y = mmat(out, n, d);
        y.noalias() = cmat(x.node()->data, n, k) * cmat(scratch, d, k).transpose();
        if (bias.defined()) y.rowwise() += CVecMap(bias.data().data(), static_cast<Eigen::Index>(d)).transpose();
    }
    std::vector<Tensor> inputs{x};
    if (bias.defined()) inputs.push_back(bias);
    return make_result({n, d}, std::move(out), "quantized_linear", std::move(inputs), [n, k, d, wq = std::move(wq)](Node& self) {
        auto dy = cmat(self.grad, n, d);
        auto& xn = *self.inputs[0];
        if (xn.requires_grad) {
            std::vector<float> scratch(d * k);
            dequantize_into(*wq, scratch);
            mmat(xn.ensure_grad(), n, k).noalias() += dy * cmat(scratch, d, k);
        }
        if (self.inputs.size() > 1 && self.inputs[1]->requires_grad) {
            VecMap(self.inputs[1]->ensure_grad().data(), static_cast<Eigen::Index>(d)) += dy.colwise().sum().transpose();
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_rows: last dimension must be >= 1");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = xd.data() + r * cols;
        float* dst = out.data() + r * cols;
        float mx = *std::max_element(src, src + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] = std::exp(src[c] - mx);
            total += dst[c];
        }
        float inv = static_cast<float>(1.0 / total);
        for (std::size_t c = 0; c < cols; ++c) dst[c] *= inv;
    }
    return make_result(x.shape(), std::move(out), "softmax_rows", {x}, [rows, cols](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * cols;
            const float* dy = self.grad.data() + r * cols;
            float dot = 0.0f;
            for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
    const std::size_t cols = x.shape().back();
    if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
        throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(cols) + "], got " +
                             shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.numel() / cols;
    std::vector<float> out(x.numel());
    // xhat and 1/sigma per row are kept for the backward pass.
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<float>>(rows);
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = xd.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += src[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (src[c] - mu) * (src[c] - mu);
        var /= static_cast<double>(cols);
        float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*rstd)[r] = inv;
        for (std::size_t c = 0; c < cols; ++c) {
            float h = static_cast<float>(src[c] - mu) * inv;
            (*xhat)[r * cols + c] = h;
            out[r * cols + c] = h * gd[c] + bd[c];
        }
    }
    std::size_t saved = (xhat->size() + rstd->size()) * sizeof(float);
    return make_result(
        x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
        [rows, cols, xhat, rstd](Node& self) {
            auto& xn = *self.inputs[0];
            auto& gn = *self.inputs[1];
            auto& bn = *self.inputs[2];
            const auto& dy = self.grad;
            if (gn.requires_grad || bn.requires_grad) {
                std::vector<float> dg(cols, 0.0f), db(cols, 0.0f);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        dg[c] += dy[r * cols + c] * (*xhat)[r * cols + c];
                        db[c] += dy[r * cols + c];
                    }
                }
                if (gn.requires_grad) {
                    auto g = gn.ensure_grad();
                    for (std::size_t c = 0; c < cols; ++c) g[c] += dg[c];
                }
                if (bn.requires_grad) {
                    auto g = bn.ensure_grad();
                    for (std::size_t c = 0; c < cols; ++c) g[c] += db[c];
                }
            }
            if (xn.requires_grad) {
                auto g = xn.ensure_grad();
                const float invn = 1.0f / static_cast<float>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    float mean_dh = 0.0f, mean_dh_h = 0.0f;
                    for (std::size_t c = 0; c < cols; ++c) {
                        float dh = dy[r * cols + c] * gn.data[c];
                        mean_dh += dh;
                        mean_dh_h += dh * (*xhat)[r * cols + c];
                    }
                    mean_dh *= invn;
                    mean_dh_h *= invn;
                    for (std::size_t c = 0; c < cols; ++c) {
                        float dh = dy[r * cols + c] * gn.data[c];
                        g[r * cols + c] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * cols + c] * mean_dh_h);
                    }
                }
            }
        },
        saved);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t batch = logits.dim(0), n = logits.dim(1);
    if (targets.size() != batch) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                             std::to_string(batch));
    }
    if (batch == 0 || n == 0) throw DimensionError("cross_entropy on empty logits " + shape_str(logits.shape()));
    for (std::size_t b = 0; b < batch; ++b) {
        if (targets[b] >= n) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[b]) + " out of range [0, " +
                             std::to_string(n) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<float>>(logits.numel());
    auto ld = logits.data();
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const float* row = ld.data() + b * n;
        float mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += std::exp(static_cast<double>(row[c] - mx));
        double log_z = std::log(total) + mx;
        for (std::size_t c = 0; c < n; ++c) (*probs)[b * n + c] = static_cast<float>(std::exp(row[c] - log_z));
        loss += log_z - row[targets[b]];
    }
    loss /= static_cast<double>(batch);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return make_result(
        {1}, {static_cast<float>(loss)}, "cross_entropy", {logits},
        [batch, n, probs, tgt = std::move(tgt)](Node& self) {
            auto g = self.inputs[0]->ensure_grad();
            const float s = self.grad[0] / static_cast<float>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < n; ++c) {
                    float onehot = c == tgt[b] ? 1.0f : 0.0f;
                    g[b * n + c] += s * ((*probs)[b * n + c] - onehot);
                }
            }
        },
        probs->size() * sizeof(float));
}

Tensor segment_cross_entropy(const Tensor& scores, std::span<const std::size_t> lengths,
                             std::span<const std::size_t> targets) {
    require_rank(scores, 1, "segment_cross_entropy");
    if (lengths.size() != targets.size() || lengths.empty()) {
        throw DimensionError("segment_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(lengths.size()) + " segments");
    }
    std::vector<std::size_t> offsets(lengths.size() + 1, 0);
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        if (lengths[s] == 0) throw DimensionError("segment_cross_entropy: empty segment");
        if (targets[s] >= lengths[s]) {
            throw IndexError("segment_cross_entropy: target " + std::to_string(targets[s]) + " out of range [0, " +
                             std::to_string(lengths[s]) + ")");
        }
        offsets[s + 1] = offsets[s] + lengths[s];
    }
    if (offsets.back() != scores.numel()) {
        throw DimensionError("segment_cross_entropy: lengths sum to " + std::to_string(offsets.back()) + ", scores have " +
                             std::to_string(scores.numel()));
    }
    auto probs = std::make_shared<std::vector<float>>(scores.numel());
    auto sd = scores.data();
    double loss = 0.0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        const float* seg = sd.data() + offsets[s];
        const std::size_t n = lengths[s];
        float mx = *std::max_element(seg, seg + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += std::exp(static_cast<double>(seg[c] - mx));
        double log_z = std::log(total) + mx;
        for (std::size_t c = 0; c < n; ++c) (*probs)[offsets[s] + c] = static_cast<float>(std::exp(seg[c] - log_z));
        loss += log_z - seg[targets[s]];
    }
    const std::size_t count = lengths.size();
    loss /= static_cast<double>(count);
    std::vector<std::size_t> hot(count);
    for (std::size_t s = 0; s < count; ++s) hot[s] = offsets[s] + targets[s];
    return make_result(
        {1}, {static_cast<float>(loss)}, "segment_cross_entropy", {scores},
        [count, probs, hot = std::move(hot)](Node& self) {
            auto g = self.inputs[0]->ensure_grad();
            const float s = self.grad[0] / static_cast<float>(count);
            for (std::size_t i = 0; i < probs->size(); ++i) g[i] += s * (*probs)[i];
            for (std::size_t h : hot) g[h] -= s;
        },
        probs->size() * sizeof(float));
}

Tensor embedding(std::span<const std::int32_t> ids, const Tensor& table) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    std::vector<float> out(ids.size() * width);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * width, width, out.data() + i * width);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return make_result(
        {ids.size(), width}, std::move(out), "embedding", {table},
        [width, saved = std::move(saved)](Node& self) {
            auto g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < saved.size(); ++i) {
                float* dst = g.data() + static_cast<std::size_t>(saved[i]) * width;
                const float* src = self.grad.data() + i * width;
                for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
            }
        },
        ids.size() * sizeof(std::int32_t));
}

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng) {
    if (p < 0.0f || p >= 1.0f) throw ContractError("dropout probability must lie in [0, 1)");
    if (!training || p == 0.0f) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const float inv_keep = 1.0f / (1.0f - p);
    auto mask = std::make_shared<std::vector<float>>(x.numel());
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = keep(rng) ? inv_keep : 0.0f;
        out[i] = xd[i] * (*mask)[i];
    }
    return make_result(
        x.shape(), std::move(out), "dropout", {x},
        [mask](Node& self) {
            auto g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
        },
        mask->size() * sizeof(float));
}

Tensor lora_update(const Tensor& h, const Tensor& x, const Tensor& A, const Tensor& B, float scaling, float p,
                   bool training, Rng& rng) {
    require_rank(h, 2, "lora_update");
    require_rank(x, 2, "lora_update");
    require_rank(A, 2, "lora_update");
    require_rank(B, 2, "lora_update");
    const std::size_t n = x.dim(0), k = x.dim(1), r = A.dim(0), d = B.dim(0);
    if (A.dim(1) != k || B.dim(1) != r || h.dim(0) != n || h.dim(1) != d) {
        throw DimensionError("lora_update: h " + shape_str(h.shape()) + ", x " + shape_str(x.shape()) + ", A " +
                             shape_str(A.shape()) + ", B " + shape_str(B.shape()));
    }
    if (p < 0.0f || p >= 1.0f) throw ContractError("dropout probability must lie in [0, 1)");
    const bool masked = training && p > 0.0f;
    const float inv_keep = masked ? 1.0f / (1.0f - p) : 1.0f;
    // 1 = kept. Empty when no dropout applies.
    auto keep = std::make_shared<std::vector<std::uint8_t>>();
    std::vector<float> xin_store;
    const std::vector<float>* xin = &x.node()->data;
    if (masked) {
        std::bernoulli_distribution draw(1.0 - p);
        keep->resize(n * k);
        xin_store.resize(n * k);
        auto xd = x.data();
        for (std::size_t i = 0; i < n * k; ++i) {
            (*keep)[i] = draw(rng) ? 1 : 0;
            xin_store[i] = (*keep)[i] ? xd[i] * inv_keep : 0.0f;
        }
        xin = &xin_store;
    }
    auto u = std::make_shared<std::vector<float>>(n * r);
    mmat(*u, n, r).noalias() = cmat(*xin, n, k) * cmat(A.node()->data, r, k).transpose();
    std::vector<float> out(h.data().begin(), h.data().end());
    mmat(out, n, d).noalias() += scaling * (cmat(*u, n, r) * cmat(B.node()->data, d, r).transpose());

    const std::size_t saved = keep->size() + u->size() * sizeof(float);
    return make_result(
        {n, d}, std::move(out), "lora_update", {h, x, A, B},
        [n, k, r, d, scaling, inv_keep, keep, u](Node& self) {
            auto dy = cmat(self.grad, n, d);
            auto& hn = *self.inputs[0];
            auto& xn = *self.inputs[1];
            auto& an = *self.inputs[2];
            auto& bn = *self.inputs[3];
            if (hn.requires_grad) mmat(hn.ensure_grad(), n, d) += dy;
            if (bn.requires_grad) mmat(bn.ensure_grad(), d, r).noalias() += scaling * (dy.transpose() * cmat(*u, n, r));
            if (!an.requires_grad && !xn.requires_grad) return;
            Eigen::MatrixXf v = scaling * (dy * cmat(bn.data, d, r));  // [n x r]
            if (an.requires_grad) {
                if (keep->empty()) {
                    mmat(an.ensure_grad(), r, k).noalias() += v.transpose() * cmat(xn.data, n, k);
                } else {
                    std::vector<float> xin(n * k);
                    for (std::size_t i = 0; i < n * k; ++i) xin[i] = (*keep)[i] ? xn.data[i] * inv_keep : 0.0f;
                    mmat(an.ensure_grad(), r, k).noalias() += v.transpose() * cmat(xin, n, k);
                }
            }
            if (xn.requires_grad) {
                Eigen::MatrixXf gx = v * cmat(an.data, r, k);
                auto g = xn.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const float m = keep->empty() ? 1.0f : ((*keep)[i * k + j] ? inv_keep : 0.0f);
                        g[i * k + j] += gx(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * m;
                    }
                }
            }
        },
        saved);
}

Tensor row_l2_norms(const Tensor& w, float eps) {
    require_rank(w, 2, "row_l2_norms");
    const std::size_t d = w.dim(0), k = w.dim(1);
    std::vector<float> out(d);
    auto wd = w.data();
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += static_cast<double>(wd[i * k + j]) * wd[i * k + j];
        out[i] = static_cast<float>(std::sqrt(acc + eps));
    }
    return make_result({d}, std::move(out), "row_l2_norms", {w}, [d, k](Node& self) {
        const auto& wd = self.inputs[0]->data;
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < d; ++i) {
            const float s = self.grad[i] / self.data[i];
            for (std::size_t j = 0; j < k; ++j) g[i * k + j] += s * wd[i * k + j];
        }
    });
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() == 0 || begin > end || end > x.dim(0)) {
        throw IndexError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    }
    const std::size_t inner = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<float> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                           x.data().begin() + static_cast<std::ptrdiff_t>(end * inner));
    return make_result(std::move(shape), std::move(out), "slice", {x}, [begin, inner](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * inner + i] += self.grad[i];
    });
}

Tensor select_column(const Tensor& x, std::size_t column) {
    require_rank(x, 2, "select_column");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (column >= cols) throw IndexError("select_column " + std::to_string(column) + " of " + shape_str(x.shape()));
    std::vector<float> out(rows);
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) out[r] = xd[r * cols + column];
    return make_result({rows}, std::move(out), "select_column", {x}, [rows, cols, column](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) g[r * cols + column] += self.grad[r];
    });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> lengths,
                            std::size_t heads, const Tensor& rel_bias) {
    require_rank(q, 2, "multi_head_attention");
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
        throw DimensionError("multi_head_attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const std::size_t n = q.dim(0), d = q.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    std::size_t total = 0;
    std::size_t prob_count = 0;
    for (auto len : lengths) {
        total += len;
        prob_count += len * len * heads;
    }
    if (total != n) {
        throw DimensionError("multi_head_attention: sequence lengths sum to " + std::to_string(total) + " but " +
                             std::to_string(n) + " rows were given");
    }
    std::size_t radius = 0;
    if (rel_bias.defined()) {
        if (rel_bias.rank() != 2 || rel_bias.dim(0) != heads || rel_bias.dim(1) % 2 == 0) {
            throw DimensionError("multi_head_attention: relative bias " + shape_str(rel_bias.shape()) +
                                 " must be [heads x (2R+1)]");
        }
        radius = rel_bias.dim(1) / 2;
    }
    // Column of the bias table for key j seen from query i.
    auto bias_col = [radius](Eigen::Index i, Eigen::Index j) {
        const auto r = static_cast<Eigen::Index>(radius);
        return static_cast<std::size_t>(std::clamp<Eigen::Index>(j - i, -r, r) + r);
    };
    const std::size_t dh = d / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    auto probs = std::make_shared<std::vector<float>>(prob_count);
    std::vector<float> out(n * d);
    const auto& qd = q.node()->data;
    const auto& kd = k.node()->data;
    const auto& vd = v.node()->data;
    const auto ld = static_cast<Eigen::Index>(d);

    std::size_t row = 0, pofs = 0;
    for (auto len : lengths) {
        const auto L = static_cast<Eigen::Index>(len);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = row * d + h * dh;
            StridedC qh(qd.data() + base, L, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ld));
            StridedC kh(kd.data() + base, L, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ld));
            StridedC vh(vd.data() + base, L, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ld));
            MapM p(probs->data() + pofs, L, L);
            p.noalias() = (qh * kh.transpose()) * inv_sqrt;
            if (rel_bias.defined()) {
                const float* brow = rel_bias.data().data() + h * rel_bias.dim(1);
                for (Eigen::Index r = 0; r < L; ++r) {
                    for (Eigen::Index c = 0; c < L; ++c) p(r, c) += brow[bias_col(r, c)];
                }
            }
            for (Eigen::Index r = 0; r < L; ++r) {
                auto prow = p.row(r);
                float mx = prow.maxCoeff();
                prow = (prow.array() - mx).exp();
                prow /= prow.sum();
            }
            Strided oh(out.data() + base, L, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ld));
            oh.noalias() = p * vh;
            pofs += len * len;
        }
        row += len;
    }

    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    std::vector<Tensor> inputs = {q, k, v};
    if (rel_bias.defined()) inputs.push_back(rel_bias);
    const std::size_t bias_width = rel_bias.defined() ? rel_bias.dim(1) : 0;
    return make_result(
        {n, d}, std::move(out), "multi_head_attention", std::move(inputs),
        [lens = std::move(lens), heads, d, dh, inv_sqrt, probs, bias_width, bias_col](Node& self) {
            auto& qn = *self.inputs[0];
            auto& kn = *self.inputs[1];
            auto& vn = *self.inputs[2];
            std::span<float> gb;
            if (self.inputs.size() > 3 && self.inputs[3]->requires_grad) gb = self.inputs[3]->ensure_grad();
            const auto ld = static_cast<Eigen::Index>(d);
            const auto w = static_cast<Eigen::Index>(dh);
            std::span<float> gq, gk, gv;
            if (qn.requires_grad) gq = qn.ensure_grad();
            if (kn.requires_grad) gk = kn.ensure_grad();
            if (vn.requires_grad) gv = vn.ensure_grad();
            std::size_t row = 0, pofs = 0;
            MatRM dp, ds;
            for (auto len : lens) {
                const auto L = static_cast<Eigen::Index>(len);
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t base = row * d + h * dh;
                    StridedC qh(qn.data.data() + base, L, w, Eigen::OuterStride<>(ld));
                    StridedC kh(kn.data.data() + base, L, w, Eigen::OuterStride<>(ld));
                    StridedC vh(vn.data.data() + base, L, w, Eigen::OuterStride<>(ld));
                    StridedC doh(self.grad.data() + base, L, w, Eigen::OuterStride<>(ld));
                    CMapM p(probs->data() + pofs, L, L);
                    if (!gv.empty()) {
                        Strided(gv.data() + base, L, w, Eigen::OuterStride<>(ld)).noalias() += p.transpose() * doh;
                    }
                    dp.noalias() = doh * vh.transpose();
                    ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
                    if (!gq.empty()) {
                        Strided(gq.data() + base, L, w, Eigen::OuterStride<>(ld)).noalias() += (ds * kh) * inv_sqrt;
                    }
                    if (!gk.empty()) {
                        Strided(gk.data() + base, L, w, Eigen::OuterStride<>(ld)).noalias() +=
                            (ds.transpose() * qh) * inv_sqrt;
                    }
                    if (!gb.empty()) {
                        float* grow = gb.data() + h * bias_width;
                        for (Eigen::Index r = 0; r < L; ++r) {
                            for (Eigen::Index c = 0; c < L; ++c) grow[bias_col(r, c)] += ds(r, c);
                        }
                    }
                    pofs += len * len;
                }
                row += len;
            }
        },
        prob_count * sizeof(float));
}

}  // namespace peftqa::ops
