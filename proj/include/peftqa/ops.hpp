#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>

#include "peftqa/tensor.hpp"

namespace peftqa {
class QuantizedTensor;
}

/// Differentiable tensor ops. Matrices are row-major; a weight W of shape
/// [d x k] maps k inputs to d outputs, so a batch of row vectors X [n x k]
/// maps to X W^T.
namespace peftqa::ops {

// Elementwise. `b` may match `a` exactly or be 1-D matching a's last axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// x [n x k], weight [d x k], optional bias [d] -> [n x d].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// Same as `linear` with a frozen NF4 weight. The weight is dequantized into a
/// scratch buffer during forward and again during backward; no dense copy
/// outlives either pass.
Tensor quantized_linear(const Tensor& x, std::shared_ptr<const QuantizedTensor> weight, const Tensor& bias = {});

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Packed variant: `scores` [sum(lengths)] holds one segment per sequence and
/// targets index within each segment. Mean over segments.
Tensor segment_cross_entropy(const Tensor& scores, std::span<const std::size_t> lengths,
                             std::span<const std::size_t> targets);

/// Rows of `table` gathered by id -> [ids.size() x table.dim(1)].
Tensor embedding(std::span<const std::int32_t> ids, const Tensor& table);

/// Inverted dropout. Identity when `training` is false or p == 0.
Tensor dropout(const Tensor& x, float p, bool training, Rng& rng);

/// h + scaling * dropout(x) A^T B^T as one node, for h, x [n x k|d], A [r x k],
/// B [d x r]. Keeps only the dropout mask and the [n x r] intermediate for the
/// backward pass. Draws the same dropout mask as `dropout(x, p, ...)`.
Tensor lora_update(const Tensor& h, const Tensor& x, const Tensor& A, const Tensor& B, float scaling, float p,
                   bool training, Rng& rng);

/// L2 norm of each output unit's weight vector: for W [d x k] returns [d]
/// with sqrt(sum_j W_ij^2 + eps).
Tensor row_l2_norms(const Tensor& w, float eps = 0.0f);

/// Rows [begin, end) along the first axis.
Tensor slice(const Tensor& x, std::size_t begin, std::size_t end);
/// Column j of a 2-D tensor as a 1-D tensor.
Tensor select_column(const Tensor& x, std::size_t column);

/// Multi-head scaled dot-product self-attention over packed sequences.
/// q, k, v are [n x d] with n = sum(lengths); each sequence attends only to
/// itself. `rel_bias` [heads x (2R+1)], when given, adds a per-head score
/// bias indexed by the key-minus-query offset clipped to [-R, R].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::size_t> lengths, std::size_t heads, const Tensor& rel_bias = {});

}  // namespace peftqa::ops
