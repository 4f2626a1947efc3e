#include "peftqa/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "peftqa/binary_io.hpp"
#include "peftqa/errors.hpp"

namespace peftqa {

void UniformQuantConfig::validate() const {
    if (bits < 2 || bits > 8) throw ContractError("uniform quantization bits must lie in [2, 8]");
    if (!(scale > 0.0f) || !std::isfinite(scale)) throw ContractError("uniform quantization scale must be positive");
    if (!std::isfinite(zero_point)) throw ContractError("uniform quantization zero point must be finite");
}

int quantize_uniform(float w, const UniformQuantConfig& cfg) {
    cfg.validate();
    double t = (static_cast<double>(w) - cfg.zero_point) / cfg.scale;
    t = std::clamp(t, static_cast<double>(cfg.qmin()), static_cast<double>(cfg.qmax()));
    return static_cast<int>(std::round(t));
}

float dequantize_uniform(int q, const UniformQuantConfig& cfg) {
    return static_cast<float>(q) * cfg.scale + cfg.zero_point;
}

double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        if (p == 0.0) return -std::numeric_limits<double>::infinity();
        if (p == 1.0) return std::numeric_limits<double>::infinity();
        throw ContractError("inverse_normal_cdf: probability outside [0, 1]");
    }
    // Acklam's rational approximation, then Halley steps against erfc.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        double q = p - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    for (int it = 0; it < 2; ++it) {
        double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
        double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
        x = x - u / (1.0 + x * u / 2.0);
    }
    return x;
}

Nf4Codebook::Nf4Codebook(std::array<float, kSize> values) : values_(values) {
    int zeros = 0;
    for (std::size_t i = 0; i < kSize; ++i) {
        if (i > 0 && !(values_[i] > values_[i - 1])) throw ContractError("NF4 codebook must be strictly increasing");
        if (values_[i] == 0.0f) {
            ++zeros;
            zero_index_ = static_cast<std::uint8_t>(i);
        }
    }
    if (zeros != 1 || values_.front() != -1.0f || values_.back() != 1.0f) {
        throw ContractError("NF4 codebook must span [-1, 1] and contain exactly one zero");
    }
}

std::uint8_t Nf4Codebook::nearest(float x) const {
    std::uint8_t best = 0;
    float best_dist = std::abs(x - values_[0]);
    for (std::uint8_t i = 1; i < kSize; ++i) {
        float dist = std::abs(x - values_[i]);
        if (dist < best_dist || (dist == best_dist && std::abs(values_[i]) < std::abs(values_[best]))) {
            best = i;
            best_dist = dist;
        }
    }
    return best;
}

float Nf4Codebook::max_adjacent_gap() const {
    float gap = 0.0f;
    for (std::size_t i = 1; i < kSize; ++i) gap = std::max(gap, values_[i] - values_[i - 1]);
    return gap;
}

Nf4Codebook build_nf4_codebook() {
    // Outermost probability: midway between 1 - 1/(2*15) and 1 - 1/(2*16), so
    // both sides end on a finite quantile.
    constexpr double kOffset = 0.9677083;
    std::array<double, 16> raw{};
    std::size_t n = 0;
    for (int i = 0; i <= 6; ++i) raw[n++] = -inverse_normal_cdf(kOffset + i * (0.5 - kOffset) / 7.0);
    raw[n++] = 0.0;
    for (int i = 7; i >= 0; --i) raw[n++] = inverse_normal_cdf(kOffset + i * (0.5 - kOffset) / 8.0);
    const double top = inverse_normal_cdf(kOffset);
    std::array<float, 16> values{};
    for (std::size_t i = 0; i < 16; ++i) values[i] = static_cast<float>(raw[i] / top);
    values.front() = -1.0f;
    values.back() = 1.0f;
    return Nf4Codebook(values);
}

const Nf4Codebook& nf4_codebook() {
    static const Nf4Codebook table = build_nf4_codebook();
    return table;
}

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
    std::vector<std::uint8_t> packed((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 15) throw DataError("code " + std::to_string(codes[i]) + " does not fit in 4 bits");
        packed[i / 2] |= static_cast<std::uint8_t>(codes[i] << (4 * (i % 2)));
    }
    return packed;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
    if (packed.size() * 2 < count) throw DataError("packed buffer too short");
    std::vector<std::uint8_t> codes(count);
    for (std::size_t i = 0; i < count; ++i) codes[i] = (packed[i / 2] >> (4 * (i % 2))) & 0xF;
    return codes;
}

std::size_t QuantizedTensor::num_blocks() const {
    return options_.block_size == 0 ? 0 : (numel_ + options_.block_size - 1) / options_.block_size;
}

std::size_t QuantizedTensor::num_groups() const {
    if (!options_.double_quant || options_.dq_block_size == 0) return 0;
    return (num_blocks() + options_.dq_block_size - 1) / options_.dq_block_size;
}

std::uint8_t QuantizedTensor::code(std::size_t i) const { return (packed_[i / 2] >> (4 * (i % 2))) & 0xF; }

float QuantizedTensor::block_scale(std::size_t b) const {
    if (!options_.double_quant) return scales_[b];
    const float group = group_scales_[b / options_.dq_block_size];
    return scale_offset_ + group * static_cast<float>(scale_codes_[b]) / 127.0f;
}

std::size_t QuantizedTensor::storage_bytes() const {
    return packed_.size() + scales_.size() * sizeof(float) + scale_codes_.size() +
           group_scales_.size() * sizeof(float) + (options_.double_quant ? sizeof(float) : 0);
}

void QuantizedTensor::validate() const {
    if (options_.block_size == 0) throw DataError("quantized tensor has zero block size");
    if (options_.double_quant && options_.dq_block_size == 0) throw DataError("quantized tensor has zero group size");
    if (shape_numel(shape_) != numel_) throw DataError("quantized tensor shape does not match element count");
    if (packed_.size() != (numel_ + 1) / 2) throw DataError("quantized tensor code buffer has wrong length");
    if (options_.double_quant) {
        if (!scales_.empty() || scale_codes_.size() != num_blocks() || group_scales_.size() != num_groups()) {
            throw DataError("double-quantized scale payload has wrong length");
        }
    } else if (scales_.size() != num_blocks() || !scale_codes_.empty() || !group_scales_.empty()) {
        throw DataError("scale payload has wrong length");
    }
}

QuantizedTensor QuantizedTensor::from_parts(Shape shape, std::span<const std::uint8_t> codes,
                                            QuantizationOptions options, std::vector<float> scales,
                                            std::vector<std::int8_t> scale_codes, std::vector<float> group_scales,
                                            float scale_offset) {
    QuantizedTensor q;
    q.numel_ = shape_numel(shape);
    q.shape_ = std::move(shape);
    q.options_ = options;
    if (codes.size() != q.numel_) throw DataError("quantized tensor needs one code per element");
    q.packed_ = pack_nibbles(codes);
    q.scales_ = std::move(scales);
    q.scale_codes_ = std::move(scale_codes);
    q.group_scales_ = std::move(group_scales);
    q.scale_offset_ = scale_offset;
    q.validate();
    return q;
}

QuantizedTensor quantize_nf4(std::span<const float> values, Shape shape, QuantizationOptions options) {
    if (values.empty()) throw ContractError("quantize_nf4: empty tensor");
    if (shape_numel(shape) != values.size()) throw DimensionError("quantize_nf4: shape does not match value count");
    if (options.block_size == 0) throw ContractError("quantize_nf4: block size must be positive");
    if (options.double_quant && options.dq_block_size == 0) {
        throw ContractError("quantize_nf4: second-level block size must be positive");
    }
    const auto& cb = nf4_codebook();
    QuantizedTensor q;
    q.shape_ = std::move(shape);
    q.numel_ = values.size();
    q.options_ = options;
    const std::size_t blocks = q.num_blocks();

    std::vector<float> absmax(blocks);
    std::vector<std::uint8_t> codes(values.size());
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t lo = b * options.block_size;
        const std::size_t hi = std::min(values.size(), lo + options.block_size);
        float m = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) {
            if (!std::isfinite(values[i])) throw ContractError("quantize_nf4: non-finite input");
            m = std::max(m, std::abs(values[i]));
        }
        absmax[b] = m == 0.0f ? 1.0f : m;
        for (std::size_t i = lo; i < hi; ++i) codes[i] = cb.nearest(values[i] / absmax[b]);
    }
    q.packed_ = pack_nibbles(codes);

    if (!options.double_quant) {
        q.scales_ = std::move(absmax);
        return q;
    }
    double total = 0.0;
    for (float s : absmax) total += s;
    q.scale_offset_ = static_cast<float>(total / static_cast<double>(blocks));
    const std::size_t groups = q.num_groups();
    q.group_scales_.resize(groups);
    q.scale_codes_.resize(blocks);
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t lo = g * options.dq_block_size;
        const std::size_t hi = std::min(blocks, lo + options.dq_block_size);
        float m = 0.0f;
        for (std::size_t b = lo; b < hi; ++b) m = std::max(m, std::abs(absmax[b] - q.scale_offset_));
        q.group_scales_[g] = m;
        const UniformQuantConfig cfg{8, m == 0.0f ? 1.0f : m / 127.0f, 0.0f};
        for (std::size_t b = lo; b < hi; ++b) {
            q.scale_codes_[b] = static_cast<std::int8_t>(quantize_uniform(absmax[b] - q.scale_offset_, cfg));
        }
    }
    return q;
}

QuantizedTensor quantize_nf4(const Tensor& w, QuantizationOptions options) {
    return quantize_nf4(w.data(), w.shape(), options);
}

void dequantize_into(const QuantizedTensor& q, std::span<float> out) {
    q.validate();
    if (out.size() != q.numel()) throw DimensionError("dequantize: output buffer has wrong size");
    const auto& cb = nf4_codebook();
    const std::size_t bs = q.options().block_size;
    const auto packed = q.packed_codes();
    for (std::size_t b = 0, blocks = q.num_blocks(); b < blocks; ++b) {
        const float s = q.block_scale(b);
        const std::size_t hi = std::min(q.numel(), (b + 1) * bs);
        for (std::size_t i = b * bs; i < hi; ++i) {
            out[i] = cb[(packed[i / 2] >> (4 * (i % 2))) & 0xF] * s;
        }
    }
}

Tensor dequantize(const QuantizedTensor& q) {
    std::vector<float> values(q.numel());
    dequantize_into(q, values);
    return Tensor::from(q.shape(), std::move(values));
}

BitBudgetReport bits_per_parameter(const QuantizedTensor& q) {
    BitBudgetReport r;
    const double n = static_cast<double>(q.numel());
    r.payload = 4.0;
    if (q.options().double_quant) {
        r.scale_bits = 8.0 * static_cast<double>(q.num_blocks()) / n;
        r.second_level_bits = 32.0 * static_cast<double>(q.num_groups()) / n;
        r.offset_bits = 32.0 / n;
    } else {
        r.scale_bits = 32.0 * static_cast<double>(q.num_blocks()) / n;
    }
    r.metadata = r.scale_bits + r.second_level_bits + r.offset_bits;
    r.total = r.payload + r.metadata;
    return r;
}

BitBudgetReport nominal_bits_per_parameter(std::size_t block_size, std::size_t dq_block_size, bool double_quant) {
    if (block_size == 0 || (double_quant && dq_block_size == 0)) throw ContractError("block sizes must be positive");
    BitBudgetReport r;
    r.payload = 4.0;
    const double b1 = static_cast<double>(block_size);
    if (double_quant) {
        r.scale_bits = 8.0 / b1;
        r.second_level_bits = 32.0 / (b1 * static_cast<double>(dq_block_size));
    } else {
        r.scale_bits = 32.0 / b1;
    }
    r.metadata = r.scale_bits + r.second_level_bits;
    r.total = r.payload + r.metadata;
    return r;
}

void write_quantized(std::ostream& os, const QuantizedTensor& q) {
    using namespace io;
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(q.shape().size()));
    for (auto d : q.shape()) write_le<std::uint64_t>(os, d);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(q.options().block_size));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(q.options().dq_block_size));
    write_le<std::uint8_t>(os, q.options().double_quant ? 1 : 0);
    write_array(os, std::vector<std::uint8_t>(q.packed_codes().begin(), q.packed_codes().end()));
    if (q.options().double_quant) {
        write_le<float>(os, q.scale_offset());
        write_array(os, std::vector<std::int8_t>(q.scale_codes().begin(), q.scale_codes().end()));
        write_array(os, std::vector<float>(q.group_scales().begin(), q.group_scales().end()));
    } else {
        write_array(os, std::vector<float>(q.scales().begin(), q.scales().end()));
    }
}

QuantizedTensor read_quantized(std::istream& is) {
    using namespace io;
    QuantizedTensor q;
    auto rank = read_le<std::uint32_t>(is);
    if (rank > 8) throw DataError("quantized tensor rank " + std::to_string(rank) + " is implausible");
    for (std::uint32_t i = 0; i < rank; ++i) q.shape_.push_back(static_cast<std::size_t>(read_le<std::uint64_t>(is)));
    q.numel_ = shape_numel(q.shape_);
    q.options_.block_size = read_le<std::uint32_t>(is);
    q.options_.dq_block_size = read_le<std::uint32_t>(is);
    q.options_.double_quant = read_le<std::uint8_t>(is) != 0;
    q.packed_ = read_array<std::uint8_t>(is);
    if (q.options_.double_quant) {
        q.scale_offset_ = read_le<float>(is);
        q.scale_codes_ = read_array<std::int8_t>(is);
        q.group_scales_ = read_array<float>(is);
    } else {
        q.scales_ = read_array<float>(is);
    }
    q.validate();
    return q;
}

}  // namespace peftqa
