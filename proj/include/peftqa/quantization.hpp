#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "peftqa/tensor.hpp"

namespace peftqa {

/// Affine n-bit integer grid: q = round(clamp((w - z) / s, -2^(n-1), 2^(n-1)-1)).
struct UniformQuantConfig {
    int bits = 8;
    float scale = 1.0f;
    float zero_point = 0.0f;

    void validate() const;
    int qmin() const { return -(1 << (bits - 1)); }
    int qmax() const { return (1 << (bits - 1)) - 1; }
};

/// Rounds half away from zero after clamping to the representable range.
int quantize_uniform(float w, const UniformQuantConfig& cfg);
float dequantize_uniform(int q, const UniformQuantConfig& cfg);

/// Standard normal quantile function, accurate to double precision.
double inverse_normal_cdf(double p);

/// The 16-entry 4-bit NormalFloat table: normal quantiles normalized to
/// [-1, 1] with an exact zero.
class Nf4Codebook {
public:
    static constexpr std::size_t kSize = 16;

    explicit Nf4Codebook(std::array<float, kSize> values);

    float operator[](std::size_t i) const { return values_[i]; }
    const std::array<float, kSize>& values() const { return values_; }
    std::uint8_t zero_index() const { return zero_index_; }

    /// Index of the entry closest to x; ties go to the smaller magnitude.
    std::uint8_t nearest(float x) const;

    float max_adjacent_gap() const;

private:
    std::array<float, kSize> values_;
    std::uint8_t zero_index_ = 0;
};

/// Builds the asymmetric NF4 table: 8 quantiles on the positive side, 7 on
/// the negative side, and zero.
Nf4Codebook build_nf4_codebook();

/// Process-wide copy of build_nf4_codebook().
const Nf4Codebook& nf4_codebook();

struct QuantizationOptions {
    std::size_t block_size = 64;      // elements per absmax block
    bool double_quant = true;
    std::size_t dq_block_size = 256;  // absmax scales per second-level group

    friend bool operator==(const QuantizationOptions&, const QuantizationOptions&) = default;
};

/// Block-wise NF4 codes plus per-block absmax scales. With double
/// quantization the scales are stored as int8 codes relative to a tensor-wide
/// mean offset, with one float32 scale per group of `dq_block_size` blocks.
class QuantizedTensor {
public:
    QuantizedTensor() = default;

    /// Assembles a tensor from raw parts, validating codes and scale layout.
    /// `codes` holds one code per element.
    static QuantizedTensor from_parts(Shape shape, std::span<const std::uint8_t> codes, QuantizationOptions options,
                                      std::vector<float> scales, std::vector<std::int8_t> scale_codes = {},
                                      std::vector<float> group_scales = {}, float scale_offset = 0.0f);

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return numel_; }
    const QuantizationOptions& options() const { return options_; }
    std::size_t num_blocks() const;
    std::size_t num_groups() const;

    std::uint8_t code(std::size_t i) const;
    /// Effective (dequantized) absmax for block b.
    float block_scale(std::size_t b) const;

    std::span<const std::uint8_t> packed_codes() const { return packed_; }
    std::span<const float> scales() const { return scales_; }
    std::span<const std::int8_t> scale_codes() const { return scale_codes_; }
    std::span<const float> group_scales() const { return group_scales_; }
    float scale_offset() const { return scale_offset_; }

    /// Bytes occupied by codes and scale metadata.
    std::size_t storage_bytes() const;

    /// Structural validation; throws DataError on inconsistency.
    void validate() const;

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;

private:
    friend QuantizedTensor quantize_nf4(std::span<const float>, Shape, QuantizationOptions);
    friend QuantizedTensor read_quantized(std::istream&);

    Shape shape_;
    std::size_t numel_ = 0;
    QuantizationOptions options_;
    std::vector<std::uint8_t> packed_;
    std::vector<float> scales_;
    std::vector<std::int8_t> scale_codes_;
    std::vector<float> group_scales_;
    float scale_offset_ = 0.0f;
};

QuantizedTensor quantize_nf4(std::span<const float> values, Shape shape, QuantizationOptions options = {});
QuantizedTensor quantize_nf4(const Tensor& w, QuantizationOptions options = {});

void dequantize_into(const QuantizedTensor& q, std::span<float> out);
Tensor dequantize(const QuantizedTensor& q);

struct BitBudgetReport {
    double payload = 0.0;            // code bits per parameter
    double scale_bits = 0.0;         // first-level scales (float32 or int8 codes)
    double second_level_bits = 0.0;  // float32 group scales under double quantization
    double offset_bits = 0.0;        // tensor-wide offset, amortized
    double metadata = 0.0;
    double total = 0.0;
};

BitBudgetReport bits_per_parameter(const QuantizedTensor& q);

/// Asymptotic budget for a tensor whose size is a multiple of both block
/// sizes; the per-tensor offset amortizes to zero.
BitBudgetReport nominal_bits_per_parameter(std::size_t block_size, std::size_t dq_block_size, bool double_quant);

/// Two codes per byte, element 2i in the low nibble.
std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes);
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

/// Little-endian wire format: shape, block sizes, double-quant flag, packed
/// codes, then the scale payload.
void write_quantized(std::ostream& os, const QuantizedTensor& q);
QuantizedTensor read_quantized(std::istream& is);

}  // namespace peftqa
