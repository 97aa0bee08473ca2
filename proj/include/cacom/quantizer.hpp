#pragma once

// Learned-step-size uniform quantization of message vectors and the b-bit
// two's-complement wire encoding of its integer codes.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cacom/tensor.hpp"

namespace cacom::quant {

/// Signed code range for a b-bit quantizer: [-Q_N, Q_P].
struct CodeRange {
  int bits;
  explicit CodeRange(int b);
  std::int32_t qn() const { return std::int32_t{1} << (bits - 1); }
  std::int32_t qp() const { return (std::int32_t{1} << (bits - 1)) - 1; }
};

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 16;
inline constexpr float kMinStep = 1e-6f;

struct QuantizedVector {
  std::vector<std::int32_t> codes;
  int bits = 4;
  float step = 1.0f;

  std::size_t bit_cost() const { return codes.size() * static_cast<std::size_t>(bits); }
  std::vector<float> dequantize() const;
  bool operator==(const QuantizedVector&) const = default;
};

/// code = round_half_even(clip(v / s, -Q_N, Q_P)). Throws on non-finite input.
QuantizedVector quantize(std::span<const float> v, float step, int bits);

struct LsqGradients {
  std::vector<float> grad_v;
  float grad_s = 0.0f;
};

/// Straight-through gradient on v and the step-size gradient, the latter
/// scaled by 1/sqrt(d * Q_P) per length-d vector. `v` may hold several
/// vectors back to back.
LsqGradients lsq_gradients(std::span<const float> upstream, std::span<const float> v, float step, int bits,
                           std::size_t d);

float lsq_grad_scale(std::size_t d, int bits);

/// 2 * mean|v| / sqrt(Q_P), floored at kMinStep; 1.0 when v is all zero.
float lsq_initial_step(std::span<const float> v, int bits);

/// Bit sequence, MSB-first within each byte; the trailing byte is zero padded.
class BitString {
 public:
  BitString() = default;
  BitString(std::vector<std::uint8_t> bytes, std::size_t bit_length);

  void push(bool bit);
  bool operator[](std::size_t i) const;
  std::size_t size() const { return bit_length_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  std::string to_string() const;
  static BitString from_string(std::string_view s);
  bool operator==(const BitString&) const = default;

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t bit_length_ = 0;
};

/// Each code as `bits`-bit two's complement, concatenated. Throws
/// std::out_of_range for a code outside the quantizer range.
BitString pack_bits(const QuantizedVector& q);
/// Reads `d` codes of `bits` bits from the front of `bits_in`; throws
/// std::out_of_range when it is shorter than d * bits.
QuantizedVector unpack_bits(const BitString& bits_in, std::size_t d, int bits, float step = 1.0f);

class LsqQuantizer {
 public:
  explicit LsqQuantizer(int bits, float initial_step = 1.0f);

  int bits() const { return range_.bits; }
  CodeRange range() const { return range_; }
  float step_value() const { return step_[0]; }
  ad::Tensor& step() { return step_; }
  const ad::Tensor& step() const { return step_; }

  bool calibrated() const { return calibrated_; }
  /// Sets s from the first batch seen (no-op once calibrated).
  void calibrate(std::span<const float> first_batch);
  void set_step(float s);
  /// Re-imposes s >= kMinStep after an optimizer update.
  void clamp_step();

  struct Output {
    ad::Tensor values;                // code * s, same shape as the input
    std::vector<std::int32_t> codes;  // row-major, one per element
  };
  /// Taped quantization of [rows x d] (or [d]); gradients per lsq_gradients.
  Output forward(const ad::Tensor& v) const;

  /// Untaped single-vector forward that remembers its input for backward().
  QuantizedVector quantize_forward(std::span<const float> v);
  /// Throws std::logic_error if no quantize_forward preceded it.
  LsqGradients quantize_backward(std::span<const float> upstream) const;

 private:
  CodeRange range_;
  ad::Tensor step_;
  bool calibrated_ = false;
  std::optional<std::vector<float>> last_input_;
};

}  // namespace cacom::quant
