#include "cacom/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cacom::quant {

CodeRange::CodeRange(int b) : bits(b) {
  if (b < kMinBits || b > kMaxBits) {
    throw std::invalid_argument("quantizer bit width " + std::to_string(b) + " outside [" + std::to_string(kMinBits) +
                                ", " + std::to_string(kMaxBits) + "]");
  }
}

std::vector<float> QuantizedVector::dequantize() const {
  std::vector<float> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = static_cast<float>(codes[i]) * step;
  return out;
}

namespace {

std::int32_t code_of(float v, float step, CodeRange r) {
  const float x = std::clamp(v / step, static_cast<float>(-r.qn()), static_cast<float>(r.qp()));
  return static_cast<std::int32_t>(std::nearbyint(x));
}

}  // namespace

QuantizedVector quantize(std::span<const float> v, float step, int bits) {
  const CodeRange r(bits);
  if (!(step > 0.0f) || !std::isfinite(step)) throw std::invalid_argument("quantize: step size must be positive");
  QuantizedVector q;
  q.bits = bits;
  q.step = step;
  q.codes.reserve(v.size());
  for (float x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument("quantize: non-finite input");
    q.codes.push_back(code_of(x, step, r));
  }
  return q;
}

float lsq_grad_scale(std::size_t d, int bits) {
  const CodeRange r(bits);
  return 1.0f / std::sqrt(static_cast<float>(d) * static_cast<float>(r.qp()));
}

LsqGradients lsq_gradients(std::span<const float> upstream, std::span<const float> v, float step, int bits,
                           std::size_t d) {
  const CodeRange r(bits);
  if (upstream.size() != v.size()) throw DimensionError("lsq_gradients: upstream/input length mismatch");
  if (d == 0 || v.size() % d != 0) throw DimensionError("lsq_gradients: input is not a whole number of vectors");
  const float lo = static_cast<float>(-r.qn());
  const float hi = static_cast<float>(r.qp());
  LsqGradients g;
  g.grad_v.resize(v.size());
  double grad_s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const float ratio = v[k] / step;
    float ds;
    if (ratio <= lo) {
      g.grad_v[k] = 0.0f;
      ds = lo;
    } else if (ratio >= hi) {
      g.grad_v[k] = 0.0f;
      ds = hi;
    } else {
      g.grad_v[k] = upstream[k];
      ds = -ratio + std::nearbyint(ratio);
    }
    grad_s += static_cast<double>(ds) * upstream[k];
  }
  g.grad_s = static_cast<float>(grad_s) * lsq_grad_scale(d, bits);
  return g;
}

float lsq_initial_step(std::span<const float> v, int bits) {
  const CodeRange r(bits);
  if (v.empty()) return 1.0f;
  double total = 0.0;
  for (float x : v) total += std::fabs(x);
  const double m = total / static_cast<double>(v.size());
  if (m == 0.0) return 1.0f;
  return std::max(kMinStep, static_cast<float>(2.0 * m / std::sqrt(static_cast<double>(r.qp()))));
}

BitString::BitString(std::vector<std::uint8_t> bytes, std::size_t bit_length)
    : bytes_(std::move(bytes)), bit_length_(bit_length) {
  if (bytes_.size() * 8 < bit_length_) throw std::out_of_range("BitString: byte buffer shorter than bit length");
  bytes_.resize((bit_length_ + 7) / 8);
}

void BitString::push(bool bit) {
  if (bit_length_ % 8 == 0) bytes_.push_back(0);
  if (bit) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bit_length_ % 8));
  ++bit_length_;
}

bool BitString::operator[](std::size_t i) const {
  if (i >= bit_length_) throw std::out_of_range("BitString index");
  return (bytes_[i / 8] >> (7 - i % 8)) & 1u;
}

std::string BitString::to_string() const {
  std::string s;
  s.reserve(bit_length_);
  for (std::size_t i = 0; i < bit_length_; ++i) s.push_back((*this)[i] ? '1' : '0');
  return s;
}

BitString BitString::from_string(std::string_view s) {
  BitString b;
  for (char c : s) {
    if (c != '0' && c != '1') throw std::invalid_argument("BitString: expected only '0'/'1'");
    b.push(c == '1');
  }
  return b;
}

BitString pack_bits(const QuantizedVector& q) {
  const CodeRange r(q.bits);
  BitString out;
  for (auto code : q.codes) {
    if (code < -r.qn() || code > r.qp()) {
      throw std::out_of_range("pack_bits: code " + std::to_string(code) + " outside [" + std::to_string(-r.qn()) + ", " +
                              std::to_string(r.qp()) + "]");
    }
    const auto u = static_cast<std::uint32_t>(code);
    for (int b = q.bits - 1; b >= 0; --b) out.push((u >> b) & 1u);
  }
  return out;
}

QuantizedVector unpack_bits(const BitString& bits_in, std::size_t d, int bits, float step) {
  const CodeRange r(bits);
  if (bits_in.size() < d * static_cast<std::size_t>(bits)) {
    throw std::out_of_range("unpack_bits: " + std::to_string(bits_in.size()) + " bits cannot hold " + std::to_string(d) +
                            " codes of " + std::to_string(bits) + " bits");
  }
  QuantizedVector q;
  q.bits = bits;
  q.step = step;
  q.codes.reserve(d);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < d; ++k) {
    std::uint32_t u = 0;
    for (int b = 0; b < bits; ++b) u = (u << 1) | static_cast<std::uint32_t>(bits_in[pos++]);
    // sign-extend
    if (u & (1u << (bits - 1))) u |= ~((1u << bits) - 1u);
    q.codes.push_back(static_cast<std::int32_t>(u));
  }
  return q;
}

LsqQuantizer::LsqQuantizer(int bits, float initial_step)
    : range_(bits), step_(ad::Tensor::parameter({}, {std::max(kMinStep, initial_step)})) {}

void LsqQuantizer::calibrate(std::span<const float> first_batch) {
  if (calibrated_) return;
  step_.mutable_data()[0] = lsq_initial_step(first_batch, range_.bits);
  calibrated_ = true;
}

void LsqQuantizer::set_step(float s) {
  step_.mutable_data()[0] = std::max(kMinStep, s);
  calibrated_ = true;
}

void LsqQuantizer::clamp_step() {
  auto s = step_.mutable_data();
  if (!(s[0] >= kMinStep)) s[0] = kMinStep;
}

LsqQuantizer::Output LsqQuantizer::forward(const ad::Tensor& v) const {
  if (v.rank() == 0 || v.rank() > 2) throw DimensionError("LsqQuantizer::forward expects [d] or [rows x d]");
  const std::size_t d = v.shape().back();
  if (d == 0) throw DimensionError("LsqQuantizer::forward: empty vectors");
  const float s = step_value();
  QuantizedVector q = quantize(v.data(), s, range_.bits);
  std::vector<float> values = q.dequantize();
  const int bits = range_.bits;
  ad::Tensor step = step_;
  Output out;
  out.values = ad::record_op(v.shape(), std::move(values), {&v, &step}, [v, step, bits, d](ad::Node& node) {
    auto g = lsq_gradients(node.grad, v.data(), step[0], bits, d);
    if (v.requires_grad()) {
      auto gv = v.node()->grad_buffer();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g.grad_v[i];
    }
    if (step.requires_grad()) step.node()->grad_buffer()[0] += g.grad_s;
  });
  out.codes = std::move(q.codes);
  return out;
}

QuantizedVector LsqQuantizer::quantize_forward(std::span<const float> v) {
  if (v.empty()) throw DimensionError("quantize_forward: empty vector");
  auto q = quantize(v, step_value(), range_.bits);
  last_input_.emplace(v.begin(), v.end());
  return q;
}

LsqGradients LsqQuantizer::quantize_backward(std::span<const float> upstream) const {
  if (!last_input_) throw std::logic_error("quantize_backward called before quantize_forward");
  return lsq_gradients(upstream, *last_input_, step_value(), range_.bits, last_input_->size());
}

}  // namespace cacom::quant
