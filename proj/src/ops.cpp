#include "cacom/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace cacom::ad {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.numel() == 1; }

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  std::vector<float> y(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return record_op(x.shape(), std::move(y), {&x}, [x, dfdx](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    auto xv = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out.grad[i] * dfdx(xv[i], out.value[i]);
  });
}

// Views a rank-1/rank-2 tensor as (outer, axis_len, inner) around `axis`.
struct AxisLayout {
  std::size_t outer, len, inner;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  if (s.empty() || s.size() > 2 || axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  if (s.size() == 1) return {1, s[0], 1};
  return axis == 0 ? AxisLayout{1, s[0], s[1]} : AxisLayout{s[0], s[1], 1};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<float> y(m * n);
  MMap(y.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return record_op({m, n}, std::move(y), {&a, &b}, [a, b, m, k, n](Node& out) {
    CMap g(out.grad.data(), m, n);
    if (a.requires_grad()) MMap(a.node()->grad_buffer().data(), m, k).noalias() += g * CMap(b.data().data(), k, n).transpose();
    if (b.requires_grad()) MMap(b.node()->grad_buffer().data(), k, n).noalias() += CMap(a.data().data(), m, k).transpose() * g;
  });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, std::size_t groups, bool transpose_b) {
  require_rank2(a, "batched_matmul");
  require_rank2(b, "batched_matmul");
  if (groups == 0 || a.dim(0) % groups != 0 || b.dim(0) % groups != 0) {
    throw DimensionError("batched_matmul: rows not divisible into " + std::to_string(groups) + " groups");
  }
  const auto p = a.dim(0) / groups, k = a.dim(1);
  const auto brows = b.dim(0) / groups, bcols = b.dim(1);
  const auto n = transpose_b ? brows : bcols;
  if ((transpose_b ? bcols : brows) != k) {
    throw DimensionError("batched_matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<float> y(groups * p * n);
  for (std::size_t g = 0; g < groups; ++g) {
    CMap ag(a.data().data() + g * p * k, p, k);
    CMap bg(b.data().data() + g * brows * bcols, brows, bcols);
    MMap yg(y.data() + g * p * n, p, n);
    if (transpose_b) {
      yg.noalias() = ag * bg.transpose();
    } else {
      yg.noalias() = ag * bg;
    }
  }
  return record_op({groups * p, n}, std::move(y), {&a, &b}, [a, b, groups, p, k, n, brows, bcols, transpose_b](Node& out) {
    for (std::size_t g = 0; g < groups; ++g) {
      CMap gy(out.grad.data() + g * p * n, p, n);
      CMap ag(a.data().data() + g * p * k, p, k);
      CMap bg(b.data().data() + g * brows * bcols, brows, bcols);
      if (a.requires_grad()) {
        MMap ga(a.node()->grad_buffer().data() + g * p * k, p, k);
        if (transpose_b) {
          ga.noalias() += gy * bg;
        } else {
          ga.noalias() += gy * bg.transpose();
        }
      }
      if (b.requires_grad()) {
        MMap gb(b.node()->grad_buffer().data() + g * brows * bcols, brows, bcols);
        if (transpose_b) {
          gb.noalias() += gy.transpose() * ag;
        } else {
          gb.noalias() += ag.transpose() * gy;
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (is_scalar(b) && !is_scalar(a)) {
    std::vector<float> y(a.data().begin(), a.data().end());
    const float s = b[0];
    for (auto& v : y) v += s;
    return record_op(a.shape(), std::move(y), {&a, &b}, [a, b](Node& out) {
      if (a.requires_grad()) {
        auto ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.grad[i];
      }
      if (b.requires_grad()) {
        float acc = 0.0f;
        for (float g : out.grad) acc += g;
        b.node()->grad_buffer()[0] += acc;
      }
    });
  }
  require_same_shape(a, b, "add");
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return record_op(a.shape(), std::move(y), {&a, &b}, [a, b](Node& out) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->node()->grad_buffer();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += out.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool broadcast = is_scalar(b) && !is_scalar(a);
  if (!broadcast) require_same_shape(a, b, "mul");
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[broadcast ? 0 : i];
  return record_op(a.shape(), std::move(y), {&a, &b}, [a, b, broadcast](Node& out) {
    if (a.requires_grad()) {
      auto ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.grad[i] * b[broadcast ? 0 : i];
    }
    if (b.requires_grad()) {
      auto gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) gb[broadcast ? 0 : i] += out.grad[i] * a[i];
    }
  });
}

Tensor scale(const Tensor& x, float c) {
  std::vector<float> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= c;
  return record_op(x.shape(), std::move(y), {&x}, [x, c](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * out.grad[i];
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_rowwise");
  const auto n = x.dim(0), d = x.dim(1);
  if (bias.numel() != d) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " vs rows of " + shape_str(x.shape()));
  }
  std::vector<float> y(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] += bias[c];
  return record_op(x.shape(), std::move(y), {&x, &bias}, [x, bias, n, d](Node& out) {
    if (x.requires_grad()) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out.grad[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.node()->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += out.grad[r * d + c];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](float, float y) { return y * (1.0f - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor elu(const Tensor& x) {
  return unary(
      x, [](float v) { return v > 0.0f ? v : std::expm1(v); }, [](float v, float y) { return v > 0.0f ? 1.0f : y + 1.0f; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](float v) { return std::fabs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto lay = axis_layout(x.shape(), axis);
  std::vector<float> y(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < lay.outer; ++o) {
    for (std::size_t in = 0; in < lay.inner; ++in) {
      const std::size_t base = o * lay.len * lay.inner + in;
      float mx = xv[base];
      for (std::size_t l = 1; l < lay.len; ++l) mx = std::max(mx, xv[base + l * lay.inner]);
      float total = 0.0f;
      for (std::size_t l = 0; l < lay.len; ++l) {
        float e = std::exp(xv[base + l * lay.inner] - mx);
        y[base + l * lay.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < lay.len; ++l) y[base + l * lay.inner] /= total;
    }
  }
  return record_op(x.shape(), std::move(y), {&x}, [x, lay](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t o = 0; o < lay.outer; ++o) {
      for (std::size_t in = 0; in < lay.inner; ++in) {
        const std::size_t base = o * lay.len * lay.inner + in;
        float dot = 0.0f;
        for (std::size_t l = 0; l < lay.len; ++l) {
          const auto i = base + l * lay.inner;
          dot += out.grad[i] * out.value[i];
        }
        for (std::size_t l = 0; l < lay.len; ++l) {
          const auto i = base + l * lay.inner;
          gx[i] += out.value[i] * (out.grad[i] - dot);
        }
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto rank = parts[0].rank();
  if (rank == 0 || rank > 2 || axis >= rank) throw DimensionError("concat: invalid axis for " + shape_str(parts[0].shape()));
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    if (rank == 2 && p.dim(1 - axis) != parts[0].dim(1 - axis)) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
  }
  // Everything reduces to (outer rows) x (per-part row width).
  const std::size_t outer = (rank == 2 && axis == 1) ? parts[0].dim(0) : 1;
  std::vector<std::size_t> widths;
  std::size_t total_width = 0;
  for (const auto& p : parts) {
    widths.push_back(p.numel() / outer);
    total_width += widths.back();
  }
  std::vector<float> y(outer * total_width);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(pv.begin() + r * widths[k], widths[k], y.begin() + r * total_width + offset);
    offset += widths[k];
  }
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.dim(axis);
  return record_op(std::move(shape), std::move(y), parts, [parts, widths, outer, total_width](Node& out) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        auto gp = parts[k].node()->grad_buffer();
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += out.grad[r * total_width + offset + c];
      }
      offset += widths[k];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank()) throw DimensionError("slice: invalid axis for " + shape_str(x.shape()));
  if (begin > end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = (x.rank() == 2 && axis == 1) ? x.dim(0) : 1;
  const std::size_t row_width = x.numel() / rows;
  const std::size_t unit = (x.rank() == 2 && axis == 0) ? x.dim(1) : 1;
  const std::size_t from = begin * unit, width = (end - begin) * unit;
  std::vector<float> y(rows * width);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.begin() + r * row_width + from, width, y.begin() + r * width);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  return record_op(std::move(shape), std::move(y), {&x}, [x, rows, row_width, from, width](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) gx[r * row_width + from + c] += out.grad[r * width + c];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<float> y(x.data().begin(), x.data().end());
  return record_op(std::move(shape), std::move(y), {&x}, [x](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows) {
  require_rank2(x, "gather_rows");
  const auto n = x.dim(0), d = x.dim(1);
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  std::vector<float> y(idx.size() * d);
  auto xv = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " out of " + std::to_string(n));
    std::copy_n(xv.begin() + idx[r] * d, d, y.begin() + r * d);
  }
  const std::size_t rows_out = idx.size();
  return record_op({rows_out, d}, std::move(y), {&x}, [x, idx = std::move(idx), d](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx[idx[r] * d + c] += out.grad[r * d + c];
  });
}

Tensor select_per_row(const Tensor& x, std::span<const std::uint32_t> cols) {
  require_rank2(x, "select_per_row");
  const auto n = x.dim(0), d = x.dim(1);
  if (cols.size() != n) throw DimensionError("select_per_row: need one column index per row");
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  std::vector<float> y(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (idx[r] >= d) throw DimensionError("select_per_row: column out of range");
    y[r] = x[r * d + idx[r]];
  }
  return record_op({n, 1}, std::move(y), {&x}, [x, idx = std::move(idx), d](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) gx[r * d + idx[r]] += out.grad[r];
  });
}

Tensor sum(const Tensor& x) {
  float total = 0.0f;
  for (float v : x.data()) total += v;
  return record_op({}, {total}, {&x}, [x](Node& out) {
    if (!x.requires_grad()) return;
    for (auto& g : x.node()->grad_buffer()) g += out.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor group_weighted_sum(const Tensor& x, std::span<const float> weights, std::size_t group_size) {
  require_rank2(x, "group_weighted_sum");
  const auto n = x.dim(0), d = x.dim(1);
  if (group_size == 0 || n % group_size != 0 || weights.size() != n) {
    throw DimensionError("group_weighted_sum: " + shape_str(x.shape()) + " with group " + std::to_string(group_size));
  }
  const auto groups = n / group_size;
  std::vector<float> w(weights.begin(), weights.end());
  std::vector<float> y(groups * d, 0.0f);
  auto xv = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    if (w[r] == 0.0f) continue;
    const auto g = r / group_size;
    for (std::size_t c = 0; c < d; ++c) y[g * d + c] += w[r] * xv[r * d + c];
  }
  return record_op({groups, d}, std::move(y), {&x}, [x, w = std::move(w), group_size, d](Node& out) {
    if (!x.requires_grad()) return;
    auto gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < w.size(); ++r) {
      if (w[r] == 0.0f) continue;
      const auto g = r / group_size;
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += w[r] * out.grad[g * d + c];
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.numel() == 0) throw DimensionError("mse of empty tensors");
  const float inv_n = 1.0f / static_cast<float>(a.numel());
  float total = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const float d = a[i] - b[i];
    total += d * d;
  }
  return record_op({}, {total * inv_n}, {&a, &b}, [a, b, inv_n](Node& out) {
    const float g = out.grad[0] * 2.0f * inv_n;
    if (a.requires_grad()) {
      auto ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (a[i] - b[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (a[i] - b[i]);
    }
  });
}

Tensor bce(const Tensor& p, const Tensor& y) {
  require_same_shape(p, y, "bce");
  if (p.numel() == 0) throw DimensionError("bce of empty tensors");
  const float inv_n = 1.0f / static_cast<float>(p.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const float pc = std::clamp(p[i], kBceEpsilon, 1.0f - kBceEpsilon);
    total -= y[i] * std::log(pc) + (1.0f - y[i]) * std::log(1.0f - pc);
  }
  return record_op({}, {static_cast<float>(total) * inv_n}, {&p, &y}, [p, y, inv_n](Node& out) {
    const float g = out.grad[0] * inv_n;
    if (p.requires_grad()) {
      auto gp = p.node()->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) {
        const float pi = p[i];
        if (pi < kBceEpsilon || pi > 1.0f - kBceEpsilon) continue;
        gp[i] += g * (-y[i] / pi + (1.0f - y[i]) / (1.0f - pi));
      }
    }
    if (y.requires_grad()) {
      auto gy = y.node()->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const float pc = std::clamp(p[i], kBceEpsilon, 1.0f - kBceEpsilon);
        gy[i] += g * (std::log(1.0f - pc) - std::log(pc));
      }
    }
  });
}

Tensor detach(const Tensor& x) { return Tensor::constant(x.shape(), std::vector<float>(x.data().begin(), x.data().end())); }

Tensor gru_cell(const Tensor& x, const Tensor& h, const GruParams& p) {
  require_rank2(x, "gru_cell");
  require_rank2(h, "gru_cell");
  const auto dh = h.dim(1);
  if (p.w_x.rank() != 2 || p.w_x.dim(1) != 3 * dh || p.w_h.rank() != 2 || p.w_h.dim(0) != dh ||
      p.w_h.dim(1) != 3 * dh || p.b_x.numel() != 3 * dh || p.b_h.numel() != 3 * dh || x.dim(0) != h.dim(0)) {
    throw DimensionError("gru_cell: parameters do not match x " + shape_str(x.shape()) + ", h " + shape_str(h.shape()));
  }
  Tensor gx = add_rowwise(matmul(x, p.w_x), p.b_x);
  Tensor gh = add_rowwise(matmul(h, p.w_h), p.b_h);
  Tensor r = sigmoid(add(slice(gx, 1, 0, dh), slice(gh, 1, 0, dh)));
  Tensor z = sigmoid(add(slice(gx, 1, dh, 2 * dh), slice(gh, 1, dh, 2 * dh)));
  Tensor c = tanh(add(slice(gx, 1, 2 * dh, 3 * dh), mul(r, slice(gh, 1, 2 * dh, 3 * dh))));
  // (1 - z) * c + z * h  ==  c + z * (h - c)
  return add(c, mul(z, sub(h, c)));
}

}  // namespace cacom::ad
