#include "hmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace hmamba {
namespace ops {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Tensor with_node(Tensor out, std::vector<Tensor> parents,
                 std::function<void(Tensor&)> backward) {
  out.node() = std::make_shared<Node>();
  out.node()->parents = std::move(parents);
  out.node()->backward = std::move(backward);
  return out;
}

bool any_grad(const Tensor& a) { return a.requires_grad(); }
bool any_grad(const Tensor& a, const Tensor& b) { return a.requires_grad() || b.requires_grad(); }

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Shared scaffold for elementwise unary ops. `df(x, y)` is the local
// derivative given input and output values.
template <typename F, typename D>
Tensor unary_op(const Tensor& a, F&& f, D&& df) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [df](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    const auto& pv = p.values();
    const auto& ov2 = o.values();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i] * df(pv[i], ov2[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a, b}, [](Tensor& o) {
    const auto& og = o.grad();
    for (int side = 0; side < 2; ++side) {
      Tensor& p = o.node()->parents[static_cast<std::size_t>(side)];
      if (!p.requires_grad()) continue;
      auto& pg = p.grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a, b}, [](Tensor& o) {
    const auto& og = o.grad();
    Tensor& pa = o.node()->parents[0];
    Tensor& pb = o.node()->parents[1];
    if (pa.requires_grad()) {
      auto& pg = pa.grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i];
    }
    if (pb.requires_grad()) {
      auto& pg = pb.grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= og[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a, b}, [](Tensor& o) {
    const auto& og = o.grad();
    Tensor& pa = o.node()->parents[0];
    Tensor& pb = o.node()->parents[1];
    if (pa.requires_grad()) {
      auto& pg = pa.grad();
      const auto& bv2 = pb.values();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i] * bv2[i];
    }
    if (pb.requires_grad()) {
      auto& pg = pb.grad();
      const auto& av2 = pa.values();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i] * av2[i];
    }
  });
}

Tensor scalar_mul(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor scalar_add(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double p) {
  return unary_op(a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, [](double x) { return stable_sigmoid(x); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, [](double x) { return x * stable_sigmoid(x); },
                  [](double x, double) {
                    double s = stable_sigmoid(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, [](double x) { return stable_softplus(x); },
                  [](double x, double) { return stable_sigmoid(x); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(a, [floor](double x) { return x < floor ? floor : x; },
                  [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

Tensor flip_sequence(const Tensor& a) {
  if (a.ndim() != 1 && a.ndim() != 2) {
    throw ShapeError("flip_sequence: expected 1-D or 2-D tensor, got " + shape_str(a.shape()));
  }
  int t_len = a.dim(0);
  std::size_t row = a.ndim() == 2 ? static_cast<std::size_t>(a.dim(1)) : 1;
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const auto& av = a.values();
  auto& ov = out.values();
  for (int t = 0; t < t_len; ++t) {
    std::size_t src = static_cast<std::size_t>(t) * row;
    std::size_t dst = static_cast<std::size_t>(t_len - 1 - t) * row;
    for (std::size_t j = 0; j < row; ++j) ov[dst + j] = av[src + j];
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [t_len, row](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (int t = 0; t < t_len; ++t) {
      std::size_t src = static_cast<std::size_t>(t_len - 1 - t) * row;
      std::size_t dst = static_cast<std::size_t>(t) * row;
      for (std::size_t j = 0; j < row; ++j) pg[dst + j] += og[src + j];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) {
    if (p.ndim() != 2) throw ShapeError("concat: expected 2-D tensors");
  }
  int fixed_axis = 1 - axis;
  int fixed = parts[0].dim(fixed_axis);
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.dim(fixed_axis) != fixed) {
      throw ShapeError("concat: mismatched dimension " + std::to_string(fixed_axis) + ": " +
                       shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.dim(axis);
    rg = rg || p.requires_grad();
  }
  std::vector<int> out_shape =
      axis == 0 ? std::vector<int>{total, fixed} : std::vector<int>{fixed, total};
  Tensor out = Tensor::zeros(out_shape, rg);
  int offset = 0;
  for (const auto& p : parts) {
    int r = p.dim(0), c = p.dim(1);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        if (axis == 0) {
          out.at_mut(offset + i, j) = p.at(i, j);
        } else {
          out.at_mut(i, offset + j) = p.at(i, j);
        }
      }
    }
    offset += p.dim(axis);
  }
  if (!rg) return out;
  return with_node(std::move(out), parts, [axis](Tensor& o) {
    const auto& og = o.grad();
    int cols = o.dim(1);
    int offset2 = 0;
    for (auto& p : o.node()->parents) {
      int r = p.dim(0), c = p.dim(1);
      if (p.requires_grad()) {
        auto& pg = p.grad();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) {
            std::size_t src =
                axis == 0 ? static_cast<std::size_t>(offset2 + i) * cols + j
                          : static_cast<std::size_t>(i) * cols + (offset2 + j);
            pg[static_cast<std::size_t>(i) * c + j] += og[src];
          }
        }
      }
      offset2 += p.dim(axis);
    }
  });
}

Tensor slice(const Tensor& a, int axis, int start, int length) {
  if (a.ndim() != 2) throw ShapeError("slice: expected 2-D tensor");
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  if (start < 0 || length <= 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of bounds for " +
                     shape_str(a.shape()));
  }
  int rows = axis == 0 ? length : a.dim(0);
  int cols = axis == 1 ? length : a.dim(1);
  Tensor out = Tensor::zeros({rows, cols}, a.requires_grad());
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      out.at_mut(i, j) = axis == 0 ? a.at(start + i, j) : a.at(i, start + j);
    }
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [axis, start, rows, cols](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    int pcols = p.dim(1);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        std::size_t dst = axis == 0
                              ? static_cast<std::size_t>(start + i) * pcols + j
                              : static_cast<std::size_t>(i) * pcols + (start + j);
        pg[dst] += og[static_cast<std::size_t>(i) * cols + j];
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D tensor");
  int r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r}, a.requires_grad());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.at_mut(j, i) = a.at(i, j);
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [r, c](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        pg[static_cast<std::size_t>(i) * c + j] += og[static_cast<std::size_t>(j) * r + i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from_values(std::move(shape), a.values(), a.requires_grad());
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i];
  });
}

Tensor broadcast(const Tensor& a, const std::vector<int>& shape) {
  if (a.shape() == shape) return reshape(a, shape);
  enum class Kind { kScalar, kRow, kCol } kind;
  if (a.numel() == 1) {
    kind = Kind::kScalar;
  } else if (shape.size() == 2 &&
             ((a.ndim() == 1 && a.dim(0) == shape[1]) ||
              (a.ndim() == 2 && a.dim(0) == 1 && a.dim(1) == shape[1]))) {
    kind = Kind::kRow;
  } else if (shape.size() == 2 && a.ndim() == 2 && a.dim(1) == 1 && a.dim(0) == shape[0]) {
    kind = Kind::kCol;
  } else {
    throw ShapeError("broadcast: cannot expand " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape, a.requires_grad());
  const auto& av = a.values();
  auto& ov = out.values();
  int rows = shape.size() == 2 ? shape[0] : shape[0];
  int cols = shape.size() == 2 ? shape[1] : 1;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      double v = kind == Kind::kScalar ? av[0]
                 : kind == Kind::kRow  ? av[static_cast<std::size_t>(j)]
                                       : av[static_cast<std::size_t>(i)];
      ov[static_cast<std::size_t>(i) * cols + j] = v;
    }
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [kind, rows, cols](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        double g = og[static_cast<std::size_t>(i) * cols + j];
        std::size_t dst = kind == Kind::kScalar ? 0
                          : kind == Kind::kRow  ? static_cast<std::size_t>(j)
                                                : static_cast<std::size_t>(i);
        pg[dst] += g;
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s, a.requires_grad());
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    double g = o.grad()[0];
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  double n = static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(s / n, a.requires_grad());
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a}, [n](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    double g = o.grad()[0] / n;
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, any_grad(a, b));
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        double aip = av[static_cast<std::size_t>(i) * k + p];
        const double* brow = bv + static_cast<std::size_t>(p) * n;
        double* orow = ov + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {a, b}, [m, k, n](Tensor& o) {
    Tensor& pa = o.node()->parents[0];
    Tensor& pb = o.node()->parents[1];
    const double* og = o.grad().data();
    if (pa.requires_grad()) {
      // dA = dOut * B^T
      double* ag = pa.grad().data();
      const double* bv = pb.values().data();
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* orow = og + static_cast<std::size_t>(i) * n;
          const double* brow = bv + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) acc += orow[j] * brow[j];
          ag[static_cast<std::size_t>(i) * k + p] += acc;
        }
      }
    }
    if (pb.requires_grad()) {
      // dB = A^T * dOut
      double* bg = pb.grad().data();
      const double* av = pa.values().data();
      for (int i = 0; i < m; ++i) {
        const double* orow = og + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          double aip = av[static_cast<std::size_t>(i) * k + p];
          double* brow = bg + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) brow[j] += aip * orow[j];
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " does not match output " +
                     std::to_string(w.dim(1)));
  }
  int t_len = x.dim(0), in = x.dim(1), out_w = w.dim(1);
  Tensor out = Tensor::zeros({t_len, out_w}, x.requires_grad() || w.requires_grad() ||
                                                 b.requires_grad());
  {
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (int i = 0; i < t_len; ++i) {
      double* orow = ov + static_cast<std::size_t>(i) * out_w;
      for (int j = 0; j < out_w; ++j) orow[j] = bv[j];
      for (int p = 0; p < in; ++p) {
        double xip = xv[static_cast<std::size_t>(i) * in + p];
        const double* wrow = wv + static_cast<std::size_t>(p) * out_w;
        for (int j = 0; j < out_w; ++j) orow[j] += xip * wrow[j];
      }
    }
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {x, w, b}, [t_len, in, out_w](Tensor& o) {
    Tensor& px = o.node()->parents[0];
    Tensor& pw = o.node()->parents[1];
    Tensor& pb = o.node()->parents[2];
    const double* og = o.grad().data();
    if (px.requires_grad()) {
      double* xg = px.grad().data();
      const double* wv = pw.values().data();
      for (int i = 0; i < t_len; ++i) {
        const double* orow = og + static_cast<std::size_t>(i) * out_w;
        for (int p = 0; p < in; ++p) {
          double acc = 0.0;
          const double* wrow = wv + static_cast<std::size_t>(p) * out_w;
          for (int j = 0; j < out_w; ++j) acc += orow[j] * wrow[j];
          xg[static_cast<std::size_t>(i) * in + p] += acc;
        }
      }
    }
    if (pw.requires_grad()) {
      double* wg = pw.grad().data();
      const double* xv = px.values().data();
      for (int i = 0; i < t_len; ++i) {
        const double* orow = og + static_cast<std::size_t>(i) * out_w;
        for (int p = 0; p < in; ++p) {
          double xip = xv[static_cast<std::size_t>(i) * in + p];
          double* wrow = wg + static_cast<std::size_t>(p) * out_w;
          for (int j = 0; j < out_w; ++j) wrow[j] += xip * orow[j];
        }
      }
    }
    if (pb.requires_grad()) {
      double* bg = pb.grad().data();
      for (int i = 0; i < t_len; ++i) {
        const double* orow = og + static_cast<std::size_t>(i) * out_w;
        for (int j = 0; j < out_w; ++j) bg[j] += orow[j];
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  return matmul(x, w);
}

Tensor take_rows(const Tensor& table, const std::vector<int>& indices) {
  if (table.ndim() != 2) throw ShapeError("take_rows: table must be 2-D");
  int v = table.dim(0), d = table.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= v) {
      throw ShapeError("take_rows: index " + std::to_string(idx) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  int n = static_cast<int>(indices.size());
  Tensor out = Tensor::zeros({n, d}, table.requires_grad());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.at_mut(i, j) = table.at(indices[static_cast<std::size_t>(i)], j);
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {table}, [indices, d](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::size_t dst = static_cast<std::size_t>(indices[i]) * d;
      std::size_t src = i * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) pg[dst + j] += og[src + j];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() != 2) throw ShapeError("layer_norm: expected 2-D input");
  int t_len = x.dim(0), d = x.dim(1);
  if (d < 1) throw ShapeError("layer_norm: feature width must be >= 1");
  if (eps <= 0.0) throw ShapeError("layer_norm: eps must be positive");
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be [d]");
  }
  Tensor out = Tensor::zeros({t_len, d},
                             x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  // Cache per-row mean and inverse stddev for the backward pass.
  auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_len));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_len));
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (int i = 0; i < t_len; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += row[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    (*mu)[static_cast<std::size_t>(i)] = m;
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    double* orow = ov.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = gv[static_cast<std::size_t>(j)] * (row[j] - m) * is +
                                          bv[static_cast<std::size_t>(j)];
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {x, gain, bias}, [t_len, d, mu, inv_std](Tensor& o) {
    Tensor& px = o.node()->parents[0];
    Tensor& pgain = o.node()->parents[1];
    Tensor& pbias = o.node()->parents[2];
    const auto& og = o.grad();
    const auto& xv2 = px.values();
    const auto& gv2 = pgain.values();
    for (int i = 0; i < t_len; ++i) {
      const double* grow = og.data() + static_cast<std::size_t>(i) * d;
      const double* xrow = xv2.data() + static_cast<std::size_t>(i) * d;
      double m = (*mu)[static_cast<std::size_t>(i)];
      double is = (*inv_std)[static_cast<std::size_t>(i)];
      if (pgain.requires_grad()) {
        auto& gg = pgain.grad();
        for (int j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += grow[j] * (xrow[j] - m) * is;
      }
      if (pbias.requires_grad()) {
        auto& bg = pbias.grad();
        for (int j = 0; j < d; ++j) bg[static_cast<std::size_t>(j)] += grow[j];
      }
      if (px.requires_grad()) {
        auto& xg = px.grad();
        // dxhat = g .* gain; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
          double xhat = (xrow[j] - m) * is;
          double dxhat = grow[j] * gv2[static_cast<std::size_t>(j)];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        for (int j = 0; j < d; ++j) {
          double xhat = (xrow[j] - m) * is;
          double dxhat = grow[j] * gv2[static_cast<std::size_t>(j)];
          xg[static_cast<std::size_t>(i) * d + j] +=
              is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    }
  });
}

namespace {

int conv_left_pad(int k, ConvMode mode) {
  return mode == ConvMode::kCausal ? k - 1 : (k - 1) / 2;
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, ConvMode mode) {
  if (x.ndim() != 2) throw ShapeError("conv1d: input must be [T,d_in]");
  if (kernels.ndim() != 3) throw ShapeError("conv1d: kernels must be [d_out,d_in,k]");
  int t_len = x.dim(0), d_in = x.dim(1);
  int d_out = kernels.dim(0), k_in = kernels.dim(1), k = kernels.dim(2);
  if (t_len == 0) throw ShapeError("conv1d: zero-length input");
  if (k < 1) throw ShapeError("conv1d: kernel size must be >= 1");
  if (k_in != d_in) {
    throw ShapeError("conv1d: kernel input width " + std::to_string(k_in) +
                     " does not match input " + std::to_string(d_in));
  }
  bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != d_out)) {
    throw ShapeError("conv1d: bias must be [d_out]");
  }
  int left = conv_left_pad(k, mode);
  bool rg = x.requires_grad() || kernels.requires_grad() || (has_bias && bias.requires_grad());
  Tensor out = Tensor::zeros({t_len, d_out}, rg);
  const auto& xv = x.values();
  const auto& kv = kernels.values();
  auto& ov = out.values();
  for (int t = 0; t < t_len; ++t) {
    for (int o = 0; o < d_out; ++o) {
      double acc = has_bias ? bias.values()[static_cast<std::size_t>(o)] : 0.0;
      for (int j = 0; j < k; ++j) {
        int src = t - left + j;
        if (src < 0 || src >= t_len) continue;
        const double* xrow = xv.data() + static_cast<std::size_t>(src) * d_in;
        const double* krow =
            kv.data() + (static_cast<std::size_t>(o) * d_in) * k + static_cast<std::size_t>(j);
        for (int i = 0; i < d_in; ++i) acc += krow[static_cast<std::size_t>(i) * k] * xrow[i];
      }
      ov[static_cast<std::size_t>(t) * d_out + o] = acc;
    }
  }
  if (!rg) return out;
  std::vector<Tensor> parents = {x, kernels};
  if (has_bias) parents.push_back(bias);
  return with_node(std::move(out), std::move(parents),
                   [t_len, d_in, d_out, k, left, has_bias](Tensor& o) {
    Tensor& px = o.node()->parents[0];
    Tensor& pk = o.node()->parents[1];
    const auto& og = o.grad();
    if (px.requires_grad()) {
      auto& xg = px.grad();
      const auto& kv2 = pk.values();
      for (int t = 0; t < t_len; ++t) {
        for (int oc = 0; oc < d_out; ++oc) {
          double g = og[static_cast<std::size_t>(t) * d_out + oc];
          for (int j = 0; j < k; ++j) {
            int src = t - left + j;
            if (src < 0 || src >= t_len) continue;
            for (int i = 0; i < d_in; ++i) {
              xg[static_cast<std::size_t>(src) * d_in + i] +=
                  g * kv2[(static_cast<std::size_t>(oc) * d_in + i) * k + j];
            }
          }
        }
      }
    }
    if (pk.requires_grad()) {
      auto& kg = pk.grad();
      const auto& xv2 = px.values();
      for (int t = 0; t < t_len; ++t) {
        for (int oc = 0; oc < d_out; ++oc) {
          double g = og[static_cast<std::size_t>(t) * d_out + oc];
          for (int j = 0; j < k; ++j) {
            int src = t - left + j;
            if (src < 0 || src >= t_len) continue;
            for (int i = 0; i < d_in; ++i) {
              kg[(static_cast<std::size_t>(oc) * d_in + i) * k + j] +=
                  g * xv2[static_cast<std::size_t>(src) * d_in + i];
            }
          }
        }
      }
    }
    if (has_bias) {
      Tensor& pb = o.node()->parents[2];
      if (pb.requires_grad()) {
        auto& bg = pb.grad();
        for (int t = 0; t < t_len; ++t) {
          for (int oc = 0; oc < d_out; ++oc) {
            bg[static_cast<std::size_t>(oc)] += og[static_cast<std::size_t>(t) * d_out + oc];
          }
        }
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& kernels, ConvMode mode) {
  return conv1d(x, kernels, Tensor(), mode);
}

Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.ndim() != 2 || w.ndim() != 2) {
    throw ShapeError("conv1d_depthwise_causal: expected x [T,d], w [d,k]");
  }
  int t_len = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (t_len == 0) throw ShapeError("conv1d_depthwise_causal: zero-length input");
  if (w.dim(0) != d) throw ShapeError("conv1d_depthwise_causal: channel mismatch");
  bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != d)) {
    throw ShapeError("conv1d_depthwise_causal: bias must be [d]");
  }
  bool rg = x.requires_grad() || w.requires_grad() || (has_bias && bias.requires_grad());
  Tensor out = Tensor::zeros({t_len, d}, rg);
  const auto& xv = x.values();
  const auto& wv = w.values();
  auto& ov = out.values();
  int left = k - 1;
  for (int t = 0; t < t_len; ++t) {
    double* orow = ov.data() + static_cast<std::size_t>(t) * d;
    if (has_bias) {
      const auto& bv = bias.values();
      for (int c = 0; c < d; ++c) orow[c] = bv[static_cast<std::size_t>(c)];
    }
    for (int j = 0; j < k; ++j) {
      int src = t - left + j;
      if (src < 0) continue;
      const double* xrow = xv.data() + static_cast<std::size_t>(src) * d;
      for (int c = 0; c < d; ++c) orow[c] += wv[static_cast<std::size_t>(c) * k + j] * xrow[c];
    }
  }
  if (!rg) return out;
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return with_node(std::move(out), std::move(parents), [t_len, d, k, left, has_bias](Tensor& o) {
    Tensor& px = o.node()->parents[0];
    Tensor& pw = o.node()->parents[1];
    const auto& og = o.grad();
    if (px.requires_grad()) {
      auto& xg = px.grad();
      const auto& wv2 = pw.values();
      for (int t = 0; t < t_len; ++t) {
        const double* grow = og.data() + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < k; ++j) {
          int src = t - left + j;
          if (src < 0) continue;
          double* xrow = xg.data() + static_cast<std::size_t>(src) * d;
          for (int c = 0; c < d; ++c) xrow[c] += grow[c] * wv2[static_cast<std::size_t>(c) * k + j];
        }
      }
    }
    if (pw.requires_grad()) {
      auto& wg = pw.grad();
      const auto& xv2 = px.values();
      for (int t = 0; t < t_len; ++t) {
        const double* grow = og.data() + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < k; ++j) {
          int src = t - left + j;
          if (src < 0) continue;
          const double* xrow = xv2.data() + static_cast<std::size_t>(src) * d;
          for (int c = 0; c < d; ++c) wg[static_cast<std::size_t>(c) * k + j] += grow[c] * xrow[c];
        }
      }
    }
    if (has_bias) {
      Tensor& pb = o.node()->parents[2];
      if (pb.requires_grad()) {
        auto& bg = pb.grad();
        for (int t = 0; t < t_len; ++t) {
          const double* grow = og.data() + static_cast<std::size_t>(t) * d;
          for (int c = 0; c < d; ++c) bg[static_cast<std::size_t>(c)] += grow[c];
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  if (x.ndim() == 1) {
    if (axis != 0) throw ShapeError("softmax: axis out of range for 1-D input");
  } else if (x.ndim() == 2) {
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  } else {
    throw ShapeError("softmax: expected 1-D or 2-D input");
  }
  int rows = x.ndim() == 2 ? x.dim(0) : 1;
  int cols = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  // Normalizing along axis 0 of a matrix walks column slices instead of rows.
  bool column_slices = x.ndim() == 2 && axis == 0;
  int n_slices = column_slices ? cols : rows;
  int slice_len = column_slices ? rows : cols;
  auto index = [column_slices, cols, slice_len](int s, int i) -> std::size_t {
    if (column_slices) return static_cast<std::size_t>(i) * cols + s;
    return static_cast<std::size_t>(s) * slice_len + i;
  };
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int s = 0; s < n_slices; ++s) {
    double mx = xv[index(s, 0)];
    for (int i = 1; i < slice_len; ++i) mx = std::max(mx, xv[index(s, i)]);
    double z = 0.0;
    for (int i = 0; i < slice_len; ++i) {
      double e = std::exp(xv[index(s, i)] - mx);
      ov[index(s, i)] = e;
      z += e;
    }
    for (int i = 0; i < slice_len; ++i) ov[index(s, i)] /= z;
  }
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {x}, [n_slices, slice_len, index](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    const auto& ov2 = o.values();
    for (int s = 0; s < n_slices; ++s) {
      double dot = 0.0;
      for (int i = 0; i < slice_len; ++i) dot += og[index(s, i)] * ov2[index(s, i)];
      for (int i = 0; i < slice_len; ++i) {
        pg[index(s, i)] += ov2[index(s, i)] * (og[index(s, i)] - dot);
      }
    }
  });
}

Tensor dropout(const Tensor& x, double rate, bool training, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) {
    // Identity; no rng consumption in eval mode.
    return scalar_mul(x, 1.0);
  }
  double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (std::size_t i = 0; i < mask->size(); ++i) {
    (*mask)[i] = rng.uniform(0.0, 1.0) < rate ? 0.0 : 1.0 / keep;
  }
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * (*mask)[i];
  if (!out.requires_grad()) return out;
  return with_node(std::move(out), {x}, [mask](Tensor& o) {
    Tensor& p = o.node()->parents[0];
    auto& pg = p.grad();
    const auto& og = o.grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[i] * (*mask)[i];
  });
}

}  // namespace ops
}  // namespace hmamba
