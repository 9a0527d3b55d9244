#include <cmath>
#include <memory>

#include "tsnet/error.hpp"
#include "tsnet/rng.hpp"
#include "tsnet/tensor.hpp"

namespace tsnet {

namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;
using Eigen::Index;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  Index k() const { return static_cast<Index>(cin * kh * kw); }
  Index p() const { return static_cast<Index>(ho * wo); }
};

// Unfolds one sample (cin x h x w) into a (cin*kh*kw) x (ho*wo) matrix.
void im2col(const double* src, const ConvGeometry& g, RowMatrix& cols) {
  cols.resize(g.k(), g.p());
  Index row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* plane = src + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        double* out = cols.row(row).data();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 &&
                                ix < static_cast<long>(g.w);
            *out++ = inside ? plane[static_cast<std::size_t>(iy) * g.w +
                                    static_cast<std::size_t>(ix)]
                            : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the sample.
void col2im(const RowMatrix& cols, const ConvGeometry& g, double* dst) {
  Index row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* plane = dst + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const double* in = cols.row(row).data();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox, ++in) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w)) {
              plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += *in;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv2d: input channels (dim 1) " + std::to_string(g.cin) +
                     " != weight in-channels (dim 1) " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != g.cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                     " != weight out-channels (dim 0) " + std::to_string(g.cout));
  }
  if (g.h + 2 * padding < g.kh) {
    throw ShapeError("conv2d: padded height (dim 2) " + std::to_string(g.h + 2 * padding) +
                     " smaller than kernel height " + std::to_string(g.kh));
  }
  if (g.w + 2 * padding < g.kw) {
    throw ShapeError("conv2d: padded width (dim 3) " + std::to_string(g.w + 2 * padding) +
                     " smaller than kernel width " + std::to_string(g.kw));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const Index cout = static_cast<Index>(g.cout);
  const Index out_stride = cout * g.p();
  const std::size_t in_stride = g.cin * g.h * g.w;
  ConstRowMap wmat(weight.data(), cout, g.k());
  const auto& b = bias.values();

  const bool keep_cols = weight.requires_grad();
  auto cols_cache = std::make_shared<std::vector<RowMatrix>>();
  if (keep_cols) cols_cache->resize(g.n);

  Vector out(static_cast<Index>(g.n) * out_stride);
  RowMatrix cols;
  for (std::size_t n = 0; n < g.n; ++n) {
    RowMatrix& c = keep_cols ? (*cols_cache)[n] : cols;
    im2col(input.data() + n * in_stride, g, c);
    RowMap dst(out.data() + static_cast<Index>(n) * out_stride, cout, g.p());
    dst.noalias() = wmat * c;
    dst.colwise() += b;
  }

  Shape shape{g.n, g.cout, g.ho, g.wo};
  return Tensor::from_op(
      std::move(shape), std::move(out), {input, weight, bias},
      [g, cols_cache, out_stride, in_stride](const detail::Node& self) {
        detail::Node& in = *self.parents[0];
        detail::Node& wt = *self.parents[1];
        detail::Node& bs = *self.parents[2];
        const Index cout = static_cast<Index>(g.cout);
        ConstRowMap wmat(wt.value.data(), cout, g.k());
        RowMatrix dw;
        Vector db;
        if (wt.requires_grad) dw = RowMatrix::Zero(cout, g.k());
        if (bs.requires_grad) db = Vector::Zero(cout);
        Vector din;
        if (in.requires_grad) din = Vector::Zero(in.value.size());
        RowMatrix dcols;
        for (std::size_t n = 0; n < g.n; ++n) {
          ConstRowMap dout(self.grad.data() + static_cast<Index>(n) * out_stride, cout, g.p());
          if (wt.requires_grad) dw.noalias() += dout * (*cols_cache)[n].transpose();
          if (bs.requires_grad) db += dout.rowwise().sum();
          if (in.requires_grad) {
            dcols.noalias() = wmat.transpose() * dout;
            col2im(dcols, g, din.data() + n * in_stride);
          }
        }
        if (wt.requires_grad) wt.accumulate(Eigen::Map<const Vector>(dw.data(), dw.size()));
        if (bs.requires_grad) bs.accumulate(db);
        if (in.requires_grad) in.accumulate(din);
      });
}

Tensor relu(const Tensor& x) {
  Vector out = x.values().cwiseMax(0.0);
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](const detail::Node& self) {
    detail::Node& in = *self.parents[0];
    in.accumulate((in.value.array() > 0.0).select(self.grad.array(), 0.0).matrix());
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Vector out(static_cast<Index>(n * c));
  const double* src = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += src[i * hw + j];
    out[static_cast<Index>(i)] = s / static_cast<double>(hw);
  }
  return Tensor::from_op(Shape{n, c}, std::move(out), {x}, [n, c, hw](const detail::Node& self) {
    detail::Node& in = *self.parents[0];
    Vector g(in.value.size());
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      g.segment(static_cast<Index>(i * hw), static_cast<Index>(hw))
          .setConstant(self.grad[static_cast<Index>(i)] * inv);
    }
    in.accumulate(g);
  });
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("dense: input features (dim 1) " + std::to_string(din) +
                     " != weight in-features (dim 1) " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != dout) {
    throw ShapeError("dense: bias length " + std::to_string(bias.dim(0)) +
                     " != weight out-features (dim 0) " + std::to_string(dout));
  }
  // Plain loops keep each output row independent of the batch size, so a
  // batched forward is bit-identical to per-sample forwards.
  Vector out(static_cast<Index>(n * dout));
  const double* xs = x.data();
  const double* ws = weight.data();
  const double* bs = bias.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < dout; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < din; ++i) s += xs[r * din + i] * ws[o * din + i];
      out[static_cast<Index>(r * dout + o)] = s + bs[o];
    }
  }
  const auto rows = static_cast<Index>(n), in_f = static_cast<Index>(din),
             out_f = static_cast<Index>(dout);
  return Tensor::from_op(
      Shape{n, dout}, std::move(out), {x, weight, bias},
      [rows, in_f, out_f](const detail::Node& self) {
        detail::Node& xn = *self.parents[0];
        detail::Node& wn = *self.parents[1];
        detail::Node& bn = *self.parents[2];
        ConstRowMap g(self.grad.data(), rows, out_f);
        if (xn.requires_grad) {
          RowMatrix dx = g * ConstRowMap(wn.value.data(), out_f, in_f);
          xn.accumulate(Eigen::Map<const Vector>(dx.data(), dx.size()));
        }
        if (wn.requires_grad) {
          RowMatrix dw = g.transpose() * ConstRowMap(xn.value.data(), rows, in_f);
          wn.accumulate(Eigen::Map<const Vector>(dw.data(), dw.size()));
        }
        if (bn.requires_grad) bn.accumulate(g.colwise().sum().transpose());
      });
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise_mul");
  Vector out = a.values().cwiseProduct(b.values());
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](const detail::Node& self) {
    detail::Node& an = *self.parents[0];
    detail::Node& bn = *self.parents[1];
    if (an.requires_grad) an.accumulate(self.grad.cwiseProduct(bn.value));
    if (bn.requires_grad) bn.accumulate(self.grad.cwiseProduct(an.value));
  });
}

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw UsageError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  Vector mask(x.values().size());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
  Vector out = x.values().cwiseProduct(mask);
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [mask = std::move(mask)](const detail::Node& self) {
                           self.parents[0]->accumulate(self.grad.cwiseProduct(mask));
                         });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) {
    throw ShapeError("mse: length mismatch, pred " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  const double n = static_cast<double>(pred.size());
  Vector diff = pred.values() - target.values();
  const double loss = diff.squaredNorm() / n;
  return Tensor::from_op(Shape{1}, Vector::Constant(1, loss), {pred, target},
                         [diff = std::move(diff), n](const detail::Node& self) {
                           const double g = self.grad[0] * 2.0 / n;
                           self.parents[0]->accumulate(g * diff);
                           self.parents[1]->accumulate(-g * diff);
                         });
}

Tensor sum(const Tensor& x) {
  return Tensor::from_op(Shape{1}, Vector::Constant(1, x.values().sum()), {x},
                         [](const detail::Node& self) {
                           detail::Node& in = *self.parents[0];
                           in.accumulate(Vector::Constant(in.value.size(), self.grad[0]));
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tensor::from_op(a.shape(), a.values() + b.values(), {a, b},
                         [](const detail::Node& self) {
                           self.parents[0]->accumulate(self.grad);
                           self.parents[1]->accumulate(self.grad);
                         });
}

Tensor scale(const Tensor& x, double alpha) {
  return Tensor::from_op(x.shape(), alpha * x.values(), {x}, [alpha](const detail::Node& self) {
    self.parents[0]->accumulate(alpha * self.grad);
  });
}

Tensor select_column(const Tensor& x, std::size_t column) {
  require_rank(x, 2, "select_column", "input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (column >= d) {
    throw ShapeError("select_column: column " + std::to_string(column) + " out of range for " +
                     to_string(x.shape()));
  }
  Vector out(static_cast<Index>(n));
  for (std::size_t r = 0; r < n; ++r) out[static_cast<Index>(r)] = x.data()[r * d + column];
  return Tensor::from_op(Shape{n}, std::move(out), {x}, [n, d, column](const detail::Node& self) {
    detail::Node& in = *self.parents[0];
    Vector g = Vector::Zero(in.value.size());
    for (std::size_t r = 0; r < n; ++r) g[static_cast<Index>(r * d + column)] = self.grad[static_cast<Index>(r)];
    in.accumulate(g);
  });
}

}  // namespace tsnet
