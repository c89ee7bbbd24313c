#include "calib2stage/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "calib2stage/errors.hpp"
#include "calib2stage/kernels.hpp"

namespace calib2stage {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  return push(Node{std::move(value), {}, {}, {}, false, {}});
}

Var Tape::parameter(Tensor value, std::string name) {
  require_finite(value, "parameter");
  return push(Node{std::move(value), {}, {}, {}, true, std::move(name)});
}

Var Tape::variable(Tensor value) {
  require_finite(value, "variable");
  return push(Node{std::move(value), {}, {}, {}, true, {}});
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  require_finite(value, "forward op");
  Node node{std::move(value), {}, {}, {}, false, {}};
  for (const auto& p : parents) {
    if (p.tape_ != this) throw ContractError("op mixes vars from different tapes");
    node.parents.push_back(p.id_);
    node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  return push(std::move(node));
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor Tape::gradient_of(const Var& v) const {
  const Node& n = nodes_.at(v.id_);
  return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
}

GradientMap Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw ContractError("loss belongs to a different tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad(loss.id_).fill(1.0);

  visits_ = 0;
  GradientMap out;
  for (std::size_t id = nodes_.size(); id-- > 0;) {
    ++visits_;
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (!n.param_name.empty()) {
      if (!out.emplace(n.param_name, n.grad).second) {
        throw ContractError("parameter registered twice on tape: " + n.param_name);
      }
    }
  }
  // Parameters the loss does not depend on still get a (zero) entry.
  for (auto& n : nodes_) {
    if (!n.param_name.empty() && !out.contains(n.param_name)) {
      out.emplace(n.param_name, Tensor(n.value.shape(), 0.0));
    }
  }
  return out;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_to_string(x.shape()));
  }
}

// Accumulate `g` into the parent's gradient buffer when it wants one.
void accumulate(Tape& t, std::size_t parent, const Tensor& g) {
  if (!t.requires_grad(parent)) return;
  kernels::active().axpy(g.size(), 1.0, g.raw(), t.grad(parent).raw());
}

// Unary elementwise op with derivative computed from input and output.
template <class Forward, class Derivative>
Var unary(const Var& x, Forward f, Derivative df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid, df](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    const Tensor& xin = t.value(xid);
    const Tensor& yout = t.value(self);
    Tensor& gx = t.grad(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xin[i], yout[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_to_string(a.shape()) + " * " +
                         shape_to_string(b.shape()));
  }
  Tensor c({m, n});
  kernels::active().gemm(false, false, m, n, k, a.value().raw(), b.value().raw(), c.raw(), false);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(c), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& kt = kernels::active();
    const Tensor& gc = t.grad(self);
    if (t.requires_grad(aid)) {
      kt.gemm(false, true, m, k, n, gc.raw(), t.value(bid).raw(), t.grad(aid).raw(), true);
    }
    if (t.requires_grad(bid)) {
      kt.gemm(true, false, k, n, m, t.value(aid).raw(), gc.raw(), t.grad(bid).raw(), true);
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_bias");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (bias.value().size() != cols) throw DimensionError("add_bias: bias length mismatch");
  Tensor y = x.value();
  kernels::active().add_row_bias(rows, cols, bias.value().raw(), y.raw());
  const std::size_t xid = x.id(), bid = bias.id();
  return x.tape().record(std::move(y), {x, bias}, [=](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    accumulate(t, xid, gy);
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad(bid);
      for (std::size_t r = 0; r < rows; ++r) {
        kernels::active().axpy(cols, 1.0, gy.raw() + r * cols, gb.raw());
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  kernels::active().axpy(y.size(), 1.0, b.value().raw(), y.raw());
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(y), {a, b}, [=](Tape& t, std::size_t self) {
    accumulate(t, aid, t.grad(self));
    accumulate(t, bid, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  kernels::active().axpy(y.size(), -1.0, b.value().raw(), y.raw());
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(y), {a, b}, [=](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    accumulate(t, aid, gy);
    if (t.requires_grad(bid)) kernels::active().axpy(gy.size(), -1.0, gy.raw(), t.grad(bid).raw());
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape(), 0.0);
  kernels::active().mul_accumulate(y.size(), a.value().raw(), b.value().raw(), y.raw());
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(y), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& kt = kernels::active();
    const Tensor& gy = t.grad(self);
    if (t.requires_grad(aid)) kt.mul_accumulate(gy.size(), gy.raw(), t.value(bid).raw(), t.grad(aid).raw());
    if (t.requires_grad(bid)) kt.mul_accumulate(gy.size(), gy.raw(), t.value(aid).raw(), t.grad(bid).raw());
  });
}

Var scale(const Var& x, double factor) {
  Tensor y(x.shape(), 0.0);
  kernels::active().axpy(y.size(), factor, x.value().raw(), y.raw());
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    kernels::active().axpy(gy.size(), factor, gy.raw(), t.grad(xid).raw());
  });
}

Var add_scalar(const Var& x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var relu(const Var& x) {
  Tensor y(x.shape());
  kernels::active().relu_forward(y.size(), x.value().raw(), y.raw());
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    kernels::active().relu_backward(gy.size(), t.value(xid).raw(), gy.raw(), t.grad(xid).raw());
  });
}

Var log_sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); },
      // d/dx log sigmoid(x) = sigmoid(-x) = 1 - exp(log_sigmoid(x))
      [](double v, double) {
        return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      });
}

Tensor log_softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("log_softmax: expected [batch x K]");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw DimensionError("log_softmax: need at least two classes");
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.raw() + r * k;
    double* o = out.raw() + r * k;
    const double mx = *std::max_element(in, in + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) o[j] = in[j] - lse;
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = log_softmax_rows(logits);
  for (auto& v : out.data()) v = std::exp(v);
  return out;
}

Var log_softmax(const Var& logits) {
  Tensor y = log_softmax_rows(logits.value());
  const std::size_t rows = y.dim(0), k = y.dim(1);
  const std::size_t xid = logits.id();
  return logits.tape().record(std::move(y), {logits}, [=](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    const Tensor& logp = t.value(self);
    Tensor& gx = t.grad(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < k; ++j) gsum += gy[r * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        gx[r * k + j] += gy[r * k + j] - std::exp(logp[r * k + j]) * gsum;
      }
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xid = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [xid](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(xid).data()) v += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var row_sum(const Var& x) {
  require_rank(x, 2, "row_sum");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor y({rows}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) y[r] += x.value()[r * cols + j];
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += gy[r];
    }
  });
}

Var pick(const Var& x, std::span<const int> cols) {
  require_rank(x, 2, "pick");
  const std::size_t rows = x.shape()[0], k = x.shape()[1];
  if (cols.size() != rows) throw DimensionError("pick: one column index per row required");
  std::vector<std::size_t> index(rows);
  Tensor y({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= k) {
      throw ContractError("label " + std::to_string(cols[r]) + " outside [0, " +
                          std::to_string(k) + ")");
    }
    index[r] = r * k + static_cast<std::size_t>(cols[r]);
    y[r] = x.value()[index[r]];
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xid);
    for (std::size_t r = 0; r < index.size(); ++r) gx[index[r]] += gy[r];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    kernels::active().axpy(gy.size(), 1.0, gy.raw(), t.grad(xid).raw());
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels, k, out_h, out_w;
  std::size_t patch() const { return channels * k * k; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols[(c*k + ki)*k + kj, oy*out_w + ox] = x[c, oy + ki, ox + kj] for one image.
void im2col(const ConvGeometry& g, const double* image, double* cols) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const double* src = image + (c * g.height + oy + ki) * g.width + kj;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) row[oy * g.out_w + ox] = src[ox];
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* image) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          double* dst = image + (c * g.height + oy + ki) * g.width + kj;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] += row[oy * g.out_w + ox];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var& bias) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (ks[1] != xs[1]) throw DimensionError("conv2d: channel mismatch between input and kernel");
  if (ks[2] != ks[3]) throw DimensionError("conv2d: kernel must be square");
  if (ks[2] > xs[2] || ks[3] > xs[3]) {
    throw DimensionError("conv2d: kernel " + shape_to_string(ks) + " larger than input " +
                         shape_to_string(xs));
  }
  if (bias.value().size() != ks[0]) throw DimensionError("conv2d: bias length mismatch");
  const ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], xs[2] - ks[2] + 1,
                       xs[3] - ks[2] + 1};

  const auto& kt = kernels::active();
  std::vector<double> cols(g.batch * g.patch() * g.pixels());
  Tensor y({g.batch, g.out_channels, g.out_h, g.out_w});
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* image = x.value().raw() + b * g.channels * g.height * g.width;
    double* bcols = cols.data() + b * g.patch() * g.pixels();
    double* out = y.raw() + b * g.out_channels * g.pixels();
    im2col(g, image, bcols);
    kt.gemm(false, false, g.out_channels, g.pixels(), g.patch(), kernel.value().raw(), bcols, out,
            false);
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double bo = bias.value()[o];
      for (std::size_t p = 0; p < g.pixels(); ++p) out[o * g.pixels() + p] += bo;
    }
  }

  const std::size_t xid = x.id(), kid = kernel.id(), bid = bias.id();
  return x.tape().record(
      std::move(y), {x, kernel, bias},
      [=, cols = std::move(cols)](Tape& t, std::size_t self) {
        const auto& kt2 = kernels::active();
        const Tensor& gy = t.grad(self);
        std::vector<double> gcols(g.patch() * g.pixels());
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* gout = gy.raw() + b * g.out_channels * g.pixels();
          const double* bcols = cols.data() + b * g.patch() * g.pixels();
          if (t.requires_grad(kid)) {
            kt2.gemm(false, true, g.out_channels, g.patch(), g.pixels(), gout, bcols,
                     t.grad(kid).raw(), true);
          }
          if (t.requires_grad(bid)) {
            Tensor& gb = t.grad(bid);
            for (std::size_t o = 0; o < g.out_channels; ++o) {
              for (std::size_t p = 0; p < g.pixels(); ++p) gb[o] += gout[o * g.pixels() + p];
            }
          }
          if (t.requires_grad(xid)) {
            kt2.gemm(true, false, g.patch(), g.pixels(), g.out_channels, t.value(kid).raw(), gout,
                     gcols.data(), false);
            col2im_add(g, gcols.data(),
                       t.grad(xid).raw() + b * g.channels * g.height * g.width);
          }
        }
      });
}

Var maxpool2d(const Var& x) {
  require_rank(x, 4, "maxpool2d");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("maxpool2d: spatial extents must be even, got " + shape_to_string(s));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor y({s[0], s[1], oh, ow});
  std::vector<std::size_t> argmax(y.size());
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        y[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xid);
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gy[o];
  });
}

}  // namespace calib2stage
