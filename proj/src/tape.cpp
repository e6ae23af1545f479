#include "tape.hpp"

#include <algorithm>
#include <cmath>

#include "common.hpp"

namespace pp {

namespace {

void require(bool cond, const char* what) {
  if (!cond) fail(ErrorCode::InvalidArgument, what);
}

struct AxisSplit {
  int outer, n, inner;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis) {
  require(axis >= 0 && axis < static_cast<int>(shape.size()),
          "ShapeMismatch: axis out of range");
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

std::vector<int> drop_axis(const std::vector<int>& shape, int axis) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i)
    if (i != axis) out.push_back(shape[static_cast<size_t>(i)]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

void Tape::check_finite(const Tensor& t, const char* op) const {
  if (!t.all_finite())
    fail(ErrorCode::Numeric,
         std::string("NonFiniteValue produced by op '") + op + "'");
}

Tape::H Tape::push(Tensor value, bool requires_grad,
                   std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = requires_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return static_cast<H>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(H h) {
  Node& n = nodes_[static_cast<size_t>(h)];
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
  n.reached = true;
  return n.grad;
}

const Tensor& Tape::grad(H h) {
  Node& n = nodes_[static_cast<size_t>(h)];
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(H loss) {
  Node& ln = nodes_[static_cast<size_t>(loss)];
  if (ln.value.numel() != 1)
    fail(ErrorCode::InvalidArgument, "NonScalarLoss: backward needs a scalar");
  if (ran_backward_)
    fail(ErrorCode::InvalidArgument, "backward already ran on this tape");
  ran_backward_ = true;
  grad_buf(loss)[0] = 1.0;
  for (size_t i = static_cast<size_t>(loss) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.reached && n.back) n.back(*this);
  }
}

Tape::H Tape::leaf(Tensor value, bool requires_grad) {
  check_finite(value, "leaf");
  return push(std::move(value), requires_grad, nullptr);
}

Tape::H Tape::add(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.same_shape(vb), "ShapeMismatch: add");
  Tensor out = va;
  for (int i = 0; i < out.numel(); ++i) out[i] += vb[i];
  check_finite(out, "add");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_buf(a);
      for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_buf(b);
      for (int i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  });
}

Tape::H Tape::sub(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.same_shape(vb), "ShapeMismatch: sub");
  Tensor out = va;
  for (int i = 0; i < out.numel(); ++i) out[i] -= vb[i];
  check_finite(out, "sub");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_buf(a);
      for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_buf(b);
      for (int i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Tape::H Tape::mul(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.same_shape(vb), "ShapeMismatch: mul");
  Tensor out = va;
  for (int i = 0; i < out.numel(); ++i) out[i] *= vb[i];
  check_finite(out, "mul");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    if (t.wants_grad(a)) {
      const Tensor& vb2 = t.value(b);
      Tensor& ga = t.grad_buf(a);
      for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
    }
    if (t.wants_grad(b)) {
      const Tensor& va2 = t.value(a);
      Tensor& gb = t.grad_buf(b);
      for (int i = 0; i < g.numel(); ++i) gb[i] += g[i] * va2[i];
    }
  });
}

Tape::H Tape::scalar_mul(H a, double s) {
  Tensor out = value(a);
  for (int i = 0; i < out.numel(); ++i) out[i] *= s;
  check_finite(out, "scalar_mul");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, s, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
}

Tape::H Tape::relu(H a) {
  Tensor out = value(a);
  for (int i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& va = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i)
      if (va[i] > 0.0) ga[i] += g[i];
  });
}

Tape::H Tape::tanh_op(H a) {
  Tensor out = value(a);
  for (int i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tape::H Tape::square(H a) {
  const Tensor& va = value(a);
  Tensor out(va.shape());
  for (int i = 0; i < out.numel(); ++i) out[i] = va[i] * va[i];
  check_finite(out, "square");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& va2 = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * 2.0 * va2[i];
  });
}

Tape::H Tape::log_shifted(H a, double shift) {
  const Tensor& va = value(a);
  Tensor out(va.shape());
  for (int i = 0; i < out.numel(); ++i) out[i] = std::log(va[i] + shift);
  check_finite(out, "log_shifted");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, shift, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& va2 = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] / (va2[i] + shift);
  });
}

Tape::H Tape::sum_all(H a) {
  const Tensor& va = value(a);
  double s = 0.0;
  for (int i = 0; i < va.numel(); ++i) s += va[i];
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum_all");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, self](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(self)].grad[0];
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

Tape::H Tape::mean_all(H a) {
  const Tensor& va = value(a);
  double s = 0.0;
  for (int i = 0; i < va.numel(); ++i) s += va[i];
  double inv = 1.0 / static_cast<double>(va.numel());
  Tensor out = Tensor::scalar(s * inv);
  check_finite(out, "mean_all");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, inv, self](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(self)].grad[0] * inv;
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

Tape::H Tape::sum_axis(H a, int axis) {
  const Tensor& va = value(a);
  AxisSplit s = split_axis(va.shape(), axis);
  Tensor out(drop_axis(va.shape(), axis));
  for (int o = 0; o < s.outer; ++o)
    for (int i = 0; i < s.n; ++i) {
      const double* src = va.data() + (static_cast<size_t>(o) * s.n + i) * s.inner;
      double* dst = out.data() + static_cast<size_t>(o) * s.inner;
      for (int in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  check_finite(out, "sum_axis");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, s, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    Tensor& ga = t.grad_buf(a);
    for (int o = 0; o < s.outer; ++o)
      for (int i = 0; i < s.n; ++i) {
        double* dst = ga.data() + (static_cast<size_t>(o) * s.n + i) * s.inner;
        const double* src = g.data() + static_cast<size_t>(o) * s.inner;
        for (int in = 0; in < s.inner; ++in) dst[in] += src[in];
      }
  });
}

Tape::H Tape::mean_axis(H a, int axis) {
  const Tensor& va = value(a);
  AxisSplit s = split_axis(va.shape(), axis);
  H summed = sum_axis(a, axis);
  return scalar_mul(summed, 1.0 / static_cast<double>(s.n));
}

Tape::H Tape::max_axis(H a, int axis) {
  const Tensor& va = value(a);
  AxisSplit s = split_axis(va.shape(), axis);
  Tensor out(drop_axis(va.shape(), axis));
  std::vector<int> argmax(static_cast<size_t>(s.outer) * s.inner);
  for (int o = 0; o < s.outer; ++o)
    for (int in = 0; in < s.inner; ++in) {
      double best = va.data()[static_cast<size_t>(o) * s.n * s.inner + in];
      int best_i = 0;
      for (int i = 1; i < s.n; ++i) {
        double v = va.data()[(static_cast<size_t>(o) * s.n + i) * s.inner + in];
        if (v > best) {  // strict: ties go to the lowest index
          best = v;
          best_i = i;
        }
      }
      out.data()[static_cast<size_t>(o) * s.inner + in] = best;
      argmax[static_cast<size_t>(o) * s.inner + in] = best_i;
    }
  check_finite(out, "max_axis");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a),
              [a, s, argmax = std::move(argmax), self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                Tensor& ga = t.grad_buf(a);
                for (int o = 0; o < s.outer; ++o)
                  for (int in = 0; in < s.inner; ++in) {
                    size_t oi = static_cast<size_t>(o) * s.inner + in;
                    int i = argmax[oi];
                    ga.data()[(static_cast<size_t>(o) * s.n + i) * s.inner + in] +=
                        g.data()[oi];
                  }
              });
}

Tape::H Tape::reshape(H a, std::vector<int> shape) {
  const Tensor& va = value(a);
  require(shape_numel(shape) == va.numel(), "ShapeMismatch: reshape");
  Tensor out = Tensor::from(std::move(shape),
                            std::vector<double>(va.data(), va.data() + va.numel()));
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Tape::H Tape::concat_rows(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.ndim() == vb.ndim() && va.ndim() >= 1, "ShapeMismatch: concat_rows");
  for (int i = 1; i < va.ndim(); ++i)
    require(va.dim(i) == vb.dim(i), "ShapeMismatch: concat_rows trailing dims");
  std::vector<int> shape = va.shape();
  shape[0] += vb.dim(0);
  Tensor out(shape);
  std::copy(va.data(), va.data() + va.numel(), out.data());
  std::copy(vb.data(), vb.data() + vb.numel(), out.data() + va.numel());
  int na = va.numel();
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b),
              [a, b, na, self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                if (t.wants_grad(a)) {
                  Tensor& ga = t.grad_buf(a);
                  for (int i = 0; i < na; ++i) ga[i] += g[i];
                }
                if (t.wants_grad(b)) {
                  Tensor& gb = t.grad_buf(b);
                  for (int i = 0; i < g.numel() - na; ++i) gb[i] += g[na + i];
                }
              });
}

Tape::H Tape::matmul(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.ndim() == 2 && vb.ndim() == 2 && va.dim(1) == vb.dim(0),
          "ShapeMismatch: matmul");
  int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* crow = out.data() + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      double ail = va.data()[static_cast<size_t>(i) * k + l];
      const double* brow = vb.data() + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
  check_finite(out, "matmul");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b),
              [a, b, m, k, n, self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                if (t.wants_grad(a)) {
                  const Tensor& vb2 = t.value(b);
                  Tensor& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                      const double* grow = g.data() + static_cast<size_t>(i) * n;
                      const double* brow = vb2.data() + static_cast<size_t>(l) * n;
                      double acc = 0.0;
                      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                      ga.data()[static_cast<size_t>(i) * k + l] += acc;
                    }
                }
                if (t.wants_grad(b)) {
                  const Tensor& va2 = t.value(a);
                  Tensor& gb = t.grad_buf(b);
                  for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                      double ail = va2.data()[static_cast<size_t>(i) * k + l];
                      const double* grow = g.data() + static_cast<size_t>(i) * n;
                      double* brow = gb.data() + static_cast<size_t>(l) * n;
                      for (int j = 0; j < n; ++j) brow[j] += ail * grow[j];
                    }
                }
              });
}

Tape::H Tape::matmul_nt(H a, H b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require(va.ndim() == 2 && vb.ndim() == 2 && va.dim(1) == vb.dim(1),
          "ShapeMismatch: matmul_nt");
  int m = va.dim(0), k = va.dim(1), n = vb.dim(0);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = va.data() + static_cast<size_t>(i) * k;
    double* crow = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = vb.data() + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = acc;
    }
  }
  check_finite(out, "matmul_nt");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a) || wants_grad(b),
              [a, b, m, k, n, self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                if (t.wants_grad(a)) {
                  const Tensor& vb2 = t.value(b);
                  Tensor& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    double* garow = ga.data() + static_cast<size_t>(i) * k;
                    for (int j = 0; j < n; ++j) {
                      double gij = grow[j];
                      const double* brow = vb2.data() + static_cast<size_t>(j) * k;
                      for (int l = 0; l < k; ++l) garow[l] += gij * brow[l];
                    }
                  }
                }
                if (t.wants_grad(b)) {
                  const Tensor& va2 = t.value(a);
                  Tensor& gb = t.grad_buf(b);
                  for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    const double* arow = va2.data() + static_cast<size_t>(i) * k;
                    for (int j = 0; j < n; ++j) {
                      double gij = grow[j];
                      double* gbrow = gb.data() + static_cast<size_t>(j) * k;
                      for (int l = 0; l < k; ++l) gbrow[l] += gij * arow[l];
                    }
                  }
                }
              });
}

Tape::H Tape::row_normalize(H a) {
  const Tensor& va = value(a);
  require(va.ndim() == 2, "ShapeMismatch: row_normalize expects 2-D");
  int rows = va.dim(0), cols = va.dim(1);
  Tensor out(va.shape());
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* src = va.data() + static_cast<size_t>(r) * cols;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += src[c] * src[c];
    double norm = std::max(std::sqrt(s), 1e-12);
    norms[static_cast<size_t>(r)] = norm;
    double* dst = out.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) dst[c] = src[c] / norm;
  }
  check_finite(out, "row_normalize");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a),
              [a, rows, cols, norms = std::move(norms), self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                const Tensor& y = t.value(self);
                Tensor& ga = t.grad_buf(a);
                for (int r = 0; r < rows; ++r) {
                  const double* grow = g.data() + static_cast<size_t>(r) * cols;
                  const double* yrow = y.data() + static_cast<size_t>(r) * cols;
                  double dot = 0.0;
                  for (int c = 0; c < cols; ++c) dot += grow[c] * yrow[c];
                  double inv = 1.0 / norms[static_cast<size_t>(r)];
                  double* garow = ga.data() + static_cast<size_t>(r) * cols;
                  for (int c = 0; c < cols; ++c)
                    garow[c] += (grow[c] - dot * yrow[c]) * inv;
                }
              });
}

Tape::H Tape::softmax_channels(H a) {
  const Tensor& va = value(a);
  require(va.ndim() >= 1, "ShapeMismatch: softmax_channels");
  int k = va.dim(va.ndim() - 1);
  int fibers = va.numel() / k;
  Tensor out(va.shape());
  for (int f = 0; f < fibers; ++f) {
    const double* src = va.data() + static_cast<size_t>(f) * k;
    double* dst = out.data() + static_cast<size_t>(f) * k;
    double mx = src[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, src[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    double inv = 1.0 / sum;
    for (int i = 0; i < k; ++i) dst[i] *= inv;
  }
  check_finite(out, "softmax_channels");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a), [a, k, fibers, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (int f = 0; f < fibers; ++f) {
      const double* grow = g.data() + static_cast<size_t>(f) * k;
      const double* yrow = y.data() + static_cast<size_t>(f) * k;
      double dot = 0.0;
      for (int i = 0; i < k; ++i) dot += grow[i] * yrow[i];
      double* garow = ga.data() + static_cast<size_t>(f) * k;
      for (int i = 0; i < k; ++i) garow[i] += yrow[i] * (grow[i] - dot);
    }
  });
}

Tape::H Tape::conv2d(H x, H w, int stride, int padding) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  require(vx.ndim() == 4 && vw.ndim() == 4, "ShapeMismatch: conv2d rank");
  require(vw.dim(0) == vw.dim(1) && vw.dim(0) % 2 == 1,
          "ShapeMismatch: conv2d kernel must be odd square");
  require(vx.dim(3) == vw.dim(2), "ShapeMismatch: conv2d channels");
  require(stride >= 1 && padding >= 0, "ShapeMismatch: conv2d stride/padding");
  int batch = vx.dim(0), hin = vx.dim(1), win = vx.dim(2), cin = vx.dim(3);
  int ks = vw.dim(0), cout = vw.dim(3);
  int hout = (hin + 2 * padding - ks) / stride + 1;
  int wout = (win + 2 * padding - ks) / stride + 1;
  require(hout >= 1 && wout >= 1, "ShapeMismatch: conv2d output empty");

  Tensor out({batch, hout, wout, cout});
  for (int b = 0; b < batch; ++b)
    for (int oh = 0; oh < hout; ++oh)
      for (int ow = 0; ow < wout; ++ow) {
        double* optr =
            out.data() +
            ((static_cast<size_t>(b) * hout + oh) * wout + ow) * cout;
        for (int kh = 0; kh < ks; ++kh) {
          int ih = oh * stride - padding + kh;
          if (ih < 0 || ih >= hin) continue;
          for (int kw = 0; kw < ks; ++kw) {
            int iw = ow * stride - padding + kw;
            if (iw < 0 || iw >= win) continue;
            const double* xptr =
                vx.data() +
                ((static_cast<size_t>(b) * hin + ih) * win + iw) * cin;
            const double* wbase =
                vw.data() + (static_cast<size_t>(kh) * ks + kw) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              double v = xptr[ci];
              const double* wrow = wbase + static_cast<size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) optr[co] += v * wrow[co];
            }
          }
        }
      }
  check_finite(out, "conv2d");
  H self = static_cast<H>(nodes_.size());
  auto back = [x, w, stride, padding, batch, hin, win, cin, ks, cout, hout,
               wout, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& vx2 = t.value(x);
    const Tensor& vw2 = t.value(w);
    bool need_dx = t.wants_grad(x);
    bool need_dw = t.wants_grad(w);
    Tensor* dx = need_dx ? &t.grad_buf(x) : nullptr;
    Tensor* dw = need_dw ? &t.grad_buf(w) : nullptr;
    for (int b = 0; b < batch; ++b)
      for (int oh = 0; oh < hout; ++oh)
        for (int ow = 0; ow < wout; ++ow) {
          const double* gptr =
              g.data() + ((static_cast<size_t>(b) * hout + oh) * wout + ow) * cout;
          for (int kh = 0; kh < ks; ++kh) {
            int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= hin) continue;
            for (int kw = 0; kw < ks; ++kw) {
              int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= win) continue;
              size_t xoff = ((static_cast<size_t>(b) * hin + ih) * win + iw) * cin;
              size_t woff = (static_cast<size_t>(kh) * ks + kw) * cin * cout;
              if (need_dx) {
                double* dxptr = dx->data() + xoff;
                for (int ci = 0; ci < cin; ++ci) {
                  const double* wrow =
                      vw2.data() + woff + static_cast<size_t>(ci) * cout;
                  double acc = 0.0;
                  for (int co = 0; co < cout; ++co) acc += gptr[co] * wrow[co];
                  dxptr[ci] += acc;
                }
              }
              if (need_dw) {
                const double* xptr = vx2.data() + xoff;
                for (int ci = 0; ci < cin; ++ci) {
                  double v = xptr[ci];
                  double* dwrow = dw->data() + woff + static_cast<size_t>(ci) * cout;
                  for (int co = 0; co < cout; ++co) dwrow[co] += v * gptr[co];
                }
              }
            }
          }
        }
  };
  return push(std::move(out), wants_grad(x) || wants_grad(w), std::move(back));
}

Tape::H Tape::add_channel_bias(H x, H bias) {
  const Tensor& vx = value(x);
  const Tensor& vb = value(bias);
  require(vb.ndim() == 1 && vx.ndim() >= 1 &&
              vx.dim(vx.ndim() - 1) == vb.dim(0),
          "ShapeMismatch: add_channel_bias");
  int c = vb.dim(0);
  int rows = vx.numel() / c;
  Tensor out = vx;
  for (int r = 0; r < rows; ++r) {
    double* dst = out.data() + static_cast<size_t>(r) * c;
    for (int i = 0; i < c; ++i) dst[i] += vb[i];
  }
  check_finite(out, "add_channel_bias");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(x) || wants_grad(bias),
              [x, bias, rows, c, self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                if (t.wants_grad(x)) {
                  Tensor& gx = t.grad_buf(x);
                  for (int i = 0; i < g.numel(); ++i) gx[i] += g[i];
                }
                if (t.wants_grad(bias)) {
                  Tensor& gb = t.grad_buf(bias);
                  for (int r = 0; r < rows; ++r) {
                    const double* grow = g.data() + static_cast<size_t>(r) * c;
                    for (int i = 0; i < c; ++i) gb[i] += grow[i];
                  }
                }
              });
}

Tape::H Tape::spatial_max(H a) {
  const Tensor& va = value(a);
  require(va.ndim() == 4, "ShapeMismatch: spatial_max expects (B,H,W,K)");
  int batch = va.dim(0), h = va.dim(1), w = va.dim(2), k = va.dim(3);
  int cells = h * w;
  Tensor out({batch, k});
  std::vector<int> argmax(static_cast<size_t>(batch) * k);
  for (int b = 0; b < batch; ++b) {
    const double* base = va.data() + static_cast<size_t>(b) * cells * k;
    for (int i = 0; i < k; ++i) {
      double best = base[i];
      int best_cell = 0;
      for (int cell = 1; cell < cells; ++cell) {
        double v = base[static_cast<size_t>(cell) * k + i];
        if (v > best) {
          best = v;
          best_cell = cell;
        }
      }
      out.at(b, i) = best;
      argmax[static_cast<size_t>(b) * k + i] = best_cell;
    }
  }
  check_finite(out, "spatial_max");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(a),
              [a, batch, cells, k, argmax = std::move(argmax), self](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
                Tensor& ga = t.grad_buf(a);
                for (int b = 0; b < batch; ++b)
                  for (int i = 0; i < k; ++i) {
                    int cell = argmax[static_cast<size_t>(b) * k + i];
                    ga.data()[(static_cast<size_t>(b) * cells + cell) * k + i] +=
                        g.at(b, i);
                  }
              });
}

Tape::H Tape::stop_gradient(H a) {
  Tensor out = value(a);
  return push(std::move(out), false, nullptr);
}

Tape::H Tape::cross_entropy_rows(H logits, std::vector<int> labels,
                                 std::vector<unsigned char> active) {
  const Tensor& vl = value(logits);
  require(vl.ndim() == 2, "ShapeMismatch: cross_entropy_rows expects 2-D");
  int rows = vl.dim(0), cols = vl.dim(1);
  require(static_cast<int>(labels.size()) == rows &&
              static_cast<int>(active.size()) == rows,
          "ShapeMismatch: cross_entropy_rows labels");
  int n_active = 0;
  for (int r = 0; r < rows; ++r)
    if (active[static_cast<size_t>(r)]) {
      require(labels[static_cast<size_t>(r)] >= 0 &&
                  labels[static_cast<size_t>(r)] < cols,
              "ShapeMismatch: label out of range");
      ++n_active;
    }
  // softmax probabilities saved for backward
  Tensor probs({rows, cols});
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (!active[static_cast<size_t>(r)]) continue;
    const double* row = vl.data() + static_cast<size_t>(r) * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    double logz = mx + std::log(sum);
    for (int c = 0; c < cols; ++c)
      probs.at(r, c) = std::exp(row[c] - logz);
    loss -= row[labels[static_cast<size_t>(r)]] - logz;
  }
  if (n_active > 0) loss /= static_cast<double>(n_active);
  Tensor out = Tensor::scalar(loss);
  check_finite(out, "cross_entropy_rows");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(logits) && n_active > 0,
              [logits, rows, cols, n_active, labels = std::move(labels),
               active = std::move(active), probs = std::move(probs),
               self](Tape& t) {
                double g = t.nodes_[static_cast<size_t>(self)].grad[0] /
                           static_cast<double>(n_active);
                Tensor& gl = t.grad_buf(logits);
                for (int r = 0; r < rows; ++r) {
                  if (!active[static_cast<size_t>(r)]) continue;
                  double* grow = gl.data() + static_cast<size_t>(r) * cols;
                  for (int c = 0; c < cols; ++c)
                    grow[c] += g * probs.at(r, c);
                  grow[labels[static_cast<size_t>(r)]] -= g;
                }
              });
}

Tape::H Tape::group_tanh_log(H g_matrix,
                             std::vector<std::vector<std::vector<int>>> rows) {
  const Tensor& vg = value(g_matrix);
  require(vg.ndim() == 2, "ShapeMismatch: group_tanh_log expects 2-D");
  int k = vg.dim(1);
  require(static_cast<int>(rows.size()) == k,
          "ShapeMismatch: group_tanh_log groups");
  double loss = 0.0;
  for (int i = 0; i < k; ++i) {
    for (const auto& group : rows[static_cast<size_t>(i)]) {
      double s = 0.0;
      for (int b : group) s += vg.at(b, i);
      loss -= std::log(std::tanh(s) + kLogEps);
    }
  }
  loss /= static_cast<double>(k);
  Tensor out = Tensor::scalar(loss);
  check_finite(out, "group_tanh_log");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(g_matrix),
              [g_matrix, k, rows = std::move(rows), self](Tape& t) {
                double g = t.nodes_[static_cast<size_t>(self)].grad[0];
                const Tensor& vg2 = t.value(g_matrix);
                Tensor& gg = t.grad_buf(g_matrix);
                for (int i = 0; i < k; ++i) {
                  for (const auto& group : rows[static_cast<size_t>(i)]) {
                    double s = 0.0;
                    for (int b : group) s += vg2.at(b, i);
                    double th = std::tanh(s);
                    double d = -g * (1.0 - th * th) /
                               ((th + kLogEps) * static_cast<double>(k));
                    for (int b : group) gg.at(b, i) += d;
                  }
                }
              });
}

Tape::H Tape::group_max_sum(H g_matrix,
                            std::vector<std::vector<std::vector<int>>> rows) {
  const Tensor& vg = value(g_matrix);
  require(vg.ndim() == 2, "ShapeMismatch: group_max_sum expects 2-D");
  int k = vg.dim(1);
  require(static_cast<int>(rows.size()) == k,
          "ShapeMismatch: group_max_sum groups");
  double loss = 0.0;
  std::vector<std::vector<int>> arg(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    for (const auto& group : rows[static_cast<size_t>(i)]) {
      if (group.empty()) continue;
      double best = vg.at(group[0], i);
      int best_b = group[0];
      for (int b : group) {
        double v = vg.at(b, i);
        if (v > best) {
          best = v;
          best_b = b;
        }
      }
      loss += best;
      arg[static_cast<size_t>(i)].push_back(best_b);
    }
  }
  loss /= static_cast<double>(k);
  Tensor out = Tensor::scalar(loss);
  check_finite(out, "group_max_sum");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(g_matrix),
              [g_matrix, k, arg = std::move(arg), self](Tape& t) {
                double g = t.nodes_[static_cast<size_t>(self)].grad[0] /
                           static_cast<double>(k);
                Tensor& gg = t.grad_buf(g_matrix);
                for (int i = 0; i < k; ++i)
                  for (int b : arg[static_cast<size_t>(i)]) gg.at(b, i) += g;
              });
}

Tape::H Tape::gumbel_sigmoid(H gamma, std::vector<double> noise, double tau) {
  if (tau <= 0.0)
    fail(ErrorCode::InvalidArgument, "NonPositiveTemperature: tau must be > 0");
  const Tensor& vg = value(gamma);
  require(vg.ndim() == 2 && vg.dim(1) == 2,
          "ShapeMismatch: gumbel_sigmoid expects (K,2) logits");
  int k = vg.dim(0);
  require(static_cast<int>(noise.size()) == k,
          "ShapeMismatch: gumbel_sigmoid noise");
  Tensor out({k});
  for (int i = 0; i < k; ++i) {
    double z = (vg.at(i, 0) - vg.at(i, 1) + noise[static_cast<size_t>(i)]) / tau;
    out[i] = 1.0 / (1.0 + std::exp(-z));
  }
  check_finite(out, "gumbel_sigmoid");
  H self = static_cast<H>(nodes_.size());
  return push(std::move(out), wants_grad(gamma), [gamma, k, tau, self](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
    const Tensor& m = t.value(self);
    Tensor& gg = t.grad_buf(gamma);
    for (int i = 0; i < k; ++i) {
      double d = g[i] * m[i] * (1.0 - m[i]) / tau;
      gg.at(i, 0) += d;
      gg.at(i, 1) -= d;
    }
  });
}

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (!param.same_shape(grad))
    fail(ErrorCode::InvalidArgument, "ShapeMismatch: adam_step");
  if (state.m.numel() == 0) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  }
  if (!state.m.same_shape(param))
    fail(ErrorCode::InvalidArgument, "ShapeMismatch: adam state");
  state.step += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (int i = 0; i < param.numel(); ++i) {
    double g = grad[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace pp
