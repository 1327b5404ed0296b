#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tracke/random.hpp"
#include "tracke/tensor.hpp"

namespace tracke {

// Handle into a Tape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
};

// Reverse-mode tape. Operations execute eagerly and append a node holding the
// result plus a backward rule; backward() replays the rules in reverse
// execution order. A tensor that is never touched while replaying keeps a
// gradient of exactly zero, which is what makes the top-K stop-gradient hold
// by construction: selection reads values and records nothing.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Var leaf(Tensor value, bool trainable = true) {
    value.check_finite("leaf");
    return push(std::move(value), nullptr, trainable);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var scalar_constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  std::size_t node_count() const { return nodes_.size(); }

  // Valid after backward(); returns an all-zero tensor for any node the loss
  // never reached.
  Tensor grad(Var v) const {
    if (v.id < touched_.size() && touched_[v.id]) return grads_[v.id];
    return Tensor::zeros(nodes_[v.id].value.shape());
  }

  void backward(Var loss) {
    const Tensor& lv = nodes_[loss.id].value;
    if (!lv.is_scalar()) {
      throw ValueError("backward: loss must be scalar, got shape " +
                       shape_to_string(lv.shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    touched_.assign(nodes_.size(), 0);
    accumulate(loss.id, Tensor::scalar(1.0));
    for (std::uint32_t i = loss.id;; --i) {
      if (touched_[i] && nodes_[i].backward) nodes_[i].backward(*this, i);
      if (i == 0) break;
    }
  }

  // Internal plumbing for op implementations.
  Var push(Tensor value, BackwardFn backward, bool trainable = false) {
    value.check_finite("op output");
    nodes_.push_back(Node{std::move(value), std::move(backward), trainable});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void accumulate(std::uint32_t id, const Tensor& contribution) {
    if (!touched_[id]) {
      grads_[id] = Tensor::zeros(nodes_[id].value.shape());
      touched_[id] = 1;
    }
    Tensor& g = grads_[id];
    if (!g.same_shape(contribution)) {
      throw ShapeError("gradient shape " + shape_to_string(contribution.shape()) +
                       " does not match value shape " + shape_to_string(g.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
  }

  const Tensor& grad_ref(std::uint32_t id) const { return grads_[id]; }

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    bool trainable;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> touched_;
};

// ---- elementwise ----

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("add: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    tp.accumulate(a.id, g);
    tp.accumulate(b.id, g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("sub: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    tp.accumulate(a.id, g);
    Tensor neg = g;
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];
    tp.accumulate(b.id, neg);
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("mul: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& av2 = tp.value(a);
    const Tensor& bv2 = tp.value(b);
    Tensor ga = g;
    Tensor gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= bv2[i];
      gb[i] *= av2[i];
    }
    tp.accumulate(a.id, ga);
    tp.accumulate(b.id, gb);
  });
}

// out = m*x + k elementwise with scalar constants.
inline Var affine(Tape& t, Var a, double m, double k) {
  Tensor out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m * out[i] + k;
  return t.push(std::move(out), [a, m](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= m;
    tp.accumulate(a.id, g);
  });
}

inline Var scale(Tape& t, Var a, double c) { return affine(t, a, c, 0.0); }

inline Var relu(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] <= 0.0) g[i] = 0.0;  // subgradient at 0 is 0
    }
    tp.accumulate(a.id, g);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(out[i]);
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    const Tensor& s = tp.value(Var{self});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s[i] * (1.0 - s[i]);
    tp.accumulate(a.id, g);
  });
}

inline Var clamp(Tape& t, Var a, double lo, double hi) {
  Tensor out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(std::max(out[i], lo), hi);
  }
  return t.push(std::move(out), [a, lo, hi](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] < lo || x[i] > hi) g[i] = 0.0;
    }
    tp.accumulate(a.id, g);
  });
}

inline Var log(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] <= 0.0) {
      throw NumericalError("log of non-positive value " + std::to_string(out[i]));
    }
    out[i] = std::log(out[i]);
  }
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] /= x[i];
    tp.accumulate(a.id, g);
  });
}

// ---- matrix ops ----

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = ap[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bp + kk * n;
      double* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Tensor transpose_values(const Tensor& a) {
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

inline Var matmul(Tape& t, Var a, Var b) {
  Tensor out = matmul_values(t.value(a), t.value(b));
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    tp.accumulate(a.id, matmul_values(g, transpose_values(tp.value(b))));
    tp.accumulate(b.id, matmul_values(transpose_values(tp.value(a)), g));
  });
}

inline Var transpose(Tape& t, Var a) {
  Tensor out = transpose_values(t.value(a));
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    tp.accumulate(a.id, transpose_values(tp.grad_ref(self)));
  });
}

inline Var slice_rows(Tape& t, Var a, std::size_t r0, std::size_t r1) {
  const Tensor& av = t.value(a);
  if (r0 >= r1 || r1 > av.rows()) throw ShapeError("slice_rows: bad range");
  std::size_t c = av.cols();
  Tensor out({r1 - r0, c});
  for (std::size_t r = r0; r < r1; ++r) {
    for (std::size_t j = 0; j < c; ++j) out.at(r - r0, j) = av.at(r, j);
  }
  return t.push(std::move(out), [a, r0](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor ga = Tensor::zeros(tp.value(a).shape());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t j = 0; j < g.cols(); ++j) ga.at(r0 + r, j) = g.at(r, j);
    }
    tp.accumulate(a.id, ga);
  });
}

inline Var slice_cols(Tape& t, Var a, std::size_t c0, std::size_t c1) {
  const Tensor& av = t.value(a);
  if (c0 >= c1 || c1 > av.cols()) throw ShapeError("slice_cols: bad range");
  std::size_t r = av.rows();
  Tensor out({r, c1 - c0});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
  }
  return t.push(std::move(out), [a, c0](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor ga = Tensor::zeros(tp.value(a).shape());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) ga.at(i, c0 + j) = g.at(i, j);
    }
    tp.accumulate(a.id, ga);
  });
}

inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty part list");
  std::size_t c = t.value(parts[0]).cols();
  std::size_t r = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += t.value(p).rows();
  }
  Tensor out({r, c});
  std::size_t row = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    for (std::size_t i = 0; i < pv.rows(); ++i, ++row) {
      for (std::size_t j = 0; j < c; ++j) out.at(row, j) = pv.at(i, j);
    }
  }
  return t.push(std::move(out), [parts](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    std::size_t row = 0;
    for (Var p : parts) {
      const Tensor& pv = tp.value(p);
      Tensor gp({pv.rows(), pv.cols()});
      for (std::size_t i = 0; i < pv.rows(); ++i, ++row) {
        for (std::size_t j = 0; j < pv.cols(); ++j) gp.at(i, j) = g.at(row, j);
      }
      tp.accumulate(p.id, gp);
    }
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty part list");
  std::size_t r = t.value(parts[0]).rows();
  std::size_t c = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += t.value(p).cols();
  }
  Tensor out({r, c});
  std::size_t col = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    for (std::size_t j = 0; j < pv.cols(); ++j, ++col) {
      for (std::size_t i = 0; i < r; ++i) out.at(i, col) = pv.at(i, j);
    }
  }
  return t.push(std::move(out), [parts](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    std::size_t col = 0;
    for (Var p : parts) {
      const Tensor& pv = tp.value(p);
      Tensor gp({pv.rows(), pv.cols()});
      for (std::size_t j = 0; j < pv.cols(); ++j, ++col) {
        for (std::size_t i = 0; i < pv.rows(); ++i) gp.at(i, j) = g.at(i, col);
      }
      tp.accumulate(p.id, gp);
    }
  });
}

// Adds a length-r vector to every column of an r x c matrix.
inline Var add_col_broadcast(Tape& t, Var mat, Var vec) {
  const Tensor& mv = t.value(mat);
  const Tensor& vv = t.value(vec);
  if (vv.rank() != 1 || vv.size() != mv.rows()) {
    throw ShapeError("add_col_broadcast: vector length " + shape_to_string(vv.shape()) +
                     " vs matrix " + shape_to_string(mv.shape()));
  }
  Tensor out = mv;
  for (std::size_t i = 0; i < mv.rows(); ++i) {
    for (std::size_t j = 0; j < mv.cols(); ++j) out.at(i, j) += vv[i];
  }
  return t.push(std::move(out), [mat, vec](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    tp.accumulate(mat.id, g);
    Tensor gv(Shape{g.rows()});
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) s += g.at(i, j);
      gv[i] = s;
    }
    tp.accumulate(vec.id, gv);
  });
}

// ---- reductions and normalizations ----

inline Var sum_all(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return t.push(Tensor::scalar(s), [a](Tape& tp, std::uint32_t self) {
    double g = tp.grad_ref(self)[0];
    Tensor ga = Tensor::full(tp.value(a).shape(), g);
    tp.accumulate(a.id, ga);
  });
}

// Row-wise max of an r x c matrix; ties resolve to the lower column index.
inline Var rowmax(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  std::size_t r = av.rows(), c = av.cols();
  Tensor out(Shape{r});
  std::vector<std::size_t> argmax(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    double best = av.at(i, 0);
    std::size_t bj = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (av.at(i, j) > best) {
        best = av.at(i, j);
        bj = j;
      }
    }
    out[i] = best;
    argmax[i] = bj;
  }
  return t.push(std::move(out), [a, argmax](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor ga = Tensor::zeros(tp.value(a).shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga.at(i, argmax[i]) = g[i];
    tp.accumulate(a.id, ga);
  });
}

namespace detail {

// Softmax over a strided slice, writing in place. Max-subtraction keeps the
// exponentials in range; the result is normalized by an explicit division so
// each slice sums to 1 at working precision.
inline void softmax_slice(double* x, std::size_t n, std::size_t stride) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = std::exp(x[i * stride] - mx);
    x[i * stride] = e;
    sum += e;
  }
  for (std::size_t i = 0; i < n; ++i) x[i * stride] /= sum;
}

inline void softmax_backward_slice(const double* s, const double* g, double* out,
                                   std::size_t n, std::size_t stride) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += s[i * stride] * g[i * stride];
  for (std::size_t i = 0; i < n; ++i) {
    out[i * stride] += s[i * stride] * (g[i * stride] - dot);
  }
}

}  // namespace detail

// Softmax along `axis` of a rank-1 or rank-2 tensor. axis=1 normalizes each
// row, axis=0 each column; rank-1 tensors ignore the axis.
inline Var softmax(Tape& t, Var a, std::size_t axis = 0) {
  Tensor out = t.value(a);
  if (out.rank() == 1) {
    detail::softmax_slice(out.data(), out.size(), 1);
  } else if (out.rank() == 2) {
    if (axis == 1) {
      for (std::size_t i = 0; i < out.rows(); ++i) {
        detail::softmax_slice(out.data() + i * out.cols(), out.cols(), 1);
      }
    } else if (axis == 0) {
      for (std::size_t j = 0; j < out.cols(); ++j) {
        detail::softmax_slice(out.data() + j, out.rows(), out.cols());
      }
    } else {
      throw ShapeError("softmax: axis out of range");
    }
  } else {
    throw ShapeError("softmax: rank-1 or rank-2 tensor required");
  }
  return t.push(std::move(out), [a, axis](Tape& tp, std::uint32_t self) {
    const Tensor& s = tp.value(Var{self});
    const Tensor& g = tp.grad_ref(self);
    Tensor ga = Tensor::zeros(s.shape());
    if (s.rank() == 1) {
      detail::softmax_backward_slice(s.data(), g.data(), ga.data(), s.size(), 1);
    } else if (axis == 1) {
      for (std::size_t i = 0; i < s.rows(); ++i) {
        std::size_t off = i * s.cols();
        detail::softmax_backward_slice(s.data() + off, g.data() + off, ga.data() + off,
                                       s.cols(), 1);
      }
    } else {
      for (std::size_t j = 0; j < s.cols(); ++j) {
        detail::softmax_backward_slice(s.data() + j, g.data() + j, ga.data() + j,
                                       s.rows(), s.cols());
      }
    }
    tp.accumulate(a.id, ga);
  });
}

// Row softmax of attention scores where query i may only attend to keys
// j <= i. Masked entries are structurally excluded, so position i's output is
// bit-exactly independent of keys beyond i, and their gradient is exactly 0.
inline Var causal_row_softmax(Tape& t, Var a) {
  const Tensor& av = t.value(a);
  if (av.rank() != 2 || av.cols() < av.rows()) {
    throw ShapeError("causal_row_softmax: needs rank-2 with cols >= rows, got " +
                     shape_to_string(av.shape()));
  }
  Tensor out = Tensor::zeros(av.shape());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::size_t n = i + 1;
    double mx = av.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    const Tensor& s = tp.value(Var{self});
    const Tensor& g = tp.grad_ref(self);
    Tensor ga = Tensor::zeros(s.shape());
    for (std::size_t i = 0; i < s.rows(); ++i) {
      std::size_t n = i + 1;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += s.at(i, j) * g.at(i, j);
      for (std::size_t j = 0; j < n; ++j) {
        ga.at(i, j) = s.at(i, j) * (g.at(i, j) - dot);
      }
    }
    tp.accumulate(a.id, ga);
  });
}

// Per-vector normalization with learned gain and bias. A rank-1 input is one
// vector; a rank-2 input normalizes each column independently. Variance is
// the population variance.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  if (eps <= 0.0) throw ValueError("layer_norm: eps must be positive");
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  std::size_t d = xv.rank() == 1 ? xv.size() : xv.rows();
  std::size_t cols = xv.rank() == 1 ? 1 : xv.cols();
  if (gv.size() != d || bv.size() != d) {
    throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(d));
  }
  auto idx = [&](std::size_t i, std::size_t j) { return i * cols + j; };
  Tensor out = xv;
  for (std::size_t j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xv[idx(i, j)];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double c = xv[idx(i, j)] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      out[idx(i, j)] = (xv[idx(i, j)] - mean) * inv * gv[i] + bv[i];
    }
  }
  return t.push(std::move(out), [x, gain, bias, eps](Tape& tp, std::uint32_t self) {
    const Tensor& xv2 = tp.value(x);
    const Tensor& gv2 = tp.value(gain);
    const Tensor& g = tp.grad_ref(self);
    std::size_t d = xv2.rank() == 1 ? xv2.size() : xv2.rows();
    std::size_t cols = xv2.rank() == 1 ? 1 : xv2.cols();
    auto idx = [&](std::size_t i, std::size_t j) { return i * cols + j; };
    Tensor gx = Tensor::zeros(xv2.shape());
    Tensor ggain(Shape{d});
    Tensor gbias(Shape{d});
    double dn = static_cast<double>(d);
    for (std::size_t j = 0; j < cols; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < d; ++i) mean += xv2[idx(i, j)];
      mean /= dn;
      double var = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double c = xv2[idx(i, j)] - mean;
        var += c * c;
      }
      var /= dn;
      double inv = 1.0 / std::sqrt(var + eps);
      // dxhat = g * gain; then the standard two-correction form.
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double xhat = (xv2[idx(i, j)] - mean) * inv;
        double dxhat = g[idx(i, j)] * gv2[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        ggain[i] += g[idx(i, j)] * xhat;
        gbias[i] += g[idx(i, j)];
      }
      for (std::size_t i = 0; i < d; ++i) {
        double xhat = (xv2[idx(i, j)] - mean) * inv;
        double dxhat = g[idx(i, j)] * gv2[i];
        gx[idx(i, j)] = inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
      }
    }
    tp.accumulate(x.id, gx);
    tp.accumulate(gain.id, ggain);
    tp.accumulate(bias.id, gbias);
  });
}

// Inverted dropout: zero entries with probability p and scale survivors by
// 1/(1-p) in training mode; a pure identity in inference mode.
inline Var dropout(Tape& t, Var a, double p, bool training, Rng* rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError("dropout: probability must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) {
    Tensor out = t.value(a);
    return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
      tp.accumulate(a.id, tp.grad_ref(self));
    });
  }
  if (rng == nullptr) throw ValueError("dropout: training mode requires an rng");
  Tensor out = t.value(a);
  std::vector<char> kept(out.size());
  double scale_v = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    kept[i] = rng->bernoulli(p) ? 0 : 1;
    out[i] = kept[i] ? out[i] * scale_v : 0.0;
  }
  return t.push(std::move(out), [a, kept, scale_v](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_ref(self);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = kept[i] ? g[i] * scale_v : 0.0;
    tp.accumulate(a.id, g);
  });
}

// -log softmax(logits)[target]; logits may have any shape and are treated as
// a flat length-V vector.
inline Var cross_entropy_from_logits(Tape& t, Var logits, std::size_t target) {
  const Tensor& lv = t.value(logits);
  std::size_t v = lv.size();
  if (target >= v) {
    throw ValueError("cross_entropy_from_logits: target " + std::to_string(target) +
                     " out of range for " + std::to_string(v) + " classes");
  }
  double mx = lv[0];
  for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, lv[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < v; ++i) sum += std::exp(lv[i] - mx);
  double loss = (mx + std::log(sum)) - lv[target];
  return t.push(Tensor::scalar(loss), [logits, target](Tape& tp, std::uint32_t self) {
    double g = tp.grad_ref(self)[0];
    const Tensor& lv2 = tp.value(logits);
    std::size_t n = lv2.size();
    double mx2 = lv2[0];
    for (std::size_t i = 1; i < n; ++i) mx2 = std::max(mx2, lv2[i]);
    double sum2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum2 += std::exp(lv2[i] - mx2);
    Tensor gl = Tensor::zeros(lv2.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double p = std::exp(lv2[i] - mx2) / sum2;
      gl[i] = g * (p - (i == target ? 1.0 : 0.0));
    }
    tp.accumulate(logits.id, gl);
  });
}

}  // namespace tracke
