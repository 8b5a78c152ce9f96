#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/errors.hpp"
#include "spade/core/rng.hpp"

namespace spade {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void accumulate(const std::vector<double>& g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  bool has_grad() const { return !grad.empty(); }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape: ordered record of op nodes. Creation order is a topological order, so
// replaying it backward visits every node in reverse topological order once.
// ---------------------------------------------------------------------------
class Tape {
public:
  struct Record {
    detail::NodePtr out;
    std::vector<detail::NodePtr> ins;
    std::function<void()> backprop;  // pushes out->grad into ins' grads
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  bool recording() const { return enabled_; }
  void set_recording(bool on) { enabled_ = on; }

  void record(Record r) { records_.push_back(std::move(r)); }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Seeds d(out)/d(out) = 1 and replays recorded rules in reverse order.
  // Leaves keep their gradients; the tape itself is cleared afterward.
  void run_backward(const detail::NodePtr& loss) {
    if (loss->value.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss->shape));
    loss->accumulate({1.0});
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->has_grad()) it->backprop();
    }
    clear();
  }

private:
  std::vector<Record> records_;
  bool enabled_ = true;
};

// Disables gradient recording for its lifetime (current thread).
struct NoGradGuard {
  NoGradGuard() : prev_(Tape::active().recording()) { Tape::active().set_recording(false); }
  ~NoGradGuard() { Tape::active().set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major float64 array with optional gradient tracking.
// Copies share the underlying node (shallow value-handle semantics).
// ---------------------------------------------------------------------------
class Tensor {
public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 1.0, requires_grad);
  }
  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = rng.normal(0.0, sigma);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }

  double item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const {
    return node_->value[i * node_->shape[1] + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->has_grad(); }
  const std::vector<double>& grad() const {
    if (!node_->has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy; the clone is detached from any recorded history.
  Tensor clone() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Same data viewed without gradient tracking (shares nothing; copies).
  Tensor detached() const {
    Tensor t = clone();
    t.node_->requires_grad = false;
    return t;
  }

  detail::NodePtr node() const { return node_; }

private:
  detail::NodePtr node_;
};

inline void backward(const Tensor& loss) { Tape::active().run_backward(loss.node()); }

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------
namespace detail {

inline bool track(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active().recording()) return false;
  for (const auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_out(Shape shape, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(requires_grad);
  return t;
}

inline void record1(const Tensor& a, const Tensor& out, std::function<void()> fn) {
  Tape::active().record({out.node(), {a.node()}, std::move(fn)});
}
inline void record2(const Tensor& a, const Tensor& b, const Tensor& out,
                    std::function<void()> fn) {
  Tape::active().record({out.node(), {a.node(), b.node()}, std::move(fn)});
}

// Broadcast support restricted to leading singleton dims: the shape of `small`
// (left-padded with 1s) must equal `big` on a trailing suffix, with 1s before.
// Returns the number of leading positions being broadcast over, or -1 if the
// shapes are incompatible.
inline long lead_broadcast_repeat(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return -1;
  const std::size_t off = big.size() - small.size();
  std::size_t repeat = 1;
  for (std::size_t i = 0; i < off; ++i) repeat *= big[i];
  bool suffix_started = false;
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] == big[off + i]) {
      suffix_started = true;
    } else if (small[i] == 1 && !suffix_started) {
      repeat *= big[off + i];
    } else {
      return -1;
    }
  }
  return static_cast<long>(repeat);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (with leading-singleton broadcasting)
// ---------------------------------------------------------------------------
namespace detail {

template <class Fwd, class BwdA, class BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                 BwdB bwd_b) {
  const Tensor *big = &a, *small = &b;
  bool b_is_small = true;
  long rep = lead_broadcast_repeat(a.shape(), b.shape());
  if (rep < 0) {
    rep = lead_broadcast_repeat(b.shape(), a.shape());
    big = &b;
    small = &a;
    b_is_small = false;
    if (rep < 0)
      throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                           " and " + shape_str(b.shape()));
  }
  const std::size_t ns = small->size();
  const bool rg = track({&a, &b});
  Tensor out = make_out(big->shape(), rg);
  const auto& bv = big->data();
  const auto& sv = small->data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < bv.size(); ++i) {
    const double x = b_is_small ? bv[i] : sv[i % ns];
    const double y = b_is_small ? sv[i % ns] : bv[i];
    ov[i] = fwd(x, y);
  }
  if (rg) {
    Tensor A = a, B = b, O = out;
    record2(a, b, out, [A, B, O, b_is_small, ns, bwd_a, bwd_b]() {
      const auto& g = O.node()->grad;
      const auto& bigv = b_is_small ? A.node()->value : B.node()->value;
      const auto& smallv = b_is_small ? B.node()->value : A.node()->value;
      std::vector<double> ga(A.size(), 0.0), gb(B.size(), 0.0);
      auto& gbig = b_is_small ? ga : gb;
      auto& gsmall = b_is_small ? gb : ga;
      for (std::size_t i = 0; i < bigv.size(); ++i) {
        const double x = b_is_small ? bigv[i] : smallv[i % ns];
        const double y = b_is_small ? smallv[i % ns] : bigv[i];
        const double gx = bwd_a(x, y, g[i]);
        const double gy = bwd_b(x, y, g[i]);
        if (b_is_small) {
          gbig[i] += gx;
          gsmall[i % ns] += gy;
        } else {
          gsmall[i % ns] += gx;
          gbig[i] += gy;
        }
      }
      if (A.requires_grad()) A.node()->accumulate(ga);
      if (B.requires_grad()) B.node()->accumulate(gb);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  Tensor out = detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
  for (double v : out.data())
    if (!std::isfinite(v)) throw NumericError("div produced a non-finite value");
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------
namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx) {
  const bool rg = track({&a});
  Tensor out = make_out(a.shape(), rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  if (rg) {
    Tensor A = a, O = out;
    record1(a, out, [A, O, dfdx]() {
      const auto& g = O.node()->grad;
      const auto& x = A.node()->value;
      const auto& y = O.node()->value;
      std::vector<double> ga(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] = g[i] * dfdx(x[i], y[i]);
      A.node()->accumulate(ga);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return detail::unary_op(
      a,
      [](double x) {
        const double u = kC * (x + kA * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      });
}

inline Tensor tanh_act(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_op(const Tensor& a) {
  Tensor out = detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  for (double v : out.data())
    if (!std::isfinite(v)) throw NumericError("exp overflowed to a non-finite value");
  return out;
}

inline Tensor log_op(const Tensor& a) {
  Tensor out = detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
  for (double v : out.data())
    if (!std::isfinite(v)) throw NumericError("log of a non-positive value");
  return out;
}

inline Tensor sqrt_op(const Tensor& a) {
  Tensor out = detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
  for (double v : out.data())
    if (!std::isfinite(v)) throw NumericError("sqrt of a negative value");
  return out;
}

// log(1 + e^x), evaluated stably; derivative is sigmoid(x).
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

// max(x, m); subgradient 0 on the clamped side.
inline Tensor clamp_min(const Tensor& a, double m) {
  return detail::unary_op(
      a, [m](double x) { return x > m ? x : m; },
      [m](double x, double) { return x > m ? 1.0 : 0.0; });
}

// x^p for constant p; requires strictly positive inputs.
inline Tensor pow_const(const Tensor& a, double p) {
  for (double v : a.data())
    if (!(v > 0.0)) throw ContractError("pow_const requires strictly positive inputs");
  return detail::unary_op(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double y) { return p * y / x; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------
inline Tensor sum(const Tensor& a) {
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({1}, rg);
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.mutable_data()[0] = s;
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O]() {
      const double g = O.node()->grad[0];
      std::vector<double> ga(A.size(), g);
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor l1_norm(const Tensor& a) {
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({1}, rg);
  double s = 0.0;
  for (double v : a.data()) s += std::abs(v);
  out.mutable_data()[0] = s;
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O]() {
      const double g = O.node()->grad[0];
      const auto& x = A.node()->value;
      std::vector<double> ga(x.size());
      for (std::size_t i = 0; i < x.size(); ++i)
        ga[i] = g * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor l2_norm(const Tensor& a) {
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({1}, rg);
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  const double n = std::sqrt(s);
  out.mutable_data()[0] = n;
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O]() {
      const double g = O.node()->grad[0];
      const double n = O.node()->value[0];
      const auto& x = A.node()->value;
      std::vector<double> ga(x.size(), 0.0);
      if (n > 0.0)
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] = g * x[i] / n;
      A.node()->accumulate(ga);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Axis helpers: an axis split of shape into (outer, n, inner)
// ---------------------------------------------------------------------------
namespace detail {

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ContractError("axis " + std::to_string(axis) + " out of range");
  AxisSplit sp{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const auto sp = detail::axis_split(a.shape(), axis);
  Shape oshape = a.shape();
  oshape.erase(oshape.begin() + static_cast<long>(axis));
  if (oshape.empty()) oshape = {1};
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out(oshape, rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        ov[o * sp.inner + i] += av[(o * sp.n + k) * sp.inner + i];
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, sp]() {
      const auto& g = O.node()->grad;
      std::vector<double> ga(A.size());
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i)
            ga[(o * sp.n + k) * sp.inner + i] = g[o * sp.inner + i];
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto sp = detail::axis_split(a.shape(), axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(sp.n));
}

// ---------------------------------------------------------------------------
// softmax / log_softmax along an axis, max-subtracted for stability
// ---------------------------------------------------------------------------
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  for (double v : a.data())
    if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite value");
  const auto sp = detail::axis_split(a.shape(), axis);
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -1e300;
      for (std::size_t k = 0; k < sp.n; ++k)
        mx = std::max(mx, av[(o * sp.n + k) * sp.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        ov[idx] = std::exp(av[idx] - mx);
        z += ov[idx];
      }
      for (std::size_t k = 0; k < sp.n; ++k) ov[(o * sp.n + k) * sp.inner + i] /= z;
    }
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, sp]() {
      const auto& g = O.node()->grad;
      const auto& y = O.node()->value;
      std::vector<double> ga(A.size());
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double dot = 0.0;
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t idx = (o * sp.n + k) * sp.inner + i;
            dot += g[idx] * y[idx];
          }
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t idx = (o * sp.n + k) * sp.inner + i;
            ga[idx] = y[idx] * (g[idx] - dot);
          }
        }
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  for (double v : a.data())
    if (!std::isfinite(v)) throw NumericError("log_softmax input contains a non-finite value");
  const auto sp = detail::axis_split(a.shape(), axis);
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out(a.shape(), rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -1e300;
      for (std::size_t k = 0; k < sp.n; ++k)
        mx = std::max(mx, av[(o * sp.n + k) * sp.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k)
        z += std::exp(av[(o * sp.n + k) * sp.inner + i] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        ov[idx] = av[idx] - lse;
      }
    }
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, sp]() {
      const auto& g = O.node()->grad;
      const auto& y = O.node()->value;  // log-probabilities
      std::vector<double> ga(A.size());
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double gsum = 0.0;
          for (std::size_t k = 0; k < sp.n; ++k)
            gsum += g[(o * sp.n + k) * sp.inner + i];
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t idx = (o * sp.n + k) * sp.inner + i;
            ga[idx] = g[idx] - std::exp(y[idx]) * gsum;
          }
        }
      A.node()->accumulate(ga);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape / concat / slice
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), K = a.dim(1), n = b.dim(1);
  const bool rg = detail::track({&a, &b});
  Tensor out = detail::make_out({m, n}, rg);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const double aik = A[i * K + k];
        if (aik == 0.0) continue;
        const double* Bk = B + k * n;
        double* Ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aik * Bk[j];
      }
  }
  if (rg) {
    Tensor Ta = a, Tb = b, To = out;
    detail::record2(a, b, out, [Ta, Tb, To, m, K, n]() {
      const auto& g = To.node()->grad;
      if (Ta.requires_grad()) {
        std::vector<double> ga(m * K, 0.0);
        const double* B = Tb.node()->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            const double* Bk = B + k * n;
            const double* Gi = g.data() + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += Gi[j] * Bk[j];
            ga[i * K + k] = s;
          }
        Ta.node()->accumulate(ga);
      }
      if (Tb.requires_grad()) {
        std::vector<double> gb(K * n, 0.0);
        const double* A = Ta.node()->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            const double aik = A[i * K + k];
            if (aik == 0.0) continue;
            const double* Gi = g.data() + i * n;
            double* Gk = gb.data() + k * n;
            for (std::size_t j = 0; j < n; ++j) Gk[j] += aik * Gi[j];
          }
        Tb.node()->accumulate(gb);
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({n, m}, rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, m, n]() {
      const auto& g = O.node()->grad;
      std::vector<double> ga(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw DimensionError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  const bool rg = detail::track({&a});
  Tensor out = Tensor::from_data(std::move(shape), a.data());
  out.set_requires_grad(rg);
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O]() { A.node()->accumulate(O.node()->grad); });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  Shape oshape = s0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw DimensionError("concat: shape mismatch at " + shape_str(p.shape()));
    total += p.shape()[axis];
  }
  oshape[axis] = total;
  bool rg = false;
  if (Tape::active().recording())
    for (const auto& p : parts)
      if (p.requires_grad()) rg = true;
  Tensor out = detail::make_out(oshape, rg);
  const auto osp = detail::axis_split(oshape, axis);
  auto& ov = out.mutable_data();
  std::size_t pos = 0;  // running offset along the concat axis
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(pos);
    const auto psp = detail::axis_split(p.shape(), axis);
    const auto& pv = p.data();
    for (std::size_t o = 0; o < psp.outer; ++o)
      for (std::size_t k = 0; k < psp.n; ++k)
        for (std::size_t i = 0; i < psp.inner; ++i)
          ov[(o * osp.n + pos + k) * osp.inner + i] = pv[(o * psp.n + k) * psp.inner + i];
    pos += p.shape()[axis];
  }
  if (rg) {
    std::vector<Tensor> caps = parts;
    Tensor O = out;
    std::vector<detail::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    Tape::active().record({out.node(), ins, [caps, O, offsets, osp, axis]() {
                             const auto& g = O.node()->grad;
                             for (std::size_t pi = 0; pi < caps.size(); ++pi) {
                               if (!caps[pi].requires_grad()) continue;
                               const auto psp = detail::axis_split(caps[pi].shape(), axis);
                               std::vector<double> ga(caps[pi].size());
                               for (std::size_t o = 0; o < psp.outer; ++o)
                                 for (std::size_t k = 0; k < psp.n; ++k)
                                   for (std::size_t i = 0; i < psp.inner; ++i)
                                     ga[(o * psp.n + k) * psp.inner + i] =
                                         g[(o * osp.n + offsets[pi] + k) * osp.inner + i];
                               caps[pi].node()->accumulate(ga);
                             }
                           }});
  }
  return out;
}

// Contiguous range [start, stop) along an axis. Slices copy.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t stop) {
  const auto sp = detail::axis_split(a.shape(), axis);
  if (start > stop || stop > sp.n)
    throw ContractError("slice range [" + std::to_string(start) + "," + std::to_string(stop) +
                        ") out of bounds for axis size " + std::to_string(sp.n));
  Shape oshape = a.shape();
  oshape[axis] = stop - start;
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out(oshape, rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  const std::size_t w = stop - start;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < w; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        ov[(o * w + k) * sp.inner + i] = av[(o * sp.n + start + k) * sp.inner + i];
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, sp, start, w]() {
      const auto& g = O.node()->grad;
      std::vector<double> ga(A.size(), 0.0);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < w; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i)
            ga[(o * sp.n + start + k) * sp.inner + i] = g[(o * w + k) * sp.inner + i];
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor row(const Tensor& a, std::size_t i) { return slice(a, 0, i, i + 1); }

// ---------------------------------------------------------------------------
// Spatial helpers for [C,H,W] grids
// ---------------------------------------------------------------------------
inline Tensor avgpool2(const Tensor& a) {
  if (a.ndim() != 3 || a.dim(1) % 2 != 0 || a.dim(2) % 2 != 0)
    throw DimensionError("avgpool2 expects [C,H,W] with even H,W, got " + shape_str(a.shape()));
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), h = H / 2, w = W / 2;
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({C, h, w}, rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t b = c * H * W + 2 * y * W + 2 * x;
        ov[c * h * w + y * w + x] = 0.25 * (av[b] + av[b + 1] + av[b + W] + av[b + W + 1]);
      }
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, C, H, W, h, w]() {
      const auto& g = O.node()->grad;
      std::vector<double> ga(A.size(), 0.0);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double gv = 0.25 * g[c * h * w + y * w + x];
            const std::size_t b = c * H * W + 2 * y * W + 2 * x;
            ga[b] += gv;
            ga[b + 1] += gv;
            ga[b + W] += gv;
            ga[b + W + 1] += gv;
          }
      A.node()->accumulate(ga);
    });
  }
  return out;
}

inline Tensor upsample_nearest(const Tensor& a, std::size_t k) {
  if (a.ndim() != 3) throw DimensionError("upsample_nearest expects [C,H,W]");
  const std::size_t C = a.dim(0), h = a.dim(1), w = a.dim(2), H = h * k, W = w * k;
  const bool rg = detail::track({&a});
  Tensor out = detail::make_out({C, H, W}, rg);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        ov[c * H * W + y * W + x] = av[c * h * w + (y / k) * w + (x / k)];
  if (rg) {
    Tensor A = a, O = out;
    detail::record1(a, out, [A, O, C, h, w, H, W, k]() {
      const auto& g = O.node()->grad;
      std::vector<double> ga(A.size(), 0.0);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x)
            ga[c * h * w + (y / k) * w + (x / k)] += g[c * H * W + y * W + x];
      A.node()->accumulate(ga);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// Cosine similarity of two same-shape tensors viewed as flat vectors.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("cosine_similarity: shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor na = l2_norm(a), nb = l2_norm(b);
  if (na.item() == 0.0 || nb.item() == 0.0)
    throw ContractError("cosine_similarity undefined for a zero vector");
  return div(dot(a, b), mul(na, nb));
}

// Plain value utilities (no gradient involvement).
inline std::size_t argmax_row(const Tensor& t, std::size_t r) {
  const std::size_t n = t.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (t.at(r, j) > t.at(r, best)) best = j;
  return best;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace spade
