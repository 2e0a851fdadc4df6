#include "biomamba/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace biomamba {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool on_tape = false;
  uint64_t id;

  TensorNode() : id(next_id()) {}

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

struct NodeAccess {
  static Tensor wrap(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }
  static const std::shared_ptr<TensorNode>& get(const Tensor& t) {
    if (!t.defined()) throw contract_error("operation on undefined tensor");
    return t.node_;
  }
};

}  // namespace detail

namespace {

using detail::TensorNode;

void check_shape(const Shape& s) {
  if (s.empty()) throw contract_error("tensor shape must have rank >= 1");
  for (int d : s) {
    if (d <= 0) throw contract_error("tensor dimensions must be positive, got " + shape_str(s));
  }
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

std::atomic<uint64_t> g_exp_saturations{0};

Tensor wrap(std::shared_ptr<TensorNode> n) {
  return detail::NodeAccess::wrap(std::move(n));
}

const std::shared_ptr<TensorNode>& node_of(const Tensor& t) {
  return detail::NodeAccess::get(t);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto n = std::make_shared<TensorNode>();
  n->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw contract_error("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev,
                      bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_values()) v = rng.normal(mean, stddev);
  return t;
}

const Shape& Tensor::shape() const { return node_of(*this)->shape; }
int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw contract_error("dim: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::size() const { return shape_numel(shape()); }
uint64_t Tensor::node_id() const { return node_of(*this)->id; }

std::span<const double> Tensor::values() const {
  auto n = node_of(*this);
  return {n->values.data(), n->values.size()};
}

std::span<double> Tensor::mutable_values() {
  auto n = node_of(*this);
  return {n->values.data(), n->values.size()};
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }
bool Tensor::has_grad() const { return !node_of(*this)->grad.empty(); }

std::span<const double> Tensor::grad() const {
  auto n = node_of(*this);
  return {n->grad.data(), n->grad.size()};
}

void Tensor::zero_grad() {
  // Releases the buffer entirely so has_grad() reports false until the next
  // backward pass touches this tensor again.
  node_of(*this)->grad.clear();
}

double Tensor::item() const {
  if (size() != 1) {
    throw contract_error("item: tensor has " + std::to_string(size()) +
                         " elements");
  }
  return values()[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw contract_error("at: rank mismatch for " + shape_str(s));
  }
  auto st = row_major_strides(s);
  int64_t lin = 0;
  size_t ax = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[ax]) throw contract_error("at: index out of range");
    lin += st[ax] * i;
    ++ax;
  }
  return values()[static_cast<size_t>(lin)];
}

// ---------------------------------------------------------------------------
// Tape

ComputationTape& ComputationTape::current() {
  thread_local ComputationTape tape;
  return tape;
}

size_t ComputationTape::size() const { return entries_.size(); }
void ComputationTape::clear() { entries_.clear(); }

void ComputationTape::backward(const Tensor& loss) {
  if (!loss.defined()) throw contract_error("backward: undefined loss");
  if (loss.size() != 1) {
    throw contract_error("backward: loss must be scalar, got " +
                         shape_str(loss.shape()));
  }
  auto n = node_of(loss);
  n->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->pull();
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() { ++ComputationTape::current().disable_depth_; }
NoGradGuard::~NoGradGuard() { --ComputationTape::current().disable_depth_; }

void backward(const Tensor& loss) { ComputationTape::current().backward(loss); }

// ---------------------------------------------------------------------------
// OpAccess

bool OpAccess::needs_grad(const Tensor& t) {
  auto n = node_of(t);
  return n->requires_grad || n->on_tape;
}

bool OpAccess::should_record(std::initializer_list<const Tensor*> inputs) {
  if (!ComputationTape::current().recording_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && needs_grad(*t)) return true;
  }
  return false;
}

void OpAccess::record(const char* op,
                      std::initializer_list<const Tensor*> inputs,
                      const Tensor& output, std::function<void()> pull) {
  ComputationTape& tape = ComputationTape::current();
  ComputationTape::Entry e;
  e.op = op;
  for (const Tensor* t : inputs) {
    if (t->defined()) e.input_ids.push_back(t->node_id());
  }
  e.output_id = output.node_id();
  e.pull = std::move(pull);
  node_of(output)->on_tape = true;
  tape.entries_.push_back(std::move(e));
}

std::span<double> OpAccess::grad_buffer(const Tensor& t) {
  auto n = node_of(t);
  if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
  return {n->grad.data(), n->grad.size()};
}

std::span<const double> OpAccess::grad_view(const Tensor& t) {
  auto n = node_of(t);
  return {n->grad.data(), n->grad.size()};
}

void OpAccess::mark_on_tape(const Tensor& t) { node_of(t)->on_tape = true; }

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

struct Bcast {
  Shape out;
  std::vector<int64_t> sa, sb;  // per-output-axis strides, 0 where broadcast
};

Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Bcast bc;
  bc.out.resize(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[static_cast<size_t>(i - (r - ra))];
    const int db = i < r - rb ? 1 : b[static_cast<size_t>(i - (r - rb))];
    if (da != db && da != 1 && db != 1) {
      throw contract_error(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) + " are not broadcastable");
    }
    bc.out[static_cast<size_t>(i)] = std::max(da, db);
  }
  auto sta = row_major_strides(a);
  auto stb = row_major_strides(b);
  bc.sa.assign(static_cast<size_t>(r), 0);
  bc.sb.assign(static_cast<size_t>(r), 0);
  for (int i = 0; i < r; ++i) {
    if (i >= r - ra && a[static_cast<size_t>(i - (r - ra))] != 1) {
      bc.sa[static_cast<size_t>(i)] = sta[static_cast<size_t>(i - (r - ra))];
    }
    if (i >= r - rb && b[static_cast<size_t>(i - (r - rb))] != 1) {
      bc.sb[static_cast<size_t>(i)] = stb[static_cast<size_t>(i - (r - rb))];
    }
  }
  return bc;
}

// Calls fn(out_lin, a_lin, b_lin) for every output element.
template <typename Fn>
void bcast_loop(const Bcast& bc, Fn&& fn) {
  const int r = static_cast<int>(bc.out.size());
  const int64_t n = shape_numel(bc.out);
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t la = 0, lb = 0;
  for (int64_t lo = 0; lo < n; ++lo) {
    fn(lo, la, lb);
    for (int ax = r - 1; ax >= 0; --ax) {
      const size_t u = static_cast<size_t>(ax);
      ++idx[u];
      la += bc.sa[u];
      lb += bc.sb[u];
      if (idx[u] < bc.out[u]) break;
      la -= static_cast<int64_t>(idx[u]) * bc.sa[u];
      lb -= static_cast<int64_t>(idx[u]) * bc.sb[u];
      idx[u] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind,
                 const char* name) {
  const auto& av = a.values();
  const auto& bv = b.values();
  Tensor out;
  bool same = a.shape() == b.shape();
  Bcast bc;
  if (same) {
    out = Tensor::zeros(a.shape());
    auto ov = out.mutable_values();
    const size_t n = av.size();
    switch (kind) {
      case BinKind::Add:
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
        break;
      case BinKind::Sub:
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
        break;
      case BinKind::Mul:
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
        break;
    }
  } else {
    bc = make_bcast(a.shape(), b.shape(), name);
    out = Tensor::zeros(bc.out);
    auto ov = out.mutable_values();
    switch (kind) {
      case BinKind::Add:
        bcast_loop(bc, [&](int64_t lo, int64_t la, int64_t lb) {
          ov[static_cast<size_t>(lo)] = av[static_cast<size_t>(la)] + bv[static_cast<size_t>(lb)];
        });
        break;
      case BinKind::Sub:
        bcast_loop(bc, [&](int64_t lo, int64_t la, int64_t lb) {
          ov[static_cast<size_t>(lo)] = av[static_cast<size_t>(la)] - bv[static_cast<size_t>(lb)];
        });
        break;
      case BinKind::Mul:
        bcast_loop(bc, [&](int64_t lo, int64_t la, int64_t lb) {
          ov[static_cast<size_t>(lo)] = av[static_cast<size_t>(la)] * bv[static_cast<size_t>(lb)];
        });
        break;
    }
  }

  if (OpAccess::should_record({&a, &b})) {
    const bool ga = OpAccess::needs_grad(a);
    const bool gb = OpAccess::needs_grad(b);
    Tensor ta = a, tb = b, to = out;
    OpAccess::record(name, {&a, &b}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      const auto apv = ta.values();
      const auto bpv = tb.values();
      std::span<double> gia, gib;
      if (ga) gia = OpAccess::grad_buffer(ta);
      if (gb) gib = OpAccess::grad_buffer(tb);
      if (same) {
        const size_t n = go.size();
        switch (kind) {
          case BinKind::Add:
            for (size_t i = 0; i < n; ++i) {
              if (ga) gia[i] += go[i];
              if (gb) gib[i] += go[i];
            }
            break;
          case BinKind::Sub:
            for (size_t i = 0; i < n; ++i) {
              if (ga) gia[i] += go[i];
              if (gb) gib[i] -= go[i];
            }
            break;
          case BinKind::Mul:
            for (size_t i = 0; i < n; ++i) {
              if (ga) gia[i] += go[i] * bpv[i];
              if (gb) gib[i] += go[i] * apv[i];
            }
            break;
        }
      } else {
        bcast_loop(bc, [&](int64_t lo, int64_t la, int64_t lb) {
          const double g = go[static_cast<size_t>(lo)];
          switch (kind) {
            case BinKind::Add:
              if (ga) gia[static_cast<size_t>(la)] += g;
              if (gb) gib[static_cast<size_t>(lb)] += g;
              break;
            case BinKind::Sub:
              if (ga) gia[static_cast<size_t>(la)] += g;
              if (gb) gib[static_cast<size_t>(lb)] -= g;
              break;
            case BinKind::Mul:
              if (ga) gia[static_cast<size_t>(la)] += g * bpv[static_cast<size_t>(lb)];
              if (gb) gib[static_cast<size_t>(lb)] += g * apv[static_cast<size_t>(la)];
              break;
          }
        });
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

// ---------------------------------------------------------------------------
// Scalar and unary ops

namespace {

// out[i] = fwd(a[i]); pull: ga[i] += go[i] * dfn(a[i], out[i])
template <typename FwdFn, typename DFn>
Tensor unary_op(const Tensor& a, const char* name, FwdFn fwd, DFn dfn) {
  const auto av = a.values();
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.mutable_values();
  const size_t n = av.size();
  for (size_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
  if (OpAccess::should_record({&a})) {
    Tensor ta = a, to = out;
    OpAccess::record(name, {&a}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(ta);
      const auto apv = ta.values();
      const auto opv = to.values();
      for (size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * dfn(apv[i], opv[i]);
    });
  }
  return out;
}

double sigmoid_of(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, "add_scalar", [s](double x) { return x + s; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, "mul_scalar", [s](double x) { return x * s; },
                  [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, "silu",
                  [](double x) { return x * sigmoid_of(x); },
                  [](double x, double) {
                    const double s = sigmoid_of(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, "softplus",
                  [](double x) {
                    // max(x,0) + log1p(exp(-|x|)) avoids overflow both ways
                    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
                  },
                  [](double x, double) { return sigmoid_of(x); });
}

Tensor exp_clamped(const Tensor& a) {
  return unary_op(a, "exp",
                  [](double x) {
                    if (x > 709.0) {
                      g_exp_saturations.fetch_add(1, std::memory_order_relaxed);
                      x = 709.0;
                    }
                    return std::exp(x);
                  },
                  [](double x, double y) { return x > 709.0 ? 0.0 : y; });
}

Tensor reciprocal(const Tensor& a) {
  for (double v : a.values()) {
    if (v == 0.0) throw contract_error("reciprocal: zero element");
  }
  return unary_op(a, "reciprocal", [](double x) { return 1.0 / x; },
                  [](double, double y) { return -y * y; });
}

uint64_t exp_saturation_count() {
  return g_exp_saturations.load(std::memory_order_relaxed);
}
void reset_exp_saturation_count() { g_exp_saturations.store(0); }

// ---------------------------------------------------------------------------
// matmul / linear

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw contract_error("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    double* op = out.mutable_values().data();
    for (int i = 0; i < m; ++i) {
      for (int l = 0; l < k; ++l) {
        const double av = ap[i * k + l];
        const double* brow = bp + static_cast<int64_t>(l) * n;
        double* orow = op + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  if (OpAccess::should_record({&a, &b})) {
    const bool ga = OpAccess::needs_grad(a);
    const bool gb = OpAccess::needs_grad(b);
    Tensor ta = a, tb = b, to = out;
    OpAccess::record("matmul", {&a, &b}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      const double* gp = go.data();
      if (ga) {
        double* gap = OpAccess::grad_buffer(ta).data();
        const double* bp = tb.values().data();
        // dA[i,l] += sum_j go[i,j] * B[l,j]
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double acc = 0;
            const double* grow = gp + static_cast<int64_t>(i) * n;
            const double* brow = bp + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            gap[i * k + l] += acc;
          }
      }
      if (gb) {
        double* gbp = OpAccess::grad_buffer(tb).data();
        const double* ap = ta.values().data();
        // dB[l,j] += sum_i A[i,l] * go[i,j]
        for (int i = 0; i < m; ++i) {
          const double* grow = gp + static_cast<int64_t>(i) * n;
          for (int l = 0; l < k; ++l) {
            const double av = ap[i * k + l];
            double* gbrow = gbp + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) {
    throw contract_error("linear: weight must be rank 2, got " +
                         shape_str(weight.shape()));
  }
  const int in = weight.dim(0), out_dim = weight.dim(1);
  if (x.rank() < 1 || x.shape().back() != in) {
    throw contract_error("linear: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw contract_error("linear: bias " + shape_str(bias.shape()) +
                         " vs weight " + shape_str(weight.shape()));
  }
  const int64_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    const double* wp = weight.values().data();
    double* yp = y.mutable_values().data();
    if (bias.defined()) {
      const double* bp = bias.values().data();
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(yp + r * out_dim, bp, sizeof(double) * static_cast<size_t>(out_dim));
    }
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = xp + r * in;
      double* yrow = yp + r * out_dim;
      for (int l = 0; l < in; ++l) {
        const double xv = xrow[l];
        const double* wrow = wp + static_cast<int64_t>(l) * out_dim;
        for (int j = 0; j < out_dim; ++j) yrow[j] += xv * wrow[j];
      }
    }
  }
  if (OpAccess::should_record({&x, &weight, &bias})) {
    const bool gx = OpAccess::needs_grad(x);
    const bool gw = OpAccess::needs_grad(weight);
    const bool gb = bias.defined() && OpAccess::needs_grad(bias);
    Tensor tx = x, tw = weight, tb = bias, ty = y;
    OpAccess::record("linear", {&x, &weight, &bias}, y, [=]() {
      auto go = OpAccess::grad_buffer(ty);
      const double* gp = go.data();
      if (gx) {
        double* gxp = OpAccess::grad_buffer(tx).data();
        const double* wp = tw.values().data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = gp + r * out_dim;
          double* gxrow = gxp + r * in;
          for (int l = 0; l < in; ++l) {
            double acc = 0;
            const double* wrow = wp + static_cast<int64_t>(l) * out_dim;
            for (int j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
            gxrow[l] += acc;
          }
        }
      }
      if (gw) {
        double* gwp = OpAccess::grad_buffer(tw).data();
        const double* xp = tx.values().data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* xrow = xp + r * in;
          const double* grow = gp + r * out_dim;
          for (int l = 0; l < in; ++l) {
            const double xv = xrow[l];
            double* gwrow = gwp + static_cast<int64_t>(l) * out_dim;
            for (int j = 0; j < out_dim; ++j) gwrow[j] += xv * grow[j];
          }
        }
      }
      if (gb) {
        double* gbp = OpAccess::grad_buffer(tb).data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = gp + r * out_dim;
          for (int j = 0; j < out_dim; ++j) gbp[j] += grow[j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layer_norm

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const int d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 ||
      beta.dim(0) != d) {
    throw contract_error("layer_norm: gamma/beta must be [" +
                         std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + ", " +
                         shape_str(beta.shape()));
  }
  const int64_t rows = x.size() / d;
  Tensor y = Tensor::zeros(x.shape());
  // Saved for backward: normalized values and per-row inverse stddev.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  {
    const double* xp = x.values().data();
    const double* gp = gamma.values().data();
    const double* bp = beta.values().data();
    double* yp = y.mutable_values().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = xp + r * d;
      double mean = 0;
      for (int j = 0; j < d; ++j) mean += xrow[j];
      mean /= d;
      double var = 0;
      for (int j = 0; j < d; ++j) {
        const double c = xrow[j] - mean;
        var += c * c;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = inv;
      double* xh = xhat->data() + r * d;
      double* yrow = yp + r * d;
      for (int j = 0; j < d; ++j) {
        xh[j] = (xrow[j] - mean) * inv;
        yrow[j] = xh[j] * gp[j] + bp[j];
      }
    }
  }
  if (OpAccess::should_record({&x, &gamma, &beta})) {
    const bool gx = OpAccess::needs_grad(x);
    const bool gg = OpAccess::needs_grad(gamma);
    const bool gb = OpAccess::needs_grad(beta);
    Tensor tx = x, tg = gamma, tb = beta, ty = y;
    OpAccess::record("layer_norm", {&x, &gamma, &beta}, y, [=]() {
      auto go = OpAccess::grad_buffer(ty);
      const double* gp = go.data();
      const double* gmv = tg.values().data();
      std::span<double> gxs, ggs, gbs;
      if (gx) gxs = OpAccess::grad_buffer(tx);
      if (gg) ggs = OpAccess::grad_buffer(tg);
      if (gb) gbs = OpAccess::grad_buffer(tb);
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = gp + r * d;
        const double* xh = xhat->data() + r * d;
        const double inv = (*inv_std)[static_cast<size_t>(r)];
        if (gg || gb) {
          for (int j = 0; j < d; ++j) {
            if (gg) ggs[static_cast<size_t>(j)] += grow[j] * xh[j];
            if (gb) gbs[static_cast<size_t>(j)] += grow[j];
          }
        }
        if (gx) {
          double m1 = 0, m2 = 0;
          for (int j = 0; j < d; ++j) {
            const double gh = grow[j] * gmv[j];
            m1 += gh;
            m2 += gh * xh[j];
          }
          m1 /= d;
          m2 /= d;
          double* gxrow = gxs.data() + r * d;
          for (int j = 0; j < d; ++j) {
            const double gh = grow[j] * gmv[j];
            gxrow[j] += inv * (gh - m1 - xh[j] * m2);
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != x.size()) {
    throw contract_error("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  }
  Tensor out = Tensor::from_data(std::move(shape),
                                 {x.values().begin(), x.values().end()});
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("reshape", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      for (size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw contract_error("permute: axes size mismatch");
  }
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) {
      throw contract_error("permute: invalid axes");
    }
    seen[static_cast<size_t>(a)] = true;
  }
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);
  Tensor out = Tensor::zeros(out_shape);
  const auto in_strides = row_major_strides(x.shape());
  // Stride in the input for a step along each output axis.
  std::vector<int64_t> step(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  const double* xp = x.values().data();
  double* op = out.mutable_values().data();
  const int64_t n = x.size();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t lin_in = 0;
  for (int64_t lo = 0; lo < n; ++lo) {
    op[lo] = xp[lin_in];
    for (int ax = r - 1; ax >= 0; --ax) {
      const size_t u = static_cast<size_t>(ax);
      ++idx[u];
      lin_in += step[u];
      if (idx[u] < out_shape[u]) break;
      lin_in -= static_cast<int64_t>(idx[u]) * step[u];
      idx[u] = 0;
    }
  }
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("permute", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      std::vector<int> bidx(static_cast<size_t>(r), 0);
      int64_t li = 0;
      for (int64_t lo = 0; lo < n; ++lo) {
        gi[static_cast<size_t>(li)] += go[static_cast<size_t>(lo)];
        for (int ax = r - 1; ax >= 0; --ax) {
          const size_t u = static_cast<size_t>(ax);
          ++bidx[u];
          li += step[u];
          if (bidx[u] < out_shape[u]) break;
          li -= static_cast<int64_t>(bidx[u]) * step[u];
          bidx[u] = 0;
        }
      }
    });
  }
  return out;
}

namespace {
// Splits a shape at `axis` into (outer, mid, inner) extents.
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& mid,
                int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw contract_error("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  mid = s[static_cast<size_t>(axis)];
  inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Tensor reverse_axis(const Tensor& x, int axis) {
  int64_t outer, mid, inner;
  axis_split(x.shape(), axis, outer, mid, inner);
  Tensor out = Tensor::zeros(x.shape());
  const double* xp = x.values().data();
  double* op = out.mutable_values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      std::memcpy(op + (o * mid + (mid - 1 - m)) * inner,
                  xp + (o * mid + m) * inner,
                  sizeof(double) * static_cast<size_t>(inner));
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("reverse", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
          const double* gs = go.data() + (o * mid + (mid - 1 - m)) * inner;
          double* gd = gi.data() + (o * mid + m) * inner;
          for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i];
        }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw contract_error("concat: no inputs");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  int64_t total_mid = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      throw contract_error("concat: rank mismatch");
    }
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
      if (i != axis && s[static_cast<size_t>(i)] != first[static_cast<size_t>(i)]) {
        throw contract_error("concat: shapes differ off-axis: " +
                             shape_str(first) + " vs " + shape_str(s));
      }
    }
    total_mid += s[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(total_mid);
  int64_t outer, mid_out, inner;
  axis_split(out_shape, axis, outer, mid_out, inner);
  Tensor out = Tensor::zeros(out_shape);
  double* op = out.mutable_values().data();
  int64_t mid_off = 0;
  for (const Tensor& p : parts) {
    const int64_t mid_p = p.dim(axis);
    const double* xp = p.values().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(op + ((o * mid_out + mid_off) * inner),
                  xp + o * mid_p * inner,
                  sizeof(double) * static_cast<size_t>(mid_p * inner));
    mid_off += mid_p;
  }
  bool any = false;
  for (const Tensor& p : parts) {
    if (OpAccess::should_record({&p})) any = true;
  }
  if (any) {
    std::vector<Tensor> tps = parts;
    Tensor to = out;
    std::vector<const Tensor*> ptrs;
    // record() takes an initializer_list; register against the first input
    // and capture the rest in the closure.
    OpAccess::record("concat", {&parts[0]}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      int64_t off = 0;
      for (const Tensor& p : tps) {
        const int64_t mid_p = p.dim(axis);
        if (OpAccess::needs_grad(p)) {
          Tensor tp = p;
          auto gi = OpAccess::grad_buffer(tp);
          for (int64_t o = 0; o < outer; ++o) {
            const double* gs = go.data() + (o * mid_out + off) * inner;
            double* gd = gi.data() + o * mid_p * inner;
            for (int64_t i = 0; i < mid_p * inner; ++i) gd[i] += gs[i];
          }
        }
        off += mid_p;
      }
    });
  }
  return out;
}

Tensor pad_last(const Tensor& x, int target) {
  const int last = x.shape().back();
  if (target < last) {
    throw contract_error("pad_last: target " + std::to_string(target) +
                         " smaller than current " + std::to_string(last));
  }
  if (target == last) return x;
  Shape out_shape = x.shape();
  out_shape.back() = target;
  const int64_t rows = x.size() / last;
  Tensor out = Tensor::zeros(out_shape);
  const double* xp = x.values().data();
  double* op = out.mutable_values().data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(op + r * target, xp + r * last,
                sizeof(double) * static_cast<size_t>(last));
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("pad_last", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gs = go.data() + r * target;
        double* gd = gi.data() + r * last;
        for (int j = 0; j < last; ++j) gd[j] += gs[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& x) {
  double acc = 0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("sum", {&x}, out, [=]() {
      const double g = OpAccess::grad_buffer(to)[0];
      auto gi = OpAccess::grad_buffer(tx);
      for (size_t i = 0; i < gi.size(); ++i) gi[i] += g;
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
  int64_t outer, mid, inner;
  axis_split(x.shape(), axis, outer, mid, inner);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  const double* xp = x.values().data();
  double* op = out.mutable_values().data();
  const double scale = 1.0 / static_cast<double>(mid);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m) {
      const double* xs = xp + (o * mid + m) * inner;
      double* od = op + o * inner;
      for (int64_t i = 0; i < inner; ++i) od[i] += xs[i] * scale;
    }
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("mean_axis", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
          const double* gs = go.data() + o * inner;
          double* gd = gi.data() + (o * mid + m) * inner;
          for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i] * scale;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// grad_check

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h) {
  if (!x.defined() || !x.requires_grad()) {
    throw contract_error("grad_check: x must require grad");
  }
  if (h <= 0) throw contract_error("grad_check: h must be positive");
  x.zero_grad();
  Tensor y = f(x);
  if (y.size() != 1) {
    throw contract_error("grad_check: f must return a scalar");
  }
  backward(y);
  std::vector<double> analytic(static_cast<size_t>(x.size()), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  double worst = 0.0;
  NoGradGuard ng;
  auto vals = x.mutable_values();
  for (size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double yp = f(x).item();
    vals[i] = orig - h;
    const double ym = f(x).item();
    vals[i] = orig;
    const double central = (yp - ym) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - central) / std::max(std::abs(central), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace biomamba
