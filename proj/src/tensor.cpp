#include "bdb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "bdb/errors.hpp"

namespace bdb {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "×" : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                       BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  for (auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward = std::move(backward);
  return out;
}

const Shape& Tensor::shape() const {
  if (!node_) throw DimensionError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch");
  const auto strides = strides_of(s);
  std::size_t flat = 0;
  std::size_t i = 0;
  for (std::size_t v : index) {
    if (v >= s[i]) throw DimensionError("index out of range");
    flat += v * strides[i++];
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from(shape(), node_->data, false);
}

void Tensor::backward() const {
  if (!node_) throw DimensionError("backward on undefined tensor");
  if (node_->data.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Leaf gradients accumulate across calls; intermediate ones start fresh.
  for (Node* n : order) {
    if (n->is_leaf()) {
      if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  if (node_->is_leaf()) {
    node_->grad[0] += 1.0;
    return;
  }
  node_->grad[0] = 1.0;

  std::vector<std::vector<double>*> in_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    in_grads.clear();
    for (auto& p : n->parents) in_grads.push_back(p->requires_grad ? &p->grad : nullptr);
    n->backward(n->grad, in_grads);
  }
}

// ---- matmul / linear ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) { return linear(a, b, Tensor{}); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require(x.rank() == 2 && w.rank() == 2,
          "matmul expects 2-D operands, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  require(w.dim(0) == k, "matmul inner dimensions disagree: " + shape_str(x.shape()) + " · " +
                             shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == n,
            "bias shape " + shape_str(bias.shape()) + " does not match output width " +
                std::to_string(n));
  }

  const auto xd = x.data();
  const auto wd = w.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    if (has_bias) std::copy(bias.data().begin(), bias.data().end(), row);
    for (std::size_t p = 0; p < k; ++p) {
      const double v = xd[i * k + p];
      if (v == 0.0) continue;
      const double* wrow = wd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += v * wrow[j];
    }
  }

  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::from_op(
      {m, n}, std::move(out), inputs,
      [x, w, m, k, n, has_bias](std::span<const double> g, std::span<std::vector<double>*> in) {
        const auto xd = x.data();
        const auto wd = w.data();
        if (in[0]) {  // dX = dC · Wᵀ
          auto& gx = *in[0];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double* wrow = wd.data() + p * n;
              const double* grow = g.data() + i * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * wrow[j];
              gx[i * k + p] += acc;
            }
          }
        }
        if (in[1]) {  // dW = Xᵀ · dC
          auto& gw = *in[1];
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = g.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double v = xd[i * k + p];
              if (v == 0.0) continue;
              double* gwrow = gw.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gwrow[j] += v * grow[j];
            }
          }
        }
        if (has_bias && in[2]) {
          auto& gb = *in[2];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      });
}

// ---- elementwise -------------------------------------------------------------

namespace {

enum class Binary { add, sub, mul };

Tensor binary(Binary op, const Tensor& a, const Tensor& b) {
  require_defined(a, "elementwise");
  require_defined(b, "elementwise");
  const std::size_t na = a.numel(), nb = b.numel();
  const bool a_scalar = na == 1 && nb != 1;
  const bool b_scalar = nb == 1 && na != 1;
  require(a.shape() == b.shape() || a_scalar || b_scalar,
          "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = std::max(na, nb);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[a_scalar ? 0 : i];
    const double y = bd[b_scalar ? 0 : i];
    switch (op) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
    }
  }
  return Tensor::from_op(
      out_shape, std::move(out), {a, b},
      [op, a, b, a_scalar, b_scalar, n](std::span<const double> g,
                                        std::span<std::vector<double>*> in) {
        const auto ad = a.data();
        const auto bd = b.data();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = a_scalar ? 0 : i;
          const std::size_t ib = b_scalar ? 0 : i;
          double da = 0.0, db = 0.0;
          switch (op) {
            case Binary::add: da = g[i]; db = g[i]; break;
            case Binary::sub: da = g[i]; db = -g[i]; break;
            case Binary::mul: da = g[i] * bd[ib]; db = g[i] * ad[ia]; break;
          }
          if (in[0]) (*in[0])[ia] += da;
          if (in[1]) (*in[1])[ib] += db;
        }
      });
}

// f computes the value, df the derivative from (input, output).
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  require_defined(a, "elementwise");
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  if (!grad_enabled() || !a.requires_grad()) return Tensor::from(a.shape(), std::move(out));
  std::vector<double> values = out;
  return Tensor::from_op(
      a.shape(), std::move(out), {a},
      [a, values = std::move(values), df](std::span<const double> g,
                                          std::span<std::vector<double>*> in) {
        if (!in[0]) return;
        const auto ad = a.data();
        auto& ga = *in[0];
        for (std::size_t i = 0; i < ad.size(); ++i) ga[i] += g[i] * df(ad[i], values[i]);
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---- reductions ----------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& t, std::vector<std::size_t> axes) {
  require_defined(t, "reduce");
  const Shape& in_shape = t.shape();
  if (axes.empty()) {
    axes.resize(in_shape.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  require(std::adjacent_find(axes.begin(), axes.end()) == axes.end(), "duplicate reduce axis");
  std::vector<bool> reduced(in_shape.size(), false);
  for (std::size_t ax : axes) {
    require(ax < in_shape.size(),
            "reduce axis " + std::to_string(ax) + " out of range for " + shape_str(in_shape));
    require(in_shape[ax] > 0, "empty reduction axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  if (in_shape.empty()) require(t.numel() > 0, "empty reduction");

  Shape out_shape;
  for (std::size_t i = 0; i < in_shape.size(); ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);
  const std::size_t out_n = numel_of(out_shape);
  const std::size_t in_n = t.numel();
  const std::size_t count = out_n ? in_n / out_n : 0;

  // Output index for each input element, scanning input in row-major order.
  const auto out_strides_full = [&] {
    std::vector<std::size_t> s(in_shape.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = in_shape.size(); i-- > 0;) {
      if (!reduced[i]) {
        s[i] = stride;
        stride *= in_shape[i];
      }
    }
    return s;
  }();
  std::vector<std::size_t> target(in_n);
  {
    std::vector<std::size_t> idx(in_shape.size(), 0);
    for (std::size_t flat = 0; flat < in_n; ++flat) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < in_shape.size(); ++d) o += idx[d] * out_strides_full[d];
      target[flat] = o;
      for (std::size_t d = in_shape.size(); d-- > 0;) {
        if (++idx[d] < in_shape[d]) break;
        idx[d] = 0;
      }
    }
  }

  const auto td = t.data();
  std::vector<double> out(out_n, 0.0);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) {
    out.assign(out_n, -HUGE_VAL);
    argmax.assign(out_n, 0);
    std::vector<bool> seen(out_n, false);
    for (std::size_t i = 0; i < in_n; ++i) {
      const std::size_t o = target[i];
      // strict comparison keeps the first maximal element in scan order
      if (!seen[o] || td[i] > out[o]) {
        out[o] = td[i];
        argmax[o] = i;
        seen[o] = true;
      }
    }
  } else {
    for (std::size_t i = 0; i < in_n; ++i) out[target[i]] += td[i];
    if (op == ReduceOp::mean)
      for (double& v : out) v /= static_cast<double>(count);
  }

  return Tensor::from_op(
      out_shape, std::move(out), {t},
      [op, target = std::move(target), argmax = std::move(argmax), count](
          std::span<const double> g, std::span<std::vector<double>*> in) {
        if (!in[0]) return;
        auto& gt = *in[0];
        if (op == ReduceOp::max) {
          for (std::size_t o = 0; o < argmax.size(); ++o) gt[argmax[o]] += g[o];
          return;
        }
        const double scale = op == ReduceOp::mean ? 1.0 / static_cast<double>(count) : 1.0;
        for (std::size_t i = 0; i < target.size(); ++i) gt[i] += g[target[i]] * scale;
      });
}

// ---- shape ops -------------------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == sb.size() && axis < sa.size(),
          "concat rank mismatch: " + shape_str(sa) + " and " + shape_str(sb));
  for (std::size_t i = 0; i < sa.size(); ++i) {
    require(i == axis || sa[i] == sb[i],
            "concat dimension mismatch on axis " + std::to_string(i) + ": " + shape_str(sa) +
                " and " + shape_str(sb));
  }
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t ca = sa[axis] * inner, cb = sb[axis] * inner;

  std::vector<double> out;
  out.reserve(numel_of(out_shape));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    out.insert(out.end(), ad.begin() + o * ca, ad.begin() + (o + 1) * ca);
    out.insert(out.end(), bd.begin() + o * cb, bd.begin() + (o + 1) * cb);
  }
  return Tensor::from_op(out_shape, std::move(out), {a, b},
                         [outer, ca, cb](std::span<const double> g, std::span<std::vector<double>*> in) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* row = g.data() + o * (ca + cb);
                             if (in[0])
                               for (std::size_t i = 0; i < ca; ++i) (*in[0])[o * ca + i] += row[i];
                             if (in[1])
                               for (std::size_t i = 0; i < cb; ++i) (*in[1])[o * cb + i] += row[ca + i];
                           }
                         });
}

Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(t, "slice");
  const Shape& s = t.shape();
  require(axis < s.size() && begin <= end && end <= s[axis],
          "invalid slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
              std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t full = s[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t offset = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<double> out;
  out.reserve(outer * width);
  const auto td = t.data();
  for (std::size_t o = 0; o < outer; ++o) {
    auto first = td.begin() + o * full + offset;
    out.insert(out.end(), first, first + width);
  }
  return Tensor::from_op(out_shape, std::move(out), {t},
                         [outer, full, width, offset](std::span<const double> g,
                                                      std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < width; ++i)
                               (*in[0])[o * full + offset + i] += g[o * width + i];
                         });
}

Tensor reshape(const Tensor& t, Shape shape) {
  require_defined(t, "reshape");
  require(numel_of(shape) == t.numel(),
          "cannot reshape " + shape_str(t.shape()) + " to " + shape_str(shape));
  std::vector<double> out(t.data().begin(), t.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {t},
                         [](std::span<const double> g, std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                         });
}

Tensor permute(const Tensor& t, const std::vector<std::size_t>& order) {
  require_defined(t, "permute");
  const Shape& s = t.shape();
  require(order.size() == s.size(), "permute order rank mismatch");
  {
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) require(sorted[i] == i, "invalid permutation");
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[order[i]];
  const auto in_strides = strides_of(s);
  const std::size_t n = t.numel();
  // source[flat_out] = flat index into the input
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < s.size(); ++d) src += idx[d] * in_strides[order[d]];
    source[flat] = src;
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  const auto td = t.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = td[source[i]];
  return Tensor::from_op(out_shape, std::move(out), {t},
                         [source = std::move(source)](std::span<const double> g,
                                                      std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t i = 0; i < source.size(); ++i) (*in[0])[source[i]] += g[i];
                         });
}

Tensor gather(const Tensor& t, std::vector<std::size_t> flat_indices) {
  require_defined(t, "gather");
  const auto td = t.data();
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    require(flat_indices[i] < td.size(), "gather index out of range");
    out[i] = td[flat_indices[i]];
  }
  const std::size_t n = flat_indices.size();
  return Tensor::from_op({n}, std::move(out), {t},
                         [idx = std::move(flat_indices)](std::span<const double> g,
                                                         std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t i = 0; i < idx.size(); ++i) (*in[0])[idx[i]] += g[i];
                         });
}

Tensor l2_normalize_rows(const Tensor& t) {
  require_defined(t, "l2_normalize_rows");
  require(t.rank() == 2, "l2_normalize_rows expects a 2-D tensor, got " + shape_str(t.shape()));
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  const auto td = t.data();
  std::vector<double> norms(rows, 0.0);
  std::vector<double> out(td.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += td[r * cols + c] * td[r * cols + c];
    norms[r] = std::sqrt(s);
    if (norms[r] > 0.0)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = td[r * cols + c] / norms[r];
  }
  std::vector<double> y = out;
  return Tensor::from_op(t.shape(), std::move(out), {t},
                         [rows, cols, norms = std::move(norms), y = std::move(y)](
                             std::span<const double> g, std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (norms[r] == 0.0) continue;
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c)
                               (*in[0])[r * cols + c] += (g[r * cols + c] - dot * y[r * cols + c]) / norms[r];
                           }
                         });
}

// ---- batch norm ------------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t features)
    : gamma_(Tensor::full({features}, 1.0, true)),
      beta_(Tensor::zeros({features}, true)),
      running_mean_(features, 0.0),
      running_var_(features, 1.0) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  require_defined(x, "batch_norm");
  require(x.rank() == 2 && x.dim(1) == features(),
          "batch_norm expects B×" + std::to_string(features()) + ", got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), f = x.dim(1);
  const auto xd = x.data();
  std::vector<double> mean(f, 0.0), inv_std(f, 0.0);

  if (mode == Mode::train) {
    if (b < 2) throw BatchSizeError("batch_norm in train mode needs at least 2 samples, got " +
                                    std::to_string(b));
    std::vector<double> var(f, 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < f; ++j) mean[j] += xd[i * f + j];
    for (double& m : mean) m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const double d = xd[i * f + j] - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < f; ++j) {
      const double biased = var[j] / static_cast<double>(b);
      inv_std[j] = 1.0 / std::sqrt(biased + kEpsilon);
      const double unbiased = var[j] / static_cast<double>(b - 1);
      running_mean_[j] = (1.0 - kMomentum) * running_mean_[j] + kMomentum * mean[j];
      running_var_[j] = (1.0 - kMomentum) * running_var_[j] + kMomentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mean[j] = running_mean_[j];
      inv_std[j] = 1.0 / std::sqrt(running_var_[j] + kEpsilon);
    }
  }

  std::vector<double> xhat(b * f);
  std::vector<double> out(b * f);
  const auto gd = gamma_.data();
  const auto bd = beta_.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      xhat[i * f + j] = (xd[i * f + j] - mean[j]) * inv_std[j];
      out[i * f + j] = gd[j] * xhat[i * f + j] + bd[j];
    }

  const bool batch_stats = mode == Mode::train;
  return Tensor::from_op(
      {b, f}, std::move(out), {x, gamma_, beta_},
      [b, f, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std), gamma = gamma_](
          std::span<const double> g, std::span<std::vector<double>*> in) {
        const auto gd = gamma.data();
        if (in[1])
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < f; ++j) (*in[1])[j] += g[i * f + j] * xhat[i * f + j];
        if (in[2])
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < f; ++j) (*in[2])[j] += g[i * f + j];
        if (!in[0]) return;
        auto& gx = *in[0];
        if (!batch_stats) {
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < f; ++j) gx[i * f + j] += g[i * f + j] * gd[j] * inv_std[j];
          return;
        }
        const double nb = static_cast<double>(b);
        for (std::size_t j = 0; j < f; ++j) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < b; ++i) {
            const double dxhat = g[i * f + j] * gd[j];
            sum_g += dxhat;
            sum_gx += dxhat * xhat[i * f + j];
          }
          for (std::size_t i = 0; i < b; ++i) {
            const double dxhat = g[i * f + j] * gd[j];
            gx[i * f + j] += inv_std[j] / nb * (nb * dxhat - sum_g - xhat[i * f + j] * sum_gx);
          }
        }
      });
}

}  // namespace bdb
