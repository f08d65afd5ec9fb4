#include "cmah/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cmah/common.hpp"

namespace cmah::diff {

namespace {

#ifndef NDEBUG
void debug_finite(const char* op, const Tensor& t) {
  if (!t.array().isFinite().all()) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
}
#define CHECK_FINITE(op, t) debug_finite(op, t)
#else
#define CHECK_FINITE(op, t) ((void)0)
#endif

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool rg(const Tensor& a, const Tensor& b) { return a.requires_grad() || b.requires_grad(); }

void record(const char* op, const Tensor& out, std::function<void()> fn) {
  if (out.requires_grad() && Tape::active() != nullptr) {
    Tape::active()->push(op, std::move(fn));
  }
}

enum class Bcast { same, scalar, trail };

// Elementwise ops accept equal shapes, a scalar second arg, or a second arg
// matching the trailing dimension of the first (bias patterns).
Bcast bcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.numel() == 1) return Bcast::scalar;
  if (b.numel() == a.cols() && a.numel() % b.numel() == 0) return Bcast::trail;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

// Reduce a gradient of a's shape down to b's broadcast shape.
Array reduce_to(Bcast kind, const Tensor& a, const RowMat& g) {
  if (kind == Bcast::same) return flat(g);
  if (kind == Bcast::scalar) {
    Array r(1);
    r[0] = g.sum();
    return r;
  }
  Eigen::Map<const RowMat> gm(g.data(), a.rows(), a.cols());
  return gm.colwise().sum().transpose().array();
}

RowMat bcast_expand(Bcast kind, const Tensor& a, const Tensor& b) {
  RowMat r(a.rows(), a.cols());
  if (kind == Bcast::same) {
    r = a.mat();  // shape carrier only; caller overwrites
    Eigen::Map<const RowMat> bm(b.array().data(), a.rows(), a.cols());
    r = bm;
  } else if (kind == Bcast::scalar) {
    r.setConstant(b.array()[0]);
  } else {
    Eigen::RowVectorXd row = Eigen::Map<const Eigen::RowVectorXd>(b.array().data(), b.numel());
    r = row.replicate(a.rows(), 1);
  }
  return r;
}

Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b,
                 const std::function<Array(const Array&, const Array&)>& fwd,
                 const std::function<void(const Tensor&, const Tensor&, const Tensor&, Bcast)>& bwd) {
  CHECK_FINITE(op, a);
  CHECK_FINITE(op, b);
  Bcast kind = bcast_kind(op, a, b);
  Array bb = flat(bcast_expand(kind, a, b));
  Tensor out = Tensor::from_array(a.shape(), fwd(a.array(), bb), rg(a, b));
  record(op, out, [a, b, out, kind, bwd]() { bwd(a, b, out, kind); });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "add", a, b, [](const Array& x, const Array& y) { return Array(x + y); },
      [](const Tensor& a, const Tensor& b, const Tensor& out, Bcast kind) {
        RowMat g = out.grad_mat();
        if (a.requires_grad()) a.add_grad(flat(g));
        if (b.requires_grad()) b.add_grad(reduce_to(kind, a, g));
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "sub", a, b, [](const Array& x, const Array& y) { return Array(x - y); },
      [](const Tensor& a, const Tensor& b, const Tensor& out, Bcast kind) {
        RowMat g = out.grad_mat();
        if (a.requires_grad()) a.add_grad(flat(g));
        if (b.requires_grad()) b.add_grad(Array(-reduce_to(kind, a, g)));
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "mul", a, b, [](const Array& x, const Array& y) { return Array(x * y); },
      [](const Tensor& a, const Tensor& b, const Tensor& out, Bcast kind) {
        Array g = flat(out.grad_mat());
        if (a.requires_grad()) {
          Array bb = flat(bcast_expand(kind, a, b));
          a.add_grad(Array(g * bb));
        }
        if (b.requires_grad()) {
          Array ga = g * a.array();
          Eigen::Map<const RowMat> gm(ga.data(), a.rows(), a.cols());
          b.add_grad(reduce_to(kind, a, RowMat(gm)));
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  CHECK_FINITE("matmul", a);
  CHECK_FINITE("matmul", b);
  require(a.ndim() == 2 && b.ndim() == 2,
          "matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.cols() == b.rows(),
          "matmul: inner dims mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  RowMat y = a.mat() * b.mat();
  Tensor out = Tensor::from_matrix(y, rg(a, b));
  record("matmul", out, [a, b, out]() {
    RowMat g = out.grad_mat();
    if (a.requires_grad()) a.add_grad_mat(g * b.mat().transpose());
    if (b.requires_grad()) b.add_grad_mat(a.mat().transpose() * g);
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  CHECK_FINITE("transpose", a);
  require(a.ndim() == 2, "transpose: expects 2-d operand, got " + shape_str(a.shape()));
  RowMat y = a.mat().transpose();
  Tensor out = Tensor::from_matrix(y, a.requires_grad());
  record("transpose", out, [a, out]() {
    if (a.requires_grad()) a.add_grad_mat(out.grad_mat().transpose());
  });
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  CHECK_FINITE("reshape", a);
  long long prod = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      require(infer < 0, "reshape: at most one inferred dim");
      infer = static_cast<int>(i);
    } else {
      require(shape[i] > 0, "reshape: non-positive dim in " + shape_str(shape));
      prod *= shape[i];
    }
  }
  if (infer >= 0) {
    require(prod > 0 && a.numel() % prod == 0,
            "reshape: cannot infer dim for " + shape_str(a.shape()) + " -> " + shape_str(shape));
    shape[infer] = static_cast<int>(a.numel() / prod);
    prod *= shape[infer];
  }
  require(prod == a.numel(),
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = Tensor::from_array(shape, a.array(), a.requires_grad());
  record("reshape", out, [a, out]() {
    if (a.requires_grad()) a.add_grad(flat(out.grad_mat()));
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat: empty input list");
  int cols = xs[0].cols();
  int rows = 0;
  bool need = false;
  for (const Tensor& x : xs) {
    CHECK_FINITE("concat", x);
    require(x.cols() == cols, "concat: column mismatch " + shape_str(xs[0].shape()) + " vs " +
                                  shape_str(x.shape()));
    rows += x.rows();
    need = need || x.requires_grad();
  }
  RowMat y(rows, cols);
  int at = 0;
  for (const Tensor& x : xs) {
    y.middleRows(at, x.rows()) = x.mat();
    at += x.rows();
  }
  Tensor out = Tensor::from_matrix(y, need);
  record("concat", out, [xs, out]() {
    RowMat g = out.grad_mat();
    int at = 0;
    for (const Tensor& x : xs) {
      if (x.requires_grad()) x.add_grad_mat(g.middleRows(at, x.rows()));
      at += x.rows();
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  CHECK_FINITE("slice", a);
  require(0 <= begin && begin < end && end <= a.rows(),
          "slice: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
              shape_str(a.shape()));
  RowMat y = a.mat().middleRows(begin, end - begin);
  Tensor out = Tensor::from_matrix(y, a.requires_grad());
  record("slice", out, [a, out, begin]() {
    if (!a.requires_grad()) return;
    RowMat g = out.grad_mat();
    a.grad_mat().middleRows(begin, g.rows()) += g;
  });
  return out;
}

Tensor softmax(const Tensor& a) {
  CHECK_FINITE("softmax", a);
  RowMat x = a.mat();
  RowMat y(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    Array e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    y.row(r) = (e / e.sum()).matrix().transpose();
  }
  Tensor out = Tensor::from_array(a.shape(), flat(y), a.requires_grad());
  record("softmax", out, [a, out]() {
    if (!a.requires_grad()) return;
    Eigen::Map<const RowMat> ym(out.array().data(), a.rows(), a.cols());
    RowMat g = out.grad_mat();
    RowMat dx(g.rows(), g.cols());
    for (int r = 0; r < g.rows(); ++r) {
      Scalar dot = (g.row(r).array() * ym.row(r).array()).sum();
      dx.row(r) = (ym.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    a.add_grad(flat(dx));
  });
  return out;
}

Tensor log(const Tensor& a) {
  CHECK_FINITE("log", a);
  Tensor out = Tensor::from_array(a.shape(), Array(a.array().log()), a.requires_grad());
  record("log", out, [a, out]() {
    if (a.requires_grad()) a.add_grad(Array(flat(out.grad_mat()) / a.array()));
  });
  return out;
}

Tensor exp(const Tensor& a) {
  CHECK_FINITE("exp", a);
  Tensor out = Tensor::from_array(a.shape(), Array(a.array().exp()), a.requires_grad());
  record("exp", out, [a, out]() {
    if (a.requires_grad()) a.add_grad(Array(flat(out.grad_mat()) * out.array()));
  });
  return out;
}

Tensor mean(const Tensor& a) {
  CHECK_FINITE("mean", a);
  Array y(1);
  y[0] = a.array().mean();
  Tensor out = Tensor::from_array({1}, y, a.requires_grad());
  record("mean", out, [a, out]() {
    if (!a.requires_grad()) return;
    Scalar g = out.grad()[0] / static_cast<Scalar>(a.numel());
    a.add_grad(Array(Array::Constant(a.numel(), g)));
  });
  return out;
}

Tensor sum(const Tensor& a) {
  CHECK_FINITE("sum", a);
  Array y(1);
  y[0] = a.array().sum();
  Tensor out = Tensor::from_array({1}, y, a.requires_grad());
  record("sum", out, [a, out]() {
    if (!a.requires_grad()) return;
    a.add_grad(Array(Array::Constant(a.numel(), out.grad()[0])));
  });
  return out;
}

Tensor relu(const Tensor& a) {
  CHECK_FINITE("relu", a);
  Tensor out = Tensor::from_array(a.shape(), Array(a.array().max(0.0)), a.requires_grad());
  record("relu", out, [a, out]() {
    if (!a.requires_grad()) return;
    Array m = (a.array() > 0.0).cast<Scalar>();
    a.add_grad(Array(flat(out.grad_mat()) * m));
  });
  return out;
}

Tensor gelu(const Tensor& a) {
  CHECK_FINITE("gelu", a);
  Array x = a.array();
  Array cdf = x.unaryExpr([](Scalar t) {
    const Scalar inv_sqrt2 = 0.7071067811865475244;
    return 0.5 * (1.0 + std::erf(t * inv_sqrt2));
  });
  Tensor out = Tensor::from_array(a.shape(), Array(x * cdf), a.requires_grad());
  record("gelu", out, [a, out, cdf]() {
    if (!a.requires_grad()) return;
    const Scalar inv_sqrt2pi = 0.3989422804014326779;
    Array x = a.array();
    Array pdf = (-0.5 * x * x).exp() * inv_sqrt2pi;
    a.add_grad(Array(flat(out.grad_mat()) * (cdf + x * pdf)));
  });
  return out;
}

Tensor tanh(const Tensor& a) {
  CHECK_FINITE("tanh", a);
  Tensor out = Tensor::from_array(a.shape(), Array(a.array().tanh()), a.requires_grad());
  record("tanh", out, [a, out]() {
    if (!a.requires_grad()) return;
    Array y = out.array();
    a.add_grad(Array(flat(out.grad_mat()) * (1.0 - y * y)));
  });
  return out;
}

Tensor layernorm(const Tensor& a, Scalar eps) {
  CHECK_FINITE("layernorm", a);
  require(a.cols() >= 1, "layernorm: empty rows in " + shape_str(a.shape()));
  RowMat x = a.mat();
  RowMat y(x.rows(), x.cols());
  Array inv_s(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    Scalar mu = x.row(r).mean();
    Array c = x.row(r).array() - mu;
    Scalar s = std::sqrt(c.square().mean() + eps);
    inv_s[r] = 1.0 / s;
    y.row(r) = (c / s).matrix();
  }
  Tensor out = Tensor::from_array(a.shape(), flat(y), a.requires_grad());
  record("layernorm", out, [a, out, inv_s]() {
    if (!a.requires_grad()) return;
    Eigen::Map<const RowMat> ym(out.array().data(), a.rows(), a.cols());
    RowMat g = out.grad_mat();
    RowMat dx(g.rows(), g.cols());
    for (int r = 0; r < g.rows(); ++r) {
      Array gr = g.row(r).array();
      Array yr = ym.row(r).array();
      Scalar gm = gr.mean();
      Scalar gym = (gr * yr).mean();
      dx.row(r) = (inv_s[r] * (gr - gm - yr * gym)).matrix();
    }
    a.add_grad(flat(dx));
  });
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices) {
  CHECK_FINITE("embedding-lookup", table);
  require(table.ndim() == 2, "embedding-lookup: table must be 2-d, got " + shape_str(table.shape()));
  int v = table.rows();
  int d = table.cols();
  int n = static_cast<int>(indices.size());
  require(n > 0, "embedding-lookup: empty index list");
  for (int idx : indices) {
    require(0 <= idx && idx < v,
            "embedding-lookup: index " + std::to_string(idx) + " out of range [0," + std::to_string(v) + ")");
  }
  RowMat y(n, d);
  for (int i = 0; i < n; ++i) y.row(i) = table.mat().row(indices[i]);
  Tensor out = Tensor::from_matrix(y, table.requires_grad());
  record("embedding-lookup", out, [table, out, indices]() {
    if (!table.requires_grad()) return;
    RowMat g = out.grad_mat();
    auto tg = table.grad_mat();
    for (int i = 0; i < g.rows(); ++i) tg.row(indices[i]) += g.row(i);
  });
  return out;
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                    int q_len, int kv_len, const Tensor* mask) {
  CHECK_FINITE("scaled-dot-product-attention", q);
  CHECK_FINITE("scaled-dot-product-attention", k);
  CHECK_FINITE("scaled-dot-product-attention", v);
  const char* op = "scaled-dot-product-attention";
  require(heads >= 1 && q_len >= 1 && kv_len >= 1, std::string(op) + ": bad heads/q_len/kv_len");
  int d = q.cols();
  require(k.cols() == d && v.cols() == d,
          std::string(op) + ": width mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
              ", " + shape_str(v.shape()));
  require(d % heads == 0, std::string(op) + ": width " + std::to_string(d) + " not divisible by " +
                              std::to_string(heads) + " heads");
  require(q.rows() % q_len == 0, std::string(op) + ": q rows not a multiple of q_len");
  require(k.rows() % kv_len == 0 && k.rows() == v.rows(),
          std::string(op) + ": k/v rows inconsistent with kv_len");
  int groups = q.rows() / q_len;
  require(k.rows() / kv_len == groups, std::string(op) + ": group count mismatch between q and k/v");
  if (mask != nullptr) {
    require(mask->rows() == q_len && mask->cols() == kv_len,
            std::string(op) + ": mask shape " + shape_str(mask->shape()) + " != [q_len kv_len]");
  }

  int dh = d / heads;
  Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  RowMat y = RowMat::Zero(q.rows(), d);
  // Softmax matrices are kept for the backward pass, one per (group, head).
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve(static_cast<size_t>(groups) * heads);
  RowMat mask_m;
  if (mask != nullptr) mask_m = mask->mat();

  for (int gidx = 0; gidx < groups; ++gidx) {
    auto qb = q.mat().middleRows(gidx * q_len, q_len);
    auto kb = k.mat().middleRows(gidx * kv_len, kv_len);
    auto vb = v.mat().middleRows(gidx * kv_len, kv_len);
    for (int h = 0; h < heads; ++h) {
      RowMat s = scale * (qb.middleCols(h * dh, dh) * kb.middleCols(h * dh, dh).transpose());
      if (mask != nullptr) s += mask_m;
      RowMat p(q_len, kv_len);
      for (int r = 0; r < q_len; ++r) {
        Array e = (s.row(r).array() - s.row(r).maxCoeff()).exp();
        p.row(r) = (e / e.sum()).matrix();
      }
      y.middleRows(gidx * q_len, q_len).middleCols(h * dh, dh) = p * vb.middleCols(h * dh, dh);
      probs->push_back(std::move(p));
    }
  }

  Tensor out = Tensor::from_matrix(y, q.requires_grad() || k.requires_grad() || v.requires_grad());
  record(op, out, [q, k, v, out, probs, heads, q_len, kv_len, groups, dh, scale]() {
    RowMat g = out.grad_mat();
    for (int gidx = 0; gidx < groups; ++gidx) {
      auto qb = q.mat().middleRows(gidx * q_len, q_len);
      auto kb = k.mat().middleRows(gidx * kv_len, kv_len);
      auto gb = g.middleRows(gidx * q_len, q_len);
      for (int h = 0; h < heads; ++h) {
        const RowMat& p = (*probs)[static_cast<size_t>(gidx) * heads + h];
        RowMat go = gb.middleCols(h * dh, dh);
        if (v.requires_grad()) {
          v.grad_mat().middleRows(gidx * kv_len, kv_len).middleCols(h * dh, dh) +=
              p.transpose() * go;
        }
        if (q.requires_grad() || k.requires_grad()) {
          RowMat dp = go * v.mat().middleRows(gidx * kv_len, kv_len).middleCols(h * dh, dh).transpose();
          RowMat ds(q_len, kv_len);
          for (int r = 0; r < q_len; ++r) {
            Scalar dot = (dp.row(r).array() * p.row(r).array()).sum();
            ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
          }
          if (q.requires_grad()) {
            q.grad_mat().middleRows(gidx * q_len, q_len).middleCols(h * dh, dh) +=
                scale * (ds * kb.middleCols(h * dh, dh));
          }
          if (k.requires_grad()) {
            k.grad_mat().middleRows(gidx * kv_len, kv_len).middleCols(h * dh, dh) +=
                scale * (ds.transpose() * qb.middleCols(h * dh, dh));
          }
        }
      }
    }
  });
  return out;
}

Tensor group_max(const Tensor& a, int group) {
  CHECK_FINITE("group_max", a);
  require(group >= 1, "group_max: group size must be positive");
  require(a.rows() % group == 0, "group_max: rows " + std::to_string(a.rows()) +
                                     " not a multiple of group " + std::to_string(group));
  int g = a.rows() / group;
  int c = a.cols();
  RowMat y(g, c);
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(g) * c);
  for (int gi = 0; gi < g; ++gi) {
    auto blk = a.mat().middleRows(gi * group, group);
    for (int j = 0; j < c; ++j) {
      int best = 0;
      Scalar bv = blk(0, j);
      for (int r = 1; r < group; ++r) {
        if (blk(r, j) > bv) {  // strict: ties keep the lowest row
          bv = blk(r, j);
          best = r;
        }
      }
      y(gi, j) = bv;
      (*arg)[static_cast<size_t>(gi) * c + j] = gi * group + best;
    }
  }
  Tensor out = Tensor::from_matrix(y, a.requires_grad());
  record("group_max", out, [a, out, arg, c]() {
    if (!a.requires_grad()) return;
    RowMat g = out.grad_mat();
    auto ag = a.grad_mat();
    for (int gi = 0; gi < g.rows(); ++gi) {
      for (int j = 0; j < c; ++j) {
        ag((*arg)[static_cast<size_t>(gi) * c + j], j) += g(gi, j);
      }
    }
  });
  return out;
}

const std::vector<std::string>& op_vocabulary() {
  static const std::vector<std::string> ids = {
      "add",  "sub",  "mul",  "matmul", "transpose", "reshape",   "concat",
      "slice", "softmax", "log", "exp",  "mean",      "sum",       "relu",
      "gelu", "tanh", "layernorm", "embedding-lookup", "scaled-dot-product-attention"};
  return ids;
}

Tensor op_forward(const std::string& op, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto arity = [&](size_t n) {
    require(inputs.size() == n, op + ": expects " + std::to_string(n) + " inputs, got " +
                                    std::to_string(inputs.size()));
  };
  if (op == "add") { arity(2); return add(inputs[0], inputs[1]); }
  if (op == "sub") { arity(2); return sub(inputs[0], inputs[1]); }
  if (op == "mul") { arity(2); return mul(inputs[0], inputs[1]); }
  if (op == "matmul") { arity(2); return matmul(inputs[0], inputs[1]); }
  if (op == "transpose") { arity(1); return transpose(inputs[0]); }
  if (op == "reshape") { arity(1); return reshape(inputs[0], attrs.shape); }
  if (op == "concat") { require(!inputs.empty(), "concat: expects at least one input"); return concat(inputs); }
  if (op == "slice") { arity(1); return slice_rows(inputs[0], attrs.begin, attrs.end); }
  if (op == "softmax") { arity(1); return softmax(inputs[0]); }
  if (op == "log") { arity(1); return log(inputs[0]); }
  if (op == "exp") { arity(1); return exp(inputs[0]); }
  if (op == "mean") { arity(1); return mean(inputs[0]); }
  if (op == "sum") { arity(1); return sum(inputs[0]); }
  if (op == "relu") { arity(1); return relu(inputs[0]); }
  if (op == "gelu") { arity(1); return gelu(inputs[0]); }
  if (op == "tanh") { arity(1); return tanh(inputs[0]); }
  if (op == "layernorm") { arity(1); return layernorm(inputs[0], attrs.eps); }
  if (op == "embedding-lookup") { arity(1); return embedding_lookup(inputs[0], attrs.indices); }
  if (op == "scaled-dot-product-attention") {
    require(inputs.size() == 3 || inputs.size() == 4,
            op + ": expects q,k,v and optional mask, got " + std::to_string(inputs.size()) + " inputs");
    const Tensor* mask = inputs.size() == 4 ? &inputs[3] : nullptr;
    return scaled_dot_product_attention(inputs[0], inputs[1], inputs[2], attrs.heads, attrs.q_len,
                                        attrs.kv_len, mask);
  }
  throw std::invalid_argument("op_forward: unknown op '" + op + "'");
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << "grad_check: n=" << analytic.size() << " max_rel_err=" << max_rel_err;
  if (!non_finite.empty()) os << " non_finite=" << non_finite.size();
  os << (pass ? " PASS" : " FAIL");
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           Scalar eps, Scalar rtol) {
  Tensor xc = Tensor::from_array(x.shape(), x.array(), true);
  GradCheckReport rep;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(xc);
    if (y.numel() != 1) throw std::invalid_argument("grad_check: objective must be scalar");
    tape.backward_from(y);
    rep.analytic.assign(xc.grad().data(), xc.grad().data() + xc.numel());
  }
  {
    NoGradScope ng;
    rep.numeric.resize(xc.numel());
    for (int i = 0; i < xc.numel(); ++i) {
      Scalar orig = xc.array()[i];
      xc.array()[i] = orig + eps;
      Scalar up = f(xc).item();
      xc.array()[i] = orig - eps;
      Scalar dn = f(xc).item();
      xc.array()[i] = orig;
      rep.numeric[i] = (up - dn) / (2.0 * eps);
    }
  }
  rep.rel_err.resize(xc.numel());
  for (int i = 0; i < xc.numel(); ++i) {
    if (!std::isfinite(rep.numeric[i]) || !std::isfinite(rep.analytic[i])) {
      rep.non_finite.push_back(i);
      rep.rel_err[i] = std::numeric_limits<Scalar>::infinity();
    } else {
      Scalar denom = std::max(std::abs(rep.numeric[i]), 1.0);
      rep.rel_err[i] = std::abs(rep.analytic[i] - rep.numeric[i]) / denom;
    }
    rep.max_rel_err = std::max(rep.max_rel_err, rep.rel_err[i]);
  }
  rep.pass = rep.non_finite.empty() && rep.max_rel_err <= rtol;
  return rep;
}

}  // namespace cmah::diff
