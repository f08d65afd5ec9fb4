#include "cmah/tensor.hpp"

#include <numeric>
#include <sstream>

namespace cmah::diff {

namespace {
Eigen::Index shape_numel(const std::vector<int>& shape) {
  Eigen::Index n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}
}  // namespace

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  const Eigen::Index n = shape_numel(shape);
  d->shape = std::move(shape);
  d->values = Array::Zero(n);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(std::vector<int> shape, Scalar v) {
  Tensor t = zeros(std::move(shape));
  t.array().setConstant(v);
  return t;
}

Tensor Tensor::from_array(std::vector<int> shape, Array values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match value count " +
                                std::to_string(values.size()));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_matrix(const RowMat& m, bool requires_grad) {
  return from_array({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, flat(m), requires_grad);
}

Tensor Tensor::scalar_value(Scalar v) { return full({1}, v); }

Tensor Tensor::row(std::initializer_list<Scalar> xs) {
  Array a(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (Scalar x : xs) a[i++] = x;
  return from_array({static_cast<int>(xs.size())}, std::move(a));
}

Scalar Tensor::item() const {
  if (numel() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return d_->values[0];
}

Array& Tensor::grad() const {
  if (d_->grad.size() == 0) d_->grad = Array::Zero(numel());
  return d_->grad;
}

void Tensor::add_grad(const Array& g) const {
  if (!d_->requires_grad) return;
  if (g.size() != numel()) throw std::logic_error("Tensor::add_grad: size mismatch");
  grad() += g;
}

void Tensor::add_grad_mat(const RowMat& g) const { add_grad(flat(g)); }

void Tensor::zero_grad() const {
  if (d_->grad.size() > 0) d_->grad.setZero();
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) : prev(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = prev; }

NoGradScope::NoGradScope() : prev(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev; }

void Tape::push(const char* op, std::function<void()> backward_fn) {
  if (consumed_) throw std::logic_error("Tape: recording onto a consumed tape; start a new forward pass");
  nodes_.push_back({op, std::move(backward_fn)});
}

void Tape::backward_from(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed; run a new forward pass first");
  if (loss.numel() != 1) throw std::logic_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::logic_error("backward: loss does not depend on any tensor that requires grad");
  consumed_ = true;
  Tensor seed = loss;
  seed.grad()[0] += 1.0;  // dLoss/dLoss == 1
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  nodes_.clear();  // releases saved activations
}

std::vector<std::string> Tape::op_ids() const {
  std::vector<std::string> ids;
  ids.reserve(nodes_.size());
  for (const auto& n : nodes_) ids.emplace_back(n.op);
  return ids;
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw std::logic_error("backward: no active tape");
  t->backward_from(loss);
}

}  // namespace cmah::diff
