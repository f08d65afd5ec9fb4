#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cmah/common.hpp"

namespace cmah::diff {

struct TensorData {
  std::vector<int> shape;
  Array values;
  Array grad;  // empty until the first accumulation
  bool requires_grad = false;
};

// Dense row-major tensor with shared storage. Ops treat a tensor as the 2-D
// matrix [prod(leading dims) x last dim]; `shape` keeps the logical extents.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, Scalar v);
  static Tensor from_array(std::vector<int> shape, Array values, bool requires_grad = false);
  static Tensor from_matrix(const RowMat& m, bool requires_grad = false);
  static Tensor scalar_value(Scalar v);
  static Tensor row(std::initializer_list<Scalar> xs);

  bool valid() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  Eigen::Index numel() const { return d_->values.size(); }
  Eigen::Index cols() const { return d_->shape.empty() ? 1 : d_->shape.back(); }
  Eigen::Index rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  Array& array() { return d_->values; }
  const Array& array() const { return d_->values; }
  Eigen::Map<RowMat> mat() { return {d_->values.data(), rows(), cols()}; }
  Eigen::Map<const RowMat> mat() const { return {d_->values.data(), rows(), cols()}; }
  Scalar item() const;

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  // Gradient storage lives in the shared TensorData, so these are callable on
  // const handles (backward closures capture tensors by value).
  bool has_grad() const { return d_->grad.size() > 0; }
  Array& grad() const;  // allocates zeros on first use
  Eigen::Map<RowMat> grad_mat() const { return {grad().data(), rows(), cols()}; }
  void add_grad(const Array& g) const;
  void add_grad_mat(const RowMat& g) const;
  void zero_grad() const;

  TensorData* raw() const { return d_.get(); }
  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Flatten a row-major matrix expression into an Array.
inline Array flat(const RowMat& m) {
  return Eigen::Map<const Array>(m.data(), m.size());
}

std::string shape_str(const std::vector<int>& s);

// Reverse-mode tape. Forward ops push one record per node; backward replays
// them in exact reverse push order (reverse topological order, since forward
// evaluation is itself a topological order). Thread-confined: one tape is
// active per thread at a time, distinct tapes may run on distinct threads.
class Tape {
 public:
  explicit Tape(uint64_t seed = 0) : seed_(seed) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(const char* op, std::function<void()> backward_fn);
  void backward_from(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  uint64_t seed() const { return seed_; }
  std::vector<std::string> op_ids() const;

  static Tape* active();

 private:
  friend struct TapeScope;
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  uint64_t seed_ = 0;
};

struct TapeScope {
  explicit TapeScope(Tape& t);
  ~TapeScope();
  Tape* prev;
};

// Suspends recording (inference / finite-difference evaluation).
struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  Tape* prev;
};

// Backpropagate from a scalar loss through the active tape.
void backward(const Tensor& loss);

}  // namespace cmah::diff
