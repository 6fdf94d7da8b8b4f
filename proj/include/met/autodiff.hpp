#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "met/tensor.hpp"

namespace met {

enum class Nonlinearity { tanh_fn, gelu };
std::string nonlinearity_name(Nonlinearity n);
Nonlinearity nonlinearity_from_name(const std::string& s);

struct Handle {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Operations execute eagerly and record their backward
// rule; running the same builder with identical inputs and RNG streams
// reproduces every value bit-for-bit. Single-threaded per instance; distinct
// tapes over shared read-only parameters may run in parallel.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf over externally owned storage (parameters); the tensor must outlive
  // the tape. Gradients flow when t.requires_grad is set. Repeated calls with
  // the same tensor return the same slot, so its gradient accumulates in one
  // place.
  Handle leaf(const Tensor& t);
  // Owned constant (inputs, masks); never receives gradient.
  Handle constant(Tensor t);
  // Slot of a previously registered leaf, if any.
  std::optional<Handle> find_leaf(const Tensor& t) const;

  Handle matmul(Handle a, Handle b);                 // [m,k]x[k,n] -> [m,n]
  Handle add(Handle a, Handle b);                    // same shape
  Handle add_bias(Handle x, Handle b);               // [m,n] + [n]
  Handle sub(Handle a, Handle b);
  Handle mul(Handle a, Handle b);                    // elementwise
  Handle scale(Handle x, double c);
  Handle embedding(Handle table, std::vector<int64_t> ids);  // [V,d] -> [n,d]
  Handle softmax(Handle x);                          // rowwise
  // Row t normalizes over columns [0, min(n, offset+t+1)); the rest are 0.
  Handle causal_softmax(Handle x, int64_t offset);
  Handle layer_norm(Handle x, Handle gain, Handle bias, double eps = 1e-5);
  Handle activation(Handle x, Nonlinearity n);
  Handle dropout_apply(Handle x, Tensor mask);       // y = x .* mask
  // Sum of -log softmax(logits)[t] over rows whose target >= 0.
  Handle cross_entropy_sum(Handle logits, std::vector<int64_t> targets);
  Handle sum_squares(Handle x);                      // scalar
  Handle sum_all(Handle x);                          // scalar
  Handle concat_rows(Handle a, Handle b);
  Handle concat_cols(Handle a, Handle b);
  Handle slice_rows(Handle x, int64_t r0, int64_t r1);
  Handle slice_cols(Handle x, int64_t c0, int64_t c1);
  Handle transpose(Handle x);
  Handle detach(Handle x);                           // value copy, stops gradient

  // Gradients for every requires_grad slot; parameters unreachable from the
  // loss get exact zeros. The loss must be scalar.
  void backward(Handle loss);

  const Tensor& value(Handle h) const;
  const Tensor& grad(Handle h) const;
  bool has_grad(Handle h) const;
  bool grad_enabled() const { return grad_enabled_; }
  size_t num_nodes() const { return nodes_.size(); }
  size_t num_values() const { return slots_.size(); }

 private:
  struct Slot {
    const Tensor* ref = nullptr;
    Tensor own;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    const Tensor& val() const { return ref ? *ref : own; }
  };
  struct Node {
    const char* op;
    std::function<void()> back;
  };

  Slot& slot(Handle h) { return slots_[static_cast<size_t>(h.idx)]; }
  const Slot& slot(Handle h) const { return slots_[static_cast<size_t>(h.idx)]; }
  Handle push_value(Tensor t, bool requires_grad);
  void push_node(const char* op, std::function<void()> back);
  Tensor& grad_buf(Handle h);
  void check(Handle h, const char* op) const;
  bool rg(Handle h) const { return slot(h).requires_grad; }

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  std::map<const Tensor*, int32_t> leaf_cache_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

}  // namespace met
