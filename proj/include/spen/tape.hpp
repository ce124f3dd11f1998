#ifndef SPEN_TAPE_HPP
#define SPEN_TAPE_HPP

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "spen/tensor.hpp"

namespace spen {

using NodeId = std::int32_t;

// Reverse-mode autodiff tape. Nodes are appended in topological order with
// eagerly computed values; backward() walks the tape once in reverse,
// accumulating gradients into every node that contributed to the root.
//
// Tapes are single-threaded and owned by one forward/backward pass. Values
// are immutable once written. Static counters track live tensor storage
// across all tapes so tests can assert the checkpointed trainer's memory
// profile.
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&& other) noexcept;
  Tape& operator=(Tape&&) = delete;

  // --- graph construction -------------------------------------------------

  NodeId leaf(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId add_many(const std::vector<NodeId>& terms);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);           // elementwise
  NodeId scale(NodeId a, double c);
  NodeId smul(NodeId s, NodeId a);          // scalar node times tensor node
  NodeId dot(NodeId a, NodeId b);           // sum of elementwise products -> scalar

  // y = W x + b with x:[n], W:[m x n], b:[m].
  NodeId linear(NodeId x, NodeId weight, NodeId bias);
  // y = M^T w with M:[r x c], w:[r]; the mass-weighted feature sums.
  NodeId mat_t_vec(NodeId m, NodeId w);

  // Same-size cross-correlation with zero padding (k-1)/2, stride 1.
  // x:[ci x h x w], kernels:[co x ci x k x k], bias:[co] -> [co x h x w].
  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias);

  NodeId softplus(NodeId a, double temperature);
  NodeId softmax_rows(NodeId a);            // softmax over the last axis

  NodeId reduce_sum(NodeId a);              // -> scalar
  NodeId reduce_mean(NodeId a);             // -> scalar
  NodeId spatial_avg_pool(NodeId a);        // average over last two axes
  NodeId sum_axis(NodeId a, std::size_t axis);
  NodeId slice_last(NodeId a, std::size_t start, std::size_t len);
  NodeId row(NodeId a, std::size_t r);      // [r x c] -> [c]
  NodeId concat(const std::vector<NodeId>& vecs);  // 1-D vectors

  // Sum of z*log(z) over all entries, with a C^1 linear extension below
  // z = 1e-12 so perturbed evaluations near the simplex boundary stay finite.
  NodeId xlogx_sum(NodeId a);

  // --- evaluation ---------------------------------------------------------

  const Tensor& value(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar root (seed gradient 1). Gradients of earlier
  // backward passes on this tape are cleared first.
  void backward(NodeId root);
  // Reverse sweep from externally supplied adjoints.
  void backward_seeded(std::vector<std::pair<NodeId, Tensor>> seeds);

  // Gradient accumulated at `id` by the last backward pass; zeros if the node
  // did not influence the root.
  Tensor grad(NodeId id) const;
  bool has_grad(NodeId id) const;

  // --- storage instrumentation --------------------------------------------

  static std::size_t live_doubles();
  static std::size_t peak_live_doubles();
  static void reset_peak();

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    // Reads grads_[self] and accumulates into parent grads.
    std::function<void(Tape&, NodeId)> backward_fn;
  };

  NodeId push(Tensor value, std::vector<NodeId> parents,
              std::function<void(Tape&, NodeId)> backward_fn);
  void check_id(NodeId id) const;
  void accumulate(NodeId id, const Tensor& g);
  void accumulate_scaled(NodeId id, double c, const Tensor& g);
  void run_reverse_sweep();
  void clear_grads();
  void account(std::ptrdiff_t delta_doubles);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> grad_set_;
  std::size_t owned_doubles_ = 0;
};

}  // namespace spen

#endif
