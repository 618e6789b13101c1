#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hyperfusion/tensor.hpp"

namespace hyperfusion {

/// Records differentiable operations in execution order for a reverse pass.
///
/// A node is appended only when at least one input requires a gradient, so
/// nodes are topologically ordered by construction. A tape is confined to one
/// thread; independent forward passes use independent tapes.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    // Reads output.grad(), accumulates into inputs that require grad.
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

  /// Reverse pass from a scalar loss. Leaf gradients accumulate onto whatever
  /// they already hold; call zero_grad on parameters between steps.
  void backward(Tensor loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward: loss must be a scalar tensor, got " +
                          (loss.defined() ? shape_string(loss.dims()) : std::string("undefined")));
    if (!loss.requires_grad()) return;
    loss.grad_mut()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      // Intermediates are not needed after their node ran.
      if (!it->output.same_storage(loss)) it->output.drop_grad();
    }
  }

 private:
  std::vector<Node> nodes_;
};

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace hyperfusion
