#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "restlab/numcore/tensor.hpp"

namespace restlab::nc {

/// Records primitive applications in execution order and replays them backward.
///
/// Activations produced during a forward pass are owned by the tape (stable
/// addresses); parameters stay owned by their model and must outlive the tape.
/// A tape constructed with `record = false` only owns values: nothing is
/// recorded and backward() is rejected.
template <typename Real>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Tensor<Real>& make(Shape shape) { return values_.emplace_back(std::move(shape)); }

  struct Node {
    std::string kind;
    std::vector<Tensor<Real>*> inputs;
    Tensor<Real>* output;
    std::function<void()> backward;
  };

  /// Registers `output` as produced by `kind` from `inputs`. Returns false (and
  /// records nothing) when not recording or no input needs a gradient.
  bool record(std::string kind, std::vector<Tensor<Real>*> inputs, Tensor<Real>& output,
              std::function<void()> backward) {
    if (!record_) return false;
    bool needs = false;
    for (auto* in : inputs) needs = needs || in->requires_grad();
    if (!needs) return false;
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(kind), std::move(inputs), &output, std::move(backward)});
    return true;
  }

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Populates gradients of every tensor reachable from `loss`. Inputs that
  /// take part in the tape but do not influence the loss end with zero grads.
  void backward(Tensor<Real>& loss) {
    if (!record_) throw StateError("backward: tape was created without recording");
    if (consumed_) throw StateError("backward: tape already consumed (double backward)");
    if (loss.size() != 1) {
      throw StateError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;
    for (auto& node : nodes_) {
      for (auto* in : node.inputs) {
        if (in->requires_grad()) in->ensure_grad();
      }
      node.output->ensure_grad();
    }
    loss.ensure_grad();
    loss.grad()[0] += Real{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  bool record_;
  bool consumed_ = false;
  std::deque<Tensor<Real>> values_;
  std::vector<Node> nodes_;
};

}  // namespace restlab::nc
