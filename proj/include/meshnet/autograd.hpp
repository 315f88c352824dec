#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "meshnet/ops.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/tensor.hpp"

namespace meshnet {

/// Reverse-mode tape over tensor ops. Nodes are appended in evaluation
/// order, which is already a topological order, so backward() is a single
/// reverse sweep. One graph serves one forward/backward pass and is
/// confined to one thread.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first contribution
    std::function<void(Graph&)> backprop;
  };

  int add_leaf(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_op(Tensor<T> value, std::function<void(Graph&)> backprop) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Id the next added node will get; lets op wrappers capture their own id.
  int next_id() const { return static_cast<int>(nodes_.size()); }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  Tensor<T>& value(int id) { return nodes_[id].value; }

  /// Gradient buffer of a node, allocating zeros on first use.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.values.empty()) {
      n.grad.shape = n.value.shape;
      n.grad.values.assign(n.value.values.size(), T(0));
    }
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[id].grad.values.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Nodes that
  /// never received a gradient contribution are skipped, so subgraphs not
  /// feeding the loss cost nothing.
  void backward(int loss_id) {
    if (loss_id < 0 || loss_id >= next_id())
      throw ShapeError("backward: no recorded node with that id");
    Tensor<T>& g = grad(loss_id);
    std::fill(g.values.begin(), g.values.end(), T(0));
    g.values.at(0) = T(1);
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backprop && !n.grad.values.empty()) n.backprop(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

/// Handle to a node in a graph; cheap to copy.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;
  const Tensor<T>& value() const { return graph->value(id); }
  Tensor<T>& grad() const { return graph->grad(id); }
};

template <typename T>
Var<T> make_leaf(Graph<T>& g, Tensor<T> value) {
  return {&g, g.add_leaf(std::move(value))};
}

// --- op wrappers -----------------------------------------------------------

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> kernel, Var<T> bias, int dilation, int padding) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = conv3d_forward(g.value(x.id), g.value(kernel.id),
                                 g.value(bias.id), dilation, padding);
  const int xid = x.id, kid = kernel.id, bid = bias.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    conv3d_backward(gr.grad(oid), gr.value(xid), gr.value(kid), dilation,
                    padding, &gr.grad(xid), &gr.grad(kid), &gr.grad(bid));
  });
  return {&g, oid};
}

/// Train-mode batch normalization. Running statistics live outside the
/// graph and are updated in place as a side effect.
template <typename T>
Var<T> batchnorm_train(Var<T> x, Var<T> gamma, Var<T> beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var,
                       T eps, T momentum) {
  Graph<T>& g = *x.graph;
  auto ctx = std::make_shared<BnContext<T>>();
  Tensor<T> out =
      batchnorm_forward(g.value(x.id), g.value(gamma.id), g.value(beta.id),
                        running_mean, running_var, eps, momentum,
                        /*train=*/true, ctx.get());
  const int xid = x.id, gid = gamma.id, bid = beta.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    batchnorm_backward(gr.grad(oid), gr.value(xid), gr.value(gid), *ctx,
                       &gr.grad(xid), &gr.grad(gid), &gr.grad(bid));
  });
  return {&g, oid};
}

template <typename T>
Var<T> relu(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = relu_forward(g.value(x.id));
  const int xid = x.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    relu_backward(gr.grad(oid), gr.value(xid), &gr.grad(xid));
  });
  return {&g, oid};
}

template <typename T>
Var<T> dropout3d(Var<T> x, double p, bool train, Rng& rng) {
  Graph<T>& g = *x.graph;
  auto mask = std::make_shared<std::vector<T>>();
  Tensor<T> out = dropout3d_forward(g.value(x.id), p, train, rng, mask.get());
  const int xid = x.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    dropout3d_backward(gr.grad(oid), *mask, &gr.grad(xid));
  });
  return {&g, oid};
}

template <typename T>
Var<T> logsoftmax(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = logsoftmax_forward(g.value(x.id));
  const int xid = x.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    logsoftmax_backward(gr.grad(oid), gr.value(oid), &gr.grad(xid));
  });
  return {&g, oid};
}

/// Scalar cross-entropy node over log-probabilities.
template <typename T>
Var<T> cross_entropy(Var<T> logprobs, std::shared_ptr<const Tensor<std::int32_t>> labels) {
  Graph<T>& g = *logprobs.graph;
  Tensor<T> loss({1});
  loss.values[0] = cross_entropy_forward(g.value(logprobs.id), *labels);
  const int lid = logprobs.id;
  const int oid = g.next_id();
  g.add_op(std::move(loss), [=](Graph<T>& gr) {
    cross_entropy_backward(gr.grad(oid).values[0], *labels, &gr.grad(lid));
  });
  return {&g, oid};
}

/// Scalar sum of all elements; mostly a test utility.
template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out({1});
  T acc = 0;
  for (const T& v : g.value(x.id).values) acc += v;
  out.values[0] = acc;
  const int xid = x.id;
  const int oid = g.next_id();
  g.add_op(std::move(out), [=](Graph<T>& gr) {
    const T go = gr.grad(oid).values[0];
    Tensor<T>& gi = gr.grad(xid);
    for (T& v : gi.values) v += go;
  });
  return {&g, oid};
}

}  // namespace meshnet
