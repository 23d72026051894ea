#pragma once

// Library-internal node access for modules that define their own
// differentiable primitives (losses, gradcheck fixtures).

#include <functional>

#include "essc/tensor.hpp"

namespace essc {
namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily by Graph::run_backward
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Consumes this node's grad and accumulates into the parents' grads.
    std::function<void(TensorNode&)> backward;
};

}  // namespace detail

Tensor detail_wrap(std::shared_ptr<detail::TensorNode> n);
const std::shared_ptr<detail::TensorNode>& detail_unwrap(const Tensor& t);

// Records one executed operation. requires_grad is inherited from parents.
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<detail::TensorNode>> parents,
               std::function<void(detail::TensorNode&)> backward);

}  // namespace essc
