#pragma once

#include <initializer_list>

#include "dcp/tensor.hpp"

namespace dcp::detail {

// Builds the result of an op. When gradients are enabled and any input
// requires them, the result is attached to the tape with `backward`.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

}  // namespace dcp::detail
