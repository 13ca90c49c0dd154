#pragma once

#include <vector>

#include "petformer/layers.hpp"
#include "petformer/tensor.hpp"

namespace petformer {

/// Anything the training harness can fit: maps a [B, l, d] look-back batch
/// to a [B, h, d] forecast and exposes its learnable tensors.
class Forecaster {
 public:
  virtual ~Forecaster() = default;

  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual std::vector<nn::NamedTensor> parameters() const = 0;
  /// Non-learnable state that must travel with the parameters (running
  /// statistics and the like).
  virtual std::vector<nn::NamedTensor> buffers() const { return {}; }
};

}  // namespace petformer
