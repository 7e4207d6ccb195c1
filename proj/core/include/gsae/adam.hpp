#pragma once

#include <vector>

#include "gsae/autograd.hpp"

namespace gsae {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam over a fixed list of float parameter tensors. Parameters are held by
/// handle, so updates are visible to every owner of the tensor.
class Adam {
 public:
  Adam(std::vector<ag::Tensor<float>> params, AdamOptions options);

  /// Applies one update from the accumulated gradients, then clears them.
  /// `lr_scale` multiplies the base learning rate for this step only.
  void step(float lr_scale = 1.0f);
  void zero_grad();

  /// Rescales gradients so their global L2 norm is at most `max_norm`;
  /// returns the norm before clipping.
  double clip_grad_norm(double max_norm);

  long steps_taken() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<ag::Tensor<float>> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamOptions options_;
  long t_ = 0;
};

}  // namespace gsae
