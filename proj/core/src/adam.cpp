#include "gsae/adam.hpp"

#include <cmath>

namespace gsae {

Adam::Adam(std::vector<ag::Tensor<float>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::step(float lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(options_.beta1), t_);
  const double bc2 = 1.0 - std::pow(static_cast<double>(options_.beta2), t_);
  const float step = static_cast<float>(options_.lr * lr_scale / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const float g = grad[j];
      m[j] = options_.beta1 * m[j] + (1.0f - options_.beta1) * g;
      v[j] = options_.beta2 * v[j] + (1.0f - options_.beta2) * g * g;
      data[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + options_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Adam::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params_) {
      if (!p.has_grad()) continue;
      // Gradients are owned by the tensor impl; scale in place.
      auto& g = p.impl()->grad;
      for (float& x : g) x *= s;
    }
  }
  return norm;
}

}  // namespace gsae
