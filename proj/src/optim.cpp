#include "xdrec/optim.hpp"

#include <cmath>

namespace xdrec {

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Var::constant(Mat::Zero(p.var.rows(), p.var.cols())));
    v_.push_back(Var::constant(Mat::Zero(p.var.rows(), p.var.cols())));
  }
}

void Adam::step(bool skip_untouched) {
  ++steps_;
  const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(steps_));
  const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(steps_));
  const float step_size = cfg_.learning_rate / bc1;
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& node = *params_[i].var.node();
    if (node.grad.size() != node.value.size()) {
      if (skip_untouched) continue;
      node.grad_buffer();
    }
    if (skip_untouched && node.grad.isZero(0.0f)) continue;
    Mat& m = m_[i].mutable_value();
    Mat& v = v_[i].mutable_value();
    m = cfg_.beta1 * m + (1.0f - cfg_.beta1) * node.grad;
    v = cfg_.beta2 * v + (1.0f - cfg_.beta2) * node.grad.cwiseAbs2();
    node.value.array() -= step_size * m.array() / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

void Adam::zero_grad() { xdrec::zero_grad(params_); }

ParamList Adam::state() const {
  ParamList out;
  for (size_t i = 0; i < params_.size(); ++i) {
    out.push_back({params_[i].name + ".m", m_[i]});
    out.push_back({params_[i].name + ".v", v_[i]});
  }
  return out;
}

}  // namespace xdrec
