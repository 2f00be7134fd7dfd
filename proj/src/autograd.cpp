#include "xdrec/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace xdrec {
namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Mat value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

inline bool wants(const NodePtr& p) { return p->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var Var::constant(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer().setConstant(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() > 0) node->backward_fn(*node);
  }
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) {
    auto& node = *p.var.node();
    if (node.grad.size() > 0) node.grad.setZero();
  }
}

ParamList prefixed(const std::string& prefix, const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({prefix + p.name, p.var});
  return out;
}

namespace ops {

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents)
      if (wants(p)) p->grad_buffer() += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a.node(), b.node()}, [](Node& self) {
    if (wants(self.parents[0])) self.parents[0]->grad_buffer() += self.grad;
    if (wants(self.parents[1])) self.parents[1]->grad_buffer() -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->grad_buffer() += self.grad.cwiseProduct(pb->value);
    if (wants(pb)) pb->grad_buffer() += self.grad.cwiseProduct(pa->value);
  });
}

Var scale(const Var& a, float s) {
  return make_result(a.value() * s, {a.node()}, [s](Node& self) {
    self.parents[0]->grad_buffer() += self.grad * s;
  });
}

Var add_scalar(const Var& a, float s) {
  Mat v = a.value().array() + s;
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    self.parents[0]->grad_buffer() += self.grad;
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Mat v = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(v), {a.node(), row.node()}, [](Node& self) {
    if (wants(self.parents[0])) self.parents[0]->grad_buffer() += self.grad;
    if (wants(self.parents[1])) self.parents[1]->grad_buffer() += self.grad.colwise().sum();
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  Mat v = a.value().array().colwise() * col.value().col(0).array();
  return make_result(std::move(v), {a.node(), col.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pc = self.parents[1];
    if (wants(pa)) pa->grad_buffer().array() += self.grad.array().colwise() * pc->value.col(0).array();
    if (wants(pc)) pc->grad_buffer() += self.grad.cwiseProduct(pa->value).rowwise().sum();
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Mat v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return make_result(std::move(v), {a.node(), b.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
    if (wants(pb)) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Mat v(a.rows(), b.rows());
  v.noalias() = a.value() * b.value().transpose();
  return make_result(std::move(v), {a.node(), b.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->grad_buffer().noalias() += self.grad * pb->value;
    if (wants(pb)) pb->grad_buffer().noalias() += self.grad.transpose() * pa->value;
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw std::invalid_argument("linear: shape mismatch");
  Mat v(x.rows(), w.cols());
  v.noalias() = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return make_result(std::move(v), {x.node(), w.node(), b.node()}, [](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    if (wants(px)) px->grad_buffer().noalias() += self.grad * pw->value.transpose();
    if (wants(pw)) pw->grad_buffer().noalias() += px->value.transpose() * self.grad;
    if (wants(pb)) pb->grad_buffer() += self.grad.colwise().sum();
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Var gelu(const Var& a) {
  const Mat& x = a.value();
  Mat t = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh().matrix();
  Mat v = (0.5f * x.array() * (1.0f + t.array())).matrix();
  return make_result(std::move(v), {a.node()}, [t = std::move(t)](Node& self) {
    const auto x = self.parents[0]->value.array();
    auto dt = (1.0f - t.array().square()) * kGeluC * (1.0f + 3.0f * kGeluA * x.square());
    self.parents[0]->grad_buffer().array() += self.grad.array() * (0.5f * (1.0f + t.array()) + 0.5f * x * dt);
  });
}

Var tanh(const Var& a) {
  Mat v = a.value().array().tanh().matrix();
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    self.parents[0]->grad_buffer().array() += self.grad.array() * (1.0f - self.value.array().square());
  });
}

Var sigmoid(const Var& a) {
  Mat v = (1.0f / (1.0f + (-a.value().array()).exp())).matrix();
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    self.parents[0]->grad_buffer().array() += self.grad.array() * self.value.array() * (1.0f - self.value.array());
  });
}

Var relu(const Var& a) {
  Mat v = a.value().cwiseMax(0.0f);
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    auto& p = self.parents[0];
    p->grad_buffer().array() += (p->value.array() > 0.0f).select(self.grad.array(), 0.0f);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Index n = x.rows(), m = x.cols();
  if (gamma.cols() != m || beta.cols() != m) throw std::invalid_argument("layer_norm: shape mismatch");
  Mat xhat(n, m);
  Eigen::VectorXf rstd(n);
  for (Index i = 0; i < n; ++i) {
    const float mu = x.value().row(i).mean();
    auto centered = x.value().row(i).array() - mu;
    const float var = centered.square().mean();
    rstd(i) = 1.0f / std::sqrt(var + eps);
    xhat.row(i) = centered * rstd(i);
  }
  Mat v = xhat.array().rowwise() * gamma.value().row(0).array();
  v.rowwise() += beta.value().row(0);
  return make_result(std::move(v), {x.node(), gamma.node(), beta.node()},
                     [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       auto& px = self.parents[0];
                       auto& pg = self.parents[1];
                       auto& pb = self.parents[2];
                       if (wants(pg)) pg->grad_buffer() += self.grad.cwiseProduct(xhat).colwise().sum();
                       if (wants(pb)) pb->grad_buffer() += self.grad.colwise().sum();
                       if (wants(px)) {
                         Mat dxhat = self.grad.array().rowwise() * pg->value.row(0).array();
                         auto& gx = px->grad_buffer();
                         for (Index i = 0; i < dxhat.rows(); ++i) {
                           const float mean_d = dxhat.row(i).mean();
                           const float mean_dx = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                           gx.row(i).array() +=
                               rstd(i) * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
                         }
                       }
                     });
}

Var gather_rows(const Var& table, std::span<const int32_t> idx) {
  const Index m = table.cols();
  Mat v(static_cast<Index>(idx.size()), m);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw std::out_of_range("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = table.value().row(idx[i]);
  }
  return make_result(std::move(v), {table.node()}, [idx = IdxList(idx.begin(), idx.end())](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index n = parts[0].rows();
  Index total = 0;
  std::vector<NodePtr> parents;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
    widths.push_back(p.cols());
    parents.push_back(p.node());
  }
  Mat v(n, total);
  Index col = 0;
  for (const auto& p : parts) {
    v.middleCols(col, p.cols()) = p.value();
    col += p.cols();
  }
  return make_result(std::move(v), std::move(parents), [widths = std::move(widths)](Node& self) {
    Index col = 0;
    for (size_t i = 0; i < widths.size(); ++i) {
      if (wants(self.parents[i])) self.parents[i]->grad_buffer() += self.grad.middleCols(col, widths[i]);
      col += widths[i];
    }
  });
}

Var row_dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "row_dot");
  Mat v = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make_result(std::move(v), {a.node(), b.node()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->grad_buffer().array() += pb->value.array().colwise() * self.grad.col(0).array();
    if (wants(pb)) pb->grad_buffer().array() += pa->value.array().colwise() * self.grad.col(0).array();
  });
}

Var row_sqnorm(const Var& a) {
  Mat v = a.value().rowwise().squaredNorm();
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    auto& p = self.parents[0];
    p->grad_buffer().array() += 2.0f * (p->value.array().colwise() * self.grad.col(0).array());
  });
}

Var row_norm(const Var& a) {
  Mat v = a.value().rowwise().norm();
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (Index i = 0; i < g.rows(); ++i) {
      const float nrm = self.value(i, 0);
      if (nrm > 0.0f) g.row(i) += p->value.row(i) * (self.grad(i, 0) / nrm);
    }
  });
}

Var segment_mean(const Var& x, std::span<const int> offsets) {
  const Index segs = static_cast<Index>(offsets.size()) - 1;
  Mat v = Mat::Zero(segs, x.cols());
  for (Index b = 0; b < segs; ++b) {
    const int len = offsets[b + 1] - offsets[b];
    if (len > 0) v.row(b) = x.value().middleRows(offsets[b], len).colwise().sum() / static_cast<float>(len);
  }
  return make_result(std::move(v), {x.node()}, [off = std::vector<int>(offsets.begin(), offsets.end())](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t b = 0; b + 1 < off.size(); ++b) {
      const int len = off[b + 1] - off[b];
      if (len == 0) continue;
      g.middleRows(off[b], len).rowwise() += self.grad.row(static_cast<Index>(b)) / static_cast<float>(len);
    }
  });
}

Var repeat_segments(const Var& x, std::span<const int> offsets) {
  const Index segs = static_cast<Index>(offsets.size()) - 1;
  if (x.rows() != segs) throw std::invalid_argument("repeat_segments: row count must equal segment count");
  Mat v(offsets.back(), x.cols());
  for (Index b = 0; b < segs; ++b) {
    const int len = offsets[b + 1] - offsets[b];
    if (len > 0) v.middleRows(offsets[b], len).rowwise() = x.value().row(b);
  }
  return make_result(std::move(v), {x.node()}, [off = std::vector<int>(offsets.begin(), offsets.end())](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (size_t b = 0; b + 1 < off.size(); ++b) {
      const int len = off[b + 1] - off[b];
      if (len > 0) g.row(static_cast<Index>(b)) += self.grad.middleRows(off[b], len).colwise().sum();
    }
  });
}

Var segment_attention(const Var& q, const Var& k, const Var& v, std::span<const int> offsets, int heads) {
  check_same_shape(q, k, "segment_attention");
  check_same_shape(q, v, "segment_attention");
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("segment_attention: d must divide into heads");
  const Index dh = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const size_t segs = offsets.size() - 1;

  Mat out = Mat::Zero(q.rows(), d);
  std::vector<Mat> probs(segs * static_cast<size_t>(heads));
  for (size_t b = 0; b < segs; ++b) {
    const Index start = offsets[b];
    const Index len = offsets[b + 1] - offsets[b];
    if (len == 0) continue;
    for (int h = 0; h < heads; ++h) {
      auto qb = q.value().block(start, h * dh, len, dh);
      auto kb = k.value().block(start, h * dh, len, dh);
      auto vb = v.value().block(start, h * dh, len, dh);
      Mat s(len, len);
      s.noalias() = qb * kb.transpose();
      s *= inv_sqrt;
      for (Index i = 0; i < len; ++i) {
        const float mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.block(start, h * dh, len, dh).noalias() = s * vb;
      probs[b * heads + h] = std::move(s);
    }
  }

  return make_result(
      std::move(out), {q.node(), k.node(), v.node()},
      [probs = std::move(probs), off = std::vector<int>(offsets.begin(), offsets.end()), heads, dh,
       inv_sqrt](Node& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        Mat& gq = pq->grad_buffer();
        Mat& gk = pk->grad_buffer();
        Mat& gv = pv->grad_buffer();
        for (size_t b = 0; b + 1 < off.size(); ++b) {
          const Index start = off[b];
          const Index len = off[b + 1] - off[b];
          if (len == 0) continue;
          for (int h = 0; h < heads; ++h) {
            const Mat& p = probs[b * heads + h];
            auto go = self.grad.block(start, h * dh, len, dh);
            auto qb = pq->value.block(start, h * dh, len, dh);
            auto kb = pk->value.block(start, h * dh, len, dh);
            auto vb = pv->value.block(start, h * dh, len, dh);
            gv.block(start, h * dh, len, dh).noalias() += p.transpose() * go;
            Mat dp(len, len);
            dp.noalias() = go * vb.transpose();
            Eigen::VectorXf rowdot = dp.cwiseProduct(p).rowwise().sum();
            Mat ds = p.array() * (dp.array().colwise() - rowdot.array());
            ds *= inv_sqrt;
            gq.block(start, h * dh, len, dh).noalias() += ds * kb;
            gk.block(start, h * dh, len, dh).noalias() += ds.transpose() * qb;
          }
        }
      });
}

Var grad_reverse(const Var& x, float lambda) {
  return make_result(x.value(), {x.node()}, [lambda](Node& self) {
    self.parents[0]->grad_buffer() -= lambda * self.grad;
  });
}

Var stop_gradient(const Var& x) { return Var::constant(x.value()); }

Var group_dot(const Var& c, const Var& cand, int group) {
  const Index batch = c.rows();
  if (group <= 0 || cand.rows() != batch * group || cand.cols() != c.cols())
    throw std::invalid_argument("group_dot: shape mismatch");
  Mat v(batch, group);
  for (Index b = 0; b < batch; ++b)
    v.row(b).noalias() = c.value().row(b) * cand.value().middleRows(b * group, group).transpose();
  return make_result(std::move(v), {c.node(), cand.node()}, [group](Node& self) {
    auto& pc = self.parents[0];
    auto& pe = self.parents[1];
    for (Index b = 0; b < self.grad.rows(); ++b) {
      if (wants(pc)) pc->grad_buffer().row(b).noalias() += self.grad.row(b) * pe->value.middleRows(b * group, group);
      if (wants(pe))
        pe->grad_buffer().middleRows(b * group, group).noalias() += self.grad.row(b).transpose() * pc->value.row(b);
    }
  });
}

Var sum(const Var& a) {
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return make_result(std::move(v), {a.node()}, [](Node& self) {
    self.parents[0]->grad_buffer().array() += self.grad(0, 0);
  });
}

Var mean(const Var& a) {
  const float n = static_cast<float>(a.value().size());
  Mat v(1, 1);
  v(0, 0) = n > 0 ? a.value().sum() / n : 0.0f;
  return make_result(std::move(v), {a.node()}, [n](Node& self) {
    if (n > 0) self.parents[0]->grad_buffer().array() += self.grad(0, 0) / n;
  });
}

Var softmax_xent(const Var& logits, std::span<const int32_t> targets) {
  const Index n = logits.rows();
  if (static_cast<size_t>(n) != targets.size()) throw std::invalid_argument("softmax_xent: target count mismatch");
  Mat probs(n, logits.cols());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int32_t t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("softmax_xent: target out of range");
    const float mx = logits.value().row(i).maxCoeff();
    probs.row(i) = (logits.value().row(i).array() - mx).exp();
    const double z = probs.row(i).sum();
    probs.row(i) /= static_cast<float>(z);
    total += std::log(z) + mx - logits.value()(i, t);
  }
  Mat v(1, 1);
  v(0, 0) = n > 0 ? static_cast<float>(total / static_cast<double>(n)) : 0.0f;
  return make_result(std::move(v), {logits.node()},
                     [probs = std::move(probs), tg = IdxList(targets.begin(), targets.end())](Node& self) {
                       const Index n = probs.rows();
                       if (n == 0) return;
                       const float s = self.grad(0, 0) / static_cast<float>(n);
                       Mat& g = self.parents[0]->grad_buffer();
                       g += probs * s;
                       for (Index i = 0; i < n; ++i) g(i, tg[static_cast<size_t>(i)]) -= s;
                     });
}

Var bce_with_logits(const Var& logits, std::span<const float> labels) {
  const Index n = logits.rows();
  if (logits.cols() != 1 || static_cast<size_t>(n) != labels.size())
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double z = logits.value()(i, 0);
    const double y = labels[static_cast<size_t>(i)];
    total += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
  }
  Mat v(1, 1);
  v(0, 0) = n > 0 ? static_cast<float>(total / static_cast<double>(n)) : 0.0f;
  return make_result(std::move(v), {logits.node()},
                     [y = std::vector<float>(labels.begin(), labels.end())](Node& self) {
                       auto& p = self.parents[0];
                       const Index n = p->value.rows();
                       if (n == 0) return;
                       const float s = self.grad(0, 0) / static_cast<float>(n);
                       auto& g = p->grad_buffer();
                       for (Index i = 0; i < n; ++i) {
                         const float sig = 1.0f / (1.0f + std::exp(-p->value(i, 0)));
                         g(i, 0) += s * (sig - y[static_cast<size_t>(i)]);
                       }
                     });
}

}  // namespace ops
}  // namespace xdrec
