// Copyright 2026 The Capalign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capalign/common.hpp"

namespace capalign {

// Reverse-mode tape over dense Eigen matrices. One Tape instance records one
// forward pass; backward() replays recorded closures in reverse creation
// order (creation order is a topological order by construction). Nodes whose
// inputs carry no gradient record no closure, so inference passes pay only
// for the forward values.
//
// Column vectors are d x 1 matrices throughout. Spatial activation stacks are
// stored channel-major as C x (H*W) with column index y*W + x (row-major
// cells), which is the region index every attention vector uses.

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Var leaf(Mat value, bool needs_grad = false) {
    return push(std::move(value), needs_grad, nullptr);
  }
  Var constant(Mat value) { return leaf(std::move(value), false); }

  const Mat& value(Var v) const { return nodes_[check(v)].value; }
  const Mat& grad(Var v) const { return nodes_[check(v)].grad; }
  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Marks an already-created node as a gradient sink; ops recorded after this
  // call will propagate into it. Used to read d(out)/d(activations) at an
  // interior node without tracking anything beneath it.
  void request_grad(Var v) { nodes_[check(v)].needs_grad = true; }

  // ---- arithmetic ----

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require_shape(A.cols() == B.rows(), "matmul: inner dims mismatch");
    return binary(a, b, A * B, [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad.noalias() += g * t.value(b).transpose();
      if (t.needs_grad(b)) t.nodes_[b.id].grad.noalias() += t.value(a).transpose() * g;
    });
  }

  // A * B^T
  Var matmul_nt(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require_shape(A.cols() == B.cols(), "matmul_nt: inner dims mismatch");
    return binary(a, b, A * B.transpose(), [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad.noalias() += g * t.value(b);
      if (t.needs_grad(b)) t.nodes_[b.id].grad.noalias() += g.transpose() * t.value(a);
    });
  }

  // A^T * B
  Var matmul_tn(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require_shape(A.rows() == B.rows(), "matmul_tn: inner dims mismatch");
    return binary(a, b, A.transpose() * B, [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad.noalias() += t.value(b) * g.transpose();
      if (t.needs_grad(b)) t.nodes_[b.id].grad.noalias() += t.value(a) * g;
    });
  }

  Var add(Var a, Var b) {
    require_shape(same_shape(a, b), "add: shape mismatch");
    return binary(a, b, value(a) + value(b), [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad += g;
      if (t.needs_grad(b)) t.nodes_[b.id].grad += g;
    });
  }

  Var sub(Var a, Var b) {
    require_shape(same_shape(a, b), "sub: shape mismatch");
    return binary(a, b, value(a) - value(b), [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad += g;
      if (t.needs_grad(b)) t.nodes_[b.id].grad -= g;
    });
  }

  Var cmul(Var a, Var b) {
    require_shape(same_shape(a, b), "cmul: shape mismatch");
    return binary(a, b, value(a).cwiseProduct(value(b)),
                  [](Tape& t, const Mat& g, Var a, Var b) {
                    if (t.needs_grad(a)) t.nodes_[a.id].grad += g.cwiseProduct(t.value(b));
                    if (t.needs_grad(b)) t.nodes_[b.id].grad += g.cwiseProduct(t.value(a));
                  });
  }

  Var scale(Var a, double s) {
    return unary(a, value(a) * s, [s](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad += g * s;
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // M (r x c) plus v (c x 1) broadcast across rows.
  Var add_rowwise(Var m, Var v) {
    const Mat& M = value(m);
    const Mat& V = value(v);
    require_shape(V.cols() == 1 && V.rows() == M.cols(), "add_rowwise: bad vector shape");
    Mat out = M;
    out.rowwise() += V.col(0).transpose();
    return binary(m, v, std::move(out), [](Tape& t, const Mat& g, Var m, Var v) {
      if (t.needs_grad(m)) t.nodes_[m.id].grad += g;
      if (t.needs_grad(v)) t.nodes_[v.id].grad += g.colwise().sum().transpose();
    });
  }

  // M (r x c) plus v (r x 1) broadcast across columns.
  Var add_colwise(Var m, Var v) {
    const Mat& M = value(m);
    const Mat& V = value(v);
    require_shape(V.cols() == 1 && V.rows() == M.rows(), "add_colwise: bad vector shape");
    Mat out = M;
    out.colwise() += V.col(0);
    return binary(m, v, std::move(out), [](Tape& t, const Mat& g, Var m, Var v) {
      if (t.needs_grad(m)) t.nodes_[m.id].grad += g;
      if (t.needs_grad(v)) t.nodes_[v.id].grad += g.rowwise().sum();
    });
  }

  // ---- elementwise nonlinearities ----

  Var tanh_(Var a) {
    Mat out = value(a).array().tanh();
    Var r = unary_with_out(a, std::move(out), [](Tape& t, const Mat& g, const Mat& y, Var a) {
      t.nodes_[a.id].grad.array() += g.array() * (1.0 - y.array().square());
    });
    return r;
  }

  Var sigmoid_(Var a) {
    Mat out = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
    return unary_with_out(a, std::move(out), [](Tape& t, const Mat& g, const Mat& y, Var a) {
      t.nodes_[a.id].grad.array() += g.array() * y.array() * (1.0 - y.array());
    });
  }

  Var relu_(Var a) {
    Mat out = value(a).cwiseMax(0.0);
    return unary_with_out(a, std::move(out), [](Tape& t, const Mat& g, const Mat& y, Var a) {
      t.nodes_[a.id].grad.array() += g.array() * (y.array() > 0.0).cast<double>();
    });
  }

  // ---- softmax family (column vectors) ----

  Var softmax_col(Var a) {
    const Mat& x = value(a);
    require_shape(x.cols() == 1, "softmax_col: expects a column vector");
    Eigen::ArrayXd e = (x.col(0).array() - x.col(0).maxCoeff()).exp();
    Mat out = (e / e.sum()).matrix();
    return unary_with_out(a, std::move(out), [](Tape& t, const Mat& g, const Mat& y, Var a) {
      const double dot = (g.array() * y.array()).sum();
      t.nodes_[a.id].grad.array() += y.array() * (g.array() - dot);
    });
  }

  Var log_softmax_col(Var a) {
    const Mat& x = value(a);
    require_shape(x.cols() == 1, "log_softmax_col: expects a column vector");
    const double mx = x.col(0).maxCoeff();
    const double lse = mx + std::log((x.col(0).array() - mx).exp().sum());
    Mat out = x.array() - lse;
    return unary_with_out(a, std::move(out), [](Tape& t, const Mat& g, const Mat& y, Var a) {
      const double gs = g.sum();
      t.nodes_[a.id].grad.array() += g.array() - y.array().exp() * gs;
    });
  }

  // ---- structure ----

  Var vstack(const std::vector<Var>& parts) {
    require(!parts.empty(), "vstack: no parts");
    Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    for (Var p : parts) {
      require_shape(value(p).cols() == cols, "vstack: column count mismatch");
      rows += value(p).rows();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    bool ng = false;
    for (Var p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
      ng = ng || needs_grad(p);
    }
    if (!ng) return push(std::move(out), false, nullptr);
    std::vector<Var> ps = parts;
    Var out_var = push(std::move(out), true, nullptr);
    nodes_[out_var.id].back = [ps, out_var](Tape& t) {
      const Mat& g = t.nodes_[out_var.id].grad;
      Eigen::Index r = 0;
      for (Var p : ps) {
        const Eigen::Index n = t.value(p).rows();
        if (t.needs_grad(p)) t.nodes_[p.id].grad += g.middleRows(r, n);
        r += n;
      }
    };
    return out_var;
  }

  Var rows(Var a, int r0, int n) {
    const Mat& A = value(a);
    require_shape(r0 >= 0 && n >= 0 && r0 + n <= A.rows(), "rows: range out of bounds");
    Mat out = A.middleRows(r0, n);
    return unary(a, std::move(out), [r0, n](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad.middleRows(r0, n) += g;
    });
  }

  // Row r of a matrix, returned as a column vector (embedding lookup).
  Var row_as_col(Var a, int r) {
    const Mat& A = value(a);
    require_shape(r >= 0 && r < A.rows(), "row_as_col: row out of bounds");
    Mat out = A.row(r).transpose();
    return unary(a, std::move(out), [r](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad.row(r) += g.transpose();
    });
  }

  // Element i of a column vector as a 1x1 scalar.
  Var pick(Var a, int i) {
    const Mat& A = value(a);
    require_shape(A.cols() == 1, "pick: expects a column vector");
    require(i >= 0 && i < A.rows(), "pick: index out of bounds");
    Mat out(1, 1);
    out(0, 0) = A(i, 0);
    return unary(a, std::move(out), [i](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad(i, 0) += g(0, 0);
    });
  }

  Var sum_all(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    return unary(a, std::move(out), [](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad.array() += g(0, 0);
    });
  }

  // Mean over the k rows of a k x d matrix, as a d x 1 column.
  Var mean_rows_as_col(Var a) {
    const Mat& A = value(a);
    const double inv = 1.0 / static_cast<double>(A.rows());
    Mat out = A.colwise().mean().transpose();
    return unary(a, std::move(out), [inv](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad.rowwise() += (g.col(0) * inv).transpose();
    });
  }

  // Mean over columns (global average pool over cells), r x c -> r x 1.
  Var mean_cols(Var a) {
    const Mat& A = value(a);
    const double inv = 1.0 / static_cast<double>(A.cols());
    Mat out = A.rowwise().mean();
    return unary(a, std::move(out), [inv](Tape& t, const Mat& g, Var a) {
      t.nodes_[a.id].grad.colwise() += g.col(0) * inv;
    });
  }

  Var dot(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require_shape(A.cols() == 1 && B.cols() == 1 && A.rows() == B.rows(),
                  "dot: expects two equal-length columns");
    Mat out(1, 1);
    out(0, 0) = A.col(0).dot(B.col(0));
    return binary(a, b, std::move(out), [](Tape& t, const Mat& g, Var a, Var b) {
      if (t.needs_grad(a)) t.nodes_[a.id].grad += g(0, 0) * t.value(b);
      if (t.needs_grad(b)) t.nodes_[b.id].grad += g(0, 0) * t.value(a);
    });
  }

  // ---- spatial ops (activations as C x (H*W), cell index y*W + x) ----

  // 3x3 patches with zero padding 1: C x (H*W) -> (9*C) x (H*W).
  // Output row c*9 + ((dy+1)*3 + (dx+1)) holds channel c shifted by (dy,dx).
  Var im2col3x3(Var a, int h, int w) {
    const Mat& A = value(a);
    require_shape(A.cols() == static_cast<Eigen::Index>(h) * w, "im2col3x3: bad spatial size");
    const int c = static_cast<int>(A.rows());
    Mat out = Mat::Zero(9 * c, static_cast<Eigen::Index>(h) * w);
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int kk = (dy + 1) * 3 + (dx + 1);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + dx;
            if (sx < 0 || sx >= w) continue;
            const int dst = y * w + x;
            const int src = sy * w + sx;
            for (int ch = 0; ch < c; ++ch) out(ch * 9 + kk, dst) = A(ch, src);
          }
        }
      }
    }
    return unary(a, std::move(out), [h, w, c](Tape& t, const Mat& g, Var a) {
      Mat& da = t.nodes_[a.id].grad;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int kk = (dy + 1) * 3 + (dx + 1);
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            for (int x = 0; x < w; ++x) {
              const int sx = x + dx;
              if (sx < 0 || sx >= w) continue;
              const int dst = y * w + x;
              const int src = sy * w + sx;
              for (int ch = 0; ch < c; ++ch) da(ch, src) += g(ch * 9 + kk, dst);
            }
          }
        }
      }
    });
  }

  // 2x2 average pooling: C x (H*W) -> C x (H/2 * W/2). H and W must be even.
  Var avgpool2(Var a, int h, int w) {
    const Mat& A = value(a);
    require_shape(h % 2 == 0 && w % 2 == 0, "avgpool2: odd spatial size");
    require_shape(A.cols() == static_cast<Eigen::Index>(h) * w, "avgpool2: bad spatial size");
    const int c = static_cast<int>(A.rows());
    const int oh = h / 2, ow = w / 2;
    Mat out(c, static_cast<Eigen::Index>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const int o = y * ow + x;
        const int s = 2 * y * w + 2 * x;
        out.col(o) = 0.25 * (A.col(s) + A.col(s + 1) + A.col(s + w) + A.col(s + w + 1));
      }
    return unary(a, std::move(out), [h, w, c, oh, ow](Tape& t, const Mat& g, Var a) {
      (void)c;
      Mat& da = t.nodes_[a.id].grad;
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const int o = y * ow + x;
          const int s = 2 * y * w + 2 * x;
          const Vec q = 0.25 * g.col(o);
          da.col(s) += q;
          da.col(s + 1) += q;
          da.col(s + w) += q;
          da.col(s + w + 1) += q;
        }
      (void)h;
    });
  }

  // ---- fused losses ----

  // Mean over classes of per-class binary cross-entropy against constant
  // targets, computed from logits in the numerically stable form.
  Var bce_with_logits_mean(Var logits, const Vec& targets) {
    const Mat& x = value(logits);
    require_shape(x.cols() == 1 && x.rows() == targets.size(),
                  "bce_with_logits_mean: shape mismatch");
    const int n = static_cast<int>(targets.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double xi = x(i, 0);
      loss += std::max(xi, 0.0) - xi * targets(i) + std::log1p(std::exp(-std::abs(xi)));
    }
    Mat out(1, 1);
    out(0, 0) = loss / n;
    Vec y = targets;
    return unary(logits, std::move(out), [y, n](Tape& t, const Mat& g, Var a) {
      const Mat& x = t.value(a);
      Mat& da = t.nodes_[a.id].grad;
      const double s = g(0, 0) / n;
      for (int i = 0; i < n; ++i) da(i, 0) += s * (1.0 / (1.0 + std::exp(-x(i, 0))) - y(i));
    });
  }

  // -sum_i target_i * log(max(pred_i, eps)) with a constant target
  // distribution. The clamp floor has zero slope.
  Var cross_entropy_const(Var pred, const Vec& target, double eps) {
    const Mat& p = value(pred);
    require_shape(p.cols() == 1 && p.rows() == target.size(),
                  "cross_entropy_const: length mismatch");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < target.size(); ++i)
      loss -= target(i) * std::log(std::max(p(i, 0), eps));
    Mat out(1, 1);
    out(0, 0) = loss;
    Vec tgt = target;
    return unary(pred, std::move(out), [tgt, eps](Tape& t, const Mat& g, Var a) {
      const Mat& p = t.value(a);
      Mat& da = t.nodes_[a.id].grad;
      for (Eigen::Index i = 0; i < tgt.size(); ++i)
        if (p(i, 0) > eps) da(i, 0) -= g(0, 0) * tgt(i) / p(i, 0);
    });
  }

  // ---- backward ----

  void backward(Var loss) {
    Mat& l = nodes_[check(loss)].value;
    require_shape(l.rows() == 1 && l.cols() == 1, "backward: loss must be scalar");
    for (Node& n : nodes_) {
      if (n.needs_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    require(nodes_[loss.id].needs_grad, "backward: loss does not depend on any gradient leaf");
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      if (nodes_[i].back && nodes_[i].needs_grad) nodes_[i].back(*this);
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };

  int check(Var v) const {
    require(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid tape var");
    return v.id;
  }

  bool same_shape(Var a, Var b) const {
    return value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols();
  }

  Var push(Mat value, bool needs_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  Var unary(Var a, Mat out, F df) {
    if (!needs_grad(a)) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [a, r, df](Tape& t) { df(t, t.nodes_[r.id].grad, a); };
    return r;
  }

  // Unary op whose backward uses the output value (tanh, sigmoid, softmax).
  template <typename F>
  Var unary_with_out(Var a, Mat out, F df) {
    if (!needs_grad(a)) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [a, r, df](Tape& t) {
      df(t, t.nodes_[r.id].grad, t.nodes_[r.id].value, a);
    };
    return r;
  }

  template <typename F>
  Var binary(Var a, Var b, Mat out, F df) {
    if (!needs_grad(a) && !needs_grad(b)) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [a, b, r, df](Tape& t) { df(t, t.nodes_[r.id].grad, a, b); };
    return r;
  }

  std::vector<Node> nodes_;
};

// Named view of a model parameter matrix; the unit every optimizer,
// checkpoint, and gradient check iterates over.
struct NamedParam {
  std::string name;
  Mat* mat;
};

// Per-tape binding of a parameter set: one leaf per matrix.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(Tape& tape, const std::vector<NamedParam>& params, bool needs_grad) {
    bind(tape, params, [needs_grad](const NamedParam&) { return needs_grad; });
  }
  template <typename Pred>
  BoundParams(Tape& tape, const std::vector<NamedParam>& params, Pred trainable) {
    bind(tape, params, trainable);
  }

  Var operator[](const Mat& m) const {
    auto it = vars_.find(&m);
    require(it != vars_.end(), "BoundParams: matrix not bound");
    return it->second;
  }

  const std::vector<std::pair<const Mat*, Var>>& entries() const { return order_; }

 private:
  template <typename Pred>
  void bind(Tape& tape, const std::vector<NamedParam>& params, Pred trainable) {
    for (const NamedParam& p : params) {
      Var v = tape.leaf(*p.mat, trainable(p));
      vars_.emplace(p.mat, v);
      order_.emplace_back(p.mat, v);
    }
  }

  std::unordered_map<const Mat*, Var> vars_;
  std::vector<std::pair<const Mat*, Var>> order_;
};

}  // namespace capalign
