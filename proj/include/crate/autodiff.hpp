#pragma once

#include "crate/common.hpp"

#include <functional>
#include <numbers>

namespace crate::ad {

// Reverse-mode tape over matrix-valued nodes. Operations append a node
// holding the forward value and a closure that scatters the node's adjoint
// into its inputs. backward() walks the tape once in reverse; push order is
// a valid topological order by construction.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  int push(Mat value, BackFn back = nullptr) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  // Adjoint of a node, allocated as zeros on first touch.
  Mat& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad.size() != 0; }

  void backward(int root) {
    if (value(root).size() != 1) throw NumericError("backward: root must be a scalar node");
    grad(root)(0, 0) = 1.0;
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

inline int leaf(Tape& t, Mat v) { return t.push(std::move(v)); }

inline int add(Tape& t, int a, int b) {
  return t.push(t.value(a) + t.value(b), [a, b](Tape& t, int out) {
    t.grad(a) += t.grad(out);
    t.grad(b) += t.grad(out);
  });
}

inline int sub(Tape& t, int a, int b) {
  return t.push(t.value(a) - t.value(b), [a, b](Tape& t, int out) {
    t.grad(a) += t.grad(out);
    t.grad(b) -= t.grad(out);
  });
}

inline int scale(Tape& t, int a, Scalar s) {
  return t.push(t.value(a) * s,
                [a, s](Tape& t, int out) { t.grad(a) += s * t.grad(out); });
}

inline int add_scalar(Tape& t, int a, Scalar c) {
  return t.push((t.value(a).array() + c).matrix(),
                [a](Tape& t, int out) { t.grad(a) += t.grad(out); });
}

// A * B
inline int matmul(Tape& t, int a, int b) {
  return t.push(t.value(a) * t.value(b), [a, b](Tape& t, int out) {
    const Mat& g = t.grad(out);
    t.grad(a).noalias() += g * t.value(b).transpose();
    t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

// A^T * B
inline int matmul_tn(Tape& t, int a, int b) {
  return t.push(t.value(a).transpose() * t.value(b), [a, b](Tape& t, int out) {
    const Mat& g = t.grad(out);
    t.grad(a).noalias() += t.value(b) * g.transpose();
    t.grad(b).noalias() += t.value(a) * g;
  });
}

// A * B^T
inline int matmul_nt(Tape& t, int a, int b) {
  return t.push(t.value(a) * t.value(b).transpose(), [a, b](Tape& t, int out) {
    const Mat& g = t.grad(out);
    t.grad(a).noalias() += g * t.value(b);
    t.grad(b).noalias() += g.transpose() * t.value(a);
  });
}

// Subgradient at exactly zero is taken as zero.
inline int relu(Tape& t, int a) {
  return t.push(t.value(a).cwiseMax(0.0), [a](Tape& t, int out) {
    t.grad(a).array() += t.grad(out).array() * (t.value(a).array() > 0.0).cast<Scalar>();
  });
}

inline int gelu_op(Tape& t, int a) {
  Mat v = t.value(a).unaryExpr([](Scalar x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  });
  return t.push(std::move(v), [a](Tape& t, int out) {
    const Mat& x = t.value(a);
    Mat dgelu = x.unaryExpr([](Scalar v) {
      const Scalar phi = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      const Scalar cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      return cdf + v * phi;
    });
    t.grad(a).array() += t.grad(out).array() * dgelu.array();
  });
}

inline int row_softmax_op(Tape& t, int a) {
  const Mat& x = t.value(a);
  Mat v(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mx = x.row(i).maxCoeff();
    v.row(i) = (x.row(i).array() - mx).exp();
    v.row(i) /= v.row(i).sum();
  }
  return t.push(std::move(v), [a](Tape& t, int out) {
    const Mat& s = t.value(out);
    const Mat& g = t.grad(out);
    Mat& ga = t.grad(a);
    for (Index i = 0; i < s.rows(); ++i) {
      const Scalar dot = g.row(i).dot(s.row(i));
      ga.row(i).array() += s.row(i).array() * (g.row(i).array() - dot);
    }
  });
}

// Column-wise layer normalization with scale/shift; gamma and beta are d x 1.
inline int layer_norm_op(Tape& t, int x, int gamma, int beta, Scalar eps) {
  const Mat& z = t.value(x);
  const Scalar d = static_cast<Scalar>(z.rows());
  Mat xhat(z.rows(), z.cols());
  Vec inv(z.cols());
  for (Index j = 0; j < z.cols(); ++j) {
    const Scalar mean = z.col(j).mean();
    const Scalar var = (z.col(j).array() - mean).square().sum() / d;
    inv[j] = 1.0 / std::sqrt(var + eps);
    xhat.col(j) = (z.col(j).array() - mean) * inv[j];
  }
  Mat v = (xhat.array().colwise() * t.value(gamma).col(0).array()).matrix();
  v.array().colwise() += t.value(beta).col(0).array();
  return t.push(std::move(v),
                [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv),
                 d](Tape& t, int out) {
                  const Mat& g = t.grad(out);
                  const auto gam = t.value(gamma).col(0).array();
                  Mat gh = (g.array().colwise() * gam).matrix();  // dL/dxhat
                  Mat& gx = t.grad(x);
                  for (Index j = 0; j < g.cols(); ++j) {
                    const Scalar m1 = gh.col(j).mean();
                    const Scalar m2 = (gh.col(j).array() * xhat.col(j).array()).mean();
                    gx.col(j).array() +=
                        inv[j] * (gh.col(j).array() - m1 - xhat.col(j).array() * m2);
                  }
                  t.grad(gamma).col(0) += (g.array() * xhat.array()).rowwise().sum().matrix();
                  t.grad(beta).col(0) += g.rowwise().sum();
                });
}

inline int slice_cols(Tape& t, int a, Index j0, Index n) {
  return t.push(t.value(a).middleCols(j0, n), [a, j0, n](Tape& t, int out) {
    t.grad(a).middleCols(j0, n) += t.grad(out);
  });
}

inline int col(Tape& t, int a, Index j) { return slice_cols(t, a, j, 1); }

// [a, b] side by side.
inline int hstack2(Tape& t, int a, int b) {
  const Mat& va = t.value(a);
  const Mat& vb = t.value(b);
  Mat v(va.rows(), va.cols() + vb.cols());
  v << va, vb;
  return t.push(std::move(v), [a, b](Tape& t, int out) {
    const Index ca = t.value(a).cols();
    t.grad(a) += t.grad(out).leftCols(ca);
    t.grad(b) += t.grad(out).rightCols(t.value(b).cols());
  });
}

// Vertical concatenation of equally wide blocks.
inline int vstack(Tape& t, const std::vector<int>& parts) {
  Index rows = 0;
  for (int id : parts) rows += t.value(id).rows();
  Mat v(rows, t.value(parts.front()).cols());
  Index r = 0;
  for (int id : parts) {
    v.middleRows(r, t.value(id).rows()) = t.value(id);
    r += t.value(id).rows();
  }
  return t.push(std::move(v), [parts](Tape& t, int out) {
    Index r = 0;
    for (int id : parts) {
      const Index h = t.value(id).rows();
      t.grad(id) += t.grad(out).middleRows(r, h);
      r += h;
    }
  });
}

// Adds a d x 1 bias to every column.
inline int add_col_bias(Tape& t, int a, int bias) {
  Mat v = t.value(a);
  v.array().colwise() += t.value(bias).col(0).array();
  return t.push(std::move(v), [a, bias](Tape& t, int out) {
    t.grad(a) += t.grad(out);
    t.grad(bias).col(0) += t.grad(out).rowwise().sum();
  });
}

// Softmax cross-entropy of a C x 1 logit column against an integer label.
inline int cross_entropy_op(Tape& t, int logits, int label) {
  const Mat& l = t.value(logits);
  const Scalar mx = l.col(0).maxCoeff();
  const Scalar lse = mx + std::log((l.col(0).array() - mx).exp().sum());
  Mat v(1, 1);
  v(0, 0) = lse - l(label, 0);
  return t.push(std::move(v), [logits, label, lse](Tape& t, int out) {
    const Mat& l = t.value(logits);
    Vec softmax = (l.col(0).array() - lse).exp();
    softmax[label] -= 1.0;
    t.grad(logits).col(0) += t.grad(out)(0, 0) * softmax;
  });
}

}  // namespace crate::ad
