#pragma once

// Reverse-mode autodiff over Eigen matrices.
//
// A Tape owns a flat list of nodes appended in evaluation order; ids are
// therefore already topologically sorted and backward() is a single reverse
// sweep. Every node stores its value (rows = features, cols = batch); nodes
// that need gradients also store a backward closure. With recording off, or
// below a stop_gradient, no closures are kept so inference pays only for the
// forward values.

#include <functional>
#include <vector>

#include "ezm/common.hpp"

namespace ezm::ad {

using ezm::Mat;
using ezm::Rng;
using ezm::Vec;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  Var leaf(Mat value, bool needs_grad = false);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  // Runs closures from `loss` (must be 1x1) backwards. Gradients accumulate;
  // call once per built graph.
  void backward(const Var& loss);

  const Mat& value(int id) const { return nodes_[size_t(id)].value; }
  bool needs_grad(int id) const { return nodes_[size_t(id)].needs_grad; }

  // Gradient accumulator, zero-initialised on first touch.
  Mat& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad_live) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.grad_live = true;
    }
    return n.grad;
  }
  bool grad_live(int id) const { return nodes_[size_t(id)].grad_live; }
  Mat grad_of(const Var& v) const {
    const Node& n = nodes_[size_t(v.id)];
    if (n.grad_live) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }
  // Drops every node with id >= keep; lets long-lived evaluators re-use
  // leaf bindings across calls.
  void truncate(size_t keep) {
    if (nodes_.size() > keep) nodes_.resize(keep);
  }

  // Op implementations call this. `back` may be empty when ng is false.
  Var make(Mat value, bool ng, std::function<void(Tape&)> back);

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&)> back;
    bool needs_grad = false;
    bool grad_live = false;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

inline const Mat& Var::value() const { return tape->value(id); }
inline double Var::scalar() const {
  const Mat& m = value();
  require(m.rows() == 1 && m.cols() == 1, "Var::scalar on non-scalar");
  return m(0, 0);
}

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var cmul(Var a, const Mat& c);     // elementwise with constant
Var add_const(Var a, const Mat& c);
Var relu(Var a);
Var tanh_op(Var a);
Var exp_op(Var a);
Var log_op(Var a);  // requires strictly positive input

// ---- linear algebra ----
Var matmul(Var a, Var b);
// W (out x in) * x (in x B) + bias (out x 1) broadcast over columns
Var linear(Var w, Var x, Var b);

// ---- reductions / reshaping ----
Var sum_all(Var a);                       // -> 1x1
Var mean_all(Var a);                      // -> 1x1
Var colwise_sum(Var a);                   // (R x B) -> (1 x B)
Var weighted_sum(Var a, const RowVec& w); // (1 x B) . w -> 1x1
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n);

// ---- normalisation / regularisation ----
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Train-mode batch norm: normalises each row over the batch; writes the
// population batch statistics (column vectors) for running-average updates.
Var batch_norm_train(Var x, Var gamma, Var beta, Mat* batch_mean, Mat* batch_var,
                     double eps = 1e-5);
Var batch_norm_eval(Var x, Var gamma, Var beta, const Mat& run_mean,
                    const Mat& run_var, double eps = 1e-5);
Var dropout(Var x, double rate, Rng& rng);

// ---- losses / similarity ----
// Per-column cross-entropy between softmax(logits) and fixed target columns
// (each summing to 1): (C x B) -> (1 x B).
Var softmax_ce(Var logits, const Mat& targets);
// Per-column cosine similarity of two (C x B) matrices -> (1 x B). Columns
// with near-zero norm yield 0 with zero gradient; degenerate_count (optional)
// is incremented for each.
Var cosine_cols(Var a, Var b, int* degenerate_count = nullptr);

// ---- graph surgery ----
Var stop_gradient(Var a);
Var scale_gradient(Var a, double s);  // identity forward, scales grad
// Gathers table columns: (E x T), ids of size B -> (E x B); backward
// scatter-adds into the table.
Var gather_cols(Var table, const std::vector<int>& ids);

}  // namespace ezm::ad
