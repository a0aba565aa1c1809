#include "ezm/tape.hpp"

#include <cmath>

namespace ezm::ad {

namespace {

void check_same_tape(const Var& a, const Var& b, const char* op) {
  require(a.valid() && b.valid() && a.tape == b.tape,
          std::string(op) + ": vars must come from the same tape");
}

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

}  // namespace

Var Tape::leaf(Mat value, bool needs_grad) {
  return make(std::move(value), needs_grad, nullptr);
}

Var Tape::make(Mat value, bool ng, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = ng && recording_;
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

void Tape::backward(const Var& loss) {
  require(loss.valid() && loss.tape == this, "backward: foreign var");
  const Mat& lv = value(loss.id);
  require(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be 1x1");
  grad(loss.id)(0, 0) += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad_live && n.back) n.back(*this);
  }
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  Tape& t = *a.tape;
  check_same_shape(a.value(), b.value(), "add");
  bool ng = t.recording() && (t.needs_grad(a.id) || t.needs_grad(b.id));
  int ai = a.id, bi = b.id, oid = int(t.size());
  return t.make(a.value() + b.value(), ng, [ai, bi, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(ai)) t.grad(ai) += g;
    if (t.needs_grad(bi)) t.grad(bi) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  check_same_shape(a.value(), b.value(), "sub");
  bool ng = t.recording() && (t.needs_grad(a.id) || t.needs_grad(b.id));
  int ai = a.id, bi = b.id, oid = int(t.size());
  return t.make(a.value() - b.value(), ng, [ai, bi, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(ai)) t.grad(ai) += g;
    if (t.needs_grad(bi)) t.grad(bi) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  check_same_shape(a.value(), b.value(), "mul");
  bool ng = t.recording() && (t.needs_grad(a.id) || t.needs_grad(b.id));
  int ai = a.id, bi = b.id, oid = int(t.size());
  return t.make(a.value().cwiseProduct(b.value()), ng, [ai, bi, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(ai)) t.grad(ai) += g.cwiseProduct(t.value(bi));
    if (t.needs_grad(bi)) t.grad(bi) += g.cwiseProduct(t.value(ai));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value() * s, ng, [ai, oid, s](Tape& t) {
    t.grad(ai) += s * t.grad(oid);
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().array() + s, ng, [ai, oid](Tape& t) {
    t.grad(ai) += t.grad(oid);
  });
}

Var cmul(Var a, const Mat& c) {
  Tape& t = *a.tape;
  check_same_shape(a.value(), c, "cmul");
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().cwiseProduct(c), ng, [ai, oid, c](Tape& t) {
    t.grad(ai) += t.grad(oid).cwiseProduct(c);
  });
}

Var add_const(Var a, const Mat& c) {
  Tape& t = *a.tape;
  check_same_shape(a.value(), c, "add_const");
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value() + c, ng, [ai, oid](Tape& t) {
    t.grad(ai) += t.grad(oid);
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().cwiseMax(0.0), ng, [ai, oid](Tape& t) {
    const Mat mask = (t.value(ai).array() > 0.0).cast<double>();
    t.grad(ai) += t.grad(oid).cwiseProduct(mask);
  });
}

Var tanh_op(Var a) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().array().tanh(), ng, [ai, oid](Tape& t) {
    const Mat& y = t.value(oid);
    t.grad(ai) += (t.grad(oid).array() * (1.0 - y.array().square())).matrix();
  });
}

Var exp_op(Var a) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().array().exp(), ng, [ai, oid](Tape& t) {
    t.grad(ai) += t.grad(oid).cwiseProduct(t.value(oid));
  });
}

Var log_op(Var a) {
  Tape& t = *a.tape;
  if ((a.value().array() <= 0.0).any())
    throw NumericError("log_op: non-positive input");
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value().array().log(), ng, [ai, oid](Tape& t) {
    t.grad(ai) += t.grad(oid).cwiseQuotient(t.value(ai));
  });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  if (a.value().cols() != b.value().rows())
    throw ShapeError("matmul: inner dimensions disagree");
  bool ng = t.recording() && (t.needs_grad(a.id) || t.needs_grad(b.id));
  int ai = a.id, bi = b.id, oid = int(t.size());
  return t.make(a.value() * b.value(), ng, [ai, bi, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(ai)) t.grad(ai).noalias() += g * t.value(bi).transpose();
    if (t.needs_grad(bi)) t.grad(bi).noalias() += t.value(ai).transpose() * g;
  });
}

Var linear(Var w, Var x, Var b) {
  check_same_tape(w, x, "linear");
  check_same_tape(w, b, "linear");
  Tape& t = *w.tape;
  const Mat& wv = w.value();
  const Mat& xv = x.value();
  const Mat& bv = b.value();
  if (wv.cols() != xv.rows() || bv.rows() != wv.rows() || bv.cols() != 1)
    throw ShapeError("linear: W " + std::to_string(wv.rows()) + "x" +
                     std::to_string(wv.cols()) + ", x " +
                     std::to_string(xv.rows()) + "x" + std::to_string(xv.cols()) +
                     ", b " + std::to_string(bv.rows()) + "x" +
                     std::to_string(bv.cols()));
  Mat val = wv * xv;
  val.colwise() += Vec(bv.col(0));
  bool ng = t.recording() &&
            (t.needs_grad(w.id) || t.needs_grad(x.id) || t.needs_grad(b.id));
  int wi = w.id, xi = x.id, bi = b.id, oid = int(t.size());
  return t.make(std::move(val), ng, [wi, xi, bi, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(wi)) t.grad(wi).noalias() += g * t.value(xi).transpose();
    if (t.needs_grad(xi)) t.grad(xi).noalias() += t.value(wi).transpose() * g;
    if (t.needs_grad(bi)) t.grad(bi) += g.rowwise().sum();
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Mat val(1, 1);
  val(0, 0) = a.value().sum();
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ai, oid](Tape& t) {
    t.grad(ai).array() += t.grad(oid)(0, 0);
  });
}

Var mean_all(Var a) {
  Tape& t = *a.tape;
  const double n = double(a.value().size());
  Mat val(1, 1);
  val(0, 0) = a.value().mean();
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ai, oid, n](Tape& t) {
    t.grad(ai).array() += t.grad(oid)(0, 0) / n;
  });
}

Var colwise_sum(Var a) {
  Tape& t = *a.tape;
  Mat val = a.value().colwise().sum();
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ai, oid](Tape& t) {
    t.grad(ai).rowwise() += RowVec(t.grad(oid).row(0));
  });
}

Var weighted_sum(Var a, const RowVec& w) {
  Tape& t = *a.tape;
  const Mat& av = a.value();
  if (av.rows() != 1 || av.cols() != w.cols())
    throw ShapeError("weighted_sum: expects 1x" + std::to_string(w.cols()));
  Mat val(1, 1);
  val(0, 0) = (av.row(0).array() * w.array()).sum();
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ai, oid, w](Tape& t) {
    t.grad(ai) += t.grad(oid)(0, 0) * w;
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].value().cols();
  bool ng = false;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p, "concat_rows");
    require(p.value().cols() == cols, "concat_rows: column counts differ");
    rows += p.value().rows();
    ng = ng || t.needs_grad(p.id);
  }
  Mat val(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs, lens;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    const Eigen::Index n = p.value().rows();
    val.middleRows(off, n) = p.value();
    ids.push_back(p.id);
    offs.push_back(off);
    lens.push_back(n);
    off += n;
  }
  ng = ng && t.recording();
  int oid = int(t.size());
  return t.make(std::move(val), ng, [ids, offs, lens, oid](Tape& t) {
    const Mat& g = t.grad(oid);
    for (size_t i = 0; i < ids.size(); ++i)
      if (t.needs_grad(ids[i])) t.grad(ids[i]) += g.middleRows(offs[i], lens[i]);
  });
}

Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
  Tape& t = *a.tape;
  require(r0 >= 0 && n >= 0 && r0 + n <= a.value().rows(),
          "slice_rows: out of range");
  Mat val = a.value().middleRows(r0, n);
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ai, oid, r0, n](Tape& t) {
    t.grad(ai).middleRows(r0, n) += t.grad(oid);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x, gamma, "layer_norm");
  check_same_tape(x, beta, "layer_norm");
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const Eigen::Index C = xv.rows(), B = xv.cols();
  if (gamma.value().rows() != C || gamma.value().cols() != 1 ||
      beta.value().rows() != C || beta.value().cols() != 1)
    throw ShapeError("layer_norm: gamma/beta must be " + std::to_string(C) + "x1");
  RowVec mu = xv.colwise().mean();
  Mat centered = xv.rowwise() - mu;
  RowVec inv_std =
      (centered.array().square().colwise().mean() + eps).rsqrt();
  Mat xhat = centered.array().rowwise() * inv_std.array();
  Mat val = xhat.array().colwise() * gamma.value().col(0).array();
  val.colwise() += Vec(beta.value().col(0));
  bool ng = t.recording() && (t.needs_grad(x.id) || t.needs_grad(gamma.id) ||
                              t.needs_grad(beta.id));
  int xi = x.id, gi = gamma.id, bi = beta.id, oid = int(t.size());
  return t.make(std::move(val), ng,
                [xi, gi, bi, oid, xhat, inv_std, C, B](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(gi)) t.grad(gi) += g.cwiseProduct(xhat).rowwise().sum();
    if (t.needs_grad(bi)) t.grad(bi) += g.rowwise().sum();
    if (t.needs_grad(xi)) {
      Mat dxh = g.array().colwise() * t.value(gi).col(0).array();
      RowVec sums = dxh.colwise().sum();
      RowVec dots = (dxh.array() * xhat.array()).colwise().sum();
      Mat dx = double(C) * dxh;
      dx.rowwise() -= sums;
      dx -= (xhat.array().rowwise() * dots.array()).matrix();
      dx.array().rowwise() *= inv_std.array() / double(C);
      t.grad(xi) += dx;
    }
  });
}

Var batch_norm_train(Var x, Var gamma, Var beta, Mat* batch_mean, Mat* batch_var,
                     double eps) {
  check_same_tape(x, gamma, "batch_norm");
  check_same_tape(x, beta, "batch_norm");
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const Eigen::Index C = xv.rows(), B = xv.cols();
  require(B >= 1, "batch_norm_train: empty batch");
  if (gamma.value().rows() != C || beta.value().rows() != C)
    throw ShapeError("batch_norm: gamma/beta must be " + std::to_string(C) + "x1");
  Vec mu = xv.rowwise().mean();
  Mat centered = xv.colwise() - mu;
  Vec var = centered.array().square().rowwise().mean();
  Vec inv_std = (var.array() + eps).rsqrt();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat val = xhat.array().colwise() * gamma.value().col(0).array();
  val.colwise() += Vec(beta.value().col(0));
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  bool ng = t.recording() && (t.needs_grad(x.id) || t.needs_grad(gamma.id) ||
                              t.needs_grad(beta.id));
  int xi = x.id, gi = gamma.id, bi = beta.id, oid = int(t.size());
  return t.make(std::move(val), ng, [xi, gi, bi, oid, xhat, inv_std, B](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(gi)) t.grad(gi) += g.cwiseProduct(xhat).rowwise().sum();
    if (t.needs_grad(bi)) t.grad(bi) += g.rowwise().sum();
    if (t.needs_grad(xi)) {
      Mat dxh = g.array().colwise() * t.value(gi).col(0).array();
      Vec sums = dxh.rowwise().sum();
      Vec dots = (dxh.array() * xhat.array()).rowwise().sum();
      Mat dx = double(B) * dxh;
      dx.colwise() -= sums;
      dx -= (xhat.array().colwise() * dots.array()).matrix();
      dx.array().colwise() *= inv_std.array() / double(B);
      t.grad(xi) += dx;
    }
  });
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Mat& run_mean,
                    const Mat& run_var, double eps) {
  check_same_tape(x, gamma, "batch_norm");
  check_same_tape(x, beta, "batch_norm");
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const Eigen::Index C = xv.rows();
  if (run_mean.rows() != C || run_var.rows() != C)
    throw ShapeError("batch_norm_eval: running stats must be " +
                     std::to_string(C) + "x1");
  Vec mu = run_mean.col(0);
  Vec inv_std = (run_var.col(0).array() + eps).rsqrt();
  Mat xhat = (xv.colwise() - mu).array().colwise() * inv_std.array();
  Mat val = xhat.array().colwise() * gamma.value().col(0).array();
  val.colwise() += Vec(beta.value().col(0));
  bool ng = t.recording() && (t.needs_grad(x.id) || t.needs_grad(gamma.id) ||
                              t.needs_grad(beta.id));
  int xi = x.id, gi = gamma.id, bi = beta.id, oid = int(t.size());
  return t.make(std::move(val), ng, [xi, gi, bi, oid, mu, inv_std](Tape& t) {
    const Mat& g = t.grad(oid);
    if (t.needs_grad(gi)) {
      Mat xhat = (t.value(xi).colwise() - mu).array().colwise() * inv_std.array();
      t.grad(gi) += g.cwiseProduct(xhat).rowwise().sum();
    }
    if (t.needs_grad(bi)) t.grad(bi) += g.rowwise().sum();
    if (t.needs_grad(xi)) {
      Vec gs = t.value(gi).col(0).cwiseProduct(inv_std);
      t.grad(xi) += (g.array().colwise() * gs.array()).matrix();
    }
  });
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  require(rate < 1.0, "dropout: rate must be < 1");
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const double keep = 1.0 - rate;
  Mat mask(xv.rows(), xv.cols());
  for (Eigen::Index j = 0; j < xv.cols(); ++j)
    for (Eigen::Index i = 0; i < xv.rows(); ++i)
      mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
  bool ng = t.recording() && t.needs_grad(x.id);
  int xi = x.id, oid = int(t.size());
  return t.make(xv.cwiseProduct(mask), ng, [xi, oid, mask](Tape& t) {
    t.grad(xi) += t.grad(oid).cwiseProduct(mask);
  });
}

Var softmax_ce(Var logits, const Mat& targets) {
  Tape& t = *logits.tape;
  const Mat& lv = logits.value();
  check_same_shape(lv, targets, "softmax_ce");
  for (Eigen::Index j = 0; j < targets.cols(); ++j) {
    const double s = targets.col(j).sum();
    if (std::abs(s - 1.0) > 1e-6 || (targets.col(j).array() < -1e-12).any())
      throw ContractError("softmax_ce: target column " + std::to_string(j) +
                          " is not a distribution (sum=" + std::to_string(s) + ")");
  }
  RowVec mx = lv.colwise().maxCoeff();
  Mat shifted = lv.rowwise() - mx;
  RowVec lse = shifted.array().exp().colwise().sum().log() + mx.array();
  Mat p = (lv.rowwise() - lse).array().exp();
  Mat val = (lse.array() - (targets.array() * lv.array()).colwise().sum()).matrix();
  bool ng = t.recording() && t.needs_grad(logits.id);
  int li = logits.id, oid = int(t.size());
  return t.make(std::move(val), ng, [li, oid, p, targets](Tape& t) {
    const Mat& g = t.grad(oid);
    t.grad(li) += ((p - targets).array().rowwise() * g.row(0).array()).matrix();
  });
}

Var cosine_cols(Var a, Var b, int* degenerate_count) {
  check_same_tape(a, b, "cosine_cols");
  Tape& t = *a.tape;
  const Mat& av = a.value();
  const Mat& bv = b.value();
  check_same_shape(av, bv, "cosine_cols");
  const Eigen::Index B = av.cols();
  RowVec na = av.colwise().norm();
  RowVec nb = bv.colwise().norm();
  RowVec cosv = RowVec::Zero(B);
  RowVec valid = RowVec::Zero(B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const double denom = na(j) * nb(j);
    if (denom > 1e-12) {
      cosv(j) = av.col(j).dot(bv.col(j)) / denom;
      valid(j) = 1.0;
    } else if (degenerate_count) {
      ++*degenerate_count;
    }
  }
  bool ng = t.recording() && (t.needs_grad(a.id) || t.needs_grad(b.id));
  int ai = a.id, bi = b.id, oid = int(t.size());
  return t.make(cosv, ng, [ai, bi, oid, na, nb, cosv, valid](Tape& t) {
    const Mat& g = t.grad(oid);
    const Mat& av = t.value(ai);
    const Mat& bv = t.value(bi);
    for (Eigen::Index j = 0; j < av.cols(); ++j) {
      if (valid(j) == 0.0) continue;
      const double gj = g(0, j);
      if (gj == 0.0) continue;
      const double inv = 1.0 / (na(j) * nb(j));
      if (t.needs_grad(ai))
        t.grad(ai).col(j) +=
            gj * (bv.col(j) * inv - cosv(j) * av.col(j) / (na(j) * na(j)));
      if (t.needs_grad(bi))
        t.grad(bi).col(j) +=
            gj * (av.col(j) * inv - cosv(j) * bv.col(j) / (nb(j) * nb(j)));
    }
  });
}

Var stop_gradient(Var a) {
  Tape& t = *a.tape;
  return t.make(a.value(), false, nullptr);
}

Var scale_gradient(Var a, double s) {
  Tape& t = *a.tape;
  bool ng = t.recording() && t.needs_grad(a.id);
  int ai = a.id, oid = int(t.size());
  return t.make(a.value(), ng, [ai, oid, s](Tape& t) {
    t.grad(ai) += s * t.grad(oid);
  });
}

Var gather_cols(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Mat& tv = table.value();
  Mat val(tv.rows(), Eigen::Index(ids.size()));
  for (size_t j = 0; j < ids.size(); ++j) {
    require(ids[j] >= 0 && ids[j] < tv.cols(), "gather_cols: id out of range");
    val.col(Eigen::Index(j)) = tv.col(ids[j]);
  }
  bool ng = t.recording() && t.needs_grad(table.id);
  int ti = table.id, oid = int(t.size());
  return t.make(std::move(val), ng, [ti, oid, ids](Tape& t) {
    const Mat& g = t.grad(oid);
    Mat& gt = t.grad(ti);
    for (size_t j = 0; j < ids.size(); ++j)
      gt.col(ids[j]) += g.col(Eigen::Index(j));
  });
}

}  // namespace ezm::ad
