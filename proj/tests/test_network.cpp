#include "doctest.h"
#include "ezm/network.hpp"
#include "test_util.hpp"

using namespace ezm;
using ezm::testutil::all_close;
using ezm::testutil::fd_gradient;

TEST_SUITE("network") {

TEST_CASE("builder tracks widths and registers parameters") {
  NetworkSpec net("f", 10);
  net.linear(16).layer_norm().tanh().residual(2).linear(7, /*zero_init=*/true);
  CHECK(net.input_width() == 10);
  CHECK(net.output_width() == 7);

  ParameterStore store;
  Rng rng(1);
  net.init_params(store, rng);
  CHECK(store.has("f.0.W"));
  CHECK(store.get("f.0.W").rows() == 16);
  CHECK(store.get("f.0.W").cols() == 10);
  CHECK(store.has("f.1.ln_g"));
  CHECK(store.has("f.3.blk.0.W"));  // first residual block body
  CHECK(store.has("f.4.blk.3.W"));  // second residual block body
  CHECK(store.get("f.5.W").isZero(0.0));
  CHECK(store.get("f.5.b").isZero(0.0));
}

TEST_CASE("uniform fan-in init stays within bounds") {
  NetworkSpec net("g", 64);
  net.linear(32);
  ParameterStore store;
  Rng rng(2);
  net.init_params(store, rng);
  const Mat& w = store.get("g.0.W");
  const double bound = 1.0 / 8.0;
  CHECK(w.maxCoeff() <= bound);
  CHECK(w.minCoeff() >= -bound);
  CHECK(w.array().abs().mean() > bound * 0.3);  // actually spread out
}

TEST_CASE("zero-init head keeps logits at exactly zero through norm layers") {
  NetworkSpec net("h", 8);
  net.linear(12).batch_norm().relu().dropout(0.3).linear(5, true);
  ParameterStore store;
  Rng rng(3);
  net.init_params(store, rng);
  ad::Tape t;
  ParamContext pc(t, store);
  Rng drop_rng(7);
  StatsUpdates ups;
  ForwardOptions opt;
  opt.train = true;
  opt.rng = &drop_rng;
  opt.stats = &ups;
  ad::Var out = net.forward(pc, t.leaf(rng.gaussian_mat(8, 6)), opt);
  CHECK(out.value().isZero(0.0));
  REQUIRE(ups.size() == 2);
  CHECK(ups[0].name == "h.1.bn_mean");
  CHECK(ups[1].name == "h.1.bn_var");
}

TEST_CASE("end-to-end gradient through a full stack passes finite differences") {
  NetworkSpec net("n", 6);
  net.linear(9).layer_norm().tanh().residual(1).batch_norm().relu().dropout(0.2).linear(4);
  ParameterStore store;
  Rng rng(5);
  net.init_params(store, rng);
  Mat x0 = rng.gaussian_mat(6, 5);
  Mat proj = rng.gaussian_mat(4, 5);

  auto eval = [&](const ParameterStore& s, const Mat& xv) {
    ad::Tape t;
    ParamContext pc(t, s);
    Rng drop_rng(99);  // same mask every evaluation
    ForwardOptions opt;
    opt.train = true;
    opt.rng = &drop_rng;
    ad::Var out = net.forward(pc, t.leaf(xv, true), opt);
    return (out.value().array() * proj.array()).sum();
  };

  ad::Tape t;
  ParamContext pc(t, store);
  Rng drop_rng(99);
  ForwardOptions opt;
  opt.train = true;
  opt.rng = &drop_rng;
  ad::Var x = t.leaf(x0, true);
  ad::Var out = net.forward(pc, x, opt);
  t.backward(ad::sum_all(ad::cmul(out, proj)));

  CHECK(all_close(t.grad_of(x),
                  fd_gradient([&](const Mat& m) { return eval(store, m); }, x0),
                  2e-5, 1e-6));

  GradientStore grads = pc.collect_gradients();
  int checked = 0;
  for (const std::string name : {"n.0.W", "n.1.ln_g", "n.3.blk.0.W", "n.4.bn_g", "n.7.b"}) {
    REQUIRE(grads.count(name) == 1);
    auto f = [&](const Mat& m) {
      ParameterStore s2 = store;
      s2.mutable_value(name) = m;
      return eval(s2, x0);
    };
    CHECK(all_close(grads.at(name), fd_gradient(f, store.get(name)), 2e-5, 1e-6));
    ++checked;
  }
  CHECK(checked == 5);
}

TEST_CASE("train and eval batch-norm paths differ once stats drift") {
  NetworkSpec net("b", 4);
  net.linear(6).batch_norm().relu();
  ParameterStore store;
  Rng rng(11);
  net.init_params(store, rng);
  store.mutable_value("b.1.bn_mean") = Mat::Constant(6, 1, 0.5);
  store.mutable_value("b.1.bn_var") = Mat::Constant(6, 1, 2.0);
  Mat x0 = rng.gaussian_mat(4, 8);

  ad::Tape t(false);
  ParamContext pc(t, store);
  ForwardOptions train_opt;
  train_opt.train = true;
  ForwardOptions eval_opt;
  ad::Var train_out = net.forward(pc, t.leaf(x0), train_opt);
  ad::Var eval_out = net.forward(pc, t.leaf(x0), eval_opt);
  CHECK(!all_close(train_out.value(), eval_out.value(), 1e-3, 1e-3));
}

TEST_CASE("running stats update with momentum") {
  ParameterStore store;
  store.create("x.bn_mean", Mat::Zero(2, 1), false);
  StatsUpdates ups{{"x.bn_mean", Mat::Ones(2, 1)}};
  apply_stats_updates(store, ups, 0.1);
  CHECK(store.get("x.bn_mean")(0, 0) == doctest::Approx(0.1).epsilon(1e-12));
  apply_stats_updates(store, ups, 0.1);
  CHECK(store.get("x.bn_mean")(0, 0) == doctest::Approx(0.19).epsilon(1e-12));
}

TEST_CASE("non-finite layer output raises an error naming the layer") {
  NetworkSpec net("bad", 2);
  net.linear(2).relu();
  ParameterStore store;
  Rng rng(13);
  net.init_params(store, rng);
  store.mutable_value("bad.0.W")(0, 0) = std::nan("");
  ad::Tape t;
  ParamContext pc(t, store);
  ForwardOptions opt;
  try {
    net.forward(pc, t.leaf(Mat::Ones(2, 1)), opt);
    CHECK(false);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("bad.0") != std::string::npos);
  }
}

}  // TEST_SUITE
