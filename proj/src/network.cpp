#include "ezm/network.hpp"

#include <cmath>

namespace ezm {

NetworkSpec& NetworkSpec::linear(int out, bool zero_init) {
  LayerSpec l;
  l.kind = LayerSpec::Kind::Linear;
  l.in = width_;
  l.out = out;
  l.zero_init = zero_init;
  layers_.push_back(l);
  width_ = out;
  return *this;
}

NetworkSpec& NetworkSpec::layer_norm() {
  LayerSpec l;
  l.kind = LayerSpec::Kind::LayerNorm;
  l.in = l.out = width_;
  layers_.push_back(l);
  return *this;
}

NetworkSpec& NetworkSpec::batch_norm() {
  LayerSpec l;
  l.kind = LayerSpec::Kind::BatchNorm;
  l.in = l.out = width_;
  layers_.push_back(l);
  return *this;
}

NetworkSpec& NetworkSpec::tanh() {
  LayerSpec l;
  l.kind = LayerSpec::Kind::Tanh;
  l.in = l.out = width_;
  layers_.push_back(l);
  return *this;
}

NetworkSpec& NetworkSpec::relu() {
  LayerSpec l;
  l.kind = LayerSpec::Kind::Relu;
  l.in = l.out = width_;
  layers_.push_back(l);
  return *this;
}

NetworkSpec& NetworkSpec::dropout(double rate) {
  LayerSpec l;
  l.kind = LayerSpec::Kind::Dropout;
  l.in = l.out = width_;
  l.rate = rate;
  layers_.push_back(l);
  return *this;
}

NetworkSpec& NetworkSpec::residual(int n) {
  for (int j = 0; j < n; ++j) {
    LayerSpec l;
    l.kind = LayerSpec::Kind::Residual;
    l.in = l.out = width_;
    LayerSpec lin1;
    lin1.kind = LayerSpec::Kind::Linear;
    lin1.in = lin1.out = width_;
    LayerSpec ln;
    ln.kind = LayerSpec::Kind::LayerNorm;
    ln.in = ln.out = width_;
    LayerSpec act;
    act.kind = LayerSpec::Kind::Relu;
    act.in = act.out = width_;
    LayerSpec lin2 = lin1;
    l.body = {lin1, ln, act, lin2};
    layers_.push_back(l);
  }
  return *this;
}

namespace {

void init_layers(const std::vector<LayerSpec>& layers, const std::string& prefix,
                 ParameterStore& store, Rng& rng) {
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string base = prefix + std::to_string(i);
    switch (l.kind) {
      case LayerSpec::Kind::Linear: {
        Mat w, b;
        if (l.zero_init) {
          w = Mat::Zero(l.out, l.in);
          b = Mat::Zero(l.out, 1);
        } else {
          const double bound = 1.0 / std::sqrt(double(l.in));
          w = rng.uniform_mat(l.out, l.in, -bound, bound);
          b = rng.uniform_mat(l.out, 1, -bound, bound);
        }
        store.create(base + ".W", std::move(w));
        store.create(base + ".b", std::move(b));
        break;
      }
      case LayerSpec::Kind::LayerNorm:
        store.create(base + ".ln_g", Mat::Ones(l.in, 1));
        store.create(base + ".ln_b", Mat::Zero(l.in, 1));
        break;
      case LayerSpec::Kind::BatchNorm:
        store.create(base + ".bn_g", Mat::Ones(l.in, 1));
        store.create(base + ".bn_b", Mat::Zero(l.in, 1));
        store.create(base + ".bn_mean", Mat::Zero(l.in, 1), /*trainable=*/false);
        store.create(base + ".bn_var", Mat::Ones(l.in, 1), /*trainable=*/false);
        break;
      case LayerSpec::Kind::Residual:
        init_layers(l.body, base + ".blk.", store, rng);
        break;
      default:
        break;
    }
  }
}

ad::Var forward_layers(const std::vector<LayerSpec>& layers,
                       const std::string& prefix, ParamContext& pc, ad::Var x,
                       const ForwardOptions& opt) {
  using namespace ad;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string base = prefix + std::to_string(i);
    switch (l.kind) {
      case LayerSpec::Kind::Linear:
        x = linear(pc[base + ".W"], x, pc[base + ".b"]);
        break;
      case LayerSpec::Kind::LayerNorm:
        x = layer_norm(x, pc[base + ".ln_g"], pc[base + ".ln_b"]);
        break;
      case LayerSpec::Kind::BatchNorm: {
        if (opt.train) {
          Mat bm, bv;
          x = batch_norm_train(x, pc[base + ".bn_g"], pc[base + ".bn_b"], &bm, &bv);
          if (opt.stats) {
            opt.stats->push_back({base + ".bn_mean", std::move(bm)});
            opt.stats->push_back({base + ".bn_var", std::move(bv)});
          }
        } else {
          x = batch_norm_eval(x, pc[base + ".bn_g"], pc[base + ".bn_b"],
                              pc.value(base + ".bn_mean"),
                              pc.value(base + ".bn_var"));
        }
        break;
      }
      case LayerSpec::Kind::Tanh:
        x = tanh_op(x);
        break;
      case LayerSpec::Kind::Relu:
        x = relu(x);
        break;
      case LayerSpec::Kind::Dropout:
        if (opt.train && l.rate > 0.0) {
          require(opt.rng != nullptr, "forward: dropout needs an rng in train mode");
          x = dropout(x, l.rate, *opt.rng);
        }
        break;
      case LayerSpec::Kind::Residual: {
        ad::Var y = forward_layers(l.body, base + ".blk.", pc, x, opt);
        x = add(x, y);
        break;
      }
    }
    if (opt.check_finite && !x.value().allFinite())
      throw NumericError("forward: non-finite output at layer " + base);
  }
  return x;
}

}  // namespace

void NetworkSpec::init_params(ParameterStore& store, Rng& rng) const {
  init_layers(layers_, name_ + ".", store, rng);
}

ad::Var NetworkSpec::forward(ParamContext& pc, ad::Var x,
                             const ForwardOptions& opt) const {
  if (x.value().rows() != input_)
    throw ShapeError("forward(" + name_ + "): input rows " +
                     std::to_string(x.value().rows()) + ", expected " +
                     std::to_string(input_));
  return forward_layers(layers_, name_ + ".", pc, x, opt);
}

}  // namespace ezm
