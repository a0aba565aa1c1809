#pragma once

#include <string>
#include <vector>

#include "ezm/params.hpp"
#include "ezm/tape.hpp"

namespace ezm {

// Declarative MLP description. Widths are tracked by the builder so layers
// only state their output size. Parameters are registered/looked up under
// "<net>.<layer>.<slot>" names (residual blocks nest as ".blk<j>.<k>.").
struct LayerSpec {
  enum class Kind { Linear, LayerNorm, BatchNorm, Tanh, Relu, Dropout, Residual };
  Kind kind = Kind::Linear;
  int in = 0;
  int out = 0;
  double rate = 0.0;       // dropout
  bool zero_init = false;  // linear
  std::vector<LayerSpec> body;  // residual block body
};

struct ForwardOptions {
  bool train = false;          // batch-norm batch stats + dropout active
  Rng* rng = nullptr;          // required when train and dropout present
  StatsUpdates* stats = nullptr;  // batch-norm running-stat updates out
  bool check_finite = true;    // per-layer non-finite detection
};

class NetworkSpec {
 public:
  NetworkSpec() = default;
  NetworkSpec(std::string name, int input) : name_(std::move(name)), width_(input), input_(input) {}

  NetworkSpec& linear(int out, bool zero_init = false);
  NetworkSpec& layer_norm();
  NetworkSpec& batch_norm();
  NetworkSpec& tanh();
  NetworkSpec& relu();
  NetworkSpec& dropout(double rate);
  // n pre-norm residual blocks at the current width:
  // x + Linear(Relu(LayerNorm(Linear(x))))
  NetworkSpec& residual(int n);

  const std::string& name() const { return name_; }
  int input_width() const { return input_; }
  int output_width() const { return width_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  // Registers all parameters into the store (uniform fan-in init; zero-init
  // linears get zero weights and biases; norms get gamma=1, beta=0 and, for
  // batch norm, non-trainable running mean=0 / var=1).
  void init_params(ParameterStore& store, Rng& rng) const;

  // Builds the forward graph on the tape behind `pc`.
  ad::Var forward(ParamContext& pc, ad::Var x, const ForwardOptions& opt) const;

 private:
  std::string name_;
  int width_ = 0;
  int input_ = 0;
  std::vector<LayerSpec> layers_;
};

}  // namespace ezm
