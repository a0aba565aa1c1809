#include "ezm/params.hpp"

#include <cstring>
#include <fstream>

namespace ezm {

StepStatus adamw_step(ParameterStore& store, const GradientStore& grads,
                      AdamState& state, const AdamConfig& cfg,
                      std::string* rejected_name) {
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) {
      if (rejected_name) *rejected_name = name;
      return StepStatus::RejectedNonFinite;
    }
  }
  const int64_t t = ++state.step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (const auto& [name, g] : grads) {
    if (!store.has(name) || !store.trainable(name))
      throw ContractError("adamw_step: gradient for non-trainable or unknown parameter " + name);
    Mat& p = store.mutable_value(name);
    if (p.rows() != g.rows() || p.cols() != g.cols())
      throw ShapeError("adamw_step: gradient shape mismatch for " + name);
    auto& mo = state.slots[name];
    if (mo.m.size() == 0) {
      mo.m = Mat::Zero(p.rows(), p.cols());
      mo.v = Mat::Zero(p.rows(), p.cols());
    }
    mo.m = cfg.beta1 * mo.m + (1.0 - cfg.beta1) * g;
    mo.v = cfg.beta2 * mo.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat mhat = mo.m / bc1;
    const Mat vhat = mo.v / bc2;
    p -= cfg.lr * ((mhat.array() / (vhat.array().sqrt() + cfg.eps)) +
                   cfg.weight_decay * p.array())
                      .matrix();
  }
  store.bump_version();
  return StepStatus::Applied;
}

void max_norm_project(ParameterStore& store, const std::string& name,
                      double max_norm) {
  Mat& m = store.mutable_value(name);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n > max_norm) m.col(j) *= max_norm / n;
  }
}

namespace {
constexpr char kMagic[8] = {'E', 'Z', 'M', 'C', 'K', 'P', 'T', '1'};

void write_i64(std::ostream& os, int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), "save_checkpoint: cannot open " + path);
  os.write(kMagic, 8);
  write_i64(os, store.version());
  write_i64(os, int64_t(store.size()));
  for (const auto& [name, e] : store.entries()) {
    write_i64(os, int64_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    const char tr = e.trainable ? 1 : 0;
    os.write(&tr, 1);
    write_i64(os, e.value.rows());
    write_i64(os, e.value.cols());
    os.write(reinterpret_cast<const char*>(e.value.data()),
             std::streamsize(sizeof(double) * size_t(e.value.size())));
  }
  require(bool(os), "save_checkpoint: write failed for " + path);
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is && std::memcmp(magic, kMagic, 8) == 0,
          "load_checkpoint: bad magic in " + path);
  const int64_t version = read_i64(is);
  const int64_t count = read_i64(is);
  const bool populate = store.size() == 0;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t len = read_i64(is);
    std::string name(size_t(len), '\0');
    is.read(name.data(), len);
    char tr = 0;
    is.read(&tr, 1);
    const int64_t rows = read_i64(is), cols = read_i64(is);
    Mat m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()),
            std::streamsize(sizeof(double) * size_t(m.size())));
    require(bool(is), "load_checkpoint: truncated file " + path);
    if (populate) {
      store.create(name, std::move(m), tr != 0);
    } else {
      require(store.has(name), "load_checkpoint: unexpected parameter " + name);
      Mat& dst = store.mutable_value(name);
      if (dst.rows() != rows || dst.cols() != cols)
        throw ShapeError("load_checkpoint: shape mismatch for " + name);
      dst = std::move(m);
    }
  }
  store.set_version(version);
}

}  // namespace ezm
