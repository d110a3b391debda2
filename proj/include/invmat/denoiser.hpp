#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "invmat/diffusion.hpp"
#include "invmat/grid.hpp"
#include "invmat/microstructure.hpp"
#include "invmat/nn.hpp"

namespace invmat {

// Predicts v given a noisy grid and an integer timestep. vjp applies the
// transpose Jacobian of forward at (x, t) to a cotangent of the same shape.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int dims() const = 0;
  virtual Grid forward(const Grid& x, int t) = 0;
  virtual Grid vjp(const Grid& x, int t, const Grid& cotangent) = 0;
  // Independent copy so concurrent chains never share a tape.
  virtual std::unique_ptr<Denoiser> clone() const = 0;
};

struct DenoiserConfig {
  int dims = 2;
  bool attention = false;
  uint64_t init_seed = 1;
};

// Float32 UNet behind a double interface. The most recent forward's tape is
// kept so a vjp at the same (x, t) skips the repeated forward pass.
class UNetDenoiser : public Denoiser {
 public:
  explicit UNetDenoiser(const DenoiserConfig& cfg);
  int dims() const override { return cfg_.dims; }
  Grid forward(const Grid& x, int t) override;
  Grid vjp(const Grid& x, int t, const Grid& cotangent) override;
  std::unique_ptr<Denoiser> clone() const override {
    return std::unique_ptr<Denoiser>(new UNetDenoiser(*this));
  }

  const DenoiserConfig& config() const { return cfg_; }
  // Direct access invalidates the cached tape.
  nn::UNet<float>& net() {
    tape_t_ = -1;
    return net_;
  }
  nn::UNet<float>& net_const_tape() { return net_; }

 private:
  void record(const Grid& x, int t);
  bool tape_matches(const Grid& x, int t) const;

  DenoiserConfig cfg_;
  nn::UNet<float> net_;
  Grid tape_x_;
  int tape_t_ = -1;
};

// Closed-form denoiser that knows the clean grid; used to exercise sampling
// and guidance paths without a trained network.
class OracleDenoiser : public Denoiser {
 public:
  OracleDenoiser(const Schedule& sched, Grid x0);
  int dims() const override { return x0_.dims; }
  Grid forward(const Grid& x, int t) override;
  Grid vjp(const Grid& x, int t, const Grid& cotangent) override;
  std::unique_ptr<Denoiser> clone() const override {
    return std::make_unique<OracleDenoiser>(*this);
  }

 private:
  Schedule sched_;
  Grid x0_;
};

struct TrainConfig {
  int steps = 10000;
  int batch = 128;
  double peak_lr = 1e-3;
  int warmup = 5000;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> loss_history;
};

TrainResult train(UNetDenoiser& den, const Dataset& data, const Schedule& sched,
                  const TrainConfig& cfg);

void save_weights(const std::string& path, UNetDenoiser& den);
std::unique_ptr<UNetDenoiser> load_weights(const std::string& path);

// Architecture hash covering dims, attention, and every parameter tensor's
// name and shape.
uint64_t weights_fingerprint(UNetDenoiser& den);

template <typename S>
nn::Tensor<S> grid_to_tensor(const Grid& g) {
  nn::Tensor<S> t;
  t.resize(1, 3, g.nz, g.ny, g.nx);
  const size_t n = g.elements();
  for (int c = 0; c < 3; ++c) {
    S* dst = t.at(0, c);
    for (size_t e = 0; e < n; ++e) dst[e] = S(g.data[e * 3 + c]);
  }
  return t;
}

template <typename S>
Grid tensor_to_grid(const nn::Tensor<S>& t, int dims) {
  Grid g(dims, t.w, t.h, t.d);
  const size_t n = g.elements();
  for (int c = 0; c < 3; ++c) {
    const S* src = t.at(0, c);
    for (size_t e = 0; e < n; ++e) g.data[e * 3 + c] = double(src[e]);
  }
  return g;
}

}  // namespace invmat
