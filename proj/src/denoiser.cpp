#include "invmat/denoiser.hpp"

#include <cmath>
#include <cstring>

#include "invmat/errors.hpp"
#include "invmat/io.hpp"

namespace invmat {

namespace {

void check_spatial(const Grid& x, int dims) {
  if (x.dims != dims) throw ValidationError("grid dimensionality does not match denoiser");
  const bool ok = x.nx % 4 == 0 && x.ny % 4 == 0 && (dims == 2 || x.nz % 4 == 0);
  if (!ok) throw ValidationError("grid extents must be divisible by 4");
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string architecture_string(UNetDenoiser& den) {
  std::string s = "invmat-unet-v1;dims=" + std::to_string(den.config().dims) +
                  ";attention=" + (den.config().attention ? "1" : "0") + ";";
  for (auto* p : den.net_const_tape().params()) {
    s += p->name + ":";
    for (size_t i = 0; i < p->shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(p->shape[i]);
    }
    s += ";";
  }
  return s;
}

std::string hex_u64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

UNetDenoiser::UNetDenoiser(const DenoiserConfig& cfg)
    : cfg_(cfg), net_(cfg.dims, cfg.attention, cfg.init_seed) {}

void UNetDenoiser::record(const Grid& x, int t) {
  tape_x_ = x;
  tape_t_ = t;
}

bool UNetDenoiser::tape_matches(const Grid& x, int t) const {
  return tape_t_ == t && tape_x_.same_shape(x) && tape_x_.data == x.data;
}

namespace {
void check_timestep(int t) {
  if (t < 0 || t >= 1000) throw ValidationError("timestep out of range");
}
}  // namespace

Grid UNetDenoiser::forward(const Grid& x, int t) {
  check_spatial(x, cfg_.dims);
  check_timestep(t);
  auto out = net_.forward(grid_to_tensor<float>(x), {t}, true);
  record(x, t);
  return tensor_to_grid(out, cfg_.dims);
}

Grid UNetDenoiser::vjp(const Grid& x, int t, const Grid& cotangent) {
  check_spatial(x, cfg_.dims);
  check_timestep(t);
  if (!cotangent.same_shape(x)) throw ValidationError("cotangent shape mismatch");
  if (!tape_matches(x, t)) {
    net_.forward(grid_to_tensor<float>(x), {t}, true);
    record(x, t);
  }
  auto dx = net_.backward(grid_to_tensor<float>(cotangent), false);
  return tensor_to_grid(dx, cfg_.dims);
}

OracleDenoiser::OracleDenoiser(const Schedule& sched, Grid x0)
    : sched_(sched), x0_(std::move(x0)) {}

Grid OracleDenoiser::forward(const Grid& x, int t) {
  if (t < 0 || t >= sched_.T) throw ValidationError("timestep out of range");
  if (!x.same_shape(x0_)) throw ValidationError("grid shape mismatch");
  const double ab = sched_.alpha_bar[t];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Grid v = x;
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = (a * x.data[i] - x0_.data[i]) / b;
  return v;
}

Grid OracleDenoiser::vjp(const Grid& x, int t, const Grid& cotangent) {
  if (t < 0 || t >= sched_.T) throw ValidationError("timestep out of range");
  if (!cotangent.same_shape(x)) throw ValidationError("cotangent shape mismatch");
  const double ab = sched_.alpha_bar[t];
  const double factor = std::sqrt(ab) / std::sqrt(1.0 - ab);
  Grid g = cotangent;
  for (auto& v : g.data) v *= factor;
  return g;
}

TrainResult train(UNetDenoiser& den, const Dataset& data, const Schedule& sched,
                  const TrainConfig& cfg) {
  if (data.samples.empty()) throw ValidationError("cannot train on an empty dataset");
  if (data.dims != den.dims()) throw ValidationError("dataset dimensionality mismatch");
  if (cfg.steps < 0) throw ValidationError("steps must be nonnegative");
  if (cfg.batch < 1) throw ValidationError("batch must be positive");
  if (cfg.warmup < 1) throw ValidationError("warmup must be positive");

  Rng rng = Rng::stream(cfg.seed, 0);
  auto params = den.net().params();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i]->w.size(), 0.0);
    v[i].assign(params[i]->w.size(), 0.0);
  }

  const int B = cfg.batch;
  TrainResult res;
  res.loss_history.reserve(cfg.steps);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> idx(B);
    for (auto& i : idx) i = rng.uniform_int(data.samples.size());
    std::vector<int> ts(B);
    for (auto& t : ts) t = int(rng.uniform_int(uint64_t(sched.T)));

    nn::Tensor<float> X, target;
    X.resize(B, 3, data.nz, data.ny, data.nx);
    target.resize(B, 3, data.nz, data.ny, data.nx);
    const size_t ne = size_t(data.nx) * data.ny * data.nz;
    for (int j = 0; j < B; ++j) {
      Grid x0 = data.grid(idx[j]);
      Grid eps = random_normal_grid(x0.dims, x0.nx, x0.ny, x0.nz, rng);
      Grid xt = q_sample(x0, ts[j], eps, sched);
      Grid vt = v_target(x0, eps, ts[j], sched);
      for (int c = 0; c < 3; ++c) {
        float* xd = X.at(j, c);
        float* td = target.at(j, c);
        for (size_t e = 0; e < ne; ++e) {
          xd[e] = float(xt.data[e * 3 + c]);
          td[e] = float(vt.data[e * 3 + c]);
        }
      }
    }

    for (auto* p : params) std::fill(p->g.begin(), p->g.end(), 0.0f);

    nn::Tensor<float> pred = den.net_const_tape().forward(X, ts, true);
    const double inv = 1.0 / double(pred.size());
    double loss = 0.0;
    nn::Tensor<float> dY = pred;
    for (size_t i = 0; i < pred.size(); ++i) {
      const double d = double(pred.v[i]) - double(target.v[i]);
      loss += d * d;
      dY.v[i] = float(2.0 * d * inv);
    }
    loss *= inv;
    if (!std::isfinite(loss))
      throw NumericalError("training loss diverged at step " + std::to_string(step));

    den.net_const_tape().backward(dY, true);

    double norm2 = 0.0;
    for (auto* p : params) {
      if (!p->trainable) continue;
      for (float g : p->g) norm2 += double(g) * double(g);
    }
    const double norm = std::sqrt(norm2);
    const double scale = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm)
                             ? cfg.clip_norm / norm
                             : 1.0;

    double lr;
    if (step + 1 <= cfg.warmup) {
      lr = cfg.peak_lr * double(step + 1) / double(cfg.warmup);
    } else {
      const double span = std::max(1, cfg.steps - cfg.warmup);
      const double prog = std::min(1.0, double(step + 1 - cfg.warmup) / span);
      lr = cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
    }

    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto* p = params[pi];
      if (!p->trainable) continue;
      for (size_t i = 0; i < p->w.size(); ++i) {
        const double g = double(p->g[i]) * scale;
        m[pi][i] = cfg.beta1 * m[pi][i] + (1.0 - cfg.beta1) * g;
        v[pi][i] = cfg.beta2 * v[pi][i] + (1.0 - cfg.beta2) * g * g;
        const double mh = m[pi][i] / bc1;
        const double vh = v[pi][i] / bc2;
        double w = double(p->w[i]);
        w -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * w);
        p->w[i] = float(w);
      }
    }
    res.loss_history.push_back(loss);
  }
  return res;
}

uint64_t weights_fingerprint(UNetDenoiser& den) { return fnv1a(architecture_string(den)); }

void save_weights(const std::string& path, UNetDenoiser& den) {
  auto params = den.net_const_tape().params();
  Json tensors = Json::array();
  std::vector<float> blob;
  size_t offset = 0;
  for (auto* p : params) {
    tensors.push_back({{"name", p->name},
                       {"shape", p->shape},
                       {"offset", offset},
                       {"size", p->w.size()},
                       {"trainable", p->trainable}});
    blob.insert(blob.end(), p->w.begin(), p->w.end());
    offset += p->w.size();
  }
  Json manifest = {{"kind", "weights"},
                   {"config", {{"dims", den.config().dims}, {"attention", den.config().attention}}},
                   {"fingerprint", hex_u64(weights_fingerprint(den))},
                   {"tensors", tensors}};
  write_container(path, kWeightsMagic, manifest, blob);
}

std::unique_ptr<UNetDenoiser> load_weights(const std::string& path) {
  Container c = read_container(path, kWeightsMagic);
  const auto& man = c.manifest;
  if (!man.contains("config") || !man.contains("fingerprint") || !man.contains("tensors"))
    throw ValidationError("incompatible weights: missing manifest fields in " + path);
  DenoiserConfig cfg;
  cfg.dims = man["config"].value("dims", 0);
  cfg.attention = man["config"].value("attention", false);
  cfg.init_seed = 0;
  auto den = std::make_unique<UNetDenoiser>(cfg);
  const std::string want = hex_u64(weights_fingerprint(*den));
  if (man["fingerprint"].get<std::string>() != want)
    throw ValidationError("incompatible weights: fingerprint mismatch in " + path);
  auto params = den->net().params();
  const auto& tensors = man["tensors"];
  if (tensors.size() != params.size())
    throw ValidationError("incompatible weights: tensor count mismatch in " + path);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    auto* p = params[i];
    if (t.value("name", "") != p->name)
      throw ValidationError("incompatible weights: tensor name mismatch at index " +
                            std::to_string(i) + " in " + path);
    if (t["shape"].get<std::vector<int>>() != p->shape)
      throw ValidationError("incompatible weights: tensor shape mismatch for " + p->name);
    const size_t off = t["offset"].get<size_t>();
    const size_t sz = t["size"].get<size_t>();
    if (sz != p->w.size() || off + sz > c.blob.size())
      throw ValidationError("incompatible weights: tensor extent out of range for " + p->name);
    std::memcpy(p->w.data(), c.blob.data() + off, sz * sizeof(float));
  }
  return den;
}

}  // namespace invmat
