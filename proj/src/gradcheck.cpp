#include "hvm/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <map>
#include <set>
#include <stdexcept>

#include "hvm/network.hpp"
#include "hvm/train.hpp"

namespace hvm {

namespace {

using TensorD = Tensor<double>;
using Clock = std::chrono::steady_clock;

constexpr std::size_t kN = 4;  // small state keeps the module sweeps fast
// Every LayerNorm inside the order loop spans >= 4 channels at this width;
// 2-channel norms are too curved for central differences near ties.
constexpr std::size_t kWide = 32;
constexpr std::size_t kCoordsPerTensor = 48;

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng_() >> 11) * 0x1.0p-53); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform(0, static_cast<double>(n))) % n; }
  TensorD tensor(const Shape& shape, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = uniform(lo, hi);
    return TensorD(shape, std::move(v));
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

std::vector<double> grad_of(const TensorD& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  const auto g = t.grad();
  return {g.begin(), g.end()};
}

double max_abs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Weighted sum with fixed random weights so every output element matters.
using Forward = std::function<TensorD()>;

GradcheckReport weighted_check(const std::string& name, const std::vector<NamedTensor>& targets, const Forward& fwd,
                               Sampler& rng, const GradcheckOptions& opt, double tolerance = kModuleTolerance,
                               std::size_t max_per_tensor = 0) {
  Shape out_shape;
  {
    NoGradGuard guard;
    out_shape = fwd().shape();
  }
  const auto weights = rng.tensor(out_shape, -1.0, 1.0);
  return check_gradients(
      name, targets, [fwd, weights] { return ops::sum(ops::mul(fwd(), weights)); }, tolerance, opt.step,
      max_per_tensor, rng.engine()());
}

template <class M>
std::vector<NamedTensor> targets_of(const M& module, const std::vector<NamedTensor>& extra = {}) {
  std::vector<NamedTensor> out = extra;
  for (const auto& p : module.parameters()) out.emplace_back(p.name, p.tensor);
  return out;
}

TensorD input(Sampler& rng, const Shape& shape, double lo = -2.0, double hi = 2.0) {
  auto t = rng.tensor(shape, lo, hi);
  t.set_requires_grad(true);
  return t;
}

using Suite = std::function<GradcheckReport(Sampler&, const GradcheckOptions&)>;

std::vector<std::pair<std::string, Suite>> build_suites() {
  std::vector<std::pair<std::string, Suite>> s;

  auto unary = [&s](const std::string& op, double lo, double hi, std::function<TensorD(const TensorD&)> f) {
    s.emplace_back("primitive:" + op, [op, lo, hi, f](Sampler& rng, const GradcheckOptions& opt) {
      auto x = input(rng, {3, 4}, lo, hi);
      return weighted_check("primitive:" + op, {{"x", x}}, [x, f] { return f(x); }, rng, opt);
    });
  };
  auto binary = [&s](const std::string& op, Shape sa, Shape sb, double lo, double hi,
                     std::function<TensorD(const TensorD&, const TensorD&)> f) {
    s.emplace_back("primitive:" + op, [op, sa, sb, lo, hi, f](Sampler& rng, const GradcheckOptions& opt) {
      auto a = input(rng, sa, lo, hi);
      auto b = input(rng, sb, lo, hi);
      return weighted_check("primitive:" + op, {{"a", a}, {"b", b}}, [a, b, f] { return f(a, b); }, rng, opt);
    });
  };

  binary("add", {2, 3, 4}, {3, 1}, -2, 2, [](auto& a, auto& b) { return ops::add(a, b); });
  binary("sub", {2, 3}, {2, 3}, -2, 2, [](auto& a, auto& b) { return ops::sub(a, b); });
  binary("mul", {4, 3}, {3}, -2, 2, [](auto& a, auto& b) { return ops::mul(a, b); });
  binary("div", {3, 4}, {3, 4}, 0.5, 2, [](auto& a, auto& b) { return ops::div(a, b); });
  binary("matmul", {3, 4}, {4, 2}, -2, 2, [](auto& a, auto& b) { return ops::matmul(a, b); });
  unary("neg", -2, 2, [](auto& x) { return ops::neg(x); });
  unary("scale", -2, 2, [](auto& x) { return ops::scale(x, 1.7); });
  unary("add_scalar", -2, 2, [](auto& x) { return ops::add_scalar(x, 0.3); });
  unary("exp", -2, 2, [](auto& x) { return ops::exp(x); });
  unary("log", 0.5, 2, [](auto& x) { return ops::log(x); });
  unary("softplus", -2, 2, [](auto& x) { return ops::softplus(x); });
  unary("sigmoid", -2, 2, [](auto& x) { return ops::sigmoid(x); });
  unary("silu", -2, 2, [](auto& x) { return ops::silu(x); });
  unary("gelu", -2, 2, [](auto& x) { return ops::gelu(x); });
  unary("reciprocal", 0.5, 2, [](auto& x) { return ops::reciprocal(x); });
  // Bounds sit well inside the sampled range; kinks are hit with probability zero.
  unary("clamp", -2, 2, [](auto& x) { return ops::clamp(x, -1.0, 1.0); });
  unary("reshape", -2, 2, [](auto& x) { return ops::reshape(x, {2, 6}); });
  unary("transpose", -2, 2, [](auto& x) { return ops::transpose(x); });
  unary("broadcast_to", -2, 2, [](auto& x) { return ops::broadcast_to(x, {2, 3, 4}); });
  unary("sum", -2, 2, [](auto& x) { return ops::sum(x); });
  unary("sum_axis", -2, 2, [](auto& x) { return ops::sum(x, 0, false); });
  unary("mean", -2, 2, [](auto& x) { return ops::mean(x); });
  unary("mean_axis", -2, 2, [](auto& x) { return ops::mean(x, -1, true); });
  unary("max_axis", -2, 2, [](auto& x) { return ops::max(x, 1, false); });
  unary("slice", -2, 2, [](auto& x) { return ops::slice(x, 1, 1, 2); });
  unary("split", -2, 2, [](auto& x) {
    auto parts = ops::split(x, {1, 3}, 1);
    return ops::concat<double>({ops::scale(parts[1], 2.0), parts[0]}, 1);
  });

  s.emplace_back("primitive:concat", [](Sampler& rng, const GradcheckOptions& opt) {
    auto a = input(rng, {2, 3, 2}), b = input(rng, {2, 1, 2});
    return weighted_check("primitive:concat", {{"a", a}, {"b", b}}, [a, b] { return ops::concat<double>({a, b}, 1); },
                          rng, opt);
  });
  s.emplace_back("primitive:permute", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {2, 3, 4});
    return weighted_check("primitive:permute", {{"x", x}}, [x] { return ops::permute(x, {2, 0, 1}); }, rng, opt);
  });
  s.emplace_back("primitive:linear", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {2, 3, 4}), w = input(rng, {5, 4}), b = input(rng, {5});
    return weighted_check("primitive:linear", {{"x", x}, {"weight", w}, {"bias", b}},
                          [x, w, b] { return ops::linear(x, w, b); }, rng, opt);
  });
  s.emplace_back("primitive:layer_norm", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {3, 5}), g = input(rng, {5}), b = input(rng, {5});
    return weighted_check("primitive:layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
                          [x, g, b] { return ops::layer_norm(x, g, b, 1e-6); }, rng, opt);
  });
  auto conv = [&s](const std::string& tag, Shape xs, Shape ws, ops::Conv2dOptions o) {
    s.emplace_back("primitive:" + tag, [tag, xs, ws, o](Sampler& rng, const GradcheckOptions& opt) {
      auto x = input(rng, xs), w = input(rng, ws), b = input(rng, {ws[0]});
      return weighted_check("primitive:" + tag, {{"x", x}, {"weight", w}, {"bias", b}},
                            [x, w, b, o] { return ops::conv2d(x, w, b, o); }, rng, opt);
    });
  };
  conv("conv2d", {2, 3, 5, 5}, {4, 3, 3, 3}, {1, 1, 1, 1});
  conv("conv2d_dilated", {1, 2, 6, 6}, {1, 2, 7, 7}, {1, 9, 3, 1});
  conv("conv2d_grouped_strided", {1, 4, 6, 6}, {4, 2, 3, 3}, {2, 1, 1, 2});
  s.emplace_back("primitive:max_pool2d", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {1, 2, 4, 4});
    return weighted_check("primitive:max_pool2d", {{"x", x}}, [x] { return ops::max_pool2d(x, 2); }, rng, opt);
  });
  s.emplace_back("primitive:upsample_nearest2d", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {1, 2, 2, 3});
    return weighted_check("primitive:upsample_nearest2d", {{"x", x}}, [x] { return ops::upsample_nearest2d(x, 2); },
                          rng, opt);
  });
  s.emplace_back("primitive:permute_tokens", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {2, 4, 3});
    const std::vector<std::size_t> order{2, 0, 3, 1};
    return weighted_check("primitive:permute_tokens", {{"x", x}}, [x, order] { return ops::permute_tokens<double>(x, order); },
                          rng, opt);
  });
  s.emplace_back("primitive:discretize", [](Sampler& rng, const GradcheckOptions& opt) {
    auto dt = input(rng, {2, 3, 2}, 0.05, 1.5), a = input(rng, {2, 4}, -2, -0.1), b = input(rng, {2, 3, 4});
    return weighted_check("primitive:discretize", {{"delta", dt}, {"A", a}, {"B", b}},
                          [dt, a, b] {
                            auto d = discretize(dt, a, b);
                            return ops::add(d.a_bar, ops::scale(d.b_bar, 0.7));
                          },
                          rng, opt);
  });
  s.emplace_back("primitive:selective_scan", [](Sampler& rng, const GradcheckOptions& opt) {
    auto x = input(rng, {2, 5, 3}), dt = input(rng, {2, 5, 3}, 0.05, 1.5), a = input(rng, {3, 4}, -2, -0.1);
    auto b = input(rng, {2, 5, 4}), c = input(rng, {2, 5, 4}), d = input(rng, {3});
    return weighted_check("primitive:selective_scan",
                          {{"x", x}, {"delta", dt}, {"A", a}, {"B", b}, {"C", c}, {"D", d}},
                          [=] { return selective_scan(x, dt, a, b, c, d); }, rng, opt);
  });

  s.emplace_back("s6_forward", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    auto m = std::make_shared<S6<double>>(3, kN, init);
    auto x = input(rng, {2, 6, 3});
    return weighted_check("s6_forward", targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt);
  });
  s.emplace_back("ss2d_forward", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    auto m = std::make_shared<SS2D<double>>(4, kN, init);
    auto x = input(rng, {1, 3, 3, 4});
    return weighted_check("ss2d_forward", targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt);
  });
  s.emplace_back("local_ss2d", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    auto m = std::make_shared<LocalSS2D<double>>(8, kN, init);
    auto x = input(rng, {1, 3, 3, 8});
    return weighted_check("local_ss2d", targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt);
  });
  for (std::size_t n = 1; n <= 3; ++n) {
    const auto name = "h_ss2d[n=" + std::to_string(n) + "]";
    s.emplace_back(name, [n, name](Sampler& rng, const GradcheckOptions& opt) {
      InitRng init(rng.engine()());
      auto m = std::make_shared<HighOrderSS2D<double>>(channel_schedule(n, kWide), kN, init);
      auto x = input(rng, {1, 3, 3, kWide});
      return weighted_check(name, targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt,
                            kModuleTolerance, kCoordsPerTensor);
    });
  }
  s.emplace_back("hvss_forward", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    auto m = std::make_shared<HvssBlock<double>>(16, 2, kDefaultMlpRatio, kN, init);
    auto x = input(rng, {1, 16, 3, 3});
    return weighted_check("hvss_forward", targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt,
                          kModuleTolerance, kCoordsPerTensor);
  });
  s.emplace_back("sab", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    auto m = std::make_shared<SpatialBridge<double>>(init);
    auto x = input(rng, {1, 3, 5, 5});
    return weighted_check("sab", targets_of(*m, {{"x", x}}), [m, x] { return m->forward(x); }, rng, opt);
  });
  s.emplace_back("cab", [](Sampler& rng, const GradcheckOptions& opt) {
    InitRng init(rng.engine()());
    const std::vector<std::size_t> ch{2, 3, 4};
    auto m = std::make_shared<ChannelBridge<double>>(ch, init);
    std::vector<TensorD> skips{input(rng, {1, 2, 4, 4}), input(rng, {1, 3, 2, 2}), input(rng, {1, 4, 1, 1})};
    return weighted_check("cab", targets_of(*m, {{"skip1", skips[0]}, {"skip2", skips[1]}, {"skip3", skips[2]}}),
                          [m, skips] {
                            auto out = m->forward(skips);
                            std::vector<TensorD> flat;
                            for (const auto& o : out) flat.push_back(ops::reshape(o, {o.numel()}));
                            return ops::concat(flat, 0);
                          },
                          rng, opt);
  });
  s.emplace_back("end_to_end", [](Sampler& rng, const GradcheckOptions& opt) {
    const auto start = Clock::now();
    const auto cfg = tiny_model_config();
    HVMUNet<double> model(cfg, rng.engine()());
    const Shape shape{1, cfg.input_channels, cfg.input_height, cfg.input_width};
    const auto x = rng.tensor(shape, 0.0, 1.0);
    std::vector<double> t(cfg.input_height * cfg.input_width);
    for (auto& v : t) v = rng.uniform(0, 1) < 0.3 ? 1.0 : 0.0;
    const TensorD target({1, 1, cfg.input_height, cfg.input_width}, std::move(t));
    auto loss = [&] { return bce_dice_loss(model.forward(x), target); };

    auto params = model.parameters();
    model.zero_grad();
    active_tape<double>().clear();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    std::vector<double> scale;
    for (const auto& p : params) {
      analytic.push_back(grad_of(p.tensor));
      scale.push_back(max_abs(analytic.back()));
    }

    // Half the probes are uniform over coordinates, half uniform over tensors.
    std::vector<std::size_t> offsets{0};
    for (const auto& p : params) offsets.push_back(offsets.back() + p.tensor.numel());
    std::set<std::pair<std::size_t, std::size_t>> probes;
    while (probes.size() < std::min(opt.e2e_coordinates, offsets.back())) {
      std::size_t ti, j;
      if (probes.size() % 2 == 0) {
        const std::size_t flat = rng.index(offsets.back());
        ti = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
        j = flat - offsets[ti];
      } else {
        ti = rng.index(params.size());
        j = rng.index(params[ti].tensor.numel());
      }
      probes.emplace(ti, j);
    }

    GradcheckReport rep{"end_to_end", 0, kEndToEndTolerance, 0, 0, {}};
    NoGradGuard guard;
    std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> per_tensor;
    for (const auto& [ti, j] : probes) {
      auto data = params[ti].tensor.mutable_data();
      const double orig = data[j];
      data[j] = orig + opt.step;
      const double fp = loss().item();
      data[j] = orig - opt.step;
      const double fm = loss().item();
      data[j] = orig;
      per_tensor[ti].first.push_back(analytic[ti][j]);
      per_tensor[ti].second.push_back((fp - fm) / (2 * opt.step));
      ++rep.coordinates;
    }
    for (const auto& [ti, an] : per_tensor) {
      const double err = relative_error(an.first, an.second, scale[ti]);
      if (err >= rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = params[ti].name;
      }
    }

    // Directional derivatives cover every parameter at once.
    for (std::size_t d = 0; d < opt.e2e_directions; ++d) {
      std::normal_distribution<double> normal;
      std::vector<std::vector<double>> dir;
      double norm2 = 0;
      for (const auto& p : params) {
        dir.emplace_back(p.tensor.numel());
        for (auto& v : dir.back()) {
          v = normal(rng.engine());
          norm2 += v * v;
        }
      }
      const double inv = 1.0 / std::sqrt(norm2);
      double dot = 0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < dir[i].size(); ++j) {
          dir[i][j] *= inv;
          dot += dir[i][j] * analytic[i][j];
        }
      }
      std::vector<std::vector<double>> saved;
      for (const auto& p : params) saved.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
      auto shift = [&](double h) {
        for (std::size_t i = 0; i < params.size(); ++i) {
          auto data = params[i].tensor.mutable_data();
          for (std::size_t j = 0; j < data.size(); ++j) data[j] = saved[i][j] + h * dir[i][j];
        }
      };
      shift(opt.step);
      const double fp = loss().item();
      shift(-opt.step);
      const double fm = loss().item();
      shift(0.0);
      const double err = relative_error({dot}, {(fp - fm) / (2 * opt.step)}, std::abs(dot));
      ++rep.coordinates;
      if (err >= rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = "direction " + std::to_string(d);
      }
    }
    rep.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return rep;
  });
  return s;
}

bool selected(const std::string& name, const std::vector<std::string>& only) {
  if (only.empty()) return true;
  for (const auto& f : only) {
    if (!f.empty() && f.back() == '*') {
      if (name.compare(0, f.size() - 1, f, 0, f.size() - 1) == 0) return true;
    } else if (name == f) {
      return true;
    }
  }
  return false;
}

}  // namespace

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double scale) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0;
  double denom = std::max(kRelErrorFloor, scale);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!std::isfinite(analytic[i]) || !std::isfinite(numeric[i])) return INFINITY;
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    denom = std::max({denom, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / denom;
}

GradcheckReport check_gradients(const std::string& name, const std::vector<NamedTensor>& targets,
                                const std::function<Tensor<double>()>& loss, double tolerance, double step,
                                std::size_t max_per_tensor, std::uint64_t seed) {
  const auto start = Clock::now();
  GradcheckReport rep{name, 0, tolerance, 0, 0, {}};
  for (const auto& [_, t] : targets) {
    auto tt = t;
    if (!tt.requires_grad()) tt.set_requires_grad(true);
    tt.zero_grad();
  }
  active_tape<double>().clear();
  const auto l = loss();
  if (l.numel() != 1) throw ShapeError("gradcheck loss must be scalar, got " + shape_str(l.shape()));
  backward(l);

  std::mt19937_64 rng(seed);
  NoGradGuard guard;
  for (const auto& [tname, t] : targets) {
    const auto analytic = grad_of(t);
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_per_tensor > 0 && coords.size() > max_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_per_tensor);
    }
    std::vector<double> an, nu;
    auto tt = t;
    auto data = tt.mutable_data();
    for (auto j : coords) {
      const double orig = data[j];
      data[j] = orig + step;
      const double fp = loss().item();
      data[j] = orig - step;
      const double fm = loss().item();
      data[j] = orig;
      an.push_back(analytic[j]);
      nu.push_back((fp - fm) / (2 * step));
    }
    rep.coordinates += coords.size();
    const double err = relative_error(an, nu, max_abs(analytic));
    if (err >= rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = tname;
    }
  }
  rep.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return rep;
}

std::vector<std::string> gradcheck_suites() {
  std::vector<std::string> out;
  for (const auto& [name, _] : build_suites()) out.push_back(name);
  return out;
}

std::vector<GradcheckReport> run_gradcheck(const GradcheckOptions& options, const std::vector<std::string>& only,
                                           const std::function<void(const GradcheckReport&)>& on_report) {
  std::vector<GradcheckReport> out;
  const auto suites = build_suites();
  for (std::size_t i = 0; i < suites.size(); ++i) {
    const auto& [name, suite] = suites[i];
    if (!selected(name, only)) continue;
    // Per-suite seed: results do not depend on which other suites run.
    Sampler rng(options.seed * 0x100000001b3ULL + i);
    out.push_back(suite(rng, options));
    if (on_report) on_report(out.back());
  }
  return out;
}

}  // namespace hvm
