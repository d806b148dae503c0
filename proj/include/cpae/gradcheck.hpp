#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cpae/graph.hpp"
#include "cpae/layers.hpp"
#include "cpae/rng.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

// Central finite-difference verification of every differentiable operation,
// run in double precision. Layers must match to 1e-4 relative error,
// distance kernels to 1e-3 (evaluated away from tie points; inputs are
// resampled until nearest-neighbor gaps clear the probe width).

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = false;
  bool is_kernel = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass = true;
  double max_layer_err = 0;
  double max_kernel_err = 0;
  double seconds = 0;
};

namespace gradcheck_detail {

inline constexpr double kStep = 1e-4;

// Relative error with a floor so that near-zero gradients compare on an
// absolute scale instead of amplifying finite-difference noise.
inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

inline double eval_scalar(const std::function<Var(Graph<double>&)>& build) {
  Graph<double> g(true /*training*/, false /*record*/);
  return g.scalar_value(build(g));
}

inline double max_rel_err(std::vector<Param<double>*> params,
                          const std::function<Var(Graph<double>&)>& build) {
  Graph<double> g(Graph<double>::Mode::Train);
  const Var loss = build(g);
  g.backward(loss);
  g.flush_param_grads();

  double worst = 0;
  for (Param<double>* p : params) {
    p->ensure_grad();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + kStep;
      const double plus = eval_scalar(build);
      p->value[i] = saved - kStep;
      const double minus = eval_scalar(build);
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2 * kStep);
      worst = std::max(worst, rel_err(p->grad[i], numeric));
    }
    p->zero_grad();
  }
  return worst;
}

inline Param<double> random_param(const std::string& name, Shape shape, Rng& rng, double scale = 1.0) {
  auto n = numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Param<double>(name, Tensor<double>(std::move(shape), std::move(v)));
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  auto n = numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Smallest gap between the best and second-best squared distance over all
// queries; FD probes must not flip a nearest-neighbor choice.
inline double min_nn_gap(const std::vector<Pt3<double>>& queries,
                         const std::vector<Pt3<double>>& targets) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& q : queries) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    for (const auto& t : targets) {
      const double d = std::sqrt(dist2(q, t));
      if (d < best) {
        second = best;
        best = d;
      } else if (d < second) {
        second = d;
      }
    }
    worst = std::min(worst, second - best);
    worst = std::min(worst, best);  // also keep the distance itself off zero
  }
  return worst;
}

inline std::vector<Pt3<double>> to_points(const Param<double>& p) {
  std::vector<Pt3<double>> pts(p.shape[0]);
  for (int i = 0; i < p.shape[0]; ++i)
    pts[i] = {p.value[3 * static_cast<std::size_t>(i)], p.value[3 * static_cast<std::size_t>(i) + 1],
              p.value[3 * static_cast<std::size_t>(i) + 2]};
  return pts;
}

}  // namespace gradcheck_detail

inline GradCheckReport run_gradcheck(std::uint64_t seed = 7) {
  using namespace gradcheck_detail;
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  Rng rng(seed);

  auto add = [&](const std::string& name, bool kernel, double tol, double err) {
    GradCheckEntry e{name, err, tol, err < tol, kernel};
    report.entries.push_back(e);
    report.all_pass = report.all_pass && e.pass;
    if (kernel)
      report.max_kernel_err = std::max(report.max_kernel_err, err);
    else
      report.max_layer_err = std::max(report.max_layer_err, err);
  };

  // --- affine layer + pointwise mse ---------------------------------------
  {
    Param<double> x = random_param("x", {4, 5}, rng);
    Param<double> w = random_param("w", {5, 3}, rng);
    Param<double> b = random_param("b", {3}, rng);
    Tensor<double> target = random_tensor({4, 3}, rng);
    auto build = [&](Graph<double>& g) {
      const Var y = g.add_rows(g.matmul(g.param(x), g.param(w)), g.param(b));
      return g.mse_rows(y, g.input(target));
    };
    add("dense+mse", false, 1e-4, max_rel_err({&x, &w, &b}, build));
  }

  // --- relu MLP (inputs resampled away from kinks) -------------------------
  {
    for (int attempt = 0;; ++attempt) {
      Rng local = rng.fork(attempt);
      Param<double> x = random_param("x", {4, 3}, local);
      Mlp<double> mlp(3, {{6, Act::Relu, false}, {5, Act::Relu, false}, {2, Act::None, false}},
                      "m", local);
      Tensor<double> target = random_tensor({4, 2}, local);
      // Reject draws whose pre-activations sit within the probe width of 0.
      bool near_kink = false;
      {
        Graph<double> g(true, false);
        Var h = g.param(x);
        for (auto& blk : mlp.blocks()) {
          h = blk.dense.forward(g, h);
          for (double v : g.val(h))
            if (std::abs(v) < 50 * kStep) near_kink = true;
          if (blk.act == Act::Relu) h = g.relu(h);
        }
      }
      if (near_kink && attempt < 64) continue;
      auto build = [&](Graph<double>& g) {
        return g.mse_rows(mlp.forward(g, g.param(x)), g.input(target));
      };
      std::vector<Param<double>*> params{&x};
      mlp.collect_params(params);
      add("relu_mlp", false, 1e-4, max_rel_err(params, build));
      break;
    }
  }

  // --- tanh output layer ----------------------------------------------------
  {
    Param<double> x = random_param("x", {5, 4}, rng);
    Mlp<double> mlp(4, {{6, Act::Relu, false}, {3, Act::Tanh, false}}, "t", rng);
    Tensor<double> target = random_tensor({5, 3}, rng);
    auto build = [&](Graph<double>& g) {
      return g.mse_rows(mlp.forward(g, g.param(x)), g.input(target));
    };
    std::vector<Param<double>*> params{&x};
    mlp.collect_params(params);
    add("tanh_mlp", false, 1e-4, max_rel_err(params, build));
  }

  // --- batchnorm, training statistics --------------------------------------
  {
    Param<double> x = random_param("x", {6, 4}, rng);
    Param<double> gamma = random_param("gamma", {4}, rng);
    Param<double> beta = random_param("beta", {4}, rng);
    std::vector<double> rm(4, 0.0), rv(4, 1.0);
    Tensor<double> target = random_tensor({6, 4}, rng);
    auto build = [&](Graph<double>& g) {
      const auto bn = g.batchnorm(g.param(x), g.param(gamma), g.param(beta), rm, rv, 1e-6);
      return g.mse_rows(bn.y, g.input(target));
    };
    add("batchnorm_train", false, 1e-4, max_rel_err({&x, &gamma, &beta}, build));
  }

  // --- batchnorm, inference affine ------------------------------------------
  {
    Param<double> x = random_param("x", {6, 4}, rng);
    Param<double> gamma = random_param("gamma", {4}, rng);
    Param<double> beta = random_param("beta", {4}, rng);
    std::vector<double> rm{0.2, -0.4, 0.1, 0.0}, rv{1.3, 0.6, 2.0, 0.9};
    Tensor<double> target = random_tensor({6, 4}, rng);
    auto build = [&](Graph<double>& g) {
      const auto bn = g.batchnorm(g.param(x), g.param(gamma), g.param(beta), rm, rv, 1e-6);
      return g.mse_rows(bn.y, g.input(target));
    };
    // Eval-mode statistics with gradient recording on.
    auto eval_err = [&]() {
      Graph<double> g(false /*training*/, true /*record*/);
      const auto loss = build(g);
      g.backward(loss);
      g.flush_param_grads();
      double worst = 0;
      for (Param<double>* p : {&x, &gamma, &beta}) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double saved = p->value[i];
          p->value[i] = saved + kStep;
          Graph<double> gp(false, false);
          const double plus = gp.scalar_value(build(gp));
          p->value[i] = saved - kStep;
          Graph<double> gm(false, false);
          const double minus = gm.scalar_value(build(gm));
          p->value[i] = saved;
          worst = std::max(worst, rel_err(p->grad[i], (plus - minus) / (2 * kStep)));
        }
        p->zero_grad();
      }
      return worst;
    };
    add("batchnorm_eval", false, 1e-4, eval_err());
  }

  // --- max pool (resampled away from ties) -----------------------------------
  {
    for (int attempt = 0;; ++attempt) {
      Rng local = rng.fork(100 + attempt);
      Param<double> x = random_param("x", {5, 4}, local);
      Tensor<double> target = random_tensor({1, 4}, local);
      bool tied = false;
      for (int j = 0; j < 4; ++j) {
        double best = -1e30, second = -1e30;
        for (int i = 0; i < 5; ++i) {
          const double v = x.value[static_cast<std::size_t>(i) * 4 + j];
          if (v > best) {
            second = best;
            best = v;
          } else if (v > second) {
            second = v;
          }
        }
        if (best - second < 50 * kStep) tied = true;
      }
      if (tied && attempt < 64) continue;
      auto build = [&](Graph<double>& g) {
        return g.mse_rows(g.maxpool_rows(g.param(x)), g.input(target));
      };
      add("maxpool", false, 1e-4, max_rel_err({&x}, build));
      break;
    }
  }

  // --- composite conditional mapping (concat/tile/bn/tanh) -------------------
  {
    Param<double> pts = random_param("pts", {5, 3}, rng, 0.5);
    Param<double> z = random_param("z", {1, 4}, rng, 0.5);
    Mlp<double> net(7, {{8, Act::Relu, true}, {3, Act::Tanh, false}}, "c", rng);
    Tensor<double> target = random_tensor({5, 3}, rng);
    auto build = [&](Graph<double>& g) {
      const Var in = g.concat_cols(g.param(pts), g.tile_rows(g.param(z), 5));
      return g.mse_rows(net.forward(g, in), g.input(target));
    };
    std::vector<Param<double>*> params{&pts, &z};
    net.collect_params(params);
    add("conditional_mlp", false, 1e-4, max_rel_err(params, build));
  }

  // --- chamfer (both sides differentiable) ------------------------------------
  {
    for (int attempt = 0;; ++attempt) {
      Rng local = rng.fork(200 + attempt);
      Param<double> a = random_param("a", {6, 3}, local);
      Param<double> b = random_param("b", {7, 3}, local);
      const double gap = std::min(min_nn_gap(to_points(a), to_points(b)),
                                  min_nn_gap(to_points(b), to_points(a)));
      if (gap < 100 * kStep && attempt < 128) continue;
      auto build = [&](Graph<double>& g) { return g.chamfer(g.param(a), g.param(b)); };
      add("chamfer", true, 1e-3, max_rel_err({&a, &b}, build));
      break;
    }
  }

  // --- adaptive chamfer across alpha -----------------------------------------
  for (double alpha : {0.0, 0.5, 1.0}) {
    for (int attempt = 0;; ++attempt) {
      Rng local = rng.fork(300 + attempt + static_cast<int>(alpha * 8));
      Param<double> inst = random_param("inst", {6, 3}, local);
      Tensor<double> ref = random_tensor({9, 3}, local);
      Param<double> ref_p("ref", ref);
      const double gap = std::min(min_nn_gap(to_points(inst), to_points(ref_p)),
                                  min_nn_gap(to_points(ref_p), to_points(inst)));
      if (gap < 100 * kStep && attempt < 128) continue;
      auto build = [&](Graph<double>& g) {
        return g.adaptive_chamfer(g.param(inst), g.input(ref), alpha);
      };
      add("adaptive_chamfer_alpha" + std::to_string(alpha).substr(0, 3), true, 1e-3,
          max_rel_err({&inst}, build));
      break;
    }
  }

  // --- exact EMD ----------------------------------------------------------------
  {
    Rng local = rng.fork(400);
    Param<double> a = random_param("a", {6, 3}, local);
    Param<double> b = random_param("b", {6, 3}, local);
    auto build = [&](Graph<double>& g) {
      return g.emd(g.param(a), g.param(b), Graph<double>::EmdKind::Exact);
    };
    add("emd_exact", true, 1e-3, max_rel_err({&a, &b}, build));
  }

  // --- auction EMD (assignment must agree with the exact one) --------------------
  {
    Rng local = rng.fork(500);
    Param<double> a = random_param("a", {6, 3}, local);
    Param<double> b = random_param("b", {6, 3}, local);
    const auto exact = emd_exact(to_points(a), to_points(b));
    const auto approx = emd_auction(to_points(a), to_points(b));
    double err;
    if (exact.assignment != approx.assignment) {
      err = 1.0;  // cannot compare gradients against a different matching
    } else {
      auto build = [&](Graph<double>& g) {
        return g.emd(g.param(a), g.param(b), Graph<double>::EmdKind::Auction);
      };
      err = max_rel_err({&a, &b}, build);
    }
    add("emd_auction", true, 1e-3, err);
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace cpae
