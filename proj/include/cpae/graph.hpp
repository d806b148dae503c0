#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/geometry.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

using Var = int;

// Reverse-mode autodiff tape. Nodes are appended in topological order; each
// records a backward closure that scatters its gradient to its parents.
// Leaves made from Param accumulate into the Param's grad on flush, so one
// parameter may appear any number of times in a graph.
//
// Modes: a training graph records gradients and runs BatchNorm on batch
// statistics; an eval graph does neither. Running-statistic updates are
// deferred (see defer()) so batched forwards stay deterministic regardless
// of thread count.
template <typename S>
class Graph {
 public:
  enum class Mode { Train, Eval };

  explicit Graph(Mode mode = Mode::Eval)
      : training_(mode == Mode::Train), record_grads_(mode == Mode::Train) {}
  Graph(bool training, bool record_grads) : training_(training), record_grads_(record_grads) {}

  bool training() const { return training_; }
  bool recording() const { return record_grads_; }

  // ----- leaves ---------------------------------------------------------

  Var input(Tensor<S> t) {
    Node n;
    n.shape = std::move(t.shape);
    n.val = std::move(t.values);
    n.needs_grad = false;
    return push(std::move(n));
  }

  Var param(Param<S>& p) {
    Node n;
    n.shape = p.shape;
    n.val = p.value;
    n.needs_grad = record_grads_;
    const Var v = push(std::move(n));
    if (record_grads_) param_leaves_.push_back({&p, v});
    return v;
  }

  // ----- shape/value access ---------------------------------------------

  const Shape& shape(Var v) const { return node(v).shape; }
  const std::vector<S>& val(Var v) const { return node(v).val; }
  std::vector<S>& grad(Var v) { return node(v).grad; }

  Tensor<S> value_tensor(Var v) const { return Tensor<S>(node(v).shape, node(v).val); }

  S scalar_value(Var v) const {
    if (node(v).val.size() != 1) throw ShapeError("expected scalar node");
    return node(v).val[0];
  }

  // ----- elementwise / linear algebra ------------------------------------

  Var matmul(Var a, Var b) {
    const Node& A = node(a);
    const Node& B = node(b);
    if (A.shape.size() != 2 || B.shape.size() != 2)
      throw ShapeError("matmul expects 2-d tensors");
    const int n = A.shape[0], k = A.shape[1], k2 = B.shape[0], m = B.shape[1];
    if (k != k2)
      throw ShapeError("matmul inner dims differ: " + shape_str(A.shape) + " vs " +
                       shape_str(B.shape));
    Node out;
    out.shape = {n, m};
    out.val.assign(static_cast<std::size_t>(n) * m, S(0));
    {
      const S* av = A.val.data();
      const S* bv = B.val.data();
      S* cv = out.val.data();
#pragma omp parallel for schedule(static) if (n >= 64)
      for (int i = 0; i < n; ++i) {
        S* crow = cv + static_cast<std::size_t>(i) * m;
        const S* arow = av + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const S s = arow[kk];
          const S* brow = bv + static_cast<std::size_t>(kk) * m;
          for (int j = 0; j < m; ++j) crow[j] += s * brow[j];
        }
      }
    }
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b, n, k, m]() {
        const std::vector<S>& g = node(v).grad;
        const std::vector<S>& av = node(a).val;
        const std::vector<S>& bv = node(b).val;
        if (node(a).needs_grad) {
          std::vector<S>& ga = ensure_grad(a);
#pragma omp parallel for schedule(static) if (n >= 64)
          for (int i = 0; i < n; ++i) {
            const S* grow = g.data() + static_cast<std::size_t>(i) * m;
            S* garow = ga.data() + static_cast<std::size_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) {
              const S* brow = bv.data() + static_cast<std::size_t>(kk) * m;
              S acc = 0;
              for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
              garow[kk] += acc;
            }
          }
        }
        if (node(b).needs_grad) {
          std::vector<S>& gb = ensure_grad(b);
#pragma omp parallel for schedule(static) if (k >= 64)
          for (int kk = 0; kk < k; ++kk) {
            S* gbrow = gb.data() + static_cast<std::size_t>(kk) * m;
            for (int i = 0; i < n; ++i) {
              const S s = av[static_cast<std::size_t>(i) * k + kk];
              const S* grow = g.data() + static_cast<std::size_t>(i) * m;
              for (int j = 0; j < m; ++j) gbrow[j] += s * grow[j];
            }
          }
        }
      };
    }
    return v;
  }

  // y[i][j] = x[i][j] + bias[j]
  Var add_rows(Var x, Var bias) {
    const Node& X = node(x);
    const Node& B = node(bias);
    if (X.shape.size() != 2) throw ShapeError("add_rows expects a 2-d tensor");
    const int n = X.shape[0], d = X.shape[1];
    if (static_cast<std::int64_t>(B.val.size()) != d)
      throw ShapeError("bias length does not match feature dim");
    Node out;
    out.shape = X.shape;
    out.val.resize(X.val.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        out.val[static_cast<std::size_t>(i) * d + j] =
            X.val[static_cast<std::size_t>(i) * d + j] + B.val[j];
    const Var v = push(std::move(out), {x, bias});
    if (node(v).needs_grad) {
      node(v).back = [this, v, x, bias, n, d]() {
        const std::vector<S>& g = node(v).grad;
        if (node(x).needs_grad) {
          std::vector<S>& gx = ensure_grad(x);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (node(bias).needs_grad) {
          std::vector<S>& gb = ensure_grad(bias);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gb[j] += g[static_cast<std::size_t>(i) * d + j];
        }
      };
    }
    return v;
  }

  Var add(Var a, Var b) {
    const Node& A = node(a);
    const Node& B = node(b);
    if (A.shape != B.shape) throw ShapeError("add requires matching shapes");
    Node out;
    out.shape = A.shape;
    out.val.resize(A.val.size());
    for (std::size_t i = 0; i < A.val.size(); ++i) out.val[i] = A.val[i] + B.val[i];
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b]() {
        const std::vector<S>& g = node(v).grad;
        if (node(a).needs_grad) {
          std::vector<S>& ga = ensure_grad(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (node(b).needs_grad) {
          std::vector<S>& gb = ensure_grad(b);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      };
    }
    return v;
  }

  Var sub(Var a, Var b) {
    const Node& A = node(a);
    const Node& B = node(b);
    if (A.shape != B.shape) throw ShapeError("sub requires matching shapes");
    Node out;
    out.shape = A.shape;
    out.val.resize(A.val.size());
    for (std::size_t i = 0; i < A.val.size(); ++i) out.val[i] = A.val[i] - B.val[i];
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b]() {
        const std::vector<S>& g = node(v).grad;
        if (node(a).needs_grad) {
          std::vector<S>& ga = ensure_grad(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (node(b).needs_grad) {
          std::vector<S>& gb = ensure_grad(b);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      };
    }
    return v;
  }

  Var scale(Var a, S c) {
    const Node& A = node(a);
    Node out;
    out.shape = A.shape;
    out.val.resize(A.val.size());
    for (std::size_t i = 0; i < A.val.size(); ++i) out.val[i] = A.val[i] * c;
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, c]() {
        const std::vector<S>& g = node(v).grad;
        std::vector<S>& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
      };
    }
    return v;
  }

  Var relu(Var a) {
    const Node& A = node(a);
    Node out;
    out.shape = A.shape;
    out.val.resize(A.val.size());
    for (std::size_t i = 0; i < A.val.size(); ++i) out.val[i] = A.val[i] > S(0) ? A.val[i] : S(0);
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a]() {
        const std::vector<S>& g = node(v).grad;
        const std::vector<S>& x = node(a).val;
        std::vector<S>& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > S(0)) ga[i] += g[i];
      };
    }
    return v;
  }

  Var tanh(Var a) {
    const Node& A = node(a);
    Node out;
    out.shape = A.shape;
    out.val.resize(A.val.size());
    for (std::size_t i = 0; i < A.val.size(); ++i)
      out.val[i] = static_cast<S>(std::tanh(static_cast<double>(A.val[i])));
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a]() {
        const std::vector<S>& g = node(v).grad;
        const std::vector<S>& y = node(v).val;
        std::vector<S>& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (S(1) - y[i] * y[i]);
      };
    }
    return v;
  }

  // Per-feature max over the point axis: [n x d] -> [1 x d]. Gradient routes
  // to the argmax entry; ties go to the lowest point index.
  Var maxpool_rows(Var a) {
    const Node& A = node(a);
    if (A.shape.size() != 2) throw ShapeError("maxpool_rows expects a 2-d tensor");
    const int n = A.shape[0], d = A.shape[1];
    if (n < 1) throw ContractError("maxpool_rows on empty point axis");
    Node out;
    out.shape = {1, d};
    out.val.resize(d);
    auto argmax = std::make_shared<std::vector<int>>(d, 0);
    for (int j = 0; j < d; ++j) {
      S best = A.val[j];
      int bi = 0;
      for (int i = 1; i < n; ++i) {
        const S x = A.val[static_cast<std::size_t>(i) * d + j];
        if (x > best) {
          best = x;
          bi = i;
        }
      }
      out.val[j] = best;
      (*argmax)[j] = bi;
    }
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, d, argmax]() {
        const std::vector<S>& g = node(v).grad;
        std::vector<S>& ga = ensure_grad(a);
        for (int j = 0; j < d; ++j)
          ga[static_cast<std::size_t>((*argmax)[j]) * d + j] += g[j];
      };
    }
    return v;
  }

  Var concat_cols(Var a, Var b) {
    const Node& A = node(a);
    const Node& B = node(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[0] != B.shape[0])
      throw ShapeError("concat_cols requires matching row counts");
    const int n = A.shape[0], p = A.shape[1], q = B.shape[1];
    Node out;
    out.shape = {n, p + q};
    out.val.resize(static_cast<std::size_t>(n) * (p + q));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j)
        out.val[static_cast<std::size_t>(i) * (p + q) + j] =
            A.val[static_cast<std::size_t>(i) * p + j];
      for (int j = 0; j < q; ++j)
        out.val[static_cast<std::size_t>(i) * (p + q) + p + j] =
            B.val[static_cast<std::size_t>(i) * q + j];
    }
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b, n, p, q]() {
        const std::vector<S>& g = node(v).grad;
        if (node(a).needs_grad) {
          std::vector<S>& ga = ensure_grad(a);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j)
              ga[static_cast<std::size_t>(i) * p + j] +=
                  g[static_cast<std::size_t>(i) * (p + q) + j];
        }
        if (node(b).needs_grad) {
          std::vector<S>& gb = ensure_grad(b);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < q; ++j)
              gb[static_cast<std::size_t>(i) * q + j] +=
                  g[static_cast<std::size_t>(i) * (p + q) + p + j];
        }
      };
    }
    return v;
  }

  // Repeat a [1 x d] row n times -> [n x d].
  Var tile_rows(Var a, int n) {
    const Node& A = node(a);
    if (A.shape.size() != 2 || A.shape[0] != 1) throw ShapeError("tile_rows expects a [1 x d] tensor");
    const int d = A.shape[1];
    Node out;
    out.shape = {n, d};
    out.val.resize(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.val[static_cast<std::size_t>(i) * d + j] = A.val[j];
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, n, d]() {
        const std::vector<S>& g = node(v).grad;
        std::vector<S>& ga = ensure_grad(a);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) ga[j] += g[static_cast<std::size_t>(i) * d + j];
      };
    }
    return v;
  }

  Var sum_all(Var a) {
    const Node& A = node(a);
    S acc = 0;
    for (S x : A.val) acc += x;
    Node out;
    out.shape = {1};
    out.val = {acc};
    const Var v = push(std::move(out), {a});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a]() {
        const S g = node(v).grad[0];
        std::vector<S>& ga = ensure_grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
      };
    }
    return v;
  }

  Var mean_all(Var a) {
    const S inv = S(1) / static_cast<S>(node(a).val.size());
    return scale(sum_all(a), inv);
  }

  // Batch normalization over the row axis. Training mode normalizes with
  // batch statistics and reports them (mean, unbiased variance) for the
  // caller's deferred running-average update; eval mode applies the affine
  // map defined by the provided running statistics.
  struct BnResult {
    Var y;
    std::vector<S> batch_mean;
    std::vector<S> batch_var;  // unbiased
  };

  BnResult batchnorm(Var x, Var gamma, Var beta, const std::vector<S>& running_mean,
                     const std::vector<S>& running_var, S eps) {
    const Node& X = node(x);
    if (X.shape.size() != 2) throw ShapeError("batchnorm expects a 2-d tensor");
    const int n = X.shape[0], d = X.shape[1];
    if (static_cast<int>(node(gamma).val.size()) != d ||
        static_cast<int>(node(beta).val.size()) != d)
      throw ShapeError("batchnorm scale/shift length mismatch");

    BnResult res;
    if (!training_) {
      if (static_cast<int>(running_mean.size()) != d || static_cast<int>(running_var.size()) != d)
        throw ShapeError("batchnorm running statistics length mismatch");
      // y = a * x + b with a = gamma / sqrt(rv + eps), b = beta - a * rm
      Node out;
      out.shape = X.shape;
      out.val.resize(X.val.size());
      std::vector<S> a(d), rm = running_mean;
      for (int j = 0; j < d; ++j) {
        if (running_var[j] <= S(0) && running_var[j] + eps <= S(0))
          throw ContractError("batchnorm running variance must be positive");
        a[j] = node(gamma).val[j] / static_cast<S>(std::sqrt(static_cast<double>(running_var[j]) +
                                                             static_cast<double>(eps)));
      }
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          const std::size_t o = static_cast<std::size_t>(i) * d + j;
          out.val[o] = a[j] * (X.val[o] - rm[j]) + node(beta).val[j];
        }
      const Var v = push(std::move(out), {x, gamma, beta});
      if (node(v).needs_grad) {
        auto ash = std::make_shared<std::vector<S>>(std::move(a));
        auto rmsh = std::make_shared<std::vector<S>>(std::move(rm));
        auto rvsh = std::make_shared<std::vector<S>>(running_var);
        const S e = eps;
        node(v).back = [this, v, x, gamma, beta, n, d, ash, rmsh, rvsh, e]() {
          const std::vector<S>& g = node(v).grad;
          if (node(x).needs_grad) {
            std::vector<S>& gx = ensure_grad(x);
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < d; ++j) {
                const std::size_t o = static_cast<std::size_t>(i) * d + j;
                gx[o] += g[o] * (*ash)[j];
              }
          }
          if (node(gamma).needs_grad) {
            std::vector<S>& gg = ensure_grad(gamma);
            const std::vector<S>& xv = node(x).val;
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < d; ++j) {
                const std::size_t o = static_cast<std::size_t>(i) * d + j;
                const S inv = S(1) / static_cast<S>(std::sqrt(static_cast<double>((*rvsh)[j]) +
                                                              static_cast<double>(e)));
                gg[j] += g[o] * (xv[o] - (*rmsh)[j]) * inv;
              }
          }
          if (node(beta).needs_grad) {
            std::vector<S>& gb = ensure_grad(beta);
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < d; ++j) gb[j] += g[static_cast<std::size_t>(i) * d + j];
          }
        };
      }
      res.y = v;
      return res;
    }

    if (n < 2) throw ContractError("batchnorm training mode needs at least 2 rows");
    std::vector<S> mean(d, S(0)), var(d, S(0));
    for (int j = 0; j < d; ++j) {
      S acc = 0;
      for (int i = 0; i < n; ++i) acc += X.val[static_cast<std::size_t>(i) * d + j];
      mean[j] = acc / static_cast<S>(n);
    }
    for (int j = 0; j < d; ++j) {
      S acc = 0;
      for (int i = 0; i < n; ++i) {
        const S c = X.val[static_cast<std::size_t>(i) * d + j] - mean[j];
        acc += c * c;
      }
      var[j] = acc / static_cast<S>(n);  // biased, used for normalization
    }
    auto xhat = std::make_shared<std::vector<S>>(X.val.size());
    auto inv_std = std::make_shared<std::vector<S>>(d);
    for (int j = 0; j < d; ++j)
      (*inv_std)[j] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[j]) +
                                                     static_cast<double>(eps)));
    Node out;
    out.shape = X.shape;
    out.val.resize(X.val.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const std::size_t o = static_cast<std::size_t>(i) * d + j;
        (*xhat)[o] = (X.val[o] - mean[j]) * (*inv_std)[j];
        out.val[o] = node(gamma).val[j] * (*xhat)[o] + node(beta).val[j];
      }
    const Var v = push(std::move(out), {x, gamma, beta});
    if (node(v).needs_grad) {
      node(v).back = [this, v, x, gamma, beta, n, d, xhat, inv_std]() {
        const std::vector<S>& g = node(v).grad;
        const std::vector<S>& gv = node(gamma).val;
        if (node(gamma).needs_grad) {
          std::vector<S>& gg = ensure_grad(gamma);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
              const std::size_t o = static_cast<std::size_t>(i) * d + j;
              gg[j] += g[o] * (*xhat)[o];
            }
        }
        if (node(beta).needs_grad) {
          std::vector<S>& gb = ensure_grad(beta);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gb[j] += g[static_cast<std::size_t>(i) * d + j];
        }
        if (node(x).needs_grad) {
          std::vector<S>& gx = ensure_grad(x);
          // dxhat = g * gamma; dx = (inv_std / n) * (n*dxhat - sum(dxhat)
          //                                          - xhat * sum(dxhat*xhat))
          for (int j = 0; j < d; ++j) {
            S sum_dxh = 0, sum_dxh_xh = 0;
            for (int i = 0; i < n; ++i) {
              const std::size_t o = static_cast<std::size_t>(i) * d + j;
              const S dxh = g[o] * gv[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[o];
            }
            const S c = (*inv_std)[j] / static_cast<S>(n);
            for (int i = 0; i < n; ++i) {
              const std::size_t o = static_cast<std::size_t>(i) * d + j;
              const S dxh = g[o] * gv[j];
              gx[o] += c * (static_cast<S>(n) * dxh - sum_dxh - (*xhat)[o] * sum_dxh_xh);
            }
          }
        }
      };
    }
    res.y = v;
    // Unbiased variance for the running average.
    res.batch_var.resize(d);
    for (int j = 0; j < d; ++j)
      res.batch_var[j] = var[j] * static_cast<S>(n) / static_cast<S>(n - 1);
    res.batch_mean = std::move(mean);
    return res;
  }

  // Mean squared pointwise error: (1/n) * sum_i ||a_i - b_i||^2 over rows.
  Var mse_rows(Var a, Var b) {
    const Node& A = node(a);
    const Node& B = node(b);
    if (A.shape != B.shape || A.shape.size() != 2)
      throw ContractError("mse_rows requires two equal-shape 2-d tensors");
    const int n = A.shape[0], d = A.shape[1];
    double acc = 0;
    for (std::size_t i = 0; i < A.val.size(); ++i) {
      const double diff = static_cast<double>(A.val[i]) - static_cast<double>(B.val[i]);
      acc += diff * diff;
    }
    Node out;
    out.shape = {1};
    out.val = {static_cast<S>(acc / n)};
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b, n]() {
        const S g = node(v).grad[0];
        const std::vector<S>& av = node(a).val;
        const std::vector<S>& bv = node(b).val;
        const S c = g * S(2) / static_cast<S>(n);
        if (node(a).needs_grad) {
          std::vector<S>& ga = ensure_grad(a);
          for (std::size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
        }
        if (node(b).needs_grad) {
          std::vector<S>& gb = ensure_grad(b);
          for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
        }
      };
    }
    return v;
  }

  // Adaptive Chamfer: mean_a min||a-b|| + alpha * mean_b min||b-a||.
  // Distances are plain L2 (squared variant behind the flag). Gradients flow
  // to whichever side requires them.
  Var adaptive_chamfer(Var a, Var b, S alpha, const NnIndex<S>* b_index = nullptr,
                       bool squared = false) {
    if (alpha < S(0) || alpha > S(1)) throw ContractError("alpha must lie in [0, 1]");
    const auto pa = rows_as_points(a);
    const auto pb = rows_as_points(b);
    auto fwd = std::make_shared<DirectedNn<S>>(directed_nn(pa, pb, b_index));
    std::shared_ptr<DirectedNn<S>> rev;
    double value = squared ? fwd->mean_sq : fwd->mean;
    if (alpha > S(0)) {
      rev = std::make_shared<DirectedNn<S>>(directed_nn(pb, pa));
      value += static_cast<double>(alpha) * (squared ? rev->mean_sq : rev->mean);
    }
    Node out;
    out.shape = {1};
    out.val = {static_cast<S>(value)};
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      const int n = static_cast<int>(pa.size()), m = static_cast<int>(pb.size());
      node(v).back = [this, v, a, b, fwd, rev, alpha, n, m, squared]() {
        const S g = node(v).grad[0];
        const std::vector<S>& av = node(a).val;
        const std::vector<S>& bv = node(b).val;
        const bool need_a = node(a).needs_grad;
        const bool need_b = node(b).needs_grad;
        std::vector<S>* ga = need_a ? &ensure_grad(a) : nullptr;
        std::vector<S>* gb = need_b ? &ensure_grad(b) : nullptr;
        auto scatter = [&](int qi, int ti, S dist, S weight, const std::vector<S>& qv,
                           const std::vector<S>& tv, std::vector<S>* gq, std::vector<S>* gt) {
          // d/dq ||q - t|| = (q - t)/||q - t||; zero subgradient at 0.
          S c;
          if (squared) {
            c = weight * S(2);
          } else {
            if (dist <= S(1e-12)) return;
            c = weight / dist;
          }
          for (int x = 0; x < 3; ++x) {
            const S diff = qv[static_cast<std::size_t>(qi) * 3 + x] -
                           tv[static_cast<std::size_t>(ti) * 3 + x];
            if (gq) (*gq)[static_cast<std::size_t>(qi) * 3 + x] += c * diff;
            if (gt) (*gt)[static_cast<std::size_t>(ti) * 3 + x] -= c * diff;
          }
        };
        const S wf = g / static_cast<S>(n);
        for (int i = 0; i < n; ++i) scatter(i, fwd->index[i], fwd->dist[i], wf, av, bv, ga, gb);
        if (rev) {
          const S wr = g * alpha / static_cast<S>(m);
          for (int j = 0; j < m; ++j) scatter(j, rev->index[j], rev->dist[j], wr, bv, av, gb, ga);
        }
      };
    }
    return v;
  }

  Var chamfer(Var a, Var b, const NnIndex<S>* b_index = nullptr, bool squared = false) {
    return adaptive_chamfer(a, b, S(1), b_index, squared);
  }

  enum class EmdKind { Exact, Auction };

  // Earth Mover's Distance between equal-size row sets; gradient is the
  // matched-pair direction field.
  Var emd(Var a, Var b, EmdKind kind = EmdKind::Exact, int exact_limit = 512,
          const AuctionParams& auction = {}) {
    const auto pa = rows_as_points(a);
    const auto pb = rows_as_points(b);
    EmdResult<S> r = kind == EmdKind::Exact ? emd_exact(pa, pb, exact_limit)
                                            : emd_auction(pa, pb, auction);
    Node out;
    out.shape = {1};
    out.val = {static_cast<S>(r.mean_cost)};
    auto match = std::make_shared<std::vector<int>>(std::move(r.assignment));
    const int n = static_cast<int>(pa.size());
    const Var v = push(std::move(out), {a, b});
    if (node(v).needs_grad) {
      node(v).back = [this, v, a, b, match, n]() {
        const S g = node(v).grad[0];
        const std::vector<S>& av = node(a).val;
        const std::vector<S>& bv = node(b).val;
        const bool need_a = node(a).needs_grad;
        const bool need_b = node(b).needs_grad;
        std::vector<S>* ga = need_a ? &ensure_grad(a) : nullptr;
        std::vector<S>* gb = need_b ? &ensure_grad(b) : nullptr;
        for (int i = 0; i < n; ++i) {
          const int j = (*match)[i];
          S diff[3];
          double d2 = 0;
          for (int x = 0; x < 3; ++x) {
            diff[x] = av[static_cast<std::size_t>(i) * 3 + x] -
                      bv[static_cast<std::size_t>(j) * 3 + x];
            d2 += static_cast<double>(diff[x]) * diff[x];
          }
          const double d = std::sqrt(d2);
          if (d <= 1e-12) continue;
          const S c = g / (static_cast<S>(n) * static_cast<S>(d));
          for (int x = 0; x < 3; ++x) {
            if (ga) (*ga)[static_cast<std::size_t>(i) * 3 + x] += c * diff[x];
            if (gb) (*gb)[static_cast<std::size_t>(j) * 3 + x] -= c * diff[x];
          }
        }
      };
    }
    return v;
  }

  // ----- backward / bookkeeping ------------------------------------------

  void backward(Var loss) {
    if (!record_grads_) throw ContractError("backward on a non-recording graph");
    Node& L = node(loss);
    if (L.val.size() != 1) throw ContractError("backward requires a scalar loss");
    ensure_grad(loss)[0] += S(1);
    for (Var v = loss; v >= 0; --v) {
      Node& nd = nodes_[static_cast<std::size_t>(v)];
      if (nd.back && !nd.grad.empty()) nd.back();
    }
  }

  // Add scale * (leaf gradients) into each Param's grad, in creation order.
  void flush_param_grads(S scale = S(1)) {
    for (auto& [p, v] : param_leaves_) {
      const Node& nd = node(v);
      if (nd.grad.empty()) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) p->grad[i] += scale * nd.grad[i];
    }
  }

  // Deferred side effects (running-statistic updates); the trainer runs them
  // after merging per-shape graphs so apply order is deterministic.
  void defer(std::function<void()> fn) { deferred_.push_back(std::move(fn)); }
  void run_deferred() {
    for (auto& fn : deferred_) fn();
    deferred_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  Node& node(Var v) {
    if (v < 0 || v >= static_cast<Var>(nodes_.size())) throw ContractError("invalid graph node id");
    return nodes_[static_cast<std::size_t>(v)];
  }
  const Node& node(Var v) const {
    if (v < 0 || v >= static_cast<Var>(nodes_.size())) throw ContractError("invalid graph node id");
    return nodes_[static_cast<std::size_t>(v)];
  }

  std::vector<S>& ensure_grad(Var v) {
    Node& nd = node(v);
    if (nd.grad.size() != nd.val.size()) nd.grad.assign(nd.val.size(), S(0));
    return nd.grad;
  }

  Var push(Node&& n, std::initializer_list<Var> parents = {}) {
    if (record_grads_ && !n.needs_grad)
      for (Var p : parents)
        if (node(p).needs_grad) {
          n.needs_grad = true;
          break;
        }
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  std::vector<Pt3<S>> rows_as_points(Var v) const {
    const Node& nd = node(v);
    if (nd.shape.size() != 2 || nd.shape[1] != 3)
      throw ShapeError("expected an k x 3 tensor of points");
    std::vector<Pt3<S>> pts(nd.shape[0]);
    for (int i = 0; i < nd.shape[0]; ++i)
      pts[i] = {nd.val[3 * static_cast<std::size_t>(i)], nd.val[3 * static_cast<std::size_t>(i) + 1],
                nd.val[3 * static_cast<std::size_t>(i) + 2]};
    return pts;
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<Param<S>*, Var>> param_leaves_;
  std::vector<std::function<void()>> deferred_;
  bool training_;
  bool record_grads_;
};

}  // namespace cpae
