#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cpae/graph.hpp"
#include "cpae/rng.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

enum class Act { None, Relu, Tanh };

inline const char* act_name(Act a) {
  switch (a) {
    case Act::Relu: return "relu";
    case Act::Tanh: return "tanh";
    default: return "none";
  }
}

// Affine layer y = x W + b, weights uniform in +-1/sqrt(fan_in).
template <typename S>
struct Dense {
  Param<S> weight;  // [in x out]
  Param<S> bias;    // [out]

  Dense() = default;
  Dense(int in, int out, const std::string& name, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<S> w(static_cast<std::size_t>(in) * out);
    for (auto& x : w) x = static_cast<S>(rng.uniform(-bound, bound));
    std::vector<S> b(out);
    for (auto& x : b) x = static_cast<S>(rng.uniform(-bound, bound));
    weight = Param<S>(name + ".weight", Tensor<S>({in, out}, std::move(w)));
    bias = Param<S>(name + ".bias", Tensor<S>({out}, std::move(b)));
  }

  int in_dim() const { return weight.shape[0]; }
  int out_dim() const { return weight.shape[1]; }

  Var forward(Graph<S>& g, Var x) { return g.add_rows(g.matmul(x, g.param(weight)), g.param(bias)); }
};

// Per-feature scale/shift with running statistics; training graphs defer the
// running update so batched forwards stay deterministic.
template <typename S>
struct BatchNorm1d {
  Param<S> gamma;
  Param<S> beta;
  std::vector<S> running_mean;
  std::vector<S> running_var;
  S momentum = S(0.1);
  S eps = S(1e-6);

  BatchNorm1d() = default;
  BatchNorm1d(int features, const std::string& name) {
    gamma = Param<S>(name + ".gamma", Tensor<S>::full({features}, S(1)));
    beta = Param<S>(name + ".beta", Tensor<S>::zeros({features}));
    running_mean.assign(features, S(0));
    running_var.assign(features, S(1));
  }

  int features() const { return static_cast<int>(running_mean.size()); }

  Var forward(Graph<S>& g, Var x) {
    auto res = g.batchnorm(x, g.param(gamma), g.param(beta), running_mean, running_var, eps);
    if (g.training()) {
      g.defer([this, mean = std::move(res.batch_mean), var = std::move(res.batch_var)]() {
        for (std::size_t j = 0; j < running_mean.size(); ++j) {
          running_mean[j] = (S(1) - momentum) * running_mean[j] + momentum * mean[j];
          running_var[j] = (S(1) - momentum) * running_var[j] + momentum * var[j];
        }
      });
    }
    return res.y;
  }
};

// One (width, activation, batchnorm) entry of an MLP layer spec.
struct LayerSpec {
  int width;
  Act act = Act::Relu;
  bool batchnorm = false;
};

// Plain multilayer perceptron applied row-wise: no cross-row mixing outside
// of training-mode batchnorm statistics, which is what lets the conditional
// mappings act on each point independently.
template <typename S>
class Mlp {
 public:
  struct Block {
    Dense<S> dense;
    std::optional<BatchNorm1d<S>> bn;
    Act act = Act::None;
  };

  Mlp() = default;
  Mlp(int input_dim, const std::vector<LayerSpec>& spec, const std::string& name, Rng& rng) {
    int in = input_dim;
    for (std::size_t i = 0; i < spec.size(); ++i) {
      Block b;
      const std::string lname = name + ".layer" + std::to_string(i);
      b.dense = Dense<S>(in, spec[i].width, lname, rng);
      if (spec[i].batchnorm) b.bn.emplace(spec[i].width, lname + ".bn");
      b.act = spec[i].act;
      blocks_.push_back(std::move(b));
      in = spec[i].width;
    }
  }

  Var forward(Graph<S>& g, Var x) {
    if (blocks_.empty()) return x;
    if (g.shape(x).size() != 2 || g.shape(x)[1] != blocks_.front().dense.in_dim())
      throw ShapeError("mlp input width " +
                       (g.shape(x).size() == 2 ? std::to_string(g.shape(x)[1]) : shape_str(g.shape(x))) +
                       " does not match first layer input " +
                       std::to_string(blocks_.front().dense.in_dim()));
    Var h = x;
    for (auto& b : blocks_) {
      h = b.dense.forward(g, h);
      if (b.bn) h = b.bn->forward(g, h);
      switch (b.act) {
        case Act::Relu: h = g.relu(h); break;
        case Act::Tanh: h = g.tanh(h); break;
        case Act::None: break;
      }
    }
    return h;
  }

  // Convenience: run on a plain tensor in eval mode.
  Tensor<S> apply(const Tensor<S>& x) {
    Graph<S> g(Graph<S>::Mode::Eval);
    return g.value_tensor(forward(g, g.input(x)));
  }

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  int input_dim() const { return blocks_.empty() ? 0 : blocks_.front().dense.in_dim(); }
  int output_dim() const { return blocks_.empty() ? 0 : blocks_.back().dense.out_dim(); }

  void collect_params(std::vector<Param<S>*>& out) {
    for (auto& b : blocks_) {
      out.push_back(&b.dense.weight);
      out.push_back(&b.dense.bias);
      if (b.bn) {
        out.push_back(&b.bn->gamma);
        out.push_back(&b.bn->beta);
      }
    }
  }

 private:
  std::vector<Block> blocks_;
};

}  // namespace cpae
