#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpae/data.hpp"
#include "cpae/errors.hpp"
#include "cpae/geometry.hpp"
#include "cpae/losses.hpp"
#include "cpae/model.hpp"
#include "cpae/optim.hpp"
#include "cpae/rng.hpp"

namespace cpae {

struct TrainConfig {
  int k = 2048;           // points per cloud
  int batch_size = 16;
  int stage1_epochs = 200;
  int stage2_max_steps = 3000;
  int stage2_eval_every = 50;
  int stage2_patience = 20;  // evaluations without improvement before stopping
  double lr = 1e-4;
  double weight_decay = 0;
  std::uint64_t seed = 0;
  AlphaMode alpha_mode = AlphaMode::Step;
  std::string emd_mode = "auto";  // auto | exact | auction | chamfer-fallback
  int exact_emd_limit = 512;
  double rotation_sigma = 0;  // radians; 0 disables augmentation
  RotationAxis rotation_axis = RotationAxis::Up;
  bool resample_each_epoch = false;  // default: sample the k points once
  double mu_mse = 1e3, mu_chamfer = 1e1, mu_emd = 1;
  int snapshot_every = 50;  // steps between last-good snapshots

  EmdStrategy resolve_emd() const {
    if (emd_mode == "auto")
      return k <= exact_emd_limit ? EmdStrategy::Exact : EmdStrategy::Auction;
    return emd_strategy_from_name(emd_mode);
  }

  LossWeights<float> weights() const {
    return {static_cast<float>(mu_mse), static_cast<float>(mu_chamfer),
            static_cast<float>(mu_emd)};
  }

  nlohmann::json to_json() const {
    return {{"k", k},
            {"batch_size", batch_size},
            {"stage1_epochs", stage1_epochs},
            {"stage2_max_steps", stage2_max_steps},
            {"stage2_eval_every", stage2_eval_every},
            {"stage2_patience", stage2_patience},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"seed", seed},
            {"alpha_mode", alpha_mode == AlphaMode::Step ? "step" : "linear"},
            {"emd_mode", emd_mode},
            {"exact_emd_limit", exact_emd_limit},
            {"rotation_sigma", rotation_sigma},
            {"rotation_axis", rotation_axis == RotationAxis::Up ? "up" : "so3"},
            {"resample_each_epoch", resample_each_epoch},
            {"mu_mse", mu_mse},
            {"mu_chamfer", mu_chamfer},
            {"mu_emd", mu_emd}};
  }
};

// Uniform without-replacement sample of k points; annotations ride along.
inline PointCloud subsample(const PointCloud& cloud, int k, std::uint64_t seed) {
  if (cloud.size() < k)
    throw ContractError("cloud has " + std::to_string(cloud.size()) + " points, need " +
                        std::to_string(k));
  Rng rng(seed);
  const auto idx = rng.sample_without_replacement(cloud.size(), k);
  PointCloud out;
  out.points.reserve(k);
  for (int i : idx) out.points.push_back(cloud.points[i]);
  if (cloud.has_labels()) {
    out.labels.reserve(k);
    for (int i : idx) out.labels.push_back(cloud.labels[i]);
  }
  if (cloud.has_colors()) {
    out.colors.reserve(k);
    for (int i : idx) out.colors.push_back(cloud.colors[i]);
  }
  out.keypoints = cloud.keypoints;
  return out;
}

// Uniform stream of ordered (source, target) index pairs, never pairing a
// shape with itself when the dataset allows it.
class PairSampler {
 public:
  PairSampler(int count, std::uint64_t seed) : n_(count), rng_(seed) {
    if (count < 1) throw ContractError("pair sampler needs a nonempty dataset");
  }

  std::pair<int, int> next() {
    if (n_ == 1) return {0, 0};  // self-pairing fallback
    const int a = static_cast<int>(rng_.below(static_cast<std::uint64_t>(n_)));
    int b = static_cast<int>(rng_.below(static_cast<std::uint64_t>(n_ - 1)));
    if (b >= a) ++b;
    return {a, b};
  }

 private:
  int n_;
  Rng rng_;
};

struct StageResult {
  std::vector<LossRow> log;
  double probe_loss_init = 0;   // stage 1 only
  double probe_loss_final = 0;  // stage 1 only
  double val_sphere_adherence = 0;
  double val_cross_initial = 0;  // stage 2 only
  double val_cross_best = 0;     // stage 2 only
  std::int64_t steps = 0;
};

namespace detail {

struct PreparedShape {
  Tensor<float> points;  // k x 3, normalized frame
  int dataset_index = -1;
};

struct TrainSetup {
  std::vector<PreparedShape> train;
  std::vector<PreparedShape> val;
};

inline TrainSetup prepare(const Dataset& ds, const TrainConfig& cfg) {
  if (ds.splits.train.empty()) throw ContractError("training split is empty");
  TrainSetup setup;
  Rng master(cfg.seed);
  Rng sub_rng = master.fork(0x5a);
  auto prep = [&](const std::vector<int>& split, std::vector<PreparedShape>& out) {
    for (int idx : split) {
      auto [norm, tf] = normalize_cloud(ds.clouds[idx]);
      PointCloud sampled = subsample(norm, cfg.k, sub_rng.fork(static_cast<std::uint64_t>(idx)).next_u64());
      out.push_back({sampled.tensor(), idx});
    }
  };
  prep(ds.splits.train, setup.train);
  prep(ds.splits.val, setup.val);
  return setup;
}

inline Tensor<float> rotate_tensor(const Tensor<float>& pts, double sigma, std::uint64_t seed,
                                   RotationAxis axis) {
  PointCloud c = PointCloud::from_tensor(pts);
  return random_rotation(c, sigma, seed, axis).tensor();
}

struct SelfLossValues {
  double acd = 0, mse = 0, cd = 0, emd = 0, total = 0;
};

// Shared forward: encode -> canonical -> inverse with the adaptive Chamfer
// and composite reconstruction terms. Used by both training steps (recording
// graphs) and probe/validation passes (eval graphs).
inline SelfLossValues build_self_loss(Graph<float>& g, CpaeModelT<float>& model,
                                      const Tensor<float>& pts, float alpha,
                                      const LossWeights<float>& w, EmdStrategy emd,
                                      int exact_limit, Var* loss_out = nullptr) {
  const Var p = g.input(pts);
  const Var z = model.encode(g, p);
  const Var prim = model.canonical(g, p, z);
  const Var rec = model.inverse(g, prim, z);
  const Var acd = g.adaptive_chamfer(prim, g.input(model.sphere()), alpha, &model.sphere_index());
  const auto parts = loss_rec(g, rec, p, w, emd, exact_limit);
  const Var total = g.add(acd, parts.total);
  if (loss_out) *loss_out = total;
  SelfLossValues v;
  v.acd = g.scalar_value(acd);
  v.mse = g.scalar_value(parts.mse);
  v.cd = g.scalar_value(parts.chamfer);
  v.emd = g.scalar_value(parts.emd);
  v.total = g.scalar_value(total);
  return v;
}

inline double eval_probe_loss(CpaeModelT<float>& model, const std::vector<PreparedShape>& shapes,
                              const TrainConfig& cfg, float alpha) {
  double acc = 0;
  for (const auto& s : shapes) {
    Graph<float> g(Graph<float>::Mode::Eval);
    acc += build_self_loss(g, model, s.points, alpha, cfg.weights(), cfg.resolve_emd(),
                           cfg.exact_emd_limit)
               .total;
  }
  return shapes.empty() ? 0.0 : acc / static_cast<double>(shapes.size());
}

// Mean | ||u|| - 1 | of canonical-map outputs over the given shapes.
inline double sphere_adherence(CpaeModelT<float>& model, const std::vector<PreparedShape>& shapes) {
  double acc = 0;
  std::int64_t count = 0;
  for (const auto& s : shapes) {
    Graph<float> g(Graph<float>::Mode::Eval);
    const Var p = g.input(s.points);
    const Var z = model.encode(g, p);
    const Var prim = model.canonical(g, p, z);
    const auto& v = g.val(prim);
    const int n = g.shape(prim)[0];
    for (int i = 0; i < n; ++i) {
      const double norm = std::sqrt(
          static_cast<double>(v[3 * i]) * v[3 * i] + static_cast<double>(v[3 * i + 1]) * v[3 * i + 1] +
          static_cast<double>(v[3 * i + 2]) * v[3 * i + 2]);
      acc += std::abs(norm - 1.0);
      ++count;
    }
  }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

// Validation cross-reconstruction Chamfer over fixed ordered val pairs.
inline double val_cross_chamfer(CpaeModelT<float>& model, const std::vector<PreparedShape>& val,
                                int max_pairs = 12) {
  if (val.size() < 2) return 0.0;
  double acc = 0;
  int used = 0;
  for (std::size_t a = 0; a < val.size() && used < max_pairs; ++a)
    for (std::size_t b = 0; b < val.size() && used < max_pairs; ++b) {
      if (a == b) continue;
      Graph<float> g(Graph<float>::Mode::Eval);
      const Var pa = g.input(val[a].points);
      const Var pb = g.input(val[b].points);
      const Var za = model.encode(g, pa);
      const Var zb = model.encode(g, pb);
      const Var ua = model.canonical(g, pa, za);
      const Var decoded = model.inverse(g, ua, zb);
      acc += g.scalar_value(g.chamfer(decoded, pb));
      ++used;
    }
  return used == 0 ? 0.0 : acc / used;
}

}  // namespace detail

// Stage 1, pre-training: adaptive Chamfer (alpha = 1) plus the composite
// reconstruction loss, shapes visited in seeded shuffled batches.
inline StageResult train_stage1(CpaeModelT<float>& model, const Dataset& ds,
                                const TrainConfig& cfg, LossCsvWriter* csv = nullptr) {
  auto setup = detail::prepare(ds, cfg);
  Adam<float> opt(model.parameters(),
                  {static_cast<float>(cfg.lr), 0.9f, 0.999f, 1e-8f,
                   static_cast<float>(cfg.weight_decay)});

  const int ntrain = static_cast<int>(setup.train.size());
  const int batches_per_epoch = (ntrain + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps =
      static_cast<std::int64_t>(cfg.stage1_epochs) * batches_per_epoch;

  StageResult result;
  // Probe batch: the first batch under the seed, evaluated before and after.
  std::vector<detail::PreparedShape> probe(
      setup.train.begin(), setup.train.begin() + std::min(ntrain, cfg.batch_size));
  result.probe_loss_init = detail::eval_probe_loss(model, probe, cfg, 1.0f);

  std::vector<NamedTensor> last_good = model.state_dict();
  Rng order_rng = Rng(cfg.seed).fork(0xe9);
  Rng rot_rng = Rng(cfg.seed).fork(0x40);
  Rng resample_rng = Rng(cfg.seed).fork(0x7c);

  std::vector<int> order(ntrain);
  for (int i = 0; i < ntrain; ++i) order[i] = i;

  std::int64_t step = 0;
  try {
    for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
      order_rng.shuffle(order);
      if (cfg.resample_each_epoch && epoch > 0) {
        for (auto& s : setup.train) {
          auto [norm, tf] = normalize_cloud(ds.clouds[s.dataset_index]);
          s.points = subsample(norm, cfg.k, resample_rng.next_u64()).tensor();
        }
      }
      for (int b0 = 0; b0 < ntrain; b0 += cfg.batch_size) {
        const int bn = std::min(cfg.batch_size, ntrain - b0);
        const float alpha = static_cast<float>(
            alpha_schedule(1, step, cfg.alpha_mode, total_steps));

        std::vector<Tensor<float>> batch(bn);
        for (int i = 0; i < bn; ++i) {
          const auto& shape = setup.train[order[b0 + i]];
          batch[i] = cfg.rotation_sigma > 0
                         ? detail::rotate_tensor(shape.points, cfg.rotation_sigma,
                                                 rot_rng.next_u64(), cfg.rotation_axis)
                         : shape.points;
        }

        std::vector<Graph<float>> graphs;
        graphs.reserve(bn);
        for (int i = 0; i < bn; ++i) graphs.emplace_back(Graph<float>::Mode::Train);
        std::vector<detail::SelfLossValues> vals(bn);
#pragma omp parallel for schedule(dynamic, 1)
        for (int i = 0; i < bn; ++i) {
          Var loss;
          vals[i] = detail::build_self_loss(graphs[i], model, batch[i], alpha, cfg.weights(),
                                            cfg.resolve_emd(), cfg.exact_emd_limit, &loss);
          graphs[i].backward(loss);
        }
        const float scale = 1.0f / static_cast<float>(bn);
        for (int i = 0; i < bn; ++i) {
          graphs[i].flush_param_grads(scale);
          graphs[i].run_deferred();
        }
        opt.step();
        opt.zero_grad();
        ++step;

        LossRow row;
        row.step = step;
        row.alpha = alpha;
        for (const auto& v : vals) {
          row.acd += v.acd / bn;
          row.mse += v.mse / bn;
          row.cd += v.cd / bn;
          row.emd += v.emd / bn;
        }
        result.log.push_back(row);
        if (csv) csv->write(row);
        if (step % cfg.snapshot_every == 0) last_good = model.state_dict();
      }
    }
  } catch (const TrainingDivergedError&) {
    model.load_state_dict(last_good);
    throw;
  }

  result.steps = step;
  result.probe_loss_final = detail::eval_probe_loss(model, probe, cfg, 1.0f);
  result.val_sphere_adherence = detail::sphere_adherence(
      model, setup.val.empty() ? setup.train : setup.val);
  model.stages_completed = std::max(model.stages_completed, 1);
  return result;
}

// Stage 2, fine-tuning: per pair, self losses for the source (alpha = 0)
// plus cross-reconstruction in both directions. Stops when the validation
// cross-Chamfer has not improved for `stage2_patience` evaluations; the
// best-validation parameters are restored on exit.
inline StageResult train_stage2(CpaeModelT<float>& model, const Dataset& ds,
                                const TrainConfig& cfg, bool use_cross = true,
                                LossCsvWriter* csv = nullptr) {
  if (model.stages_completed < 1)
    CPAE_LOG_WARN("stage-2 fine-tuning on a model without stage-1 pre-training");
  auto setup = detail::prepare(ds, cfg);
  Adam<float> opt(model.parameters(),
                  {static_cast<float>(cfg.lr), 0.9f, 0.999f, 1e-8f,
                   static_cast<float>(cfg.weight_decay)});

  const int ntrain = static_cast<int>(setup.train.size());
  PairSampler pairs(ntrain, Rng(cfg.seed).fork(0xab).next_u64());
  Rng rot_rng = Rng(cfg.seed).fork(0x41);

  // Rotated-training runs are validated in the same unaligned regime.
  if (cfg.rotation_sigma > 0)
    for (auto& s : setup.val)
      s.points = detail::rotate_tensor(s.points, cfg.rotation_sigma, rot_rng.next_u64(),
                                       cfg.rotation_axis);

  StageResult result;
  result.val_cross_initial = detail::val_cross_chamfer(model, setup.val);
  double best_val = result.val_cross_initial;
  std::vector<NamedTensor> best_state = model.state_dict();
  std::vector<NamedTensor> last_good = model.state_dict();
  int evals_since_best = 0;

  std::int64_t step = 0;
  try {
    while (step < cfg.stage2_max_steps) {
      const int bn = std::min(cfg.batch_size, std::max(1, ntrain));
      std::vector<std::pair<int, int>> batch_pairs(bn);
      for (auto& pr : batch_pairs) pr = pairs.next();
      std::vector<Tensor<float>> tens_a(bn), tens_b(bn);
      for (int i = 0; i < bn; ++i) {
        const auto& sa = setup.train[batch_pairs[i].first];
        const auto& sb = setup.train[batch_pairs[i].second];
        if (cfg.rotation_sigma > 0) {
          tens_a[i] = detail::rotate_tensor(sa.points, cfg.rotation_sigma, rot_rng.next_u64(),
                                            cfg.rotation_axis);
          tens_b[i] = detail::rotate_tensor(sb.points, cfg.rotation_sigma, rot_rng.next_u64(),
                                            cfg.rotation_axis);
        } else {
          tens_a[i] = sa.points;
          tens_b[i] = sb.points;
        }
      }

      std::vector<Graph<float>> graphs;
      graphs.reserve(bn);
      for (int i = 0; i < bn; ++i) graphs.emplace_back(Graph<float>::Mode::Train);
      std::vector<detail::SelfLossValues> vals(bn);
      std::vector<double> cross_vals(bn, 0.0);
#pragma omp parallel for schedule(dynamic, 1)
      for (int i = 0; i < bn; ++i) {
        Graph<float>& g = graphs[i];
        const Var pa = g.input(tens_a[i]);
        const Var za = model.encode(g, pa);
        const Var ua = model.canonical(g, pa, za);
        const Var ra = model.inverse(g, ua, za);
        const Var acd =
            g.adaptive_chamfer(ua, g.input(model.sphere()), 0.0f, &model.sphere_index());
        const auto rec = loss_rec(g, ra, pa, cfg.weights(), cfg.resolve_emd(),
                                  cfg.exact_emd_limit);
        Var total = g.add(acd, rec.total);
        if (use_cross) {
          const Var pb = g.input(tens_b[i]);
          const Var zb = model.encode(g, pb);
          const Var ub = model.canonical(g, pb, zb);
          const Var dec_ab = model.inverse(g, ua, zb);
          const Var dec_ba = model.inverse(g, ub, za);
          const Var cross = g.add(loss_cross(g, dec_ab, pb), loss_cross(g, dec_ba, pa));
          cross_vals[i] = g.scalar_value(cross);
          total = g.add(total, cross);
        }
        vals[i].acd = g.scalar_value(acd);
        vals[i].mse = g.scalar_value(rec.mse);
        vals[i].cd = g.scalar_value(rec.chamfer);
        vals[i].emd = g.scalar_value(rec.emd);
        g.backward(total);
      }
      const float scale = 1.0f / static_cast<float>(bn);
      for (int i = 0; i < bn; ++i) {
        graphs[i].flush_param_grads(scale);
        graphs[i].run_deferred();
      }
      opt.step();
      opt.zero_grad();
      ++step;

      LossRow row;
      row.step = step;
      row.alpha = 0;
      for (int i = 0; i < bn; ++i) {
        row.acd += vals[i].acd / bn;
        row.mse += vals[i].mse / bn;
        row.cd += vals[i].cd / bn;
        row.emd += vals[i].emd / bn;
        row.cross += cross_vals[i] / bn;
      }
      result.log.push_back(row);
      if (csv) csv->write(row);
      if (step % cfg.snapshot_every == 0) last_good = model.state_dict();

      if (step % cfg.stage2_eval_every == 0 && !setup.val.empty()) {
        const double v = detail::val_cross_chamfer(model, setup.val);
        if (v < best_val) {
          best_val = v;
          best_state = model.state_dict();
          evals_since_best = 0;
        } else if (++evals_since_best >= cfg.stage2_patience) {
          break;
        }
      }
    }
  } catch (const TrainingDivergedError&) {
    model.load_state_dict(last_good);
    throw;
  }

  if (!setup.val.empty()) {
    // Model selection on validation cross-Chamfer.
    const double v = detail::val_cross_chamfer(model, setup.val);
    if (v < best_val) {
      best_val = v;
    } else {
      model.load_state_dict(best_state);
    }
  }
  result.steps = step;
  result.val_cross_best = best_val;
  result.val_sphere_adherence = detail::sphere_adherence(
      model, setup.val.empty() ? setup.train : setup.val);
  model.stages_completed = std::max(model.stages_completed, 2);
  return result;
}

}  // namespace cpae
