#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/graph.hpp"

namespace cpae {

// Weights of the composite reconstruction objective.
template <typename S>
struct LossWeights {
  S mse = S(1e3);      // pointwise term
  S chamfer = S(1e1);  // Chamfer term
  S emd = S(1);        // Earth Mover term
};

enum class EmdStrategy {
  Exact,            // Hungarian; errors above the exact size limit
  Auction,          // epsilon-scaled auction; errors on non-convergence
  ChamferFallback,  // auction, fall back to a Chamfer term on failure
};

inline EmdStrategy emd_strategy_from_name(const std::string& s) {
  if (s == "exact") return EmdStrategy::Exact;
  if (s == "auction") return EmdStrategy::Auction;
  if (s == "chamfer-fallback") return EmdStrategy::ChamferFallback;
  throw ContractError("unknown emd strategy '" + s + "'");
}

template <typename S>
Var loss_mse_pointwise(Graph<S>& g, Var pred, Var target) {
  return g.mse_rows(pred, target);
}

template <typename S>
struct RecLossParts {
  Var total;
  Var mse;
  Var chamfer;
  Var emd;
  bool emd_fell_back = false;
};

// Composite reconstruction loss: mse_w * MSE + cd_w * CD + emd_w * EMD.
template <typename S>
RecLossParts<S> loss_rec(Graph<S>& g, Var pred, Var target, const LossWeights<S>& w,
                         EmdStrategy strategy = EmdStrategy::Exact, int exact_limit = 512,
                         const AuctionParams& auction = {}) {
  RecLossParts<S> parts;
  parts.mse = g.mse_rows(pred, target);
  parts.chamfer = g.chamfer(pred, target);
  switch (strategy) {
    case EmdStrategy::Exact:
      parts.emd = g.emd(pred, target, Graph<S>::EmdKind::Exact, exact_limit);
      break;
    case EmdStrategy::Auction:
      parts.emd = g.emd(pred, target, Graph<S>::EmdKind::Auction, exact_limit, auction);
      break;
    case EmdStrategy::ChamferFallback:
      try {
        parts.emd = g.emd(pred, target, Graph<S>::EmdKind::Auction, exact_limit, auction);
      } catch (const ApproximationFailureError&) {
        parts.emd = g.chamfer(pred, target);
        parts.emd_fell_back = true;
      }
      break;
  }
  parts.total =
      g.add(g.add(g.scale(parts.mse, w.mse), g.scale(parts.chamfer, w.chamfer)),
            g.scale(parts.emd, w.emd));
  return parts;
}

// Cross-reconstruction loss: Chamfer only, no index pairing (the decoded set
// is ordered like the source, not the target).
template <typename S>
Var loss_cross(Graph<S>& g, Var decoded, Var target) {
  return g.chamfer(decoded, target);
}

enum class AlphaMode { Step, Linear };

inline AlphaMode alpha_mode_from_name(const std::string& s) {
  if (s == "step") return AlphaMode::Step;
  if (s == "linear") return AlphaMode::Linear;
  throw ContractError("unknown alpha mode '" + s + "'");
}

// Reverse-term weight of the adaptive Chamfer loss. The two-stage step
// schedule (1 during pre-training, 0 during fine-tuning) is the default;
// linear mode decays across the pre-training steps instead.
inline double alpha_schedule(int stage, std::int64_t step, AlphaMode mode = AlphaMode::Step,
                             std::int64_t stage1_total_steps = 0) {
  if (stage != 1 && stage != 2) throw ContractError("stage must be 1 or 2");
  if (stage == 2) return 0.0;
  if (mode == AlphaMode::Step) return 1.0;
  if (stage1_total_steps <= 0) return 1.0;
  const double a = 1.0 - static_cast<double>(step) / static_cast<double>(stage1_total_steps);
  return a < 0.0 ? 0.0 : a;
}

// One row of the training loss log.
struct LossRow {
  std::int64_t step = 0;
  double acd = 0;
  double mse = 0;
  double cd = 0;
  double emd = 0;
  double cross = 0;
  double alpha = 0;
};

class LossCsvWriter {
 public:
  LossCsvWriter() = default;
  explicit LossCsvWriter(const std::string& path) {
    os_.open(path);
    if (!os_) throw IoError("cannot open loss log for writing: " + path);
    os_ << "step,L_ACD,L_MSE,L_CD,L_EMD,L_cross,alpha\n";
  }

  void write(const LossRow& r) {
    if (!os_.is_open()) return;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(r.step), r.acd, r.mse, r.cd, r.emd, r.cross, r.alpha);
    os_ << buf;
  }

 private:
  std::ofstream os_;
};

}  // namespace cpae
