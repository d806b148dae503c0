#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/geometry.hpp"
#include "cpae/model.hpp"

namespace cpae {

// How the confidence distance D (C = 1 - D) is measured.
//   Residual: decode-to-snap residual ||decoded - snapped|| / target radius.
//             Low confidence where the decoder cannot place the query on the
//             target surface, which is what flags missing counterparts.
//   Literal:  ||query - snapped|| / target radius.
enum class ConfidenceMode { Residual, Literal };

inline ConfidenceMode confidence_mode_from_name(const std::string& s) {
  if (s == "residual") return ConfidenceMode::Residual;
  if (s == "literal") return ConfidenceMode::Literal;
  throw ContractError("unknown confidence mode '" + s + "'");
}

struct Correspondence {
  int source_index = -1;
  int target_index = -1;
  Pt3<float> decoded{};  // inverse-mapped position in the target's frame
  float confidence = 0;
  bool exists = false;
};

struct CorrespondenceMap {
  std::vector<Correspondence> rows;
  float tau = 0.9f;
};

namespace detail {

inline void check_trained(const CpaeModelT<float>& model) {
  if (model.stages_completed < 1)
    throw ContractError("model has not been trained; run the two-stage training first");
}

inline void check_tau(double tau) {
  if (tau < 0 || tau > 1) throw ContractError("tau must lie in [0, 1]");
}

}  // namespace detail

// Route query positions (which live on/near source) through the canonical
// space into the target shape. One latent per cloud, all queries batched.
inline CorrespondenceMap transfer_points(const Tensor<float>& queries, const PointCloud& source,
                                         const PointCloud& target, CpaeModelT<float>& model,
                                         double tau = 0.9,
                                         ConfidenceMode mode = ConfidenceMode::Residual) {
  detail::check_trained(model);
  detail::check_tau(tau);
  if (target.size() < 1) throw ContractError("target cloud is empty");
  if (queries.shape.size() != 2 || queries.shape[1] != 3)
    throw ShapeError("queries must be an n x 3 tensor");

  Graph<float> g;
  const Var q = g.input(queries);
  const Var za = g.input(model.encode_latent(source));
  const Var zb = g.input(model.encode_latent(target));
  const Var canonical = model.canonical(g, q, za);
  const Var decoded = model.inverse(g, canonical, zb);
  const auto& dec = g.val(decoded);

  NnIndex<float> index(target.points);
  const float rho = max_radius(target);
  const int n = queries.shape[0];
  CorrespondenceMap map;
  map.tau = static_cast<float>(tau);
  map.rows.resize(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    Correspondence& c = map.rows[i];
    c.source_index = i;
    c.decoded = {dec[3 * static_cast<std::size_t>(i)], dec[3 * static_cast<std::size_t>(i) + 1],
                 dec[3 * static_cast<std::size_t>(i) + 2]};
    const auto hit = index.nearest(c.decoded);
    c.target_index = hit.index;
    float dist;
    if (mode == ConfidenceMode::Residual) {
      dist = std::sqrt(hit.dist2);
    } else {
      const Pt3<float> query = {queries.at(i, 0), queries.at(i, 1), queries.at(i, 2)};
      dist = std::sqrt(dist2(query, target.points[hit.index]));
    }
    const float d = std::clamp(rho > 0 ? dist / rho : dist, 0.0f, 1.0f);
    c.confidence = 1.0f - d;
    c.exists = c.confidence >= map.tau;
  }
  return map;
}

// Dense correspondence from every source point into the target.
inline CorrespondenceMap transfer_set(const PointCloud& source, const PointCloud& target,
                                      CpaeModelT<float>& model, double tau = 0.9,
                                      ConfidenceMode mode = ConfidenceMode::Residual) {
  return transfer_points(source.tensor(), source, target, model, tau, mode);
}

struct PointTransfer {
  Pt3<float> position{};  // snapped target point
  int target_index = -1;
  float confidence = 0;
  bool exists = false;
  Pt3<float> decoded{};
};

inline PointTransfer transfer_point(const Pt3<float>& query, const PointCloud& source,
                                    const PointCloud& target, CpaeModelT<float>& model,
                                    double tau = 0.9,
                                    ConfidenceMode mode = ConfidenceMode::Residual) {
  Tensor<float> q({1, 3}, {query[0], query[1], query[2]});
  const auto map = transfer_points(q, source, target, model, tau, mode);
  const Correspondence& c = map.rows[0];
  return {target.points[c.target_index], c.target_index, c.confidence, c.exists, c.decoded};
}

struct TransferredKeypoint {
  int id = 0;
  Pt3<float> position{};  // predicted position on the target (snapped)
  float confidence = 0;
  bool far_from_source = false;  // query sat > 0.1 away from the source cloud
};

// Forward keypoint transfer: each source keypoint routed into the target.
inline std::vector<TransferredKeypoint> keypoint_transfer(const PointCloud& source,
                                                          const PointCloud& target,
                                                          CpaeModelT<float>& model,
                                                          double tau = 0.9,
                                                          ConfidenceMode mode = ConfidenceMode::Residual) {
  if (source.keypoints.empty()) return {};
  const int n = static_cast<int>(source.keypoints.size());
  Tensor<float> q = Tensor<float>::zeros({n, 3});
  for (int i = 0; i < n; ++i)
    for (int x = 0; x < 3; ++x) q.values[3 * static_cast<std::size_t>(i) + x] = source.keypoints[i].pos[x];
  const auto map = transfer_points(q, source, target, model, tau, mode);

  NnIndex<float> source_index(source.points);
  std::vector<TransferredKeypoint> out(n);
  for (int i = 0; i < n; ++i) {
    out[i].id = source.keypoints[i].id;
    out[i].position = target.points[map.rows[i].target_index];
    out[i].confidence = map.rows[i].confidence;
    const auto hit = source_index.nearest(source.keypoints[i].pos);
    out[i].far_from_source = std::sqrt(hit.dist2) > 0.1f;
    if (out[i].far_from_source)
      CPAE_LOG_WARN("keypoint %d sits %.3f away from its source cloud", out[i].id,
                    std::sqrt(hit.dist2));
  }
  return out;
}

// Part labels for every target point via the reverse map (target -> source),
// so each target point receives exactly one label.
inline std::vector<int> label_transfer(const PointCloud& source, const PointCloud& target,
                                       CpaeModelT<float>& model,
                                       ConfidenceMode mode = ConfidenceMode::Residual) {
  if (!source.has_labels()) throw ContractError("label transfer requires labels on the source");
  const auto map = transfer_set(target, source, model, 0.0, mode);
  std::vector<int> labels(target.size());
  for (int i = 0; i < target.size(); ++i) labels[i] = source.labels[map.rows[i].target_index];
  return labels;
}

struct TexturedPoint {
  Pt3<float> color{};
  bool exists = false;
  float confidence = 0;
};

// Colors for every target point via the reverse map; points whose confidence
// falls below tau are flagged as having no correspondent.
inline std::vector<TexturedPoint> texture_transfer(const PointCloud& source,
                                                   const PointCloud& target,
                                                   CpaeModelT<float>& model, double tau = 0.9,
                                                   ConfidenceMode mode = ConfidenceMode::Residual) {
  if (!source.has_colors()) throw ContractError("texture transfer requires colors on the source");
  const auto map = transfer_set(target, source, model, tau, mode);
  std::vector<TexturedPoint> out(target.size());
  for (int i = 0; i < target.size(); ++i) {
    out[i].color = source.colors[map.rows[i].target_index];
    out[i].confidence = map.rows[i].confidence;
    out[i].exists = map.rows[i].exists;
  }
  return out;
}

// The instance primitive with index-aligned annotations carried over, plus
// the source keypoints mapped into the canonical space.
inline PointCloud export_primitive(const PointCloud& source, CpaeModelT<float>& model) {
  detail::check_trained(model);
  Graph<float> g;
  const Var pts = g.input(source.tensor());
  const Var z = model.encode(g, pts);
  const Var prim = model.canonical(g, pts, z);
  PointCloud out = PointCloud::from_tensor(g.value_tensor(prim));
  out.labels = source.labels;
  out.colors = source.colors;
  if (!source.keypoints.empty()) {
    const int n = static_cast<int>(source.keypoints.size());
    Tensor<float> q = Tensor<float>::zeros({n, 3});
    for (int i = 0; i < n; ++i)
      for (int x = 0; x < 3; ++x)
        q.values[3 * static_cast<std::size_t>(i) + x] = source.keypoints[i].pos[x];
    const Var kp_prim = model.canonical(g, g.input(q), z);
    const auto& v = g.val(kp_prim);
    for (int i = 0; i < n; ++i)
      out.keypoints.push_back({source.keypoints[i].id,
                               {v[3 * static_cast<std::size_t>(i)],
                                v[3 * static_cast<std::size_t>(i) + 1],
                                v[3 * static_cast<std::size_t>(i) + 2]}});
  }
  return out;
}

// Confidence field over each target: for every target point, the confidence
// that its correspondent exists in the source.
inline std::vector<std::vector<float>> confidence_heatmap(const PointCloud& source,
                                                          const std::vector<PointCloud>& targets,
                                                          CpaeModelT<float>& model,
                                                          double tau = 0.9,
                                                          ConfidenceMode mode = ConfidenceMode::Residual) {
  std::vector<std::vector<float>> out;
  out.reserve(targets.size());
  for (const auto& target : targets) {
    const auto map = transfer_set(target, source, model, tau, mode);
    std::vector<float> field(target.size());
    for (int i = 0; i < target.size(); ++i) field[i] = map.rows[i].confidence;
    out.push_back(std::move(field));
  }
  return out;
}

}  // namespace cpae
