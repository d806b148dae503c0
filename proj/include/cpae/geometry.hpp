#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/rng.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

template <typename S>
using Pt3 = std::array<S, 3>;

template <typename S>
inline Pt3<S> sub3(const Pt3<S>& a, const Pt3<S>& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

template <typename S>
inline S dist2(const Pt3<S>& a, const Pt3<S>& b) {
  const S dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

template <typename S>
inline S norm3(const Pt3<S>& a) {
  return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}

// Point cloud in world coordinates with optional per-point annotations.
template <typename S>
struct PointCloudT {
  struct Keypoint {
    int id = 0;
    Pt3<S> pos{};
  };

  std::vector<Pt3<S>> points;
  std::vector<int> labels;        // empty or one per point
  std::vector<Pt3<S>> colors;     // empty or one per point, RGB in [0,1]
  std::vector<Keypoint> keypoints;

  int size() const { return static_cast<int>(points.size()); }
  bool has_labels() const { return !labels.empty(); }
  bool has_colors() const { return !colors.empty(); }

  void validate() const {
    if (points.empty()) throw ContractError("point cloud must contain at least one point");
    for (const auto& p : points)
      for (S c : p)
        if (!std::isfinite(static_cast<double>(c)))
          throw ContractError("non-finite coordinate in point cloud");
    if (!labels.empty() && labels.size() != points.size())
      throw ShapeError("label count does not match point count");
    if (!colors.empty() && colors.size() != points.size())
      throw ShapeError("color count does not match point count");
  }

  Tensor<S> tensor() const {
    std::vector<S> v(points.size() * 3);
    for (std::size_t i = 0; i < points.size(); ++i) {
      v[3 * i + 0] = points[i][0];
      v[3 * i + 1] = points[i][1];
      v[3 * i + 2] = points[i][2];
    }
    return Tensor<S>({size(), 3}, std::move(v));
  }

  static PointCloudT from_tensor(const Tensor<S>& t) {
    if (t.shape.size() != 2 || t.shape[1] != 3) throw ShapeError("expected k x 3 tensor");
    PointCloudT c;
    c.points.resize(t.shape[0]);
    for (int i = 0; i < t.shape[0]; ++i) c.points[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
    return c;
  }
};

using PointCloud = PointCloudT<float>;

// Record of the centering/scaling applied by normalize_cloud; maps model
// outputs back to the original frame.
template <typename S>
struct NormalizeTransform {
  Pt3<S> centroid{};
  S scale = S(1);  // multiply by this to go world -> normalized

  Pt3<S> to_normalized(const Pt3<S>& p) const {
    return {(p[0] - centroid[0]) * scale, (p[1] - centroid[1]) * scale,
            (p[2] - centroid[2]) * scale};
  }
  Pt3<S> to_world(const Pt3<S>& p) const {
    return {p[0] / scale + centroid[0], p[1] / scale + centroid[1], p[2] / scale + centroid[2]};
  }
};

// Center at the centroid and scale so the farthest point sits at radius 1.
template <typename S>
inline std::pair<PointCloudT<S>, NormalizeTransform<S>> normalize_cloud(const PointCloudT<S>& cloud) {
  cloud.validate();
  const int k = cloud.size();
  Pt3<double> c{0, 0, 0};
  for (const auto& p : cloud.points) {
    c[0] += p[0];
    c[1] += p[1];
    c[2] += p[2];
  }
  c[0] /= k;
  c[1] /= k;
  c[2] /= k;
  double r2max = 0;
  for (const auto& p : cloud.points) {
    const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    r2max = std::max(r2max, dx * dx + dy * dy + dz * dz);
  }
  const double r = std::sqrt(r2max);
  if (r < 1e-12) throw DegenerateCloudError("all points coincide; cannot normalize");

  NormalizeTransform<S> t;
  t.centroid = {static_cast<S>(c[0]), static_cast<S>(c[1]), static_cast<S>(c[2])};
  t.scale = static_cast<S>(1.0 / r);

  PointCloudT<S> out = cloud;
  for (auto& p : out.points) p = t.to_normalized(p);
  for (auto& kp : out.keypoints) kp.pos = t.to_normalized(kp.pos);
  return {std::move(out), t};
}

template <typename S>
inline S max_radius(const PointCloudT<S>& cloud) {
  S r2 = 0;
  for (const auto& p : cloud.points) r2 = std::max(r2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  return std::sqrt(r2);
}

// Deterministic near-uniform sphere sample (Fibonacci lattice). The seed
// rotates the lattice's azimuthal phase so different seeds give different but
// reproducible sample sets.
template <typename S = float>
inline std::vector<Pt3<S>> sample_sphere(int count, std::uint64_t seed) {
  if (count < 4) throw ContractError("sphere sample count must be >= 4");
  Rng rng(seed);
  const double phase = rng.uniform() * 6.283185307179586476925286766559;
  const double golden = 2.399963229728653;  // 2*pi*(2 - golden ratio)
  std::vector<Pt3<S>> pts(count);
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i + phase;
    pts[i] = {static_cast<S>(r * std::cos(phi)), static_cast<S>(r * std::sin(phi)),
              static_cast<S>(z)};
  }
  return pts;
}

enum class RotationAxis { Up, Full3d };

// Rotate about the up (z) axis by an angle drawn from N(0, sigma^2); Full3d
// additionally randomizes the rotation axis.
template <typename S>
inline PointCloudT<S> random_rotation(const PointCloudT<S>& cloud, double sigma, std::uint64_t seed,
                                      RotationAxis axis = RotationAxis::Up) {
  if (sigma < 0) throw ContractError("rotation sigma must be >= 0");
  Rng rng(seed);
  const double angle = sigma == 0 ? 0.0 : rng.normal(0.0, sigma);
  Pt3<double> ax{0, 0, 1};
  if (axis == RotationAxis::Full3d) {
    double n2;
    do {
      ax = {rng.normal(), rng.normal(), rng.normal()};
      n2 = ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2];
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    ax = {ax[0] * inv, ax[1] * inv, ax[2] * inv};
  }
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  // Rodrigues rotation matrix.
  const double m[3][3] = {
      {c + ax[0] * ax[0] * t, ax[0] * ax[1] * t - ax[2] * s, ax[0] * ax[2] * t + ax[1] * s},
      {ax[1] * ax[0] * t + ax[2] * s, c + ax[1] * ax[1] * t, ax[1] * ax[2] * t - ax[0] * s},
      {ax[2] * ax[0] * t - ax[1] * s, ax[2] * ax[1] * t + ax[0] * s, c + ax[2] * ax[2] * t}};
  auto rot = [&](const Pt3<S>& p) -> Pt3<S> {
    return {static_cast<S>(m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2]),
            static_cast<S>(m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2]),
            static_cast<S>(m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2])};
  };
  PointCloudT<S> out = cloud;
  for (auto& p : out.points) p = rot(p);
  for (auto& kp : out.keypoints) kp.pos = rot(kp.pos);
  return out;
}

// kd-tree over a fixed point set. Queries return exactly the brute-force
// nearest neighbor; distance ties go to the lowest point index.
template <typename S>
class NnIndex {
 public:
  struct Hit {
    int index = -1;
    S dist2 = std::numeric_limits<S>::max();
  };

  NnIndex() = default;

  explicit NnIndex(std::vector<Pt3<S>> pts) : pts_(std::move(pts)) {
    if (pts_.empty()) throw ContractError("NnIndex requires a nonempty point set");
    order_.resize(pts_.size());
    for (std::size_t i = 0; i < pts_.size(); ++i) order_[i] = static_cast<int>(i);
    nodes_.reserve(pts_.size());
    root_ = build(0, static_cast<int>(pts_.size()), 0);
  }

  explicit NnIndex(const Tensor<S>& t) : NnIndex(to_points(t)) {}

  int size() const { return static_cast<int>(pts_.size()); }
  const std::vector<Pt3<S>>& points() const { return pts_; }

  Hit nearest(const Pt3<S>& q) const {
    Hit best;
    search(root_, q, best);
    return best;
  }

 private:
  struct Node {
    int point;  // index into pts_
    int left = -1, right = -1;
    int axis;
  };

  static std::vector<Pt3<S>> to_points(const Tensor<S>& t) {
    if (t.shape.size() != 2 || t.shape[1] != 3) throw ShapeError("NnIndex expects k x 3 tensor");
    std::vector<Pt3<S>> pts(t.shape[0]);
    for (int i = 0; i < t.shape[0]; ++i) pts[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
    return pts;
  }

  int build(int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](int a, int b) {
                       if (pts_[a][axis] != pts_[b][axis]) return pts_[a][axis] < pts_[b][axis];
                       return a < b;
                     });
    Node n;
    n.point = order_[mid];
    n.axis = axis;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(n);
    nodes_[id].left = build(lo, mid, depth + 1);
    nodes_[id].right = build(mid + 1, hi, depth + 1);
    return id;
  }

  void search(int node, const Pt3<S>& q, Hit& best) const {
    if (node < 0) return;
    const Node& n = nodes_[node];
    const Pt3<S>& p = pts_[n.point];
    const S d2 = dist2(q, p);
    if (d2 < best.dist2 || (d2 == best.dist2 && n.point < best.index)) {
      best.dist2 = d2;
      best.index = n.point;
    }
    const S delta = q[n.axis] - p[n.axis];
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search(near, q, best);
    // Equal boundary distance must still be explored: an equally distant
    // point with a lower index may sit on the far side.
    if (delta * delta <= best.dist2) search(far, q, best);
  }

  std::vector<Pt3<S>> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

template <typename S>
inline typename NnIndex<S>::Hit brute_force_nearest(const std::vector<Pt3<S>>& pts, const Pt3<S>& q) {
  typename NnIndex<S>::Hit best;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const S d2 = dist2(q, pts[i]);
    if (d2 < best.dist2) {
      best.dist2 = d2;
      best.index = static_cast<int>(i);
    }
  }
  return best;
}

// One direction of a Chamfer term: for each query the nearest target point
// and the (plain L2, not squared) distance.
template <typename S>
struct DirectedNn {
  std::vector<int> index;
  std::vector<S> dist;
  double mean = 0;      // mean L2 distance
  double mean_sq = 0;   // mean squared distance (for the squared-variant flag)
};

template <typename S>
inline DirectedNn<S> directed_nn(const std::vector<Pt3<S>>& queries, const std::vector<Pt3<S>>& targets,
                                 const NnIndex<S>* target_index = nullptr) {
  if (queries.empty() || targets.empty())
    throw ContractError("chamfer terms require nonempty point sets");
  DirectedNn<S> out;
  const int n = static_cast<int>(queries.size());
  out.index.resize(n);
  out.dist.resize(n);
  // Small targets: brute force beats tree construction.
  const bool use_tree = target_index != nullptr || targets.size() >= 64;
  NnIndex<S> local;
  const NnIndex<S>* tree = target_index;
  if (use_tree && !tree) {
    local = NnIndex<S>(targets);
    tree = &local;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const auto hit = use_tree ? tree->nearest(queries[i]) : brute_force_nearest(targets, queries[i]);
    out.index[i] = hit.index;
    out.dist[i] = std::sqrt(hit.dist2);
  }
  double acc = 0, acc2 = 0;
  for (int i = 0; i < n; ++i) {
    acc += out.dist[i];
    acc2 += static_cast<double>(out.dist[i]) * out.dist[i];
  }
  out.mean = acc / n;
  out.mean_sq = acc2 / n;
  return out;
}

// Symmetric Chamfer distance, mean L2 in both directions. The squared flag
// switches both terms to squared distances (speed comparison variant).
template <typename S>
inline double chamfer_value(const std::vector<Pt3<S>>& a, const std::vector<Pt3<S>>& b,
                            bool squared = false) {
  const auto ab = directed_nn(a, b);
  const auto ba = directed_nn(b, a);
  return squared ? ab.mean_sq + ba.mean_sq : ab.mean + ba.mean;
}

// Forward term plus alpha-weighted reverse term (Chamfer when alpha == 1).
template <typename S>
inline double adaptive_chamfer_value(const std::vector<Pt3<S>>& instance,
                                     const std::vector<Pt3<S>>& reference, double alpha,
                                     const NnIndex<S>* reference_index = nullptr) {
  if (alpha < 0 || alpha > 1) throw ContractError("alpha must lie in [0, 1]");
  const auto fwd = directed_nn(instance, reference, reference_index);
  double v = fwd.mean;
  if (alpha > 0) {
    const auto rev = directed_nn(reference, instance);
    v += alpha * rev.mean;
  }
  return v;
}

// Minimum-cost perfect matching on a dense cost matrix (O(n^3) shortest
// augmenting path with potentials). Returns column assigned to each row.
inline std::vector<int> min_cost_assignment(const std::vector<double>& cost, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

template <typename S>
struct EmdResult {
  double mean_cost = 0;
  std::vector<int> assignment;  // assignment[i] = matched index in B
};

// Exact Earth Mover's Distance between equal-size sets: optimal bijection by
// the Hungarian algorithm, mean L2 matched distance.
template <typename S>
inline EmdResult<S> emd_exact(const std::vector<Pt3<S>>& a, const std::vector<Pt3<S>>& b,
                              int exact_limit = 512) {
  if (a.size() != b.size()) throw ContractError("emd_exact requires equal cardinalities");
  if (a.empty()) throw ContractError("emd_exact requires nonempty sets");
  const int n = static_cast<int>(a.size());
  if (n > exact_limit)
    throw ContractError("emd_exact limited to " + std::to_string(exact_limit) + " points, got " +
                        std::to_string(n));
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cost[static_cast<std::size_t>(i) * n + j] = std::sqrt(static_cast<double>(dist2(a[i], b[j])));
  EmdResult<S> res;
  res.assignment = min_cost_assignment(cost, n);
  double acc = 0;
  for (int i = 0; i < n; ++i) acc += cost[static_cast<std::size_t>(i) * n + res.assignment[i]];
  res.mean_cost = acc / n;
  return res;
}

struct AuctionParams {
  double eps_start = 0.1;
  double eps_final = 1e-3;
  double eps_scale = 5.0;        // epsilon divisor between scaling phases
  std::int64_t max_bids = -1;    // default: derived from n and the cost range
};

// Approximate EMD via Bertsekas' auction algorithm with epsilon scaling.
// Total matched cost is within n * eps_final of the optimum.
template <typename S>
inline EmdResult<S> emd_auction(const std::vector<Pt3<S>>& a, const std::vector<Pt3<S>>& b,
                                const AuctionParams& params = {}) {
  if (a.size() != b.size()) throw ContractError("emd_auction requires equal cardinalities");
  if (a.empty()) throw ContractError("emd_auction requires nonempty sets");
  const int n = static_cast<int>(a.size());
  if (n > 8192) throw ContractError("emd_auction dense cost matrix capped at 8192 points");

  // benefit[i][j] = -distance; the auction maximizes total benefit.
  std::vector<double> benefit(static_cast<std::size_t>(n) * n);
  double cost_range = 0;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      benefit[static_cast<std::size_t>(i) * n + j] =
          -std::sqrt(static_cast<double>(dist2(a[i], b[j])));
  for (const double v : benefit) cost_range = std::max(cost_range, -v);

  std::vector<double> price(n, 0.0);
  std::vector<int> owner(n, -1);     // object -> person
  std::vector<int> assigned(n, -1);  // person -> object

  std::int64_t max_bids = params.max_bids;
  if (max_bids < 0) {
    const double phases = std::ceil(std::log(params.eps_start / params.eps_final) /
                                    std::log(params.eps_scale)) + 1.0;
    max_bids = static_cast<std::int64_t>(
        phases * n * (cost_range / params.eps_final + 2.0 * n) + 1000000);
  }

  std::int64_t bids = 0;
  double eps = std::max(params.eps_start, params.eps_final);
  while (true) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    std::vector<int> queue(n);
    for (int i = 0; i < n; ++i) queue[i] = i;
    std::size_t head = 0;
    std::vector<int> pending;
    pending.reserve(n);
    while (head < queue.size() || !pending.empty()) {
      if (head == queue.size()) {
        queue.swap(pending);
        pending.clear();
        head = 0;
      }
      const int person = queue[head++];
      if (assigned[person] >= 0) continue;
      if (++bids > max_bids)
        throw ApproximationFailureError("auction assignment did not converge within bid cap");
      // Best and second-best net value for this person.
      const double* row = &benefit[static_cast<std::size_t>(person) * n];
      int best_j = -1;
      double best_v = -std::numeric_limits<double>::infinity();
      double second_v = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        const double v = row[j] - price[j];
        if (v > best_v) {
          second_v = best_v;
          best_v = v;
          best_j = j;
        } else if (v > second_v) {
          second_v = v;
        }
      }
      if (n == 1) second_v = best_v;
      price[best_j] += (best_v - second_v) + eps;
      const int prev = owner[best_j];
      owner[best_j] = person;
      assigned[person] = best_j;
      if (prev >= 0) {
        assigned[prev] = -1;
        pending.push_back(prev);
      }
    }
    if (eps <= params.eps_final) break;
    eps = std::max(eps / params.eps_scale, params.eps_final);
  }

  EmdResult<S> res;
  res.assignment = std::move(assigned);
  double acc = 0;
  for (int i = 0; i < n; ++i)
    acc -= benefit[static_cast<std::size_t>(i) * n + res.assignment[i]];
  res.mean_cost = acc / n;
  return res;
}

}  // namespace cpae
