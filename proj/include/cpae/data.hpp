#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpae/errors.hpp"
#include "cpae/geometry.hpp"
#include "cpae/rng.hpp"

namespace cpae {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Cloud file I/O
//
// Text format (.xyz): one point per line, whitespace separated:
//   x y z            coordinates only
//   x y z l          + integer part label
//   x y z r g b      + RGB color
//   x y z l r g b    + label and color
// '#' starts a comment; blank lines are skipped. All data lines must carry
// the same column count.
//
// Binary format (.cpcd), little-endian:
//   magic "CPCD" | u32 version | u32 k | u32 flags (bit0 labels, bit1 colors)
//   f32 coords [k*3] | i32 labels [k] (if flagged) | f32 colors [k*3] (if flagged)
//
// Keypoints ride in a CSV sidecar "<stem>.keypoints.csv" with rows
// shape_id,keypoint_id,x,y,z. Labels may alternatively sit in a "<stem>.labels"
// sidecar, one integer per point line.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCloudBinaryVersion = 1;

namespace detail {

inline fs::path keypoint_sidecar(const fs::path& cloud_path) {
  fs::path p = cloud_path;
  p.replace_extension("");
  p += ".keypoints.csv";
  return p;
}

inline fs::path label_sidecar(const fs::path& cloud_path) {
  fs::path p = cloud_path;
  p.replace_extension("");
  p += ".labels";
  return p;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": expected a number, got '" + tok + "'");
  }
}

inline int parse_int(const std::string& tok, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": expected an integer, got '" + tok + "'");
  }
}

}  // namespace detail

inline void save_keypoints_csv(const fs::path& path, const std::string& shape_id,
                               const std::vector<PointCloud::Keypoint>& kps, bool append = false) {
  std::ofstream os(path, append ? std::ios::app : std::ios::out);
  if (!os) throw IoError("cannot write keypoint file: " + path.string());
  if (!append) os << "shape_id,keypoint_id,x,y,z\n";
  char buf[160];
  for (const auto& kp : kps) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g,%.9g\n", shape_id.c_str(), kp.id,
                  static_cast<double>(kp.pos[0]), static_cast<double>(kp.pos[1]),
                  static_cast<double>(kp.pos[2]));
    os << buf;
  }
}

// keypoints grouped by shape id
inline std::vector<std::pair<std::string, PointCloud::Keypoint>> load_keypoints_csv(
    const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read keypoint file: " + path.string());
  std::vector<std::pair<std::string, PointCloud::Keypoint>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (lineno == 1 && line.rfind("shape_id", 0) == 0) continue;  // header
    const auto cols = detail::split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cols.size() != 5) throw ParseError(where + ": expected 5 columns, got " +
                                           std::to_string(cols.size()));
    PointCloud::Keypoint kp;
    kp.id = detail::parse_int(cols[1], where);
    kp.pos = {static_cast<float>(detail::parse_double(cols[2], where)),
              static_cast<float>(detail::parse_double(cols[3], where)),
              static_cast<float>(detail::parse_double(cols[4], where))};
    out.emplace_back(cols[0], kp);
  }
  return out;
}

inline void save_labels(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write label file: " + path.string());
  for (int l : labels) os << l << "\n";
}

inline std::vector<int> load_labels(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read label file: " + path.string());
  std::vector<int> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(detail::parse_int(line, path.string() + ":" + std::to_string(lineno)));
  }
  return out;
}

inline void save_cloud(const PointCloud& cloud, const fs::path& path) {
  cloud.validate();
  const std::string ext = path.extension().string();
  if (ext == ".xyz") {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write cloud: " + path.string());
    char buf[256];
    for (int i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.points[i];
      int len = std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g", static_cast<double>(p[0]),
                              static_cast<double>(p[1]), static_cast<double>(p[2]));
      if (cloud.has_labels())
        len += std::snprintf(buf + len, sizeof(buf) - len, " %d", cloud.labels[i]);
      if (cloud.has_colors())
        len += std::snprintf(buf + len, sizeof(buf) - len, " %.9g %.9g %.9g",
                             static_cast<double>(cloud.colors[i][0]),
                             static_cast<double>(cloud.colors[i][1]),
                             static_cast<double>(cloud.colors[i][2]));
      os << buf << "\n";
    }
  } else if (ext == ".cpcd") {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write cloud: " + path.string());
    os.write("CPCD", 4);
    auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    w32(kCloudBinaryVersion);
    w32(static_cast<std::uint32_t>(cloud.size()));
    w32((cloud.has_labels() ? 1u : 0u) | (cloud.has_colors() ? 2u : 0u));
    os.write(reinterpret_cast<const char*>(cloud.points.data()),
             static_cast<std::streamsize>(cloud.points.size() * sizeof(Pt3<float>)));
    if (cloud.has_labels()) {
      static_assert(sizeof(int) == 4);
      os.write(reinterpret_cast<const char*>(cloud.labels.data()),
               static_cast<std::streamsize>(cloud.labels.size() * 4));
    }
    if (cloud.has_colors())
      os.write(reinterpret_cast<const char*>(cloud.colors.data()),
               static_cast<std::streamsize>(cloud.colors.size() * sizeof(Pt3<float>)));
    if (!os) throw IoError("failed writing cloud: " + path.string());
  } else {
    throw FormatError("unknown cloud extension '" + ext + "' (expected .xyz or .cpcd)");
  }
  if (!cloud.keypoints.empty())
    save_keypoints_csv(detail::keypoint_sidecar(path), path.stem().string(), cloud.keypoints);
}

inline PointCloud load_cloud(const fs::path& path) {
  PointCloud cloud;
  const std::string ext = path.extension().string();
  if (ext == ".xyz") {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read cloud: " + path.string());
    std::string line;
    int lineno = 0;
    int ncols = -1;
    while (std::getline(is, line)) {
      ++lineno;
      std::string stripped = line.substr(0, line.find('#'));
      std::istringstream ss(stripped);
      std::vector<std::string> toks;
      std::string t;
      while (ss >> t) toks.push_back(t);
      if (toks.empty()) continue;
      const std::string where = path.string() + ":" + std::to_string(lineno);
      if (ncols == -1) {
        ncols = static_cast<int>(toks.size());
        if (ncols != 3 && ncols != 4 && ncols != 6 && ncols != 7)
          throw ParseError(where + ": unsupported column count " + std::to_string(ncols));
      } else if (static_cast<int>(toks.size()) != ncols) {
        throw ParseError(where + ": expected " + std::to_string(ncols) + " columns, got " +
                         std::to_string(toks.size()));
      }
      Pt3<float> p = {static_cast<float>(detail::parse_double(toks[0], where)),
                      static_cast<float>(detail::parse_double(toks[1], where)),
                      static_cast<float>(detail::parse_double(toks[2], where))};
      cloud.points.push_back(p);
      int idx = 3;
      if (ncols == 4 || ncols == 7) cloud.labels.push_back(detail::parse_int(toks[idx++], where));
      if (ncols >= 6)
        cloud.colors.push_back({static_cast<float>(detail::parse_double(toks[idx], where)),
                                static_cast<float>(detail::parse_double(toks[idx + 1], where)),
                                static_cast<float>(detail::parse_double(toks[idx + 2], where))});
    }
  } else if (ext == ".cpcd") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read cloud: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CPCD", 4) != 0)
      throw FormatError("bad magic bytes in " + path.string());
    auto r32 = [&]() {
      std::uint32_t v = 0;
      is.read(reinterpret_cast<char*>(&v), 4);
      if (!is)
        throw ParseError(path.string() + ": truncated at byte " +
                         std::to_string(static_cast<long long>(is.tellg())));
      return v;
    };
    const auto version = r32();
    if (version != kCloudBinaryVersion)
      throw FormatError("unsupported cloud format version " + std::to_string(version));
    const auto k = r32();
    const auto flags = r32();
    cloud.points.resize(k);
    is.read(reinterpret_cast<char*>(cloud.points.data()),
            static_cast<std::streamsize>(k * sizeof(Pt3<float>)));
    if (flags & 1u) {
      cloud.labels.resize(k);
      is.read(reinterpret_cast<char*>(cloud.labels.data()), static_cast<std::streamsize>(k * 4));
    }
    if (flags & 2u) {
      cloud.colors.resize(k);
      is.read(reinterpret_cast<char*>(cloud.colors.data()),
              static_cast<std::streamsize>(k * sizeof(Pt3<float>)));
    }
    if (!is)
      throw ParseError(path.string() + ": truncated payload at byte " +
                       std::to_string(static_cast<long long>(is.tellg())));
  } else {
    throw FormatError("unknown cloud extension '" + ext + "' (expected .xyz or .cpcd)");
  }

  if (cloud.labels.empty()) {
    const fs::path lp = detail::label_sidecar(path);
    if (fs::exists(lp)) {
      cloud.labels = load_labels(lp);
      if (cloud.labels.size() != cloud.points.size())
        throw ParseError(lp.string() + ": label count " + std::to_string(cloud.labels.size()) +
                         " does not match point count " + std::to_string(cloud.points.size()));
    }
  }
  const fs::path kp = detail::keypoint_sidecar(path);
  if (fs::exists(kp))
    for (auto& [id, keypoint] : load_keypoints_csv(kp)) cloud.keypoints.push_back(keypoint);
  cloud.validate();
  return cloud;
}

// ---------------------------------------------------------------------------
// Datasets and splits
// ---------------------------------------------------------------------------

struct SplitAssignment {
  std::vector<int> train, val, test;
};

inline SplitAssignment make_splits(int n, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split ratios must sum to 1");
  for (double r : ratios)
    if (r < 0) throw ContractError("split ratios must be non-negative");
  int counts[3];
  double frac[3];
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * n;
    counts[i] = static_cast<int>(exact);
    frac[i] = exact - counts[i];
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best]) best = i;
    ++counts[best];
    frac[best] = -1;
    ++assigned;
  }
  for (int i = 0; i < 3; ++i)
    if (ratios[i] > 0 && counts[i] == 0)
      throw ContractError("split " + std::to_string(i) + " is empty under the given ratios");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  SplitAssignment s;
  s.train.assign(order.begin(), order.begin() + counts[0]);
  s.val.assign(order.begin() + counts[0], order.begin() + counts[0] + counts[1]);
  s.test.assign(order.begin() + counts[0] + counts[1], order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// Extra bookkeeping for the synthetic family: shared grid sizes give exact
// dense correspondence by index (up to the shared prefix for pairs that
// disagree about the optional component, which is always appended last).
struct SynthInfo {
  int grid_u = 0, grid_v = 0;
  int base_u = 0, base_v = 0;
  int comp_u = 0, comp_v = 0;
  int body_points = 0, base_points = 0, comp_points = 0;
  std::vector<std::uint8_t> has_component;

  int shared_prefix() const { return body_points + base_points; }

  nlohmann::json to_json() const {
    return {{"grid_u", grid_u},           {"grid_v", grid_v},
            {"base_u", base_u},           {"base_v", base_v},
            {"comp_u", comp_u},           {"comp_v", comp_v},
            {"body_points", body_points}, {"base_points", base_points},
            {"comp_points", comp_points}, {"has_component", has_component}};
  }
  static SynthInfo from_json(const nlohmann::json& j) {
    SynthInfo s;
    s.grid_u = j.at("grid_u").get<int>();
    s.grid_v = j.at("grid_v").get<int>();
    s.base_u = j.at("base_u").get<int>();
    s.base_v = j.at("base_v").get<int>();
    s.comp_u = j.at("comp_u").get<int>();
    s.comp_v = j.at("comp_v").get<int>();
    s.body_points = j.at("body_points").get<int>();
    s.base_points = j.at("base_points").get<int>();
    s.comp_points = j.at("comp_points").get<int>();
    s.has_component = j.at("has_component").get<std::vector<std::uint8_t>>();
    return s;
  }
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> names;
  SplitAssignment splits;
  std::string category = "synthetic";
  std::optional<SynthInfo> synth;

  int size() const { return static_cast<int>(clouds.size()); }
};

enum class PairRequirement { None, SharedKeypoints, SharedLabels };

// All ordered pairs within a split, skipping pairs without shared
// annotations.
inline std::vector<std::pair<int, int>> enumerate_pairs(const Dataset& ds,
                                                        const std::vector<int>& split,
                                                        PairRequirement req) {
  auto kp_ids = [&](int i) {
    std::set<int> ids;
    for (const auto& kp : ds.clouds[i].keypoints) ids.insert(kp.id);
    return ids;
  };
  auto label_ids = [&](int i) {
    return std::set<int>(ds.clouds[i].labels.begin(), ds.clouds[i].labels.end());
  };
  std::vector<std::pair<int, int>> out;
  for (int a : split)
    for (int b : split) {
      if (a == b) continue;
      bool ok = true;
      if (req == PairRequirement::SharedKeypoints) {
        const auto ia = kp_ids(a), ib = kp_ids(b);
        ok = std::any_of(ia.begin(), ia.end(), [&](int id) { return ib.count(id) > 0; });
      } else if (req == PairRequirement::SharedLabels) {
        const auto la = label_ids(a), lb = label_ids(b);
        ok = std::any_of(la.begin(), la.end(), [&](int id) { return lb.count(id) > 0; });
      }
      if (ok) out.emplace_back(a, b);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic superellipsoid family
// ---------------------------------------------------------------------------

// Part labels used by the generator.
inline constexpr int kLabelBody = 0;
inline constexpr int kLabelBase = 1;
inline constexpr int kLabelComponent = 2;

// Semantic keypoint ids: 6 body axis extremes + 2 component anchors.
inline constexpr int kKeypointCount = 8;

struct SynthSpec {
  int count = 40;
  std::uint64_t seed = 0;
  int grid_u = 21;  // body grid; forced odd
  int grid_v = 20;  // body grid; forced to a multiple of 4
  double exp_min = 0.45, exp_max = 1.4;        // superellipsoid exponents
  double scale_x_min = 0.7, scale_x_max = 1.1;  // axis scales
  double scale_y_min = 0.7, scale_y_max = 1.1;
  double scale_z_min = 0.8, scale_z_max = 1.4;
  double component_prob = 0.3;  // optional side block ("armrest")

  void validate() const {
    if (count < 1) throw ContractError("synthetic count must be >= 1");
    if (grid_u < 8 || grid_v < 8) throw ContractError("grid resolution must be at least 8x8");
    if (exp_min <= 0 || exp_max < exp_min) throw ContractError("bad exponent range");
    auto check = [](double lo, double hi) {
      if (lo <= 0 || hi < lo) throw ContractError("axis scales must be positive");
    };
    check(scale_x_min, scale_x_max);
    check(scale_y_min, scale_y_max);
    check(scale_z_min, scale_z_max);
    if (component_prob < 0 || component_prob > 1)
      throw ContractError("component probability must lie in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"count", count},
            {"seed", seed},
            {"grid_u", grid_u},
            {"grid_v", grid_v},
            {"exp_min", exp_min},
            {"exp_max", exp_max},
            {"scale_x_min", scale_x_min},
            {"scale_x_max", scale_x_max},
            {"scale_y_min", scale_y_min},
            {"scale_y_max", scale_y_max},
            {"scale_z_min", scale_z_min},
            {"scale_z_max", scale_z_max},
            {"component_prob", component_prob}};
  }
};

namespace detail {

inline double signed_pow(double w, double e) {
  return w >= 0 ? std::pow(w, e) : -std::pow(-w, e);
}

struct SuperellipsoidParams {
  double e1, e2;        // polar / azimuthal exponents
  double ax, ay, az;    // half extents
  Pt3<double> center{0, 0, 0};
};

// Grid over (theta, phi); theta samples avoid the poles so no two grid
// points coincide.
inline void sample_superellipsoid(const SuperellipsoidParams& p, int nu, int nv, int label,
                                  PointCloud& out) {
  for (int i = 0; i < nu; ++i) {
    const double theta = -1.5707963267948966 + (i + 0.5) * 3.141592653589793 / nu;
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int j = 0; j < nv; ++j) {
      const double phi = 6.283185307179586 * j / nv;
      const double cp = std::cos(phi), sp = std::sin(phi);
      const double f1 = signed_pow(ct, p.e1);
      out.points.push_back(
          {static_cast<float>(p.center[0] + p.ax * f1 * signed_pow(cp, p.e2)),
           static_cast<float>(p.center[1] + p.ay * f1 * signed_pow(sp, p.e2)),
           static_cast<float>(p.center[2] + p.az * signed_pow(st, p.e1))});
      out.labels.push_back(label);
    }
  }
}

}  // namespace detail

// One family instance; `params` must come from the spec's seeded draw so the
// shared grid makes index i a true correspondence across instances.
struct SynthInstanceParams {
  double e1, e2, ax, ay, az;
  bool has_component;
};

inline PointCloud synth_instance(const SynthSpec& spec, const SynthInstanceParams& ip, int grid_u,
                                 int grid_v, int base_u, int base_v, int comp_u, int comp_v) {
  PointCloud cloud;
  detail::SuperellipsoidParams body{ip.e1, ip.e2, ip.ax, ip.ay, ip.az, {0, 0, 0}};
  detail::sample_superellipsoid(body, grid_u, grid_v, kLabelBody, cloud);

  detail::SuperellipsoidParams base{0.3,       0.3,        0.62 * ip.ax, 0.62 * ip.ay,
                                    0.14 * ip.az, {0, 0, -1.18 * ip.az}};
  detail::sample_superellipsoid(base, base_u, base_v, kLabelBase, cloud);

  if (ip.has_component) {
    detail::SuperellipsoidParams comp{0.35,        0.35,          0.26 * ip.ax, 0.5 * ip.ay,
                                      0.13 * ip.az, {1.12 * ip.ax, 0, 0.32 * ip.az}};
    detail::sample_superellipsoid(comp, comp_u, comp_v, kLabelComponent, cloud);
  }

  // Keypoints at fixed grid indices: the six body axis extremes...
  const int equator = (grid_u - 1) / 2;
  auto body_index = [&](int i, int j) { return i * grid_v + j; };
  const int kp_index[6] = {
      body_index(equator, 0),              // +x
      body_index(equator, grid_v / 2),     // -x
      body_index(equator, grid_v / 4),     // +y
      body_index(equator, 3 * grid_v / 4), // -y
      body_index(grid_u - 1, 0),           // top ring
      body_index(0, 0),                    // bottom ring
  };
  for (int id = 0; id < 6; ++id) cloud.keypoints.push_back({id, cloud.points[kp_index[id]]});
  if (ip.has_component) {
    const int comp_off = grid_u * grid_v + base_u * base_v;
    const int comp_equator = (comp_u - 1) / 2;
    cloud.keypoints.push_back({6, cloud.points[comp_off + comp_equator * comp_v + 0]});
    cloud.keypoints.push_back({7, cloud.points[comp_off + (comp_u - 1) * comp_v + 0]});
  }
  return cloud;
}

// Generate the synthetic dataset with exact index correspondences, 8 semantic
// keypoints and 2-3 part labels per instance.
inline Dataset synth_generate(const SynthSpec& spec_in) {
  SynthSpec spec = spec_in;
  spec.validate();
  // Snap grid dims so keypoint indices (equator, cardinal azimuths) exist.
  spec.grid_u |= 1;
  spec.grid_v = (spec.grid_v + 3) / 4 * 4;
  const int base_u = std::max(3, spec.grid_u / 3) | 1;
  const int base_v = std::max(8, (spec.grid_v / 2 + 3) / 4 * 4);
  const int comp_u = 5;
  const int comp_v = 8;

  Dataset ds;
  ds.category = "superellipsoid";
  SynthInfo info;
  info.grid_u = spec.grid_u;
  info.grid_v = spec.grid_v;
  info.base_u = base_u;
  info.base_v = base_v;
  info.comp_u = comp_u;
  info.comp_v = comp_v;
  info.body_points = spec.grid_u * spec.grid_v;
  info.base_points = base_u * base_v;
  info.comp_points = comp_u * comp_v;

  Rng master(spec.seed);
  for (int i = 0; i < spec.count; ++i) {
    Rng rng = master.fork(static_cast<std::uint64_t>(i));
    SynthInstanceParams ip;
    ip.e1 = rng.uniform(spec.exp_min, spec.exp_max);
    ip.e2 = rng.uniform(spec.exp_min, spec.exp_max);
    ip.ax = rng.uniform(spec.scale_x_min, spec.scale_x_max);
    ip.ay = rng.uniform(spec.scale_y_min, spec.scale_y_max);
    ip.az = rng.uniform(spec.scale_z_min, spec.scale_z_max);
    ip.has_component = rng.uniform() < spec.component_prob;
    ds.clouds.push_back(
        synth_instance(spec, ip, spec.grid_u, spec.grid_v, base_u, base_v, comp_u, comp_v));
    char name[32];
    std::snprintf(name, sizeof(name), "shape_%04d", i);
    ds.names.emplace_back(name);
    info.has_component.push_back(ip.has_component ? 1 : 0);
  }
  ds.synth = std::move(info);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory layout:
//   dir/dataset.json            names, splits, category, synth block
//   dir/clouds/<name>.xyz       points with inline labels
//   dir/keypoints.csv           all shapes' keypoints
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const fs::path& dir, const std::string& format = "xyz") {
  if (format != "xyz" && format != "cpcd") throw FormatError("unknown dataset format " + format);
  fs::create_directories(dir / "clouds");
  nlohmann::json j;
  j["category"] = ds.category;
  j["names"] = ds.names;
  j["format"] = format;
  j["splits"] = {{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}};
  if (ds.synth) j["synth"] = ds.synth->to_json();
  std::vector<std::string> files;
  bool any_keypoints = false;
  for (int i = 0; i < ds.size(); ++i) {
    const std::string file = "clouds/" + ds.names[i] + "." + format;
    PointCloud c = ds.clouds[i];
    auto kps = std::move(c.keypoints);
    c.keypoints.clear();  // keypoints go to the dataset-level csv
    save_cloud(c, dir / file);
    if (!kps.empty()) {
      save_keypoints_csv(dir / "keypoints.csv", ds.names[i], kps, any_keypoints);
      any_keypoints = true;
    }
    files.push_back(file);
  }
  j["files"] = files;
  std::ofstream os(dir / "dataset.json");
  if (!os) throw IoError("cannot write dataset.json in " + dir.string());
  os << j.dump(2) << "\n";
}

// Dataset directory with dataset.json, or a plain directory of cloud files
// (generic loader: sorted scan, seeded splits).
inline Dataset load_dataset_auto(const fs::path& dir, std::array<double, 3> ratios,
                                 std::uint64_t seed);

inline Dataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw IoError("cannot read " + (dir / "dataset.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "dataset.json").string() + ": " + e.what());
  }
  Dataset ds;
  ds.category = j.value("category", "unknown");
  ds.names = j.at("names").get<std::vector<std::string>>();
  const auto files = j.at("files").get<std::vector<std::string>>();
  ds.splits.train = j.at("splits").at("train").get<std::vector<int>>();
  ds.splits.val = j.at("splits").at("val").get<std::vector<int>>();
  ds.splits.test = j.at("splits").at("test").get<std::vector<int>>();
  if (j.contains("synth")) ds.synth = SynthInfo::from_json(j.at("synth"));
  for (const auto& f : files) ds.clouds.push_back(load_cloud(dir / f));
  if (fs::exists(dir / "keypoints.csv")) {
    auto kps = load_keypoints_csv(dir / "keypoints.csv");
    for (std::size_t i = 0; i < ds.names.size(); ++i) {
      ds.clouds[i].keypoints.clear();
      for (const auto& [sid, kp] : kps)
        if (sid == ds.names[i]) ds.clouds[i].keypoints.push_back(kp);
    }
  }
  return ds;
}

inline Dataset load_dataset_auto(const fs::path& dir, std::array<double, 3> ratios,
                                 std::uint64_t seed) {
  if (fs::exists(dir / "dataset.json")) return load_dataset(dir);
  Dataset ds;
  ds.category = dir.filename().string();
  std::vector<fs::path> files;
  const fs::path scan = fs::exists(dir / "clouds") ? dir / "clouds" : dir;
  for (const auto& entry : fs::directory_iterator(scan)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".xyz" || ext == ".cpcd") files.push_back(entry.path());
  }
  if (files.empty()) throw IoError("no .xyz/.cpcd clouds found in " + dir.string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    ds.clouds.push_back(load_cloud(f));
    ds.names.push_back(f.stem().string());
  }
  ds.splits = make_splits(ds.size(), ratios, seed);
  return ds;
}

}  // namespace cpae
