#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpae/checkpoint.hpp"
#include "cpae/errors.hpp"
#include "cpae/geometry.hpp"
#include "cpae/graph.hpp"
#include "cpae/layers.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

struct ModelConfig {
  int latent_dim = 512;
  std::vector<int> encoder_widths = {64, 128, 512};  // per-point features
  std::vector<int> canonical_hidden = {256, 256, 256};
  std::vector<int> inverse_hidden = {256, 256, 256};
  int sphere_points = 4096;
  std::uint64_t sphere_seed = 0;
  int points_per_cloud = 2048;
  std::uint64_t init_seed = 0;

  static ModelConfig paper_preset() { return ModelConfig{}; }

  static ModelConfig desk_preset() {
    ModelConfig c;
    c.latent_dim = 64;
    c.encoder_widths = {64, 128, 128};
    c.canonical_hidden = {128, 128, 128};
    c.inverse_hidden = {128, 128, 128};
    c.sphere_points = 1024;
    c.points_per_cloud = 256;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "desk") return desk_preset();
    throw ContractError("unknown preset '" + name + "' (expected desk or paper)");
  }

  nlohmann::json to_json() const {
    return {{"latent_dim", latent_dim},
            {"encoder_widths", encoder_widths},
            {"canonical_hidden", canonical_hidden},
            {"inverse_hidden", inverse_hidden},
            {"sphere_points", sphere_points},
            {"sphere_seed", sphere_seed},
            {"points_per_cloud", points_per_cloud},
            {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.latent_dim = j.at("latent_dim").get<int>();
    c.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    c.canonical_hidden = j.at("canonical_hidden").get<std::vector<int>>();
    c.inverse_hidden = j.at("inverse_hidden").get<std::vector<int>>();
    c.sphere_points = j.at("sphere_points").get<int>();
    c.sphere_seed = j.at("sphere_seed").get<std::uint64_t>();
    c.points_per_cloud = j.at("points_per_cloud").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }
};

// The three networks: a permutation-invariant global encoder, the canonical
// mapping from world points onto the sphere primitive, and the inverse
// mapping back to world coordinates. Both mappings act per point on the
// concatenation [point, latent].
template <typename S = float>
class CpaeModelT {
 public:
  CpaeModelT() = default;

  explicit CpaeModelT(const ModelConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.init_seed = init_seed;
    Rng rng(init_seed);

    std::vector<LayerSpec> enc;
    for (int w : cfg_.encoder_widths) enc.push_back({w, Act::Relu, false});
    point_encoder_ = Mlp<S>(3, enc, "encoder.point", rng);
    latent_head_ = Dense<S>(cfg_.encoder_widths.back(), cfg_.latent_dim, "encoder.latent", rng);

    const int in = 3 + cfg_.latent_dim;
    std::vector<LayerSpec> phi;
    for (int w : cfg_.canonical_hidden) phi.push_back({w, Act::Relu, true});
    phi.push_back({3, Act::None, false});  // primitive may leave the unit ball
    canonical_ = Mlp<S>(in, phi, "canonical", rng);

    std::vector<LayerSpec> psi;
    for (int w : cfg_.inverse_hidden) psi.push_back({w, Act::Relu, true});
    psi.push_back({3, Act::Tanh, false});  // world output bounded to [-1,1]^3
    inverse_ = Mlp<S>(in, psi, "inverse", rng);

    auto sphere = sample_sphere<S>(cfg_.sphere_points, cfg_.sphere_seed);
    sphere_tensor_ = Tensor<S>::zeros({cfg_.sphere_points, 3});
    for (int i = 0; i < cfg_.sphere_points; ++i)
      for (int x = 0; x < 3; ++x) sphere_tensor_.values[3 * static_cast<std::size_t>(i) + x] = sphere[i][x];
    sphere_index_ = NnIndex<S>(sphere);
  }

  const ModelConfig& config() const { return cfg_; }
  const Tensor<S>& sphere() const { return sphere_tensor_; }
  const NnIndex<S>& sphere_index() const { return sphere_index_; }

  int stages_completed = 0;  // 0 untrained, 1 after pre-training, 2 after fine-tuning

  Mlp<S>& point_encoder() { return point_encoder_; }
  Dense<S>& latent_head() { return latent_head_; }
  Mlp<S>& canonical_net() { return canonical_; }
  Mlp<S>& inverse_net() { return inverse_; }

  std::vector<Param<S>*> parameters() {
    std::vector<Param<S>*> out;
    point_encoder_.collect_params(out);
    out.push_back(&latent_head_.weight);
    out.push_back(&latent_head_.bias);
    canonical_.collect_params(out);
    inverse_.collect_params(out);
    return out;
  }

  // ----- graph builders ---------------------------------------------------

  // points [k x 3] -> latent [1 x d]; max-pool makes it order independent.
  Var encode(Graph<S>& g, Var points) {
    check_normalized(g.val(points), g.shape(points));
    Var h = point_encoder_.forward(g, points);
    Var pooled = g.maxpool_rows(h);
    return latent_head_.forward(g, pooled);
  }

  Var canonical(Graph<S>& g, Var points, Var latent) {
    const int n = g.shape(points)[0];
    return canonical_.forward(g, g.concat_cols(points, g.tile_rows(latent, n)));
  }

  Var inverse(Graph<S>& g, Var points, Var latent) {
    const int n = g.shape(points)[0];
    return inverse_.forward(g, g.concat_cols(points, g.tile_rows(latent, n)));
  }

  // ----- eval-mode wrappers ------------------------------------------------

  Tensor<S> encode_latent(const PointCloudT<S>& cloud) {
    Graph<S> g;
    return g.value_tensor(encode(g, g.input(cloud.tensor())));
  }

  Tensor<S> canonical_map(const Tensor<S>& points, const Tensor<S>& latent) {
    Graph<S> g;
    return g.value_tensor(canonical(g, g.input(points), g.input(latent)));
  }

  Tensor<S> inverse_map(const Tensor<S>& points, const Tensor<S>& latent) {
    Graph<S> g;
    return g.value_tensor(inverse(g, g.input(points), g.input(latent)));
  }

  struct Autoencoded {
    Tensor<S> latent;          // [1 x d]
    Tensor<S> primitive;       // [k x 3], row i maps input row i
    Tensor<S> reconstruction;  // [k x 3], row i reconstructs input row i
  };

  Autoencoded forward_autoencode(const PointCloudT<S>& cloud) {
    Graph<S> g;
    const Var pts = g.input(cloud.tensor());
    const Var z = encode(g, pts);
    const Var prim = canonical(g, pts, z);
    const Var rec = inverse(g, prim, z);
    return {g.value_tensor(z), g.value_tensor(prim), g.value_tensor(rec)};
  }

  struct CrossDecoded {
    Tensor<S> a_to_b;  // inverse(primitive of A, latent of B), ordered like A
    Tensor<S> b_to_a;
  };

  CrossDecoded forward_cross(const PointCloudT<S>& a, const PointCloudT<S>& b) {
    Graph<S> g;
    const Var pa = g.input(a.tensor());
    const Var pb = g.input(b.tensor());
    const Var za = encode(g, pa);
    const Var zb = encode(g, pb);
    const Var ua = canonical(g, pa, za);
    const Var ub = canonical(g, pb, zb);
    return {g.value_tensor(inverse(g, ua, zb)), g.value_tensor(inverse(g, ub, za))};
  }

  // ----- persistence --------------------------------------------------------

  std::vector<NamedTensor> state_dict() {
    std::vector<NamedTensor> out;
    for (Param<S>* p : parameters())
      out.push_back({p->name, p->shape, to_f32(p->value)});
    append_bn_stats(point_encoder_, out);
    append_bn_stats(canonical_, out);
    append_bn_stats(inverse_, out);
    return out;
  }

  void load_state_dict(const std::vector<NamedTensor>& tensors) {
    auto find = [&](const std::string& name) -> const NamedTensor& {
      for (const auto& t : tensors)
        if (t.name == name) return t;
      throw FormatError("checkpoint is missing tensor '" + name + "'");
    };
    for (Param<S>* p : parameters()) {
      const NamedTensor& t = find(p->name);
      if (t.shape != p->shape)
        throw ShapeError("checkpoint tensor '" + p->name + "' has shape " + shape_str(t.shape) +
                         ", expected " + shape_str(p->shape));
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<S>(t.data[i]);
    }
    auto load_bn = [&](Mlp<S>& mlp) {
      for (auto& b : mlp.blocks()) {
        if (!b.bn) continue;
        const std::string base = b.bn->gamma.name.substr(0, b.bn->gamma.name.size() - 6);
        const NamedTensor& rm = find(base + ".running_mean");
        const NamedTensor& rv = find(base + ".running_var");
        for (std::size_t i = 0; i < b.bn->running_mean.size(); ++i) {
          b.bn->running_mean[i] = static_cast<S>(rm.data[i]);
          b.bn->running_var[i] = static_cast<S>(rv.data[i]);
        }
      }
    };
    load_bn(point_encoder_);
    load_bn(canonical_);
    load_bn(inverse_);
  }

  void save(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "model.cpae", state_dict());
    nlohmann::json j = cfg_.to_json();
    j["stages_completed"] = stages_completed;
    j["format_version"] = kCheckpointVersion;
    std::ofstream os(dir / "model.json");
    if (!os) throw IoError("cannot write model config: " + (dir / "model.json").string());
    os << j.dump(2) << "\n";
  }

  static CpaeModelT load(const std::filesystem::path& dir) {
    std::ifstream is(dir / "model.json");
    if (!is) throw IoError("cannot read model config: " + (dir / "model.json").string());
    nlohmann::json j;
    is >> j;
    CpaeModelT m(ModelConfig::from_json(j), j.at("init_seed").get<std::uint64_t>());
    m.stages_completed = j.value("stages_completed", 0);
    m.load_state_dict(load_checkpoint(dir / "model.cpae"));
    return m;
  }

 private:
  static void check_normalized(const std::vector<S>& vals, const Shape& shape) {
    if (shape.size() != 2 || shape[1] != 3) throw ShapeError("encoder expects a k x 3 tensor");
    double r2max = 0;
    for (int i = 0; i < shape[0]; ++i) {
      const double x = vals[3 * static_cast<std::size_t>(i)];
      const double y = vals[3 * static_cast<std::size_t>(i) + 1];
      const double z = vals[3 * static_cast<std::size_t>(i) + 2];
      r2max = std::max(r2max, x * x + y * y + z * z);
    }
    if (std::sqrt(r2max) > 1.0 + 1e-3)
      throw ContractError("cloud is not normalized (max radius " + std::to_string(std::sqrt(r2max)) +
                          " > 1)");
  }

  static std::vector<float> to_f32(const std::vector<S>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
  }

  static void append_bn_stats(Mlp<S>& mlp, std::vector<NamedTensor>& out) {
    for (auto& b : mlp.blocks()) {
      if (!b.bn) continue;
      const std::string base = b.bn->gamma.name.substr(0, b.bn->gamma.name.size() - 6);
      out.push_back({base + ".running_mean", {b.bn->features()}, to_f32(b.bn->running_mean)});
      out.push_back({base + ".running_var", {b.bn->features()}, to_f32(b.bn->running_var)});
    }
  }

  ModelConfig cfg_;
  Mlp<S> point_encoder_;
  Dense<S> latent_head_;
  Mlp<S> canonical_;
  Mlp<S> inverse_;
  Tensor<S> sphere_tensor_;
  NnIndex<S> sphere_index_;
};

using CpaeModel = CpaeModelT<float>;

}  // namespace cpae
