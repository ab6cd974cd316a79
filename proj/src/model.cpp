#include "tbps/model.hpp"

#include <cstring>
#include <fstream>

namespace tbps {

namespace {

constexpr char kMagic[8] = {'T', 'B', 'P', 'S', 'T', 'N', 'S', '1'};

}  // namespace

Model Model::init(const Config& cfg, const Vocabulary& vocab, int identities, std::uint64_t seed) {
  require(cfg.model.roi_size % cfg.model.region_stripes == 0 && cfg.model.roi_size % cfg.model.local_stripes == 0,
          "configuration error: model.roi_size must be divisible by both stripe counts");
  Model m;
  m.config = cfg;
  m.vocab = vocab;
  Rng rng(derive_seed(seed, 1));
  const int a = static_cast<int>(cfg.model.anchor_scales.size() * cfg.model.anchor_ratios.size());
  m.base = BaseNetParams::init(cfg.model, rng);
  m.proposal.rpn = RpnHeadParams::init(cfg.model, a, rng);
  m.proposal.sdrpn = RpnHeadParams::init(cfg.model, a, rng);
  m.proposal.excitation = ExcitationParams::init(cfg.model, rng);
  m.det = DetNetParams::init(cfg.model, rng);
  m.id = IdNetParams::init(cfg.model, rng);
  m.text = TextEncoderParams::init(vocab.size(), cfg.model, rng);
  m.cross = CrossAttentionParams::init(cfg.model.dim, rng);
  m.cmpc_w = normal_param({identities, cfg.model.dim}, 1.0, rng);
  m.oim = OimState::init(identities, cfg.model.dim, cfg.oim, rng);
  return m;
}

int Model::anchors_per_location() const { return proposal.rpn.cls_w.shape()[0]; }

ParamList Model::parameters() const {
  ParamList out;
  base.collect("base", Group::kDetection, out);
  proposal.rpn.collect("rpn", Group::kDetection, out);
  proposal.sdrpn.collect("sdrpn", Group::kDetection, out);
  det.collect("det", Group::kDetection, out);
  id.collect("id", Group::kIdentification, out);
  proposal.excitation.collect("excite", Group::kProjection, out);
  text.collect("text", Group::kProjection, out);
  cross.collect("cross", Group::kProjection, out);
  out.push_back({"cmpc_w", cmpc_w, Group::kProjection});
  return out;
}

void save_tensors(const TensorMap& tensors, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), "cannot write " + tmp);
    auto put_u64 = [&out](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    out.write(kMagic, sizeof kMagic);
    put_u64(tensors.size());
    for (const auto& [name, t] : tensors) {
      put_u64(name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u64(t.shape().size());
      for (int d : t.shape()) put_u64(static_cast<std::uint64_t>(d));
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    require(out.good(), "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint " + path.string());
  auto get_u64 = [&in, &path]() {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    require(in.good(), "truncated checkpoint " + path.string());
    return v;
  };
  char magic[8];
  in.read(magic, sizeof magic);
  require(in.good() && std::memcmp(magic, kMagic, sizeof magic) == 0, "not a checkpoint: " + path.string());
  TensorMap out;
  const auto count = get_u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(get_u64(), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::vector<int> shape(get_u64());
    for (int& d : shape) d = static_cast<int>(get_u64());
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    require(in.good(), "truncated checkpoint " + path.string());
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

TensorMap model_tensors(const Model& m) {
  TensorMap out;
  for (const auto& p : m.parameters()) out[p.name] = p.var.value();
  out["oim.lut"] = m.oim.lut;
  out["oim.queue"] = m.oim.queue;
  out["oim.cursor"] = Tensor({2}, {static_cast<double>(m.oim.queue_head), static_cast<double>(m.oim.queue_count)});
  return out;
}

void assign_model_tensors(Model& m, const TensorMap& tensors) {
  auto fetch = [&tensors](const std::string& name, const std::vector<int>& shape) -> const Tensor& {
    auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint is missing tensor '" + name + "'");
    require(it->second.shape() == shape, "checkpoint tensor '" + name + "' has shape " +
                                             shape_str(it->second.shape()) + ", expected " + shape_str(shape));
    return it->second;
  };
  for (auto& p : m.parameters()) {
    ad::Var v = p.var;
    v.mutable_value() = fetch(p.name, v.shape());
  }
  m.oim.lut = fetch("oim.lut", m.oim.lut.shape());
  m.oim.queue = fetch("oim.queue", m.oim.queue.shape());
  const Tensor& cursor = fetch("oim.cursor", {2});
  m.oim.queue_head = static_cast<int>(cursor[0]);
  m.oim.queue_count = static_cast<int>(cursor[1]);
}

}  // namespace tbps
