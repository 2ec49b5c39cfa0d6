// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout:
//
//   skillnet-checkpoint <version>\n
//   <header: one line of JSON with sorted keys>\n
//   tensors <count>\n
//   then per tensor, in name order:
//     <name> <dtype> <ndim> <d0> ... <dn-1>\n  followed by raw little-endian values
//
// The header holds {version, config, registry, heads, seed, optimizer, meta}.
// Optimizer moments are stored as tensors "optim.m:<param>" / "optim.v:<param>";
// per-parameter step counts live in the header.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "skillnet/model.hpp"
#include "skillnet/optim.hpp"

namespace skillnet {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"num_layers", c.num_layers},
          {"num_skill_layers", c.num_skill_layers},
          {"hidden_dim", c.hidden_dim},
          {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},
          {"num_skills", c.num_skills},
          {"type_vocab_size", c.type_vocab_size},
          {"ffn_kind", to_string(c.ffn_kind)},
          {"num_experts", c.num_experts},
          {"dropout", c.dropout},
          {"init_std", c.init_std},
          {"ln_eps", c.ln_eps}};
}

/// Missing keys keep the defaults of `base`.
inline EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("vocab_size", base.vocab_size);
  get("max_seq_len", base.max_seq_len);
  get("num_layers", base.num_layers);
  get("num_skill_layers", base.num_skill_layers);
  get("hidden_dim", base.hidden_dim);
  get("num_heads", base.num_heads);
  get("ffn_dim", base.ffn_dim);
  get("num_skills", base.num_skills);
  get("type_vocab_size", base.type_vocab_size);
  if (j.contains("ffn_kind")) base.ffn_kind = ffn_kind_from_string(j.at("ffn_kind").get<std::string>());
  get("num_experts", base.num_experts);
  get("dropout", base.dropout);
  get("init_std", base.init_std);
  get("ln_eps", base.ln_eps);
  return base;
}

inline nlohmann::json registry_to_json(const SkillRegistry& r) {
  nlohmann::json skills = nlohmann::json::array();
  for (const auto& s : r.skills()) skills.push_back({{"id", s.id}, {"description", s.description}});
  nlohmann::json j{{"skills", skills}};
  j["general_skill"] = r.general_skill() ? nlohmann::json(*r.general_skill()) : nlohmann::json(nullptr);
  return j;
}

inline SkillRegistry registry_from_json(const nlohmann::json& j) {
  std::vector<Skill> skills;
  for (const auto& s : j.at("skills")) skills.push_back({s.at("id").get<std::string>(), s.value("description", "")});
  std::optional<std::string> general;
  if (j.contains("general_skill") && !j.at("general_skill").is_null()) general = j.at("general_skill").get<std::string>();
  return SkillRegistry(std::move(skills), std::move(general));
}

struct LoadedCheckpoint {
  Model model;
  std::optional<AdamState> optim;
  nlohmann::json meta;
};

namespace detail {

inline void put_f64(std::string& out, double v) {
  auto u = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline double get_f64(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  if (name.find_first_of(" \n") != std::string::npos) throw ConfigError("tensor name contains whitespace: " + name);
  out += name + " f64 " + std::to_string(t.shape().size());
  for (std::size_t d : t.shape()) out += " " + std::to_string(d);
  out += "\n";
  for (double v : t.data()) put_f64(out, v);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : s_(bytes) {}

  std::string line() {
    const auto nl = s_.find('\n', pos_);
    if (nl == std::string_view::npos) throw DataError("checkpoint truncated");
    std::string out(s_.substr(pos_, nl - pos_));
    pos_ = nl + 1;
    return out;
  }

  Tensor values(Shape shape) {
    const std::size_t n = shape_size(shape);
    if (s_.size() - pos_ < n * 8) throw DataError("checkpoint truncated inside tensor data");
    Tensor t(std::move(shape));
    const auto* p = reinterpret_cast<const unsigned char*>(s_.data() + pos_);
    for (std::size_t i = 0; i < n; ++i) t[i] = get_f64(p + 8 * i);
    pos_ += n * 8;
    return t;
  }

  bool done() const { return pos_ == s_.size(); }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m, const AdamState* optim = nullptr,
                                        const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = encoder_config_to_json(m.config);
  header["registry"] = registry_to_json(m.registry);
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [task, h] : m.heads) heads[task] = {{"kind", to_string(h.kind)}, {"num_labels", h.num_labels}};
  header["heads"] = heads;
  header["seed"] = m.seed;
  header["meta"] = meta;
  if (optim) {
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& [name, slot] : optim->slots) steps[name] = slot.step;
    header["optimizer"] = {{"beta1", optim->config.beta1},
                           {"beta2", optim->config.beta2},
                           {"eps", optim->config.eps},
                           {"steps", steps}};
  } else {
    header["optimizer"] = nullptr;
  }

  std::string out = "skillnet-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
  out += header.dump() + "\n";
  std::size_t count = m.params.size() + (optim ? 2 * optim->slots.size() : 0);
  out += "tensors " + std::to_string(count) + "\n";
  for (const auto& [name, p] : m.params) detail::put_tensor(out, name, p.value);
  if (optim) {
    for (const auto& [name, slot] : optim->slots) detail::put_tensor(out, "optim.m:" + name, slot.m);
    for (const auto& [name, slot] : optim->slots) detail::put_tensor(out, "optim.v:" + name, slot.v);
  }
  return out;
}

inline LoadedCheckpoint deserialize_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  const std::string magic = r.line();
  if (magic != "skillnet-checkpoint " + std::to_string(kCheckpointVersion))
    throw DataError("not a skillnet checkpoint (or unsupported version): " + magic.substr(0, 40));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.line());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }

  LoadedCheckpoint out;
  out.model = Model(encoder_config_from_json(header.at("config")), registry_from_json(header.at("registry")),
                    header.at("seed").get<std::uint64_t>());
  for (const auto& [task, h] : header.at("heads").items())
    out.model.add_head(task, {head_kind_from_string(h.at("kind").get<std::string>()), h.at("num_labels").get<std::size_t>()});
  out.meta = header.value("meta", nlohmann::json::object());
  if (!header.at("optimizer").is_null()) {
    const auto& o = header.at("optimizer");
    AdamState st;
    st.config = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
    for (const auto& [name, step] : o.at("steps").items()) st.slots[name].step = step.get<std::uint64_t>();
    out.optim = std::move(st);
  }

  std::istringstream count_line(r.line());
  std::string word;
  std::size_t count = 0;
  if (!(count_line >> word >> count) || word != "tensors") throw DataError("checkpoint tensor count missing");

  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream desc(r.line());
    std::string name, dtype;
    std::size_t ndim = 0;
    if (!(desc >> name >> dtype >> ndim) || dtype != "f64") throw DataError("bad tensor record in checkpoint");
    Shape shape(ndim);
    for (auto& d : shape)
      if (!(desc >> d)) throw DataError("bad shape for tensor " + name);
    Tensor t = r.values(shape);
    if (!seen.insert(name).second) throw DataError("duplicate tensor in checkpoint: " + name);

    auto into = [&](Tensor& dst) {
      if (dst.shape() != t.shape())
        throw DataError("shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " + shape_str(dst.shape()));
      dst = std::move(t);
    };
    if (name.rfind("optim.m:", 0) == 0 || name.rfind("optim.v:", 0) == 0) {
      if (!out.optim) throw DataError("optimizer tensor without optimizer header: " + name);
      const std::string pname = name.substr(8);
      auto it = out.optim->slots.find(pname);
      if (it == out.optim->slots.end() || !out.model.params.contains(pname))
        throw DataError("optimizer tensor for unknown parameter: " + pname);
      Tensor& dst = name[6] == 'm' ? it->second.m : it->second.v;
      dst = Tensor(out.model.param(pname).value.shape());
      into(dst);
    } else {
      if (!out.model.params.contains(name)) throw DataError("checkpoint tensor not in model: " + name);
      into(out.model.param(name).value);
    }
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint tensors");
  for (const auto& [name, _] : out.model.params)
    if (!seen.count(name)) throw DataError("checkpoint is missing parameter " + name);
  if (out.optim)
    for (const auto& [name, slot] : out.optim->slots)
      if (!seen.count("optim.m:" + name) || !seen.count("optim.v:" + name))
        throw DataError("checkpoint is missing optimizer moments for " + name);
  return out;
}

/// Writes via a temporary file and rename, so a crash never leaves a torn file.
inline void save_checkpoint(const std::string& path, const Model& m, const AdamState* optim = nullptr,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    const std::string bytes = serialize_checkpoint(m, optim, meta);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, p);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace skillnet
