#include "subseg/checkpoint.hpp"

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "subseg/npz.hpp"

namespace subseg {
namespace {

using nlohmann::json;

std::vector<long> shape_of(const Tensor& t) { return t.dims; }

}  // namespace

void save_checkpoint(const Model& model, const VariantFlags& variant, const std::string& path) {
  npz::Archive ar;
  const nn::ParamStore& ps = model.params();
  for (const std::string& name : ps.names()) {
    const Tensor& t = ps.get(name).value();
    ar["param/" + name] = npz::Array::from_doubles(shape_of(t), t.data);
  }
  for (const std::string& name : ps.buffer_names()) {
    const Tensor& t = ps.get(name).value();
    ar["buffer/" + name] = npz::Array::from_doubles(shape_of(t), t.data);
  }

  json meta;
  meta["format"] = 1;
  meta["config"] = json::parse(model.config().to_json());
  meta["variant"] = {{"attention", variant.attention}, {"prompting", variant.prompting}};
  meta["param_count"] = model.param_count();
  std::string text = meta.dump();
  std::vector<uint8_t> bytes(text.begin(), text.end());
  ar["meta"] = npz::Array::from_bytes({static_cast<long>(bytes.size())}, bytes);

  npz::save(path, ar);
}

Checkpoint load_checkpoint(const std::string& path) {
  npz::Archive ar = npz::load(path);
  auto meta_it = ar.find("meta");
  if (meta_it == ar.end()) throw npz::FormatError("checkpoint '" + path + "' missing key 'meta'");
  std::vector<uint8_t> meta_bytes = meta_it->second.as_bytes();
  json meta;
  try {
    meta = json::parse(std::string(meta_bytes.begin(), meta_bytes.end()));
  } catch (const json::exception& e) {
    throw npz::FormatError("checkpoint '" + path + "' has unparseable metadata: " + e.what());
  }

  ModelConfig cfg;
  VariantFlags variant;
  try {
    cfg = ModelConfig::from_json(meta.at("config").dump());
    variant.attention = meta.at("variant").at("attention").get<bool>();
    variant.prompting = meta.at("variant").at("prompting").get<bool>();
  } catch (const json::exception& e) {
    throw npz::FormatError("checkpoint '" + path + "' metadata incomplete: " + e.what());
  }

  Checkpoint ck{Model(cfg, 0), AttentionParams{}, variant};
  ck.attention = AttentionParams::create(ck.model.params(), cfg.encoder_dims.back());

  nn::ParamStore& ps = ck.model.params();
  std::set<std::string> seen{"meta"};
  auto restore = [&](const std::string& name, const std::string& kind) {
    std::string key = kind + "/" + name;
    auto it = ar.find(key);
    if (it == ar.end())
      throw npz::FormatError("checkpoint '" + path + "' missing " + kind + " '" + name + "'");
    ad::Var v = ps.get(name);  // copies share the node, giving mutable access
    if (it->second.shape != v.value().dims)
      throw npz::FormatError("checkpoint '" + path + "' " + kind + " '" + name +
                             "' has wrong shape");
    v.value().data = it->second.as_doubles();
    seen.insert(key);
  };
  for (const std::string& name : ps.names()) restore(name, "param");
  for (const std::string& name : ps.buffer_names()) restore(name, "buffer");
  for (const auto& kv : ar)
    if (!seen.count(kv.first))
      throw npz::FormatError("checkpoint '" + path + "' has unexpected key '" + kv.first + "'");
  return ck;
}

}  // namespace subseg
