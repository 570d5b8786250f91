#include "lfdepth/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "lfdepth/errors.hpp"

namespace lfd {

namespace {

/// Reads typed fields of one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, path(key));
  }

  const Json* section(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError("unknown key '" + path(it.key()) + "'");
    }
  }

 private:
  template <class T>
  static T convert(const Json& v, const std::string& key) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError(key + ": expected a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key + ": expected a string");
      return v.get<std::string>();
    } else {
      static_assert(std::is_same_v<T, std::vector<Index>>);
      if (!v.is_array()) throw ConfigError(key + ": expected an array of integers");
      T out;
      for (const auto& e : v) {
        if (!e.is_number_integer()) throw ConfigError(key + ": expected an array of integers");
        out.push_back(e.get<Index>());
      }
      return out;
    }
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> known_;
};

template <class F>
auto with_context(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  network.validate();
  train.validate();
  data.validate();
  if (network.height != data.height || network.width != data.width || network.slices != data.slices) {
    throw ConfigError("network size/slices must match data size/slices");
  }
}

Json to_json(const NetworkConfig& c) {
  Json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["slices"] = c.slices;
  j["stage_channels"] = c.stage_channels;
  j["decoder_channels"] = c.decoder_channels;
  j["use_rgb_stream"] = c.use_rgb_stream;
  j["use_focal_stream"] = c.use_focal_stream;
  j["use_cru"] = c.use_cru;
  j["use_cru_md"] = c.use_cru_md;
  j["use_cru_mg"] = c.use_cru_mg;
  j["use_cmfa"] = c.use_cmfa;
  j["cru_reduced_channels"] = c.cru_reduced_channels;
  j["cru_normalize_projection"] = c.cru_normalize_projection;
  j["cru_normalize_reprojection"] = c.cru_normalize_reprojection;
  j["cmfa_focal_slice_kernel"] = c.cmfa_focal_slice_kernel;
  j["plain_stack_layers"] = c.plain_stack_layers;
  j["dropout"] = c.dropout;
  j["w_l1"] = c.w_l1;
  j["w_grad"] = c.w_grad;
  j["w_normal"] = c.w_normal;
  j["deep_supervision"] = c.deep_supervision;
  j["aux_weight"] = c.aux_weight;
  return j;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["lr_late"] = c.lr_late;
  j["lr_drop_epoch"] = c.lr_drop_epoch;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["augment"] = c.augment;
  return j;
}

Json to_json(const GenSpec& c) {
  Json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["slices"] = c.slices;
  j["blur_gain"] = c.blur_gain;
  j["depth_style"] = depth_style_name(c.depth_style);
  j["texture_style"] = texture_style_name(c.texture_style);
  j["seed"] = c.seed;
  return j;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["network"] = to_json(c.network);
  j["train"] = to_json(c.train);
  j["data"] = to_json(c.data);
  Json paths = Json::object();
  if (!c.data_dir.empty()) paths["data"] = c.data_dir;
  if (!c.out_dir.empty()) paths["out"] = c.out_dir;
  if (!paths.empty()) j["paths"] = paths;
  return j;
}

NetworkConfig network_config_from_json(const Json& j, const std::string& where) {
  NetworkConfig c;
  Fields f(j, where);
  f.read("height", c.height);
  f.read("width", c.width);
  f.read("slices", c.slices);
  f.read("stage_channels", c.stage_channels);
  f.read("decoder_channels", c.decoder_channels);
  f.read("use_rgb_stream", c.use_rgb_stream);
  f.read("use_focal_stream", c.use_focal_stream);
  f.read("use_cru", c.use_cru);
  f.read("use_cru_md", c.use_cru_md);
  f.read("use_cru_mg", c.use_cru_mg);
  f.read("use_cmfa", c.use_cmfa);
  f.read("cru_reduced_channels", c.cru_reduced_channels);
  f.read("cru_normalize_projection", c.cru_normalize_projection);
  f.read("cru_normalize_reprojection", c.cru_normalize_reprojection);
  f.read("cmfa_focal_slice_kernel", c.cmfa_focal_slice_kernel);
  f.read("plain_stack_layers", c.plain_stack_layers);
  f.read("dropout", c.dropout);
  f.read("w_l1", c.w_l1);
  f.read("w_grad", c.w_grad);
  f.read("w_normal", c.w_normal);
  f.read("deep_supervision", c.deep_supervision);
  f.read("aux_weight", c.aux_weight);
  f.finish();
  return c;
}

TrainConfig train_config_from_json(const Json& j, const std::string& where) {
  TrainConfig c;
  Fields f(j, where);
  f.read("epochs", c.epochs);
  f.read("lr", c.lr);
  f.read("lr_late", c.lr_late);
  f.read("lr_drop_epoch", c.lr_drop_epoch);
  f.read("beta1", c.beta1);
  f.read("beta2", c.beta2);
  f.read("eps", c.eps);
  f.read("augment", c.augment);
  f.finish();
  return c;
}

GenSpec gen_spec_from_json(const Json& j, const std::string& where) {
  GenSpec c;
  Fields f(j, where);
  f.read("height", c.height);
  f.read("width", c.width);
  f.read("slices", c.slices);
  f.read("blur_gain", c.blur_gain);
  std::string depth = depth_style_name(c.depth_style);
  std::string texture = texture_style_name(c.texture_style);
  f.read("depth_style", depth);
  f.read("texture_style", texture);
  f.read("seed", c.seed);
  f.finish();
  c.depth_style = with_context(f.path("depth_style"), [&] { return parse_depth_style(depth); });
  c.texture_style = with_context(f.path("texture_style"), [&] { return parse_texture_style(texture); });
  return c;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Fields f(j, "");
  f.read("seed", c.seed);
  if (const Json* s = f.section("network")) c.network = network_config_from_json(*s, "network");
  if (const Json* s = f.section("train")) c.train = train_config_from_json(*s, "train");
  if (const Json* s = f.section("data")) {
    c.data = gen_spec_from_json(*s, "data");
  } else {
    c.data.height = c.network.height;
    c.data.width = c.network.width;
    c.data.slices = c.network.slices;
  }
  if (const Json* s = f.section("paths")) {
    Fields p(*s, "paths");
    p.read("data", c.data_dir);
    p.read("out", c.out_dir);
    p.finish();
  }
  f.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config '" + file.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(file.string() + ": invalid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace lfd
