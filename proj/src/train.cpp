#include "lfdepth/train.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "lfdepth/config.hpp"
#include "lfdepth/errors.hpp"

namespace lfd {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(lr > 0.0) || !(lr_late > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (lr_drop_epoch < 0) throw ConfigError("train: lr_drop_epoch must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0,1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
}

double learning_rate(const TrainConfig& config, Index epoch) {
  return epoch < config.lr_drop_epoch ? config.lr : config.lr_late;
}

Adam::Adam(ModuleParams& params, double beta1, double beta2, double eps)
    : params_(params.flatten()), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [path, t] : params_) {
    m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].second;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

NamedTensors Adam::state() const {
  NamedTensors out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Shape& s = params_[k].second.shape();
    out.emplace_back("m." + params_[k].first, Tensor(s, m_[k]));
    out.emplace_back("v." + params_[k].first, Tensor(s, v_[k]));
  }
  return out;
}

void Adam::load_state(const NamedTensors& state, std::int64_t steps, const std::string& source) {
  if (state.size() != 2 * params_.size()) {
    throw FormatError(source, 0, "optimizer state has " + std::to_string(state.size()) + " tensors, expected " +
                                     std::to_string(2 * params_.size()));
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (int which = 0; which < 2; ++which) {
      const auto& [name, t] = state[2 * k + static_cast<std::size_t>(which)];
      const std::string want = (which == 0 ? "m." : "v.") + params_[k].first;
      if (name != want || t.shape() != params_[k].second.shape()) {
        throw FormatError(source, 0, "optimizer entry '" + name + "' does not match '" + want + "'");
      }
      auto d = t.data();
      (which == 0 ? m_[k] : v_[k]).assign(d.begin(), d.end());
    }
  }
  t_ = steps;
}

nlohmann::ordered_json train_log_to_json(const TrainLog& log) {
  nlohmann::ordered_json j;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : log.steps) {
    nlohmann::ordered_json r;
    r["epoch"] = s.epoch;
    r["step"] = s.step;
    r["scene"] = s.scene;
    r["lr"] = s.lr;
    r["loss"] = s.loss;
    r["l1"] = s.l1;
    r["grad"] = s.grad;
    r["normal"] = s.normal;
    j["steps"].push_back(r);
  }
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : log.epochs) {
    nlohmann::ordered_json r;
    r["epoch"] = e.epoch;
    r["mean_loss"] = e.mean_loss;
    r["metrics"] = metrics_to_json(e.metrics);
    j["epochs"].push_back(r);
  }
  return j;
}

TrainLog train_log_from_json(const nlohmann::ordered_json& j) {
  TrainLog log;
  for (const auto& r : j.at("steps")) {
    log.steps.push_back({r.at("epoch").get<Index>(), r.at("step").get<Index>(), r.at("scene").get<std::string>(),
                         r.at("lr").get<double>(), r.at("loss").get<double>(), r.at("l1").get<double>(),
                         r.at("grad").get<double>(), r.at("normal").get<double>()});
  }
  for (const auto& r : j.at("epochs")) {
    log.epochs.push_back({r.at("epoch").get<Index>(), r.at("mean_loss").get<double>(),
                          metrics_from_json(r.at("metrics"))});
  }
  return log;
}

std::vector<double> moving_average_loss(const TrainLog& log, std::size_t window) {
  std::vector<double> out;
  if (window == 0) return out;
  for (std::size_t i = 0; i + window <= log.epochs.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = i; k < i + window; ++k) s += log.epochs[k].mean_loss;
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

bool is_monotone_nonincreasing(const std::vector<double>& values) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[i - 1]) return false;
  }
  return true;
}

std::vector<NamedScene> load_split(const std::string& root, const std::string& split) {
  const Manifest m = read_manifest(root);
  std::vector<NamedScene> out;
  for (const auto& name : split_names(m, split)) out.push_back({name, read_scene((fs::path(root) / name).string())});
  return out;
}

namespace {

nlohmann::ordered_json read_json_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read '" + file.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return nlohmann::ordered_json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(file.string(), 0, std::string("invalid JSON: ") + e.what());
  }
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

struct Sidecar {
  NetworkConfig network;
  TrainConfig train;
  std::uint64_t seed = 0;
  nlohmann::ordered_json raw;
};

Sidecar read_sidecar(const fs::path& dir) {
  const fs::path file = dir / "checkpoint.json";
  Sidecar s;
  s.raw = read_json_file(file);
  try {
    const auto& v = s.raw.at("format_version");
    if (!v.is_number_integer() || v.get<int>() != kCheckpointFormat) {
      throw FormatError(file.string(), 0, "unsupported checkpoint format_version " + v.dump());
    }
    s.network = network_config_from_json(s.raw.at("config").at("network"), "config.network");
    s.train = train_config_from_json(s.raw.at("config").at("train"), "config.train");
    s.seed = s.raw.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(file.string(), 0, e.what());
  } catch (const ConfigError& e) {
    throw FormatError(file.string(), 0, e.what());
  }
  return s;
}

}  // namespace

Trainer::Trainer(const NetworkConfig& network, const TrainConfig& train, std::uint64_t seed)
    : network_(network), train_(train), seed_(seed), rng_(seed) {
  network_.validate();
  train_.validate();
  net_ = std::make_unique<DepthNet>(network_, rng_);
  adam_ = std::make_unique<Adam>(net_->params(), train_.beta1, train_.beta2, train_.eps);
}

StepRecord Trainer::train_step(const NamedScene& item, Index epoch) {
  const Scene scene = train_.augment ? augment(item.scene, rng_, AugmentPolicy{}) : item.scene;
  const Tensor target = scene.target();
  const Prediction pred = net_->forward(scene.input(), Mode::Train, rng_);
  const LossTerms loss = prediction_loss(pred, target, network_);
  epoch_metrics_.push_back(evaluate_depth(pred.depth.detach(), target));

  ModuleParams& params = net_->params();
  params.zero_grad();
  backward(loss.total);
  const double lr = learning_rate(train_, epoch);
  adam_->step(lr);
  params.zero_grad();

  StepRecord r{epoch, global_step_++, item.name, lr, loss.total.item(), loss.l1, loss.grad, loss.normal};
  log_.steps.push_back(r);
  return r;
}

EpochRecord Trainer::train_epoch(const std::vector<NamedScene>& data) {
  if (data.empty()) throw UsageError("training needs at least one scene");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(order[i - 1], order[j]);
  }
  epoch_metrics_.clear();
  double total = 0.0;
  for (std::size_t i : order) total += train_step(data[i], epoch_).loss;
  EpochRecord e{epoch_, total / static_cast<double>(data.size()), aggregate(epoch_metrics_)};
  log_.epochs.push_back(e);
  ++epoch_;
  return e;
}

void Trainer::fit(const std::vector<NamedScene>& data, Index stop_after,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (data.empty()) throw UsageError("training needs at least one scene");
  for (const auto& s : data) {
    if (s.scene.height() != network_.height || s.scene.width() != network_.width ||
        s.scene.slices() != network_.slices) {
      throw UsageError("scene '" + s.name + "' is " + std::to_string(s.scene.height()) + "x" +
                       std::to_string(s.scene.width()) + " with " + std::to_string(s.scene.slices()) +
                       " slices; the network expects " + std::to_string(network_.height) + "x" +
                       std::to_string(network_.width) + " with " + std::to_string(network_.slices));
    }
  }
  for (Index done = 0; epoch_ < train_.epochs && (stop_after == 0 || done < stop_after); ++done) {
    const EpochRecord e = train_epoch(data);
    if (on_epoch) on_epoch(e);
  }
}

void Trainer::save(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  save_container(dir / "checkpoint.lfdp", net_->params().flatten());
  save_container(dir / "optimizer.lfdp", adam_->state());

  std::ostringstream rng_state;
  rng_state << rng_;
  nlohmann::ordered_json j;
  j["format_version"] = kCheckpointFormat;
  j["seed"] = seed_;
  j["config"] = {{"network", to_json(network_)}, {"train", to_json(train_)}};
  j["epoch"] = epoch_;
  j["global_step"] = global_step_;
  j["adam_step"] = adam_->steps();
  j["rng_state"] = rng_state.str();
  j["metrics"] = log_.epochs.empty() ? nlohmann::ordered_json(nullptr) : metrics_to_json(log_.epochs.back().metrics);
  write_text(dir / "checkpoint.json", j.dump(2) + "\n");
  write_text(dir / "train_log.json", train_log_to_json(log_).dump(2) + "\n");
}

Trainer Trainer::resume(const fs::path& dir) {
  const Sidecar s = read_sidecar(dir);
  Trainer t(s.network, s.train, s.seed);
  assign_params(t.net_->params(), load_container(dir / "checkpoint.lfdp"), (dir / "checkpoint.lfdp").string());
  const std::string sidecar = (dir / "checkpoint.json").string();
  try {
    t.adam_->load_state(load_container(dir / "optimizer.lfdp"), s.raw.at("adam_step").get<std::int64_t>(),
                        (dir / "optimizer.lfdp").string());
    t.epoch_ = s.raw.at("epoch").get<Index>();
    t.global_step_ = s.raw.at("global_step").get<std::int64_t>();
    std::istringstream rng_state(s.raw.at("rng_state").get<std::string>());
    rng_state >> t.rng_;
    if (!rng_state) throw FormatError(sidecar, 0, "unreadable rng_state");
    t.log_ = train_log_from_json(read_json_file(dir / "train_log.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar, 0, e.what());
  }
  return t;
}

LoadedModel load_model(const fs::path& ckpt) {
  const fs::path dir = fs::is_directory(ckpt) ? ckpt : ckpt.parent_path();
  const Sidecar s = read_sidecar(dir);
  LoadedModel m;
  m.config = s.network;
  m.seed = s.seed;
  Rng rng(s.seed);
  m.net = std::make_unique<DepthNet>(m.config, rng);
  const fs::path file = dir / "checkpoint.lfdp";
  assign_params(m.net->params(), load_container(file), file.string());
  return m;
}

Tensor predict_depth(const DepthNet& net, const Scene& scene) {
  NoGradGuard guard;
  Rng unused(0);
  const Prediction p = net.forward(scene.input(), Mode::Eval, unused);
  return reshape(p.depth, {1, scene.height(), scene.width()}).detach();
}

std::vector<SceneMetrics> evaluate_scenes(const DepthNet* net, const std::vector<NamedScene>& data, int threads,
                                          bool gt_as_prediction) {
  if (data.empty()) throw UsageError("evaluation needs at least one scene");
  if (!net && !gt_as_prediction) throw UsageError("evaluation needs a network");
  if (net) {
    const NetworkConfig& c = net->config();
    for (const auto& s : data) {
      if (s.scene.height() != c.height || s.scene.width() != c.width || s.scene.slices() != c.slices) {
        throw UsageError("scene '" + s.name + "' does not match the checkpoint's input size or slice count");
      }
    }
  }
  std::vector<SceneMetrics> out(data.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < data.size(); i = next++) {
      try {
        const Tensor gt = data[i].scene.target();
        const Tensor pred = gt_as_prediction ? gt : reshape(predict_depth(*net, data[i].scene), gt.shape());
        out[i] = {data[i].name, evaluate_depth(pred, gt)};
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(data.size())));
  std::vector<std::thread> pool;
  for (int k = 1; k < n; ++k) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<AblationRow> ablation_run(const std::vector<NamedScene>& train, const std::vector<NamedScene>& test,
                                      const std::vector<std::string>& ladder, const NetworkConfig& base,
                                      const TrainConfig& schedule, std::uint64_t seed, int threads,
                                      const std::function<void(const std::string&, const EpochRecord&)>& progress) {
  if (ladder.empty()) throw UsageError("ablation ladder is empty");
  for (const auto& id : ladder) ladder_entry(id);
  if (train.empty()) throw UsageError("ablation needs training scenes");
  if (test.empty()) throw UsageError("ablation needs test scenes");
  std::vector<AblationRow> rows;
  for (const auto& id : ladder) {
    Trainer t(ladder_config(id, base), schedule, seed);
    t.fit(train, 0, [&](const EpochRecord& e) {
      if (progress) progress(id, e);
    });
    std::vector<DepthMetrics> per_scene;
    for (const auto& r : evaluate_scenes(&t.net(), test, threads)) per_scene.push_back(r.metrics);
    AblationRow row;
    row.id = id;
    row.label = ladder_entry(id).label;
    row.metrics = aggregate(per_scene);
    row.parameters = t.net().params().parameter_count();
    row.log = t.log();
    const auto ma = moving_average_loss(row.log, 5);
    row.converged = !ma.empty() && is_monotone_nonincreasing(ma);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace lfd
