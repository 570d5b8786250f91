#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lfdepth/metrics.hpp"
#include "lfdepth/model.hpp"
#include "lfdepth/synthdata.hpp"

namespace lfd {

struct TrainConfig {
  Index epochs = 50;
  double lr = 1e-4;
  double lr_late = 3e-5;
  /// First (0-based) epoch trained at `lr_late`.
  Index lr_drop_epoch = 40;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool augment = true;

  void validate() const;
};

double learning_rate(const TrainConfig& config, Index epoch);

/// Adaptive-moment optimizer with bias correction over every leaf of a module.
class Adam {
 public:
  Adam(ModuleParams& params, double beta1, double beta2, double eps);

  /// One update from the gradients accumulated in the leaves. Leaves without a
  /// gradient count as zero gradient.
  void step(double lr);
  std::int64_t steps() const { return t_; }

  /// Moments as "m.<path>" / "v.<path>" entries.
  NamedTensors state() const;
  void load_state(const NamedTensors& state, std::int64_t steps, const std::string& source);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct StepRecord {
  Index epoch = 0;
  Index step = 0;  // global, 0-based
  std::string scene;
  double lr = 0.0;
  double loss = 0.0;
  double l1 = 0.0;
  double grad = 0.0;
  double normal = 0.0;
};

struct EpochRecord {
  Index epoch = 0;
  double mean_loss = 0.0;
  /// Aggregated over the training predictions made during the epoch.
  DepthMetrics metrics;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

nlohmann::ordered_json train_log_to_json(const TrainLog& log);
TrainLog train_log_from_json(const nlohmann::ordered_json& j);

/// Trailing moving average of per-epoch mean loss over `window` epochs.
std::vector<double> moving_average_loss(const TrainLog& log, std::size_t window);
/// True when the moving average never increases.
bool is_monotone_nonincreasing(const std::vector<double>& values);

struct NamedScene {
  std::string name;
  Scene scene;
};

/// Reads the scenes of one split from a dataset root.
std::vector<NamedScene> load_split(const std::string& root, const std::string& split);

inline constexpr int kCheckpointFormat = 1;

/// Batch-1 training. One RNG stream seeded once drives initialisation, the
/// per-epoch shuffle, augmentation and dropout, in that order of first use.
class Trainer {
 public:
  Trainer(const NetworkConfig& network, const TrainConfig& train, std::uint64_t seed);

  const DepthNet& net() const { return *net_; }
  DepthNet& net() { return *net_; }
  const TrainLog& log() const { return log_; }
  Index epoch() const { return epoch_; }
  std::int64_t global_step() const { return global_step_; }
  const NetworkConfig& network_config() const { return network_; }
  const TrainConfig& train_config() const { return train_; }
  std::uint64_t seed() const { return seed_; }

  /// One forward/backward/update on a scene. Returns the record it appends.
  StepRecord train_step(const NamedScene& scene, Index epoch);
  /// Trains the next epoch over `data` in a seeded random order.
  EpochRecord train_epoch(const std::vector<NamedScene>& data);
  /// Runs epochs until `config.epochs` or `stop_after` epochs in this call
  /// (0 = no limit). Calls `on_epoch` after each.
  void fit(const std::vector<NamedScene>& data, Index stop_after = 0,
           const std::function<void(const EpochRecord&)>& on_epoch = {});

  /// Writes checkpoint.lfdp, optimizer.lfdp, checkpoint.json and train_log.json.
  void save(const std::filesystem::path& dir) const;
  /// Restores a trainer from a directory written by `save`.
  static Trainer resume(const std::filesystem::path& dir);

 private:
  NetworkConfig network_;
  TrainConfig train_;
  std::uint64_t seed_;
  Rng rng_;
  std::unique_ptr<DepthNet> net_;
  std::unique_ptr<Adam> adam_;
  TrainLog log_;
  Index epoch_ = 0;
  std::int64_t global_step_ = 0;
  std::vector<DepthMetrics> epoch_metrics_;
};

/// Network restored from a checkpoint directory, or any file inside one.
struct LoadedModel {
  NetworkConfig config;
  std::unique_ptr<DepthNet> net;
  std::uint64_t seed = 0;
};
LoadedModel load_model(const std::filesystem::path& ckpt);

/// Eval-mode depth prediction for one scene, as [1,H,W].
Tensor predict_depth(const DepthNet& net, const Scene& scene);

struct SceneMetrics {
  std::string name;
  DepthMetrics metrics;
};

/// Per-scene metrics in input order; scenes fan out over `threads` workers.
/// With `gt_as_prediction` the ground truth stands in for the network output.
std::vector<SceneMetrics> evaluate_scenes(const DepthNet* net, const std::vector<NamedScene>& data,
                                          int threads, bool gt_as_prediction = false);

struct AblationRow {
  std::string id;
  std::string label;
  DepthMetrics metrics;
  Index parameters = 0;
  TrainLog log;
  bool converged = false;
};

/// Trains every ladder entry with the same seed and schedule and evaluates on `test`.
std::vector<AblationRow> ablation_run(const std::vector<NamedScene>& train,
                                      const std::vector<NamedScene>& test,
                                      const std::vector<std::string>& ladder,
                                      const NetworkConfig& base, const TrainConfig& schedule,
                                      std::uint64_t seed, int threads,
                                      const std::function<void(const std::string&, const EpochRecord&)>& progress = {});

}  // namespace lfd
