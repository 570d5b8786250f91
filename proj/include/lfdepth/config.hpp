#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "lfdepth/model.hpp"
#include "lfdepth/synthdata.hpp"
#include "lfdepth/train.hpp"

namespace lfd {

using Json = nlohmann::ordered_json;

/// Everything a run needs besides the data itself. Every section and key is
/// optional and defaults to the struct defaults; unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  NetworkConfig network;
  TrainConfig train;
  GenSpec data;
  std::string data_dir;
  std::string out_dir;

  void validate() const;
};

Json to_json(const NetworkConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const GenSpec& c);
Json to_json(const RunConfig& c);

/// Strict readers. `where` prefixes key paths in ConfigError messages.
NetworkConfig network_config_from_json(const Json& j, const std::string& where = "network");
TrainConfig train_config_from_json(const Json& j, const std::string& where = "train");
GenSpec gen_spec_from_json(const Json& j, const std::string& where = "data");
RunConfig run_config_from_json(const Json& j);

/// Parses and validates a run-config file. Unreadable file: IoError; bad JSON,
/// schema or values: ConfigError.
RunConfig load_run_config(const std::filesystem::path& file);

}  // namespace lfd
