#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lfdepth/tensor.hpp"

namespace lfd {

/// Hierarchical named collection of trainable tensors. Names are unique per
/// level and qualified paths join levels with '.'.
class ModuleParams {
 public:
  /// Registers a trainable leaf. Throws if the name is taken at this level.
  Tensor& add(const std::string& name, Tensor value);
  /// Child module; created on first access.
  ModuleParams& sub(const std::string& name);

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  bool has_sub(const std::string& name) const { return children_.count(name) > 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const ModuleParams& child(const std::string& name) const;

  /// Depth-first (entries before children, each in name order) list of
  /// (qualified path, tensor). Throws if two entries alias one tensor.
  std::vector<std::pair<std::string, Tensor>> flatten(const std::string& prefix = "") const;

  /// Looks up a qualified path. Returns nullptr if absent.
  const Tensor* find(const std::string& path) const;

  Index parameter_count() const;
  void zero_grad();

 private:
  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const;

  std::map<std::string, Tensor> entries_;
  std::map<std::string, std::unique_ptr<ModuleParams>> children_;
};

/// Flat list of named tensors as stored in a parameter container.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kContainerVersion = 1;

/// Container layout (little-endian):
///   "LFDP" | u32 version | u32 count |
///   count x { u16 name_len | name | u8 rank | u32 extents[rank] | f64 data[] }
std::vector<std::uint8_t> encode_container(const NamedTensors& tensors);
/// `source` names the origin in FormatError messages.
NamedTensors decode_container(std::span<const std::uint8_t> bytes,
                              const std::string& source = "<memory>");

void save_container(const std::filesystem::path& file, const NamedTensors& tensors);
NamedTensors load_container(const std::filesystem::path& file);

/// Copies values of every named tensor into `params`. The name set and shapes
/// must match exactly.
void assign_params(ModuleParams& params, const NamedTensors& values,
                   const std::string& source = "<memory>");

}  // namespace lfd
