#include "lfdepth/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "lfdepth/errors.hpp"

namespace lfd {

Tensor& ModuleParams::add(const std::string& name, Tensor value) {
  if (name.empty() || name.find('.') != std::string::npos) {
    throw UsageError("invalid parameter name '" + name + "'");
  }
  if (entries_.count(name) || children_.count(name)) {
    throw UsageError("duplicate parameter name '" + name + "'");
  }
  value.set_requires_grad(true);
  return entries_.emplace(name, std::move(value)).first->second;
}

ModuleParams& ModuleParams::sub(const std::string& name) {
  if (name.empty() || name.find('.') != std::string::npos) {
    throw UsageError("invalid module name '" + name + "'");
  }
  if (entries_.count(name)) throw UsageError("module name clashes with entry '" + name + "'");
  auto& slot = children_[name];
  if (!slot) slot = std::make_unique<ModuleParams>();
  return *slot;
}

Tensor& ModuleParams::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("no parameter '" + name + "'");
  return it->second;
}

const Tensor& ModuleParams::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("no parameter '" + name + "'");
  return it->second;
}

const ModuleParams& ModuleParams::child(const std::string& name) const {
  auto it = children_.find(name);
  if (it == children_.end()) throw UsageError("no submodule '" + name + "'");
  return *it->second;
}

void ModuleParams::collect(const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor>>& out) const {
  for (const auto& [name, t] : entries_) out.emplace_back(prefix + name, t);
  for (const auto& [name, c] : children_) c->collect(prefix + name + ".", out);
}

std::vector<std::pair<std::string, Tensor>> ModuleParams::flatten(const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect(prefix.empty() ? "" : prefix + ".", out);
  std::unordered_set<const TensorImpl*> seen;
  for (const auto& [path, t] : out) {
    if (!seen.insert(t.id()).second) throw UsageError("parameter '" + path + "' aliases another");
  }
  return out;
}

const Tensor* ModuleParams::find(const std::string& path) const {
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    auto it = entries_.find(path);
    return it == entries_.end() ? nullptr : &it->second;
  }
  auto it = children_.find(path.substr(0, dot));
  return it == children_.end() ? nullptr : it->second->find(path.substr(dot + 1));
}

Index ModuleParams::parameter_count() const {
  Index n = 0;
  for (const auto& [path, t] : flatten()) n += t.numel();
  return n;
}

void ModuleParams::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
  for (auto& [name, c] : children_) c->zero_grad();
}

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n, "name");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(source_, pos_, std::string("truncated while reading ") + what);
    }
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out = {'L', 'F', 'D', 'P'};
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw UsageError("parameter name too long: " + name);
    if (t.rank() > 0xFF) throw UsageError("tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (Index e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

NamedTensors decode_container(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "LFDP", 4) != 0) throw FormatError(source, 0, "bad magic");
  (void)r.get<std::uint32_t>("magic");
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError(source, version_at,
                      "unsupported container version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  NamedTensors out;
  std::unordered_set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t entry_at = r.pos();
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.get_string(len);
    if (!names.insert(name).second) throw FormatError(source, entry_at, "duplicate name " + name);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::size_t at = r.pos();
      const auto e = r.get<std::uint32_t>("extent");
      if (e == 0) throw FormatError(source, at, "zero extent in " + name);
      shape.push_back(e);
      n *= e;
    }
    r.need(n * 8, "tensor data");
    Buffer data(n);
    for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>("tensor data"));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError(source, r.pos(), "trailing bytes after last entry");
  return out;
}

void save_container(const std::filesystem::path& file, const NamedTensors& tensors) {
  const auto bytes = encode_container(tensors);
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + file.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + file.string());
}

NamedTensors load_container(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_container(bytes, file.string());
}

void assign_params(ModuleParams& params, const NamedTensors& values, const std::string& source) {
  auto flat = params.flatten();
  if (flat.size() != values.size()) {
    throw FormatError(source, 0,
                      "container has " + std::to_string(values.size()) + " tensors, model expects " +
                          std::to_string(flat.size()));
  }
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : values) by_name[name] = &t;
  for (auto& [path, t] : flat) {
    auto it = by_name.find(path);
    if (it == by_name.end()) throw FormatError(source, 0, "missing tensor " + path);
    if (it->second->shape() != t.shape()) {
      throw FormatError(source, 0, "shape mismatch for " + path);
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

}  // namespace lfd
