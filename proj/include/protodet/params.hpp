#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "protodet/tensor.hpp"

namespace protodet {

// Visits a named, mutable parameter tensor.
using ParamVisitor = std::function<void(const std::string& name, Tensor& value)>;

/// Named parameter values, ordered by name.
///
/// Serialized as {"format": "protodet.params", "version": 1, "params":
/// [{"name", "shape", "values"}, ...]} with entries sorted by name. Doubles
/// are written with round-trip precision.
class ParamSnapshot {
 public:
  ParamSnapshot() = default;

  template <class Model>
  static ParamSnapshot of(Model& model) {
    ParamSnapshot s;
    model.visit_params([&](const std::string& name, Tensor& t) { s.set(name, t.detached()); });
    return s;
  }

  // Copies every stored value into `model`; names and shapes must match.
  template <class Model>
  void apply_to(Model& model) const {
    std::size_t seen = 0;
    model.visit_params([&](const std::string& name, Tensor& t) {
      t = get(name, t.shape());
      ++seen;
    });
    if (seen != entries_.size()) throw ContractError("snapshot holds parameters the model lacks");
  }

  void set(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::string, Tensor>& entries() const noexcept { return entries_; }
  bool operator==(const ParamSnapshot& other) const;

  nlohmann::json to_json() const;
  static ParamSnapshot from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static ParamSnapshot load(const std::filesystem::path& path);

 private:
  Tensor get(const std::string& name, const Shape& expected) const;
  std::map<std::string, Tensor> entries_;
};

}  // namespace protodet
