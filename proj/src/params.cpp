#include "protodet/params.hpp"

#include <fstream>

namespace protodet {

void ParamSnapshot::set(const std::string& name, Tensor value) {
  entries_.insert_or_assign(name, std::move(value));
}

const Tensor& ParamSnapshot::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

Tensor ParamSnapshot::get(const std::string& name, const Shape& expected) const {
  const Tensor& t = at(name);
  if (t.shape() != expected) {
    throw DimensionError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                         ", model expects " + shape_str(expected));
  }
  return t;
}

bool ParamSnapshot::operator==(const ParamSnapshot& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || !a->second.same_values(b->second)) return false;
  }
  return true;
}

nlohmann::json ParamSnapshot::to_json() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : entries_) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.to_vector()}});
  }
  return {{"format", "protodet.params"}, {"version", 1}, {"params", std::move(params)}};
}

ParamSnapshot ParamSnapshot::from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != "protodet.params") {
    throw ContractError("not a protodet parameter snapshot");
  }
  ParamSnapshot s;
  for (const auto& p : doc.at("params")) {
    s.set(p.at("name").get<std::string>(),
          Tensor(p.at("shape").get<Shape>(), p.at("values").get<std::vector<double>>()));
  }
  return s;
}

void ParamSnapshot::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

ParamSnapshot ParamSnapshot::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return from_json(nlohmann::json::parse(in));
}

}  // namespace protodet
