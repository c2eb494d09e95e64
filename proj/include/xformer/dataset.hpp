#ifndef XFORMER_DATASET_HPP
#define XFORMER_DATASET_HPP

// JSONL dataset records: one structure per line with keys
//   lattice     3×3 numbers, rows are l1, l2, l3 (Å)
//   coords      N×3 numbers
//   coord_type  "cart" | "frac"
//   species     N symbols or atomic numbers
//   target      optional number
//   id          optional string

#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "structures.hpp"

namespace xformer {

inline constexpr std::array<std::string_view, kMaxSpecies> kElementSymbols = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni",
    "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo",
    "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba",
    "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
    "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf"};

inline int atomic_number(std::string_view symbol) {
  for (std::size_t i = 0; i < kElementSymbols.size(); ++i) {
    if (kElementSymbols[i] == symbol) return static_cast<int>(i) + 1;
  }
  throw ValidationError("unknown species symbol: " + std::string(symbol));
}

struct StructureRecord {
  std::string id;
  CrystalStructure structure;
  std::optional<double> target;
};

namespace detail {

inline Vec3 read_vec3(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string(what) + ": expected 3 numbers");
  Vec3 v{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw ValidationError(std::string(what) + ": expected numbers");
    v[a] = j[a].get<double>();
  }
  return v;
}

}  // namespace detail

inline CrystalStructure parse_structure(const nlohmann::json& record) {
  if (!record.is_object()) throw ValidationError("record must be a JSON object");
  for (const char* key : {"lattice", "coords", "species"}) {
    if (!record.contains(key)) throw ValidationError(std::string("record missing key: ") + key);
  }
  const auto& lat = record["lattice"];
  if (!lat.is_array() || lat.size() != 3) throw ValidationError("lattice: expected 3 rows");
  Lattice lattice(detail::read_vec3(lat[0], "lattice"), detail::read_vec3(lat[1], "lattice"),
                  detail::read_vec3(lat[2], "lattice"));

  const std::string coord_type = record.value("coord_type", std::string("cart"));
  if (coord_type != "cart" && coord_type != "frac") {
    throw ValidationError("coord_type must be \"cart\" or \"frac\"");
  }
  const auto& coords = record["coords"];
  const auto& species = record["species"];
  if (!coords.is_array() || !species.is_array()) throw ValidationError("coords/species must be arrays");
  if (coords.size() != species.size()) {
    throw ValidationError("coordinate/species count mismatch: " + std::to_string(coords.size()) +
                          " coordinates, " + std::to_string(species.size()) + " species");
  }
  std::vector<int> numbers;
  numbers.reserve(species.size());
  for (const auto& z : species) {
    if (z.is_string()) {
      numbers.push_back(atomic_number(z.get<std::string>()));
    } else if (z.is_number_integer()) {
      const auto v = z.get<long long>();
      if (v < 1 || v > kMaxSpecies) throw ValidationError("atomic number outside 1..98: " + std::to_string(v));
      numbers.push_back(static_cast<int>(v));
    } else {
      throw ValidationError("species entries must be symbols or integers");
    }
  }
  std::vector<Vec3> xyz;
  xyz.reserve(coords.size());
  for (const auto& c : coords) xyz.push_back(detail::read_vec3(c, "coords"));
  if (coord_type == "frac") return CrystalStructure::from_fractional(lattice, xyz, std::move(numbers));
  return CrystalStructure(lattice, std::move(xyz), std::move(numbers));
}

/// Serializes with Cartesian coordinates, which round-trip bit-exactly.
inline nlohmann::json structure_to_json(const CrystalStructure& s) {
  nlohmann::json j;
  nlohmann::json lat = nlohmann::json::array();
  for (std::size_t a = 0; a < 3; ++a) {
    const auto& v = s.lattice().vector(a);
    lat.push_back({v[0], v[1], v[2]});
  }
  j["lattice"] = lat;
  nlohmann::json coords = nlohmann::json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Vec3& p = s.positions()[i];
    coords.push_back({p[0], p[1], p[2]});
  }
  j["coords"] = coords;
  j["coord_type"] = "cart";
  j["species"] = s.species();
  return j;
}

inline StructureRecord parse_record(const nlohmann::json& record) {
  StructureRecord r{record.value("id", std::string()), parse_structure(record), std::nullopt};
  if (record.contains("target") && !record["target"].is_null()) {
    if (!record["target"].is_number()) throw ValidationError("target must be a number");
    r.target = record["target"].get<double>();
  }
  return r;
}

inline nlohmann::json record_to_json(const StructureRecord& r) {
  auto j = structure_to_json(r.structure);
  if (!r.id.empty()) j["id"] = r.id;
  if (r.target) j["target"] = *r.target;
  return j;
}

inline std::vector<StructureRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset: " + path);
  std::vector<StructureRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_record(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<StructureRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write dataset: " + path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw ValidationError("write failed: " + path);
}

}  // namespace xformer

#endif  // XFORMER_DATASET_HPP
