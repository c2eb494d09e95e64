#ifndef XFORMER_STRUCTURES_HPP
#define XFORMER_STRUCTURES_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"

namespace xformer {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;  // row-major
using TranslationIndex = std::array<int, 3>;

inline constexpr int kMaxSpecies = 98;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator-(const Vec3& a) { return {-a[0], -a[1], -a[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm2(const Vec3& a) { return dot(a, a); }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 matvec(const Mat3& m, const Vec3& v) { return {dot(m[0], v), dot(m[1], v), dot(m[2], v)}; }
inline double determinant(const Mat3& m) { return dot(cross(m[0], m[1]), m[2]); }

/// Three lattice vectors l1, l2, l3 (Å) with cached volume and reciprocal
/// vectors l̄a = 2π/V · (lb × lc).
class Lattice {
 public:
  static constexpr double kMinVolume = 1e-8;

  Lattice() : Lattice(Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}) {}
  Lattice(const Vec3& l1, const Vec3& l2, const Vec3& l3) : vectors_{l1, l2, l3} {
    volume_ = dot(cross(l1, l2), l3);
    if (!std::isfinite(volume_) || std::abs(volume_) <= kMinVolume) {
      throw ValidationError("singular lattice (|V| <= 1e-8)");
    }
    const double f = 2.0 * std::numbers::pi / volume_;
    reciprocal_ = {f * cross(l2, l3), f * cross(l3, l1), f * cross(l1, l2)};
  }
  explicit Lattice(const Mat3& rows) : Lattice(rows[0], rows[1], rows[2]) {}

  static Lattice cubic(double a) { return Lattice({a, 0, 0}, {0, a, 0}, {0, 0, a}); }

  /// Lattice from edge lengths (Å) and angles (degrees) in the usual
  /// crystallographic convention: l1 along x, l2 in the xy plane.
  static Lattice from_parameters(double a, double b, double c, double alpha_deg, double beta_deg,
                                 double gamma_deg) {
    const double d = std::numbers::pi / 180.0;
    const double ca = std::cos(alpha_deg * d), cb = std::cos(beta_deg * d);
    const double cg = std::cos(gamma_deg * d), sg = std::sin(gamma_deg * d);
    const double cx = c * cb;
    const double cy = c * (ca - cb * cg) / sg;
    const double cz2 = c * c - cx * cx - cy * cy;
    if (!(cz2 > 0.0)) throw ValidationError("singular lattice (inconsistent cell angles)");
    return Lattice({a, 0, 0}, {b * cg, b * sg, 0}, {cx, cy, std::sqrt(cz2)});
  }

  [[nodiscard]] const Vec3& vector(std::size_t a) const { return vectors_[a]; }
  [[nodiscard]] const Mat3& vectors() const noexcept { return vectors_; }
  [[nodiscard]] const Vec3& reciprocal(std::size_t a) const { return reciprocal_[a]; }
  [[nodiscard]] double volume() const noexcept { return volume_; }
  [[nodiscard]] double abs_volume() const noexcept { return std::abs(volume_); }

  /// ‖lb × lc‖ for the two axes other than `a`.
  [[nodiscard]] double face_area(std::size_t a) const {
    return norm(cross(vectors_[(a + 1) % 3], vectors_[(a + 2) % 3]));
  }
  /// Distance between adjacent lattice planes normal to axis a: |V| / ‖lb × lc‖.
  [[nodiscard]] double plane_spacing(std::size_t a) const { return abs_volume() / face_area(a); }

  [[nodiscard]] Vec3 to_cartesian(const Vec3& f) const {
    return f[0] * vectors_[0] + f[1] * vectors_[1] + f[2] * vectors_[2];
  }
  [[nodiscard]] Vec3 to_fractional(const Vec3& r) const {
    const double inv = 0.5 / std::numbers::pi;
    return {inv * dot(reciprocal_[0], r), inv * dot(reciprocal_[1], r), inv * dot(reciprocal_[2], r)};
  }
  /// L·n for an integer translation.
  [[nodiscard]] Vec3 translation(const TranslationIndex& n) const {
    return to_cartesian({double(n[0]), double(n[1]), double(n[2])});
  }

  friend bool operator==(const Lattice& a, const Lattice& b) { return a.vectors_ == b.vectors_; }

 private:
  Mat3 vectors_{};
  Mat3 reciprocal_{};
  double volume_ = 0.0;
};

/// Wraps a fractional coordinate into [0, 1).
inline double wrap_unit(double f) {
  double w = f - std::floor(f);
  if (w >= 1.0) w = 0.0;
  return w;
}

/// Unit cell of a periodic structure: lattice, Cartesian positions (Å) and
/// atomic numbers. Positions are kept in canonical form, L⁻¹p ∈ [0,1)³.
class CrystalStructure {
 public:
  CrystalStructure(Lattice lattice, std::vector<Vec3> positions, std::vector<int> species)
      : lattice_(std::move(lattice)), positions_(std::move(positions)), species_(std::move(species)) {
    if (positions_.empty()) throw ValidationError("structure must contain at least one atom");
    if (positions_.size() != species_.size()) {
      throw ValidationError("coordinate/species count mismatch: " + std::to_string(positions_.size()) +
                            " coordinates, " + std::to_string(species_.size()) + " species");
    }
    for (int z : species_) {
      if (z < 1 || z > kMaxSpecies) {
        throw ValidationError("atomic number outside 1..98: " + std::to_string(z));
      }
    }
    for (auto& p : positions_) {
      for (double x : p) {
        if (!std::isfinite(x)) throw ValidationError("non-finite coordinate");
      }
      const Vec3 f = lattice_.to_fractional(p);
      const Vec3 w{wrap_unit(f[0]), wrap_unit(f[1]), wrap_unit(f[2])};
      if (w != f) p = lattice_.to_cartesian(w);
    }
  }

  static CrystalStructure from_fractional(Lattice lattice, const std::vector<Vec3>& frac,
                                          std::vector<int> species) {
    std::vector<Vec3> cart;
    cart.reserve(frac.size());
    for (const auto& f : frac) {
      Vec3 w{wrap_unit(f[0]), wrap_unit(f[1]), wrap_unit(f[2])};
      cart.push_back(lattice.to_cartesian(w));
    }
    return CrystalStructure(std::move(lattice), std::move(cart), std::move(species));
  }

  [[nodiscard]] std::size_t size() const noexcept { return positions_.size(); }
  [[nodiscard]] const Lattice& lattice() const noexcept { return lattice_; }
  [[nodiscard]] const std::vector<Vec3>& positions() const noexcept { return positions_; }
  [[nodiscard]] const std::vector<int>& species() const noexcept { return species_; }
  [[nodiscard]] Vec3 fractional(std::size_t i) const { return lattice_.to_fractional(positions_.at(i)); }

  friend bool operator==(const CrystalStructure&, const CrystalStructure&) = default;

 private:
  Lattice lattice_;
  std::vector<Vec3> positions_;
  std::vector<int> species_;
};

/// Image position p_i + n1 l1 + n2 l2 + n3 l3.
inline Vec3 translated_position(const CrystalStructure& s, std::size_t i, const TranslationIndex& n) {
  if (i >= s.size()) throw ValidationError("atom index out of range");
  return s.positions()[i] + s.lattice().translation(n);
}

/// Reorders atoms: output atom k is input atom perm[k] (0-based).
inline CrystalStructure permute(const CrystalStructure& s, const std::vector<std::size_t>& perm) {
  const std::size_t n = s.size();
  if (perm.size() != n) throw ValidationError("permutation size mismatch");
  std::vector<bool> seen(n, false);
  std::vector<Vec3> pos;
  std::vector<int> spec;
  for (std::size_t k : perm) {
    if (k >= n || seen[k]) throw ValidationError("permutation is not a bijection");
    seen[k] = true;
    pos.push_back(s.positions()[k]);
    spec.push_back(s.species()[k]);
  }
  return CrystalStructure(s.lattice(), std::move(pos), std::move(spec));
}

/// positions ← R·p + b, lattice ← R·L, then re-wrapped into the cell.
/// Accepts proper and improper rotations (det = ±1).
inline CrystalStructure rigid_transform(const CrystalStructure& s, const Mat3& rotation, const Vec3& shift) {
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      // (RᵀR)_ab = column a · column b
      double v = 0.0;
      for (std::size_t k = 0; k < 3; ++k) v += rotation[k][a] * rotation[k][b];
      if (std::abs(v - (a == b ? 1.0 : 0.0)) > 1e-10) throw ValidationError("rotation is not orthogonal");
    }
  }
  const auto& L = s.lattice();
  Lattice lat(matvec(rotation, L.vector(0)), matvec(rotation, L.vector(1)), matvec(rotation, L.vector(2)));
  std::vector<Vec3> pos;
  pos.reserve(s.size());
  for (const auto& p : s.positions()) pos.push_back(matvec(rotation, p) + shift);
  return CrystalStructure(std::move(lat), std::move(pos), s.species());
}

/// Supercell/shift re-expression Φ(s, k, p): lattice [k1 l1, k2 l2, k3 l3],
/// atoms p_i + L n − p inside the new cell. Output atoms are ordered by
/// source atom, then by cell offset, so atom t comes from input atom t / (k1 k2 k3).
inline CrystalStructure unit_cell_slice(const CrystalStructure& s, const TranslationIndex& k, const Vec3& shift) {
  for (int x : k) {
    if (x < 1) throw ValidationError("unit_cell_slice: k components must be positive");
  }
  const auto& L = s.lattice();
  Lattice big(double(k[0]) * L.vector(0), double(k[1]) * L.vector(1), double(k[2]) * L.vector(2));
  std::vector<Vec3> pos;
  std::vector<int> spec;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Vec3 f = L.to_fractional(s.positions()[i] - shift);
    const Vec3 base{f[0] - std::floor(f[0]), f[1] - std::floor(f[1]), f[2] - std::floor(f[2])};
    for (int t0 = 0; t0 < k[0]; ++t0) {
      for (int t1 = 0; t1 < k[1]; ++t1) {
        for (int t2 = 0; t2 < k[2]; ++t2) {
          const Vec3 g{(base[0] + t0) / k[0], (base[1] + t1) / k[1], (base[2] + t2) / k[2]};
          pos.push_back(big.to_cartesian({wrap_unit(g[0]), wrap_unit(g[1]), wrap_unit(g[2])}));
          spec.push_back(s.species()[i]);
        }
      }
    }
  }
  return CrystalStructure(std::move(big), std::move(pos), std::move(spec));
}

/// Difference p_j − p_i reduced so its fractional components lie in
/// [−0.5, 0.5): the nearest periodic copy of j as seen from i.
inline Vec3 centered_delta(const Lattice& lattice, const Vec3& pi, const Vec3& pj) {
  Vec3 f = lattice.to_fractional(pj - pi);
  for (auto& x : f) x -= std::floor(x + 0.5);
  return lattice.to_cartesian(f);
}

}  // namespace xformer

#endif  // XFORMER_STRUCTURES_HPP
