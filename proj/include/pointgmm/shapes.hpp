#pragma once

// Procedural shape families built from axis-aligned boxes. They stand in for
// per-class shape collections: each family has continuous parameters drawn
// from a seed, and surfaces are sampled uniformly over total box face area.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pointgmm/errors.hpp"
#include "pointgmm/point_cloud.hpp"

namespace pointgmm {

struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.5);

  /// Face f: axis f / 2, side (f % 2 ? + : -).
  double face_area(int f) const {
    const int axis = f / 2;
    const int a = (axis + 1) % 3, b = (axis + 2) % 3;
    return 4.0 * half[a] * half[b];
  }
};

enum class ShapeFamily { Box, Table, Chair, Airplane };

inline std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Box: return "box";
    case ShapeFamily::Table: return "table";
    case ShapeFamily::Chair: return "chair";
    case ShapeFamily::Airplane: return "airplane";
  }
  return "?";
}

inline ShapeFamily parse_family(const std::string& s) {
  if (s == "box") return ShapeFamily::Box;
  if (s == "table") return ShapeFamily::Table;
  if (s == "chair") return ShapeFamily::Chair;
  if (s == "airplane") return ShapeFamily::Airplane;
  throw DomainError("unknown shape family '" + s + "'");
}

struct ProceduralShape {
  ShapeFamily family = ShapeFamily::Box;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;
  /// Scale/center to a bounding box with half-diagonal 1 at the origin.
  bool normalize = true;

  /// Unit axis-aligned cube centered at the origin, unnormalized.
  static ProceduralShape unit_box() {
    return ProceduralShape{ShapeFamily::Box, {{"x", 1.0}, {"y", 1.0}, {"z", 1.0}}, 0, false};
  }

  /// Family member with parameters drawn uniformly from the family's ranges.
  static ProceduralShape random(ShapeFamily family, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 0x5a9e));
    auto U = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    ProceduralShape s{family, {}, seed, true};
    switch (family) {
      case ShapeFamily::Box:
        s.params = {{"x", U(0.5, 1.5)}, {"y", U(0.5, 1.5)}, {"z", U(0.5, 1.5)}};
        break;
      case ShapeFamily::Table:
        s.params = {{"top_x", U(1.0, 2.0)},  {"top_y", U(0.6, 1.2)}, {"top_t", U(0.04, 0.1)},
                    {"height", U(0.6, 1.0)}, {"leg", U(0.05, 0.12)}, {"inset", U(0.0, 0.15)}};
        break;
      case ShapeFamily::Chair:
        s.params = {{"seat_x", U(0.8, 1.1)},  {"seat_y", U(0.8, 1.1)}, {"seat_t", U(0.06, 0.12)},
                    {"seat_h", U(0.8, 1.0)},  {"back_h", U(0.8, 1.3)}, {"leg", U(0.06, 0.1)},
                    {"slats", std::floor(U(2.0, 5.0))}};
        break;
      case ShapeFamily::Airplane:
        s.params = {{"length", U(2.5, 3.5)},     {"body", U(0.25, 0.4)},   {"span", U(2.2, 3.2)},
                    {"chord", U(0.4, 0.7)},      {"wing_pos", U(-0.2, 0.3)}, {"tail_span", U(0.8, 1.2)},
                    {"fin_h", U(0.35, 0.6)}};
        break;
    }
    return s;
  }

  double param(const char* name) const {
    auto it = params.find(name);
    if (it == params.end()) throw DomainError(std::string("shape parameter '") + name + "' missing");
    return it->second;
  }

  std::vector<Box> primitives() const {
    std::vector<Box> boxes;
    auto add = [&boxes](Vec3 lo, Vec3 hi) { boxes.push_back(Box{0.5 * (lo + hi), 0.5 * (hi - lo)}); };
    switch (family) {
      case ShapeFamily::Box: {
        const Vec3 h(param("x") / 2, param("y") / 2, param("z") / 2);
        add(-h, h);
        break;
      }
      case ShapeFamily::Table: {
        const double tx = param("top_x") / 2, ty = param("top_y") / 2, t = param("top_t"), H = param("height");
        const double leg = param("leg"), inset = param("inset") * std::min(tx, ty);
        add(Vec3(-tx, -ty, H - t), Vec3(tx, ty, H));
        for (int sx : {-1, 1})
          for (int sy : {-1, 1}) {
            const double cx = sx * (tx - inset - leg / 2), cy = sy * (ty - inset - leg / 2);
            add(Vec3(cx - leg / 2, cy - leg / 2, 0.0), Vec3(cx + leg / 2, cy + leg / 2, H - t));
          }
        break;
      }
      case ShapeFamily::Chair: {
        const double sx = param("seat_x") / 2, sy = param("seat_y") / 2, t = param("seat_t");
        const double H = param("seat_h") * 0.5, back = param("back_h") * 0.6, leg = param("leg");
        const int slats = static_cast<int>(param("slats"));
        add(Vec3(-sx, -sy, H - t), Vec3(sx, sy, H));
        for (int ix : {-1, 1})
          for (int iy : {-1, 1}) {
            const double cx = ix * (sx - leg / 2), cy = iy * (sy - leg / 2);
            add(Vec3(cx - leg / 2, cy - leg / 2, 0.0), Vec3(cx + leg / 2, cy + leg / 2, H - t));
          }
        // Back frame on the -y edge: two posts, a top rail and vertical slats.
        const double y0 = -sy, y1 = -sy + leg;
        add(Vec3(-sx, y0, H), Vec3(-sx + leg, y1, H + back));
        add(Vec3(sx - leg, y0, H), Vec3(sx, y1, H + back));
        add(Vec3(-sx, y0, H + back - 1.5 * leg), Vec3(sx, y1, H + back));
        const double span = 2.0 * sx - 2.0 * leg;
        for (int k = 0; k < slats; ++k) {
          const double cx = -sx + leg + span * (k + 1.0) / (slats + 1.0);
          add(Vec3(cx - leg / 3, y0, H), Vec3(cx + leg / 3, y1, H + back - 1.5 * leg));
        }
        break;
      }
      case ShapeFamily::Airplane: {
        const double L = param("length") / 2, b = param("body") / 2, span = param("span") / 2;
        const double chord = param("chord"), wx = param("wing_pos"), tail = param("tail_span") / 2;
        const double fin = param("fin_h");
        add(Vec3(-L, -b, -b), Vec3(L, b, b));                                                  // fuselage along x
        add(Vec3(wx - chord / 2, -span, -0.04), Vec3(wx + chord / 2, span, 0.04));             // main wing
        add(Vec3(-L, -tail, 0.0), Vec3(-L + 0.6 * chord, tail, 0.06));                          // stabilizer
        add(Vec3(-L, -0.03, b), Vec3(-L + 0.7 * chord, 0.03, b + fin));                          // fin
        add(Vec3(L, -0.6 * b, -0.6 * b), Vec3(L + 0.8 * b, 0.6 * b, 0.6 * b));                 // nose
        break;
      }
    }
    if (normalize) {
      Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
      for (const auto& bx : boxes) {
        lo = lo.cwiseMin(bx.center - bx.half);
        hi = hi.cwiseMax(bx.center + bx.half);
      }
      const Vec3 c = 0.5 * (lo + hi);
      const double s = 1.0 / (0.5 * (hi - lo).norm());
      for (auto& bx : boxes) {
        bx.center = (bx.center - c) * s;
        bx.half *= s;
      }
    }
    return boxes;
  }
};

/// Area-weighted uniform samples over all box faces; deterministic per seed.
inline PointCloud sample_shape(const ProceduralShape& shape, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw DomainError("sample_shape: n must be >= 1");
  const auto boxes = shape.primitives();
  std::vector<double> areas;
  for (const auto& b : boxes)
    for (int f = 0; f < 6; ++f) areas.push_back(b.face_area(f));
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointMatrix out(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = pick(rng);
    const Box& b = boxes[k / 6];
    const int f = static_cast<int>(k % 6);
    const int axis = f / 2;
    Vec3 p;
    for (int d = 0; d < 3; ++d) p[d] = u(rng);
    p[axis] = (f % 2) ? 1.0 : -1.0;
    out.row(static_cast<Eigen::Index>(i)) = (b.center + b.half.cwiseProduct(p)).transpose();
  }
  return PointCloud(std::move(out));
}

/// Seeds a corpus of `count` shapes cycling over `families`.
inline std::vector<ProceduralShape> procedural_corpus(const std::vector<ShapeFamily>& families, std::size_t count,
                                                      std::uint64_t seed) {
  if (families.empty()) throw DomainError("procedural_corpus: no families");
  std::vector<ProceduralShape> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(ProceduralShape::random(families[i % families.size()], derive_seed(seed, 0xc0, i)));
  return out;
}

}  // namespace pointgmm
