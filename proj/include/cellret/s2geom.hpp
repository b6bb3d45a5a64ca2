#pragma once

// Discrete global grid over the unit sphere.
//
// The sphere is projected onto the six faces of a cube. Each face is
// subdivided as a quadtree whose cells are ordered along a Hilbert curve,
// and every cell is named by a 64-bit id:
//
//   bits 63..61  face (0..5)
//   bits 60..    2 bits per level of Hilbert position
//   sentinel     a single 1 bit at position 60 - 2 * level
//   below        zeros
//
// The trailing sentinel makes ids self-delimiting: the level can be read back
// from the id alone, and the ids of all descendants of a cell form one
// contiguous range around it.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "cellret/error.hpp"

namespace cellret {

using Vec3 = std::array<double, 3>;

inline constexpr int kMaxCellLevel = 30;
inline constexpr int kNumFaces = 6;
inline constexpr uint32_t kMaxSize = 1u << kMaxCellLevel;
inline constexpr int kMaxCoverLevel = 16;
inline constexpr std::size_t kDefaultCoverCap = 200'000;

// Number of cells at a level: 6 * 4^L.
constexpr uint64_t cell_count(int level) {
  return uint64_t{6} << (2 * level);
}
static_assert(cell_count(11) == 25'165'824);

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

// ---------------------------------------------------------------------------
// Coordinates

struct LatLng {
  double lat = 0.0;  // degrees, [-90, 90]
  double lng = 0.0;  // degrees, (-180, 180]

  bool is_valid() const {
    return std::isfinite(lat) && std::isfinite(lng) && lat >= -90.0 &&
           lat <= 90.0 && lng > -180.0 && lng <= 180.0;
  }

  friend bool operator==(const LatLng&, const LatLng&) = default;
};

// Accepts lng == -180 and folds it onto +180.
inline LatLng make_latlng(double lat, double lng) {
  if (!std::isfinite(lat) || !std::isfinite(lng)) {
    throw Error(ErrorKind::kInvalidArgument, "non-finite coordinate");
  }
  if (lat < -90.0 || lat > 90.0 || lng < -180.0 || lng > 180.0) {
    throw Error(ErrorKind::kInvalidArgument, "coordinate out of range");
  }
  if (lng == -180.0) lng = 180.0;
  return {lat, lng};
}

inline Vec3 to_point(const LatLng& ll) {
  const double phi = ll.lat * kDegToRad;
  const double theta = ll.lng * kDegToRad;
  const double c = std::cos(phi);
  return {c * std::cos(theta), c * std::sin(theta), std::sin(phi)};
}

inline LatLng to_latlng(const Vec3& p) {
  LatLng out;
  out.lat = std::atan2(p[2], std::sqrt(p[0] * p[0] + p[1] * p[1])) * kRadToDeg;
  out.lng = std::atan2(p[1], p[0]) * kRadToDeg;
  if (out.lng <= -180.0) out.lng = 180.0;
  return out;
}

// Latitude/longitude rectangle. lng_lo > lng_hi means the interval wraps
// across the antimeridian. A full longitude band is [-180, 180].
struct GeoRect {
  double lat_lo = 0.0;
  double lat_hi = 0.0;
  double lng_lo = 0.0;
  double lng_hi = 0.0;

  static GeoRect full() { return {-90.0, 90.0, -180.0, 180.0}; }

  bool is_valid() const {
    return std::isfinite(lat_lo) && std::isfinite(lat_hi) &&
           std::isfinite(lng_lo) && std::isfinite(lng_hi) && lat_lo <= lat_hi &&
           lat_lo >= -90.0 && lat_hi <= 90.0 && lng_lo >= -180.0 &&
           lng_lo <= 180.0 && lng_hi >= -180.0 && lng_hi <= 180.0;
  }

  bool wraps() const { return lng_lo > lng_hi; }
  bool full_lng() const { return lng_lo == -180.0 && lng_hi == 180.0; }

  bool contains_lng(double lng) const {
    auto in = [&](double x) {
      return wraps() ? (x >= lng_lo || x <= lng_hi)
                     : (x >= lng_lo && x <= lng_hi);
    };
    if (in(lng)) return true;
    return lng == 180.0 && in(-180.0);
  }

  bool contains(const LatLng& p) const {
    if (p.lat < lat_lo || p.lat > lat_hi) return false;
    if (std::abs(p.lat) == 90.0) return true;
    return contains_lng(p.lng);
  }

  friend bool operator==(const GeoRect&, const GeoRect&) = default;
};

// ---------------------------------------------------------------------------
// Cube-face projection

// Quadratic face-coordinate transform and its inverse.
inline double st_to_uv(double s) {
  if (s >= 0.5) return (1.0 / 3.0) * (4.0 * s * s - 1.0);
  return (1.0 / 3.0) * (1.0 - 4.0 * (1.0 - s) * (1.0 - s));
}

inline double uv_to_st(double u) {
  if (u >= 0.0) return 0.5 * std::sqrt(1.0 + 3.0 * u);
  return 1.0 - 0.5 * std::sqrt(1.0 - 3.0 * u);
}

// Face of a point: axis of the largest-magnitude coordinate, +3 when negative.
inline int face_of(const Vec3& p) {
  const double ax = std::abs(p[0]), ay = std::abs(p[1]), az = std::abs(p[2]);
  int axis = ax > ay ? (ax > az ? 0 : 2) : (ay > az ? 1 : 2);
  return p[axis] < 0 ? axis + 3 : axis;
}

// Signed distance of p along the outward normal of a face.
inline double face_normal_coord(int face, const Vec3& p) {
  return face < 3 ? p[face] : -p[face - 3];
}

// (u, v) of p projected onto a face. Valid only when face_normal_coord > 0.
//
//   face  normal   u       v
//   0     +x      y/x     z/x
//   1     +y     -x/y     z/y
//   2     +z     -x/z    -y/z
//   3     -x      z/x     y/x
//   4     -y      z/y    -x/y
//   5     -z     -y/z    -x/z
inline std::array<double, 2> face_uv(int face, const Vec3& p) {
  switch (face) {
    case 0: return {p[1] / p[0], p[2] / p[0]};
    case 1: return {-p[0] / p[1], p[2] / p[1]};
    case 2: return {-p[0] / p[2], -p[1] / p[2]};
    case 3: return {p[2] / p[0], p[1] / p[0]};
    case 4: return {p[2] / p[1], -p[0] / p[1]};
    default: return {-p[1] / p[2], -p[0] / p[2]};
  }
}

inline Vec3 face_uv_to_xyz(int face, double u, double v) {
  switch (face) {
    case 0: return {1.0, u, v};
    case 1: return {-u, 1.0, v};
    case 2: return {-u, -v, 1.0};
    case 3: return {-1.0, -v, -u};
    case 4: return {v, -1.0, -u};
    default: return {v, u, -1.0};
  }
}

// Half-open [lo, hi) mapping of s onto the leaf grid; s == 1 clamps to the
// last cell.
inline uint32_t st_to_ij(double s) {
  const double scaled = std::floor(static_cast<double>(kMaxSize) * s);
  if (scaled <= 0.0) return 0;
  if (scaled >= static_cast<double>(kMaxSize - 1)) return kMaxSize - 1;
  return static_cast<uint32_t>(scaled);
}

// ---------------------------------------------------------------------------
// Hilbert curve tables
//
// Orientation is a 2-bit mask: bit 0 swaps the i/j axes, bit 1 inverts both.
// ij values are packed as (i << 1) | j.

namespace hilbert {

inline constexpr int kSwapMask = 0x01;
inline constexpr int kInvertMask = 0x02;

inline constexpr int kPosToIJ[4][4] = {
    {0, 1, 3, 2},  // canonical
    {0, 2, 3, 1},  // swapped
    {3, 2, 0, 1},  // inverted
    {3, 1, 0, 2},  // swapped & inverted
};

inline constexpr int kIJToPos[4][4] = {
    {0, 1, 3, 2},
    {0, 3, 1, 2},
    {2, 3, 1, 0},
    {2, 1, 3, 0},
};

// Orientation change applied to the sub-square visited at each position.
inline constexpr int kPosToOrientation[4] = {kSwapMask, 0, 0,
                                             kSwapMask | kInvertMask};

inline constexpr int face_orientation(int face) { return face & kSwapMask; }

}  // namespace hilbert

// ---------------------------------------------------------------------------
// CellId

struct FaceIJ {
  int face = 0;
  uint32_t i = 0;  // lower-left corner on the leaf grid
  uint32_t j = 0;
  int level = 0;
  int orientation = 0;  // Hilbert orientation of the cell itself

  uint32_t size() const { return 1u << (kMaxCellLevel - level); }
};

class CellId {
 public:
  constexpr CellId() = default;
  constexpr explicit CellId(uint64_t raw) : raw_(raw) {}

  static CellId from_raw_checked(uint64_t raw) {
    CellId id(raw);
    if (!id.is_valid()) {
      throw Error(ErrorKind::kInvalidArgument,
                  "invalid cell id " + id.to_token());
    }
    return id;
  }

  static CellId from_face(int face) {
    return from_face_pos_level(face, 0, 0);
  }

  // pos is the Hilbert position among the 4^level cells of the face.
  static CellId from_face_pos_level(int face, uint64_t pos, int level) {
    if (face < 0 || face >= kNumFaces || level < 0 || level > kMaxCellLevel ||
        (level < kMaxCellLevel && pos >= (uint64_t{1} << (2 * level)))) {
      throw Error(ErrorKind::kInvalidArgument, "face/pos/level out of range");
    }
    const uint64_t raw = (uint64_t(face) << 61) | (pos << (61 - 2 * level)) |
                         (uint64_t{1} << (60 - 2 * level));
    return CellId(raw);
  }

  // Leaf cell at grid coordinates (i, j) of a face.
  static CellId from_face_ij(int face, uint32_t i, uint32_t j) {
    uint64_t pos = 0;
    int orientation = hilbert::face_orientation(face);
    for (int k = kMaxCellLevel - 1; k >= 0; --k) {
      const int ij = static_cast<int>((((i >> k) & 1u) << 1) | ((j >> k) & 1u));
      const int digit = hilbert::kIJToPos[orientation][ij];
      pos = (pos << 2) | static_cast<uint64_t>(digit);
      orientation ^= hilbert::kPosToOrientation[digit];
    }
    return CellId((uint64_t(face) << 61) | (pos << 1) | 1u);
  }

  constexpr uint64_t raw() const { return raw_; }

  constexpr bool is_valid() const {
    return face() < kNumFaces && (lsb() & 0x1555555555555555ull) != 0;
  }

  constexpr int face() const { return static_cast<int>(raw_ >> 61); }
  constexpr uint64_t lsb() const { return raw_ & (~raw_ + 1); }

  static constexpr uint64_t lsb_for_level(int level) {
    return uint64_t{1} << (2 * (kMaxCellLevel - level));
  }

  int level() const {
    require_valid();
    return (60 - std::countr_zero(raw_)) / 2;
  }

  // Hilbert position among the 4^level cells of the face.
  uint64_t pos_in_level() const {
    const int l = level();
    return (raw_ & (~uint64_t{0} >> 3)) >> (61 - 2 * l);
  }

  bool is_leaf() const { return (raw_ & 1u) != 0; }
  bool is_face() const { return (raw_ & (lsb_for_level(0) - 1)) == 0; }

  uint64_t range_min() const { return raw_ - (lsb() - 1); }
  uint64_t range_max() const { return raw_ + (lsb() - 1); }

  CellId parent(int level) const {
    const int own = this->level();
    if (level < 0 || level > own) {
      throw Error(ErrorKind::kInvalidArgument,
                  "parent level " + std::to_string(level) +
                      " is finer than cell level " + std::to_string(own));
    }
    const uint64_t new_lsb = lsb_for_level(level);
    return CellId((raw_ & (~new_lsb + 1)) | new_lsb);
  }

  CellId parent() const { return parent(level() - 1); }

  // k-th child in Hilbert order, k in [0, 4).
  CellId child(int k) const {
    if (level() >= kMaxCellLevel || k < 0 || k > 3) {
      throw Error(ErrorKind::kInvalidArgument, "no such child");
    }
    const uint64_t new_lsb = lsb() >> 2;
    return CellId(raw_ - lsb() + new_lsb + 2 * uint64_t(k) * new_lsb);
  }

  // Iteration over descendants at a level: [child_begin, child_end) stepping
  // with next().
  CellId child_begin(int level) const {
    return CellId(raw_ - lsb() + lsb_for_level(level));
  }
  CellId child_end(int level) const {
    return CellId(raw_ + lsb() + lsb_for_level(level));
  }
  CellId next() const { return CellId(raw_ + (lsb() << 1)); }

  bool contains(const CellId& other) const {
    return other.raw_ >= range_min() && other.raw_ <= range_max();
  }

  FaceIJ to_face_ij() const {
    FaceIJ out;
    out.face = face();
    out.level = level();
    int orientation = hilbert::face_orientation(out.face);
    uint32_t i = 0, j = 0;
    for (int k = 0; k < out.level; ++k) {
      const int digit = static_cast<int>((raw_ >> (59 - 2 * k)) & 3u);
      const int ij = hilbert::kPosToIJ[orientation][digit];
      i = (i << 1) | static_cast<uint32_t>(ij >> 1);
      j = (j << 1) | static_cast<uint32_t>(ij & 1);
      orientation ^= hilbert::kPosToOrientation[digit];
    }
    const int shift = kMaxCellLevel - out.level;
    out.i = shift >= 32 ? 0 : i << shift;
    out.j = shift >= 32 ? 0 : j << shift;
    out.orientation = orientation;
    return out;
  }

  // 16 hex digits, debug output only.
  std::string to_token() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(raw_));
    return buf;
  }

  std::string to_string() const { return std::to_string(raw_); }

  friend constexpr auto operator<=>(const CellId&, const CellId&) = default;

 private:
  void require_valid() const {
    if (!is_valid()) {
      throw Error(ErrorKind::kInvalidArgument, "invalid cell id " + to_token());
    }
  }

  uint64_t raw_ = 0;
};

struct CellIdHash {
  std::size_t operator()(const CellId& c) const noexcept {
    uint64_t x = c.raw();
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    return static_cast<std::size_t>(x);
  }
};

inline int level_of(CellId c) { return c.level(); }
inline CellId parent(CellId c, int level) { return c.parent(level); }

inline bool contains(CellId a, CellId b) {
  if (!a.is_valid() || !b.is_valid()) {
    throw Error(ErrorKind::kInvalidArgument, "invalid cell id");
  }
  return a.contains(b);
}

inline void check_level(int level) {
  if (level < 0 || level > kMaxCellLevel) {
    throw Error(ErrorKind::kInvalidArgument,
                "level " + std::to_string(level) + " out of range");
  }
}

inline CellId cell_from_point(const Vec3& p, int level) {
  check_level(level);
  const int face = face_of(p);
  const auto [u, v] = face_uv(face, p);
  const CellId leaf =
      CellId::from_face_ij(face, st_to_ij(uv_to_st(u)), st_to_ij(uv_to_st(v)));
  return leaf.parent(level);
}

inline CellId cell_from_latlng(const LatLng& p, int level) {
  const LatLng checked = make_latlng(p.lat, p.lng);
  return cell_from_point(to_point(checked), level);
}

// ---------------------------------------------------------------------------
// Cell geometry

struct CellUV {
  int face = 0;
  double u_lo = 0, u_hi = 0, v_lo = 0, v_hi = 0;
};

inline CellUV cell_uv_bounds(CellId c) {
  const FaceIJ fij = c.to_face_ij();
  const double scale = 1.0 / static_cast<double>(kMaxSize);
  const double size = static_cast<double>(fij.size());
  CellUV b;
  b.face = fij.face;
  b.u_lo = st_to_uv(fij.i * scale);
  b.u_hi = st_to_uv((fij.i + size) * scale);
  b.v_lo = st_to_uv(fij.j * scale);
  b.v_hi = st_to_uv((fij.j + size) * scale);
  return b;
}

inline Vec3 cell_center_point(CellId c) {
  const FaceIJ fij = c.to_face_ij();
  const double scale = 1.0 / static_cast<double>(kMaxSize);
  const double half = 0.5 * static_cast<double>(fij.size());
  const double u = st_to_uv((fij.i + half) * scale);
  const double v = st_to_uv((fij.j + half) * scale);
  return normalized(face_uv_to_xyz(fij.face, u, v));
}

inline LatLng cell_center(CellId c) {
  if (!c.is_valid()) {
    throw Error(ErrorKind::kInvalidArgument, "invalid cell id " + c.to_token());
  }
  return to_latlng(cell_center_point(c));
}

// Vertices in counter-clockwise (u, v) order.
inline std::array<Vec3, 4> cell_vertices(const CellUV& b) {
  return {normalized(face_uv_to_xyz(b.face, b.u_lo, b.v_lo)),
          normalized(face_uv_to_xyz(b.face, b.u_hi, b.v_lo)),
          normalized(face_uv_to_xyz(b.face, b.u_hi, b.v_hi)),
          normalized(face_uv_to_xyz(b.face, b.u_lo, b.v_hi))};
}

// Closed membership: points on a shared edge belong to both cells.
inline bool cell_contains_point(const CellUV& b, const Vec3& p) {
  if (face_normal_coord(b.face, p) <= 0.0) return false;
  const auto [u, v] = face_uv(b.face, p);
  return u >= b.u_lo && u <= b.u_hi && v >= b.v_lo && v <= b.v_hi;
}

inline bool cell_contains_point(CellId c, const Vec3& p) {
  return cell_contains_point(cell_uv_bounds(c), p);
}

namespace detail {

// Does the great-circle arc a->b (shorter than a half circle) touch the
// meridian segment at lng, lat in [lat_lo, lat_hi]?
inline bool arc_hits_meridian(const Vec3& a, const Vec3& b, double lng,
                              double lat_lo, double lat_hi) {
  const double t = lng * kDegToRad;
  const Vec3 n{-std::sin(t), std::cos(t), 0.0};
  const Vec3 m{std::cos(t), std::sin(t), 0.0};
  const double sa = dot(n, a);
  const double sb = dot(n, b);
  if ((sa > 0 && sb > 0) || (sa < 0 && sb < 0)) return false;
  if (sa == 0.0 && sb == 0.0) {
    // Arc lies in the meridian plane.
    if (dot(a, m) < 0 && dot(b, m) < 0) return false;
    const double la = to_latlng(a).lat, lb = to_latlng(b).lat;
    return std::max(la, lb) >= lat_lo && std::min(la, lb) <= lat_hi;
  }
  const double lambda = sa / (sa - sb);
  const Vec3 x = normalized({a[0] + lambda * (b[0] - a[0]),
                             a[1] + lambda * (b[1] - a[1]),
                             a[2] + lambda * (b[2] - a[2])});
  const double lat = to_latlng(x).lat;
  const bool at_pole = std::abs(x[0]) < 1e-15 && std::abs(x[1]) < 1e-15;
  if (!at_pole && dot(x, m) < 0) return false;
  return lat >= lat_lo && lat <= lat_hi;
}

// Does the great-circle arc a->b touch the parallel at lat within the
// longitude interval of r?
inline bool arc_hits_parallel(const Vec3& a, const Vec3& b, double lat,
                              const GeoRect& r) {
  const Vec3 axb = cross(a, b);
  const double sin_theta = norm(axb);
  const double theta = std::atan2(sin_theta, dot(a, b));
  if (sin_theta < 1e-300) return false;
  const double ab = dot(a, b);
  const Vec3 c = normalized({b[0] - ab * a[0], b[1] - ab * a[1], b[2] - ab * a[2]});
  // z(t) = a_z cos t + c_z sin t over t in [0, theta]
  const double amp = std::hypot(a[2], c[2]);
  const double target = std::sin(lat * kDegToRad);
  if (amp < std::abs(target) || amp == 0.0) return false;
  const double tau = std::atan2(c[2], a[2]);
  const double delta = std::acos(std::clamp(target / amp, -1.0, 1.0));
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (double t : {tau - delta, tau + delta}) {
    t = std::fmod(t, kTwoPi);
    if (t < 0) t += kTwoPi;
    if (t > theta) continue;
    const Vec3 p{a[0] * std::cos(t) + c[0] * std::sin(t),
                 a[1] * std::cos(t) + c[1] * std::sin(t),
                 a[2] * std::cos(t) + c[2] * std::sin(t)};
    if (r.contains_lng(to_latlng(p).lng)) return true;
  }
  return false;
}

}  // namespace detail

enum class RectRelation { kDisjoint, kIntersects, kContained };

// Exact relation between a cell region (great-circle edges) and a closed
// latitude/longitude rectangle.
inline RectRelation relate(const CellUV& b, const GeoRect& r) {
  const auto verts = cell_vertices(b);

  for (int k = 0; k < 4; ++k) {
    const Vec3& a = verts[k];
    const Vec3& c = verts[(k + 1) % 4];
    if (detail::arc_hits_meridian(a, c, r.lng_lo, r.lat_lo, r.lat_hi) ||
        detail::arc_hits_meridian(a, c, r.lng_hi, r.lat_lo, r.lat_hi)) {
      return RectRelation::kIntersects;
    }
    if (r.lat_lo > -90.0 && detail::arc_hits_parallel(a, c, r.lat_lo, r)) {
      return RectRelation::kIntersects;
    }
    if (r.lat_hi < 90.0 && detail::arc_hits_parallel(a, c, r.lat_hi, r)) {
      return RectRelation::kIntersects;
    }
  }

  // No boundary crossing: either nested or disjoint.
  for (double lat : {r.lat_lo, r.lat_hi}) {
    for (double lng : {r.lng_lo, r.lng_hi}) {
      if (cell_contains_point(b, to_point({lat, lng}))) {
        return RectRelation::kIntersects;
      }
    }
  }
  int inside = 0;
  for (const Vec3& v : verts) inside += r.contains(to_latlng(v)) ? 1 : 0;
  if (inside == 4) return RectRelation::kContained;
  if (inside > 0) return RectRelation::kIntersects;
  return RectRelation::kDisjoint;
}

inline RectRelation relate(CellId c, const GeoRect& r) {
  return relate(cell_uv_bounds(c), r);
}

inline bool intersects(CellId c, const GeoRect& r) {
  return relate(c, r) != RectRelation::kDisjoint;
}

// All cells at a level in ascending id order.
inline std::vector<CellId> all_cells(int level) {
  check_level(level);
  if (level > 12) {
    throw Error(ErrorKind::kCapacity, "refusing to enumerate level > 12");
  }
  std::vector<CellId> out;
  out.reserve(cell_count(level));
  for (int f = 0; f < kNumFaces; ++f) {
    const CellId face = CellId::from_face(f);
    for (CellId c = face.child_begin(level); c != face.child_end(level);
         c = c.next()) {
      out.push_back(c);
    }
  }
  return out;
}

// Cells at `level` whose regions intersect r, in ascending id order. Built by
// descending from the six face cells into intersecting children only; cells
// that lie wholly inside r are expanded without further tests.
inline std::vector<CellId> cover_rect(const GeoRect& r, int level,
                                      std::size_t max_cells = kDefaultCoverCap) {
  if (!r.is_valid()) {
    throw Error(ErrorKind::kInvalidArgument, "invalid rectangle");
  }
  if (level < 0 || level > kMaxCoverLevel) {
    throw Error(ErrorKind::kInvalidArgument,
                "covering level must be in [0, " +
                    std::to_string(kMaxCoverLevel) + "]");
  }
  std::vector<CellId> out;
  auto overflow = [&]() {
    throw Error(ErrorKind::kCapacity, "covering exceeds " +
                                          std::to_string(max_cells) + " cells");
  };
  auto visit = [&](auto&& self, CellId c) -> void {
    const int l = c.level();
    const RectRelation rel = relate(c, r);
    if (rel == RectRelation::kDisjoint) return;
    if (l == level) {
      if (out.size() >= max_cells) overflow();
      out.push_back(c);
      return;
    }
    if (rel == RectRelation::kContained) {
      const uint64_t n = uint64_t{1} << (2 * (level - l));
      if (out.size() + n > max_cells) overflow();
      for (CellId d = c.child_begin(level); d != c.child_end(level); d = d.next()) {
        out.push_back(d);
      }
      return;
    }
    for (int k = 0; k < 4; ++k) self(self, c.child(k));
  };
  for (int f = 0; f < kNumFaces; ++f) visit(visit, CellId::from_face(f));
  return out;
}

// Same region as cover_rect(r, level) but cells wholly inside r are kept at
// their own (coarser) level instead of being expanded. Ascending id order.
inline std::vector<CellId> cover_rect_compact(const GeoRect& r, int level) {
  if (!r.is_valid()) {
    throw Error(ErrorKind::kInvalidArgument, "invalid rectangle");
  }
  check_level(level);
  std::vector<CellId> out;
  auto visit = [&](auto&& self, CellId c) -> void {
    const RectRelation rel = relate(c, r);
    if (rel == RectRelation::kDisjoint) return;
    if (rel == RectRelation::kContained || c.level() == level) {
      out.push_back(c);
      return;
    }
    for (int k = 0; k < 4; ++k) self(self, c.child(k));
  };
  for (int f = 0; f < kNumFaces; ++f) visit(visit, CellId::from_face(f));
  return out;
}

}  // namespace cellret
