#include "cmah/data.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

#include "cmah/geometry.hpp"

namespace cmah::data {

namespace {

static_assert(std::endian::native == std::endian::little,
              "dataset IO assumes a little-endian host");

constexpr char kMagic[7] = {'C', 'M', 'A', 'H', 'D', 'S', '1'};
constexpr uint16_t kVersion = 1;
constexpr Scalar kExtent = 1.2;  // projection window half-width, clouds fit in the unit ball

constexpr const char* kShapeNames[kShapeClassCount] = {
    "sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid", "prism",
};

Scalar snap32(Scalar v) { return static_cast<Scalar>(static_cast<float>(v)); }

Eigen::Vector3d sphere_dir(Rng& rng) {
  double x, y, z, n2;
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n2 = x * x + y * y + z * z;
  } while (n2 < 1e-12);
  const double s = 1.0 / std::sqrt(n2);
  return {x * s, y * s, z * s};
}

Eigen::Vector3d in_triangle(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                            const Eigen::Vector3d& c, Rng& rng) {
  double u = rng.uniform01(), v = rng.uniform01();
  if (u + v > 1.0) {
    u = 1.0 - u;
    v = 1.0 - v;
  }
  return a + u * (b - a) + v * (c - a);
}

Eigen::Vector3d cube_point(Rng& rng) {
  const int face = rng.uniform_int(6);
  Eigen::Vector3d p(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  p[face / 2] = face % 2 == 0 ? 1.0 : -1.0;
  return p;
}

Eigen::Vector3d cylinder_point(Rng& rng) {
  // radius 1, z in [-1, 1]; side area 4pi vs cap area 2pi
  if (rng.uniform01() < 2.0 / 3.0) {
    const double t = rng.uniform(0.0, 2.0 * M_PI);
    return {std::cos(t), std::sin(t), rng.uniform(-1.0, 1.0)};
  }
  const double r = std::sqrt(rng.uniform01());
  const double t = rng.uniform(0.0, 2.0 * M_PI);
  const double z = rng.uniform01() < 0.5 ? 1.0 : -1.0;
  return {r * std::cos(t), r * std::sin(t), z};
}

Eigen::Vector3d cone_point(Rng& rng) {
  // apex (0,0,1), base disk radius 1 at z = -1; lateral pi*sqrt(5) vs base pi
  const double sqrt5 = std::sqrt(5.0);
  const double t = rng.uniform(0.0, 2.0 * M_PI);
  if (rng.uniform01() < sqrt5 / (sqrt5 + 1.0)) {
    const double f = std::sqrt(rng.uniform01());  // fraction of the way down from the apex
    return {f * std::cos(t), f * std::sin(t), 1.0 - 2.0 * f};
  }
  const double r = std::sqrt(rng.uniform01());
  return {r * std::cos(t), r * std::sin(t), -1.0};
}

Eigen::Vector3d torus_point(Rng& rng) {
  // major radius 1, minor 0.4; reject on the (R + r cos phi) area factor
  const double R = 1.0, r = 0.4;
  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  double phi;
  do {
    phi = rng.uniform(0.0, 2.0 * M_PI);
  } while (rng.uniform01() >= (R + r * std::cos(phi)) / (R + r));
  const double ring = R + r * std::cos(phi);
  return {ring * std::cos(theta), ring * std::sin(theta), r * std::sin(phi)};
}

Eigen::Vector3d pyramid_point(Rng& rng) {
  // base [-1,1]^2 at z = -1, apex (0,0,1); base area 4, each side sqrt(5)
  const double sqrt5 = std::sqrt(5.0);
  if (rng.uniform01() < 4.0 / (4.0 + 4.0 * sqrt5)) {
    return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), -1.0};
  }
  static const Eigen::Vector3d corner[4] = {
      {-1.0, -1.0, -1.0}, {1.0, -1.0, -1.0}, {1.0, 1.0, -1.0}, {-1.0, 1.0, -1.0}};
  const int f = rng.uniform_int(4);
  return in_triangle(corner[f], corner[(f + 1) % 4], {0.0, 0.0, 1.0}, rng);
}

Eigen::Vector3d ellipsoid_point(Rng& rng) {
  // semi-axes (1, 0.65, 0.45); reject on the surface-measure distortion
  const double a = 1.0, b = 0.65, c = 0.45;
  while (true) {
    const Eigen::Vector3d d = sphere_dir(rng);
    const double m = std::sqrt(b * c * d.x() * (b * c * d.x()) + a * c * d.y() * (a * c * d.y()) +
                               a * b * d.z() * (a * b * d.z()));
    if (rng.uniform01() < m / (a * b)) return {a * d.x(), b * d.y(), c * d.z()};
  }
}

Eigen::Vector3d prism_point(Rng& rng) {
  // equilateral cross-section with circumradius 1, z in [-1, 1]
  static const Eigen::Vector3d v[3] = {
      {std::cos(M_PI / 2.0), std::sin(M_PI / 2.0), 0.0},
      {std::cos(M_PI * 7.0 / 6.0), std::sin(M_PI * 7.0 / 6.0), 0.0},
      {std::cos(M_PI * 11.0 / 6.0), std::sin(M_PI * 11.0 / 6.0), 0.0}};
  // three side rectangles 2*sqrt(3) each vs two caps 3*sqrt(3)/4 each
  if (rng.uniform01() < 0.8) {
    const int e = rng.uniform_int(3);
    const double t = rng.uniform01();
    Eigen::Vector3d p = v[e] + t * (v[(e + 1) % 3] - v[e]);
    p.z() = rng.uniform(-1.0, 1.0);
    return p;
  }
  Eigen::Vector3d p = in_triangle(v[0], v[1], v[2], rng);
  p.z() = rng.uniform01() < 0.5 ? 1.0 : -1.0;
  return p;
}

Eigen::Vector3d surface_point(ShapeClass cls, Rng& rng) {
  switch (cls) {
    case ShapeClass::sphere:
      return sphere_dir(rng);
    case ShapeClass::cube:
      return cube_point(rng);
    case ShapeClass::cylinder:
      return cylinder_point(rng);
    case ShapeClass::cone:
      return cone_point(rng);
    case ShapeClass::torus:
      return torus_point(rng);
    case ShapeClass::pyramid:
      return pyramid_point(rng);
    case ShapeClass::ellipsoid:
      return ellipsoid_point(rng);
    case ShapeClass::prism:
      return prism_point(rng);
  }
  throw std::invalid_argument("surface_point: unknown shape class");
}

RowMat sample_surface_with(ShapeClass cls, Rng& rng, int n) {
  if (n < 1) throw std::invalid_argument("sample_surface: need at least one point");
  RowMat cloud(n, 3);
  for (int i = 0; i < n; ++i) cloud.row(i) = surface_point(cls, rng).transpose();
  if (cls == ShapeClass::sphere && n > 1) {
    // Kill the finite-sample centroid by recentering and reprojecting onto the
    // sphere; the shift contracts roughly 3x per pass. With the centroid at
    // the true center, normalization is a pure rescale and every point keeps
    // norm 1, matching the ideal sphere.
    for (int pass = 0; pass < 64; ++pass) {
      const Eigen::RowVector3d c = cloud.colwise().mean();
      if (c.norm() < 1e-12) break;
      for (int i = 0; i < n; ++i) {
        const Eigen::RowVector3d shifted = cloud.row(i) - c;
        if (shifted.norm() > 1e-12) cloud.row(i) = shifted.normalized();
      }
    }
  }
  return cloud;
}

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& f, const char* what) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw FormatError(std::string("dataset file: truncated reading ") + what);
  return v;
}

}  // namespace

const char* shape_name(ShapeClass c) {
  const auto i = static_cast<uint32_t>(c);
  if (i >= kShapeClassCount) throw std::invalid_argument("shape_name: unknown shape class");
  return kShapeNames[i];
}

ShapeClass shape_from_name(const std::string& name) {
  for (uint32_t i = 0; i < kShapeClassCount; ++i) {
    if (name == kShapeNames[i]) return static_cast<ShapeClass>(i);
  }
  throw UsageError("unknown shape class '" + name +
                   "', expected one of sphere, cube, cylinder, cone, torus, pyramid, "
                   "ellipsoid, prism");
}

std::vector<ShapeClass> all_shape_classes() {
  std::vector<ShapeClass> all(kShapeClassCount);
  for (int i = 0; i < kShapeClassCount; ++i) all[i] = static_cast<ShapeClass>(i);
  return all;
}

void SyntheticSpec::validate() const {
  if (classes.empty()) throw UsageError("synthetic spec: no shape classes listed");
  std::set<uint32_t> seen;
  for (ShapeClass c : classes) {
    if (static_cast<uint32_t>(c) >= kShapeClassCount) {
      throw UsageError("synthetic spec: unknown shape class id");
    }
    if (!seen.insert(static_cast<uint32_t>(c)).second) {
      throw UsageError(std::string("synthetic spec: class '") + shape_name(c) + "' listed twice");
    }
  }
  if (per_class < 1) throw UsageError("synthetic spec: per-class count must be >= 1");
  if (n_points < 1) throw UsageError("synthetic spec: point count must be >= 1");
  if (image_size < 1 || image_size > 0xFFFF) {
    throw UsageError("synthetic spec: image size out of range");
  }
  if (!(jitter >= 0.0) || !std::isfinite(jitter)) {
    throw UsageError("synthetic spec: jitter must be finite and >= 0");
  }
  if (!std::isfinite(azimuth_lo) || !std::isfinite(azimuth_hi) || azimuth_hi < azimuth_lo ||
      !std::isfinite(elevation_lo) || !std::isfinite(elevation_hi) ||
      elevation_hi < elevation_lo) {
    throw UsageError("synthetic spec: bad viewpoint ranges");
  }
}

RowMat sample_surface(ShapeClass cls, uint64_t seed, int n) {
  Rng rng(seed);
  return sample_surface_with(cls, rng, n);
}

RowMat gen_shape(ShapeClass cls, uint64_t seed, int n, Scalar jitter) {
  if (!(jitter >= 0.0) || !std::isfinite(jitter)) {
    throw std::invalid_argument("gen_shape: jitter must be finite and >= 0");
  }
  Rng rng(seed);
  RowMat cloud = sample_surface_with(cls, rng, n);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) cloud.data()[i] += rng.normal(0.0, jitter);
  cloud = geom::normalize(cloud);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) cloud.data()[i] = snap32(cloud.data()[i]);
  return cloud;
}

tok::Image render(const RowMat& cloud, const Viewpoint& view, int h, int w) {
  if (!std::isfinite(view.azimuth) || !std::isfinite(view.elevation)) {
    throw UsageError("render: non-finite viewpoint angles");
  }
  const Scalar ce = std::cos(view.elevation);
  return render(cloud,
                Eigen::Vector3d(ce * std::cos(view.azimuth), ce * std::sin(view.azimuth),
                                std::sin(view.elevation)),
                h, w);
}

tok::Image render(const RowMat& cloud, const Eigen::Vector3d& view_dir, int h, int w) {
  if (h < 1 || w < 1) throw UsageError("render: image dimensions must be >= 1");
  if (cloud.cols() != 3) throw std::invalid_argument("render: cloud must be N x 3");
  if (!view_dir.allFinite() || view_dir.norm() < 1e-9) {
    throw UsageError("render: degenerate view vector");
  }
  const Eigen::Vector3d fwd = view_dir.normalized();
  Eigen::Vector3d up_hint =
      std::abs(fwd.z()) > 0.99 ? Eigen::Vector3d(0, 1, 0) : Eigen::Vector3d(0, 0, 1);
  const Eigen::Vector3d right = up_hint.cross(fwd).normalized();
  const Eigen::Vector3d up = fwd.cross(right);

  // Camera sits far out along the view direction looking back, so a larger
  // coordinate along `fwd` means nearer; it wins the pixel and shades it.
  std::vector<Scalar> best(static_cast<size_t>(h) * w, -std::numeric_limits<Scalar>::infinity());
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    const Eigen::Vector3d p = cloud.row(i).transpose();
    const Scalar x = p.dot(right), y = p.dot(up), d = p.dot(fwd);
    auto bin = [](Scalar v, int cells) {
      const int c = static_cast<int>(std::floor((v + kExtent) / (2.0 * kExtent) * cells));
      return std::clamp(c, 0, cells - 1);
    };
    const int col = bin(x, w);
    const int row = bin(-y, h);  // +y is up, row 0 is the top scanline
    Scalar& slot = best[static_cast<size_t>(row) * w + col];
    slot = std::max(slot, d);
  }

  tok::Image img;
  img.h = h;
  img.w = w;
  img.pixels = Array::Zero(static_cast<Eigen::Index>(h) * w * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Scalar d = best[static_cast<size_t>(r) * w + c];
      if (!std::isfinite(d)) continue;
      const Scalar v = std::clamp((d + kExtent) / (2.0 * kExtent), 0.0, 1.0);
      const Eigen::Index base = (static_cast<Eigen::Index>(r) * w + c) * 3;
      img.pixels[base] = img.pixels[base + 1] = img.pixels[base + 2] = v;
    }
  }
  return img;
}

std::vector<PairRecord> generate(const SyntheticSpec& spec) {
  spec.validate();
  const int64_t total = static_cast<int64_t>(spec.classes.size()) * spec.per_class;
  std::vector<PairRecord> records(static_cast<size_t>(total));
  // Classes are interleaved (record i gets class i mod C) so the class label
  // never correlates with the record id. Blocked ordering would let id-order
  // tie-breaking in downstream ranking leak label information.
  const auto n_classes = static_cast<int64_t>(spec.classes.size());
  parallel_for(total, [&](int64_t i) {
    const ShapeClass cls = spec.classes[static_cast<size_t>(i % n_classes)];
    const uint64_t within = static_cast<uint64_t>(i / n_classes);
    PairRecord& rec = records[static_cast<size_t>(i)];
    rec.id = static_cast<uint64_t>(i);
    rec.label = static_cast<uint32_t>(cls);
    const uint64_t rec_seed = seed_mix(spec.seed, rec.label, within);
    rec.cloud = gen_shape(cls, seed_mix(rec_seed, 0x73686170ULL), spec.n_points, spec.jitter);
    Rng vr(seed_mix(rec_seed, 0x76696577ULL));
    rec.view.azimuth = snap32(vr.uniform(spec.azimuth_lo, spec.azimuth_hi));
    rec.view.elevation = snap32(vr.uniform(spec.elevation_lo, spec.elevation_hi));
    rec.image = render(rec.cloud, rec.view, spec.image_size, spec.image_size);
  });
  return records;
}

void write_dataset(const std::vector<PairRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("dataset file: cannot open '" + path + "' for writing");
  f.write(kMagic, sizeof kMagic);
  put<uint16_t>(f, kVersion);
  put<uint64_t>(f, records.size());
  for (const PairRecord& rec : records) {
    if (rec.cloud.cols() != 3) throw std::invalid_argument("write_dataset: cloud must be N x 3");
    if (rec.image.pixels.size() != static_cast<Eigen::Index>(rec.image.h) * rec.image.w * 3) {
      throw std::invalid_argument("write_dataset: image dimensions disagree with pixel count");
    }
    put<uint64_t>(f, rec.id);
    put<uint32_t>(f, rec.label);
    put<uint32_t>(f, static_cast<uint32_t>(rec.cloud.rows()));
    for (Eigen::Index i = 0; i < rec.cloud.size(); ++i) {
      put<float>(f, static_cast<float>(rec.cloud.data()[i]));
    }
    put<uint16_t>(f, static_cast<uint16_t>(rec.image.h));
    put<uint16_t>(f, static_cast<uint16_t>(rec.image.w));
    for (Eigen::Index i = 0; i < rec.image.pixels.size(); ++i) {
      const Scalar v = rec.image.pixels[i];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("write_dataset: pixel outside [0,1]");
      }
      put<uint8_t>(f, static_cast<uint8_t>(std::lround(v * 255.0)));
    }
    put<float>(f, static_cast<float>(rec.view.azimuth));
    put<float>(f, static_cast<float>(rec.view.elevation));
  }
  f.flush();
  if (!f) throw FormatError("dataset file: write to '" + path + "' failed");
}

std::vector<PairRecord> read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("dataset file: cannot open '" + path + "'");
  char magic[7];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("dataset file: bad magic in '" + path + "', expected CMAHDS1");
  }
  const uint16_t version = get<uint16_t>(f, "version");
  if (version != kVersion) {
    throw FormatError("dataset file: unsupported version " + std::to_string(version));
  }
  const uint64_t count = get<uint64_t>(f, "record count");
  std::vector<PairRecord> records;
  records.reserve(count);
  for (uint64_t r = 0; r < count; ++r) {
    PairRecord rec;
    rec.id = get<uint64_t>(f, "pair id");
    rec.label = get<uint32_t>(f, "label");
    const uint32_t n = get<uint32_t>(f, "point count");
    rec.cloud.resize(n, 3);
    for (Eigen::Index i = 0; i < rec.cloud.size(); ++i) {
      rec.cloud.data()[i] = get<float>(f, "point coordinate");
    }
    rec.image.h = get<uint16_t>(f, "image height");
    rec.image.w = get<uint16_t>(f, "image width");
    rec.image.pixels.resize(static_cast<Eigen::Index>(rec.image.h) * rec.image.w * 3);
    for (Eigen::Index i = 0; i < rec.image.pixels.size(); ++i) {
      rec.image.pixels[i] = get<uint8_t>(f, "pixel") / 255.0;
    }
    rec.view.azimuth = get<float>(f, "viewpoint azimuth");
    rec.view.elevation = get<float>(f, "viewpoint elevation");
    records.push_back(std::move(rec));
  }
  f.peek();
  if (!f.eof()) throw FormatError("dataset file: trailing bytes in '" + path + "'");
  return records;
}

model::PairSample to_sample(const PairRecord& rec) { return {rec.cloud, rec.image}; }

std::vector<model::PairSample> to_samples(const std::vector<PairRecord>& records) {
  std::vector<model::PairSample> out;
  out.reserve(records.size());
  for (const PairRecord& rec : records) out.push_back(to_sample(rec));
  return out;
}

std::vector<uint32_t> labels_of(const std::vector<PairRecord>& records) {
  std::vector<uint32_t> out;
  out.reserve(records.size());
  for (const PairRecord& rec : records) out.push_back(rec.label);
  return out;
}

}  // namespace cmah::data
