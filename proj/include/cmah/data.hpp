#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmah/common.hpp"
#include "cmah/model.hpp"
#include "cmah/tokenizer.hpp"

namespace cmah::data {

enum class ShapeClass : uint32_t {
  sphere = 0,
  cube,
  cylinder,
  cone,
  torus,
  pyramid,
  ellipsoid,
  prism,
};
constexpr int kShapeClassCount = 8;

const char* shape_name(ShapeClass c);
ShapeClass shape_from_name(const std::string& name);  // UsageError on unknown names
std::vector<ShapeClass> all_shape_classes();

// Camera direction on the unit sphere; azimuth in the xy plane, elevation
// toward +z, both radians.
struct Viewpoint {
  Scalar azimuth = 0.0;
  Scalar elevation = 0.0;
};

struct SyntheticSpec {
  std::vector<ShapeClass> classes = all_shape_classes();
  int per_class = 8;
  int n_points = 1024;
  int image_size = 32;  // square H = W
  uint64_t seed = 0;
  Scalar jitter = 0.01;           // Gaussian sigma added before normalization
  Scalar azimuth_lo = 0.0;        // viewpoint draws are uniform over these
  Scalar azimuth_hi = 6.283185307179586;
  Scalar elevation_lo = -1.0;
  Scalar elevation_hi = 1.0;

  void validate() const;  // UsageError on empty/duplicate classes or bad counts
};

// One cloud/image pair. Coordinates and viewpoint angles sit on the f32 grid
// the container stores, so writing and reading back is exact on them; pixels
// quantize to u8 on write.
struct PairRecord {
  uint64_t id = 0;
  uint32_t label = 0;
  RowMat cloud;      // N x 3, normalized
  tok::Image image;  // rendered from `view`, values in [0,1]
  Viewpoint view;
};

// N points on the ideal surface at the shape's natural scale, before jitter
// and normalization (cube faces at ±1, cylinder radius 1, ...).
RowMat sample_surface(ShapeClass cls, uint64_t seed, int n);

// N points on the ideal surface, Gaussian jitter added, then centered and
// scaled onto the unit sphere. Same arguments give the identical cloud.
RowMat gen_shape(ShapeClass cls, uint64_t seed, int n, Scalar jitter);

// Orthographic depth splat along the view direction: each point lands in one
// pixel bin, the nearest point per pixel wins, and its depth shades the pixel
// (near bright, far dark, empty exactly 0), replicated to 3 channels.
tok::Image render(const RowMat& cloud, const Viewpoint& view, int h, int w);
tok::Image render(const RowMat& cloud, const Eigen::Vector3d& view_dir, int h, int w);

// Full corpus for a spec: per_class records of each listed class in listed
// order, ids sequential, labels the class's fixed enum value. Per-record work
// runs under parallel_for with seeds derived from (spec.seed, label, index),
// so the thread budget cannot change the output.
std::vector<PairRecord> generate(const SyntheticSpec& spec);

// Container IO. Lossless round-trip except the documented u8 pixel
// quantization on first write; a rewrite of a read file is byte-identical.
void write_dataset(const std::vector<PairRecord>& records, const std::string& path);
std::vector<PairRecord> read_dataset(const std::string& path);

// Model-facing views of a record set.
model::PairSample to_sample(const PairRecord& rec);
std::vector<model::PairSample> to_samples(const std::vector<PairRecord>& records);
std::vector<uint32_t> labels_of(const std::vector<PairRecord>& records);

// Adapter seam for real datasets laid out as one directory per pair
// (ShapeNetRender / ModelNet style). Only the interface lives here; this repo
// ships no loader for those trees, synthetic generation covers every test.
class DatasetSource {
 public:
  virtual ~DatasetSource() = default;
  virtual int64_t count() const = 0;
  virtual PairRecord record(int64_t i) const = 0;
};

class MemoryDataset : public DatasetSource {
 public:
  explicit MemoryDataset(std::vector<PairRecord> records) : records_(std::move(records)) {}
  static MemoryDataset open(const std::string& path) { return MemoryDataset(read_dataset(path)); }
  int64_t count() const override { return static_cast<int64_t>(records_.size()); }
  PairRecord record(int64_t i) const override { return records_[static_cast<size_t>(i)]; }
  const std::vector<PairRecord>& records() const { return records_; }

 private:
  std::vector<PairRecord> records_;
};

}  // namespace cmah::data
