#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psdepth/rng.hpp"

namespace psd {

// Pinhole intrinsics in pixels. Pixel centers sit at half-integer
// coordinates, so the ray field is symmetric about the principal point on
// even-sized images.
struct PinholeCamera {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t width = 0;
  std::size_t height = 0;

  // Throws on non-positive focals or empty extents. A principal point
  // outside the image box is legal but suspicious; it only trips the
  // warning flag below.
  static PinholeCamera make(double fx, double fy, double cx, double cy,
                            std::size_t width, std::size_t height);

  bool principal_point_inside() const {
    return cx >= 0.0 && cx <= static_cast<double>(width) && cy >= 0.0 &&
           cy <= static_cast<double>(height);
  }

  // Equivalent camera for a grid whose cells cover `stride` x `stride`
  // source pixels (e.g. a stride-16 feature map).
  PinholeCamera scaled_by(double factor) const;
};

// Dimensionless multiplicative residuals applied to the size-proportional
// pinhole initialization: fx = dfx*W/2, fy = dfy*H/2, cx = dcx*W/2,
// cy = dcy*H/2.
struct ResidualIntrinsics {
  double dfx = 1.0;
  double dfy = 1.0;
  double dcx = 1.0;
  double dcy = 1.0;
};

PinholeCamera intrinsics_from_residuals(const ResidualIntrinsics& res, std::size_t width,
                                        std::size_t height);
ResidualIntrinsics residuals_from_intrinsics(const PinholeCamera& cam);

// Per-pixel unit viewing directions, stored as separate planes.
struct RayField {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> x, y, z;

  std::size_t size() const { return x.size(); }
};

// Rays through pixel centers: ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1), normalized.
RayField backproject(const PinholeCamera& cam);

// Multiplies each of fx, fy, cx, cy by an independent uniform draw from
// [1-eps, 1+eps]. eps >= 1 would permit non-positive focals and is rejected.
PinholeCamera perturb_intrinsics(const PinholeCamera& cam, double eps, std::uint64_t seed);

// Camera file format: JSON object with numeric keys fx, fy, cx, cy, width,
// height. Missing keys and non-finite values are rejected.
PinholeCamera parse_camera_json(const std::string& text);
std::string camera_to_json(const PinholeCamera& cam);
PinholeCamera read_camera(const std::string& path);
void write_camera(const std::string& path, const PinholeCamera& cam);

}  // namespace psd
