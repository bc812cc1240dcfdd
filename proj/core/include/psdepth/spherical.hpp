#pragma once

#include <cstddef>
#include <vector>

#include "psdepth/camera.hpp"

namespace psd {

// Dense camera representation: per-pixel azimuth/elevation in radians.
// theta = atan(r_x / r_z) is the azimuth (longitude) and phi = acos(r_y) the
// elevation measured from the +y axis, so phi plays the polar-angle role in
// the harmonic basis and theta the longitude role.
struct AngularMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> theta;
  std::vector<double> phi;

  std::size_t size() const { return theta.size(); }
};

// Real orthonormal spherical-harmonic channels per pixel, (degree_cap+1)^2 of
// them; channel 0 is the constant 1/(2*sqrt(pi)). Stored pixel-major:
// value(y, x, c) = data[(y*width + x)*channels + c].
struct SheEmbedding {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  double at(std::size_t pixel, std::size_t channel) const {
    return data[pixel * channels + channel];
  }
};

// Output-space sample: angles plus log-depth (log-metres).
struct PseudoSphericalImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> theta;
  std::vector<double> phi;
  std::vector<double> z_log;
};

struct PointCloud {
  std::vector<double> x, y, z;

  std::size_t size() const { return x.size(); }
  void push(double px, double py, double pz) {
    x.push_back(px);
    y.push_back(py);
    z.push_back(pz);
  }
};

// The degenerate ray (0, +-1, 0) maps to theta = 0 by convention; it cannot
// arise from a finite pinhole camera.
AngularMap angles_from_rays(const RayField& rays);

// Inverse map; phi must lie strictly inside (0, pi).
RayField rays_from_angles(const AngularMap& angles);

// Per pixel: the ray for (theta, phi) scaled so its z component equals
// exp(z_log), i.e. (r_x/r_z * z, r_y/r_z * z, z).
PointCloud assemble_points(const AngularMap& angles, const std::vector<double>& z_log);

// Evaluates the real orthonormal spherical-harmonic basis at each pixel for
// l = 0..degree_cap, m = -l..l, ordered l ascending then m ascending. m > 0
// channels carry the cos(m*theta) branch and m < 0 the sin(|m|*theta) branch.
SheEmbedding she_encode(const AngularMap& angles, int degree_cap = 8);

// Single-direction evaluation used by she_encode and the quadrature tests.
// `out` must hold (degree_cap+1)^2 values.
void she_evaluate(double theta, double phi, int degree_cap, double* out);

}  // namespace psd
