#include "psdepth/spherical.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "psdepth/error.hpp"

namespace psd {

AngularMap angles_from_rays(const RayField& rays) {
  AngularMap out;
  out.width = rays.width;
  out.height = rays.height;
  const std::size_t n = rays.size();
  out.theta.resize(n);
  out.phi.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // atan2(0, 0) = 0, which realizes the theta := 0 convention for the
    // degenerate ray (0, +-1, 0).
    out.theta[i] = std::atan2(rays.x[i], rays.z[i]);
    out.phi[i] = std::acos(std::clamp(rays.y[i], -1.0, 1.0));
  }
  return out;
}

RayField rays_from_angles(const AngularMap& angles) {
  RayField out;
  out.width = angles.width;
  out.height = angles.height;
  const std::size_t n = angles.size();
  out.x.resize(n);
  out.y.resize(n);
  out.z.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = angles.phi[i];
    if (!(phi > 0.0 && phi < M_PI)) {
      throw NumericError("rays_from_angles: phi=" + std::to_string(phi) +
                         " outside (0, pi); theta is undefined for rays parallel to the y-axis");
    }
    const double sp = std::sin(phi);
    out.y[i] = std::cos(phi);
    out.x[i] = sp * std::sin(angles.theta[i]);
    out.z[i] = sp * std::cos(angles.theta[i]);
  }
  return out;
}

PointCloud assemble_points(const AngularMap& angles, const std::vector<double>& z_log) {
  if (z_log.size() != angles.size()) {
    throw ShapeError("assemble_points: angular map has " + std::to_string(angles.size()) +
                     " pixels but z_log has " + std::to_string(z_log.size()));
  }
  PointCloud cloud;
  cloud.x.reserve(z_log.size());
  cloud.y.reserve(z_log.size());
  cloud.z.reserve(z_log.size());
  for (std::size_t i = 0; i < z_log.size(); ++i) {
    if (!std::isfinite(z_log[i])) {
      throw NumericError("assemble_points: non-finite z_log at pixel " + std::to_string(i));
    }
    const double theta = angles.theta[i];
    const double phi = angles.phi[i];
    const double sp = std::sin(phi);
    const double rz = sp * std::cos(theta);
    if (!(rz > 0.0)) {
      throw NumericError("assemble_points: ray at pixel " + std::to_string(i) +
                         " is not forward-facing");
    }
    const double z = std::exp(z_log[i]);
    cloud.push(std::tan(theta) * z, std::cos(phi) / rz * z, z);
  }
  return cloud;
}

void she_evaluate(double theta, double phi, int degree_cap, double* out) {
  const int L = degree_cap;
  const double x = std::cos(phi);       // polar argument
  const double s = std::sin(phi);       // sqrt(1 - x^2), >= 0 for phi in [0, pi]
  const double inv_sqrt4pi = 0.5 / std::sqrt(M_PI);

  // Associated Legendre values P_l^m(x) by the standard upward recurrence in
  // l for each order m:
  //   P_m^m     = (2m-1)!! (1-x^2)^{m/2}
  //   P_{m+1}^m = x (2m+1) P_m^m
  //   P_l^m     = ((2l-1) x P_{l-1}^m - (l+m-1) P_{l-2}^m) / (l - m)
  // (Condon-Shortley phase omitted; orthonormality is unaffected.)
  static thread_local std::vector<double> plm;
  plm.assign(static_cast<std::size_t>((L + 1) * (L + 1)), 0.0);
  auto P = [&](int l, int m) -> double& { return plm[static_cast<std::size_t>(l * (L + 1) + m)]; };

  double pmm = 1.0;
  for (int m = 0; m <= L; ++m) {
    if (m > 0) pmm *= static_cast<double>(2 * m - 1) * s;
    P(m, m) = pmm;
    if (m + 1 <= L) P(m + 1, m) = x * static_cast<double>(2 * m + 1) * pmm;
    for (int l = m + 2; l <= L; ++l) {
      P(l, m) = (static_cast<double>(2 * l - 1) * x * P(l - 1, m) -
                 static_cast<double>(l + m - 1) * P(l - 2, m)) /
                static_cast<double>(l - m);
    }
  }

  for (int l = 0; l <= L; ++l) {
    // N_lm = sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!), built incrementally in m.
    double ratio = 1.0;  // (l-m)!/(l+m)!
    const double base = std::sqrt(static_cast<double>(2 * l + 1)) * inv_sqrt4pi;
    const int row = l * l + l;  // channel of (l, m=0)
    out[row] = base * P(l, 0);
    for (int m = 1; m <= l; ++m) {
      ratio /= static_cast<double>((l - m + 1) * (l + m));
      const double norm = M_SQRT2 * base * std::sqrt(ratio) * P(l, m);
      out[row + m] = norm * std::cos(m * theta);
      out[row - m] = norm * std::sin(m * theta);
    }
  }
}

SheEmbedding she_encode(const AngularMap& angles, int degree_cap) {
  if (degree_cap < 0) {
    throw NumericError("she_encode: degree_cap must be >= 0, got " + std::to_string(degree_cap));
  }
  SheEmbedding emb;
  emb.width = angles.width;
  emb.height = angles.height;
  emb.channels = static_cast<std::size_t>((degree_cap + 1) * (degree_cap + 1));
  emb.data.resize(angles.size() * emb.channels);
  for (std::size_t i = 0; i < angles.size(); ++i) {
    she_evaluate(angles.theta[i], angles.phi[i], degree_cap, &emb.data[i * emb.channels]);
  }
  return emb;
}

}  // namespace psd
