#include "psdepth/camera.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "psdepth/error.hpp"

namespace psd {

PinholeCamera PinholeCamera::make(double fx, double fy, double cx, double cy,
                                  std::size_t width, std::size_t height) {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw NumericError("camera: focal lengths must be positive, got fx=" + std::to_string(fx) +
                       " fy=" + std::to_string(fy));
  }
  if (width < 1 || height < 1) {
    throw NumericError("camera: image extents must be >= 1");
  }
  if (!std::isfinite(cx) || !std::isfinite(cy)) {
    throw NumericError("camera: principal point must be finite");
  }
  return PinholeCamera{fx, fy, cx, cy, width, height};
}

PinholeCamera PinholeCamera::scaled_by(double factor) const {
  PinholeCamera out = *this;
  out.fx = fx * factor;
  out.fy = fy * factor;
  out.cx = cx * factor;
  out.cy = cy * factor;
  out.width = static_cast<std::size_t>(std::lround(static_cast<double>(width) * factor));
  out.height = static_cast<std::size_t>(std::lround(static_cast<double>(height) * factor));
  return out;
}

PinholeCamera intrinsics_from_residuals(const ResidualIntrinsics& res, std::size_t width,
                                        std::size_t height) {
  if (!(res.dfx > 0.0) || !(res.dfy > 0.0) || !(res.dcx > 0.0) || !(res.dcy > 0.0)) {
    throw NumericError("intrinsics_from_residuals: residuals must be strictly positive");
  }
  const double hw = static_cast<double>(width) / 2.0;
  const double hh = static_cast<double>(height) / 2.0;
  return PinholeCamera::make(res.dfx * hw, res.dfy * hh, res.dcx * hw, res.dcy * hh, width,
                             height);
}

ResidualIntrinsics residuals_from_intrinsics(const PinholeCamera& cam) {
  const double hw = static_cast<double>(cam.width) / 2.0;
  const double hh = static_cast<double>(cam.height) / 2.0;
  return ResidualIntrinsics{cam.fx / hw, cam.fy / hh, cam.cx / hw, cam.cy / hh};
}

RayField backproject(const PinholeCamera& cam) {
  RayField rays;
  rays.width = cam.width;
  rays.height = cam.height;
  const std::size_t n = cam.width * cam.height;
  rays.x.resize(n);
  rays.y.resize(n);
  rays.z.resize(n);
  for (std::size_t v = 0; v < cam.height; ++v) {
    for (std::size_t u = 0; u < cam.width; ++u) {
      const double dx = (static_cast<double>(u) + 0.5 - cam.cx) / cam.fx;
      const double dy = (static_cast<double>(v) + 0.5 - cam.cy) / cam.fy;
      const double inv_norm = 1.0 / std::sqrt(dx * dx + dy * dy + 1.0);
      const std::size_t i = v * cam.width + u;
      rays.x[i] = dx * inv_norm;
      rays.y[i] = dy * inv_norm;
      rays.z[i] = inv_norm;
    }
  }
  return rays;
}

PinholeCamera perturb_intrinsics(const PinholeCamera& cam, double eps, std::uint64_t seed) {
  if (eps < 0.0) throw NumericError("perturb_intrinsics: eps must be >= 0");
  if (eps >= 1.0) {
    throw NumericError("perturb_intrinsics: eps >= 1 would permit non-positive focals");
  }
  Rng rng(seed);
  const double sfx = rng.uniform(1.0 - eps, 1.0 + eps);
  const double sfy = rng.uniform(1.0 - eps, 1.0 + eps);
  const double scx = rng.uniform(1.0 - eps, 1.0 + eps);
  const double scy = rng.uniform(1.0 - eps, 1.0 + eps);
  return PinholeCamera::make(cam.fx * sfx, cam.fy * sfy, cam.cx * scx, cam.cy * scy, cam.width,
                             cam.height);
}

namespace {

double require_finite_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw DataError(std::string("camera file: missing key \"") + key + "\"");
  if (!j[key].is_number())
    throw DataError(std::string("camera file: key \"") + key + "\" is not a number");
  const double v = j[key].get<double>();
  if (!std::isfinite(v))
    throw DataError(std::string("camera file: key \"") + key + "\" is not finite");
  return v;
}

std::size_t require_extent(const nlohmann::json& j, const char* key) {
  const double v = require_finite_number(j, key);
  if (v < 1.0 || v != std::floor(v))
    throw DataError(std::string("camera file: key \"") + key + "\" must be a positive integer");
  return static_cast<std::size_t>(v);
}

}  // namespace

PinholeCamera parse_camera_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("camera file: parse error: ") + e.what());
  }
  if (!j.is_object()) throw DataError("camera file: top-level value must be an object");
  const double fx = require_finite_number(j, "fx");
  const double fy = require_finite_number(j, "fy");
  const double cx = require_finite_number(j, "cx");
  const double cy = require_finite_number(j, "cy");
  const std::size_t width = require_extent(j, "width");
  const std::size_t height = require_extent(j, "height");
  if (!(fx > 0.0) || !(fy > 0.0)) throw DataError("camera file: focal lengths must be positive");
  return PinholeCamera::make(fx, fy, cx, cy, width, height);
}

std::string camera_to_json(const PinholeCamera& cam) {
  nlohmann::ordered_json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  return j.dump(2) + "\n";
}

PinholeCamera read_camera(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("camera file: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_camera_json(ss.str());
}

void write_camera(const std::string& path, const PinholeCamera& cam) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("camera file: cannot open '" + path + "' for writing");
  os << camera_to_json(cam);
  if (!os) throw DataError("camera file: write failed for '" + path + "'");
}

}  // namespace psd
