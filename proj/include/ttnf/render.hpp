#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ttnf/error.hpp"
#include "ttnf/optim.hpp"
#include "ttnf/qtt_field.hpp"
#include "ttnf/sampling.hpp"

namespace ttnf {

inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) {
  const double n = std::sqrt(dot3(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

// Pinhole camera, OpenCV axes (x right, y down, z forward). `pose` is the
// camera-to-world transform, row-major 4x4.
struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  std::size_t width = 1, height = 1;
  std::array<double, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  Vec3 origin() const { return {pose[3], pose[7], pose[11]}; }
  Vec3 rotate(const Vec3& d) const {
    return {pose[0] * d[0] + pose[1] * d[1] + pose[2] * d[2], pose[4] * d[0] + pose[5] * d[1] + pose[6] * d[2],
            pose[8] * d[0] + pose[9] * d[1] + pose[10] * d[2]};
  }

  void validate() const {
    detail::require<ConfigError>(fx > 0 && fy > 0, "camera: focal length must be positive");
    detail::require<ConfigError>(width >= 1 && height >= 1, "camera: empty image");
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += pose[k * 4 + i] * pose[k * 4 + j];
        detail::require<ConfigError>(std::abs(s - (i == j ? 1.0 : 0.0)) <= 1e-9, "camera: rotation is not orthonormal");
      }
    double det = pose[0] * (pose[5] * pose[10] - pose[6] * pose[9]) - pose[1] * (pose[4] * pose[10] - pose[6] * pose[8]) +
                 pose[2] * (pose[4] * pose[9] - pose[5] * pose[8]);
    detail::require<ConfigError>(det > 0, "camera: pose is not a proper rotation");
  }
};

// Camera at `eye` looking at `target`, with `up` as the world up direction.
inline Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, std::size_t w,
                      std::size_t h) {
  const Vec3 f = normalized({target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]});
  const Vec3 r = normalized(cross3(f, up));
  const Vec3 d = cross3(f, r);
  Camera c;
  c.fx = c.fy = focal;
  c.cx = static_cast<double>(w) / 2;
  c.cy = static_cast<double>(h) / 2;
  c.width = w;
  c.height = h;
  c.pose = {r[0], d[0], f[0], eye[0], r[1], d[1], f[1], eye[1], r[2], d[2], f[2], eye[2], 0, 0, 0, 1};
  return c;
}

struct Ray {
  Vec3 origin{0, 0, 0};
  Vec3 dir{0, 0, 1};
  double t_near = 0;
  double t_far = 0;
};

// One ray per pixel through the pixel centre, row-major.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  std::vector<Ray> rays;
  rays.reserve(cam.width * cam.height);
  const Vec3 o = cam.origin();
  for (std::size_t v = 0; v < cam.height; ++v)
    for (std::size_t u = 0; u < cam.width; ++u) {
      const Vec3 dc{(static_cast<double>(u) + 0.5 - cam.cx) / cam.fx, (static_cast<double>(v) + 0.5 - cam.cy) / cam.fy, 1.0};
      rays.push_back({o, normalized(cam.rotate(dc)), 0, 0});
    }
  return rays;
}

struct BoxHit {
  bool hit = false;
  double t_near = 0;
  double t_far = 0;
};

// Slab test, interval clipped to t >= 0.
inline BoxHit intersect_box(const Ray& ray, const Box& box) {
  double t0 = 0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.dir[a];
    if (d == 0) {
      if (o < box.lo[a] || o > box.hi[a]) return {};
      continue;
    }
    double ta = (box.lo[a] - o) / d, tb = (box.hi[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 <= t1)) return {};
  return {true, t0, t1};
}

// Real spherical harmonics up to degree 2 (no Condon-Shortley phase), in the
// order Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.
inline std::array<double, 9> sh_basis(const Vec3& d) {
  const double x = d[0], y = d[1], z = d[2];
  return {0.28209479177387814,
          0.4886025119029199 * y,
          0.4886025119029199 * z,
          0.4886025119029199 * x,
          1.0925484305920792 * x * y,
          1.0925484305920792 * y * z,
          0.31539156525252005 * (3 * z * z - 1),
          1.0925484305920792 * x * z,
          0.5462742152960396 * (x * x - y * y)};
}

// Per colour channel, the dot product of 9 coefficients (channel-major) with
// the basis at `dir`. Returns values before the sigmoid.
template <typename T>
std::array<double, 3> sh_shade(std::span<const T> coeffs, const Vec3& dir) {
  detail::require<ShapeError>(coeffs.size() == 27, "sh_shade: expected 27 coefficients");
  const auto y = sh_basis(dir);
  std::array<double, 3> out{};
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < 9; ++j) out[c] += static_cast<double>(coeffs[c * 9 + j]) * y[j];
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

enum class DensityActivation { Softplus, Relu };

struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> data;  // row-major, 3 channels

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0) : height(h), width(w), data(h * w * 3, fill) {}
  double* pixel(std::size_t i) { return data.data() + 3 * i; }
  const double* pixel(std::size_t i) const { return data.data() + 3 * i; }
};

inline double mse(const Image& a, const Image& b) {
  detail::require<ShapeError>(a.height == b.height && a.width == b.width, "image extent mismatch");
  long double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const long double d = static_cast<long double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return static_cast<double>(acc / static_cast<long double>(a.data.size()));
}

// Peak-1 PSNR in dB; +infinity for identical images.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

inline double psnr_from_mse(double m) {
  return m == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / m);
}

inline constexpr double kPsnrCap = 99.0;
inline double capped_psnr(double p) { return std::min(p, kPsnrCap); }

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  if (!f || magic != "P6" || maxv != 255 || w == 0 || h == 0) throw IoError("unsupported PPM file " + path.string());
  f.get();
  std::vector<unsigned char> buf(w * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError("truncated PPM file " + path.string());
  Image img(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

// 8-bit quantization as written by write_ppm.
inline Image quantize8(const Image& img) {
  Image out = img;
  for (double& x : out.data) x = std::lround(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

struct RenderConfig {
  std::size_t samples_per_ray = 512;
  std::size_t rays_per_batch = 4096;
  DensityActivation activation = DensityActivation::Softplus;
  Vec3 background{1, 1, 1};
  std::size_t steps = 2000;
  LrSchedule sched{2000, 0.05, 3e-3, 3e-5};
  double lr_mult_density = 1.0;
  double lr_mult_sh = 1.0;
  SamplerKind sampler = SamplerKind::V2;
  bool jitter = false;
  std::size_t log_every = 100;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require<ConfigError>(samples_per_ray >= 1, "render: samples_per_ray must be >= 1");
    detail::require<ConfigError>(rays_per_batch >= 1, "render: rays_per_batch must be >= 1");
    detail::require<ConfigError>(lr_mult_density >= 0 && lr_mult_sh >= 0, "render: lr multipliers must be >= 0");
    detail::require<ConfigError>(log_every >= 1, "render: log_every must be >= 1");
    if (steps > 0) detail::require<ConfigError>(sched.total_steps == steps, "render: schedule length must equal steps");
  }
};

// Per-ray compositing of N samples with densities sigma_i (already
// activated), segment lengths delta_i and colours c_i.
struct Composite {
  std::array<double, 3> rgb{};
  std::vector<double> weights;
  double transmittance = 1;  // residual T_{N+1}
};

inline Composite composite(std::span<const double> sigma, std::span<const double> delta,
                           std::span<const std::array<double, 3>> color, const Vec3& bg) {
  const std::size_t n = sigma.size();
  Composite out;
  out.weights.resize(n);
  double t = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double tau = sigma[i] * delta[i];
    const double next = t * std::exp(-tau);
    const double w = t - next;  // T_i (1 - exp(-tau_i))
    out.weights[i] = w;
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * color[i][c];
    t = next;
  }
  out.transmittance = t;
  for (int c = 0; c < 3; ++c) out.rgb[c] += t * bg[c];
  return out;
}

// Gradients of <g, rgb> with respect to sigma_i and c_i:
// d rgb / d tau_k = T_{k+1} c_k - sum_{i>k} w_i c_i - T_{N+1} bg.
inline void composite_backward(std::span<const double> sigma, std::span<const double> delta,
                               std::span<const std::array<double, 3>> color, const Vec3& bg, const Composite& fwd,
                               const std::array<double, 3>& g, std::span<double> d_sigma,
                               std::span<std::array<double, 3>> d_color) {
  const std::size_t n = sigma.size();
  double suffix = fwd.transmittance * (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
  double t_next = fwd.transmittance;
  for (std::size_t k = n; k-- > 0;) {
    const double gc = g[0] * color[k][0] + g[1] * color[k][1] + g[2] * color[k][2];
    // T_{k+1}: transmittance after sample k, recovered from the suffix.
    d_sigma[k] = delta[k] * (t_next * gc - suffix);
    for (int c = 0; c < 3; ++c) d_color[k][c] = fwd.weights[k] * g[c];
    suffix += fwd.weights[k] * gc;
    t_next += fwd.weights[k];
  }
}

// Field sources: payload rows at world points.
template <typename T>
struct QttSource {
  const QttGrid<T>* grid;
  SamplerKind kind = SamplerKind::V2;

  const QttGridConfig& config() const { return grid->config; }
  Rows<T> fetch(std::span<const Vec3> pts, TrilinearContext<T>* ctx) const {
    return trilinear_sample(*grid, pts, kind, ctx);
  }
};

template <typename T>
struct DenseSource {
  const QttGridConfig* cfg;
  const DenseGrid<T>* grid;

  const QttGridConfig& config() const { return *cfg; }
  Rows<T> fetch(std::span<const Vec3> pts, TrilinearContext<T>*) const {
    Rows<T> out(pts.size(), grid->channels);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto v = trilinear_dense(*cfg, *grid, pts[i]);
      std::copy(v.begin(), v.end(), out.row(i).begin());
    }
    return out;
  }
};

// Backward context of render_rays.
template <typename T>
struct RenderTape {
  std::vector<std::size_t> first_sample;  // per ray, offset into the sample arrays
  std::vector<std::size_t> count;         // samples per ray (0 for misses)
  std::vector<double> delta, sigma, raw_density;
  std::vector<std::array<double, 3>> color, shade;
  std::vector<Vec3> dirs;
  std::vector<Composite> comps;
  TrilinearContext<T> trilinear;
};

struct RenderOutput {
  std::vector<std::array<double, 3>> rgb;
  std::vector<double> weight_sum;     // sum of compositing weights per ray
  std::vector<double> transmittance;  // residual transmittance per ray
};

namespace detail {

inline double activate(DensityActivation a, double raw) { return a == DensityActivation::Softplus ? softplus(raw) : std::max(raw, 0.0); }
inline double activate_grad(DensityActivation a, double raw) { return a == DensityActivation::Softplus ? sigmoid(raw) : (raw > 0 ? 1.0 : 0.0); }

}  // namespace detail

// Marches every ray through the field: N points at segment midpoints of
// [t_near, t_far] (box intersection computed here), payloads fetched in one
// trilinear call, density from channel 0 and colour from SH channels 1..27.
// Rays that miss the box return the background.
template <typename T, typename Source>
RenderOutput render_rays(const Source& src, std::span<const Ray> rays, const RenderConfig& cfg,
                         RenderTape<T>* tape = nullptr, std::mt19937_64* jitter_rng = nullptr) {
  const QttGridConfig& gc = src.config();
  detail::require<ShapeError>(gc.channels == 28, "render: payload must hold 1 density + 27 SH channels");
  const std::size_t n = cfg.samples_per_ray;
  RenderTape<T> local;
  RenderTape<T>& tp = tape ? *tape : local;
  tp = RenderTape<T>{};
  tp.first_sample.resize(rays.size());
  tp.count.resize(rays.size());
  tp.dirs.resize(rays.size());

  std::vector<Vec3> pts;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    tp.first_sample[r] = pts.size();
    tp.dirs[r] = rays[r].dir;
    const BoxHit hit = intersect_box(rays[r], gc.box);
    if (!hit.hit) continue;
    const double step = (hit.t_far - hit.t_near) / static_cast<double>(n);
    tp.count[r] = n;
    for (std::size_t i = 0; i < n; ++i) {
      const double off = cfg.jitter && jitter_rng ? uni(*jitter_rng) : 0.5;
      const double t = hit.t_near + (static_cast<double>(i) + off) * step;
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = std::clamp(rays[r].origin[a] + t * rays[r].dir[a], gc.box.lo[a], gc.box.hi[a]);
      pts.push_back(p);
      tp.delta.push_back(step);
    }
  }

  RenderOutput out;
  out.rgb.resize(rays.size());
  out.weight_sum.assign(rays.size(), 0.0);
  out.transmittance.assign(rays.size(), 1.0);
  tp.comps.resize(rays.size());
  if (pts.empty()) {
    for (auto& c : out.rgb) c = {cfg.background[0], cfg.background[1], cfg.background[2]};
    return out;
  }

  const Rows<T> payload = src.fetch(pts, tape ? &tp.trilinear : nullptr);
  const std::size_t m = pts.size();
  tp.sigma.resize(m);
  tp.raw_density.resize(m);
  tp.color.resize(m);
  tp.shade.resize(m);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const std::size_t s0 = tp.first_sample[r], cnt = tp.count[r];
    for (std::size_t i = s0; i < s0 + cnt; ++i) {
      auto row = payload.row(i);
      tp.raw_density[i] = static_cast<double>(row[0]);
      tp.sigma[i] = detail::activate(cfg.activation, tp.raw_density[i]);
      tp.shade[i] = sh_shade<T>(row.subspan(1, 27), tp.dirs[r]);
      for (int c = 0; c < 3; ++c) tp.color[i][c] = sigmoid(tp.shade[i][c]);
    }
    if (cnt == 0) {
      out.rgb[r] = {cfg.background[0], cfg.background[1], cfg.background[2]};
      continue;
    }
    tp.comps[r] = composite(std::span<const double>(tp.sigma).subspan(s0, cnt),
                            std::span<const double>(tp.delta).subspan(s0, cnt),
                            std::span<const std::array<double, 3>>(tp.color).subspan(s0, cnt), cfg.background);
    out.rgb[r] = tp.comps[r].rgb;
    double ws = 0;
    for (double w : tp.comps[r].weights) ws += w;
    out.weight_sum[r] = ws;
    out.transmittance[r] = tp.comps[r].transmittance;
  }
  return out;
}

// Gradient of sum_r <upstream_r, rgb_r> with respect to the payload rows of
// every sample point (m x 28).
template <typename T>
Rows<T> render_backward_payload(const RenderTape<T>& tp, std::span<const std::array<double, 3>> upstream,
                                const RenderConfig& cfg) {
  const std::size_t m = tp.sigma.size();
  Rows<T> d_payload(m, 28);
  std::vector<double> d_sigma;
  std::vector<std::array<double, 3>> d_color;
  for (std::size_t r = 0; r < tp.count.size(); ++r) {
    const std::size_t s0 = tp.first_sample[r], cnt = tp.count[r];
    if (cnt == 0) continue;
    d_sigma.assign(cnt, 0.0);
    d_color.assign(cnt, {0, 0, 0});
    composite_backward(std::span<const double>(tp.sigma).subspan(s0, cnt),
                       std::span<const double>(tp.delta).subspan(s0, cnt),
                       std::span<const std::array<double, 3>>(tp.color).subspan(s0, cnt), cfg.background, tp.comps[r],
                       upstream[r], d_sigma, d_color);
    const auto y = sh_basis(tp.dirs[r]);
    for (std::size_t i = 0; i < cnt; ++i) {
      auto row = d_payload.row(s0 + i);
      row[0] = static_cast<T>(d_sigma[i] * detail::activate_grad(cfg.activation, tp.raw_density[s0 + i]));
      for (int c = 0; c < 3; ++c) {
        const double col = tp.color[s0 + i][c];
        const double ds = d_color[i][c] * col * (1 - col);
        for (int j = 0; j < 9; ++j) row[1 + c * 9 + j] = static_cast<T>(ds * y[j]);
      }
    }
  }
  return d_payload;
}

template <typename T>
void render_backward_into(const RenderTape<T>& tp, std::span<const std::array<double, 3>> upstream,
                          const RenderConfig& cfg, GradBuffers<T>& grads) {
  if (tp.sigma.empty()) return;
  const Rows<T> d_payload = render_backward_payload(tp, upstream, cfg);
  trilinear_backward_into(tp.trilinear, d_payload, grads);
}

// Renders a full camera view, in chunks of rays_per_batch rays.
template <typename T, typename Source>
Image render_image(const Source& src, const Camera& cam, const RenderConfig& cfg,
                   std::vector<double>* conservation_error = nullptr) {
  const std::vector<Ray> rays = generate_rays(cam);
  Image img(cam.height, cam.width);
  const std::size_t chunk = std::max<std::size_t>(cfg.rays_per_batch, 1);
  for (std::size_t s = 0; s < rays.size(); s += chunk) {
    const std::size_t e = std::min(rays.size(), s + chunk);
    const RenderOutput o = render_rays<T>(src, std::span<const Ray>(rays).subspan(s, e - s), cfg);
    for (std::size_t i = s; i < e; ++i) {
      std::copy(o.rgb[i - s].begin(), o.rgb[i - s].end(), img.pixel(i));
      if (conservation_error)
        conservation_error->push_back(std::abs(o.weight_sum[i - s] + o.transmittance[i - s] - 1.0));
    }
  }
  return img;
}

}  // namespace ttnf
