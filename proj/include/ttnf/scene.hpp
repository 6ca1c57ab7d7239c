#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ttnf/error.hpp"
#include "ttnf/optim.hpp"
#include "ttnf/qtt_field.hpp"
#include "ttnf/render.hpp"
#include "ttnf/rng.hpp"

namespace ttnf {

enum class SceneKind { Sphere, TwoBoxes, Empty };

inline const char* to_string(SceneKind k) {
  switch (k) {
    case SceneKind::Sphere: return "sphere";
    case SceneKind::TwoBoxes: return "two_boxes";
    case SceneKind::Empty: return "empty";
  }
  return "?";
}

inline SceneKind parse_scene_kind(const std::string& s) {
  if (s == "sphere") return SceneKind::Sphere;
  if (s == "two_boxes") return SceneKind::TwoBoxes;
  if (s == "empty") return SceneKind::Empty;
  throw ConfigError("unknown scene kind '" + s + "' (expected sphere, two_boxes or empty)");
}

struct SceneConfig {
  SceneKind kind = SceneKind::Sphere;
  std::size_t levels = 5;  // dense oracle side 2^levels
  std::size_t cameras = 12;
  std::size_t image_size = 32;
  double fov_deg = 60;
  double distance = 3.2;
  double elevation_deg = 20;
  std::size_t test_every = 4;  // every n-th camera is held out

  void validate() const {
    detail::require<ConfigError>(levels >= 1 && levels <= 9, "scene: levels must be in [1, 9]");
    detail::require<ConfigError>(cameras >= 1, "scene: need at least one camera");
    detail::require<ConfigError>(image_size >= 1, "scene: image_size must be >= 1");
    detail::require<ConfigError>(fov_deg > 0 && fov_deg < 180, "scene: fov_deg must be in (0, 180)");
    detail::require<ConfigError>(distance > std::sqrt(3.0), "scene: cameras must be outside the unit box");
    detail::require<ConfigError>(test_every >= 2, "scene: test_every must be >= 2");
  }
};

struct Scene {
  QttGridConfig grid;  // box and payload layout of the oracle
  DenseGrid<double> dense;
  std::vector<Camera> cameras;
  std::vector<Image> images;
  std::vector<std::size_t> train, test;
};

namespace detail {

inline double smooth_step(double signed_dist, double width) { return 1.0 / (1.0 + std::exp(signed_dist / width)); }

inline double logit(double a) { return std::log(a / (1 - a)); }

// Raw density and SH coefficients for one albedo with a small l=1 tint.
inline void fill_payload(std::span<double> out, double occupancy, const std::array<double, 3>& albedo) {
  constexpr double y00 = 0.28209479177387814;
  out[0] = -8.0 + 18.0 * occupancy;
  for (int c = 0; c < 3; ++c) {
    auto sh = out.subspan(1 + 9 * c, 9);
    std::fill(sh.begin(), sh.end(), 0.0);
    sh[0] = logit(albedo[c]) / y00;
    sh[1 + c] = 0.3;
  }
}

inline double box_signed_distance(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  double outside = 0, inside = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double d = std::max(lo[a] - p[a], p[a] - hi[a]);
    outside += std::max(d, 0.0) * std::max(d, 0.0);
    inside = std::max(inside, d);
  }
  return outside > 0 ? std::sqrt(outside) : inside;
}

}  // namespace detail

// Dense payload grid of a procedural scene inside the box [-1, 1]^3.
inline DenseGrid<double> make_scene_grid(SceneKind kind, std::size_t levels) {
  const std::size_t side = std::size_t{1} << levels;
  DenseGrid<double> g(side, 28);
  const double edge = 0.05;
  for (std::uint32_t x = 0; x < side; ++x)
    for (std::uint32_t y = 0; y < side; ++y)
      for (std::uint32_t z = 0; z < side; ++z) {
        const Vec3 p{-1 + 2 * (x + 0.5) / side, -1 + 2 * (y + 0.5) / side, -1 + 2 * (z + 0.5) / side};
        auto v = g.voxel(x, y, z);
        switch (kind) {
          case SceneKind::Empty:
            v[0] = -1e3;
            break;
          case SceneKind::Sphere: {
            const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
            detail::fill_payload(v, detail::smooth_step(r - 0.55, edge), {0.8, 0.3, 0.2});
            break;
          }
          case SceneKind::TwoBoxes: {
            const double s1 = detail::smooth_step(detail::box_signed_distance(p, {-0.7, -0.6, -0.5}, {-0.1, 0.1, 0.3}), edge);
            const double s2 = detail::smooth_step(detail::box_signed_distance(p, {0.15, -0.2, -0.6}, {0.65, 0.6, 0.0}), edge);
            const std::array<double, 3> a1{0.2, 0.6, 0.9}, a2{0.9, 0.8, 0.2};
            std::array<double, 3> albedo{};
            const double wsum = s1 + s2 + 1e-3;
            for (int c = 0; c < 3; ++c) albedo[c] = (s1 * a1[c] + s2 * a2[c] + 1e-3 * 0.5) / wsum;
            detail::fill_payload(v, std::max(s1, s2), albedo);
            break;
          }
        }
      }
  return g;
}

// Cameras on a circle around the vertical axis, looking at the origin.
inline std::vector<Camera> make_orbit_cameras(const SceneConfig& sc) {
  std::vector<Camera> cams;
  const double elev = sc.elevation_deg * std::numbers::pi / 180;
  const double focal = 0.5 * static_cast<double>(sc.image_size) / std::tan(0.5 * sc.fov_deg * std::numbers::pi / 180);
  for (std::size_t i = 0; i < sc.cameras; ++i) {
    const double az = 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(sc.cameras);
    const Vec3 eye{sc.distance * std::cos(elev) * std::cos(az), sc.distance * std::cos(elev) * std::sin(az),
                   sc.distance * std::sin(elev)};
    cams.push_back(look_at(eye, {0, 0, 0}, {0, 0, 1}, focal, sc.image_size, sc.image_size));
  }
  return cams;
}

// Scene with ground-truth images rendered from the dense grid itself.
inline Scene make_synthetic_scene(const SceneConfig& sc, const RenderConfig& rc) {
  sc.validate();
  Scene s;
  s.grid.levels = sc.levels;
  s.grid.channels = 28;
  s.dense = make_scene_grid(sc.kind, sc.levels);
  s.cameras = make_orbit_cameras(sc);
  const DenseSource<double> src{&s.grid, &s.dense};
  for (std::size_t i = 0; i < s.cameras.size(); ++i) {
    s.images.push_back(render_image<double>(src, s.cameras[i], rc));
    (i % sc.test_every == sc.test_every - 1 ? s.test : s.train).push_back(i);
  }
  return s;
}

// Random grid with payload scale sigma.
template <typename T>
QttGrid<T> init_grid(const QttGridConfig& cfg, double sigma, std::uint64_t seed) {
  cfg.validate();
  return QttGrid<T>(cfg, init_random<T>(cfg.shape(), cfg.rank(), sigma, seed));
}

struct FitOptions {
  std::optional<double> stop_at_train_psnr;  // stop once train PSNR reaches this value
  bool eval_test = true;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct FitLogEntry {
  std::size_t step = 0;
  std::string split;
  double psnr = 0;
  double loss = 0;
  double seconds = 0;
};

struct FitResult {
  std::vector<FitLogEntry> log;
  double init_train_psnr = 0, init_test_psnr = 0;
  double final_train_psnr = 0, final_test_psnr = 0;
  std::size_t steps_run = 0;
  std::optional<std::size_t> reached_step;  // first evaluated step meeting stop_at_train_psnr
  double max_conservation_error = 0;        // over every evaluation render
};

inline const char* fit_csv_header() { return "step,split,psnr,loss,seconds"; }

inline void write_fit_csv(std::ostream& os, const FitResult& r, bool with_seconds) {
  os << fit_csv_header() << '\n';
  char buf[160];
  for (const auto& e : r.log) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.6f", e.step, e.split.c_str(), capped_psnr(e.psnr), e.loss,
                  with_seconds ? e.seconds : 0.0);
    os << buf << '\n';
  }
}

// Mean PSNR over a set of views, rendering through the grid.
template <typename T>
double views_psnr(const QttGrid<T>& grid, const Scene& scene, const std::vector<std::size_t>& views,
                  const RenderConfig& rc, double* mse_out = nullptr, double* conservation = nullptr) {
  const QttSource<T> src{&grid, rc.sampler};
  double mse_sum = 0;
  for (std::size_t v : views) {
    std::vector<double> cons;
    const Image img = render_image<T>(src, scene.cameras[v], rc, conservation ? &cons : nullptr);
    mse_sum += mse(img, scene.images[v]);
    if (conservation)
      for (double c : cons) *conservation = std::max(*conservation, c);
  }
  const double m = views.empty() ? 0 : mse_sum / static_cast<double>(views.size());
  if (mse_out) *mse_out = m;
  return psnr_from_mse(m);
}

// Adam learning-rate multipliers by payload channel group on the core that
// carries the payload bond.
template <typename T>
void apply_group_lr(AdamState<T>& state, const QttGrid<T>& grid, const RenderConfig& rc) {
  const TensorTrain<T>& tt = grid.tt;
  std::size_t k = tt.num_dims() - 1;
  if (is_reduced(tt)) k = reduced_window(tt.shape(), tt.rank()).last;
  const auto ext = tt.core_extents(k);
  const std::size_t c = grid.config.channels;
  state.lr_scale.assign(tt.num_dims(), {});
  state.lr_scale[k].resize(tt.core_size(k));
  for (std::size_t i = 0; i < state.lr_scale[k].size(); ++i)
    state.lr_scale[k][i] = static_cast<T>((i % ext[2]) % c == 0 ? rc.lr_mult_density : rc.lr_mult_sh);
}

// Trains the grid against the scene's training views.
template <typename T>
FitResult fit_scene(QttGrid<T>& grid, const Scene& scene, const RenderConfig& rc, const FitOptions& opt = {}) {
  rc.validate();
  detail::require<ShapeError>(grid.config.channels == 28, "fit_scene: payload must have 28 channels");
  detail::require<ConfigError>(!scene.train.empty(), "fit_scene: no training views");
  if (rc.sampler == SamplerKind::V3 && !is_reduced(grid.tt))
    throw RankPatternError("fit_scene: v3 sampling needs a reduced grid");

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  FitResult res;

  // Pixel pool: training rays that hit the box.
  std::vector<Ray> pool;
  std::vector<std::array<double, 3>> pool_rgb;
  for (std::size_t v : scene.train) {
    const std::vector<Ray> rays = generate_rays(scene.cameras[v]);
    for (std::size_t i = 0; i < rays.size(); ++i)
      if (intersect_box(rays[i], grid.config.box).hit) {
        pool.push_back(rays[i]);
        const double* px = scene.images[v].pixel(i);
        pool_rgb.push_back({px[0], px[1], px[2]});
      }
  }
  detail::require<ConfigError>(!pool.empty(), "fit_scene: no training ray hits the grid");

  auto evaluate = [&](std::size_t step) {
    double m = 0;
    const double tr = views_psnr(grid, scene, scene.train, rc, &m, &res.max_conservation_error);
    res.log.push_back({step, "train", tr, m, elapsed()});
    res.final_train_psnr = tr;
    if (opt.eval_test && !scene.test.empty()) {
      const double te = views_psnr(grid, scene, scene.test, rc, &m, &res.max_conservation_error);
      res.log.push_back({step, "test", te, m, elapsed()});
      res.final_test_psnr = te;
    }
    if (opt.stop_at_train_psnr && !res.reached_step && tr >= *opt.stop_at_train_psnr) res.reached_step = step;
  };

  evaluate(0);
  res.init_train_psnr = res.final_train_psnr;
  res.init_test_psnr = res.final_test_psnr;
  if (res.reached_step) return res;

  AdamState<T> adam(grid.tt);
  apply_group_lr(adam, grid, rc);
  std::mt19937_64 rng = sub_rng(rc.seed, 3);
  std::mt19937_64 jitter = sub_rng(rc.seed, 4);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const QttSource<T> src{&grid, rc.sampler};
  std::vector<Ray> rays(rc.rays_per_batch);
  std::vector<std::array<double, 3>> target(rc.rays_per_batch), upstream(rc.rays_per_batch);
  RenderTape<T> tape;
  for (std::size_t step = 0; step < rc.steps; ++step) {
    for (std::size_t i = 0; i < rays.size(); ++i) {
      const std::size_t j = pick(rng);
      rays[i] = pool[j];
      target[i] = pool_rgb[j];
    }
    const RenderOutput out = render_rays<T>(src, rays, rc, &tape, &jitter);
    const double inv = 1.0 / static_cast<double>(3 * rays.size());
    double loss = 0;
    for (std::size_t i = 0; i < rays.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        const double r = out.rgb[i][c] - target[i][c];
        loss += r * r * inv;
        upstream[i][c] = 2 * r * inv;
      }
    GradBuffers<T> grads = grid.tt.make_grads();
    render_backward_into(tape, upstream, rc, grads);
    adam_step(adam, grid.tt, grads, lr_at(rc.sched, step));
    res.steps_run = step + 1;
    if (opt.on_step) opt.on_step(step, loss);
    if ((step + 1) % rc.log_every == 0 || step + 1 == rc.steps) {
      evaluate(step + 1);
      if (res.reached_step) break;
    }
  }
  return res;
}

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}, {"pose", c.pose}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.pose = j.at("pose").get<std::array<double, 16>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad camera entry: ") + e.what());
  }
  c.validate();
  return c;
}

// Writes `dir`/scene.json plus one PPM per view. Image paths in the JSON are
// relative to `dir`.
inline std::vector<std::filesystem::path> write_scene(const Scene& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  nlohmann::json cams = nlohmann::json::array();
  for (std::size_t i = 0; i < s.cameras.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "gt_%03zu.ppm", i);
    write_ppm(s.images[i], dir / name);
    written.push_back(dir / name);
    nlohmann::json c = camera_to_json(s.cameras[i]);
    c["image"] = name;
    c["split"] = std::find(s.test.begin(), s.test.end(), i) != s.test.end() ? "test" : "train";
    cams.push_back(c);
  }
  const nlohmann::json j = {{"box", {{"min", s.grid.box.lo}, {"max", s.grid.box.hi}}}, {"cameras", cams}};
  std::ofstream f(dir / "scene.json");
  if (!f) throw IoError("cannot write " + (dir / "scene.json").string());
  f << j.dump(2) << '\n';
  written.push_back(dir / "scene.json");
  return written;
}

// Reads a scene description. Cameras without an "image" entry have no ground
// truth; their image is left empty. Without a "split" entry every
// `test_every`-th camera is held out.
inline Scene read_scene(const std::filesystem::path& path, std::size_t test_every = 4) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open scene " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad scene file " + path.string() + ": " + e.what());
  }
  Scene s;
  try {
    if (j.contains("box")) {
      s.grid.box.lo = j.at("box").at("min").get<Vec3>();
      s.grid.box.hi = j.at("box").at("max").get<Vec3>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad scene box: " + std::string(e.what()));
  }
  s.grid.box.validate();
  if (!j.contains("cameras") || !j.at("cameras").is_array()) throw ConfigError("scene file has no camera list");
  const auto base = path.parent_path();
  std::size_t i = 0;
  for (const auto& c : j.at("cameras")) {
    s.cameras.push_back(camera_from_json(c));
    if (c.contains("image")) {
      Image img = read_ppm(base / c.at("image").get<std::string>());
      if (img.width != s.cameras.back().width || img.height != s.cameras.back().height)
        throw ConfigError("scene image extent does not match its camera");
      s.images.push_back(std::move(img));
    } else {
      s.images.emplace_back();
    }
    bool test = i % test_every == test_every - 1;
    if (c.contains("split")) test = c.at("split").get<std::string>() == "test";
    (test ? s.test : s.train).push_back(i);
    ++i;
  }
  return s;
}

}  // namespace ttnf
