#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ttnf/config.hpp"
#include "ttnf/cost_model.hpp"
#include "ttnf/denoise.hpp"
#include "ttnf/memory.hpp"
#include "ttnf/qtt_field.hpp"
#include "ttnf/render.hpp"
#include "ttnf/scene.hpp"
#include "ttnf/serialize.hpp"

namespace ttnf::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumerical = 3, kExitIo = 4 };

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonOptions {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string precision = "f64";
  std::optional<std::size_t> mem_budget;
  EnvLookup env = [](const char* n) { return std::getenv(n); };
};

// Provenance record, written to <out>/manifest.json on success and failure.
struct Manifest {
  std::string command;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> artifacts;
  std::vector<std::string> env_overrides;
  json extra = json::object();
  std::string status = "error";
  std::string message;
  int exit_code = 0;
  std::string started_at;
  double seconds = 0;

  void add(const fs::path& p) { artifacts.push_back(p.generic_string()); }

  void write(const fs::path& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const json j = {{"command", command},     {"config", config},         {"seeds", seeds},
                    {"artifacts", artifacts}, {"env_overrides", env_overrides},
                    {"extra", extra},         {"status", status},         {"message", message},
                    {"exit_code", exit_code}, {"tool_version", kToolVersion},
                    {"started_at", started_at}, {"wall_clock_seconds", seconds}};
    std::ofstream f(dir / "manifest.json");
    if (f) f << j.dump(2) << '\n';
  }
};

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

inline fs::path resolve(const ConfigDoc& doc, const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute() || doc.source.empty() || doc.source.front() == '<') return path;
  return fs::path(doc.source).parent_path() / path;
}

inline ConfigDoc load_doc(const CommonOptions& opt, const std::set<std::string>& keys, Manifest& man) {
  ConfigDoc doc = opt.config.empty() ? parse_config_text("{}", "<defaults>") : load_config(opt.config);
  man.env_overrides = apply_env_overrides(doc, keys, opt.env);
  return doc;
}

inline std::size_t budget_of(const CommonOptions& opt) { return opt.mem_budget.value_or(0); }

// Runs `n` independent jobs on up to `jobs` threads; results are indexed by
// job so output order never depends on scheduling. The first failure by job
// index is rethrown.
template <typename R, typename F>
std::vector<R> run_jobs(std::size_t n, std::size_t jobs, F&& fn) {
  std::vector<R> out(n);
  std::vector<std::exception_ptr> err(n);
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        out[i] = fn(i);
      } catch (...) {
        err[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min(jobs, n));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : err)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- denoise

inline const std::set<std::string>& denoise_keys() {
  static const std::set<std::string> k{"modes",   "methods",  "families", "scales",     "r_fit",
                                       "r_gen",   "svd_cap",  "sigma_gt", "steps",      "batch",
                                       "lr_max",  "lr_min",   "warmup_frac", "seeds",   "loss",
                                       "laplace_scale_is_std", "balance_init", "epoch_permutation",
                                       "record_seconds", "csv"};
  return k;
}

struct DenoisePlan {
  std::vector<DenoiseConfig> cells;
  bool record_seconds = false;
  std::string csv = "denoise.csv";
  json resolved;
};

inline DenoisePlan plan_denoise(const ConfigDoc& doc, const CommonOptions& opt) {
  const json& j = doc.root;
  check_keys(doc, j, denoise_keys(), "denoise config");
  DenoisePlan plan;
  DenoiseConfig base;
  base.shape.modes = get_list_or<std::size_t>(doc, j, "modes", base.shape.modes);
  base.sigma_gt = get_or<double>(doc, j, "sigma_gt", 1.0);
  base.steps = get_or<std::size_t>(doc, j, "steps", 1000);
  base.batch = get_or<std::size_t>(doc, j, "batch", 4096);
  base.sched = {base.steps, get_or<double>(doc, j, "warmup_frac", 0.05), get_or<double>(doc, j, "lr_max", 3e-2),
                get_or<double>(doc, j, "lr_min", 3e-4)};
  base.seeds = get_list_or<std::uint64_t>(doc, j, "seeds", {0});
  if (opt.seed) base.seeds = {*opt.seed};
  base.noise.laplace_scale_is_std = get_or<bool>(doc, j, "laplace_scale_is_std", false);
  base.balance_init = get_or<bool>(doc, j, "balance_init", true);
  base.epoch_permutation = get_or<bool>(doc, j, "epoch_permutation", false);
  base.mem_budget = detail::budget_of(opt);
  if (j.contains("svd_cap") && !j.at("svd_cap").is_null()) base.svd_cap = get_or<std::size_t>(doc, j, "svd_cap", 0);
  if (j.contains("loss") && !j.at("loss").is_null()) {
    const auto l = get_or<std::string>(doc, j, "loss", "");
    if (l != "l1" && l != "l2") throw ConfigError(doc.where("loss") + ": loss must be \"l1\" or \"l2\"");
    base.loss = l == "l1" ? LossKind::L1 : LossKind::L2;
  }
  plan.record_seconds = get_or<bool>(doc, j, "record_seconds", false);
  plan.csv = get_or<std::string>(doc, j, "csv", "denoise.csv");

  const auto methods = get_list_or<std::string>(doc, j, "methods", {"tt_svd", "sampling_v2"});
  const auto families = get_list_or<std::string>(doc, j, "families", {"normal"});
  const auto scales = get_list_or<double>(doc, j, "scales", {0.5});
  const auto r_fits = get_list_or<std::size_t>(doc, j, "r_fit", {8});
  const std::size_t r_gen_fixed = get_or<std::size_t>(doc, j, "r_gen", 0);  // 0: follow r_fit

  for (const auto& m : methods)
    for (const auto& f : families)
      for (double s : scales)
        for (std::size_t r : r_fits) {
          DenoiseConfig c = base;
          try {
            c.method = parse_denoise_method(m);
          } catch (const ConfigError& e) {
            throw ConfigError(doc.where("methods") + ": " + e.what());
          }
          try {
            c.noise.family = parse_noise_family(f);
          } catch (const ConfigError& e) {
            throw ConfigError(doc.where("families") + ": " + e.what());
          }
          c.noise.scale = s;
          c.r_fit = r;
          c.r_gen = r_gen_fixed ? r_gen_fixed : r;
          try {
            c.validate();
          } catch (const ConfigError& e) {
            throw ConfigError(doc.source + ": " + e.what());
          }
          plan.cells.push_back(c);
        }

  json& rj = plan.resolved;
  rj["modes"] = base.shape.modes;
  rj["methods"] = methods;
  rj["families"] = families;
  rj["scales"] = scales;
  rj["r_fit"] = r_fits;
  rj["r_gen"] = nullptr;
  if (r_gen_fixed) rj["r_gen"] = r_gen_fixed;
  rj["svd_cap"] = nullptr;
  if (base.svd_cap) rj["svd_cap"] = base.svd_cap.value();
  rj["sigma_gt"] = base.sigma_gt;
  rj["steps"] = base.steps;
  rj["batch"] = base.batch;
  rj["lr_max"] = base.sched.lr_max;
  rj["lr_min"] = base.sched.lr_min;
  rj["warmup_frac"] = base.sched.warmup_frac;
  rj["seeds"] = base.seeds;
  rj["loss"] = base.loss ? json(to_string(*base.loss)) : json(nullptr);
  rj["laplace_scale_is_std"] = base.noise.laplace_scale_is_std;
  rj["balance_init"] = base.balance_init;
  rj["epoch_permutation"] = base.epoch_permutation;
  rj["record_seconds"] = plan.record_seconds;
  rj["csv"] = plan.csv;
  return plan;
}

template <typename T>
void cmd_denoise_t(const CommonOptions& opt, const ConfigDoc& doc, Manifest& man) {
  const DenoisePlan plan = plan_denoise(doc, opt);
  man.config = plan.resolved;
  man.seeds = plan.cells.empty() ? std::vector<std::uint64_t>{} : plan.cells.front().seeds;

  struct Unit {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Unit> units;
  for (std::size_t c = 0; c < plan.cells.size(); ++c)
    for (auto s : plan.cells[c].seeds) units.push_back({c, s});
  const auto runs = detail::run_jobs<DenoiseRun>(
      units.size(), opt.jobs, [&](std::size_t i) { return run_denoise_seed<T>(plan.cells[units[i].cell], units[i].seed); });

  std::string csv = std::string(denoise_csv_header()) + "\n";
  for (std::size_t i = 0; i < units.size(); ++i)
    csv += denoise_csv_row(plan.cells[units[i].cell], runs[i], plan.record_seconds) + "\n";
  const fs::path out = fs::path(opt.out) / plan.csv;
  detail::write_text(out, csv);
  man.add(out);
  for (const auto& r : runs)
    if (!std::isfinite(r.rmse)) throw NumericalError("denoise: non-finite RMSE");
}

// ------------------------------------------------------------------ bench

inline const std::set<std::string>& bench_keys() {
  static const std::set<std::string> k{"shapes", "payload", "kinds", "batches", "ranks", "training", "measure",
                                       "analytic_only_above_log2", "record_seconds", "seed", "csv", "measured_csv"};
  return k;
}

struct BenchCell {
  SamplerKind kind;
  TtShape shape;
  TtRank rank;
  std::size_t batch;
};

inline const char* bench_measured_header() {
  return "kind,D,log2_numel,payload,r,B,peak_mem_elems_model,peak_mem_elems_measured,seconds";
}

// Peak tracked allocation of one sampling call, with its wall-clock seconds.
template <typename T>
std::pair<std::size_t, double> measure_sampling(const BenchCell& c, bool training, std::uint64_t seed) {
  TensorTrain<T> tt = init_random<T>(c.shape, c.rank, 1.0, seed);
  if (c.kind == SamplerKind::V3) tt = full_to_reduced(tt);
  std::mt19937_64 gen(seed + 1);
  IndexBatch batch(c.batch, c.shape.num_dims());
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t k = 0; k < c.shape.num_dims(); ++k)
      batch(b, k) = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, c.shape.modes[k] - 1)(gen));
  Tape<T> tape;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t peak = 0;
  {
    PeakProbe probe;
    SampleBatch<T> out = sample(tt, batch, c.kind, training ? &tape : nullptr, std::numeric_limits<std::size_t>::max());
    peak = probe.peak();
  }
  return {peak, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

template <typename T>
void cmd_bench_t(const CommonOptions& opt, const ConfigDoc& doc, Manifest& man) {
  const json& j = doc.root;
  check_keys(doc, j, bench_keys(), "bench config");
  std::vector<std::vector<std::size_t>> shapes = {std::vector<std::size_t>(10, 4), std::vector<std::size_t>(6, 32)};
  if (j.contains("shapes")) {
    try {
      shapes = j.at("shapes").get<std::vector<std::vector<std::size_t>>>();
    } catch (const json::exception& e) {
      throw ConfigError(doc.where("shapes") + ": shapes must be a list of mode lists: " + e.what());
    }
  }
  const std::size_t payload = get_or<std::size_t>(doc, j, "payload", 1);
  const auto kinds = get_list_or<std::string>(doc, j, "kinds", {"v1", "v2", "v3", "dense"});
  const auto batches = get_list_or<std::size_t>(doc, j, "batches", {4096});
  std::vector<std::size_t> default_ranks;
  for (std::size_t r = 1; r <= (std::size_t{1} << 15); r *= 2) default_ranks.push_back(r);
  const auto ranks = get_list_or<std::size_t>(doc, j, "ranks", default_ranks);
  const bool training = get_or<bool>(doc, j, "training", false);
  const bool measure = get_or<bool>(doc, j, "measure", true);
  const double analytic_above = get_or<double>(doc, j, "analytic_only_above_log2", 20.0);
  const bool record_seconds = get_or<bool>(doc, j, "record_seconds", false);
  const std::uint64_t seed = opt.seed.value_or(get_or<std::uint64_t>(doc, j, "seed", 0));
  const std::string csv_name = get_or<std::string>(doc, j, "csv", "bench.csv");
  const std::string measured_name = get_or<std::string>(doc, j, "measured_csv", "bench_measured.csv");
  const std::size_t budget = opt.mem_budget.value_or(std::size_t{1} << 26);

  std::vector<SamplerKind> kind_list;
  for (const auto& k : kinds) {
    try {
      kind_list.push_back(parse_sampler_kind(k));
    } catch (const Error& e) {
      throw ConfigError(doc.where("kinds") + ": " + e.what());
    }
  }

  std::vector<BenchCell> cells;
  for (const auto& modes : shapes) {
    TtShape shape{modes, payload};
    try {
      shape.validate();
    } catch (const Error& e) {
      throw ConfigError(doc.where("shapes") + ": " + e.what());
    }
    const TtRank pyramid = max_rank_pyramid(shape);
    for (SamplerKind k : kind_list)
      for (std::size_t b : batches) {
        if (b == 0) throw ConfigError(doc.where("batches") + ": batch sizes must be positive");
        std::optional<TtRank> prev;
        for (std::size_t r : ranks) {
          if (r == 0) throw ConfigError(doc.where("ranks") + ": ranks must be positive");
          const TtRank rank = clamp_ranks(pyramid, r);
          if (prev && *prev == rank) continue;  // beyond the pyramid maximum
          prev = rank;
          cells.push_back({k, shape, rank, b});
        }
      }
  }

  json& rj = man.config;
  rj = {{"shapes", shapes},   {"payload", payload},   {"kinds", kinds},   {"batches", batches},
        {"ranks", ranks},     {"training", training}, {"measure", measure},
        {"analytic_only_above_log2", analytic_above}, {"record_seconds", record_seconds},
        {"seed", seed},       {"csv", csv_name},      {"measured_csv", measured_name}, {"mem_budget", budget}};
  man.seeds = {seed};

  std::vector<CostReport> reports;
  for (const auto& c : cells) reports.push_back(estimate_cost(c.kind, c.shape, c.rank, c.batch, training));
  std::ostringstream analytic;
  write_cost_csv(analytic, reports);
  const fs::path out = fs::path(opt.out) / csv_name;
  detail::write_text(out, analytic.str());
  man.add(out);

  if (!measure) return;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    double log2n = 0;
    for (auto m : cells[i].shape.modes) log2n += std::log2(static_cast<double>(m));
    const std::size_t need = ttnf::detail::sat_add(reports[i].peak_mem_elems, reports[i].params);
    if (log2n <= analytic_above + 1e-9 && need <= budget) todo.push_back(i);
  }
  // Peak accounting is per thread, so cells can run concurrently.
  const auto measured = detail::run_jobs<std::pair<std::size_t, double>>(
      todo.size(), opt.jobs, [&](std::size_t i) { return measure_sampling<T>(cells[todo[i]], training, seed); });
  std::string csv = std::string(bench_measured_header()) + "\n";
  for (std::size_t i = 0; i < todo.size(); ++i) {
    const CostReport& r = reports[todo[i]];
    const std::string row = cost_csv_row(r);
    // kind,D,log2_numel,payload,r,B prefix of the analytic row
    std::size_t cut = 0;
    for (int commas = 0; commas < 6; ++commas) cut = row.find(',', cut) + 1;
    char tail[96];
    std::snprintf(tail, sizeof tail, "%zu,%zu,%.6f", r.peak_mem_elems, measured[i].first,
                  record_seconds ? measured[i].second : 0.0);
    csv += row.substr(0, cut) + tail + "\n";
  }
  const fs::path mout = fs::path(opt.out) / measured_name;
  detail::write_text(mout, csv);
  man.add(mout);
  man.extra["measured_cells"] = todo.size();
  man.extra["analytic_cells"] = cells.size();
}

// -------------------------------------------------------------- fit/render

inline const std::set<std::string>& fit_keys() {
  static const std::set<std::string> k{"scene",        "scene_file", "levels",          "r_max",        "init",
                                       "init_sigma",   "samples_per_ray", "rays_per_batch", "steps",     "lr_max",
                                       "lr_min",       "warmup_frac", "lr_mult_density", "lr_mult_sh",  "activation",
                                       "background",   "sampler",    "jitter",          "log_every",    "seed",
                                       "reduced",      "record_seconds", "save_images"};
  return k;
}

inline const std::set<std::string>& render_keys() {
  static const std::set<std::string> k{"checkpoint", "scene_file", "samples_per_ray", "rays_per_batch",
                                       "activation", "background", "sampler"};
  return k;
}

inline const std::set<std::string>& scene_keys() {
  static const std::set<std::string> k{"kind", "levels", "cameras", "image_size", "fov_deg", "distance",
                                       "elevation_deg", "test_every"};
  return k;
}

// Render settings shared by fit and render.
inline RenderConfig read_render_config(const ConfigDoc& doc, json& resolved) {
  const json& j = doc.root;
  RenderConfig rc;
  rc.samples_per_ray = get_or<std::size_t>(doc, j, "samples_per_ray", 64);
  rc.rays_per_batch = get_or<std::size_t>(doc, j, "rays_per_batch", 512);
  const auto act = get_or<std::string>(doc, j, "activation", "softplus");
  if (act != "softplus" && act != "relu") throw ConfigError(doc.where("activation") + ": activation must be softplus or relu");
  rc.activation = act == "softplus" ? DensityActivation::Softplus : DensityActivation::Relu;
  rc.background = get_or<Vec3>(doc, j, "background", Vec3{1, 1, 1});
  const auto sampler = get_or<std::string>(doc, j, "sampler", "v2");
  try {
    rc.sampler = parse_sampler_kind(sampler);
  } catch (const Error& e) {
    throw ConfigError(doc.where("sampler") + ": " + e.what());
  }
  if (rc.sampler != SamplerKind::V2 && rc.sampler != SamplerKind::V3)
    throw ConfigError(doc.where("sampler") + ": render sampler must be v2 or v3");
  resolved["samples_per_ray"] = rc.samples_per_ray;
  resolved["rays_per_batch"] = rc.rays_per_batch;
  resolved["activation"] = act;
  resolved["background"] = rc.background;
  resolved["sampler"] = sampler;
  return rc;
}

inline SceneConfig read_scene_config(const ConfigDoc& doc, const json& j, json& resolved) {
  check_keys(doc, j, scene_keys(), "scene");
  SceneConfig sc;
  try {
    sc.kind = parse_scene_kind(get_or<std::string>(doc, j, "kind", "sphere"));
  } catch (const ConfigError& e) {
    throw ConfigError(doc.where("kind") + ": " + e.what());
  }
  sc.levels = get_or<std::size_t>(doc, j, "levels", 5);
  sc.cameras = get_or<std::size_t>(doc, j, "cameras", 12);
  sc.image_size = get_or<std::size_t>(doc, j, "image_size", 32);
  sc.fov_deg = get_or<double>(doc, j, "fov_deg", 60.0);
  sc.distance = get_or<double>(doc, j, "distance", 3.2);
  sc.elevation_deg = get_or<double>(doc, j, "elevation_deg", 20.0);
  sc.test_every = get_or<std::size_t>(doc, j, "test_every", 4);
  sc.validate();
  resolved = {{"kind", to_string(sc.kind)}, {"levels", sc.levels},   {"cameras", sc.cameras},
              {"image_size", sc.image_size}, {"fov_deg", sc.fov_deg}, {"distance", sc.distance},
              {"elevation_deg", sc.elevation_deg}, {"test_every", sc.test_every}};
  return sc;
}

template <typename T>
std::vector<fs::path> write_views(const QttGrid<T>& grid, const Scene& scene, const RenderConfig& rc,
                                  const fs::path& dir, const std::string& prefix, std::string* csv) {
  std::vector<fs::path> written;
  const QttSource<T> src{&grid, rc.sampler};
  if (csv) *csv = "view,split,psnr,mse\n";
  for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
    const Image img = render_image<T>(src, scene.cameras[i], rc);
    char name[48];
    std::snprintf(name, sizeof name, "%s_%03zu.ppm", prefix.c_str(), i);
    write_ppm(img, dir / name);
    written.push_back(dir / name);
    if (csv && !scene.images[i].data.empty()) {
      const double m = mse(img, scene.images[i]);
      const bool test = std::find(scene.test.begin(), scene.test.end(), i) != scene.test.end();
      char row[128];
      std::snprintf(row, sizeof row, "%zu,%s,%.17g,%.17g\n", i, test ? "test" : "train", capped_psnr(psnr_from_mse(m)), m);
      *csv += row;
    }
  }
  return written;
}

template <typename T>
void cmd_fit_t(const CommonOptions& opt, const ConfigDoc& doc, Manifest& man) {
  const json& j = doc.root;
  check_keys(doc, j, fit_keys(), "fit config");
  json rj;
  RenderConfig rc = read_render_config(doc, rj);
  rc.steps = get_or<std::size_t>(doc, j, "steps", 2000);
  rc.sched = {std::max<std::size_t>(rc.steps, 1), get_or<double>(doc, j, "warmup_frac", 0.05),
              get_or<double>(doc, j, "lr_max", 3e-3), get_or<double>(doc, j, "lr_min", 3e-5)};
  rc.lr_mult_density = get_or<double>(doc, j, "lr_mult_density", 1.0);
  rc.lr_mult_sh = get_or<double>(doc, j, "lr_mult_sh", 1.0);
  rc.jitter = get_or<bool>(doc, j, "jitter", false);
  rc.log_every = get_or<std::size_t>(doc, j, "log_every", 250);
  rc.seed = opt.seed.value_or(get_or<std::uint64_t>(doc, j, "seed", 0));
  if (rc.steps > 0) {
    try {
      rc.sched.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(doc.source + ": " + e.what());
    }
  }
  rc.validate();

  const std::string init = get_or<std::string>(doc, j, "init", "random");
  if (init != "random" && init != "tt_svd") throw ConfigError(doc.where("init") + ": init must be random or tt_svd");
  const double init_sigma = get_or<double>(doc, j, "init_sigma", 0.1);
  const bool reduced = get_or<bool>(doc, j, "reduced", rc.sampler == SamplerKind::V3);
  const bool record_seconds = get_or<bool>(doc, j, "record_seconds", false);
  const bool save_images = get_or<bool>(doc, j, "save_images", true);
  if (rc.sampler == SamplerKind::V3 && !reduced) throw ConfigError(doc.where("sampler") + ": v3 needs reduced: true");

  const fs::path out(opt.out);
  fs::create_directories(out);
  Scene scene;
  json scene_resolved;
  if (j.contains("scene_file")) {
    if (j.contains("scene")) throw ConfigError(doc.where("scene_file") + ": give either scene or scene_file, not both");
    const fs::path sf = detail::resolve(doc, get_or<std::string>(doc, j, "scene_file", ""));
    scene = read_scene(sf);
    scene_resolved = sf.generic_string();
    for (const auto& img : scene.images)
      if (img.data.empty()) throw ConfigError(doc.where("scene_file") + ": every camera needs an image for fitting");
    rj["scene_file"] = scene_resolved;
  } else {
    const json sj = j.contains("scene") ? j.at("scene") : json::object();
    if (!sj.is_object()) throw ConfigError(doc.where("scene") + ": scene must be an object");
    const SceneConfig sc = read_scene_config(doc, sj, scene_resolved);
    scene = make_synthetic_scene(sc, rc);
    for (const auto& p : write_scene(scene, out)) man.add(p);
    rj["scene"] = scene_resolved;
  }

  QttGridConfig gc;
  gc.levels = get_or<std::size_t>(doc, j, "levels", 5);
  gc.r_max = get_or<std::size_t>(doc, j, "r_max", 16);
  gc.box = scene.grid.box;
  try {
    gc.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(doc.source + ": " + e.what());
  }

  QttGrid<T> grid;
  if (init == "tt_svd") {
    if (scene.dense.data.empty()) throw ConfigError(doc.where("init") + ": tt_svd init needs a synthetic scene");
    if (scene.dense.side != gc.side()) throw ConfigError(doc.where("levels") + ": tt_svd init needs levels equal to the scene's");
    DenseGrid<T> dense(scene.dense.side, scene.dense.channels);
    std::transform(scene.dense.data.begin(), scene.dense.data.end(), dense.data.begin(), [](double x) { return static_cast<T>(x); });
    grid = qtt_from_dense(gc, dense);
  } else {
    grid = init_grid<T>(gc, init_sigma, stream_seed(rc.seed, kStreamGroundTruth));
  }
  if (reduced) grid.tt = full_to_reduced(grid.tt);

  rj.update({{"levels", gc.levels},          {"r_max", gc.r_max},
             {"init", init},                 {"init_sigma", init_sigma},
             {"steps", rc.steps},            {"lr_max", rc.sched.lr_max},
             {"lr_min", rc.sched.lr_min},    {"warmup_frac", rc.sched.warmup_frac},
             {"lr_mult_density", rc.lr_mult_density}, {"lr_mult_sh", rc.lr_mult_sh},
             {"jitter", rc.jitter},          {"log_every", rc.log_every},
             {"seed", rc.seed},              {"reduced", reduced},
             {"record_seconds", record_seconds}, {"save_images", save_images}});
  man.config = rj;
  man.seeds = {rc.seed};

  const FitResult res = fit_scene(grid, scene, rc);
  std::ostringstream csv;
  write_fit_csv(csv, res, record_seconds);
  detail::write_text(out / "metrics.csv", csv.str());
  man.add(out / "metrics.csv");
  save_grid(grid, out / "grid.tt");
  man.add(out / "grid.tt");
  man.add(sidecar_path(out / "grid.tt"));
  if (save_images)
    for (const auto& p : write_views(grid, scene, rc, out, "fit", nullptr)) man.add(p);
  man.extra = {{"init_train_psnr", res.init_train_psnr}, {"init_test_psnr", res.init_test_psnr},
               {"final_train_psnr", res.final_train_psnr}, {"final_test_psnr", res.final_test_psnr},
               {"max_conservation_error", res.max_conservation_error}};
  for (const auto& e : res.log)
    if (std::isnan(e.loss)) throw NumericalError("fit: loss became NaN");
}

template <typename T>
void cmd_render_t(const CommonOptions& opt, const ConfigDoc& doc, Manifest& man) {
  const json& j = doc.root;
  check_keys(doc, j, render_keys(), "render config");
  json rj;
  RenderConfig rc = read_render_config(doc, rj);
  rc.steps = 0;
  rc.validate();
  if (!j.contains("checkpoint")) throw ConfigError(doc.source + ": render needs a checkpoint");
  if (!j.contains("scene_file")) throw ConfigError(doc.source + ": render needs a scene_file");
  const fs::path ck = detail::resolve(doc, get_or<std::string>(doc, j, "checkpoint", ""));
  const fs::path sf = detail::resolve(doc, get_or<std::string>(doc, j, "scene_file", ""));
  if (!fs::exists(ck)) throw IoError("missing checkpoint " + ck.string());
  if (!fs::exists(sf)) throw IoError("missing scene file " + sf.string());
  rj["checkpoint"] = ck.generic_string();
  rj["scene_file"] = sf.generic_string();
  man.config = rj;

  QttGrid<T> grid = load_grid<T>(ck);
  if (rc.sampler == SamplerKind::V3 && !is_reduced(grid.tt))
    throw ConfigError(doc.where("sampler") + ": checkpoint is not in reduced form; convert it first");
  const Scene scene = read_scene(sf);
  const fs::path out(opt.out);
  fs::create_directories(out);
  std::string csv;
  for (const auto& p : write_views(grid, scene, rc, out, "view", &csv)) man.add(p);
  const bool any_gt = std::any_of(scene.images.begin(), scene.images.end(), [](const Image& i) { return !i.data.empty(); });
  if (any_gt) {
    detail::write_text(out / "render.csv", csv);
    man.add(out / "render.csv");
  }
}

// ---------------------------------------------------------------- convert

struct ConvertOptions {
  std::string checkpoint;
  std::string output;
  bool to_reduced = false;
  bool to_full = false;
};

template <typename T>
void cmd_convert_t(const CommonOptions& opt, const ConvertOptions& co, Manifest& man) {
  if (co.to_reduced == co.to_full) throw ConfigError("convert: pass exactly one of --to-reduced or --to-full");
  const fs::path in(co.checkpoint);
  if (!fs::exists(in)) throw IoError("missing checkpoint " + in.string());
  json meta = load_sidecar(in);
  TensorTrain<T> tt = load_tt<T>(in);
  TensorTrain<T> conv = tt;
  if (co.to_reduced) {
    conv = full_to_reduced(tt);
  } else {
    for (std::size_t k = 0; k < conv.num_dims(); ++k) conv.set_identity_flag(k, false);
  }

  // Parity on random multi-indices.
  const std::size_t n = 4096;
  std::mt19937_64 gen(opt.seed.value_or(0));
  IndexBatch batch(n, tt.num_dims());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < tt.num_dims(); ++k)
      batch(b, k) = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, tt.shape().modes[k] - 1)(gen));
  const auto a = sample(tt, batch, SamplerKind::V2);
  const auto b = sample(conv, batch, co.to_reduced ? SamplerKind::V3 : SamplerKind::V2);
  double max_diff = 0, max_abs = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    max_abs = std::max(max_abs, std::abs(static_cast<double>(a.data[i])));
  }
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-10;
  man.extra = {{"max_abs_diff", max_diff}, {"max_abs_value", max_abs}};
  if (max_diff > tol * std::max(1.0, max_abs)) throw NumericalError("convert: parity check failed");

  fs::path outp = co.output.empty() ? fs::path(opt.out) / (in.stem().string() + (co.to_reduced ? "_reduced" : "_full") + in.extension().string())
                                    : fs::path(co.output);
  if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
  json extra = json::object();
  for (auto it = meta.begin(); it != meta.end(); ++it)
    if (it.key() == "grid") extra[it.key()] = it.value();
  save_tt(conv, outp, extra);
  man.add(outp);
  man.add(sidecar_path(outp));
  man.config = {{"checkpoint", in.generic_string()}, {"to_reduced", co.to_reduced}, {"to_full", co.to_full},
                {"output", outp.generic_string()}};
}

// ------------------------------------------------------------------- main

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const RankPatternError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const IndexError*>(&e) ||
      dynamic_cast<const BudgetError*>(&e))
    return kExitConfig;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kExitIo;
  return kExitNumerical;
}

// Entry point; `args` excludes the program name. Messages go to `err`.
inline int run(const std::vector<std::string>& args, std::ostream& err = std::cerr,
               EnvLookup env = [](const char* n) { return std::getenv(n); }) {
  CLI::App app{"Tensor-train neural fields: denoising, sampling benchmarks, scene fitting and rendering", "ttnf"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  CommonOptions opt;
  opt.env = env;
  ConvertOptions co;
  std::uint64_t seed = 0;
  std::size_t budget = 0;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", opt.config, "JSON config file");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "override the seed list with one seed");
    sub->add_option("--jobs", opt.jobs, "worker threads for independent cells")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--precision", opt.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
    sub->add_option("--mem-budget", budget, "element budget for dense allocations")->check(CLI::PositiveNumber);
  };
  auto* den = app.add_subcommand("denoise", "noisy low-rank tensor recovery sweep");
  add_common(den, true);
  auto* ben = app.add_subcommand("bench", "sampling cost model and measured peaks");
  add_common(ben, true);
  auto* fit = app.add_subcommand("fit", "fit a QTT grid to a scene");
  add_common(fit, true);
  auto* ren = app.add_subcommand("render", "render a checkpoint from scene cameras");
  add_common(ren, true);
  auto* con = app.add_subcommand("convert", "convert a checkpoint between full and reduced form");
  add_common(con, false);
  con->add_option("checkpoint", co.checkpoint, "input checkpoint")->required();
  con->add_option("--output", co.output, "output path (default: <out>/<name>_reduced.tt)");
  con->add_flag("--to-reduced", co.to_reduced, "convert to the reduced parameterization");
  con->add_flag("--to-full", co.to_full, "drop identity flags");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    std::cout << kToolVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "ttnf: " << e.what() << '\n';
    return kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->count("--mem-budget")) opt.mem_budget = budget;

  Manifest man;
  man.command = sub->get_name();
  man.started_at = detail::utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const bool f32 = opt.precision == "f32";
  int code = kExitOk;
  try {
    if (man.command == "convert") {
      f32 ? cmd_convert_t<float>(opt, co, man) : cmd_convert_t<double>(opt, co, man);
    } else {
      const std::set<std::string>& keys = man.command == "denoise" ? denoise_keys()
                                          : man.command == "bench" ? bench_keys()
                                          : man.command == "fit"   ? fit_keys()
                                                                   : render_keys();
      const ConfigDoc doc = detail::load_doc(opt, keys, man);
      fs::create_directories(opt.out);
      if (man.command == "denoise") f32 ? cmd_denoise_t<float>(opt, doc, man) : cmd_denoise_t<double>(opt, doc, man);
      if (man.command == "bench") f32 ? cmd_bench_t<float>(opt, doc, man) : cmd_bench_t<double>(opt, doc, man);
      if (man.command == "fit") f32 ? cmd_fit_t<float>(opt, doc, man) : cmd_fit_t<double>(opt, doc, man);
      if (man.command == "render") f32 ? cmd_render_t<float>(opt, doc, man) : cmd_render_t<double>(opt, doc, man);
    }
    man.status = "ok";
  } catch (const std::exception& e) {
    code = exit_code_for(e);
    man.message = e.what();
    err << "ttnf " << man.command << ": " << e.what() << '\n';
  }
  man.exit_code = code;
  man.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  man.extra["precision"] = opt.precision;
  man.extra["jobs"] = opt.jobs;
  if (opt.mem_budget) man.extra["mem_budget"] = *opt.mem_budget;
  man.write(opt.out);
  return code;
}

}  // namespace ttnf::cli
