#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fourd/attention.hpp"
#include "fourd/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fourd;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << j.dump(2) << "\n";
}

// Camera file schema: array of {quaternion:[w,x,y,z], translation:[x,y,z],
// fx, fy, cx, cy, width, height}.
json cameras_to_json(const std::vector<CameraPose>& cams) {
  json arr = json::array();
  for (const auto& c : cams)
    arr.push_back({{"quaternion", {c.rotation.w, c.rotation.x, c.rotation.y, c.rotation.z}},
                   {"translation", {c.translation.x, c.translation.y, c.translation.z}},
                   {"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
                   {"width", c.width}, {"height", c.height}});
  return arr;
}

std::vector<CameraPose> cameras_from_json(const json& arr) {
  if (!arr.is_array() || arr.empty()) throw InputError("camera file must be a non-empty array");
  std::vector<CameraPose> cams;
  for (const auto& e : arr) {
    CameraPose c;
    const auto& q = e.at("quaternion");
    const auto& t = e.at("translation");
    if (q.size() != 4 || t.size() != 3)
      throw InputError("camera entry needs quaternion[4] and translation[3]");
    c.rotation = Quat{q[0], q[1], q[2], q[3]}.normalized();
    c.translation = {t[0], t[1], t[2]};
    c.fx = e.at("fx");
    c.fy = e.at("fy");
    c.cx = e.at("cx");
    c.cy = e.at("cy");
    c.width = e.at("width");
    c.height = e.at("height");
    cams.push_back(c);
  }
  return cams;
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig cfg;
  if (j.contains("schema_version") && j["schema_version"] != cfg.schema_version)
    throw InputError("unsupported schema_version in config");
  if (j.contains("width")) cfg.width = j["width"];
  if (j.contains("height")) cfg.height = j["height"];
  if (j.contains("f")) cfg.f = j["f"];
  if (j.contains("n_views")) cfg.n_views = j["n_views"];
  if (j.contains("n_clusters")) cfg.n_clusters = j["n_clusters"];
  if (j.contains("primitives_per_cluster"))
    cfg.primitives_per_cluster = j["primitives_per_cluster"];
  if (j.contains("motion_amplitude")) cfg.motion_amplitude = j["motion_amplitude"];
  if (j.contains("rig_radius")) cfg.rig_radius = j["rig_radius"];
  if (j.contains("focal")) cfg.focal = j["focal"];
  cfg.validate();
  return cfg;
}

json synth_config_to_json(const SynthConfig& cfg) {
  return {{"schema_version", cfg.schema_version}, {"width", cfg.width},
          {"height", cfg.height}, {"f", cfg.f}, {"n_views", cfg.n_views},
          {"n_clusters", cfg.n_clusters},
          {"primitives_per_cluster", cfg.primitives_per_cluster},
          {"motion_amplitude", cfg.motion_amplitude}, {"rig_radius", cfg.rig_radius},
          {"focal", cfg.focal}};
}

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  if (j.contains("lambda_ssim")) w.lambda_ssim = j["lambda_ssim"];
  if (j.contains("lambda_fmd")) w.lambda_fmd = j["lambda_fmd"];
  if (j.contains("lambda_arap")) w.lambda_arap = j["lambda_arap"];
  if (j.contains("lambda_rot")) w.lambda_rot = j["lambda_rot"];
  return w;
}

// --- synth-scene -----------------------------------------------------------

void cmd_synth_scene(std::uint64_t seed, const json& config, const std::string& out_dir,
                     const std::string& format) {
  const SynthConfig cfg = synth_config_from_json(config);
  const SceneBundle bundle = synth_scene(seed, cfg);
  fs::create_directories(out_dir);
  write_json_file((fs::path(out_dir) / "cameras.json").string(), cameras_to_json(bundle.cams));
  json meta = {{"schema_version", 1}, {"seed", seed}, {"config", synth_config_to_json(cfg)}};
  write_json_file((fs::path(out_dir) / "scene.json").string(), meta);
  for (std::size_t v = 0; v < bundle.videos.size(); ++v) {
    char sub[32];
    std::snprintf(sub, sizeof(sub), "view_%02zu", v);
    export_frames(bundle.videos[v], (fs::path(out_dir) / sub).string(), format);
  }
  std::vector<CheckpointArray> arrays;
  for (std::size_t v = 0; v < bundle.depths.size(); ++v) {
    const auto& d = bundle.depths[v];
    CheckpointArray values{"depth_" + std::to_string(v),
                           {static_cast<std::size_t>(d.height), static_cast<std::size_t>(d.width)},
                           {}};
    CheckpointArray valid{"valid_" + std::to_string(v), values.shape, {}};
    for (std::size_t i = 0; i < d.values.size(); ++i) {
      values.values.push_back(d.values[i]);
      valid.values.push_back(d.validity[i] ? 1.0 : 0.0);
    }
    arrays.push_back(std::move(values));
    arrays.push_back(std::move(valid));
  }
  save_checkpoint((fs::path(out_dir) / "depths.ckpt").string(), arrays,
                  {{"n_views", bundle.depths.size()}});
  std::printf("synth-scene: %d views x %d frames at %dx%d -> %s\n", cfg.n_views, cfg.f,
              cfg.width, cfg.height, out_dir.c_str());
}

// --- build-mask ------------------------------------------------------------

void cmd_build_mask(int views, int frames, int spatial, const std::string& out) {
  if (views < 1 || frames < 1 || spatial < 1)
    throw InputError("build-mask: --views, --frames, --spatial must be >= 1");
  const TVMask mask = build_mask(views, frames);
  const int np = mask.n_pairs();
  std::ofstream pbm(out);
  if (!pbm) throw IoError("cannot open " + out);
  pbm << "P1\n" << np << " " << np << "\n";
  for (int i = 0; i < np; ++i) {
    for (int j = 0; j < np; ++j)
      pbm << (mask.pair_mask[static_cast<std::size_t>(i) * np + j] ? 1 : 0)
          << (j + 1 < np ? ' ' : '\n');
  }
  json report = {{"schema_version", 1},
                 {"n_views", views},
                 {"f", frames},
                 {"spatial", spatial},
                 {"formula_density", mask_density(views, frames)},
                 {"measured_density", measured_density(mask)},
                 {"cross_half_edges", cross_half_edge_count(mask)}};
  write_json_file(out + ".json", report);
  std::printf("build-mask: %dx%d pair mask -> %s (density %.6f)\n", np, np, out.c_str(),
              mask_density(views, frames));
}

// --- train-flow ------------------------------------------------------------

void cmd_train_flow(const std::string& dataset, int epochs, std::uint64_t seed,
                    const std::string& out) {
  ToyDataset ds;
  if (dataset == "point")
    ds = ToyDataset::kPointMass;
  else if (dataset == "gauss")
    ds = ToyDataset::kGaussian;
  else if (dataset == "mixture")
    ds = ToyDataset::kMixture;
  else
    throw InputError("train-flow: --dataset must be point, gauss, or mixture");
  if (epochs < 1) throw InputError("train-flow: --epochs must be >= 1");

  ToyVelocityField field(seed);
  const auto stats = train_toy(field, ds, epochs, seed + 1);

  std::ofstream csv(out + ".csv");
  if (!csv) throw IoError("cannot open " + out + ".csv");
  csv << "step,loss\n";
  csv.precision(17);
  for (std::size_t i = 0; i < stats.losses.size(); ++i)
    csv << i << "," << stats.losses[i] << "\n";

  save_checkpoint(out, {{"params", {field.params().data.size()}, field.params().data}},
                  {{"dataset", dataset}, {"epochs", epochs}, {"seed", seed}});

  // Scatter plot: data samples in green, model samples in red, over [-4,4]^2.
  Image plot(256, 256);
  Rng rng(seed + 2);
  auto mark = [&](real x, real y, int channel) {
    const int px = static_cast<int>((x + 4) / 8 * 256);
    const int py = static_cast<int>((4 - y) / 8 * 256);
    if (px >= 0 && px < 256 && py >= 0 && py < 256) plot.at(py, px, channel) = 1.0;
  };
  for (int i = 0; i < 2000; ++i) {
    const auto d = toy_sample(ds, rng);
    mark(d[0], d[1], 1);
    const auto s = toy_euler_sample(field, 50, rng);
    mark(s[0], s[1], 0);
  }
  write_ppm(out + ".ppm", plot);
  std::printf("train-flow: %s, %d steps, final loss %.5f -> %s{,.csv,.ppm}\n", dataset.c_str(),
              epochs, stats.losses.back(), out.c_str());
}

// --- scene-dir loading shared by fit-4dgs ----------------------------------

struct SceneDir {
  std::vector<std::vector<Image>> videos;
  std::vector<DepthMap> depths;
  std::vector<CameraPose> cams;
  json meta;
};

SceneDir load_scene_dir(const std::string& dir) {
  SceneDir sd;
  sd.meta = load_json_file((fs::path(dir) / "scene.json").string());
  sd.cams = cameras_from_json(load_json_file((fs::path(dir) / "cameras.json").string()));
  const int f = sd.meta.at("config").at("f");
  for (std::size_t v = 0; v < sd.cams.size(); ++v) {
    char sub[32];
    std::snprintf(sub, sizeof(sub), "view_%02zu", v);
    std::vector<Image> seq;
    for (int t = 0; t < f; ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d.ppm", t);
      const fs::path ppm = fs::path(dir) / sub / name;
      std::snprintf(name, sizeof(name), "frame_%04d.png", t);
      const fs::path png = fs::path(dir) / sub / name;
      if (fs::exists(ppm))
        seq.push_back(read_ppm(ppm.string()));
      else if (fs::exists(png))
        seq.push_back(read_png(png.string()));
      else
        throw InputError("missing frame " + ppm.string());
    }
    sd.videos.push_back(std::move(seq));
  }
  const auto arrays = load_checkpoint((fs::path(dir) / "depths.ckpt").string());
  for (std::size_t v = 0; v < sd.cams.size(); ++v) {
    DepthMap d = DepthMap::invalid(sd.cams[v].width, sd.cams[v].height);
    bool got_values = false, got_valid = false;
    for (const auto& a : arrays) {
      if (a.name == "depth_" + std::to_string(v)) {
        for (std::size_t i = 0; i < a.values.size(); ++i) d.values[i] = a.values[i];
        got_values = true;
      }
      if (a.name == "valid_" + std::to_string(v)) {
        for (std::size_t i = 0; i < a.values.size(); ++i) d.validity[i] = a.values[i] != 0;
        got_valid = true;
      }
    }
    if (!got_values || !got_valid)
      throw InputError("depths.ckpt is missing arrays for view " + std::to_string(v));
    sd.depths.push_back(std::move(d));
  }
  return sd;
}

void save_scene_checkpoint(const std::string& path, const SceneState& scene, int width,
                           int height) {
  const std::size_t n = scene.gaussians.size();
  std::vector<CheckpointArray> arrays;
  CheckpointArray mu{"mu", {n, 3}, {}}, q{"q", {n, 4}, {}}, ls{"log_scale", {n, 3}, {}},
      op{"opacity_logit", {n}, {}}, col{"color", {n, 3}, {}};
  for (const auto& g : scene.gaussians) {
    for (int k = 0; k < 3; ++k) mu.values.push_back(g.mu[k]);
    q.values.insert(q.values.end(), {g.q.w, g.q.x, g.q.y, g.q.z});
    for (int k = 0; k < 3; ++k) ls.values.push_back(g.log_scale[k]);
    op.values.push_back(g.opacity_logit);
    for (int k = 0; k < 3; ++k) col.values.push_back(g.color[k]);
  }
  const auto& dp = scene.deformation.params();
  arrays = {std::move(mu), std::move(q), std::move(ls), std::move(op), std::move(col),
            {"deformation", {dp.size()}, std::vector<double>(dp.begin(), dp.end())}};
  save_checkpoint(path, arrays,
                  {{"f", scene.deformation.frames()}, {"width", width}, {"height", height},
                   {"extent", scene.extent}});
}

SceneState load_scene_checkpoint(const std::string& path, int* width = nullptr,
                                 int* height = nullptr) {
  json meta;
  const auto arrays = load_checkpoint(path, &meta);
  auto find = [&](const std::string& name) -> const CheckpointArray& {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw InputError("scene checkpoint is missing array " + name);
  };
  SceneState scene(meta.at("f"), 0);
  const auto& mu = find("mu");
  const std::size_t n = mu.shape.at(0);
  const auto& q = find("q");
  const auto& ls = find("log_scale");
  const auto& op = find("opacity_logit");
  const auto& col = find("color");
  for (std::size_t i = 0; i < n; ++i) {
    Gaussian4D g;
    g.mu = {mu.values[3 * i], mu.values[3 * i + 1], mu.values[3 * i + 2]};
    g.q = {q.values[4 * i], q.values[4 * i + 1], q.values[4 * i + 2], q.values[4 * i + 3]};
    g.log_scale = {ls.values[3 * i], ls.values[3 * i + 1], ls.values[3 * i + 2]};
    g.opacity_logit = op.values[i];
    g.color = {col.values[3 * i], col.values[3 * i + 1], col.values[3 * i + 2]};
    scene.gaussians.push_back(g);
  }
  const auto& dp = find("deformation");
  if (dp.values.size() != scene.deformation.params().size())
    throw InputError("scene checkpoint deformation size mismatch");
  for (std::size_t i = 0; i < dp.values.size(); ++i)
    scene.deformation.params()[i] = dp.values[i];
  scene.extent = meta.value("extent", 1.0);
  scene.reset_accumulators();
  if (width) *width = meta.at("width");
  if (height) *height = meta.at("height");
  return scene;
}

// --- fit-4dgs --------------------------------------------------------------

void cmd_fit_4dgs(const std::string& scene_dir, const std::string& init, int iters,
                  const std::string& weights_path, const std::string& model_path,
                  std::uint64_t seed, const std::string& out) {
  const SceneDir sd = load_scene_dir(scene_dir);
  const int f = sd.meta.at("config").at("f");
  const int width = sd.cams[0].width, height = sd.cams[0].height;

  SceneState scene(f, seed);
  if (init == "depth") {
    std::vector<Image> f0;
    for (const auto& seq : sd.videos) f0.push_back(seq[0]);
    scene = init_from_depth(f0, sd.depths, sd.cams, f, 0.08, seed);
  } else if (init == "random") {
    Rng rng(seed);
    for (int i = 0; i < 500; ++i) {
      Gaussian4D g;
      g.mu = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      g.log_scale = {std::log(0.08), std::log(0.08), std::log(0.08)};
      g.opacity_logit = logit(0.5);
      g.color = {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
      scene.gaussians.push_back(g);
    }
    scene.reset_accumulators();
    scene.compute_extent();
  } else {
    throw InputError("fit-4dgs: --init must be depth or random");
  }

  OptimizeConfig cfg;
  cfg.iters = iters;
  if (!weights_path.empty()) cfg.weights = weights_from_json(load_json_file(weights_path));

  FmdOracle oracle = nullptr;
  std::unique_ptr<SceneVelocityModel> svm;
  std::unique_ptr<SceneBundle> bundle;
  if (!model_path.empty()) {
    // FMD conditioning renders the generating scene, so the scene dir must
    // carry its synthesis provenance.
    const std::uint64_t scene_seed = sd.meta.at("seed");
    bundle = std::make_unique<SceneBundle>(
        synth_scene(scene_seed, synth_config_from_json(sd.meta.at("config"))));
    json meta;
    const auto arrays = load_checkpoint(model_path, &meta);
    FmdSetup setup;
    if (meta.contains("pool_factor")) setup.pool_factor = meta["pool_factor"];
    svm = std::make_unique<SceneVelocityModel>(*bundle, setup, seed);
    if (arrays.size() != 1 || arrays[0].values.size() != svm->model().params.data.size())
      throw InputError("fit-4dgs: model checkpoint does not match the expected architecture");
    for (std::size_t i = 0; i < arrays[0].values.size(); ++i)
      svm->model().params.data[i] = arrays[0].values[i];
    oracle = svm->oracle();
  } else {
    cfg.weights.lambda_fmd = 0;
  }

  const Trajectory traj = interpolate_trajectory(sd.cams, 120);
  const auto stats = optimize(scene, sd.videos, sd.cams, traj, cfg, seed, oracle);
  save_scene_checkpoint(out, scene, width, height);
  std::printf("fit-4dgs: %d iters, %zu gaussians, final loss %.5f -> %s\n", iters,
              scene.gaussians.size(), stats.losses.empty() ? 0.0 : stats.losses.back(),
              out.c_str());
}

// --- render ----------------------------------------------------------------

void cmd_render(const std::string& scene_path, const std::string& trajectory_path,
                const std::string& timestamps, const std::string& out_dir,
                const std::string& format) {
  int width = 0, height = 0;
  SceneState scene = load_scene_checkpoint(scene_path, &width, &height);
  const auto cams = cameras_from_json(load_json_file(trajectory_path));

  std::vector<int> ts;
  std::stringstream ss(timestamps);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      ts.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw InputError("render: bad timestamp '" + tok + "'");
    }
    if (ts.back() < 1 || ts.back() > scene.deformation.frames())
      throw InputError("render: timestamp out of range [1," +
                       std::to_string(scene.deformation.frames()) + "]");
  }
  if (ts.empty()) throw InputError("render: --timestamps is empty");

  std::vector<Image> frames;
  for (std::size_t i = 0; i < cams.size(); ++i)
    for (int t : ts) frames.push_back(render_scene_frame(scene, t, cams[i], width, height));
  export_frames(frames, out_dir, format);
  std::printf("render: %zu poses x %zu timestamps -> %s\n", cams.size(), ts.size(),
              out_dir.c_str());
}

// --- metrics ---------------------------------------------------------------

Image read_frame(const fs::path& p) {
  if (p.extension() == ".ppm") return read_ppm(p.string());
  if (p.extension() == ".png") return read_png(p.string());
  throw InputError("metrics: unsupported frame format " + p.string());
}

void cmd_metrics(const std::string& ref_dir, const std::string& test_dir,
                 const std::string& out) {
  std::vector<fs::path> refs;
  if (!fs::is_directory(ref_dir)) throw InputError("metrics: not a directory: " + ref_dir);
  for (const auto& e : fs::directory_iterator(ref_dir))
    if (e.path().extension() == ".ppm" || e.path().extension() == ".png")
      refs.push_back(e.path());
  std::sort(refs.begin(), refs.end());
  if (refs.empty()) throw InputError("metrics: no frames in " + ref_dir);

  std::ofstream csv(out);
  if (!csv) throw IoError("cannot open " + out);
  csv << "view_id,psnr_db,ssim,wall_seconds\n";
  csv.precision(17);
  for (const auto& rp : refs) {
    const fs::path tp = fs::path(test_dir) / rp.filename();
    if (!fs::exists(tp)) throw InputError("metrics: missing counterpart " + tp.string());
    const auto t0 = std::chrono::steady_clock::now();
    const Image a = read_frame(rp), b = read_frame(tp);
    const real p = psnr(a, b), s = ssim(a, b);
    const auto t1 = std::chrono::steady_clock::now();
    csv << rp.stem().string() << "," << p << "," << s << ","
        << std::chrono::duration<real>(t1 - t0).count() << "\n";
  }
  std::printf("metrics: %zu frame pairs -> %s\n", refs.size(), out.c_str());
}

// --- bench -----------------------------------------------------------------

void cmd_bench(std::uint64_t seed, const json& config, const std::string& out_dir) {
  BenchConfig cfg;
  if (config.contains("schema_version") && config["schema_version"] != cfg.schema_version)
    throw InputError("unsupported schema_version in config");
  if (config.contains("scene")) cfg.scene = synth_config_from_json(config["scene"]);
  if (config.contains("iters")) cfg.fit.iters = config["iters"];
  if (config.contains("weights")) cfg.fit.weights = weights_from_json(config["weights"]);
  if (config.contains("use_fmd")) cfg.use_fmd = config["use_fmd"];
  if (config.contains("ablate_fmd")) cfg.ablate_fmd = config["ablate_fmd"];
  if (config.contains("fmd_train_steps")) cfg.fmd.train_steps = config["fmd_train_steps"];
  if (config.contains("held_out")) cfg.held_out = config["held_out"];
  if (config.contains("init_voxel")) cfg.init_voxel = config["init_voxel"];

  fs::create_directories(out_dir);
  const BenchmarkResult result = run_benchmark(seed, cfg);

  std::ofstream csv(fs::path(out_dir) / "metrics.csv");
  csv << metrics_csv(result.without_fmd);
  json report = {{"schema_version", 1}, {"seed", seed},
                 {"without_fmd", metrics_json(result.without_fmd)}};
  if (result.has_fmd) {
    std::ofstream fcsv(fs::path(out_dir) / "metrics_fmd.csv");
    fcsv << metrics_csv(result.with_fmd);
    report["with_fmd"] = metrics_json(result.with_fmd);
  }
  write_json_file((fs::path(out_dir) / "report.json").string(), report);

  // Deterministic artifacts: re-render the evaluated held-out frames.
  const SceneBundle bundle = synth_scene(seed, cfg.scene);
  const auto held = held_out_poses(bundle, cfg.held_out);
  std::vector<Image> gt_frames;
  const int mid_t = (cfg.scene.f + 1) / 2;
  for (const auto& pose : held) gt_frames.push_back(render_truth(bundle, mid_t, pose));
  export_frames(gt_frames, (fs::path(out_dir) / "frames_gt").string(), "ppm");
  OptimizeConfig no_fmd = cfg.fit;
  no_fmd.weights.lambda_fmd = 0;
  SceneState scene = fit_scene(bundle, no_fmd, seed, nullptr, cfg.init_voxel);
  std::vector<Image> pred_frames;
  for (const auto& pose : held)
    pred_frames.push_back(
        render_scene_frame(scene, mid_t, pose, cfg.scene.width, cfg.scene.height));
  export_frames(pred_frames, (fs::path(out_dir) / "frames").string(), "ppm");

  std::printf("bench: held-out mean psnr %.3f dB ssim %.4f -> %s\n",
              result.without_fmd.mean_psnr, result.without_fmd.mean_ssim, out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale 4D reconstruction toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "JSON config file")->configurable(false);
  app.add_option("--seed", seed, "RNG seed");

  auto* synth = app.add_subcommand("synth-scene", "generate a synthetic multi-view scene");
  std::string synth_out = "scene";
  std::string synth_format = "ppm";
  synth->add_option("--out-dir", synth_out, "output directory");
  synth->add_option("--format", synth_format, "frame format (ppm|png)");

  auto* mask = app.add_subcommand("build-mask", "emit the fused attention pair mask");
  int mask_views = 4, mask_frames = 2, mask_spatial = 1;
  std::string mask_out = "mask.pbm";
  mask->add_option("--views", mask_views, "number of views");
  mask->add_option("--frames", mask_frames, "frames per half");
  mask->add_option("--spatial", mask_spatial, "spatial tokens per (view,time)");
  mask->add_option("--out", mask_out, "PBM output path");

  auto* flow = app.add_subcommand("train-flow", "train a toy rectified-flow field");
  std::string flow_dataset = "mixture", flow_out = "flow.ckpt";
  int flow_epochs = 2000;
  flow->add_option("--dataset", flow_dataset, "point|gauss|mixture");
  flow->add_option("--epochs", flow_epochs, "training steps");
  flow->add_option("--out", flow_out, "checkpoint path");

  auto* fit = app.add_subcommand("fit-4dgs", "fit a 4D gaussian scene to a scene dir");
  std::string fit_scene_dir, fit_init = "depth", fit_weights, fit_model, fit_out = "scene.ckpt";
  int fit_iters = 2000;
  fit->add_option("--scene-dir", fit_scene_dir, "scene directory")->required();
  fit->add_option("--init", fit_init, "depth|random");
  fit->add_option("--iters", fit_iters, "optimization iterations");
  fit->add_option("--weights", fit_weights, "LossWeights JSON file");
  fit->add_option("--model", fit_model, "velocity model checkpoint for FMD");
  fit->add_option("--out", fit_out, "scene checkpoint path");

  auto* render = app.add_subcommand("render", "render a fitted scene along a trajectory");
  std::string r_scene, r_traj, r_ts = "1", r_out = "renders", r_format = "ppm";
  render->add_option("--scene", r_scene, "scene checkpoint")->required();
  render->add_option("--trajectory", r_traj, "camera JSON file")->required();
  render->add_option("--timestamps", r_ts, "comma-separated timestamps (1-based)");
  render->add_option("--out-dir", r_out, "output directory");
  render->add_option("--format", r_format, "frame format (ppm|png)");

  auto* metrics = app.add_subcommand("metrics", "PSNR/SSIM between two frame directories");
  std::string m_ref, m_test, m_out = "metrics.csv";
  metrics->add_option("--ref-dir", m_ref, "reference frames")->required();
  metrics->add_option("--test-dir", m_test, "frames under test")->required();
  metrics->add_option("--out", m_out, "CSV output path");

  auto* bench = app.add_subcommand("bench", "run the end-to-end synthetic benchmark");
  std::string b_out = "bench";
  bench->add_option("--out-dir", b_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    json config = json::object();
    if (!config_path.empty()) config = load_json_file(config_path);
    if (synth->parsed()) cmd_synth_scene(seed, config, synth_out, synth_format);
    if (mask->parsed()) cmd_build_mask(mask_views, mask_frames, mask_spatial, mask_out);
    if (flow->parsed()) cmd_train_flow(flow_dataset, flow_epochs, seed, flow_out);
    if (fit->parsed())
      cmd_fit_4dgs(fit_scene_dir, fit_init, fit_iters, fit_weights, fit_model, seed, fit_out);
    if (render->parsed()) cmd_render(r_scene, r_traj, r_ts, r_out, r_format);
    if (metrics->parsed()) cmd_metrics(m_ref, m_test, m_out);
    if (bench->parsed()) cmd_bench(seed, config, b_out);
  } catch (const InputError& e) {
    std::cerr << json{{"error", "input"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << json{{"error", "io"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << json{{"error", "input"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
