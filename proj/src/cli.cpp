#include "scmii/cli.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "scmii/pipeline.hpp"
#include "scmii/roles.hpp"

namespace scmii {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int devices = 0;
  std::string fusion;
  double timeout_ms = 0.0;
  std::string listen;
  std::string connect;
  int device_id = 0;
  std::vector<std::string> positional;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* devices_opt = nullptr;
  CLI::Option* fusion_opt = nullptr;
  CLI::Option* timeout_opt = nullptr;
  CLI::Option* listen_opt = nullptr;
  CLI::Option* connect_opt = nullptr;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Pipeline config JSON");
  f.seed_opt = cmd->add_option("--seed", f.seed, "Scene seed");
  f.out_opt = cmd->add_option("--out", f.out, "Output directory");
  f.devices_opt =
      cmd->add_option("--devices", f.devices, "Number of sensors")->check(CLI::Range(1, 64));
  f.fusion_opt = cmd->add_option("--fusion", f.fusion, "Fusion method")
                     ->check(CLI::IsMember({"max", "concat1", "concat3"}));
  f.timeout_opt = cmd->add_option("--timeout-ms", f.timeout_ms, "Frame barrier timeout")
                      ->check(CLI::PositiveNumber);
}

PipelineConfig make_config(const Flags& f) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : load_config(f.config);
  if (f.seed_opt->count() > 0) cfg.scene.seed = f.seed;
  if (f.devices_opt->count() > 0) cfg.scene.devices = f.devices;
  if (f.fusion_opt->count() > 0) cfg.fusion.method = f.fusion;
  if (f.timeout_opt->count() > 0) cfg.timeout_ms = f.timeout_ms;
  if (f.out_opt->count() > 0) cfg.output_dir = f.out;
  if (f.listen_opt != nullptr && f.listen_opt->count() > 0) cfg.transport.listen = f.listen;
  if (f.connect_opt != nullptr && f.connect_opt->count() > 0) cfg.transport.connect = f.connect;
  validate_config(cfg, true);
  return cfg;
}

std::string cloud_name(std::size_t frame, std::size_t device) {
  std::ostringstream os;
  os << "frame" << std::setw(3) << std::setfill('0') << frame << "_device" << device << ".bin";
  return os.str();
}

int cmd_gen_scene(const Flags& f, std::ostream& out) {
  PipelineConfig cfg = make_config(f);
  if (cfg.uses_files()) throw std::runtime_error("gen-scene needs a scene source, not cloud files");
  const Inputs in = load_inputs(cfg);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);

  PipelineConfig files = cfg;
  json truth = json::array();
  for (std::size_t fr = 0; fr < in.frames.size(); ++fr) {
    std::vector<std::string> paths;
    for (std::size_t d = 0; d < in.frames[fr].size(); ++d) {
      const fs::path p = dir / cloud_name(fr, d);
      save_cloud(in.frames[fr][d], p, CloudFormat::kXyzBinary);
      paths.push_back(p.string());
    }
    files.clouds.push_back(paths);
    truth.push_back(truth_to_json(in.truth[fr]));
  }
  files.truth_path = (dir / "truth.json").string();
  write_json(files.truth_path, {{"frames", truth}});
  save_config(files, dir / "config.json");
  out << "wrote " << in.frames.size() << " frame(s) x " << in.devices.size() << " device(s) to "
      << dir.string() << "\n";
  return kExitOk;
}

int cmd_calibrate(const Flags& f, std::ostream& out) {
  const PipelineConfig cfg = make_config(f);
  const Inputs in = load_inputs(cfg);
  const Calibration calib = calibrate_inputs(cfg, in);
  const fs::path path = fs::path(cfg.output_dir) / "calibration.json";
  write_json(path, calib.to_json());
  for (const auto& [device, t] : calib.transforms) {
    const Pose6DoF p = to_pose(t);
    out << "device " << device << " -> " << calib.reference_device << ": t=(" << p.tx << ", "
        << p.ty << ", " << p.tz << ") rpy=(" << p.roll << ", " << p.pitch << ", " << p.yaw << ")\n";
  }
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_run(const Flags& f, std::ostream& out) {
  const PipelineConfig cfg = make_config(f);
  if (cfg.transport.kind != "simulated") {
    throw std::runtime_error("run uses simulated links; use serve and edge for sockets");
  }
  const Inputs in = load_inputs(cfg);
  const Calibration calib = resolve_calibration(cfg, in);
  NetworkSpec spec;
  Weights weights;
  build_network(cfg, &spec, &weights);
  const FusionConfig fusion = build_fusion(cfg, spec, in.devices);

  SimulationOptions opts;
  opts.timeout_ms = cfg.timeout_ms;
  opts.frame_period_ms = cfg.frame_period_ms;
  opts.baseline_colocated = cfg.baseline_colocated;
  const SimulationResult sim =
      simulate_pipeline(in.frames, calib, spec, weights, fusion, cfg.link, cfg.cost, opts);

  const fs::path dir = cfg.output_dir;
  write_json(dir / "detections.json", detections_to_json(sim.detections, sim.complete));
  write_json(dir / "timing.json", sim.timing.to_json());
  write_text(dir / "timing.txt", sim.timing.to_table());
  write_text(dir / "timing.csv", sim.timing.to_csv());

  std::vector<EvalResult> rows;
  if (in.truth.size() == in.frames.size()) {
    rows = comparison_table(cfg, in, calib, spec, weights);
  } else {
    spdlog::warn("no ground truth; the accuracy table is empty");
  }
  const EvalReport report = eval_report(rows, &sim.timing);
  write_json(dir / "report.json", report.json);
  write_text(dir / "report.txt", report.text);
  out << report.text;
  if (sim.corrupted_frames > 0) out << "corrupted frames dropped: " << sim.corrupted_frames << "\n";
  return kExitOk;
}

int cmd_serve(const Flags& f, std::ostream& out) {
  const PipelineConfig cfg = make_config(f);
  const Inputs in = load_inputs(cfg);
  const Calibration calib = resolve_calibration(cfg, in);
  NetworkSpec spec;
  Weights weights;
  build_network(cfg, &spec, &weights);
  const FusionConfig fusion = build_fusion(cfg, spec, in.devices);

  TcpListener listener(cfg.transport.listen);
  out << "listening on port " << listener.port() << std::endl;
  const ServerRoleResult r =
      run_server_role(listener, calib, fusion, spec, weights, cfg.timeout_ms);

  std::vector<std::vector<Detection>> dets(in.frames.size());
  std::vector<bool> complete(in.frames.size(), false);
  for (const auto& [id, d] : r.detections) {
    if (id >= dets.size()) {
      dets.resize(id + 1);
      complete.resize(id + 1, false);
    }
    dets[id] = d;
    complete[id] = r.complete.at(id);
  }
  const fs::path dir = cfg.output_dir;
  write_json(dir / "detections.json", detections_to_json(dets, complete));
  write_json(dir / "timing.json", r.timing.to_json());
  write_text(dir / "timing.txt", r.timing.to_table());
  out << r.timing.to_table();
  out << "duplicates " << r.duplicates << ", late " << r.late_arrivals << ", decode errors "
      << r.decode_errors << "\n";
  return kExitOk;
}

int cmd_edge(const Flags& f, std::ostream& out) {
  const PipelineConfig cfg = make_config(f);
  const Inputs in = load_inputs(cfg);
  if (f.device_id < 0 || static_cast<std::size_t>(f.device_id) >= in.devices.size()) {
    throw std::runtime_error("--device-id " + std::to_string(f.device_id) + " is not in [0, " +
                             std::to_string(in.devices.size()) + ")");
  }
  NetworkSpec spec;
  Weights weights;
  build_network(cfg, &spec, &weights);
  std::vector<PointCloud> clouds;
  for (const auto& frame : in.frames)
    clouds.push_back(frame[static_cast<std::size_t>(f.device_id)]);
  const EdgeRoleResult r = run_edge_role(
      cfg.transport.connect, static_cast<std::uint16_t>(f.device_id), clouds, spec, weights);
  out << "device " << f.device_id << ": sent " << r.frames_sent << " frame(s), " << r.bytes_sent
      << " bytes, received " << r.results_received << " result(s)\n";
  return r.dropped_frames.empty() ? kExitOk : kExitDomainError;
}

int cmd_bench(const Flags& f, std::ostream& out) {
  const PipelineConfig cfg = make_config(f);
  const Inputs in = load_inputs(cfg);
  const Calibration calib = resolve_calibration(cfg, in);
  NetworkSpec spec;
  Weights weights;
  build_network(cfg, &spec, &weights);
  const FusionConfig fusion = build_fusion(cfg, spec, in.devices);

  const std::vector<double> bandwidths = {10.0, 100.0, 1000.0, 10000.0};
  const std::vector<double> server_ratios = {1.0, 5.0, 20.0, 50.0};
  SimulationOptions opts;
  opts.timeout_ms = cfg.timeout_ms;
  opts.frame_period_ms = cfg.frame_period_ms;
  opts.baseline_colocated = cfg.baseline_colocated;

  json rows = json::array();
  std::ostringstream csv;
  csv << "bandwidth_mbps,server_ratio,mean_total_ms,mean_baseline_ms,mean_speedup,max_speedup,"
         "mean_edge_fraction,complete_frames\n";
  std::ostringstream table;
  table << std::setw(10) << "Mbit/s" << std::setw(8) << "ratio" << std::setw(12) << "total ms"
        << std::setw(12) << "base ms" << std::setw(10) << "speedup" << "\n";
  for (double bw : bandwidths) {
    for (double ratio : server_ratios) {
      LinkModel link = cfg.link;
      link.bandwidth_mbps = bw;
      CostModel cost = cfg.cost;
      cost.server_macs_per_s = cost.edge_macs_per_s * ratio;
      const SimulationResult sim =
          simulate_pipeline(in.frames, calib, spec, weights, fusion, link, cost, opts);
      const TimingReport& t = sim.timing;
      std::size_t complete = 0;
      for (bool c : sim.complete) complete += c ? 1 : 0;
      rows.push_back({{"bandwidth_mbps", bw},
                      {"server_ratio", ratio},
                      {"mean_total_ms", t.mean_total_ms()},
                      {"mean_baseline_ms", t.mean_baseline_ms()},
                      {"mean_speedup", t.mean_speedup()},
                      {"max_speedup", t.max_speedup()},
                      {"mean_edge_fraction", t.mean_edge_fraction()},
                      {"complete_frames", complete}});
      csv << bw << ',' << ratio << ',' << t.mean_total_ms() << ',' << t.mean_baseline_ms() << ','
          << t.mean_speedup() << ',' << t.max_speedup() << ',' << t.mean_edge_fraction() << ','
          << complete << "\n";
      table << std::fixed << std::setprecision(1) << std::setw(10) << bw << std::setw(8) << ratio
            << std::setprecision(3) << std::setw(12) << t.mean_total_ms() << std::setw(12)
            << t.mean_baseline_ms() << std::setprecision(2) << std::setw(10) << t.mean_speedup()
            << "\n";
    }
  }
  const fs::path dir = cfg.output_dir;
  write_text(dir / "bench.csv", csv.str());
  write_json(dir / "bench.json", {{"devices", in.devices.size()},
                                  {"frames", in.frames.size()},
                                  {"fusion", cfg.fusion.method},
                                  {"rows", rows}});
  write_text(dir / "bench.txt", table.str());
  out << table.str();
  return kExitOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  if (f.positional.size() != 2) throw CLI::ValidationError("eval needs DETECTIONS and TRUTH paths");
  for (const std::string& p : f.positional) {
    if (!fs::exists(p)) throw std::runtime_error("file not found: " + p);
  }
  const auto dets = detections_from_json(read_json(f.positional[0]));
  const json truth_doc = read_json(f.positional[1]);
  std::vector<EvalFrame> frames;
  const json& truth_frames = truth_doc.at("frames");
  if (truth_frames.size() != dets.size()) {
    throw std::runtime_error("detections have " + std::to_string(dets.size()) +
                             " frame(s) but truth has " + std::to_string(truth_frames.size()));
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const GroundTruth t = truth_from_json(truth_frames[i]);
    frames.push_back({dets[i], boxes_in_frame(t.boxes, t.extrinsics.at(0))});
  }
  const EvalReport report = eval_report({evaluate("detections", frames)}, nullptr);
  if (f.out_opt->count() > 0) {
    write_json(fs::path(f.out) / "eval.json", report.json);
    write_text(fs::path(f.out) / "eval.txt", report.text);
  }
  out << report.text;
  return kExitOk;
}

}  // namespace

void configure_logging_from_env() {
  const char* env = std::getenv("SCMII_LOG");
  if (env == nullptr) {
    spdlog::set_level(spdlog::level::warn);
    return;
  }
  const std::string v = env;
  if (v == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (v == "warn") {
    spdlog::set_level(spdlog::level::warn);
  } else if (v == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (v == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::warn);
    spdlog::warn("ignoring SCMII_LOG={}; expected error, warn, info or debug", v);
  }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Split-computing multi-LiDAR fusion pipeline", "scmii"};
  app.require_subcommand(1);

  Flags flags;
  struct Sub {
    CLI::App* app;
    int (*run)(const Flags&, std::ostream&);
  };
  std::vector<Sub> subs;
  auto add = [&](const char* name, const char* help, int (*fn)(const Flags&, std::ostream&)) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, flags);
    subs.push_back({cmd, fn});
    return cmd;
  };
  add("gen-scene", "Generate synthetic clouds and ground truth", cmd_gen_scene);
  add("calibrate", "Estimate sensor transforms with NDT", cmd_calibrate);
  add("run", "Run the pipeline over simulated links", cmd_run);
  CLI::App* serve = add("serve", "Server role over TCP", cmd_serve);
  Flags* fp = &flags;
  auto listen = serve->add_option("--listen", fp->listen, "HOST:PORT to bind");
  CLI::App* edge = add("edge", "Edge device role over TCP", cmd_edge);
  auto connect = edge->add_option("--connect", fp->connect, "Server HOST:PORT");
  edge->add_option("--device-id", fp->device_id, "Device index")->check(CLI::NonNegativeNumber);
  add("bench", "Sweep link and compute models", cmd_bench);
  CLI::App* eval = add("eval", "Score detections against ground truth", cmd_eval);
  eval->add_option("files", fp->positional, "DETECTIONS TRUTH")->expected(2);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  // Every add_common call overwrote the option pointers, so re-bind them to
  // the subcommand that was parsed.
  for (const Sub& s : subs) {
    if (!s.app->parsed()) continue;
    flags.seed_opt = s.app->get_option("--seed");
    flags.out_opt = s.app->get_option("--out");
    flags.devices_opt = s.app->get_option("--devices");
    flags.fusion_opt = s.app->get_option("--fusion");
    flags.timeout_opt = s.app->get_option("--timeout-ms");
    flags.listen_opt = s.app == serve ? listen : nullptr;
    flags.connect_opt = s.app == edge ? connect : nullptr;
    try {
      return s.run(flags, out);
    } catch (const CLI::ValidationError& e) {
      err << "usage error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << "\n";
      return kExitDomainError;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitDomainError;
    }
  }
  return kExitUsage;
}

}  // namespace scmii
