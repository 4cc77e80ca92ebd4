#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "retarget/dataio.hpp"
#include "retarget/pipeline.hpp"
#include "retarget/synth.hpp"

#ifndef RETARGET_DATA_DIR
#define RETARGET_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace retarget;

namespace {

enum ExitCode { kOk = 0, kInputError = 1, kStageFailure = 2 };

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int report_error(const std::string& stage, const std::string& what, int code) {
  std::cerr << "ERROR " << stage << ": " << one_line(what) << "\n";
  return code;
}

int exit_code_for(const Error& e) { return e.is_input_error() ? kInputError : kStageFailure; }

void setup_logging(bool verbose) {
  auto logger = spdlog::stderr_color_mt("retarget");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("RETARGET_LOG")) spdlog::set_level(spdlog::level::from_str(env));
  if (verbose) spdlog::set_level(spdlog::level::debug);
}

PipelineConfig config_or_throw(const std::string& path, bool lenient) {
  PipelineConfig c = load_config(path, lenient);
  for (const auto& w : c.warnings) spdlog::warn("{}", w);
  return c;
}

JointConfig parse_q(const std::string& text, const RobotModel& model) {
  JointConfig q = model.mid_limits();
  if (text.empty()) return q;
  std::stringstream ss(text);
  std::string tok;
  std::vector<double> vals;
  while (std::getline(ss, tok, ',')) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw InvalidArgument("--q: invalid number '" + tok + "'");
    vals.push_back(v);
  }
  if (vals.size() != static_cast<std::size_t>(model.dof()))
    throw InvalidArgument("--q: expected " + std::to_string(model.dof()) + " values, got " +
                          std::to_string(vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) q.values(static_cast<Eigen::Index>(i)) = vals[i];
  return q;
}

// --- synth ----------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  int frames = 10;
  double noise = 0.0;
  double hand_scale = 1.0;
  double depth_scale = 1.0;
  std::string out_dir;
  std::string urdf = std::string(RETARGET_DATA_DIR) + "/allegro_hand.urdf";
};

int cmd_synth(const SynthArgs& a) {
  SynthParams p;
  p.seed = a.seed;
  p.n_frames = a.frames;
  p.noise_sigma = a.noise;
  p.hand_scale = a.hand_scale;
  p.depth_scale = a.depth_scale;
  SynthFixture fx;
  try {
    fx = synth_hand_trajectory(p);
  } catch (const Error& e) {
    return report_error("synth", e.what(), kInputError);
  }
  try {
    const fs::path out(a.out_dir);
    std::error_code ec;
    fs::create_directories(out / "observations", ec);
    if (ec) throw IoError("cannot create '" + (out / "observations").string() + "': " + ec.message());
    write_hand_trajectory(fx.trajectory, out / "trajectory.json");
    ObservationSet set;
    set.intrinsics = fx.intrinsics;
    std::vector<int> idx;
    for (std::size_t i = 0; i < fx.clouds.size(); ++i) {
      set.frames.push_back({fx.clouds[i], fx.depths[i], fx.masks[i]});
      idx.push_back(fx.trajectory.frames[i].frame_index);
    }
    set.object_true = fx.object_true;
    set.object_pred = fx.object_pred;
    write_observations(set, idx, out / "observations");
    write_text_file(out / "robot.urdf", read_text_file(a.urdf));
    const json cfg = {{"urdf", "robot.urdf"},
                      {"hand_trajectory", "trajectory.json"},
                      {"observations_dir", "observations"},
                      {"output", "robot_trajectory.json"},
                      {"taxonomy", "medium-wrap"},
                      {"seed", a.seed}};
    write_text_file(out / "config.json", cfg.dump(2) + "\n");
    spdlog::info("wrote {}-frame fixture to {}", a.frames, out.string());
  } catch (const Error& e) {
    return report_error("synth", e.what(), kInputError);
  }
  return kOk;
}

// --- pipeline -------------------------------------------------------------

int cmd_pipeline(const std::string& config, bool lenient) {
  PipelineConfig cfg;
  try {
    cfg = config_or_throw(config, lenient);
  } catch (const Error& e) {
    return report_error("load_config", e.what(), kInputError);
  }
  try {
    const PipelineResult r = run_pipeline(cfg);
    for (const auto& w : r.warnings) spdlog::warn("{}", w);
    for (const auto& t : r.timings) spdlog::info("{}: {:.3f} s", t.stage, t.seconds);
    for (const auto& a : r.alignments)
      spdlog::debug("frame {}: sigma {:.6f}, icp {:.3e}, depth {:.3e}, {} iterations", a.frame_index,
                    a.sigma, a.icp_residual, a.depth_residual, a.iterations);
    for (const auto& s : r.refinements)
      spdlog::info("refined frame {}: mean fingertip error {:.3e} -> {:.3e} m", s.frame_index,
                   s.initial_error, s.final_error);
    try {
      write_robot_trajectory(r.trajectory, cfg.output);
      write_text_file(cfg.report, pipeline_report_to_json(r).dump(2) + "\n");
    } catch (const Error& e) {
      return report_error("write_output", e.what(), kInputError);
    }
  } catch (const StageError& e) {
    return report_error(e.stage(), e.what(), exit_code_for(e));
  }
  return kOk;
}

// --- single stages --------------------------------------------------------

struct StageInputs {
  PipelineConfig cfg;
  RobotModel model;
  HandTrajectory hands;
  ObservationSet obs;
  FingerMapping mapping;
};

StageInputs load_stage_inputs(const std::string& config, bool lenient, bool need_observations) {
  PipelineConfig cfg = config_or_throw(config, lenient);
  RobotModel model = parse_urdf(read_text_file(cfg.urdf));
  StageInputs s{std::move(cfg), std::move(model), {}, {}, {}};
  s.hands = read_hand_trajectory(s.cfg.hand_trajectory);
  s.hands.validate();
  s.mapping = s.cfg.finger_mapping ? *s.cfg.finger_mapping : allegro_finger_mapping();
  s.mapping.validate(s.model);
  if (need_observations) {
    std::vector<int> idx;
    for (const auto& f : s.hands.frames) idx.push_back(f.frame_index);
    s.obs = read_observations(s.cfg.observations_dir, idx);
  }
  return s;
}

CalibrationResult calibrate(const StageInputs& s) {
  return calibrate_depth_sequence(s.obs.frames, s.obs.object_true, s.obs.object_pred,
                                  s.cfg.calibration.weights, s.cfg.calibration.with_scale,
                                  s.obs.intrinsics);
}

json similarity_to_json(const SimilarityTransform& T) {
  const Eigen::Quaterniond q = T.rotation.quaternion();
  return {{"scale", T.scale},
          {"quat_wxyz", {q.w(), q.x(), q.y(), q.z()}},
          {"pos", {T.translation.x(), T.translation.y(), T.translation.z()}}};
}

void emit(const json& doc, const std::string& out) {
  if (out.empty() || out == "-")
    std::cout << doc.dump(2) << "\n";
  else
    write_text_file(out, doc.dump(2) + "\n");
}

template <class F>
int run_stage_command(const std::string& stage, F&& f) {
  try {
    f();
  } catch (const StageError& e) {
    return report_error(e.stage(), e.what(), exit_code_for(e));
  } catch (const Error& e) {
    return report_error(stage, e.what(), exit_code_for(e));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-to-robot hand trajectory retargeting"};
  app.require_subcommand(1);
  bool verbose = false;
  bool lenient = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging (RETARGET_LOG sets the level otherwise)");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic demonstration fixture");
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--frames", synth.frames, "Number of frames (>= 1)");
  s->add_option("--noise", synth.noise, "Depth noise sigma in meters");
  s->add_option("--hand-scale", synth.hand_scale, "True hand size over estimated hand size");
  s->add_option("--depth-scale", synth.depth_scale, "Observed depth over true depth");
  s->add_option("--urdf", synth.urdf, "Robot description copied into the fixture");
  s->add_option("--out-dir", synth.out_dir, "Output directory")->required();

  std::string config, out, alignments_path, trajectory_path, q_text, urdf_path;
  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", config, "Pipeline configuration JSON")->required();
    c->add_flag("--lenient", lenient, "Warn about unknown configuration keys instead of failing");
  };
  auto* p = app.add_subcommand("pipeline", "Run calibrate, align, retarget, refine and assemble");
  add_config(p);
  auto* cal = app.add_subcommand("calibrate", "Estimate the depth calibration similarity");
  add_config(cal);
  cal->add_option("--out", out, "Output JSON (default stdout)");
  auto* al = app.add_subcommand("align", "Calibrate and align every hand frame");
  add_config(al);
  al->add_option("--out", out, "Output alignment JSON (default stdout)");
  auto* rt = app.add_subcommand("retarget", "Retarget aligned hand frames onto the robot");
  add_config(rt);
  rt->add_option("--alignments", alignments_path, "Alignment JSON from 'align'")->required();
  rt->add_option("--out", out, "Output robot trajectory JSON (default stdout)");
  auto* rf = app.add_subcommand("refine", "Refine frames with contact annotations");
  add_config(rf);
  rf->add_option("--trajectory", trajectory_path, "Robot trajectory JSON from 'retarget'")->required();
  rf->add_option("--out", out, "Output robot trajectory JSON (default stdout)");
  auto* fk = app.add_subcommand("fk", "Forward kinematics of a robot description");
  fk->add_option("--urdf", urdf_path, "Robot description")->required();
  fk->add_option("--q", q_text, "Comma-separated joint values (default mid-limits)");
  fk->add_option("--out", out, "Output JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return report_error("cli", e.what(), kInputError);
  }
  setup_logging(verbose);

  if (*s) {
    if (synth.frames < 1) {
      std::cerr << s->help();
      return report_error("synth", "--frames must be >= 1", kInputError);
    }
    return cmd_synth(synth);
  }
  if (*p) return cmd_pipeline(config, lenient);
  if (*cal)
    return run_stage_command("calibrate", [&] {
      const StageInputs in = load_stage_inputs(config, lenient, true);
      emit(similarity_to_json(calibrate(in).transform), out);
    });
  if (*al)
    return run_stage_command("align", [&] {
      const StageInputs in = load_stage_inputs(config, lenient, true);
      const CalibrationResult c = calibrate(in);
      emit(alignments_to_json(align_trajectory(in.hands, c.frames, in.obs.intrinsics, in.cfg.align)), out);
    });
  if (*rt)
    return run_stage_command("retarget", [&] {
      const StageInputs in = load_stage_inputs(config, lenient, false);
      const auto alignments = alignments_from_json(parse_json(read_text_file(alignments_path), alignments_path));
      const VectorSpec spec = default_vector_spec(in.mapping);
      const TaxonomyWeightTable table =
          in.cfg.weight_table ? read_weight_table(*in.cfg.weight_table) : default_taxonomy_table();
      RetargetConfig rc = in.cfg.retarget;
      if (alignments.size() != in.hands.frames.size())
        throw InvalidArgument("alignment count does not match the hand trajectory");
      rc.s = in.cfg.hand_scale ? *in.cfg.hand_scale
                               : compute_hand_scale(in.model, in.mapping,
                                                    in.hands.frames.front().transformed(
                                                        alignments.front().similarity()));
      const auto r = retarget_trajectory(in.model, in.hands.frames, alignments, in.mapping, spec,
                                         in.cfg.taxonomy, table, rc);
      emit(robot_trajectory_to_json(r.trajectory), out);
    });
  if (*rf)
    return run_stage_command("refine_contact", [&] {
      const StageInputs in = load_stage_inputs(config, lenient, true);
      RobotTrajectory traj = read_robot_trajectory(trajectory_path);
      traj.validate(in.model, 1e-9);
      const SimilarityTransform T = calibrate(in).transform;
      for (const auto& [index, digits] : in.hands.contacts) {
        const auto it = std::find_if(traj.frames.begin(), traj.frames.end(),
                                     [&](const RobotFrame& f) { return f.frame_index == index; });
        if (it == traj.frames.end()) throw InvalidArgument("no robot frame " + std::to_string(index));
        ContactTargets ct;
        ct.lambda_init = in.cfg.refine.lambda_init;
        ct.alternations = in.cfg.refine.alternations;
        for (const auto& [d, pos] : digits)
          if (in.mapping.has(d)) {
            ct.active.insert(d);
            ct.targets[d] = T.apply(pos);
          }
        if (ct.active.empty()) continue;
        ct.validate(in.mapping);
        const RefineResult r = refine_contact(in.model, it->q, it->wrist_pose, in.mapping, ct,
                                              in.cfg.retarget.solver);
        for (const auto& w : r.warnings) spdlog::warn("frame {}: {}", index, w);
        const double err = ContactObjective(in.model, in.mapping, ct).mean_error(r.q, r.wrist);
        if (in.cfg.refine.max_residual && err > *in.cfg.refine.max_residual)
          throw RefineFailure("frame " + std::to_string(index) + ": mean fingertip error " +
                              std::to_string(err) + " m exceeds max_residual");
        traj = assemble_grasp_plan(traj, index, r.q, r.wrist);
      }
      emit(robot_trajectory_to_json(traj), out);
    });
  if (*fk)
    return run_stage_command("fk", [&] {
      const RobotModel model = parse_urdf(read_text_file(urdf_path));
      const JointConfig q = parse_q(q_text, model);
      model.check_config(q, "fk");
      const FrameSet poses = forward_kinematics(model, q);
      json links = json::object();
      for (const auto& l : model.links()) links[l.name] = detail::pose_to_json(poses.at(l.name));
      emit({{"robot", model.name()}, {"links", links}}, out);
    });
  return kInputError;
}
