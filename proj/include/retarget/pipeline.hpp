#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

#include "retarget/dataio.hpp"
#include "retarget/functional_retarget.hpp"
#include "retarget/hand_align.hpp"
#include "retarget/hand_model.hpp"
#include "retarget/robot_model.hpp"

namespace retarget {

// A failure tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct RefineSummary {
  int frame_index = 0;
  double initial_error = 0.0;  // mean fingertip distance, meters
  double final_error = 0.0;
  std::vector<double> loss_history;
  int solver_iterations = 0;
};

struct PipelineResult {
  RobotTrajectory trajectory;
  SimilarityTransform calibration;
  std::vector<HandAlignment> alignments;
  std::vector<RetargetFrameReport> retarget_reports;
  std::vector<RefineSummary> refinements;
  double hand_scale = 1.0;
  std::vector<StageTiming> timings;
  std::vector<std::string> warnings;
};

namespace detail {

template <class F>
auto run_stage(const char* name, std::vector<StageTiming>& timings, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto record = [&] {
    timings.push_back(
        {name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  };
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record();
    } else {
      auto r = f();
      record();
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

}  // namespace detail

// calibrate -> align -> retarget -> refine (frames with contacts) -> assemble.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  PipelineResult out;
  auto& timings = out.timings;
  out.warnings = cfg.warnings;

  struct Inputs {
    RobotModel model;
    HandTrajectory hands;
    ObservationSet obs;
    TaxonomyWeightTable table;
  };
  const FingerMapping mapping = cfg.finger_mapping ? *cfg.finger_mapping : allegro_finger_mapping();
  Inputs in = detail::run_stage("read_inputs", timings, [&] {
    Inputs r{parse_urdf(read_text_file(cfg.urdf)), read_hand_trajectory(cfg.hand_trajectory), {}, {}};
    mapping.validate(r.model);
    r.hands.validate();
    std::vector<int> idx;
    for (const auto& f : r.hands.frames) idx.push_back(f.frame_index);
    r.obs = read_observations(cfg.observations_dir, idx);
    r.table = cfg.weight_table ? read_weight_table(*cfg.weight_table) : default_taxonomy_table();
    return r;
  });

  CalibrationResult cal = detail::run_stage("calibrate_depth_sequence", timings, [&] {
    return calibrate_depth_sequence(in.obs.frames, in.obs.object_true, in.obs.object_pred,
                                    cfg.calibration.weights, cfg.calibration.with_scale,
                                    in.obs.intrinsics);
  });
  out.calibration = cal.transform;

  out.alignments = detail::run_stage("align_trajectory", timings, [&] {
    return align_trajectory(in.hands, cal.frames, in.obs.intrinsics, cfg.align);
  });

  RetargetTrajectoryResult rt = detail::run_stage("retarget_trajectory", timings, [&] {
    const VectorSpec spec = default_vector_spec(mapping);
    RetargetConfig rc = cfg.retarget;
    if (cfg.hand_scale) {
      rc.s = *cfg.hand_scale;
    } else {
      const HandFrame first = in.hands.frames.front().transformed(out.alignments.front().similarity());
      rc.s = compute_hand_scale(in.model, mapping, first);
    }
    out.hand_scale = rc.s;
    return retarget_trajectory(in.model, in.hands.frames, out.alignments, mapping, spec, cfg.taxonomy,
                               in.table, rc);
  });
  out.retarget_reports = rt.reports;
  out.trajectory = std::move(rt.trajectory);

  if (!in.hands.contacts.empty()) {
    struct Refined {
      int index;
      RefineResult r;
    };
    std::vector<Refined> refined = detail::run_stage("refine_contact", timings, [&] {
      std::vector<Refined> res;
      for (const auto& [index, digits] : in.hands.contacts) {
        if (digits.empty()) continue;
        const auto it = std::find_if(out.trajectory.frames.begin(), out.trajectory.frames.end(),
                                     [&](const RobotFrame& f) { return f.frame_index == index; });
        if (it == out.trajectory.frames.end())
          throw InvalidArgument("contacts reference unknown frame " + std::to_string(index));
        ContactTargets ct;
        ct.lambda_init = cfg.refine.lambda_init;
        ct.alternations = cfg.refine.alternations;
        for (const auto& [d, p] : digits) {
          if (!mapping.has(d)) {
            out.warnings.push_back(std::string("frame ") + std::to_string(index) + ": contact for unmapped " +
                                   to_string(d) + " ignored");
            continue;
          }
          ct.active.insert(d);
          ct.targets[d] = cal.transform.apply(p);
        }
        if (ct.active.empty()) continue;
        ct.validate(mapping);
        const ContactObjective obj(in.model, mapping, ct);
        RefineResult r = refine_contact(in.model, it->q, it->wrist_pose, mapping, ct, cfg.retarget.solver);
        RefineSummary s;
        s.frame_index = index;
        s.initial_error = obj.mean_error(it->q, it->wrist_pose);
        s.final_error = obj.mean_error(r.q, r.wrist);
        s.loss_history = r.loss_history;
        s.solver_iterations = r.solver_iterations;
        for (const auto& w : r.warnings)
          out.warnings.push_back("frame " + std::to_string(index) + ": " + w);
        if (cfg.refine.max_residual && s.final_error > *cfg.refine.max_residual) {
          char buf[160];
          std::snprintf(buf, sizeof buf,
                        "frame %d: mean fingertip error %.6g m exceeds max_residual %.6g m", index,
                        s.final_error, *cfg.refine.max_residual);
          throw RefineFailure(buf);
        }
        out.refinements.push_back(std::move(s));
        res.push_back({index, std::move(r)});
      }
      return res;
    });
    out.trajectory = detail::run_stage("assemble_grasp_plan", timings, [&] {
      RobotTrajectory t = out.trajectory;
      for (const auto& f : refined) t = assemble_grasp_plan(t, f.index, f.r.q, f.r.wrist);
      t.validate(in.model, 1e-9);
      return t;
    });
  } else {
    detail::run_stage("assemble_grasp_plan", timings, [&] { out.trajectory.validate(in.model, 1e-9); });
  }
  return out;
}

inline json pipeline_report_to_json(const PipelineResult& r) {
  json timings = json::object();
  for (const auto& t : r.timings) timings[t.stage] = t.seconds;
  json retarget = json::array();
  for (const auto& f : r.retarget_reports)
    retarget.push_back({{"index", f.frame_index},
                        {"loss", f.loss},
                        {"iterations", f.solve.iterations},
                        {"termination", to_string(f.solve.termination)}});
  json refine = json::array();
  for (const auto& s : r.refinements)
    refine.push_back({{"index", s.frame_index},
                      {"initial_mean_error", s.initial_error},
                      {"final_mean_error", s.final_error},
                      {"loss_history", s.loss_history},
                      {"solver_iterations", s.solver_iterations}});
  const Eigen::Quaterniond q = r.calibration.rotation.quaternion();
  return {{"calibration",
           {{"scale", r.calibration.scale},
            {"quat_wxyz", {q.w(), q.x(), q.y(), q.z()}},
            {"pos", detail::to_json(r.calibration.translation)}}},
          {"alignment", alignments_to_json(r.alignments)["frames"]},
          {"hand_scale", r.hand_scale},
          {"retarget", retarget},
          {"refine", refine},
          {"warnings", r.warnings},
          {"timings_s", timings}};
}

}  // namespace retarget
