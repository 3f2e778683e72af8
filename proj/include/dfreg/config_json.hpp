#pragma once

// JSON mapping of the configuration structs and the registration report.
// Missing keys keep their defaults; unknown enum strings are rejected.

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dfreg/energy.hpp"
#include "dfreg/forward.hpp"
#include "dfreg/pipeline.hpp"
#include "dfreg/rigid.hpp"
#include "dfreg/solvers.hpp"

namespace dfreg {

namespace detail {

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void apply_json(const nlohmann::json& j, EnergyConfig& c) {
  if (j.contains("dissimilarity")) {
    const auto s = j.at("dissimilarity").get<std::string>();
    if (s == "l2")
      c.dissimilarity = Dissimilarity::l2;
    else if (s == "l1_regularized")
      c.dissimilarity = Dissimilarity::l1_regularized;
    else
      throw std::invalid_argument("unknown dissimilarity: " + s);
  }
  if (j.contains("local_hessian")) {
    const auto s = j.at("local_hessian").get<std::string>();
    if (s == "weak")
      c.local_hessian = LocalHessian::weak;
    else if (s == "interpolant")
      c.local_hessian = LocalHessian::interpolant;
    else
      throw std::invalid_argument("unknown local_hessian: " + s);
  }
  detail::maybe(j, "delta", c.delta);
  detail::maybe(j, "c1", c.c1);
  detail::maybe(j, "c2", c.c2);
  detail::maybe(j, "c3", c.c3);
  c.validate();
}

inline void apply_json(const nlohmann::json& j, SolverConfig& c) {
  if (j.contains("method")) {
    const auto s = j.at("method").get<std::string>();
    if (s == "ncg_pr")
      c.method = Method::ncg_pr;
    else if (s == "bfgs")
      c.method = Method::bfgs;
    else if (s == "newton_shifted")
      c.method = Method::newton_shifted;
    else
      throw std::invalid_argument("unknown solver method: " + s);
  }
  detail::maybe(j, "max_iters", c.max_iters);
  detail::maybe(j, "grad_tol", c.grad_tol);
  detail::maybe(j, "grad_rtol", c.grad_rtol);
  detail::maybe(j, "energy_rtol", c.energy_rtol);
  detail::maybe(j, "energy_window", c.energy_window);
  detail::maybe(j, "first_step", c.first_step);
  detail::maybe(j, "lanczos_steps", c.lanczos_steps);
  detail::maybe(j, "drop_hl", c.drop_hl);
  detail::maybe(j, "lbfgs_history", c.lbfgs_history);
  if (j.contains("armijo")) {
    const auto& a = j.at("armijo");
    detail::maybe(a, "initial", c.armijo.initial);
    detail::maybe(a, "shrink", c.armijo.shrink);
    detail::maybe(a, "slope", c.armijo.slope);
    detail::maybe(a, "max_shrinks", c.armijo.max_shrinks);
  }
  if (j.contains("bicgstab")) {
    const auto& b = j.at("bicgstab");
    detail::maybe(b, "max_iters", c.bicgstab.max_iters);
    detail::maybe(b, "rel_tol", c.bicgstab.rel_tol);
  }
  c.validate();
}

inline void apply_json(const nlohmann::json& j, KernelSpec& k) {
  if (j.contains("kind")) {
    const auto s = j.at("kind").get<std::string>();
    if (s == "cone")
      k.kind = KernelSpec::Kind::cone;
    else if (s == "delta")
      k.kind = KernelSpec::Kind::delta;
    else
      throw std::invalid_argument("unknown kernel kind: " + s);
  }
  detail::maybe(j, "cone_slope", k.cone_slope);
  detail::maybe(j, "focal_height", k.focal_height);
}

/// Top-level config file: {"energy": {...}, "solver": {...}, "pipeline": {...}, "kernel": {...}}.
inline void apply_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("energy")) apply_json(j.at("energy"), c.energy);
  if (j.contains("solver")) apply_json(j.at("solver"), c.solver);
  if (j.contains("kernel")) apply_json(j.at("kernel"), c.kernel);
  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    detail::maybe(p, "blur_schedule", c.blur_schedule);
    detail::maybe(p, "min_level", c.min_level);
    detail::maybe(p, "prealign", c.prealign);
    detail::maybe(p, "prealign_min_level", c.rigid.min_level);
    if (p.contains("prealign_solver")) apply_json(p.at("prealign_solver"), c.rigid.solver);
  }
  c.validate();
}

inline nlohmann::json to_json(const EnergyConfig& c) {
  return {{"dissimilarity", c.dissimilarity == Dissimilarity::l2 ? "l2" : "l1_regularized"},
          {"local_hessian", c.local_hessian == LocalHessian::weak ? "weak" : "interpolant"},
          {"delta", c.delta},
          {"c1", c.c1},
          {"c2", c.c2},
          {"c3", c.c3}};
}

inline nlohmann::json to_json(const SolverConfig& c) {
  return {{"method", to_string(c.method)},
          {"max_iters", c.max_iters},
          {"grad_tol", c.grad_tol},
          {"grad_rtol", c.grad_rtol},
          {"energy_rtol", c.energy_rtol},
          {"energy_window", c.energy_window},
          {"first_step", c.first_step},
          {"lanczos_steps", c.lanczos_steps},
          {"drop_hl", c.drop_hl},
          {"lbfgs_history", c.lbfgs_history},
          {"armijo",
           {{"initial", c.armijo.initial},
            {"shrink", c.armijo.shrink},
            {"slope", c.armijo.slope},
            {"max_shrinks", c.armijo.max_shrinks}}},
          {"bicgstab", {{"max_iters", c.bicgstab.max_iters}, {"rel_tol", c.bicgstab.rel_tol}}}};
}

inline nlohmann::json to_json(const KernelSpec& k) {
  return {{"kind", k.kind == KernelSpec::Kind::cone ? "cone" : "delta"},
          {"cone_slope", k.cone_slope},
          {"focal_height", k.focal_height}};
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"energy", to_json(c.energy)},
          {"solver", to_json(c.solver)},
          {"kernel", to_json(c.kernel)},
          {"pipeline",
           {{"blur_schedule", c.blur_schedule},
            {"min_level", c.min_level},
            {"prealign", c.prealign},
            {"prealign_min_level", c.rigid.min_level},
            {"prealign_solver", to_json(c.rigid.solver)}}}};
}

inline nlohmann::json to_json(const RigidParams& p) {
  return {{"t", p.t}, {"s", p.s}, {"angles", p.angles}};
}

inline RigidParams rigid_params_from_json(const nlohmann::json& j) {
  RigidParams p;
  detail::maybe(j, "t", p.t);
  detail::maybe(j, "s", p.s);
  detail::maybe(j, "angles", p.angles);
  return p;
}

inline nlohmann::json to_json(const ConstraintDiagnostics& d) {
  return {{"min_det", d.min_det},
          {"det_integral", d.det_integral},
          {"deformed_volume", d.deformed_volume},
          {"volume_gap", d.volume_gap},
          {"max_abs", d.max_abs}};
}

/// Keys: initial_data_term, final_data_term, failed, failure, rigid (or
/// null), diagnostics, stages[{blur, level, iterations, status,
/// initial_data_term, final_data_term, energy_trace, diagnostics, seconds}],
/// prealign_seconds, total_seconds.
inline nlohmann::json to_json(const RegistrationReport& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages)
    stages.push_back({{"blur", s.blur},
                      {"level", s.level},
                      {"iterations", s.iterations},
                      {"status", to_string(s.status)},
                      {"initial_data_term", s.initial_data_term},
                      {"final_data_term", s.final_data_term},
                      {"energy_trace", s.energy_trace},
                      {"diagnostics", to_json(s.diagnostics)},
                      {"seconds", s.seconds}});
  return {{"initial_data_term", r.initial_data_term},
          {"final_data_term", r.final_data_term},
          {"failed", r.failed},
          {"failure", r.failure},
          {"rigid", r.rigid ? to_json(*r.rigid) : nlohmann::json(nullptr)},
          {"diagnostics", to_json(r.diagnostics)},
          {"stages", stages},
          {"prealign_seconds", r.prealign_seconds},
          {"total_seconds", r.total_seconds}};
}

}  // namespace dfreg
