#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tricalib/geometry.hpp"
#include "tricalib/types.hpp"

namespace tricalib {

enum class BlockKind { kPose, kVelocity, kBias, kInverseDepth, kExtrinsicPose };

inline bool is_pose_kind(BlockKind k) {
  return k == BlockKind::kPose || k == BlockKind::kExtrinsicPose;
}

/// Manifold-valued optimization variable. Pose-kind blocks store
/// [qw,qx,qy,qz,tx,ty,tz] and update on the 6-dof tangent [dtheta, dt]
/// with a right-multiplicative rotation update; everything else is
/// plain Euclidean.
struct StateBlock {
  BlockKind kind = BlockKind::kVelocity;
  VecX value;
  bool frozen = false;

  StateBlock() = default;
  StateBlock(BlockKind k, VecX v, bool f = false)
      : kind(k), value(std::move(v)), frozen(f) {}

  static StateBlock pose(const Pose& p, bool frozen = false) {
    const auto a = p.to_array();
    VecX v(7);
    for (int i = 0; i < 7; ++i) v[i] = a[i];
    return StateBlock(BlockKind::kPose, v, frozen);
  }
  static StateBlock extrinsic(const Pose& p, bool frozen = false) {
    StateBlock b = pose(p, frozen);
    b.kind = BlockKind::kExtrinsicPose;
    return b;
  }

  Pose as_pose() const {
    return Pose(Quat(value[0], value[1], value[2], value[3]),
                Vec3(value[4], value[5], value[6]));
  }
  void set_pose(const Pose& p) {
    const auto a = p.to_array();
    for (int i = 0; i < 7; ++i) value[i] = a[i];
  }

  int ambient_dim() const { return static_cast<int>(value.size()); }
  int tangent_dim() const {
    return is_pose_kind(kind) ? 6 : static_cast<int>(value.size());
  }

  void retract(const VecX& delta) {
    if (is_pose_kind(kind)) {
      Pose p = as_pose();
      p.q = quat_canonical(p.q * so3_exp(delta.head<3>()));
      p.t += delta.tail<3>();
      set_pose(p);
    } else {
      value += delta;
    }
  }

  /// Tangent-space difference of this block's value relative to `ref`
  /// (the delta that retracts ref onto value).
  VecX boxminus(const VecX& ref) const {
    if (is_pose_kind(kind)) {
      const Quat q0(ref[0], ref[1], ref[2], ref[3]);
      const Quat q1(value[0], value[1], value[2], value[3]);
      VecX d(6);
      d.head<3>() = so3_log(q0.conjugate() * q1);
      d.tail<3>() = value.tail<3>() - ref.tail<3>();
      return d;
    }
    return value - ref;
  }
};

struct Loss {
  enum class Kind { kNone, kHuber };
  Kind kind = Kind::kNone;
  double delta = 1.0;

  static Loss none() { return {}; }
  static Loss huber(double d) { return {Kind::kHuber, d}; }

  /// rho(s) and rho'(s) for s = squared residual norm.
  std::pair<double, double> evaluate(double s) const {
    if (kind == Kind::kNone || s <= delta * delta) return {s, 1.0};
    const double r = std::sqrt(s);
    return {2.0 * delta * r - delta * delta, delta / r};
  }
};

/// Residual evaluation callback. `states` holds the attached blocks'
/// ambient values in declaration order. When `jacobians` is non-null it
/// holds one preallocated (dim x tangent_dim) matrix per attached block
/// to be filled (zero-initialized).
using ResidualFn = std::function<void(const std::vector<const VecX*>& states,
                                      VecX& residual,
                                      std::vector<MatX>* jacobians)>;

struct ResidualBlock {
  int dim = 0;
  std::vector<int> blocks;
  ResidualFn eval;
  Loss loss;
};

/// Dense Gaussian prior from marginalization: residual(x) = r0 + J * (x [-] x0)
/// stacked over the attached blocks. J is the square-root information.
struct PriorFactor {
  std::vector<int> blocks;
  std::vector<BlockKind> kinds;
  std::vector<VecX> linearization;
  MatX sqrt_info;  // rows x total tangent dim
  VecX residual0;  // rows

  int rows() const { return static_cast<int>(residual0.size()); }
  bool empty() const { return blocks.empty() || rows() == 0; }
};

struct SolveOptions {
  int max_iterations = 50;
  double cost_tol = 1e-10;   // relative cost decrease
  double step_tol = 1e-12;   // step norm
  double initial_lambda = 1e-4;
  double max_lambda = 1e12;
};

struct SolveReport {
  enum class Termination { kConverged, kMaxIter, kStalled, kNumericalFailure };
  int iterations = 0;  // accepted steps
  double initial_cost = 0.0;
  double final_cost = 0.0;
  Termination termination = Termination::kConverged;
  std::vector<double> cost_trace;

  const char* termination_name() const {
    switch (termination) {
      case Termination::kConverged: return "converged";
      case Termination::kMaxIter: return "max-iter";
      case Termination::kStalled: return "stalled";
      case Termination::kNumericalFailure: return "numerical-failure";
    }
    return "?";
  }
};

class Problem {
 public:
  int add_block(StateBlock b) {
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }
  int add_residual(ResidualBlock r) {
    for (int id : r.blocks) block(id);  // validates
    residuals_.push_back(std::move(r));
    return static_cast<int>(residuals_.size()) - 1;
  }
  void add_prior(PriorFactor p) {
    for (int id : p.blocks) block(id);
    priors_.push_back(std::move(p));
  }

  StateBlock& block(int id) {
    if (id < 0 || id >= static_cast<int>(blocks_.size()))
      throw Error("UnknownBlock", "no state block with id " + std::to_string(id));
    return blocks_[id];
  }
  const StateBlock& block(int id) const {
    return const_cast<Problem*>(this)->block(id);
  }

  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  const std::vector<ResidualBlock>& residuals() const { return residuals_; }
  const std::vector<PriorFactor>& priors() const { return priors_; }

 private:
  std::vector<StateBlock> blocks_;
  std::vector<ResidualBlock> residuals_;
  std::vector<PriorFactor> priors_;
};

namespace detail {

inline void eval_residual(const Problem& p, const ResidualBlock& rb, VecX& r,
                          std::vector<MatX>* jacobians) {
  std::vector<const VecX*> states;
  states.reserve(rb.blocks.size());
  for (int id : rb.blocks) states.push_back(&p.block(id).value);
  r.setZero(rb.dim);
  if (jacobians) {
    jacobians->resize(rb.blocks.size());
    for (size_t i = 0; i < rb.blocks.size(); ++i)
      (*jacobians)[i].setZero(rb.dim, p.block(rb.blocks[i]).tangent_dim());
  }
  rb.eval(states, r, jacobians);
}

/// Prior residual at the current values plus, optionally, its Jacobian
/// w.r.t. each attached block's tangent (exact on-manifold chain rule).
inline void eval_prior(const Problem& p, const PriorFactor& prior, VecX& r,
                       std::vector<MatX>* jacobians) {
  VecX delta(prior.sqrt_info.cols());
  int off = 0;
  for (size_t i = 0; i < prior.blocks.size(); ++i) {
    const StateBlock& b = p.block(prior.blocks[i]);
    const VecX d = b.boxminus(prior.linearization[i]);
    delta.segment(off, d.size()) = d;
    off += static_cast<int>(d.size());
  }
  r = prior.residual0 + prior.sqrt_info * delta;
  if (jacobians) {
    jacobians->resize(prior.blocks.size());
    off = 0;
    for (size_t i = 0; i < prior.blocks.size(); ++i) {
      const StateBlock& b = p.block(prior.blocks[i]);
      const int td = b.tangent_dim();
      MatX cols = prior.sqrt_info.middleCols(off, td);
      if (is_pose_kind(b.kind)) {
        const VecX d = b.boxminus(prior.linearization[i]);
        cols.leftCols<3>() *= so3_right_jacobian_inv(d.head<3>());
      }
      (*jacobians)[i] = cols;
      off += td;
    }
  }
}

/// Schur-reduce the quadratic model 1/2 d^T H d + g^T d onto the trailing
/// keep block; H is ordered [drop | keep]. Throws SingularMarginalBlock when
/// the coupling is inconsistent with the pseudo-inverted drop sub-Hessian.
inline std::pair<MatX, VecX> schur_reduce(const MatX& H, const VecX& g,
                                          int drop_dim) {
  const int n = static_cast<int>(H.rows());
  const int nk = n - drop_dim;
  const MatX Hdd = H.topLeftCorner(drop_dim, drop_dim);
  const MatX Hdk = H.topRightCorner(drop_dim, nk);
  const MatX Hkk = H.bottomRightCorner(nk, nk);
  const VecX gd = g.head(drop_dim);
  const VecX gk = g.tail(nk);

  Eigen::SelfAdjointEigenSolver<MatX> eig(Hdd);
  const VecX evals = eig.eigenvalues();
  const double max_eig = evals.size() ? evals.cwiseAbs().maxCoeff() : 0.0;
  const double tol = 1e-10 * std::max(max_eig, 1.0);
  VecX inv = evals;
  for (int i = 0; i < inv.size(); ++i)
    inv[i] = std::abs(evals[i]) > tol ? 1.0 / evals[i] : 0.0;
  const MatX Hdd_pinv =
      eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();

  // Directions truncated by the pseudo-inverse must carry no coupling,
  // otherwise the reduction is not defined.
  const MatX proj = Hdd * Hdd_pinv;
  const double coupling =
      (Hdk - proj * Hdk).norm() + (gd - proj * gd).norm();
  if (coupling > 1e-6 * (Hdk.norm() + gd.norm() + 1.0))
    throw Error("SingularMarginalBlock",
                "dropped-block sub-Hessian is singular with nonzero coupling");

  MatX Hs = Hkk - Hdk.transpose() * Hdd_pinv * Hdk;
  Hs = 0.5 * (Hs + Hs.transpose());
  const VecX gs = gk - Hdk.transpose() * Hdd_pinv * gd;
  return {Hs, gs};
}

}  // namespace detail

/// Sum of robustified residual costs (0.5 * rho(|r|^2)) over all residual
/// blocks and priors at the problem's current state.
inline double total_cost(const Problem& p) {
  double cost = 0.0;
  VecX r;
  for (const auto& rb : p.residuals()) {
    detail::eval_residual(p, rb, r, nullptr);
    cost += 0.5 * rb.loss.evaluate(r.squaredNorm()).first;
  }
  for (const auto& prior : p.priors()) {
    detail::eval_prior(p, prior, r, nullptr);
    cost += 0.5 * r.squaredNorm();
  }
  return cost;
}

/// Levenberg-Marquardt with multiplicative damping (x10 on reject, /10 on
/// accept). States are updated in place; only accepted steps mutate them.
inline SolveReport solve(Problem& p, const SolveOptions& opts = {}) {
  if (p.residuals().empty() && p.priors().empty())
    throw Error("EmptyProblem", "problem has no residual blocks");

  // Column layout over non-frozen blocks.
  std::vector<int> active;
  std::map<int, int> col_of;
  int n = 0;
  for (int id = 0; id < p.num_blocks(); ++id) {
    if (p.block(id).frozen) continue;
    active.push_back(id);
    col_of[id] = n;
    n += p.block(id).tangent_dim();
  }

  SolveReport report;
  report.initial_cost = total_cost(p);
  report.final_cost = report.initial_cost;
  if (n == 0) {  // nothing to optimize
    report.termination = SolveReport::Termination::kConverged;
    return report;
  }

  double cost = report.initial_cost;
  double lambda = opts.initial_lambda;
  MatX H(n, n);
  VecX g(n), r;
  std::vector<MatX> jac;

  auto linearize = [&]() {
    H.setZero();
    g.setZero();
    auto accumulate = [&](const std::vector<int>& ids, const VecX& res,
                          const std::vector<MatX>& J, double w) {
      const double sw = std::sqrt(w);
      for (size_t a = 0; a < ids.size(); ++a) {
        if (p.block(ids[a]).frozen) continue;
        const int ca = col_of[ids[a]];
        const MatX Ja = sw * J[a];
        g.segment(ca, Ja.cols()) += Ja.transpose() * (sw * res);
        for (size_t b = a; b < ids.size(); ++b) {
          if (p.block(ids[b]).frozen) continue;
          const int cb = col_of[ids[b]];
          const MatX Hab = Ja.transpose() * (sw * J[b]);
          H.block(ca, cb, Hab.rows(), Hab.cols()) += Hab;
          if (cb != ca)
            H.block(cb, ca, Hab.cols(), Hab.rows()) += Hab.transpose();
        }
      }
    };
    for (const auto& rb : p.residuals()) {
      detail::eval_residual(p, rb, r, &jac);
      const double w = rb.loss.evaluate(r.squaredNorm()).second;
      accumulate(rb.blocks, r, jac, w);
    }
    for (const auto& prior : p.priors()) {
      detail::eval_prior(p, prior, r, &jac);
      accumulate(prior.blocks, r, jac, 1.0);
    }
  };

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    linearize();
    if (!H.allFinite() || !g.allFinite()) {
      report.termination = SolveReport::Termination::kNumericalFailure;
      return report;
    }
    const VecX diag = H.diagonal().cwiseMax(1e-12);

    bool accepted = false;
    while (!accepted) {
      MatX Hd = H;
      Hd.diagonal() += lambda * diag;
      const VecX step = Hd.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= 10.0;
        if (lambda > opts.max_lambda) {
          report.termination = SolveReport::Termination::kNumericalFailure;
          return report;
        }
        continue;
      }

      std::vector<VecX> saved;
      saved.reserve(active.size());
      for (int id : active) saved.push_back(p.block(id).value);
      for (int id : active)
        p.block(id).retract(step.segment(col_of[id], p.block(id).tangent_dim()));

      double new_cost = std::numeric_limits<double>::infinity();
      try {
        new_cost = total_cost(p);
      } catch (const std::exception&) {
        // evaluation failed at the trial point: treat as a rejected step
      }

      if (std::isfinite(new_cost) && new_cost < cost) {
        accepted = true;
        lambda = std::max(lambda / 10.0, 1e-15);
        const double decrease = cost - new_cost;
        cost = new_cost;
        report.iterations++;
        report.cost_trace.push_back(cost);
        const double step_norm = step.norm();
        if (decrease <= opts.cost_tol * std::max(cost, 1e-300) ||
            step_norm <= opts.step_tol) {
          report.final_cost = cost;
          report.termination = SolveReport::Termination::kConverged;
          return report;
        }
      } else {
        for (size_t i = 0; i < active.size(); ++i)
          p.block(active[i]).value = saved[i];
        lambda *= 10.0;
        if (lambda > opts.max_lambda) {
          report.final_cost = cost;
          report.termination = SolveReport::Termination::kStalled;
          return report;
        }
      }
    }
  }
  report.final_cost = cost;
  report.termination = SolveReport::Termination::kMaxIter;
  return report;
}

/// Marginalization: linearize the whole problem at its current state and
/// Schur-complement the dropped blocks away. Returns a dense prior over the
/// remaining (non-frozen) blocks that appear in any residual or prior.
inline PriorFactor marginalize(const Problem& p, const std::set<int>& drop_ids) {
  if (drop_ids.empty())
    throw Error("EmptyDropSet", "marginalize requires at least one block");
  for (int id : drop_ids) p.block(id);

  // Involved non-frozen blocks, dropped ones first.
  std::vector<int> involved;
  std::set<int> seen;
  auto touch = [&](int id) {
    if (p.block(id).frozen || seen.count(id)) return;
    seen.insert(id);
    involved.push_back(id);
  };
  for (int id : drop_ids) touch(id);
  std::vector<int> used;
  for (const auto& rb : p.residuals())
    for (int id : rb.blocks) used.push_back(id);
  for (const auto& prior : p.priors())
    for (int id : prior.blocks) used.push_back(id);
  std::sort(used.begin(), used.end());
  for (int id : used)
    if (!drop_ids.count(id)) touch(id);

  std::map<int, int> col_of;
  int n = 0, drop_dim = 0;
  for (int id : involved) {
    col_of[id] = n;
    n += p.block(id).tangent_dim();
    if (drop_ids.count(id)) drop_dim = n;
  }

  MatX H = MatX::Zero(n, n);
  VecX g = VecX::Zero(n);
  VecX r;
  std::vector<MatX> jac;
  auto accumulate = [&](const std::vector<int>& ids, const VecX& res,
                        const std::vector<MatX>& J, double w) {
    const double sw = std::sqrt(w);
    for (size_t a = 0; a < ids.size(); ++a) {
      if (p.block(ids[a]).frozen) continue;
      const int ca = col_of.at(ids[a]);
      const MatX Ja = sw * J[a];
      g.segment(ca, Ja.cols()) += Ja.transpose() * (sw * res);
      for (size_t b = a; b < ids.size(); ++b) {
        if (p.block(ids[b]).frozen) continue;
        const int cb = col_of.at(ids[b]);
        const MatX Hab = Ja.transpose() * (sw * J[b]);
        H.block(ca, cb, Hab.rows(), Hab.cols()) += Hab;
        if (cb != ca) H.block(cb, ca, Hab.cols(), Hab.rows()) += Hab.transpose();
      }
    }
  };
  for (const auto& rb : p.residuals()) {
    detail::eval_residual(p, rb, r, &jac);
    const double w = rb.loss.evaluate(r.squaredNorm()).second;
    accumulate(rb.blocks, r, jac, w);
  }
  for (const auto& prior : p.priors()) {
    detail::eval_prior(p, prior, r, &jac);
    accumulate(prior.blocks, r, jac, 1.0);
  }

  auto [Hs, gs] = detail::schur_reduce(H, g, drop_dim);

  PriorFactor out;
  for (int id : involved)
    if (!drop_ids.count(id)) {
      out.blocks.push_back(id);
      out.kinds.push_back(p.block(id).kind);
      out.linearization.push_back(p.block(id).value);
    }
  if (Hs.rows() == 0) return out;

  Eigen::SelfAdjointEigenSolver<MatX> eig(Hs);
  const VecX evals = eig.eigenvalues();
  const double max_eig = evals.size() ? evals.cwiseAbs().maxCoeff() : 0.0;
  const double tol = 1e-12 * std::max(max_eig, 1.0);
  if (evals.size() && evals.minCoeff() < -1e-6 * std::max(max_eig, 1.0))
    throw Error("SingularMarginalBlock",
                "marginal information is not positive semi-definite");
  std::vector<int> keep;
  for (int i = 0; i < evals.size(); ++i)
    if (evals[i] > tol) keep.push_back(i);
  const int rank = static_cast<int>(keep.size());
  out.sqrt_info.resize(rank, Hs.cols());
  out.residual0.resize(rank);
  for (int k = 0; k < rank; ++k) {
    const double s = std::sqrt(evals[keep[k]]);
    out.sqrt_info.row(k) = s * eig.eigenvectors().col(keep[k]).transpose();
    out.residual0[k] = eig.eigenvectors().col(keep[k]).dot(gs) / s;
  }
  return out;
}

/// Dense information matrix encoded by a prior (J^T J), for diagnostics
/// and tests.
inline MatX prior_information(const PriorFactor& prior) {
  return prior.sqrt_info.transpose() * prior.sqrt_info;
}

/// Maximum relative discrepancy between the analytic Jacobians of one
/// residual block and central finite differences on the tangent space.
inline double check_jacobian(const Problem& p, const ResidualBlock& rb,
                             double eps = 1e-6) {
  if (eps < 1e-9 || eps > 1e-3)
    throw Error("BadEpsilon", "check_jacobian eps must be in [1e-9, 1e-3]");
  VecX r0;
  std::vector<MatX> analytic;
  detail::eval_residual(p, rb, r0, &analytic);

  double worst = 0.0;
  std::vector<VecX> values;
  for (int id : rb.blocks) values.push_back(p.block(id).value);

  for (size_t a = 0; a < rb.blocks.size(); ++a) {
    StateBlock base = p.block(rb.blocks[a]);
    const int td = base.tangent_dim();
    for (int k = 0; k < td; ++k) {
      VecX dplus, dminus;
      auto eval_at = [&](double sign, VecX& out) {
        StateBlock perturbed = base;
        VecX delta = VecX::Zero(td);
        delta[k] = sign * eps;
        perturbed.retract(delta);
        std::vector<const VecX*> states;
        for (size_t i = 0; i < rb.blocks.size(); ++i)
          states.push_back(i == a ? &perturbed.value : &values[i]);
        out.setZero(rb.dim);
        rb.eval(states, out, nullptr);
      };
      eval_at(+1.0, dplus);
      eval_at(-1.0, dminus);
      const VecX numeric = (dplus - dminus) / (2.0 * eps);
      for (int row = 0; row < rb.dim; ++row) {
        const double an = analytic[a](row, k);
        const double nu = numeric[row];
        const double rel =
            std::abs(an - nu) / std::max({1.0, std::abs(an), std::abs(nu)});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

}  // namespace tricalib
