#include "mslam/solver.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace mslam {

RobustLoss RobustLoss::huber(double delta) {
  if (!(delta > 0)) throw std::invalid_argument("huber: delta must be > 0");
  return {Kind::Huber, delta};
}

RobustLoss RobustLoss::arctan(double c) {
  if (!(c > 0)) throw std::invalid_argument("arctan: c must be > 0");
  return {Kind::Arctan, c};
}

LossEval apply_robust_loss(const RobustLoss& loss, double s) {
  if (s < 0) throw std::invalid_argument("apply_robust_loss: negative squared norm");
  switch (loss.kind) {
    case RobustLoss::Kind::None:
      return {s, 1.0, 0.0};
    case RobustLoss::Kind::Huber: {
      const double d2 = loss.scale * loss.scale;
      if (s <= d2) return {s, 1.0, 0.0};
      const double sq = std::sqrt(s);
      return {2.0 * loss.scale * sq - d2, loss.scale / sq, -0.5 * loss.scale / (s * sq)};
    }
    case RobustLoss::Kind::Arctan: {
      const double c2 = loss.scale * loss.scale;
      const double u = s / c2;
      const double den = 1.0 + u * u;
      return {c2 * std::atan(u), 1.0 / den, -2.0 * u / (c2 * den * den)};
    }
  }
  return {s, 1.0, 0.0};
}

const char* termination_name(Termination t) {
  switch (t) {
    case Termination::kGradientTolerance: return "gradient_tolerance";
    case Termination::kCostTolerance: return "cost_tolerance";
    case Termination::kMaxIterations: return "max_iterations";
    case Termination::kNoFreeParameters: return "no_free_parameters";
    case Termination::kNoProgress: return "no_progress";
    case Termination::kEvaluationError: return "evaluation_error";
  }
  return "unknown";
}

nlohmann::json SolveReport::to_json() const {
  return nlohmann::json{{"initial_cost", initial_cost},
                        {"final_cost", final_cost},
                        {"iterations", iterations},
                        {"termination", termination_name(termination)},
                        {"accepted_costs", accepted_costs},
                        {"message", message}};
}

// ---------------------------------------------------------------------------
// Problem

BlockId Problem::add_pose_block(const Pose& initial, bool constant) {
  blocks_.push_back({BlockKind::SO3Pose, param_from_pose(initial), constant});
  return BlockId(blocks_.size() - 1);
}

BlockId Problem::add_vector_block(const VecX& initial, bool constant) {
  if (initial.size() == 0) throw std::invalid_argument("add_vector_block: empty block");
  blocks_.push_back({BlockKind::Euclidean, initial, constant});
  return BlockId(blocks_.size() - 1);
}

BlockId Problem::add_scalar_block(double initial, bool constant) {
  VecX v(1);
  v[0] = initial;
  return add_vector_block(v, constant);
}

void Problem::set_constant(BlockId id, bool constant) { blocks_.at(size_t(id)).constant = constant; }
bool Problem::is_constant(BlockId id) const { return blocks_.at(size_t(id)).constant; }

Pose Problem::pose_value(BlockId id) const {
  const Block& b = blocks_.at(size_t(id));
  if (b.kind != BlockKind::SO3Pose) throw std::logic_error("pose_value: not a pose block");
  return pose_from_param(b.value);
}

const VecX& Problem::value(BlockId id) const { return blocks_.at(size_t(id)).value; }
double Problem::scalar_value(BlockId id) const { return blocks_.at(size_t(id)).value[0]; }

void Problem::set_value(BlockId id, const VecX& v) {
  Block& b = blocks_.at(size_t(id));
  if (v.size() != b.value.size()) throw std::invalid_argument("set_value: size mismatch");
  b.value = v;
}

void Problem::set_pose_value(BlockId id, const Pose& p) {
  Block& b = blocks_.at(size_t(id));
  if (b.kind != BlockKind::SO3Pose) throw std::logic_error("set_pose_value: not a pose block");
  b.value = param_from_pose(p);
}

BlockKind Problem::kind(BlockId id) const { return blocks_.at(size_t(id)).kind; }

int Problem::local_size(BlockId id) const {
  return blocks_.at(size_t(id)).kind == BlockKind::SO3Pose ? 6 : int(blocks_.at(size_t(id)).value.size());
}

void Problem::add_residual(std::shared_ptr<const Factor> factor, std::vector<BlockId> blocks,
                           RobustLoss loss, std::string tag) {
  if (!factor) throw std::invalid_argument("add_residual: null factor");
  for (BlockId id : blocks) {
    if (id < 0 || id >= int(blocks_.size()))
      throw std::invalid_argument("add_residual: unknown parameter block");
  }
  if (tag.empty()) tag = "factor#" + std::to_string(residuals_.size());
  residuals_.push_back({std::move(factor), std::move(blocks), loss, std::move(tag)});
}

namespace {

std::vector<const VecX*> gather(const std::vector<VecX>& values,
                                const std::vector<BlockId>& ids) {
  std::vector<const VecX*> out;
  out.reserve(ids.size());
  for (BlockId id : ids) out.push_back(&values[size_t(id)]);
  return out;
}

void apply_step(BlockKind kind, VecX& value, const Eigen::Ref<const VecX>& dx) {
  if (kind == BlockKind::SO3Pose) {
    Pose p = pose_from_param(value);
    value = param_from_pose(p.retract(dx.head<3>(), dx.tail<3>()));
  } else {
    value += dx;
  }
}

}  // namespace

bool Problem::evaluate_cost(double* cost) const {
  double total = 0;
  std::vector<VecX> values;
  values.reserve(blocks_.size());
  for (const Block& b : blocks_) values.push_back(b.value);
  VecX r;
  for (const Residual& res : residuals_) {
    if (!res.factor->evaluate(gather(values, res.blocks), r, nullptr)) return false;
    if (!r.allFinite()) return false;
    total += apply_robust_loss(res.loss, r.squaredNorm()).rho;
  }
  *cost = total;
  return true;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

namespace {

struct Layout {
  std::vector<int> col;  // -1 for constant blocks
  std::vector<int> size;
  int total = 0;
};

struct Workspace {
  MatX H;
  VecX g;
  double cost = 0;
};

// Evaluates total cost at `values`; returns false on evaluation failure.
bool total_cost(const std::vector<VecX>& values,
                const std::vector<std::tuple<const Factor*, const std::vector<BlockId>*, RobustLoss, const std::string*>>& residuals,
                double* cost, const std::string** bad_tag) {
  double total = 0;
  VecX r;
  for (const auto& [factor, ids, loss, tag] : residuals) {
    if (!factor->evaluate(gather(values, *ids), r, nullptr) || !r.allFinite()) {
      if (bad_tag) *bad_tag = tag;
      return false;
    }
    total += apply_robust_loss(loss, r.squaredNorm()).rho;
  }
  *cost = total;
  return true;
}

}  // namespace

SolveReport solve(Problem& problem, const SolveOptions& options) {
  SolveReport report;

  Layout layout;
  layout.col.resize(problem.blocks_.size());
  layout.size.resize(problem.blocks_.size());
  for (size_t i = 0; i < problem.blocks_.size(); ++i) {
    layout.size[i] = problem.local_size(BlockId(i));
    if (problem.blocks_[i].constant) {
      layout.col[i] = -1;
    } else {
      layout.col[i] = layout.total;
      layout.total += layout.size[i];
    }
  }

  std::vector<VecX> values;
  values.reserve(problem.blocks_.size());
  for (const auto& b : problem.blocks_) values.push_back(b.value);

  std::vector<std::tuple<const Factor*, const std::vector<BlockId>*, RobustLoss, const std::string*>> residuals;
  residuals.reserve(problem.residuals_.size());
  for (const auto& r : problem.residuals_)
    residuals.emplace_back(r.factor.get(), &r.blocks, r.loss, &r.tag);

  double cost = 0;
  const std::string* bad = nullptr;
  if (!total_cost(values, residuals, &cost, &bad)) {
    report.termination = Termination::kEvaluationError;
    report.message = "non-finite residual at initial point in " + (bad ? *bad : std::string("?"));
    return report;
  }
  report.initial_cost = report.final_cost = cost;

  if (layout.total == 0) {
    report.termination = Termination::kNoFreeParameters;
    return report;
  }

  const int n = layout.total;
  MatX H(n, n);
  VecX g(n);
  VecX r;
  std::vector<MatX> jacobians;

  double mu = options.initial_damping;
  std::vector<VecX> trial = values;

  while (report.iterations < options.max_iterations) {
    // Linearize at the current point.
    H.setZero();
    g.setZero();
    for (const auto& res : problem.residuals_) {
      jacobians.assign(res.blocks.size(), MatX());
      if (!res.factor->evaluate(gather(values, res.blocks), r, &jacobians)) {
        report.termination = Termination::kEvaluationError;
        report.message = "factor evaluation failed in " + res.tag;
        report.final_cost = cost;
        return report;
      }
      const LossEval le = apply_robust_loss(res.loss, r.squaredNorm());
      const double w = std::sqrt(std::max(le.rho1, 0.0));
      for (size_t i = 0; i < res.blocks.size(); ++i) {
        const int ci = layout.col[size_t(res.blocks[i])];
        if (ci < 0) continue;
        if (!jacobians[i].allFinite()) {
          report.termination = Termination::kEvaluationError;
          report.message = "non-finite jacobian in " + res.tag;
          report.final_cost = cost;
          return report;
        }
        const MatX Ji = w * jacobians[i];
        g.segment(ci, layout.size[size_t(res.blocks[i])]).noalias() += Ji.transpose() * (w * r);
        for (size_t j = i; j < res.blocks.size(); ++j) {
          const int cj = layout.col[size_t(res.blocks[j])];
          if (cj < 0) continue;
          const MatX JiTJj = Ji.transpose() * (w * jacobians[j]);
          H.block(ci, cj, JiTJj.rows(), JiTJj.cols()) += JiTJj;
          if (cj != ci)
            H.block(cj, ci, JiTJj.cols(), JiTJj.rows()) += JiTJj.transpose();
        }
      }
    }

    if (g.lpNorm<Eigen::Infinity>() < options.gradient_tolerance) {
      report.termination = Termination::kGradientTolerance;
      break;
    }

    // Attempt damped steps until one is accepted or damping saturates.
    bool accepted = false;
    VecX diag = H.diagonal().cwiseMax(1e-12);
    while (true) {
      MatX A = H;
      A.diagonal() += mu * diag;
      Eigen::LDLT<MatX> ldlt(A);
      VecX dx;
      bool ok = ldlt.info() == Eigen::Success;
      if (ok) {
        dx = ldlt.solve(-g);
        ok = dx.allFinite();
      }
      double trial_cost = std::numeric_limits<double>::infinity();
      if (ok) {
        trial = values;
        for (size_t i = 0; i < problem.blocks_.size(); ++i) {
          const int ci = layout.col[i];
          if (ci < 0) continue;
          apply_step(problem.blocks_[i].kind, trial[i], dx.segment(ci, layout.size[i]));
        }
        if (!total_cost(trial, residuals, &trial_cost, nullptr))
          trial_cost = std::numeric_limits<double>::infinity();
      }
      if (trial_cost < cost) {
        values = trial;
        const double previous = cost;
        cost = trial_cost;
        report.iterations++;
        report.accepted_costs.push_back(cost);
        mu = std::max(mu * options.damping_decrease, options.min_damping);
        accepted = true;
        if (previous - cost < options.cost_tolerance * previous) {
          report.termination = Termination::kCostTolerance;
          report.iterations = report.iterations;  // terminal accepted step
          //落 through to outer break via flag:
          accepted = true;
          report.final_cost = cost;
          for (size_t i = 0; i < problem.blocks_.size(); ++i) problem.blocks_[i].value = values[i];
          return report;
        }
        break;
      }
      mu *= options.damping_increase;
      if (mu > options.max_damping) break;
    }
    if (!accepted) {
      report.termination = Termination::kNoProgress;
      break;
    }
  }

  if (report.iterations >= options.max_iterations)
    report.termination = Termination::kMaxIterations;
  report.final_cost = cost;
  for (size_t i = 0; i < problem.blocks_.size(); ++i) problem.blocks_[i].value = values[i];
  return report;
}

// ---------------------------------------------------------------------------
// Marginalization

PriorFactor::PriorFactor(std::vector<BlockKind> kinds, std::vector<VecX> lin_points,
                         MatX sqrt_info, VecX offset)
    : kinds_(std::move(kinds)),
      lin_points_(std::move(lin_points)),
      sqrt_info_(std::move(sqrt_info)),
      offset_(std::move(offset)) {
  int col = 0;
  for (size_t i = 0; i < kinds_.size(); ++i) {
    offsets_.push_back(col);
    col += kinds_[i] == BlockKind::SO3Pose ? 6 : int(lin_points_[i].size());
  }
  if (sqrt_info_.cols() != col || sqrt_info_.rows() != offset_.size())
    throw std::invalid_argument("PriorFactor: inconsistent dimensions");
}

bool PriorFactor::evaluate(const std::vector<const VecX*>& params, VecX& residual,
                           std::vector<MatX>* jacobians) const {
  if (params.size() != kinds_.size()) return false;
  VecX dx(sqrt_info_.cols());
  for (size_t i = 0; i < kinds_.size(); ++i) {
    if (kinds_[i] == BlockKind::SO3Pose) {
      const Pose x = pose_from_param(*params[i]);
      const Pose x0 = pose_from_param(lin_points_[i]);
      dx.segment<3>(offsets_[i]) = log_so3(x0.rotation.inverse() * x.rotation);
      dx.segment<3>(offsets_[i] + 3) = x.translation - x0.translation;
    } else {
      dx.segment(offsets_[i], params[i]->size()) = *params[i] - lin_points_[i];
    }
  }
  residual = sqrt_info_ * dx + offset_;
  if (jacobians) {
    for (size_t i = 0; i < kinds_.size(); ++i) {
      const int sz = kinds_[i] == BlockKind::SO3Pose ? 6 : int(lin_points_[i].size());
      (*jacobians)[i] = sqrt_info_.middleCols(offsets_[i], sz);
    }
  }
  return true;
}

MarginalizationResult marginalize(const Problem& problem, const std::vector<BlockId>& marg_ids,
                                  const MarginalizeOptions& options) {
  MarginalizationResult result;
  std::unordered_set<BlockId> marg_set(marg_ids.begin(), marg_ids.end());

  // Residuals touching any marginalized block, and the blocks they involve.
  std::vector<const Problem::Residual*> touching;
  std::vector<BlockId> involved;
  std::unordered_set<BlockId> seen;
  for (const auto& res : problem.residuals_) {
    bool touches = false;
    for (BlockId id : res.blocks) touches |= marg_set.count(id) > 0;
    if (!touches) continue;
    touching.push_back(&res);
    for (BlockId id : res.blocks) {
      if (problem.is_constant(id) && !marg_set.count(id)) continue;
      if (seen.insert(id).second) involved.push_back(id);
    }
  }
  if (touching.empty()) return result;  // nothing to do, empty prior

  // Column layout: marginalized blocks first, kept blocks after.
  std::vector<BlockId> marg_blocks, kept_blocks;
  for (BlockId id : involved)
    (marg_set.count(id) ? marg_blocks : kept_blocks).push_back(id);

  std::vector<int> col(problem.blocks_.size(), -1);
  int m = 0;
  for (BlockId id : marg_blocks) {
    col[size_t(id)] = m;
    m += problem.local_size(id);
  }
  int k = 0;
  for (BlockId id : kept_blocks) {
    col[size_t(id)] = m + k;
    k += problem.local_size(id);
  }

  MatX H = MatX::Zero(m + k, m + k);
  VecX g = VecX::Zero(m + k);
  std::vector<VecX> values;
  values.reserve(problem.blocks_.size());
  for (const auto& b : problem.blocks_) values.push_back(b.value);

  VecX r;
  std::vector<MatX> jacobians;
  for (const Problem::Residual* res : touching) {
    jacobians.assign(res->blocks.size(), MatX());
    if (!res->factor->evaluate(gather(values, res->blocks), r, &jacobians))
      throw std::runtime_error("marginalize: factor evaluation failed in " + res->tag);
    const LossEval le = apply_robust_loss(res->loss, r.squaredNorm());
    const double w = std::sqrt(std::max(le.rho1, 0.0));
    for (size_t i = 0; i < res->blocks.size(); ++i) {
      const int ci = col[size_t(res->blocks[i])];
      if (ci < 0) continue;
      const MatX Ji = w * jacobians[i];
      const int ni = problem.local_size(res->blocks[i]);
      g.segment(ci, ni).noalias() += Ji.transpose() * (w * r);
      for (size_t j = i; j < res->blocks.size(); ++j) {
        const int cj = col[size_t(res->blocks[j])];
        if (cj < 0) continue;
        const MatX JiTJj = Ji.transpose() * (w * jacobians[j]);
        H.block(ci, cj, JiTJj.rows(), JiTJj.cols()) += JiTJj;
        if (cj != ci) H.block(cj, ci, JiTJj.cols(), JiTJj.rows()) += JiTJj.transpose();
      }
    }
  }

  result.kept_blocks = kept_blocks;
  if (kept_blocks.empty()) return result;  // all information dies with the block

  // Schur complement of the marginalized part.
  MatX Htilde;
  VecX gtilde;
  if (m == 0) {
    Htilde = H;
    gtilde = g;
  } else {
    Eigen::SelfAdjointEigenSolver<MatX> es(H.topLeftCorner(m, m));
    const VecX ev = es.eigenvalues();
    const double thresh = std::max(ev.cwiseAbs().maxCoeff(), 1.0) * 1e-12;
    VecX inv = ev.unaryExpr([&](double v) { return v > thresh ? 1.0 / v : 0.0; });
    MatX Hmm_pinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    Htilde = H.bottomRightCorner(k, k) - H.bottomLeftCorner(k, m) * Hmm_pinv * H.topRightCorner(m, k);
    gtilde = g.tail(k) - H.bottomLeftCorner(k, m) * Hmm_pinv * g.head(m);
  }

  std::vector<BlockKind> kinds;
  std::vector<VecX> lin_points;
  for (BlockId id : kept_blocks) {
    kinds.push_back(problem.kind(id));
    lin_points.push_back(problem.value(id));
  }

  Eigen::SelfAdjointEigenSolver<MatX> es(Htilde);
  const VecX ev = es.eigenvalues();
  const double max_ev = std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  if (ev.minCoeff() < -1e-8 * max_ev) {
    // Indefinite reduced information: weak anchor prior instead.
    result.fallback = true;
    MatX sqrt_info = MatX::Identity(k, k) / options.anchor_sigma;
    result.prior = std::make_shared<PriorFactor>(kinds, lin_points, sqrt_info, VecX::Zero(k));
    return result;
  }
  VecX clamped = ev.cwiseMax(0.0);
  VecX sqrt_ev = clamped.cwiseSqrt();
  VecX inv_sqrt_ev =
      clamped.unaryExpr([&](double v) { return v > 1e-12 * max_ev ? 1.0 / std::sqrt(v) : 0.0; });
  MatX A = sqrt_ev.asDiagonal() * es.eigenvectors().transpose();
  VecX b = inv_sqrt_ev.asDiagonal() * es.eigenvectors().transpose() * gtilde;
  result.prior = std::make_shared<PriorFactor>(kinds, lin_points, A, b);
  return result;
}

}  // namespace mslam
