#ifndef MSLAM_SOLVER_HPP
#define MSLAM_SOLVER_HPP

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mslam/geometry.hpp"

namespace mslam {

// ---------------------------------------------------------------------------
// Robust losses

struct RobustLoss {
  enum class Kind { None, Huber, Arctan };
  Kind kind = Kind::None;
  double scale = 1.0;  // delta for Huber, c for arctan

  static RobustLoss none() { return {}; }
  static RobustLoss huber(double delta);
  static RobustLoss arctan(double c);
};

/// rho and its first two derivatives w.r.t. the squared norm s.
struct LossEval {
  double rho;
  double rho1;
  double rho2;
};

LossEval apply_robust_loss(const RobustLoss& loss, double squared_norm);

// ---------------------------------------------------------------------------
// Parameter blocks and factors

enum class BlockKind {
  Euclidean,  // R^n, plus is addition
  SO3Pose,    // [qw qx qy qz tx ty tz], local 6-dof [dtheta, dt]
};

using BlockId = int;

inline Pose pose_from_param(const VecX& v) {
  return Pose(Rotation(v[0], v[1], v[2], v[3]), Vec3(v[4], v[5], v[6]));
}
inline VecX param_from_pose(const Pose& p) {
  VecX v(7);
  auto row = p.to_row();
  for (int i = 0; i < 7; ++i) v[i] = row[size_t(i)];
  return v;
}

/// A residual term. Implementations whiten internally: the returned residual
/// is already scaled by the square-root information of the measurement.
/// Jacobians are w.r.t. the local parameterization of each block.
class Factor {
 public:
  virtual ~Factor() = default;
  virtual int residual_size() const = 0;
  /// Returns false if the residual cannot be evaluated at this point
  /// (e.g. point behind camera); the solver then drops or rejects.
  virtual bool evaluate(const std::vector<const VecX*>& params, VecX& residual,
                        std::vector<MatX>* jacobians) const = 0;
};

// ---------------------------------------------------------------------------
// Problem

struct SolveOptions {
  int max_iterations = 8;
  double gradient_tolerance = 1e-10;  // inf-norm of the gradient
  double cost_tolerance = 1e-6;       // relative change of accepted cost
  double initial_damping = 1e-4;      // 0 gives plain Gauss-Newton steps
  double damping_increase = 10.0;
  double damping_decrease = 0.5;
  double min_damping = 1e-12;
  double max_damping = 1e8;
};

enum class Termination {
  kGradientTolerance,
  kCostTolerance,
  kMaxIterations,
  kNoFreeParameters,
  kNoProgress,        // damping hit its ceiling without an acceptable step
  kEvaluationError,   // non-finite residual/jacobian at the initial point
};

const char* termination_name(Termination t);

struct SolveReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;  // accepted steps
  Termination termination = Termination::kMaxIterations;
  std::string message;
  std::vector<double> accepted_costs;  // cost after each accepted step

  bool usable() const { return termination != Termination::kEvaluationError; }
  nlohmann::json to_json() const;
};

class Problem {
 public:
  BlockId add_pose_block(const Pose& initial, bool constant = false);
  BlockId add_vector_block(const VecX& initial, bool constant = false);
  BlockId add_scalar_block(double initial, bool constant = false);

  void set_constant(BlockId id, bool constant = true);
  bool is_constant(BlockId id) const;

  Pose pose_value(BlockId id) const;
  const VecX& value(BlockId id) const;
  double scalar_value(BlockId id) const;
  void set_value(BlockId id, const VecX& v);
  void set_pose_value(BlockId id, const Pose& p);

  BlockKind kind(BlockId id) const;
  int local_size(BlockId id) const;
  int num_blocks() const { return int(blocks_.size()); }

  void add_residual(std::shared_ptr<const Factor> factor, std::vector<BlockId> blocks,
                    RobustLoss loss = RobustLoss::none(), std::string tag = {});
  int num_residuals() const { return int(residuals_.size()); }

  /// Total robustified cost at the current parameter values.
  /// Returns false if any factor fails to evaluate or is non-finite.
  bool evaluate_cost(double* cost) const;

 private:
  struct Block {
    BlockKind kind;
    VecX value;
    bool constant;
  };
  struct Residual {
    std::shared_ptr<const Factor> factor;
    std::vector<BlockId> blocks;
    RobustLoss loss;
    std::string tag;
  };
  std::vector<Block> blocks_;
  std::vector<Residual> residuals_;

  friend SolveReport solve(Problem&, const SolveOptions&);
  friend class Marginalizer;
};

/// Levenberg-Marquardt with manifold-aware updates. Accepted steps never
/// increase the cost; constant blocks are never touched.
SolveReport solve(Problem& problem, const SolveOptions& options = {});

// ---------------------------------------------------------------------------
// Marginalization

/// Gaussian prior produced by marginalization, linearized once at
/// construction (first-estimates style: the Jacobian never changes).
class PriorFactor : public Factor {
 public:
  PriorFactor(std::vector<BlockKind> kinds, std::vector<VecX> lin_points, MatX sqrt_info,
              VecX offset);

  int residual_size() const override { return int(offset_.size()); }
  bool evaluate(const std::vector<const VecX*>& params, VecX& residual,
                std::vector<MatX>* jacobians) const override;

  const MatX& sqrt_info() const { return sqrt_info_; }
  /// Information matrix sqrt_info^T sqrt_info (for tests).
  MatX information() const { return sqrt_info_.transpose() * sqrt_info_; }

 private:
  std::vector<BlockKind> kinds_;
  std::vector<VecX> lin_points_;
  std::vector<int> offsets_;  // column offset per block
  MatX sqrt_info_;
  VecX offset_;
};

struct MarginalizationResult {
  std::shared_ptr<PriorFactor> prior;  // null when nothing remains coupled
  std::vector<BlockId> kept_blocks;    // blocks the prior references, in order
  bool fallback = false;               // indefinite information, anchor prior used
};

struct MarginalizeOptions {
  double anchor_sigma = 1e3;  // covariance of the fallback anchor prior
};

/// Schur-complement the given blocks out of every residual touching them,
/// linearized at the current values. The returned prior couples exactly the
/// remaining blocks those residuals reference.
MarginalizationResult marginalize(const Problem& problem, const std::vector<BlockId>& marg_ids,
                                  const MarginalizeOptions& options = {});

}  // namespace mslam

#endif
