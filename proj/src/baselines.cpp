#include "efi/baselines.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "efi/errors.hpp"
#include "efi/eval.hpp"
#include "efi/parallel.hpp"

namespace efi {

void CSProblem::validate() const {
  if (A.rows() <= 0 || A.cols() <= 0) throw InputError("CSProblem: empty matrix");
  if (A.rows() >= A.cols()) throw InputError("CSProblem: need m < n");
  if (y.size() != A.rows()) throw InputError("CSProblem: y length != rows of A");
  if (lambda_l1 <= 0.0) throw InputError("CSProblem: lambda_l1 must be positive");
  if (max_iterations <= 0) throw InputError("CSProblem: max_iterations must be positive");
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

Eigen::MatrixXd gaussian_sensing_matrix(int m, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd a(m, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < m; ++i) a(i, j) = gauss(rng);
    const double norm = a.col(j).norm();
    if (norm > 0) a.col(j) /= norm;
  }
  return a;
}

double lasso_objective(const CSProblem& problem, const Eigen::VectorXd& x) {
  const double fit = 0.5 * (problem.y - problem.A * x).squaredNorm();
  return fit + problem.lambda_l1 * x.lpNorm<1>();
}

namespace {

// Largest eigenvalue of A^T A via power iteration on x -> A^T(Ax).
double lipschitz_constant(const Eigen::MatrixXd& a) {
  std::mt19937_64 rng(0xC0FFEE);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd v(a.cols());
  for (int i = 0; i < v.size(); ++i) v(i) = gauss(rng);
  v.normalize();
  double eig = 1.0;
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd w = a.transpose() * (a * v);
    const double norm = w.norm();
    if (norm == 0.0) return 1.0;
    eig = norm;
    v = w / norm;
  }
  return eig;
}

}  // namespace

IstaResult ista_solve(const CSProblem& problem) {
  problem.validate();
  const double big_l = std::max(lipschitz_constant(problem.A), 1e-12);
  const double step_thresh = problem.lambda_l1 / big_l;

  IstaResult r;
  r.x = Eigen::VectorXd::Zero(problem.A.cols());
  double prev_obj = lasso_objective(problem, r.x);
  for (int it = 1; it <= problem.max_iterations; ++it) {
    const Eigen::VectorXd residual = problem.y - problem.A * r.x;
    const Eigen::VectorXd grad_step = r.x + (problem.A.transpose() * residual) / big_l;
    for (int i = 0; i < r.x.size(); ++i) r.x(i) = soft_threshold(grad_step(i), step_thresh);
    const double obj = lasso_objective(problem, r.x);
    r.iterations = it;
    if (prev_obj - obj < problem.tolerance) {
      r.objective = obj;
      r.converged = true;
      return r;
    }
    prev_obj = obj;
  }
  r.objective = prev_obj;
  r.converged = false;
  return r;
}

namespace {

// Orthonormal DCT-II basis as columns.
Eigen::MatrixXd dct_basis(int n) {
  Eigen::MatrixXd psi(n, n);
  const double pi = std::numbers::pi;
  for (int k = 0; k < n; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i) psi(i, k) = scale * std::cos(pi * (i + 0.5) * k / n);
  }
  return psi;
}

}  // namespace

CsFrameResult cs_compress_reconstruct(const CSIFrame& frame, const CsFrameConfig& cfg) {
  if (!(cfg.rate > 0.0 && cfg.rate < 1.0)) throw InputError("cs rate must be in (0,1)");
  const int pairs = frame.amplitude.dim(0);
  const int subs = frame.amplitude.dim(1);
  const int steps = frame.amplitude.dim(2);
  const int n = pairs * subs;
  const int m = std::max(1, static_cast<int>(std::lround(cfg.rate * n)));
  if (m >= n) throw InputError("cs rate leaves no compression");

  const Eigen::MatrixXd a = gaussian_sensing_matrix(m, n, cfg.seed);
  Eigen::MatrixXd psi;
  Eigen::MatrixXd a_eff = a;
  if (cfg.basis == SparsityBasis::dct) {
    psi = dct_basis(n);
    a_eff = a * psi;
  }

  CsFrameResult result;
  result.reconstruction = Tensor(frame.amplitude.shape());
  result.measurements_per_column = m;
  result.column_length = n;
  result.rate = static_cast<double>(m) / n;

  // columns are independent solves
  parallel_for(steps, 4, [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      Eigen::VectorXd col(n);
      for (int p = 0; p < pairs; ++p) {
        for (int s = 0; s < subs; ++s) {
          col(p * subs + s) = frame.amplitude.at3(p, s, static_cast<int>(t));
        }
      }
      CSProblem problem;
      problem.A = a_eff;
      problem.y = a * col;
      problem.lambda_l1 = cfg.lambda_l1;
      problem.max_iterations = cfg.max_iterations;
      problem.tolerance = cfg.tolerance;
      Eigen::VectorXd solution = ista_solve(problem).x;
      if (cfg.basis == SparsityBasis::dct) solution = psi * solution;
      for (int p = 0; p < pairs; ++p) {
        for (int s = 0; s < subs; ++s) {
          result.reconstruction.at3(p, s, static_cast<int>(t)) =
              static_cast<float>(solution(p * subs + s));
        }
      }
    }
  });

  result.nmse_db = nmse_db({frame.amplitude}, {result.reconstruction});
  return result;
}

}  // namespace efi
