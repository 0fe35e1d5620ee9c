#pragma once

// Derivative-free weight search: a (1+1) evolution strategy over binary
// vectors and a (mu/mu_w, lambda) CMA-ES over the probability simplex.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lara/error.hpp"
#include "lara/parallel.hpp"
#include "lara/random.hpp"

namespace lara {

using BitVector = std::vector<std::uint8_t>;

struct TracePoint {
  std::size_t iteration = 0;
  double loss = 0.0;
};

using LossTrace = std::vector<TracePoint>;

// ---------------------------------------------------------------------------
// (1+1)-ES
// ---------------------------------------------------------------------------

/// Flips each bit independently with probability 1/dim. One uniform draw
/// is consumed per bit, in index order.
inline BitVector mutate_bits(const BitVector& w, Rng& rng) {
  if (w.empty()) throw InvariantError("mutate_bits: empty vector");
  const double rate = 1.0 / static_cast<double>(w.size());
  BitVector out(w);
  for (auto& bit : out)
    if (rng.uniform() < rate) bit ^= 1;
  return out;
}

struct EsResult {
  BitVector weights;  // final parent
  double loss = 0.0;
  LossTrace trace;    // parent loss after each iteration; entry 0 is the initial vector
};

using BinaryLoss = std::function<double(const BitVector&)>;

/// Single parent, single offspring per iteration; the offspring replaces
/// the parent when its loss is <= the parent's. The initial parent is
/// Bernoulli(0.5) per bit from `rng`.
inline EsResult one_plus_one_es(std::size_t dim, std::size_t iterations, const BinaryLoss& loss_fn, Rng& rng) {
  if (dim < 1) throw ConfigError("(1+1)-ES needs dim >= 1");
  if (iterations < 1) throw ConfigError("(1+1)-ES needs at least one iteration");

  auto evaluate = [&](const BitVector& w, std::size_t j) {
    try {
      return loss_fn(w);
    } catch (...) {
      detail::rethrow_with_context("iteration " + std::to_string(j));
    }
  };

  EsResult r;
  r.weights.resize(dim);
  for (auto& bit : r.weights) bit = rng.uniform() < 0.5 ? 1 : 0;
  r.loss = evaluate(r.weights, 0);
  r.trace.push_back({0, r.loss});
  for (std::size_t j = 1; j <= iterations; ++j) {
    BitVector child = mutate_bits(r.weights, rng);
    const double child_loss = evaluate(child, j);
    if (child_loss <= r.loss) {
      r.weights = std::move(child);
      r.loss = child_loss;
    }
    r.trace.push_back({j, r.loss});
  }
  return r;
}

// ---------------------------------------------------------------------------
// CMA-ES on the simplex
// ---------------------------------------------------------------------------

/// Numerically stable softmax of a latent vector.
inline std::vector<double> simplex_from_latent(const Eigen::VectorXd& x) {
  const double hi = x.maxCoeff();
  std::vector<double> w(static_cast<std::size_t>(x.size()));
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) sum += (w[static_cast<std::size_t>(i)] = std::exp(x[i] - hi));
  for (auto& v : w) v /= sum;
  return w;
}

inline std::size_t default_population(std::size_t dim) {
  return 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(static_cast<double>(std::max<std::size_t>(dim, 1)))));
}

struct CmaResult {
  std::vector<double> weights;  // softmax of the best latent ever sampled
  Eigen::VectorXd latent;
  double loss = std::numeric_limits<double>::infinity();
  LossTrace trace;               // best-so-far after each generation; entry 0 = initial mean
  std::size_t restarts = 0;
  std::size_t evaluations = 0;
};

using SimplexLoss = std::function<double(const std::vector<double>&)>;

struct CmaOptions {
  std::size_t population = 0;  // 0 -> 4 + floor(3 ln dim)
  double initial_sigma = 1.0;
  ThreadPool* pool = nullptr;  // parallel candidate evaluation
};

/// (mu/mu_w, lambda)-CMA-ES in an unconstrained latent space; each latent
/// point is mapped to the simplex by softmax before evaluation. Non-finite
/// losses rank last. A degenerate covariance triggers one restart from the
/// identity; a second one aborts.
inline CmaResult cma_es(std::size_t dim, std::size_t generations, const SimplexLoss& loss_fn, Rng& rng,
                        CmaOptions opts = {}) {
  if (dim < 1) throw ConfigError("CMA-ES needs dim >= 1");
  if (generations < 1) throw ConfigError("CMA-ES needs at least one generation");

  auto evaluate = [&](const Eigen::VectorXd& x, std::size_t g) {
    double f;
    try {
      f = loss_fn(simplex_from_latent(x));
    } catch (...) {
      detail::rethrow_with_context("generation " + std::to_string(g));
    }
    return std::isnan(f) ? std::numeric_limits<double>::infinity() : f;
  };

  CmaResult r;
  const auto n = static_cast<Eigen::Index>(dim);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  r.latent = mean;
  r.loss = evaluate(mean, 0);
  r.evaluations = 1;
  r.trace.push_back({0, r.loss});
  if (dim == 1) {
    r.weights = {1.0};
    return r;
  }

  const std::size_t lambda = opts.population ? opts.population : default_population(dim);
  if (lambda < 2) throw ConfigError("CMA-ES population must be at least 2");
  const std::size_t mu = lambda / 2;
  Eigen::VectorXd rw(static_cast<Eigen::Index>(mu));
  for (std::size_t i = 0; i < mu; ++i)
    rw[static_cast<Eigen::Index>(i)] = std::log(static_cast<double>(mu) + 0.5) - std::log(static_cast<double>(i + 1));
  rw /= rw.sum();
  const double mueff = 1.0 / rw.squaredNorm();
  const double N = static_cast<double>(dim);
  const double cc = (4.0 + mueff / N) / (N + 4.0 + 2.0 * mueff / N);
  const double cs = (mueff + 2.0) / (N + mueff + 5.0);
  const double c1 = 2.0 / ((N + 1.3) * (N + 1.3) + mueff);
  const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((N + 2.0) * (N + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (N + 1.0)) - 1.0) + cs;
  const double chi_n = std::sqrt(N) * (1.0 - 1.0 / (4.0 * N) + 1.0 / (21.0 * N * N));

  double sigma = opts.initial_sigma;
  Eigen::MatrixXd C, B;
  Eigen::VectorXd D, pc, ps;
  std::size_t since_restart = 0;
  auto reset = [&] {
    C = Eigen::MatrixXd::Identity(n, n);
    B = Eigen::MatrixXd::Identity(n, n);
    D = Eigen::VectorXd::Ones(n);
    pc = Eigen::VectorXd::Zero(n);
    ps = Eigen::VectorXd::Zero(n);
    sigma = opts.initial_sigma;
    since_restart = 0;
  };
  reset();

  std::vector<Eigen::VectorXd> xs(lambda), ys(lambda);
  std::vector<double> fs(lambda);
  std::vector<std::size_t> order(lambda);

  for (std::size_t g = 1; g <= generations; ++g) {
    ++since_restart;
    for (std::size_t k = 0; k < lambda; ++k) {
      Eigen::VectorXd z(n);
      for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
      ys[k] = B * D.asDiagonal() * z;
      xs[k] = mean + sigma * ys[k];
    }
    parallel_for(opts.pool, lambda, [&](std::size_t k) { fs[k] = evaluate(xs[k], g); });
    r.evaluations += lambda;

    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
    if (fs[order[0]] < r.loss) {
      r.loss = fs[order[0]];
      r.latent = xs[order[0]];
    }
    r.trace.push_back({g, r.loss});

    const Eigen::VectorXd old_mean = mean;
    Eigen::VectorXd y_w = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < mu; ++i) y_w += rw[static_cast<Eigen::Index>(i)] * ys[order[i]];
    mean = old_mean + sigma * y_w;

    const Eigen::MatrixXd inv_sqrt_c = B * D.cwiseInverse().asDiagonal() * B.transpose();
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * (inv_sqrt_c * y_w);
    const double ps_norm = ps.norm();
    const double decay = 1.0 - std::pow(1.0 - cs, 2.0 * static_cast<double>(since_restart));
    const bool hsig = ps_norm / std::sqrt(decay) / chi_n < 1.4 + 2.0 / (N + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * y_w;

    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < mu; ++i)
      rank_mu += rw[static_cast<Eigen::Index>(i)] * ys[order[i]] * ys[order[i]].transpose();
    const double keep = 1.0 - c1 - cmu + (hsig ? 0.0 : c1 * cc * (2.0 - cc));
    C = keep * C + c1 * pc * pc.transpose() + cmu * rank_mu;
    sigma *= std::exp((cs / damps) * (ps_norm / chi_n - 1.0));

    C = 0.5 * (C + C.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
    const bool degenerate = eig.info() != Eigen::Success || !C.allFinite() || !std::isfinite(sigma) ||
                            sigma <= 0.0 || eig.eigenvalues().minCoeff() <= 0.0 || !mean.allFinite();
    if (degenerate) {
      if (r.restarts >= 1) throw InvariantError("CMA-ES covariance degenerated twice; aborting");
      warn("CMA-ES covariance degenerated at generation " + std::to_string(g) + "; restarting from identity");
      ++r.restarts;
      mean = r.latent;
      reset();
      continue;
    }
    B = eig.eigenvectors();
    D = eig.eigenvalues().cwiseSqrt();
  }
  r.weights = simplex_from_latent(r.latent);
  return r;
}

}  // namespace lara
