// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "mgd/core.hpp"
#include "mgd/moment_maps.hpp"

namespace mgd {

// Estimates m_{t_k} = E[phi(cos(a_{t_k}) Z + sin(a_{t_k}) X)] on the grid
// t_k = k / n_grid with Monte-Carlo pairs (z_j, x_j), z_j Gaussian and x_j
// drawn from the dataset with replacement. The same pairs are reused across
// all grid times (common random numbers), so the forward differences are
// low-noise estimates of dm_t/dt.
inline MomentPath estimate_moment_path(const Matrix& dataset, const MomentFunction& phi,
                                       Eigen::Index n_grid, Eigen::Index n_mc,
                                       const InterpolantSchedule& sched, const RngContract& rng) {
  const Eigen::Index n_data = dataset.rows();
  const Eigen::Index d = phi.input_dim();
  const Eigen::Index r = phi.output_dim();
  if (n_data < 1) throw DataError("moment path estimation needs a non-empty dataset");
  if (dataset.cols() != d) throw DataError("dataset dimension does not match moment function");
  if (n_grid < 2) throw ConfigError("moment path needs n_grid >= 2");
  if (n_mc < 1) throw ConfigError("moment path needs n_mc >= 1");

  Matrix noise(n_mc, d);
  std::vector<Eigen::Index> picks(static_cast<std::size_t>(n_mc));
  for (Eigen::Index j = 0; j < n_mc; ++j) {
    RngStream zs(rng, StreamPurpose::kMomentPathNoise, static_cast<std::uint64_t>(j));
    zs.fill_normal(noise.row(j).data(), static_cast<std::size_t>(d));
    RngStream xs(rng, StreamPurpose::kMomentPathData, static_cast<std::uint64_t>(j));
    picks[static_cast<std::size_t>(j)] =
        static_cast<Eigen::Index>(xs.uniform_index(static_cast<std::uint64_t>(n_data)));
  }

  MomentPath path;
  path.values.resize(n_grid + 1, r);
  path.diffs.resize(n_grid, r);

  // One task per grid time; the inner Monte-Carlo mean is summed in j-order
  // inside a single task, so the estimate is thread-count independent.
  const std::size_t per_time_cost =
      static_cast<std::size_t>(n_mc) * (phi.unit_cost() + static_cast<std::size_t>(d));
  std::size_t times_per_chunk = chunk_size_for(per_time_cost);
  parallel_chunks(static_cast<std::size_t>(n_grid) + 1, times_per_chunk,
                  [&](std::size_t begin, std::size_t end, std::size_t) {
                    constexpr Eigen::Index kBatch = 512;
                    Matrix mixed(std::min<Eigen::Index>(kBatch, n_mc), d);
                    Matrix phis(mixed.rows(), r);
                    for (std::size_t kk = begin; kk < end; ++kk) {
                      const auto k = static_cast<Eigen::Index>(kk);
                      const double t = static_cast<double>(k) / static_cast<double>(n_grid);
                      const double c = sched.cos_alpha(t);
                      const double s = sched.sin_alpha(t);
                      Vector sum = Vector::Zero(r);
                      for (Eigen::Index j0 = 0; j0 < n_mc; j0 += kBatch) {
                        const Eigen::Index nb = std::min<Eigen::Index>(kBatch, n_mc - j0);
                        for (Eigen::Index b = 0; b < nb; ++b) {
                          const Eigen::Index j = j0 + b;
                          mixed.row(b) = c * noise.row(j) +
                                         s * dataset.row(picks[static_cast<std::size_t>(j)]);
                        }
                        phi.eval_batch(mixed.topRows(nb), phis.topRows(nb));
                        sum += phis.topRows(nb).colwise().sum().transpose();
                      }
                      path.values.row(k) = sum.transpose() / static_cast<double>(n_mc);
                    }
                  });

  const double inv_h = static_cast<double>(n_grid);
  for (Eigen::Index k = 0; k < n_grid; ++k) {
    path.diffs.row(k) = (path.values.row(k + 1) - path.values.row(k)) * inv_h;
  }
  return path;
}

}  // namespace mgd
