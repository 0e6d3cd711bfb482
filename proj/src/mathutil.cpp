#include "fclab/mathutil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fclab {

void symmetric_eigen(const Tensor& a, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors) {
  if (a.shape().size() != 2 || a.dim(0) != a.dim(1))
    throw std::invalid_argument("symmetric_eigen: matrix must be square");
  const int n = a.dim(0);
  std::vector<double> m(a.data(), a.data() + a.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::abs(m[static_cast<std::size_t>(i) * n + j] -
                   m[static_cast<std::size_t>(j) * n + i]) >
          1e-9 * (1.0 + std::abs(m[static_cast<std::size_t>(i) * n + j])))
        throw std::invalid_argument("symmetric_eigen: matrix is not symmetric");

  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;

  auto at = [&](int r, int c) -> double& { return m[static_cast<std::size_t>(r) * n + c]; };
  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double mkp = at(k, p), mkq = at(k, q);
          at(k, p) = c * mkp - s * mkq;
          at(k, q) = s * mkp + c * mkq;
        }
        for (int k = 0; k < n; ++k) {
          const double mpk = at(p, k), mqk = at(q, k);
          at(p, k) = c * mpk - s * mqk;
          at(q, k) = s * mpk + c * mqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v[static_cast<std::size_t>(k) * n + p];
          const double vkq = v[static_cast<std::size_t>(k) * n + q];
          v[static_cast<std::size_t>(k) * n + p] = c * vkp - s * vkq;
          v[static_cast<std::size_t>(k) * n + q] = s * vkp + c * vkq;
        }
      }
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return at(i, i) > at(j, j); });
  eigenvalues.assign(static_cast<std::size_t>(n), 0.0);
  eigenvectors.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int r = 0; r < n; ++r) {
    eigenvalues[static_cast<std::size_t>(r)] = at(order[static_cast<std::size_t>(r)],
                                                  order[static_cast<std::size_t>(r)]);
    for (int k = 0; k < n; ++k)
      eigenvectors[static_cast<std::size_t>(r) * n + k] =
          v[static_cast<std::size_t>(k) * n + order[static_cast<std::size_t>(r)]];
  }
}

}  // namespace fclab
