#pragma once

#include <vector>

#include "fclab/tensor.hpp"

namespace fclab {

// Softmax of row n of an N x C logit matrix.
std::vector<double> softmax_row(const Tensor& logits, int row);

// Argmax over row n; single source of truth for predicted-class decisions.
int argmax_row(const Tensor& logits, int row);

// Eigendecomposition of a symmetric n x n matrix by cyclic Jacobi rotations.
// Returns eigenvalues in descending order; eigenvectors(i*n+j) holds
// component j of the eigenvector for eigenvalue i.
void symmetric_eigen(const Tensor& a, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors);

}  // namespace fclab
