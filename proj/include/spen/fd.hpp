#ifndef SPEN_FD_HPP
#define SPEN_FD_HPP

#include <functional>

#include "spen/tensor.hpp"

namespace spen {

using ScalarFn = std::function<double(const Tensor&)>;

// Central-difference gradient (f(y + eps e_i) - f(y - eps e_i)) / (2 eps),
// one coordinate at a time. The reference oracle for every gradient claim.
Tensor fd_gradient(const ScalarFn& f, const Tensor& y, double step = 1e-5);

// Brute-force dense Hessian from the 4-point second difference of f values.
// Independent of any gradient code; used to cross-check the finite-difference
// Hessian-vector products. O(n^2) evaluations, for small n only.
Tensor fd_hessian(const ScalarFn& f, const Tensor& y, double step = 1e-4);

// Dense [n x n] matrix times flat vector.
Tensor matvec(const Tensor& mat, const Tensor& v);

}  // namespace spen

#endif
