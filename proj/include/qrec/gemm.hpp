#pragma once

#include "qrec/common.hpp"

namespace qrec::detail {

// All matrices row-major, C is m x n and accumulated into (C += ...).
void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n);  // a[m,k] b[k,n]
void gemm_nt(const Real* a, const Real* b, Real* c, int m, int k, int n);  // a[m,k] b[n,k]
void gemm_tn(const Real* a, const Real* b, Real* c, int m, int k, int n);  // a[k,m] b[k,n]

}  // namespace qrec::detail
