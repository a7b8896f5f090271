// Dense kernels. Compiled with -ffast-math (see CMakeLists) so the compiler
// may vectorize the reductions; everything else in the library keeps strict
// IEEE semantics. Loop orders are chosen so the hot inner loop walks rows
// contiguously.
#include "qrec/gemm.hpp"

namespace qrec::detail {

void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    Real* ci = c + int64_t(i) * n;
    const Real* ai = a + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const Real aip = ai[p];
      if (aip == 0.0) continue;
      const Real* bp = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* ai = a + int64_t(i) * k;
    Real* ci = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* bj = b + int64_t(j) * k;
      Real acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

void gemm_tn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const Real* ap = a + int64_t(p) * m;
    const Real* bp = b + int64_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const Real api = ap[i];
      if (api == 0.0) continue;
      Real* ci = c + int64_t(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace qrec::detail
