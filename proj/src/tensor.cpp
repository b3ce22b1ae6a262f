#include "tensor.hpp"

#include <algorithm>
#include <cmath>

namespace hpn::nn {

// Loop orders chosen so the inner loop runs over contiguous memory and
// auto-vectorizes. k is the contraction length.
void gemm_acc(const double* a, const double* b, double* c, int n, int k, int m,
              bool trans_a, bool trans_b) {
    if (!trans_a && !trans_b) {
        // A[n,k] * B[k,m]
        for (int i = 0; i < n; ++i) {
            const double* ai = a + static_cast<size_t>(i) * k;
            double* ci = c + static_cast<size_t>(i) * m;
            for (int l = 0; l < k; ++l) {
                const double av = ai[l];
                const double* bl = b + static_cast<size_t>(l) * m;
                for (int j = 0; j < m; ++j) ci[j] += av * bl[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A[n,k] * B[m,k]^T
        for (int i = 0; i < n; ++i) {
            const double* ai = a + static_cast<size_t>(i) * k;
            double* ci = c + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) {
                const double* bj = b + static_cast<size_t>(j) * k;
                double s = 0.0;
                for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
                ci[j] += s;
            }
        }
    } else if (trans_a && !trans_b) {
        // A[k,n]^T * B[k,m]
        for (int l = 0; l < k; ++l) {
            const double* al = a + static_cast<size_t>(l) * n;
            const double* bl = b + static_cast<size_t>(l) * m;
            for (int i = 0; i < n; ++i) {
                const double av = al[i];
                double* ci = c + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) ci[j] += av * bl[j];
            }
        }
    } else {
        // A[k,n]^T * B[m,k]^T (rare)
        for (int i = 0; i < n; ++i) {
            double* ci = c + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) {
                const double* bj = b + static_cast<size_t>(j) * k;
                double s = 0.0;
                for (int l = 0; l < k; ++l) s += a[static_cast<size_t>(l) * n + i] * bj[l];
                ci[j] += s;
            }
        }
    }
}

void softmax_span(const double* x, double* y, int m, int valid) {
    double mx = x[0];
    for (int j = 1; j < valid; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < valid; ++j) {
        y[j] = std::exp(x[j] - mx);
        s += y[j];
    }
    for (int j = 0; j < valid; ++j) y[j] /= s;
    for (int j = valid; j < m; ++j) y[j] = 0.0;
}

}  // namespace hpn::nn
