#pragma once

#ifdef _OPENMP
#include <omp.h>
#endif

namespace chunkq {

// Parallelism policy for the batch kernels. Every parallel loop writes only
// to per-item output slots and all reductions happen serially in item order,
// so Serial and Parallel produce bit-identical results; tests compare the
// OpenMP kernels against plain serial reference implementations.
enum class ExecMode { Serial, Parallel };

template <class F>
void for_each_index(int n, ExecMode mode, F&& fn) {
#ifdef _OPENMP
    if (mode == ExecMode::Parallel) {
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
#else
    (void)mode;
#endif
    for (int i = 0; i < n; ++i) fn(i);
}

inline int hardware_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace chunkq
