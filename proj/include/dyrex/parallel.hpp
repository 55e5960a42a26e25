#pragma once

// Thread-count control shared by the OpenMP kernels. Builds without OpenMP
// compile to the serial paths.

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dyrex::parallel {

// Worker cap used by every parallel region. Defaults to DYREX_THREADS, or 1.
int thread_count();
void set_thread_count(int n);

// Parses DYREX_THREADS; returns 1 when unset or malformed.
int threads_from_env();

inline bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace dyrex::parallel
