#ifndef DIFFMM_RUNTIME_HPP_
#define DIFFMM_RUNTIME_HPP_

namespace diffmm {

/**
 * Keeps large freed blocks in the heap instead of returning them to the OS,
 * so repeated batch-sized allocations do not page-fault on every pass.
 * No-op outside glibc. Call once at program start.
 */
void tune_allocator();

}  // namespace diffmm

#endif  // DIFFMM_RUNTIME_HPP_
