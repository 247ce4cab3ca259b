#pragma once

#include <cstdint>
#include <functional>

namespace efi {

// Worker cap: min(hardware_concurrency, EFI_THREADS if set). Always >= 1.
int max_threads();

// Override the cap programmatically (tests); 0 restores the default.
void set_max_threads(int n);

// Splits [0, n) into contiguous chunks, one worker thread per chunk.
// Callers must only write to slots owned by their own index range, so the
// result is bit-identical for any thread count. Runs inline when the range
// is small or the cap is 1.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace efi
