#pragma once

// Worker-thread budget. TIEKD_THREADS bounds every parallel section in the
// project; the default of 1 keeps runs deterministic.

namespace tiekd {

// Value of TIEKD_THREADS clamped to [1, 256]; 1 when unset or unparsable.
int thread_budget();

}  // namespace tiekd
