// Build-wide numeric precision and namespace selection.
//
// The library is compiled twice: a float32 production variant and a float64
// variant used by the gradient-check suites. Each variant lives in its own
// inline namespace so both can be linked into one test binary.
#pragma once

#include <cstddef>
#include <cstdint>

#if defined(AFRD_DOUBLE)
#define AFRD_PRECISION_NS f64
#else
#define AFRD_PRECISION_NS f32
#endif

#define AFRD_BEGIN_NAMESPACE \
    namespace afrd {         \
    inline namespace AFRD_PRECISION_NS {
#define AFRD_END_NAMESPACE \
    }                      \
    }

AFRD_BEGIN_NAMESPACE

#if defined(AFRD_DOUBLE)
using real = double;
#else
using real = float;
#endif

AFRD_END_NAMESPACE
