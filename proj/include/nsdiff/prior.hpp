#pragma once

#include "nsdiff/core.hpp"

namespace nsdiff {

// Conditional endpoint of the diffusion for one window: mean f(X) and
// variance g(X), both M x D, variance strictly positive.
struct EndpointPrior {
    Matrix mean;
    Matrix variance;
};

}  // namespace nsdiff
