#pragma once

#include <vector>

namespace tkfac {

/// One row of the per-interval training diagnostics stream.
struct MetricsRecord {
    long iteration = 0;
    int epoch = 0;
    double seconds = 0.0;  // cumulative optimizer-step wall clock
    double loss = 0.0;
    double error = 0.0;  // classification error rate or mean squared reconstruction error
    double beta = 1.0;   // fully-connected expansion factor (new damping mode)
    std::vector<double> layer_delta;          // per parametric layer
    std::vector<double> layer_damping_ratio;  // added diagonal / mean diagonal of sqrt(delta)*phi
};

} // namespace tkfac
