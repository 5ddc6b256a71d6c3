#pragma once

#include <cstdint>

#include "alden/ct_image.hpp"

namespace alden::data {

struct DoseSimConfig {
    double dose_fraction = 0.25;          // in (0, 1]
    double photon_count_full_dose = 1e5;  // unattenuated counts per detector cell
    double electronic_noise_sigma = 0.0;  // HU, added after reconstruction
    std::uint64_t seed = 0;

    void validate() const;
};

/// Image-domain low-dose surrogate. Each pixel's HU value is mapped to an
/// attenuation path length mu = (HU + 1000) / 1000, transmitted counts
/// lambda = photon_count_full_dose * dose_fraction * exp(-mu) are resampled
/// as Poisson, and the noisy count is mapped back through the log. The
/// reconstruction noise variance therefore scales as 1/dose_fraction. At
/// dose_fraction == 1 the quantum stage is skipped (the reference image
/// already carries full-dose noise) and only electronic noise is injected,
/// so dose 1.0 with sigma 0 returns the input unchanged.
CTSlice simulate_low_dose(const CTSlice& ndct, const DoseSimConfig& cfg);

} // namespace alden::data
