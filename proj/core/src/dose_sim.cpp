#include "alden/dose_sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "alden/rng.hpp"

namespace alden::data {

void DoseSimConfig::validate() const {
    if (!(dose_fraction > 0.0) || dose_fraction > 1.0) {
        throw std::invalid_argument("DoseSimConfig: dose_fraction must lie in (0, 1]");
    }
    if (!(photon_count_full_dose > 0.0)) {
        throw std::invalid_argument("DoseSimConfig: photon_count_full_dose must be > 0");
    }
    if (electronic_noise_sigma < 0.0) {
        throw std::invalid_argument("DoseSimConfig: electronic_noise_sigma must be >= 0");
    }
}

CTSlice simulate_low_dose(const CTSlice& ndct, const DoseSimConfig& cfg) {
    cfg.validate();
    for (double v : ndct.pixels()) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("simulate_low_dose: non-finite input pixel");
        }
    }

    const bool quantum = cfg.dose_fraction < 1.0;
    const bool electronic = cfg.electronic_noise_sigma > 0.0;
    std::vector<double> out(ndct.pixels().begin(), ndct.pixels().end());

    if (quantum || electronic) {
        Rng rng(derive_seed(cfg.seed, 0x646f7365 /* "dose" */));
        const double n0 = cfg.photon_count_full_dose * cfg.dose_fraction;
        for (double& v : out) {
            if (quantum) {
                const double mu = (v + 1000.0) / 1000.0;
                const double lambda = n0 * std::exp(-mu);
                const double counts =
                    std::max<double>(1.0, static_cast<double>(rng.poisson(lambda)));
                const double mu_noisy = -std::log(counts / n0);
                v = mu_noisy * 1000.0 - 1000.0;
            }
            if (electronic) {
                v += cfg.electronic_noise_sigma * rng.normal();
            }
        }
    }
    return CTSlice(ndct.height(), ndct.width(), std::move(out));
}

} // namespace alden::data
