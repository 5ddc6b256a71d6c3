#pragma once

#include <cstdint>

#include "alden/ct_image.hpp"

namespace alden::data {

/// Procedural normal-dose phantom: air background at exactly -1000 HU,
/// overlapping rotated ellipses with tissue-like plateaus (soft tissue
/// 0-80 HU, bone 400-1200 HU) plus low-amplitude smooth texture inside
/// the structures. Deterministic in seed.
CTSlice make_phantom(int height, int width, int num_structures, std::uint64_t seed);

} // namespace alden::data
