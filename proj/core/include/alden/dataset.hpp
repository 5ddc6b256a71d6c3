#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "alden/ct_image.hpp"

namespace alden::data {

/// Raised for any slice-file / manifest problem; the message always names
/// the offending path or sample_id.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PairedSample {
    CTSlice ldct;
    CTSlice ndct;
    std::string sample_id;
};

/// One manifest record; paths are as written in the manifest.
struct ManifestRecord {
    std::string ldct_path;
    std::string ndct_path;
    std::string sample_id;
};

/// Slice files: raw float32 little-endian, row-major, no header.
/// The companion sidecar `<name>.meta` carries `height=<int>` and
/// `width=<int>` lines.
void write_slice(const std::filesystem::path& path, const CTSlice& slice);
CTSlice read_slice(const std::filesystem::path& path);
std::filesystem::path meta_path_for(const std::filesystem::path& slice_path);

/// Manifest: UTF-8 text, one `ldct_path<TAB>ndct_path<TAB>sample_id` record
/// per line. Relative paths resolve against the manifest's directory.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Loads every pair in manifest order, validating per-pair shape agreement.
std::vector<PairedSample> load_dataset(const std::filesystem::path& manifest_path);

/// Deterministic epoch-shuffled batching. Batches are drawn from a fresh
/// permutation of [0, dataset_size) per epoch, derived purely from
/// (seed, epoch); the trailing partial batch of an epoch is dropped.
/// `iteration` is 0-based.
std::vector<int> epoch_batch_indices(std::uint64_t seed, std::int64_t iteration, int dataset_size,
                                     int batch_size);

} // namespace alden::data
