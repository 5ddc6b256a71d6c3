#include "alden/dataset.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "alden/rng.hpp"

namespace alden::data {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "slice files are little-endian; add byte swapping for this platform");

std::filesystem::path meta_path_for(const std::filesystem::path& slice_path) {
    fs::path p = slice_path;
    p.replace_extension(".meta");
    return p;
}

void write_slice(const fs::path& path, const CTSlice& slice) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("write_slice: cannot open " + path.string());
    std::vector<float> buf(static_cast<size_t>(slice.numel()));
    auto px = slice.pixels();
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(px[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw LoadError("write_slice: short write to " + path.string());
    f.close();

    std::ofstream meta(meta_path_for(path), std::ios::trunc);
    if (!meta) throw LoadError("write_slice: cannot open " + meta_path_for(path).string());
    meta << "height=" << slice.height() << "\n";
    meta << "width=" << slice.width() << "\n";
}

CTSlice read_slice(const fs::path& path) {
    const fs::path meta_path = meta_path_for(path);
    std::ifstream meta(meta_path);
    if (!meta) throw LoadError("read_slice: missing sidecar " + meta_path.string());
    int height = -1, width = -1;
    std::string line;
    while (std::getline(meta, line)) {
        if (line.rfind("height=", 0) == 0) height = std::stoi(line.substr(7));
        else if (line.rfind("width=", 0) == 0) width = std::stoi(line.substr(6));
    }
    if (height <= 0 || width <= 0) {
        throw LoadError("read_slice: sidecar " + meta_path.string() +
                        " lacks valid height/width lines");
    }

    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("read_slice: missing slice file " + path.string());
    const size_t expect = static_cast<size_t>(height) * static_cast<size_t>(width);
    std::vector<float> buf(expect);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expect * sizeof(float)));
    if (static_cast<size_t>(f.gcount()) != expect * sizeof(float)) {
        throw LoadError("read_slice: " + path.string() + " is truncated (expected " +
                        std::to_string(expect) + " float32 values)");
    }
    char extra;
    if (f.read(&extra, 1)) {
        throw LoadError("read_slice: " + path.string() + " has trailing bytes beyond " +
                        std::to_string(expect) + " float32 values");
    }
    std::vector<double> px(expect);
    for (size_t i = 0; i < expect; ++i) {
        if (!std::isfinite(buf[i])) {
            throw LoadError("read_slice: " + path.string() + " contains non-finite values");
        }
        px[i] = static_cast<double>(buf[i]);
    }
    try {
        return CTSlice(height, width, std::move(px));
    } catch (const std::invalid_argument& e) {
        throw LoadError("read_slice: " + path.string() + ": " + e.what());
    }
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw LoadError("write_manifest: cannot open " + path.string());
    for (const ManifestRecord& r : records) {
        f << r.ldct_path << "\t" << r.ndct_path << "\t" << r.sample_id << "\n";
    }
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("read_manifest: cannot open " + path.string());
    std::vector<ManifestRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestRecord r;
        if (!std::getline(is, r.ldct_path, '\t') || !std::getline(is, r.ndct_path, '\t') ||
            !std::getline(is, r.sample_id)) {
            throw LoadError("read_manifest: malformed record at " + path.string() + ":" +
                            std::to_string(lineno));
        }
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<PairedSample> load_dataset(const fs::path& manifest_path) {
    const fs::path base = manifest_path.has_parent_path() ? manifest_path.parent_path() : ".";
    auto resolve = [&](const std::string& p) {
        fs::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    std::vector<PairedSample> out;
    for (const ManifestRecord& r : read_manifest(manifest_path)) {
        PairedSample s;
        s.sample_id = r.sample_id;
        try {
            s.ldct = read_slice(resolve(r.ldct_path));
            s.ndct = read_slice(resolve(r.ndct_path));
        } catch (const LoadError& e) {
            throw LoadError("sample '" + r.sample_id + "': " + e.what());
        }
        if (s.ldct.height() != s.ndct.height() || s.ldct.width() != s.ndct.width()) {
            throw LoadError("sample '" + r.sample_id + "': LDCT is " +
                            std::to_string(s.ldct.height()) + "x" + std::to_string(s.ldct.width()) +
                            " but NDCT is " + std::to_string(s.ndct.height()) + "x" +
                            std::to_string(s.ndct.width()));
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<int> epoch_batch_indices(std::uint64_t seed, std::int64_t iteration, int dataset_size,
                                     int batch_size) {
    if (dataset_size < batch_size || batch_size < 1) {
        throw std::invalid_argument("epoch_batch_indices: dataset smaller than batch size");
    }
    const std::int64_t batches_per_epoch = dataset_size / batch_size;
    const std::int64_t epoch = iteration / batches_per_epoch;
    const std::int64_t pos = iteration % batches_per_epoch;

    std::vector<int> perm(static_cast<size_t>(dataset_size));
    for (int i = 0; i < dataset_size; ++i) perm[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed, 0x65706f6368ull /* "epoch" */ + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(perm);

    return std::vector<int>(perm.begin() + pos * batch_size,
                            perm.begin() + (pos + 1) * batch_size);
}

} // namespace alden::data
