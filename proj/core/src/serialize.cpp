#include "alden/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace alden {

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; add byte swapping for this platform");

namespace io {

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.dim()));
    for (int i = 0; i < t.dim(); ++i) write_u32(os, static_cast<std::uint32_t>(t.size(i)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
}

namespace {
void need(std::istream& is, const char* what) {
    if (!is) throw SerializeError(std::string("container truncated while reading ") + what);
}
} // namespace

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    need(is, "u32");
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    need(is, "u64");
    return v;
}

double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    need(is, "f64");
    return v;
}

std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw SerializeError("container string length implausibly large");
    std::string s(n, '\0');
    is.read(s.data(), n);
    need(is, "string");
    return s;
}

Tensor read_tensor(std::istream& is) {
    const std::uint32_t ndim = read_u32(is);
    if (ndim > 8) throw SerializeError("container tensor rank implausibly large");
    std::vector<int> shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    need(is, "tensor payload");
    return t;
}

} // namespace io

namespace {
constexpr char kTensorFileMagic[9] = "ALDNTNS1";
} // namespace

void write_tensor_file(const std::string& path, const NamedTensors& tensors) {
    std::ostringstream payload(std::ios::binary);
    io::write_u32(payload, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        io::write_string(payload, name);
        io::write_tensor(payload, t);
    }
    const std::string body = payload.str();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw SerializeError("write_tensor_file: cannot open " + path);
    f.write(kTensorFileMagic, 8);
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    io::write_u64(f, fnv1a_bytes(body.data(), body.size()));
    if (!f) throw SerializeError("write_tensor_file: short write to " + path);
}

NamedTensors read_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SerializeError("read_tensor_file: cannot open " + path);
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (content.size() < 16 || content.compare(0, 8, kTensorFileMagic, 8) != 0) {
        throw SerializeError("read_tensor_file: " + path + " is not a tensor container");
    }
    const std::string body = content.substr(8, content.size() - 16);
    std::uint64_t stored = 0;
    std::memcpy(&stored, content.data() + content.size() - 8, 8);
    if (fnv1a_bytes(body.data(), body.size()) != stored) {
        throw SerializeError("read_tensor_file: " + path + " failed its checksum (corrupt file)");
    }
    std::istringstream is(body, std::ios::binary);
    const std::uint32_t count = io::read_u32(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = io::read_string(is);
        Tensor t = io::read_tensor(is);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

} // namespace alden
