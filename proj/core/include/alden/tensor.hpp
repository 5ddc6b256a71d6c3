#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace alden {

/// Dense row-major tensor of doubles. Rank up to 4 in practice
/// (B,C,H,W for image maps, B,N,D for token stacks, N,D for matrices).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);

    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor zeros_like(const Tensor& other);

    const std::vector<int>& shape() const { return shape_; }
    int dim() const { return static_cast<int>(shape_.size()); }
    int size(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Row-major index helpers.
    double& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    double at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    double& at3(int b, int i, int j) {
        return data_[(static_cast<size_t>(b) * shape_[1] + i) * shape_[2] + j];
    }
    double at3(int b, int i, int j) const {
        return data_[(static_cast<size_t>(b) * shape_[1] + i) * shape_[2] + j];
    }
    double& at4(int b, int c, int y, int x) {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at4(int b, int c, int y, int x) const {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// "BxCxHxW"-style shape string for error messages.
    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

/// FNV-1a over the raw bytes of the tensor contents, in storage order.
/// Used for frozen-parameter and update-exclusivity checks.
std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ull);
std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t seed = 1469598103934665603ull);

} // namespace alden
