#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace constyx {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Eigen's vectorized reductions peel a different
// number of leading scalars depending on the buffer address, so unaligned
// buffers make sums differ in the last bit from run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float64 array. Values are immutable once handed to a tape.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // 3-d accessor for [C,H,W] tensors.
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    double item() const;
    bool all_finite() const noexcept;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    Buffer data_;
};

// Per-pixel class indices, row-major [H,W].
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> values;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), values(h * w, fill) {}
    LabelMap(std::size_t h, std::size_t w, std::vector<int> v);

    std::size_t size() const noexcept { return values.size(); }
    int& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
    int operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }

    // Throws ShapeError when a label falls outside [0, num_classes).
    void check_range(int num_classes) const;

    bool operator==(const LabelMap&) const = default;
};

// Feature maps [N,H,W] and probability maps [C,H,W] are plain tensors; these
// aliases mark intent at API boundaries.
using FeatureMap = Tensor;
using ProbMap = Tensor;

void require_rank(const Tensor& t, std::size_t rank, const char* what);
void require_spatial_match(const Tensor& t, const LabelMap& labels, const char* what);

// ---------------------------------------------------------------------------
// Tensor container file: "CSXT" | u16 version | u8 dtype | u8 rank |
// u64 dims (LE) | f64 payload (LE).

inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

Tensor labels_to_tensor(const LabelMap& labels);
LabelMap tensor_to_labels(const Tensor& t);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace constyx
