#include "constyx/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace constyx {

static_assert(std::endian::native == std::endian::little,
              "container codec assumes a little-endian host");

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

LabelMap::LabelMap(std::size_t h, std::size_t w, std::vector<int> v)
    : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw ShapeError("label map size does not match " + std::to_string(h) + "x" +
                                                 std::to_string(w));
}

void LabelMap::check_range(int num_classes) const {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] < 0 || values[i] >= num_classes) {
            throw ShapeError("label " + std::to_string(values[i]) + " at pixel " + std::to_string(i) +
                             " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

void require_spatial_match(const Tensor& t, const LabelMap& labels, const char* what) {
    require_rank(t, 3, what);
    if (t.dim(1) != labels.height || t.dim(2) != labels.width) {
        throw ShapeError(std::string(what) + ": spatial dims " + shape_str(t.shape()) + " vs labels " +
                         std::to_string(labels.height) + "x" + std::to_string(labels.width));
    }
}

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t& off) {
    if (off + sizeof(T) > bytes.size()) throw std::runtime_error("tensor container truncated");
    T v;
    std::memcpy(&v, bytes.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + 8 * t.rank() + 8 * t.numel());
    out.insert(out.end(), {'C', 'S', 'X', 'T'});
    put_le<std::uint16_t>(out, kContainerVersion);
    put_le<std::uint8_t>(out, kDtypeF64);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), raw, raw + t.numel() * sizeof(double));
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "CSXT", 4) != 0) {
        throw std::runtime_error("not a tensor container (bad magic)");
    }
    std::size_t off = 4;
    auto version = get_le<std::uint16_t>(bytes, off);
    if (version != kContainerVersion) {
        throw std::runtime_error("unsupported tensor container version " + std::to_string(version));
    }
    auto dtype = get_le<std::uint8_t>(bytes, off);
    if (dtype != kDtypeF64) throw std::runtime_error("unsupported dtype code " + std::to_string(dtype));
    auto rank = get_le<std::uint8_t>(bytes, off);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, off));
    const std::size_t n = shape_numel(shape);
    if (bytes.size() - off != n * sizeof(double)) {
        throw std::runtime_error("tensor container payload size mismatch for shape " + shape_str(shape));
    }
    Tensor t(std::move(shape));
    std::memcpy(t.data().data(), bytes.data() + off, n * sizeof(double));
    return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_file_bytes(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
    try {
        return decode_tensor(read_file_bytes(path));
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

Tensor labels_to_tensor(const LabelMap& labels) {
    std::vector<double> v(labels.values.begin(), labels.values.end());
    return Tensor(Shape{labels.height, labels.width}, std::move(v));
}

LabelMap tensor_to_labels(const Tensor& t) {
    require_rank(t, 2, "label tensor");
    LabelMap out(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double v = t[i];
        if (v != std::floor(v)) throw std::runtime_error("label tensor holds non-integer value");
        out.values[i] = static_cast<int>(v);
    }
    return out;
}

}  // namespace constyx
