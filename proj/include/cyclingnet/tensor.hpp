#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cyclingnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense n-dimensional array, row-major. The scalar type is a template
/// parameter so the same kernels run in float for training and in double
/// for finite-difference gradient checks.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != numel(shape_))
            throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Flat index for a 3-d (i, j, k) position; caller guarantees rank 3.
    std::size_t idx3(std::size_t i, std::size_t j, std::size_t k) const {
        return (i * shape_[1] + j) * shape_[2] + k;
    }

    /// Flat index for a 4-d (b, i, j, k) position; caller guarantees rank 4.
    std::size_t idx4(std::size_t b, std::size_t i, std::size_t j, std::size_t k) const {
        return ((b * shape_[1] + i) * shape_[2] + j) * shape_[3] + k;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Returns a copy with a new shape of identical element count.
    Tensor reshaped(Shape new_shape) const {
        if (numel(new_shape) != size())
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) +
                                        " as " + shape_str(new_shape));
        Tensor out;
        out.shape_ = std::move(new_shape);
        out.data_ = data_;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(d));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
    void check_shape() const {
        for (std::size_t e : shape_)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

/// A trainable (or frozen) tensor with its gradient accumulator.
/// Non-trainable parameters (batch-norm moving statistics) keep a gradient
/// buffer for shape symmetry but the optimizer never touches them.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { grad.fill(T(0)); }
};

/// Deterministic random source. One engine per logical stream; fixed seeds
/// give bitwise-identical draws on a given platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal(double mean, double stddev) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    std::uint64_t next() { return engine_(); }

    /// Derives an independent stream; splitmix-style mixing of the key.
    Rng fork(std::uint64_t key) {
        std::uint64_t z = engine_() + 0x9e3779b97f4a7c15ull * (key + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// He-normal initialization: zero-mean normal with stddev sqrt(2 / fan_in).
template <typename T = float>
Tensor<T> he_normal_init(Shape shape, std::size_t fan_in, std::uint64_t seed) {
    if (fan_in == 0)
        throw std::invalid_argument("he_normal_init: fan_in must be positive");
    Rng rng(seed);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor<T> out(std::move(shape));
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(rng.normal(0.0, stddev));
    return out;
}

}  // namespace cyclingnet
