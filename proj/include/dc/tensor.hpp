#pragma once

// Dense row-major n-dimensional tensor. The engine keeps every value finite;
// graph operations check their outputs and raise NumericError otherwise.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dc {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<size_t>(numel(shape)), T{0}) {
        for (int64_t d : shape)
            if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
    }
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel(shape))
            throw ShapeError("value count " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    static Tensor full(Shape s, T value) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

template <typename T>
inline bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

} // namespace dc
