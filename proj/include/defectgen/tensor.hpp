#ifndef DEFECTGEN_TENSOR_HPP
#define DEFECTGEN_TENSOR_HPP

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace defectgen {

// Dense row-major tensor. Shapes are small (<= 4 dims in practice), data is
// contiguous. Value semantics throughout; moves are cheap, copies explicit
// in cost.
template <class T>
struct BasicTensor {
    std::vector<int64_t> shape;
    std::vector<T> v;

    BasicTensor() = default;
    explicit BasicTensor(std::vector<int64_t> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    BasicTensor(std::vector<int64_t> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != count(shape))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dim");
            n *= d;
        }
        return n;
    }

    static BasicTensor zeros(std::vector<int64_t> s) { return BasicTensor(std::move(s)); }
    static BasicTensor full(std::vector<int64_t> s, T value) {
        BasicTensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    // 2D/3D/4D indexed access for readability in non-hot code.
    T& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
    T& at(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return v[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return v[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    bool same_shape(const BasicTensor& o) const { return shape == o.shape; }

    BasicTensor reshaped(std::vector<int64_t> s) const {
        if (count(s) != size()) throw std::invalid_argument("reshape: element count mismatch");
        BasicTensor t;
        t.shape = std::move(s);
        t.v = v;
        return t;
    }

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> t;
        t.shape = shape;
        t.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
        return t;
    }
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

template <class T>
std::string shape_str(const BasicTensor<T>& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + ")";
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    assert(a.size() == b.size());
    T m = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        T d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
        if (d > m) m = d;
    }
    return m;
}

template <class T>
double mean_value(const BasicTensor<T>& t) {
    if (t.size() == 0) return 0.0;
    double s = 0;
    for (int64_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]);
    return s / static_cast<double>(t.size());
}

}  // namespace defectgen

#endif
