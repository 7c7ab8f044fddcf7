#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "maskdiff/errors.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

// Dense row-major tensor with value semantics. Rank is dynamic; most of the
// codebase uses rank 1 ([n]), 2 ([rows, cols]) and 3 ([c, h, w]).
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(count(shape)), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<long long>(v.size()) != count(shape))
            throw argument_error("tensor: data size does not match shape");
    }

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d < 0) throw argument_error("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(std::vector<int> s, Rng& rng, T lo, T hi) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    long long numel() const { return static_cast<long long>(v.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool empty() const { return v.empty(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](long long i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](long long i) const { return v[static_cast<size_t>(i)]; }

    T& at(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }

    T& at(int c, int y, int x) {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    const T& at(int c, int y, int x) const {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != numel()) throw argument_error("tensor: reshape changes element count");
        Tensor t;
        t.shape = std::move(s);
        t.v = v;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool bit_equal(const Tensor& o) const {
        return shape == o.shape &&
               std::memcmp(v.data(), o.v.data(), v.size() * sizeof(T)) == 0;
    }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
        return t;
    }
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

}  // namespace maskdiff
