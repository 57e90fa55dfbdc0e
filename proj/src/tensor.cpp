#include "bivit/tensor.hpp"

#include <cmath>
#include <string>

#include "bivit/errors.hpp"

namespace bivit {

std::size_t shape_size(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)), values(shape_size(shape), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape_size(shape))
        throw ShapeError("tensor: values length " + std::to_string(values.size()) +
                         " != product of shape " + shape_str(shape));
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.values) x = v;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill_normal(std::mt19937_64& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : values) v = dist(rng);
}

void Tensor::fill_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : values) v = dist(rng);
}

} // namespace bivit
