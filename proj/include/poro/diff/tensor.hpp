#pragma once

#include "poro/error.hpp"
#include "poro/rng.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace poro::diff {

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

/// Dense double tensor with an optional gradient accumulator. Parameters and
/// network inputs live in DTensors; intermediate results live on the tape.
struct DTensor {
    Shape shape;
    Eigen::ArrayXd value;
    Eigen::ArrayXd grad;
    bool requires_grad = false;

    DTensor() = default;
    explicit DTensor(Shape s) : shape(std::move(s)), value(Eigen::ArrayXd::Zero(shape_size(shape))) {}

    std::int64_t size() const { return value.size(); }

    void set_requires_grad(bool on) {
        requires_grad = on;
        if (on && grad.size() != value.size()) grad = Eigen::ArrayXd::Zero(value.size());
    }

    void zero_grad() {
        if (grad.size()) grad.setZero();
    }

    static DTensor zeros(Shape s) { return DTensor(std::move(s)); }

    static DTensor full(Shape s, double v) {
        DTensor t(std::move(s));
        t.value.setConstant(v);
        return t;
    }

    static DTensor from_values(Shape s, std::initializer_list<double> vals) {
        DTensor t(std::move(s));
        if (static_cast<std::int64_t>(vals.size()) != t.size())
            throw ShapeError("from_values: count does not match shape " + shape_str(t.shape));
        std::int64_t i = 0;
        for (double v : vals) t.value[i++] = v;
        return t;
    }
};

/// He-style uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
inline void init_he_uniform(DTensor& t, std::int64_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.size(); ++i) t.value[i] = rng.uniform(-limit, limit);
}

}  // namespace poro::diff
