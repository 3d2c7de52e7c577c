#pragma once

#include <string>

#include "petr/diffarray.hpp"

namespace petr {

struct Linear {
    Array w, b;

    Linear() = default;
    Linear(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
        w = ps.add(prefix + ".w", Array::xavier(in, out, rng));
        b = ps.add(prefix + ".b", Array::zeros({out}));
    }

    // x (rows, in) -> (rows, out)
    Array forward(Tape& t, const Array& x) const { return t.add_rowvec(t.matmul(x, w), b); }
};

struct Conv3x3 {
    Array w, b;
    std::size_t stride = 1;

    Conv3x3() = default;
    Conv3x3(ParamSet& ps, const std::string& prefix, std::size_t cin, std::size_t cout,
            std::size_t stride_, Rng& rng)
        : stride(stride_) {
        const double s = std::sqrt(2.0 / static_cast<double>(cin * 9 + cout * 9));
        w = ps.add(prefix + ".w", Array::gauss({cout, cin, 3, 3}, s, rng));
        b = ps.add(prefix + ".b", Array::zeros({cout}));
    }

    Array forward(Tape& t, const Array& x) const { return t.conv2d(x, w, b, stride, 1); }
};

}  // namespace petr
