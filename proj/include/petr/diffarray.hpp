#pragma once

// Dense f64 arrays on a dynamic reverse-mode tape. The tape is rebuilt every
// forward pass; leaves (parameters, constants) live independently of any tape
// and keep their grad buffers across passes until zeroed.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "petr/common.hpp"
#include "petr/parallel.hpp"

namespace petr {

struct ArrayImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;      // empty until first touched
    std::uint64_t tape_id = 0;     // 0 = leaf
    int node = -1;

    std::size_t size() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

class Array {
public:
    Array() = default;

    static Array zeros(Shape shape) {
        return Array(std::move(shape), {});
    }

    static Array full(Shape shape, double v) {
        auto a = Array(std::move(shape), {});
        std::fill(a.impl_->data.begin(), a.impl_->data.end(), v);
        return a;
    }

    static Array scalar(double v) { return full({1}, v); }

    static Array from(Shape shape, std::vector<double> data) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("Array::from: shape " + shape_str(shape) + " does not hold " +
                                 std::to_string(data.size()) + " values");
        }
        Array a;
        a.impl_ = std::make_shared<ArrayImpl>();
        a.impl_->shape = std::move(shape);
        a.impl_->data = std::move(data);
        return a;
    }

    static Array gauss(Shape shape, double stddev, Rng& rng) {
        auto a = Array(std::move(shape), {});
        for (double& v : a.impl_->data) v = rng.gauss(0.0, stddev);
        return a;
    }

    static Array uniform01(Shape shape, Rng& rng) {
        auto a = Array(std::move(shape), {});
        for (double& v : a.impl_->data) v = rng.uniform();
        return a;
    }

    // Glorot normal, for weight matrices (fan_in, fan_out)
    static Array xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
        const double s = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        return gauss({fan_in, fan_out}, s, rng);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rank() const { return impl_->shape.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double& at(std::size_t i) { return impl_->data[i]; }
    double at(std::size_t i) const { return impl_->data[i]; }
    double& at2(std::size_t i, std::size_t j) { return impl_->data[i * impl_->shape[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    double grad_at(std::size_t i) const {
        return impl_->grad.empty() ? 0.0 : impl_->grad[i];
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    std::shared_ptr<ArrayImpl> impl() const { return impl_; }

private:
    Array(Shape shape, std::vector<double>) {
        impl_ = std::make_shared<ArrayImpl>();
        impl_->data.assign(shape_numel(shape), 0.0);
        impl_->shape = std::move(shape);
    }

    std::shared_ptr<ArrayImpl> impl_;
};

// ----------------------------- raw kernels -----------------------------

namespace detail {

// C(m,n) = A(m,k) * B(k,n)
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    parallel_for(m, 16, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            double* crow = c + i * n;
            const double* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                const double* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void mm_nt_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, 16, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
                crow[j] += s;
            }
        }
    });
}

// C(k,n) += A(m,k)^T * B(m,n)
inline void mm_tn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(k, 16, [&](std::size_t k0, std::size_t k1) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            const double* brow = b + i * n;
            for (std::size_t kk = k0; kk < k1; ++kk) {
                const double av = arow[kk];
                double* crow = c + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

}  // namespace detail

// ----------------------------- tape -----------------------------

class Tape {
public:
    Tape() : id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    // ---- matmul ----

    Array matmul(const Array& a, const Array& b) {
        require_rank(a, 2, "matmul lhs");
        require_rank(b, 2, "matmul rhs");
        const std::size_t m = a.shape()[0], k = a.shape()[1];
        const std::size_t k2 = b.shape()[0], n = b.shape()[1];
        if (k != k2) {
            throw DimensionError("matmul: inner dimensions disagree, lhs " + shape_str(a.shape()) +
                                 " vs rhs " + shape_str(b.shape()));
        }
        Array out = Array::zeros({m, n});
        detail::mm_nn(a.data(), b.data(), out.data(), m, k, n);
        record(out, {a.impl(), b.impl()}, [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
            ai->ensure_grad();
            bi->ensure_grad();
            detail::mm_nt_acc(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            detail::mm_tn_acc(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
        });
        return out;
    }

    Array transpose2d(const Array& a) {
        require_rank(a, 2, "transpose2d");
        const std::size_t r = a.shape()[0], c = a.shape()[1];
        Array out = Array::zeros({c, r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl(), r, c] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ai->grad[i * c + j] += oi->grad[j * r + i];
        });
        return out;
    }

    // ---- elementwise binary (equal shapes, or either side scalar) ----

    Array add(const Array& a, const Array& b) {
        return binary(a, b, "add",
                      [](double x, double y) { return x + y; },
                      [](double, double, double g, double& dx, double& dy) {
                          dx += g;
                          dy += g;
                      });
    }

    Array mul(const Array& a, const Array& b) {
        return binary(a, b, "mul",
                      [](double x, double y) { return x * y; },
                      [](double x, double y, double g, double& dx, double& dy) {
                          dx += g * y;
                          dy += g * x;
                      });
    }

    Array sub(const Array& a, const Array& b) { return add(a, neg(b)); }

    Array add_scalar(const Array& a, double s) {
        return unary(a, [s](double x) { return x + s; }, [](double, double g) { return g; });
    }

    Array mul_scalar(const Array& a, double s) {
        return unary(a, [s](double x) { return x * s; }, [s](double, double g) { return g * s; });
    }

    // ---- elementwise unary ----

    Array neg(const Array& a) {
        return unary(a, [](double x) { return -x; }, [](double, double g) { return -g; });
    }

    Array relu(const Array& a) {
        return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double g) { return x > 0.0 ? g : 0.0; });
    }

    Array sigmoid(const Array& a) {
        return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                     [](double x, double g) {
                         const double s = 1.0 / (1.0 + std::exp(-x));
                         return g * s * (1.0 - s);
                     });
    }

    Array log(const Array& a) {
        return unary(a, [](double x) { return std::log(x); },
                     [](double x, double g) { return g / x; });
    }

    Array exp(const Array& a) {
        return unary(a, [](double x) { return std::exp(x); },
                     [](double x, double g) { return g * std::exp(x); });
    }

    Array abs(const Array& a) {
        return unary(a, [](double x) { return std::fabs(x); },
                     [](double x, double g) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
    }

    Array powc(const Array& a, double c) {
        return unary(a, [c](double x) { return std::pow(x, c); },
                     [c](double x, double g) { return g * c * std::pow(x, c - 1.0); });
    }

    Array clamp(const Array& a, double lo, double hi) {
        return unary(a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                     [lo, hi](double x, double g) { return (x >= lo && x <= hi) ? g : 0.0; });
    }

    // ---- softmax over an axis, max-subtracted ----

    Array softmax(const Array& a, int axis) {
        const int r = static_cast<int>(a.rank());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ParameterError("softmax: axis out of range");
        const std::size_t n = a.shape()[static_cast<std::size_t>(axis)];
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
        for (int i = axis + 1; i < r; ++i) inner *= a.shape()[static_cast<std::size_t>(i)];

        Array out = Array::zeros(a.shape());
        const double* x = a.data();
        double* y = out.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double mx = x[base];
                for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
                double z = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double e = std::exp(x[base + j * inner] - mx);
                    y[base + j * inner] = e;
                    z += e;
                }
                const double iz = 1.0 / z;
                for (std::size_t j = 0; j < n; ++j) y[base + j * inner] *= iz;
            }
        }
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl(), outer, n, inner] {
            ai->ensure_grad();
            const double* s = oi->data.data();
            const double* gy = oi->grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += gy[base + j * inner] * s[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t p = base + j * inner;
                        ai->grad[p] += s[p] * (gy[p] - dot);
                    }
                }
            }
        });
        return out;
    }

    // ---- layer norm over the last axis, eps 1e-5 ----

    Array layernorm(const Array& x, const Array& gamma, const Array& beta) {
        if (x.rank() < 1) throw DimensionError("layernorm: rank-0 input");
        const std::size_t c = x.shape().back();
        if (c < 2) throw ParameterError("layernorm: last axis must have >= 2 elements");
        if (gamma.size() != c || beta.size() != c) {
            throw DimensionError("layernorm: gamma/beta size " + std::to_string(gamma.size()) + "/" +
                                 std::to_string(beta.size()) + " vs channels " + std::to_string(c));
        }
        const std::size_t rows = x.size() / c;
        constexpr double kEps = 1e-5;

        Array out = Array::zeros(x.shape());
        auto xhat = std::make_shared<std::vector<double>>(x.size());
        auto istd = std::make_shared<std::vector<double>>(rows);
        for (std::size_t rI = 0; rI < rows; ++rI) {
            const double* xr = x.data() + rI * c;
            double mu = 0.0;
            for (std::size_t j = 0; j < c; ++j) mu += xr[j];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = xr[j] - mu;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + kEps);
            (*istd)[rI] = inv;
            double* yr = out.data() + rI * c;
            double* hr = xhat->data() + rI * c;
            for (std::size_t j = 0; j < c; ++j) {
                hr[j] = (xr[j] - mu) * inv;
                yr[j] = gamma.data()[j] * hr[j] + beta.data()[j];
            }
        }
        record(out, {x.impl(), gamma.impl(), beta.impl()},
               [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(), xhat, istd, rows, c] {
                   xi->ensure_grad();
                   gi->ensure_grad();
                   bi->ensure_grad();
                   const double* gy = oi->grad.data();
                   for (std::size_t rI = 0; rI < rows; ++rI) {
                       const double* gyr = gy + rI * c;
                       const double* hr = xhat->data() + rI * c;
                       const double inv = (*istd)[rI];
                       double sum_dxh = 0.0, sum_dxh_h = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                           const double dxh = gyr[j] * gi->data[j];
                           sum_dxh += dxh;
                           sum_dxh_h += dxh * hr[j];
                           gi->grad[j] += gyr[j] * hr[j];
                           bi->grad[j] += gyr[j];
                       }
                       const double ic = 1.0 / static_cast<double>(c);
                       for (std::size_t j = 0; j < c; ++j) {
                           const double dxh = gyr[j] * gi->data[j];
                           xi->grad[rI * c + j] += inv * (dxh - ic * sum_dxh - hr[j] * ic * sum_dxh_h);
                       }
                   }
               });
        return out;
    }

    // ---- reductions / shape ----

    Array sum(const Array& a) {
        Array out = Array::scalar(std::accumulate(a.data(), a.data() + a.size(), 0.0));
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl()] {
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& d : ai->grad) d += g;
        });
        return out;
    }

    Array reshape(const Array& a, Shape shape) {
        if (shape_numel(shape) != a.size()) {
            throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                 " changes element count");
        }
        Array out = Array::from(std::move(shape), a.vec());
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl()] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
        return out;
    }

    // matrix (r,c) plus a length-c vector broadcast over rows
    Array add_rowvec(const Array& m, const Array& v) {
        require_rank(m, 2, "add_rowvec matrix");
        const std::size_t r = m.shape()[0], c = m.shape()[1];
        if (v.size() != c) {
            throw DimensionError("add_rowvec: vector size " + std::to_string(v.size()) +
                                 " vs matrix " + shape_str(m.shape()));
        }
        Array out = Array::zeros(m.shape());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = m.data()[i * c + j] + v.data()[j];
        record(out, {m.impl(), v.impl()}, [mi = m.impl(), vi = v.impl(), oi = out.impl(), r, c] {
            mi->ensure_grad();
            vi->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    const double g = oi->grad[i * c + j];
                    mi->grad[i * c + j] += g;
                    vi->grad[j] += g;
                }
            }
        });
        return out;
    }

    Array slice_cols(const Array& a, std::size_t c0, std::size_t c1) {
        require_rank(a, 2, "slice_cols");
        const std::size_t r = a.shape()[0], c = a.shape()[1];
        if (!(c0 < c1 && c1 <= c)) throw DimensionError("slice_cols: bad range on " + shape_str(a.shape()));
        const std::size_t w = c1 - c0;
        Array out = Array::zeros({r, w});
        for (std::size_t i = 0; i < r; ++i)
            std::memcpy(out.data() + i * w, a.data() + i * c + c0, w * sizeof(double));
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl(), r, c, c0, w] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) ai->grad[i * c + c0 + j] += oi->grad[i * w + j];
        });
        return out;
    }

    Array concat_cols(std::span<const Array> parts) {
        if (parts.empty()) throw DimensionError("concat_cols: no inputs");
        const std::size_t r = parts[0].shape()[0];
        std::size_t total = 0;
        for (const auto& p : parts) {
            require_rank(p, 2, "concat_cols");
            if (p.shape()[0] != r) throw DimensionError("concat_cols: row mismatch");
            total += p.shape()[1];
        }
        Array out = Array::zeros({r, total});
        std::size_t off = 0;
        std::vector<std::shared_ptr<ArrayImpl>> ins;
        std::vector<std::size_t> offs;
        for (const auto& p : parts) {
            const std::size_t w = p.shape()[1];
            for (std::size_t i = 0; i < r; ++i)
                std::memcpy(out.data() + i * total + off, p.data() + i * w, w * sizeof(double));
            ins.push_back(p.impl());
            offs.push_back(off);
            off += w;
        }
        record(out, ins, [ins, offs, oi = out.impl(), r, total] {
            for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                auto& in = ins[pi];
                in->ensure_grad();
                const std::size_t w = in->shape[1];
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        in->grad[i * w + j] += oi->grad[i * total + offs[pi] + j];
            }
        });
        return out;
    }

    Array concat_rows(std::span<const Array> parts) {
        if (parts.empty()) throw DimensionError("concat_rows: no inputs");
        const std::size_t c = parts[0].shape()[1];
        std::size_t rows = 0;
        for (const auto& p : parts) {
            require_rank(p, 2, "concat_rows");
            if (p.shape()[1] != c) throw DimensionError("concat_rows: column mismatch");
            rows += p.shape()[0];
        }
        Array out = Array::zeros({rows, c});
        std::size_t off = 0;
        std::vector<std::shared_ptr<ArrayImpl>> ins;
        std::vector<std::size_t> offs;
        for (const auto& p : parts) {
            std::memcpy(out.data() + off * c, p.data(), p.size() * sizeof(double));
            ins.push_back(p.impl());
            offs.push_back(off);
            off += p.shape()[0];
        }
        record(out, ins, [ins, offs, oi = out.impl(), c] {
            for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                auto& in = ins[pi];
                in->ensure_grad();
                const std::size_t n = in->grad.size();
                const double* g = oi->grad.data() + offs[pi] * c;
                for (std::size_t i = 0; i < n; ++i) in->grad[i] += g[i];
            }
        });
        return out;
    }

    Array gather_rows(const Array& a, std::vector<std::size_t> idx) {
        require_rank(a, 2, "gather_rows");
        const std::size_t c = a.shape()[1];
        for (std::size_t i : idx)
            if (i >= a.shape()[0]) throw DimensionError("gather_rows: index out of range");
        Array out = Array::zeros({idx.size(), c});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::memcpy(out.data() + i * c, a.data() + idx[i] * c, c * sizeof(double));
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl(), idx = std::move(idx), c] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) ai->grad[idx[i] * c + j] += oi->grad[i * c + j];
        });
        return out;
    }

    // ---- conv2d, NCHW single image, zero padding ----
    // x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout) -> (Cout,Ho,Wo)

    Array conv2d(const Array& x, const Array& w, const Array& b, std::size_t stride, std::size_t pad) {
        require_rank(x, 3, "conv2d input");
        require_rank(w, 4, "conv2d weight");
        const std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
        const std::size_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
        if (w.shape()[1] != cin) {
            throw DimensionError("conv2d: weight expects " + std::to_string(w.shape()[1]) +
                                 " input channels, image has " + std::to_string(cin));
        }
        if (b.size() != cout) throw DimensionError("conv2d: bias size mismatch");
        if (h + 2 * pad < kh || wd + 2 * pad < kw) throw DimensionError("conv2d: kernel larger than padded input");
        const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
        const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
        const std::size_t kvol = cin * kh * kw;

        // im2col = (kvol, ho*wo); out = wmat(cout,kvol) * col + bias
        auto col = std::make_shared<std::vector<double>>(kvol * ho * wo, 0.0);
        im2col(x.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, col->data());
        Array out = Array::zeros({cout, ho, wo});
        detail::mm_nn(w.data(), col->data(), out.data(), cout, kvol, ho * wo);
        for (std::size_t oc = 0; oc < cout; ++oc) {
            const double bv = b.data()[oc];
            double* orow = out.data() + oc * ho * wo;
            for (std::size_t i = 0; i < ho * wo; ++i) orow[i] += bv;
        }
        record(out, {x.impl(), w.impl(), b.impl()},
               [xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl(), col,
                cin, h, wd, kh, kw, stride, pad, ho, wo, cout, kvol] {
                   xi->ensure_grad();
                   wi->ensure_grad();
                   bi->ensure_grad();
                   const double* gy = oi->grad.data();
                   // db
                   for (std::size_t oc = 0; oc < cout; ++oc) {
                       double s = 0.0;
                       const double* gr = gy + oc * ho * wo;
                       for (std::size_t i = 0; i < ho * wo; ++i) s += gr[i];
                       bi->grad[oc] += s;
                   }
                   // dW = gy(cout, howo) * col^T
                   detail::mm_nt_acc(gy, col->data(), wi->grad.data(), cout, ho * wo, kvol);
                   // dcol = W^T * gy, then scatter back to dx
                   std::vector<double> dcol(kvol * ho * wo, 0.0);
                   detail::mm_tn_acc(wi->data.data(), gy, dcol.data(), cout, kvol, ho * wo);
                   col2im_acc(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, xi->grad.data());
               });
        return out;
    }

    // ---- backward ----

    void backward(const Array& loss) {
        if (loss.size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        auto li = loss.impl();
        if (li->tape_id != id_ || li->node < 0) {
            throw ContractError("backward: loss is not a node on this tape");
        }
        // mark nodes reachable from the loss
        std::vector<char> reach(nodes_.size(), 0);
        reach[static_cast<std::size_t>(li->node)] = 1;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (!reach[i]) continue;
            for (const auto& in : nodes_[i].inputs) {
                if (in->tape_id == id_ && in->node >= 0) reach[static_cast<std::size_t>(in->node)] = 1;
            }
        }
        li->ensure_grad();
        li->grad[0] += 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (reach[i]) nodes_[i].back();
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::vector<std::shared_ptr<ArrayImpl>> inputs;
        std::function<void()> back;
    };

    static std::uint64_t& next_id() {
        static std::uint64_t id = 1;
        return id;
    }

    static void require_rank(const Array& a, std::size_t r, const char* what) {
        if (a.rank() != r) {
            throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) +
                                 ", got " + shape_str(a.shape()));
        }
    }

    void record(Array& out, std::vector<std::shared_ptr<ArrayImpl>> inputs, std::function<void()> back) {
        out.impl()->tape_id = id_;
        out.impl()->node = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{std::move(inputs), std::move(back)});
    }

    template <class F, class G>
    Array unary(const Array& a, F fwd, G bwd) {
        Array out = Array::zeros(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = fwd(a.data()[i]);
        record(out, {a.impl()}, [ai = a.impl(), oi = out.impl(), bwd] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < ai->grad.size(); ++i)
                ai->grad[i] += bwd(ai->data[i], oi->grad[i]);
        });
        return out;
    }

    template <class F, class G>
    Array binary(const Array& a, const Array& b, const char* name, F fwd, G bwd) {
        const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
        if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
            throw DimensionError(std::string(name) + ": shapes not broadcastable, " +
                                 shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
        const Shape& os = a_scalar ? b.shape() : a.shape();
        Array out = Array::zeros(os);
        const std::size_t n = out.size();
        for (std::size_t i = 0; i < n; ++i)
            out.data()[i] = fwd(a.data()[a_scalar ? 0 : i], b.data()[b_scalar ? 0 : i]);
        record(out, {a.impl(), b.impl()},
               [ai = a.impl(), bi = b.impl(), oi = out.impl(), bwd, a_scalar, b_scalar, n] {
                   ai->ensure_grad();
                   bi->ensure_grad();
                   for (std::size_t i = 0; i < n; ++i) {
                       bwd(ai->data[a_scalar ? 0 : i], bi->data[b_scalar ? 0 : i], oi->grad[i],
                           ai->grad[a_scalar ? 0 : i], bi->grad[b_scalar ? 0 : i]);
                   }
               });
        return out;
    }

    static void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                       std::size_t ho, std::size_t wo, double* col) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    double* crow = col + ((ci * kh + ki) * kw + kj) * ho * wo;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
                            double v = 0.0;
                            if (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                v = x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                            crow[oy * wo + ox] = v;
                        }
                    }
                }
            }
        }
    }

    static void col2im_acc(const double* col, std::size_t cin, std::size_t h, std::size_t w,
                           std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                           std::size_t ho, std::size_t wo, double* dx) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    const double* crow = col + ((ci * kh + ki) * kw + kj) * ho * wo;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                                crow[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
};

// ----------------------------- parameters & optimizer -----------------------------

struct ParamSet {
    std::vector<std::string> names;
    std::vector<Array> arrays;

    Array add(std::string name, Array a) {
        names.push_back(std::move(name));
        arrays.push_back(a);
        return a;
    }

    std::size_t count() const { return arrays.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& a : arrays) n += a.size();
        return n;
    }

    Array* find(std::string_view name) {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return &arrays[i];
        return nullptr;
    }

    void zero_grads() {
        for (auto& a : arrays) a.zero_grad();
    }
};

// Decoupled weight decay Adam; beta1 0.9, beta2 0.999, eps 1e-8.
struct AdamWState {
    std::vector<std::vector<double>> m, v;
    long t = 0;
};

inline void adamw_step(std::vector<Array>& params, AdamWState& state, double lr, double weight_decay) {
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adamw_step: state/params misaligned");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Array& a = params[p];
        if (state.m[p].size() != a.size()) throw ContractError("adamw_step: state size mismatch");
        double* w = a.data();
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double g = a.grad_at(i);
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * w[i]);
        }
    }
}

}  // namespace petr
