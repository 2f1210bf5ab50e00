// Dense row-major 64-bit tensors and the handful of kernels the model needs.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cos2p {

struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::initializer_list<size_t> s) : shape(s), data(count(shape), 0.0) {}
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}

    static size_t count(const std::vector<size_t>& s) {
        return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<>());
    }

    size_t size() const { return data.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(size_t r, size_t c) { return data[r * cols() + c]; }
    double at(size_t r, size_t c) const { return data[r * cols() + c]; }
    double* row(size_t r) { return data.data() + r * cols(); }
    const double* row(size_t r) const { return data.data() + r * cols(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

inline void require_shape(const Tensor& t, size_t r, size_t c, const char* what) {
    require(t.rows() == r && t.cols() == c, std::string(what) + ": shape mismatch");
}

// y(B,out) = x(B,in) . W(out,in)^T + b
inline void linear_forward(const Tensor& x, const double* w, const double* b,
                           size_t d_out, size_t d_in, Tensor& y) {
    const size_t n = x.rows();
    y.shape = {n, d_out};
    y.data.assign(n * d_out, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (size_t o = 0; o < d_out; ++o) {
            const double* wo = w + o * d_in;
            double acc = b ? b[o] : 0.0;
            for (size_t k = 0; k < d_in; ++k) acc += xi[k] * wo[k];
            yi[o] = acc;
        }
    }
}

// y(B,out) = x(B,in) . W(in,out)   (weight stored input-major)
inline void linear_forward_t(const Tensor& x, const double* w, const double* b,
                             size_t d_out, size_t d_in, Tensor& y) {
    const size_t n = x.rows();
    y.shape = {n, d_out};
    y.data.assign(n * d_out, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        if (b) {
            for (size_t o = 0; o < d_out; ++o) yi[o] = b[o];
        }
        for (size_t k = 0; k < d_in; ++k) {
            const double xv = xi[k];
            if (xv == 0.0) continue;
            const double* wk = w + k * d_out;
            for (size_t o = 0; o < d_out; ++o) yi[o] += xv * wk[o];
        }
    }
}

// dW(out,in) += dy(B,out)^T . x(B,in);  db += column sums of dy
inline void linear_backward_params(const Tensor& x, const Tensor& dy,
                                   double* dw, double* db, size_t d_out, size_t d_in) {
    const size_t n = x.rows();
    for (size_t i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        const double* gi = dy.row(i);
        for (size_t o = 0; o < d_out; ++o) {
            const double g = gi[o];
            if (db) db[o] += g;
            if (g == 0.0) continue;
            double* dwo = dw + o * d_in;
            for (size_t k = 0; k < d_in; ++k) dwo[k] += g * xi[k];
        }
    }
}

// dx(B,in) += dy(B,out) . W(out,in)
inline void linear_backward_input(const Tensor& dy, const double* w,
                                  size_t d_out, size_t d_in, Tensor& dx) {
    const size_t n = dy.rows();
    for (size_t i = 0; i < n; ++i) {
        const double* gi = dy.row(i);
        double* di = dx.row(i);
        for (size_t o = 0; o < d_out; ++o) {
            const double g = gi[o];
            if (g == 0.0) continue;
            const double* wo = w + o * d_in;
            for (size_t k = 0; k < d_in; ++k) di[k] += g * wo[k];
        }
    }
}

// Gradients for the input-major layout: dW(in,out) += x^T . dy, dx += dy . W^T
inline void linear_t_backward_params(const Tensor& x, const Tensor& dy,
                                     double* dw, double* db, size_t d_out, size_t d_in) {
    const size_t n = x.rows();
    for (size_t i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        const double* gi = dy.row(i);
        for (size_t k = 0; k < d_in; ++k) {
            const double xv = xi[k];
            if (xv != 0.0) {
                double* dwk = dw + k * d_out;
                for (size_t o = 0; o < d_out; ++o) dwk[o] += xv * gi[o];
            }
        }
        if (db)
            for (size_t o = 0; o < d_out; ++o) db[o] += gi[o];
    }
}

inline void linear_t_backward_input(const Tensor& dy, const double* w,
                                    size_t d_out, size_t d_in, Tensor& dx) {
    const size_t n = dy.rows();
    for (size_t i = 0; i < n; ++i) {
        const double* gi = dy.row(i);
        double* di = dx.row(i);
        for (size_t k = 0; k < d_in; ++k) {
            const double* wk = w + k * d_out;
            double acc = 0.0;
            for (size_t o = 0; o < d_out; ++o) acc += gi[o] * wk[o];
            di[k] += acc;
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// Row-wise softmax, numerically stable.
inline void softmax_rows(const Tensor& z, Tensor& p) {
    p.shape = z.shape;
    p.data.resize(z.size());
    const size_t n = z.rows(), c = z.cols();
    for (size_t i = 0; i < n; ++i) {
        const double* zi = z.row(i);
        double* pi = p.data.data() + i * c;
        double m = zi[0];
        for (size_t k = 1; k < c; ++k) m = std::max(m, zi[k]);
        double s = 0.0;
        for (size_t k = 0; k < c; ++k) {
            pi[k] = std::exp(zi[k] - m);
            s += pi[k];
        }
        const double inv = 1.0 / s;
        for (size_t k = 0; k < c; ++k) pi[k] *= inv;
    }
}

inline double l1_norm(const double* v, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += std::fabs(v[i]);
    return s;
}

inline uint64_t fnv1a64_bytes(const void* p, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t digest_doubles(const std::vector<double>& v, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64_bytes(v.data(), v.size() * sizeof(double), h);
}

}  // namespace cos2p
