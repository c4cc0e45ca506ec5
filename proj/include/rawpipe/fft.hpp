#pragma once

#include <complex>
#include <stdexcept>
#include <vector>

namespace rawpipe {

using cplx = std::complex<double>;

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// In-place iterative radix-2 transform, unnormalized. sign = -1 gives the
// forward DFT convention sum x_n e^{-2*pi*i*k*n/N}; sign = +1 its adjoint.
// Callers apply 1/N scaling where an inverse is meant.
inline void fft_inplace(std::vector<cplx>& a, int sign) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw std::invalid_argument("fft_inplace: length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * 3.14159265358979323846 / double(len);
        const cplx wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const cplx u = a[i + k];
                const cplx v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// 2-d transform over a row-major rows x cols grid (both powers of two).
inline void fft2_inplace(std::vector<cplx>& a, std::size_t rows, std::size_t cols, int sign) {
    if (a.size() != rows * cols) throw std::invalid_argument("fft2_inplace: size mismatch");
    std::vector<cplx> tmp(std::max(rows, cols));
    for (std::size_t r = 0; r < rows; ++r) {
        tmp.assign(a.begin() + long(r * cols), a.begin() + long((r + 1) * cols));
        fft_inplace(tmp, sign);
        std::copy(tmp.begin(), tmp.end(), a.begin() + long(r * cols));
    }
    for (std::size_t c = 0; c < cols; ++c) {
        tmp.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) tmp[r] = a[r * cols + c];
        fft_inplace(tmp, sign);
        for (std::size_t r = 0; r < rows; ++r) a[r * cols + c] = tmp[r];
    }
}

}  // namespace rawpipe
