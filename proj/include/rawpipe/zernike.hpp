#pragma once

#include <cmath>
#include <stdexcept>

namespace rawpipe {

// Zernike polynomials over the unit disk, Noll single-index convention:
// even j carries cos(m*phi), odd j sin(m*phi), Noll normalization
// (sqrt(n+1) for m = 0, sqrt(2(n+1)) otherwise) so distinct modes are
// orthonormal under the disk average.
namespace zernike {

struct NM {
    int n;
    int m;  // signed; m < 0 selects the sin term
};

inline NM noll_to_nm(int j) {
    if (j < 1) throw std::invalid_argument("zernike: Noll index must be >= 1");
    int n = 0;
    while ((n + 1) * (n + 2) / 2 < j) ++n;
    const int in_row = j - n * (n + 1) / 2 - 1;  // 0-based position within the row
    int m_abs;
    if (n % 2 == 0)
        m_abs = 2 * ((in_row + 1) / 2);
    else
        m_abs = 2 * (in_row / 2) + 1;
    const int m = (j % 2 == 0) ? m_abs : -m_abs;
    return {n, m};
}

inline double radial(int n, int m_abs, double rho) {
    double sum = 0.0;
    for (int k = 0; k <= (n - m_abs) / 2; ++k) {
        double term = (k % 2 == 0) ? 1.0 : -1.0;
        term *= std::tgamma(double(n - k) + 1.0);
        term /= std::tgamma(double(k) + 1.0);
        term /= std::tgamma(double((n + m_abs) / 2 - k) + 1.0);
        term /= std::tgamma(double((n - m_abs) / 2 - k) + 1.0);
        sum += term * std::pow(rho, double(n - 2 * k));
    }
    return sum;
}

inline double eval(int noll_index, double rho, double phi) {
    if (rho < 0.0 || rho > 1.0)
        throw std::invalid_argument("zernike: rho must lie in [0,1]");
    const NM nm = noll_to_nm(noll_index);
    const int m_abs = std::abs(nm.m);
    const double norm = (nm.m == 0) ? std::sqrt(double(nm.n + 1))
                                    : std::sqrt(2.0 * double(nm.n + 1));
    const double r = radial(nm.n, m_abs, rho);
    if (nm.m == 0) return norm * r;
    if (nm.m > 0) return norm * r * std::cos(m_abs * phi);
    return norm * r * std::sin(m_abs * phi);
}

}  // namespace zernike
}  // namespace rawpipe
