//! Small numerical utilities shared across modules: 3-vector arithmetic,
//! a pivoted 6×6 determinant, a radix-2 complex FFT used by the accelerated
//! Poisson path, and least-squares slope fits for convergence studies.

/// Euclidean 3-vector. Plain arrays keep call sites terse and copyable.
pub type Vec3 = [f64; 3];

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Determinant of a 6×6 matrix by LU decomposition with partial pivoting.
/// Used for finite-difference flow-Jacobian determinants.
pub fn det6(m: &[[f64; 6]; 6]) -> f64 {
    let mut a = *m;
    let mut det = 1.0;
    for col in 0..6 {
        let mut pivot = col;
        for row in col + 1..6 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..6 {
            let factor = a[row][col] / a[col][col];
            for k in col..6 {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    det
}

/// Complex number for the FFT path. Hand-rolled to keep the dependency set
/// minimal; only the operations the convolution needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    #[inline]
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    #[inline]
    pub fn mul(self, other: Complex) -> Complex {
        Complex {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }

    #[inline]
    pub fn add(self, other: Complex) -> Complex {
        Complex {
            re: self.re + other.re,
            im: self.im + other.im,
        }
    }

    #[inline]
    pub fn sub(self, other: Complex) -> Complex {
        Complex {
            re: self.re - other.re,
            im: self.im - other.im,
        }
    }
}

/// In-place iterative radix-2 Cooley–Tukey FFT. `data.len()` must be a power
/// of two. `inverse` applies the conjugate transform *without* the 1/n
/// normalization (callers fold it into their own scaling).
pub fn fft_radix2(data: &mut [Complex], inverse: bool) {
    let n = data.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2usize;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = data[i + k];
                let v = data[i + k + len / 2].mul(w);
                data[i + k] = u.add(v);
                data[i + k + len / 2] = u.sub(v);
                w = w.mul(wlen);
            }
            i += len;
        }
        len <<= 1;
    }
}

/// In-place 3D FFT on an `m × m × m` cube stored row-major (`x` slowest,
/// `z` contiguous). Applies [`fft_radix2`] along each axis; the inverse
/// carries no 1/m³ normalization.
pub fn fft3(data: &mut [Complex], m: usize, inverse: bool) {
    assert_eq!(data.len(), m * m * m, "fft3 buffer shape mismatch");
    // z-axis: contiguous lines.
    for line in data.chunks_mut(m) {
        fft_radix2(line, inverse);
    }
    let mut line = vec![Complex::ZERO; m];
    // y-axis: stride m.
    for ix in 0..m {
        for iz in 0..m {
            let base = ix * m * m + iz;
            for (iy, slot) in line.iter_mut().enumerate() {
                *slot = data[base + iy * m];
            }
            fft_radix2(&mut line, inverse);
            for (iy, slot) in line.iter().enumerate() {
                data[base + iy * m] = *slot;
            }
        }
    }
    // x-axis: stride m².
    for iy in 0..m {
        for iz in 0..m {
            let base = iy * m + iz;
            for (ix, slot) in line.iter_mut().enumerate() {
                *slot = data[base + ix * m * m];
            }
            fft_radix2(&mut line, inverse);
            for (ix, slot) in line.iter().enumerate() {
                data[base + ix * m * m] = *slot;
            }
        }
    }
}

/// Least-squares line fit `y ≈ slope·x + intercept`; returns (slope, intercept).
/// Panics if fewer than two samples are supplied.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two samples for a line fit");
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    assert!(denom.abs() > 0.0, "degenerate abscissae in line fit");
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (slope, intercept)
}

/// Median of a slice (not necessarily sorted); averages the middle pair for
/// even lengths. Panics on empty input.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in median input"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// FNV-1a 64-bit hash, hex-encoded. Used as a deterministic integrity
/// fingerprint for exported artifacts (not a cryptographic hash).
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cross_product_is_right_handed() {
        let c = cross3([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(c, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn det6_identity_and_scaling() {
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            m[i][i] = 1.0;
        }
        assert_relative_eq!(det6(&m), 1.0);
        m[2][2] = 3.0;
        m[0][5] = 7.0; // upper-triangular entry leaves the determinant alone
        assert_relative_eq!(det6(&m), 3.0);
    }

    #[test]
    fn det6_matches_permutation_sign() {
        let mut m = [[0.0; 6]; 6];
        // permutation (0 1)(2)(3)(4)(5): determinant -1
        m[0][1] = 1.0;
        m[1][0] = 1.0;
        for i in 2..6 {
            m[i][i] = 1.0;
        }
        assert_relative_eq!(det6(&m), -1.0);
    }

    #[test]
    fn fft_roundtrip_recovers_signal() {
        let n = 64;
        let mut data: Vec<Complex> = (0..n)
            .map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let orig = data.clone();
        fft_radix2(&mut data, false);
        fft_radix2(&mut data, true);
        for (a, b) in data.iter().zip(&orig) {
            assert_relative_eq!(a.re / n as f64, b.re, epsilon = 1e-12);
            assert_relative_eq!(a.im / n as f64, b.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 16;
        let mut data: Vec<Complex> = (0..n)
            .map(|i| Complex::new(1.0 / (1.0 + i as f64), (i as f64).sqrt()))
            .collect();
        let reference: Vec<Complex> = (0..n)
            .map(|k| {
                let mut acc = Complex::ZERO;
                for (i, x) in data.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    acc = acc.add(x.mul(Complex::new(ang.cos(), ang.sin())));
                }
                acc
            })
            .collect();
        fft_radix2(&mut data, false);
        for (a, b) in data.iter().zip(&reference) {
            assert_relative_eq!(a.re, b.re, epsilon = 1e-10);
            assert_relative_eq!(a.im, b.im, epsilon = 1e-10);
        }
    }

    #[test]
    fn fft3_roundtrip_recovers_input() {
        let m = 8;
        let original: Vec<Complex> = (0..m * m * m)
            .map(|i| Complex::new((i % 17) as f64 - 8.0, ((i * 7) % 5) as f64))
            .collect();
        let mut data = original.clone();
        fft3(&mut data, m, false);
        fft3(&mut data, m, true);
        let scale = 1.0 / (m * m * m) as f64;
        for (a, b) in data.iter().zip(&original) {
            assert_relative_eq!(a.re * scale, b.re, epsilon = 1e-10);
            assert_relative_eq!(a.im * scale, b.im, epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (slope, intercept) = linear_fit(&xs, &ys);
        assert_relative_eq!(slope, 2.0, epsilon = 1e-12);
        assert_relative_eq!(intercept, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn fnv_hash_is_stable() {
        // Published FNV-1a reference value for the input "hello".
        assert_eq!(fnv1a64_hex(b"hello"), "a430d84680aabd0b");
    }
}
