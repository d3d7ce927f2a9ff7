//! Real-input discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 kernel; every other length
//! goes through Bluestein's chirp-z reduction onto a power-of-two kernel.
//! Real sequences of even length are packed into a half-length complex
//! transform, and only the `n/2 + 1` non-redundant bins are ever stored.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Half-complex spectrum of a real sequence of length `origin_length`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    bins: Vec<Complex64>,
    origin_length: usize,
}

impl Spectrum {
    /// Number of stored bins for a real input of length `n`.
    pub fn bin_count(n: usize) -> usize {
        n / 2 + 1
    }

    pub fn new(bins: Vec<Complex64>, origin_length: usize) -> Result<Self> {
        if origin_length == 0 {
            return Err(Error::invalid("spectrum of an empty sequence"));
        }
        if bins.len() != Self::bin_count(origin_length) {
            return Err(Error::invalid(format!(
                "{} bins given for a length-{origin_length} sequence, expected {}",
                bins.len(),
                Self::bin_count(origin_length)
            )));
        }
        Ok(Self {
            bins,
            origin_length,
        })
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Checks the bins that must be real for a real-valued source.
    pub fn check_symmetry(&self) -> Result<()> {
        let scale = self.bins.iter().map(|c| c.norm()).fold(1.0, f64::max);
        let tol = 1e-9 * scale;
        if self.bins[0].im.abs() > tol {
            return Err(Error::invalid(format!(
                "DC bin has imaginary part {}",
                self.bins[0].im
            )));
        }
        if self.origin_length.is_multiple_of(2) {
            let nyq = self.bins[self.origin_length / 2];
            if nyq.im.abs() > tol {
                return Err(Error::invalid(format!(
                    "Nyquist bin has imaginary part {}",
                    nyq.im
                )));
            }
        }
        Ok(())
    }
}

/// Precomputed complex FFT of a fixed length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    kernel: Kernel,
}

#[derive(Clone, Debug)]
enum Kernel {
    Trivial,
    Radix2(Radix2),
    Bluestein {
        inner: Radix2,
        chirp: Vec<Complex64>,
        filter_fft: Vec<Complex64>,
    },
}

#[derive(Clone, Debug)]
struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        if n <= 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let u = buf[start + k];
                    let v = buf[start + k + half] * w;
                    buf[start + k] = u + v;
                    buf[start + k + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        let kernel = if n <= 1 {
            Kernel::Trivial
        } else if n.is_power_of_two() {
            Kernel::Radix2(Radix2::new(n))
        } else {
            let m = (2 * n - 1).next_power_of_two();
            let inner = Radix2::new(m);
            // k^2 is reduced mod 2n before scaling so the phase stays accurate.
            let chirp: Vec<Complex64> = (0..n)
                .map(|k| {
                    let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                    Complex64::from_polar(1.0, -PI * k2 / n as f64)
                })
                .collect();
            let mut filter = vec![Complex64::new(0.0, 0.0); m];
            filter[0] = chirp[0].conj();
            for k in 1..n {
                filter[k] = chirp[k].conj();
                filter[m - k] = chirp[k].conj();
            }
            inner.forward(&mut filter);
            Kernel::Bluestein {
                inner,
                chirp,
                filter_fft: filter,
            }
        };
        Self { n, kernel }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        match &self.kernel {
            Kernel::Trivial => {}
            Kernel::Radix2(r) => r.forward(buf),
            Kernel::Bluestein {
                inner,
                chirp,
                filter_fft,
            } => {
                let m = inner.n;
                let mut work = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..self.n {
                    work[k] = buf[k] * chirp[k];
                }
                inner.forward(&mut work);
                for (w, f) in work.iter_mut().zip(filter_fft) {
                    *w = (*w * f).conj();
                }
                // inverse via conjugation: ifft(x) = conj(fft(conj(x))) / m
                inner.forward(&mut work);
                let scale = 1.0 / m as f64;
                for k in 0..self.n {
                    buf[k] = work[k].conj() * scale * chirp[k];
                }
            }
        }
    }

    /// Unnormalized inverse transform, in place.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        for v in buf.iter_mut() {
            *v = v.conj();
        }
    }
}

/// Reusable real-to-half-complex transform for one sequence length.
#[derive(Clone, Debug)]
pub struct RealFft {
    n: usize,
    inner: FftPlan,
    /// exp(-2πik/n) for k in 0..=n/2, used by the even-length packing.
    twiddles: Vec<Complex64>,
}

impl RealFft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("transform of an empty sequence"));
        }
        let inner = if n.is_multiple_of(2) {
            FftPlan::new(n / 2)
        } else {
            FftPlan::new(n)
        };
        let twiddles = if n.is_multiple_of(2) {
            (0..=n / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { n, inner, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bin_count(&self) -> usize {
        Spectrum::bin_count(self.n)
    }

    /// Forward transform into a caller-provided half-complex buffer.
    pub fn forward_into(&self, x: &[f64], out: &mut [Complex64]) {
        let n = self.n;
        assert_eq!(x.len(), n);
        assert_eq!(out.len(), self.bin_count());
        if n == 1 {
            out[0] = Complex64::new(x[0], 0.0);
            return;
        }
        if n % 2 == 1 {
            let mut full: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            self.inner.forward(&mut full);
            out.copy_from_slice(&full[..out.len()]);
            out[0].im = 0.0;
            return;
        }
        let half = n / 2;
        let mut z: Vec<Complex64> = (0..half)
            .map(|m| Complex64::new(x[2 * m], x[2 * m + 1]))
            .collect();
        self.inner.forward(&mut z);
        let i = Complex64::new(0.0, 1.0);
        for k in 0..=half {
            let zk = z[k % half];
            let zr = z[(half - k) % half].conj();
            let even = (zk + zr) * 0.5;
            let odd = (zk - zr) * (-0.5 * i);
            out[k] = even + self.twiddles[k] * odd;
        }
        out[0].im = 0.0;
        out[half].im = 0.0;
    }

    pub fn forward(&self, x: &[f64]) -> Result<Spectrum> {
        if x.len() != self.n {
            return Err(Error::invalid(format!(
                "plan for length {} applied to length {}",
                self.n,
                x.len()
            )));
        }
        let mut bins = vec![Complex64::new(0.0, 0.0); self.bin_count()];
        self.forward_into(x, &mut bins);
        Ok(Spectrum {
            bins,
            origin_length: self.n,
        })
    }

    /// Inverse transform of half-complex bins, normalized by `1/n`.
    ///
    /// The imaginary parts of the DC and Nyquist bins are ignored.
    pub fn inverse_into(&self, bins: &[Complex64], out: &mut [f64]) {
        let n = self.n;
        assert_eq!(bins.len(), self.bin_count());
        assert_eq!(out.len(), n);
        if n == 1 {
            out[0] = bins[0].re;
            return;
        }
        if n % 2 == 1 {
            let scale = 1.0 / n as f64;
            let mut full = vec![Complex64::new(0.0, 0.0); n];
            full[0] = Complex64::new(bins[0].re, 0.0);
            for k in 1..bins.len() {
                full[k] = bins[k];
                full[n - k] = bins[k].conj();
            }
            self.inner.inverse(&mut full);
            for (o, v) in out.iter_mut().zip(&full) {
                *o = v.re * scale;
            }
            return;
        }
        let half = n / 2;
        let i = Complex64::new(0.0, 1.0);
        let mut z: Vec<Complex64> = (0..half)
            .map(|k| {
                let xk = if k == 0 {
                    Complex64::new(bins[0].re, 0.0)
                } else {
                    bins[k]
                };
                let xr = if k == 0 {
                    Complex64::new(bins[half].re, 0.0)
                } else {
                    bins[half - k].conj()
                };
                let even = (xk + xr) * 0.5;
                let odd = (xk - xr) * 0.5 * self.twiddles[k].conj();
                even + i * odd
            })
            .collect();
        self.inner.inverse(&mut z);
        let zscale = 1.0 / half as f64;
        for m in 0..half {
            out[2 * m] = z[m].re * zscale;
            out[2 * m + 1] = z[m].im * zscale;
        }
    }

    pub fn inverse(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        if spectrum.origin_length != self.n {
            return Err(Error::invalid(format!(
                "plan for length {} applied to a length-{} spectrum",
                self.n, spectrum.origin_length
            )));
        }
        spectrum.check_symmetry()?;
        let mut out = vec![0.0; self.n];
        self.inverse_into(&spectrum.bins, &mut out);
        Ok(out)
    }
}

/// Half-complex DFT of a real sequence.
pub fn dft(x: &[f64]) -> Result<Spectrum> {
    RealFft::new(x.len())?.forward(x)
}

/// Inverse of [`dft`]; the result is real by construction.
pub fn idft(spectrum: &Spectrum) -> Result<Vec<f64>> {
    RealFft::new(spectrum.origin_length)?.inverse(spectrum)
}

/// Full-length complex DFT (unnormalized).
pub fn complex_dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPlan::new(x.len()).forward(&mut buf);
    buf
}

/// Full-length complex inverse DFT, normalized by `1/n`.
pub fn complex_idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPlan::new(x.len()).inverse(&mut buf);
    let scale = 1.0 / x.len().max(1) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
    buf
}
