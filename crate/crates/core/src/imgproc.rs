//! Single-channel `f64` image planes and the classical filters shared by
//! data synthesis and registration.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Mirror `i` into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "plane data length");
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![0.0; h * w])
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    /// Channel `c` of a `[C, H, W]` tensor.
    pub fn from_channel<T: Real>(t: &Tensor<T>, c: usize) -> Self {
        let (_, h, w) = t.chw().expect("[C, H, W] tensor");
        let data = t.channel(c).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        Self { h, w, data }
    }

    /// Stack planes of equal size into a `[C, H, W]` tensor.
    pub fn stack<T: Real>(planes: &[Plane]) -> Tensor<T> {
        let (h, w) = (planes[0].h, planes[0].w);
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            assert_eq!((p.h, p.w), (h, w), "plane sizes differ");
            data.extend(p.data.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(vec![planes.len(), h, w], data).expect("consistent shape")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    /// Sample with edge replication outside the grid.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.get(yy, xx)
    }

    /// Bilinear interpolation at real coordinates with edge replication.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let a = self.get_clamped(y0, x0);
        let b = self.get_clamped(y0, x0 + 1);
        let c = self.get_clamped(y0 + 1, x0);
        let d = self.get_clamped(y0 + 1, x0 + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// Separable convolution with a symmetric kernel, mirrored borders.
    pub fn convolve_separable(&self, k: &[f64]) -> Plane {
        let r = (k.len() / 2) as isize;
        let mut tmp = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * self.get(y, reflect(x as isize + i as isize - r, self.w));
                }
                tmp.set(y, x, s);
            }
        }
        let mut out = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * tmp.get(reflect(y as isize + i as isize - r, self.h), x);
                }
                out.set(y, x, s);
            }
        }
        out
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        self.convolve_separable(&gaussian_kernel_1d(sigma))
    }

    /// Mean central-difference gradient magnitude over interior pixels.
    pub fn mean_gradient(&self) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for y in 1..self.h - 1 {
            for x in 1..self.w - 1 {
                let gx = 0.5 * (self.get(y, x + 1) - self.get(y, x - 1));
                let gy = 0.5 * (self.get(y + 1, x) - self.get(y - 1, x));
                s += (gx * gx + gy * gy).sqrt();
                n += 1;
            }
        }
        s / n.max(1) as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    /// Copy of the `h × w` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Plane {
        assert!(y + h <= self.h && x + w <= self.w, "crop out of bounds");
        Plane::from_fn(h, w, |r, c| self.get(y + r, x + c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane::new(self.h, self.w, self.data.iter().map(|&v| f(v)).collect())
    }
}
