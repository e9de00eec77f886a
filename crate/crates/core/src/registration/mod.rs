//! Co-registration of label-free images to their post-stain counterparts:
//! integer cross-correlation search, mutual-information affine fit and
//! pyramidal block-matching elastic refinement.
//!
//! Transforms are backward maps. Warping `moving` by `T` produces the image
//! whose pixel `p` is `moving(T(p))`, so registering `moving` onto `fixed`
//! seeks `T` with `moving(T(p)) ≈ fixed(p)`. Points are `(x, y)` with `x`
//! along columns.

mod affine;
mod coarse;
mod elastic;

use std::io::{Read, Write};

use thiserror::Error;

use crate::imgproc::Plane;

pub use affine::{affine_register, AffineConfig, AffineParams, AffineResult};
pub use coarse::{coarse_match, CoarseConfig};
pub use elastic::{elastic_register, ElasticConfig, ElasticResult};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("affine search did not converge in {evaluations} evaluations")]
    NotConverged {
        evaluations: usize,
        best: Box<AffineResult>,
    },
    #[error("malformed displacement field: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

/// `[x', y'] = L·[x, y] + t`, stored as two rows `[l00, l01, tx]`,
/// `[l10, l11, ty]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if !m.iter().flatten().all(|v| v.is_finite()) || t.det().abs() <= 1e-6 {
            return Err(RegistrationError::Invalid(format!("singular or non-finite affine {m:?}")));
        }
        Ok(t)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Self { m }
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-6 {
            return Err(RegistrationError::Invalid("singular affine".into()));
        }
        let m = &self.m;
        let (a, b, c, e) = (m[1][1] / d, -m[0][1] / d, -m[1][0] / d, m[0][0] / d);
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + e * m[1][2]);
        Ok(Self {
            m: [[a, b, tx], [c, e, ty]],
        })
    }

    /// Largest coefficient difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense backward displacement: `warp(moving)(p) = moving(p + u(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dy: Plane,
    pub dx: Plane,
}

const DFLD_MAGIC: &[u8; 4] = b"DFLD";

impl DisplacementField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            dy: Plane::zeros(h, w),
            dx: Plane::zeros(h, w),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        Self {
            dy: Plane::from_fn(h, w, |y, x| f(y, x).0),
            dx: Plane::from_fn(h, w, |y, x| f(y, x).1),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.dy.h, self.dy.w)
    }

    pub fn negate(&self) -> Self {
        Self {
            dy: self.dy.map(|v| -v),
            dx: self.dx.map(|v| -v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dy.data.iter().chain(&self.dx.data).all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dy
            .data
            .iter()
            .zip(&self.dx.data)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Largest forward-difference of either component.
    pub fn max_gradient(&self) -> f64 {
        let (h, w) = self.shape();
        let mut g: f64 = 0.0;
        for p in [&self.dy, &self.dx] {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        g = g.max((p.get(y, x + 1) - p.get(y, x)).abs());
                    }
                    if y + 1 < h {
                        g = g.max((p.get(y + 1, x) - p.get(y, x)).abs());
                    }
                }
            }
        }
        g
    }

    /// Mean Euclidean distance to `other` over pixels at least `margin`
    /// from the border.
    pub fn mean_endpoint_error(&self, other: &Self, margin: usize) -> f64 {
        let (h, w) = self.shape();
        let mut s = 0.0;
        let mut n = 0usize;
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                s += (self.dy.get(y, x) - other.dy.get(y, x)).hypot(self.dx.get(y, x) - other.dx.get(y, x));
                n += 1;
            }
        }
        s / n.max(1) as f64
    }

    /// 8-byte header (`DFLD`, u16 height, u16 width, little-endian) then
    /// the `dy` plane and the `dx` plane as little-endian `f32`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (h, wd) = self.shape();
        let (h16, w16) = (u16::try_from(h), u16::try_from(wd));
        let (Ok(h16), Ok(w16)) = (h16, w16) else {
            return Err(RegistrationError::Invalid(format!("field {h}x{wd} too large for the format")));
        };
        w.write_all(DFLD_MAGIC)?;
        w.write_all(&h16.to_le_bytes())?;
        w.write_all(&w16.to_le_bytes())?;
        for p in [&self.dy, &self.dx] {
            for &v in &p.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        if &header[..4] != DFLD_MAGIC {
            return Err(RegistrationError::Format("bad magic".into()));
        }
        let h = u16::from_le_bytes([header[4], header[5]]) as usize;
        let w = u16::from_le_bytes([header[6], header[7]]) as usize;
        let mut buf = vec![0u8; 8 * h * w];
        r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let (dy, dx) = vals.split_at(h * w);
        let field = Self {
            dy: Plane::new(h, w, dy.to_vec()),
            dx: Plane::new(h, w, dx.to_vec()),
        };
        if !field.is_finite() {
            return Err(RegistrationError::Format("non-finite displacement".into()));
        }
        Ok(field)
    }
}

pub enum Transform<'a> {
    Affine(&'a AffineTransform),
    Field(&'a DisplacementField),
}

/// Bilinear resampling of `image` under `transform`; samples outside the
/// image replicate the nearest edge pixel.
pub fn warp_image(image: &Plane, transform: Transform<'_>) -> Result<Plane> {
    match transform {
        Transform::Affine(t) => Ok(warp_affine(image, t)),
        Transform::Field(f) => warp_field(image, f),
    }
}

pub fn warp_affine(image: &Plane, t: &AffineTransform) -> Plane {
    Plane::from_fn(image.h, image.w, |y, x| {
        let (sx, sy) = t.apply(x as f64, y as f64);
        image.sample(sy, sx)
    })
}

pub fn warp_field(image: &Plane, f: &DisplacementField) -> Result<Plane> {
    if f.shape() != (image.h, image.w) {
        return Err(RegistrationError::Invalid(format!(
            "field {:?} does not match image {}x{}",
            f.shape(),
            image.h,
            image.w
        )));
    }
    Ok(Plane::from_fn(image.h, image.w, |y, x| {
        image.sample(y as f64 + f.dy.get(y, x), x as f64 + f.dx.get(y, x))
    }))
}

/// Output of [`register_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub coarse_offset: (isize, isize),
    pub affine: AffineTransform,
    pub field: DisplacementField,
    pub textureless_blocks: usize,
}

impl PipelineResult {
    /// Net backward map `p -> A(p + u(p))` as a displacement field.
    pub fn total_displacement(&self) -> DisplacementField {
        let (h, w) = self.field.shape();
        DisplacementField::from_fn(h, w, |y, x| {
            let qy = y as f64 + self.field.dy.get(y, x);
            let qx = x as f64 + self.field.dx.get(y, x);
            let (sx, sy) = self.affine.apply(qx, qy);
            (sy - y as f64, sx - x as f64)
        })
    }

    /// `moving` resampled onto the fixed grid.
    pub fn apply(&self, moving: &Plane) -> Result<Plane> {
        warp_field(moving, &self.total_displacement())
    }
}

/// Coarse → affine → elastic registration of same-size images.
///
/// `proxy` renders the (affinely aligned) moving image into the fixed
/// image's modality for the correlation-based elastic stage; use the
/// identity when both share a modality.
pub fn register_pipeline(
    moving: &Plane,
    fixed: &Plane,
    coarse: &CoarseConfig,
    affine: &AffineConfig,
    elastic: &ElasticConfig,
    proxy: &dyn Fn(&Plane) -> Plane,
) -> Result<PipelineResult> {
    if (moving.h, moving.w) != (fixed.h, fixed.w) {
        return Err(RegistrationError::Invalid("pipeline expects same-size images".into()));
    }
    let (dy, dx) = coarse_match(moving, fixed, coarse)?;
    let init = AffineTransform::translation(-(dx as f64), -(dy as f64));
    let fit = affine_register(moving, fixed, &init, affine)?;
    let aligned = warp_affine(moving, &fit.transform);
    let el = elastic_register(&proxy(&aligned), fixed, elastic)?;
    Ok(PipelineResult {
        coarse_offset: (dy, dx),
        affine: fit.transform,
        field: el.field,
        textureless_blocks: el.textureless_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_algebra() {
        let a = AffineTransform::new([[1.1, 0.2, 3.0], [-0.1, 0.9, -2.0]]).unwrap();
        let i = a.compose(&a.inverse().unwrap());
        assert!(i.max_abs_diff(&AffineTransform::IDENTITY) < 1e-12);
        assert!(AffineTransform::new([[1.0, 2.0, 0.0], [0.5, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn dfld_round_trip() {
        let f = DisplacementField::from_fn(5, 7, |y, x| (y as f64 * 0.25, -(x as f64) * 0.5));
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DFLD");
        assert_eq!(buf.len(), 8 + 2 * 4 * 35);
        assert_eq!(DisplacementField::read_from(&buf[..]).unwrap(), f);
        assert!(DisplacementField::read_from(&b"XXXX\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn identity_warps() {
        let p = Plane::from_fn(6, 6, |y, x| (y * 6 + x) as f64);
        assert_eq!(warp_affine(&p, &AffineTransform::IDENTITY), p);
        assert_eq!(warp_field(&p, &DisplacementField::zeros(6, 6)).unwrap(), p);
    }
}
