//! Grid types shared by the flow solver, the warper and the network glue:
//! single-channel intensity fields, two-component flow fields, bilinear
//! sampling, finite-difference operators and Gaussian pyramids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// One-channel row-major intensity grid.
///
/// Values are expected in `[0, 1]` for imagery but the type only enforces
/// finiteness, so derivative fields (gradients, divergences) share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidDimensions {
            width,
            height,
            reason: "both dimensions must be at least 2",
        });
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::InvalidDimensions {
                width,
                height,
                reason: "data length does not match width * height",
            });
        }
        check_finite(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Caller guarantees dims and finiteness.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::constant(width, height, 0.0)
    }

    /// Evaluates `f(x, y)` at every pixel.
    pub fn from_fn<F>(width: usize, height: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> f32 + Sync + Send,
    {
        check_dims(width, height)?;
        let data = par::map_pixels(width, height, f);
        check_finite(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel read with replicate padding for out-of-range integer coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Applies `f` pointwise; errors if `f` produces a non-finite value.
    pub fn map<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(f32) -> f32,
    {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn clamp01(&self) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn ensure_same_dims(&self, other: &ScalarField) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::CropTooLarge {
                crop_w: w,
                crop_h: h,
                width: self.width.saturating_sub(x0),
                height: self.height.saturating_sub(y0),
            });
        }
        check_dims(w, h)?;
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self::from_raw(w, h, data))
    }

    /// Rotates counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rot90(&self, quarter_turns: u8) -> Self {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            // new(x, y) = old(w - 1 - y, x); new dims h x w
            1 => {
                let mut data = Vec::with_capacity(w * h);
                for y in 0..w {
                    for x in 0..h {
                        data.push(self.get(w - 1 - y, x));
                    }
                }
                Self::from_raw(h, w, data)
            }
            2 => {
                let mut data = self.data.clone();
                data.reverse();
                Self::from_raw(w, h, data)
            }
            _ => {
                let mut data = Vec::with_capacity(w * h);
                for y in 0..w {
                    for x in 0..h {
                        data.push(self.get(y, h - 1 - x));
                    }
                }
                Self::from_raw(h, w, data)
            }
        }
    }
}

/// Per-pixel displacement field in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    /// Unlike [`ScalarField`], single-row or single-column flows are allowed.
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions {
                width,
                height,
                reason: "flow dimensions must be non-zero",
            });
        }
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::InvalidDimensions {
                width,
                height,
                reason: "flow component length does not match width * height",
            });
        }
        check_finite(&u)?;
        check_finite(&v)?;
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::uniform(width, height, 0.0, 0.0)
    }

    pub fn uniform(width: usize, height: usize, du: f32, dv: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![du; width * height],
            vec![dv; width * height],
        )
    }

    pub(crate) fn from_components(u: ScalarField, v: ScalarField) -> Self {
        debug_assert_eq!(u.dims(), v.dims());
        Self {
            width: u.width,
            height: u.height,
            u: u.data,
            v: v.data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn u(&self) -> &[f32] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn u_field(&self) -> ScalarField {
        ScalarField::from_raw(self.width, self.height, self.u.clone())
    }

    pub fn v_field(&self) -> ScalarField {
        ScalarField::from_raw(self.width, self.height, self.v.clone())
    }

    /// Multiplies every displacement by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|&a| a * factor).collect(),
            v: self.v.iter().map(|&a| a * factor).collect(),
        }
    }

    /// Mean of `|F|` over all pixels.
    pub fn mean_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&a, &b)| (a as f64).hypot(b as f64))
            .sum::<f64>()
            / self.u.len() as f64
    }
}

/// Gaussian image pyramid, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<ScalarField>,
    pub scale_factor: f32,
}

/// Bilinear interpolation with replicate padding outside `[0, W-1] x [0, H-1]`.
#[inline]
pub fn sample_bilinear(field: &ScalarField, x: f32, y: f32) -> f32 {
    let maxx = (field.width - 1) as f32;
    let maxy = (field.height - 1) as f32;
    let x = x.clamp(0.0, maxx);
    let y = y.clamp(0.0, maxy);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(field.width - 1);
    let y1 = (y0 + 1).min(field.height - 1);
    let w = field.width;
    let d = &field.data;
    let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
    let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Central differences in the interior, one-sided differences on the border.
pub fn gradient(field: &ScalarField) -> (ScalarField, ScalarField) {
    let (w, h) = field.dims();
    let gx = par::map_pixels(w, h, |x, y| {
        if x == 0 {
            field.get(1, y) - field.get(0, y)
        } else if x == w - 1 {
            field.get(w - 1, y) - field.get(w - 2, y)
        } else {
            0.5 * (field.get(x + 1, y) - field.get(x - 1, y))
        }
    });
    let gy = par::map_pixels(w, h, |x, y| {
        if y == 0 {
            field.get(x, 1) - field.get(x, 0)
        } else if y == h - 1 {
            field.get(x, h - 1) - field.get(x, h - 2)
        } else {
            0.5 * (field.get(x, y + 1) - field.get(x, y - 1))
        }
    });
    (
        ScalarField::from_raw(w, h, gx),
        ScalarField::from_raw(w, h, gy),
    )
}

/// Forward differences with zero on the last column/row.
///
/// This is the operator whose negative adjoint is [`divergence`].
pub fn forward_gradient(field: &ScalarField) -> (ScalarField, ScalarField) {
    let (w, h) = field.dims();
    let gx = par::map_pixels(w, h, |x, y| {
        if x + 1 < w {
            field.get(x + 1, y) - field.get(x, y)
        } else {
            0.0
        }
    });
    let gy = par::map_pixels(w, h, |x, y| {
        if y + 1 < h {
            field.get(x, y + 1) - field.get(x, y)
        } else {
            0.0
        }
    });
    (
        ScalarField::from_raw(w, h, gx),
        ScalarField::from_raw(w, h, gy),
    )
}

/// Backward-difference divergence, `div = -forward_gradient^T`.
pub fn divergence(px: &ScalarField, py: &ScalarField) -> Result<ScalarField> {
    px.ensure_same_dims(py)?;
    let (w, h) = px.dims();
    let data = par::map_pixels(w, h, |x, y| divergence_at(px.data(), py.data(), w, h, x, y));
    Ok(ScalarField::from_raw(w, h, data))
}

#[inline]
pub(crate) fn divergence_at(px: &[f32], py: &[f32], w: usize, h: usize, x: usize, y: usize) -> f32 {
    let i = y * w + x;
    let dx = if x == 0 {
        px[i]
    } else if x == w - 1 {
        -px[i - 1]
    } else {
        px[i] - px[i - 1]
    };
    let dy = if y == 0 {
        py[i]
    } else if y == h - 1 {
        -py[i - w]
    } else {
        py[i] - py[i - w]
    };
    dx + dy
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(field: &ScalarField, sigma: f32) -> ScalarField {
    if sigma <= 0.0 {
        return field.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = field.dims();
    let horiz = ScalarField::from_raw(
        w,
        h,
        par::map_pixels(w, h, |x, y| {
            k.iter()
                .enumerate()
                .map(|(j, &kv)| kv * field.get_clamped(x as isize + j as isize - r, y as isize))
                .sum()
        }),
    );
    ScalarField::from_raw(
        w,
        h,
        par::map_pixels(w, h, |x, y| {
            k.iter()
                .enumerate()
                .map(|(j, &kv)| kv * horiz.get_clamped(x as isize, y as isize + j as isize - r))
                .sum()
        }),
    )
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(field: &ScalarField, new_w: usize, new_h: usize) -> Result<ScalarField> {
    check_dims(new_w, new_h)?;
    let sx = field.width as f32 / new_w as f32;
    let sy = field.height as f32 / new_h as f32;
    let data = par::map_pixels(new_w, new_h, |x, y| {
        sample_bilinear(
            field,
            (x as f32 + 0.5) * sx - 0.5,
            (y as f32 + 0.5) * sy - 0.5,
        )
    });
    Ok(ScalarField::from_raw(new_w, new_h, data))
}

/// Output size of one pyramid step.
pub fn scaled_dims(width: usize, height: usize, factor: f32) -> (usize, usize) {
    (
        (width as f64 * factor as f64).ceil() as usize,
        (height as f64 * factor as f64).ceil() as usize,
    )
}

/// Gaussian pre-smoothing (`sigma = 0.8 * sqrt(1/factor^2 - 1)`) followed by
/// bilinear resampling to `ceil(dims * factor)`.
pub fn downsample(field: &ScalarField, factor: f32) -> Result<ScalarField> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidParams(format!(
            "downsample factor must be in (0, 1), got {factor}"
        )));
    }
    let (nw, nh) = scaled_dims(field.width, field.height, factor);
    if nw < 2 || nh < 2 {
        return Err(Error::DegenerateSize {
            width: nw,
            height: nh,
        });
    }
    let sigma = 0.8 * (1.0 / (factor * factor) - 1.0).sqrt();
    resize_bilinear(&gaussian_blur(field, sigma), nw, nh)
}

/// Repeatedly downsamples while the next level keeps `min(w, h) >= min_dim`.
/// Level 0 is `field` itself.
pub fn build_pyramid(field: &ScalarField, factor: f32, min_dim: usize) -> Result<Pyramid> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidParams(format!(
            "pyramid factor must be in (0, 1), got {factor}"
        )));
    }
    let mut levels = vec![field.clone()];
    loop {
        let last = levels.last().expect("non-empty");
        let (nw, nh) = scaled_dims(last.width, last.height, factor);
        if nw.min(nh) < min_dim.max(2) || (nw, nh) == last.dims() {
            break;
        }
        let next = downsample(last, factor)?;
        levels.push(next);
    }
    Ok(Pyramid {
        levels,
        scale_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn ramp(w: usize, h: usize) -> ScalarField {
        ScalarField::from_fn(w, h, |x, _| x as f32 / (w - 1) as f32).unwrap()
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(ScalarField::new(1, 5, vec![0.0; 5]).is_err());
        assert!(ScalarField::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            ScalarField::new(2, 2, vec![0.0, f32::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn bilinear_integer_ramp_and_clamp() {
        let f = random_field(8, 8, 1);
        assert_eq!(sample_bilinear(&f, 3.0, 5.0), f.get(3, 5));
        let r = ramp(8, 4);
        assert!((sample_bilinear(&r, 2.5, 0.0) - 2.5 / 7.0).abs() < 1e-6);
        assert_eq!(sample_bilinear(&f, -10.0, 0.0), f.get(0, 0));
        assert_eq!(sample_bilinear(&f, 100.0, 100.0), f.get(7, 7));
    }

    #[test]
    fn gradient_constant_and_ramp() {
        let c = ScalarField::constant(6, 5, 0.4).unwrap();
        let (gx, gy) = gradient(&c);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let r = ramp(9, 5);
        let (gx, _) = gradient(&r);
        for y in 0..5 {
            for x in 1..8 {
                assert!((gx.get(x, y) - 1.0 / 8.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_bruteforce() {
        let f = random_field(8, 8, 7);
        let (gx, gy) = gradient(&f);
        let at = |x: usize, y: usize| f.data()[y * 8 + x];
        for y in 0..8 {
            for x in 0..8 {
                let ex = match x {
                    0 => at(1, y) - at(0, y),
                    7 => at(7, y) - at(6, y),
                    _ => (at(x + 1, y) - at(x - 1, y)) * 0.5,
                };
                let ey = match y {
                    0 => at(x, 1) - at(x, 0),
                    7 => at(x, 7) - at(x, 6),
                    _ => (at(x, y + 1) - at(x, y - 1)) * 0.5,
                };
                assert_eq!(gx.get(x, y), ex);
                assert_eq!(gy.get(x, y), ey);
            }
        }
    }

    #[test]
    fn divergence_zero_and_constant() {
        let z = ScalarField::zeros(6, 6).unwrap();
        assert!(divergence(&z, &z).unwrap().data().iter().all(|&v| v == 0.0));

        let px = ScalarField::constant(6, 6, 0.7).unwrap();
        let d = divergence(&px, &z).unwrap();
        for y in 0..6 {
            for x in 1..5 {
                assert_eq!(d.get(x, y), 0.0);
            }
        }
    }

    fn inner(a: &ScalarField, b: &ScalarField) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    }

    #[test]
    fn adjoint_identity_random() {
        for seed in 0..5 {
            let u = random_field(6, 6, seed);
            let px = random_field(6, 6, seed + 100).map(|v| v - 0.5).unwrap();
            let py = random_field(6, 6, seed + 200).map(|v| v - 0.5).unwrap();
            let (gx, gy) = forward_gradient(&u);
            let lhs = inner(&gx, &px) + inner(&gy, &py);
            let rhs = -inner(&u, &divergence(&px, &py).unwrap());
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));
        }
    }

    #[test]
    fn downsample_dims_constant_mean() {
        let c = ScalarField::constant(64, 64, 0.3).unwrap();
        let d = downsample(&c, 0.5).unwrap();
        assert_eq!(d.dims(), (32, 32));
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        // smooth periodic field
        let s = ScalarField::from_fn(64, 64, |x, y| {
            let t = std::f32::consts::TAU;
            0.5 + 0.2 * (t * x as f32 / 32.0).sin() * (t * y as f32 / 16.0).cos()
        })
        .unwrap();
        let d = downsample(&s, 0.5).unwrap();
        assert!((d.mean() - s.mean()).abs() < 1e-3);

        assert!(matches!(
            downsample(&ScalarField::zeros(3, 2).unwrap(), 0.5),
            Err(Error::DegenerateSize { .. })
        ));
    }

    #[test]
    fn pyramid_levels() {
        let p = build_pyramid(&random_field(64, 64, 3), 0.5, 16).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16)]);
        let p = build_pyramid(&random_field(17, 17, 3), 0.5, 16).unwrap();
        assert_eq!(p.levels.len(), 1);
        let p = build_pyramid(&random_field(100, 70, 4), 0.6, 10).unwrap();
        for pair in p.levels.windows(2) {
            let (w, h) = pair[0].dims();
            assert_eq!(pair[1].dims(), scaled_dims(w, h, 0.6));
            assert!(pair[1].width() < w && pair[1].height() < h);
        }
    }

    #[test]
    fn pyramid_deterministic() {
        let f = random_field(48, 40, 9);
        let a = build_pyramid(&f, 0.5, 8).unwrap();
        let b = build_pyramid(&f, 0.5, 8).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn rotation_group() {
        let f = random_field(5, 3, 11);
        assert_eq!(f.rot90(1).rot90(1), f.rot90(2));
        assert_eq!(f.rot90(1).rot90(3), f);
        assert_eq!(f.rot90(1).dims(), (3, 5));
        // corner tracking: top-right goes to top-left under a ccw turn
        assert_eq!(f.rot90(1).get(0, 0), f.get(4, 0));
    }

    proptest! {
        #[test]
        fn bilinear_reproduces_grid_values(w in 2usize..12, h in 2usize..12, seed in 0u64..1000) {
            let f = random_field(w, h, seed);
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(sample_bilinear(&f, x as f32, y as f32), f.get(x, y));
                }
            }
        }

        #[test]
        fn adjoint_identity_holds(w in 2usize..10, h in 2usize..10, seed in 0u64..1000) {
            let u = random_field(w, h, seed);
            let px = random_field(w, h, seed ^ 0xaa).map(|v| 2.0 * v - 1.0).unwrap();
            let py = random_field(w, h, seed ^ 0x55).map(|v| 2.0 * v - 1.0).unwrap();
            let (gx, gy) = forward_gradient(&u);
            let lhs = inner(&gx, &px) + inner(&gy, &py);
            let rhs = -inner(&u, &divergence(&px, &py).unwrap());
            // relative to |grad u| |p|, the natural scale of the inner product
            let scale = (inner(&gx, &gx) + inner(&gy, &gy)).sqrt() * (inner(&px, &px) + inner(&py, &py)).sqrt();
            prop_assert!((lhs - rhs).abs() <= 1e-5 * scale.max(1e-12));
        }

        #[test]
        fn operators_stay_finite(seed in 0u64..1000, sigma in 0.1f32..3.0) {
            let f = random_field(13, 9, seed);
            let (gx, gy) = gradient(&f);
            let b = gaussian_blur(&f, sigma);
            let d = divergence(&gx, &gy).unwrap();
            for v in gx.data().iter().chain(gy.data()).chain(b.data()).chain(d.data()) {
                prop_assert!(v.is_finite());
            }
        }
    }
}
