//! Alpha-scaled backward warping.
//!
//! With `F = estimate_flow(source = I_{t+1}, target = I_t)`:
//!
//! - intermediate frame: `I_{t+a}(x) = I_t(x + a F(x))`
//! - future frame:       `I_{t+1+a}(x) = I_{t+1}(x + a F(x))`
//!
//! `F` points from a pixel of `I_{t+1}` back to where its content sat in
//! `I_t`, so warping `I_{t+1}` along `+a F` continues the observed motion.

use crate::error::{Error, Result};
use crate::grid::{sample_bilinear, FlowField, ScalarField};
use crate::par;
use crate::tvl1::{estimate_flow, Tvl1Params};

#[derive(Debug, Clone, Copy)]
pub struct WarpRequest<'a> {
    pub base: &'a ScalarField,
    pub flow: &'a FlowField,
    pub alpha: f32,
}

/// Sign applied to the interpolation flow when predicting future frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtrapolationSign {
    /// Continue the observed motion past `t+1`.
    #[default]
    Continue,
    /// Negated flow; samples back toward `t`.
    Reverse,
}

/// Anything that can correct a warped frame given the two input frames.
pub trait Refiner: Sync {
    fn refine_frame(
        &self,
        frame_t: &ScalarField,
        frame_t1: &ScalarField,
        warped: &ScalarField,
    ) -> Result<ScalarField>;

    /// Short identifier recorded in evaluation reports.
    fn fingerprint(&self) -> String {
        "refiner".to_string()
    }
}

/// `out(x) = base(x + alpha * flow(x))`, clamped to `[0, 1]`.
pub fn warp_backward(req: WarpRequest<'_>) -> Result<ScalarField> {
    let WarpRequest { base, flow, alpha } = req;
    if base.dims() != flow.dims() {
        return Err(Error::DimensionMismatch {
            expected: base.dims(),
            actual: flow.dims(),
        });
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidParams(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    let (w, h) = base.dims();
    let (u, v) = (flow.u(), flow.v());
    let data = par::map_pixels(w, h, |x, y| {
        let i = y * w + x;
        sample_bilinear(base, x as f32 + alpha * u[i], y as f32 + alpha * v[i]).clamp(0.0, 1.0)
    });
    ScalarField::new(w, h, data)
}

/// Flow used by both interpolation and extrapolation.
pub fn interpolation_flow(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    params: &Tvl1Params,
) -> Result<FlowField> {
    estimate_flow(frame_t1, frame_t, params)
}

/// Intermediate frame at `t + alpha`, `alpha` in `[0, 1]`.
pub fn interpolate(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    alpha: f32,
    params: &Tvl1Params,
) -> Result<ScalarField> {
    check_interp_alpha(alpha)?;
    frame_t.ensure_same_dims(frame_t1)?;
    if alpha == 0.0 {
        return Ok(frame_t.clone());
    }
    let flow = interpolation_flow(frame_t, frame_t1, params)?;
    interpolate_with_flow(frame_t, &flow, alpha)
}

pub fn interpolate_with_flow(
    frame_t: &ScalarField,
    flow: &FlowField,
    alpha: f32,
) -> Result<ScalarField> {
    check_interp_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(frame_t.clone());
    }
    warp_backward(WarpRequest {
        base: frame_t,
        flow,
        alpha,
    })
}

fn check_interp_alpha(alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParams(format!(
            "interpolation alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn check_extrap_alpha(alpha: f32) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "extrapolation alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

/// Future frame at `t + 1 + alpha`.
pub fn extrapolate(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    alpha: f32,
    params: &Tvl1Params,
) -> Result<ScalarField> {
    extrapolate_with(
        frame_t,
        frame_t1,
        alpha,
        params,
        ExtrapolationSign::default(),
    )
}

pub fn extrapolate_with(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    alpha: f32,
    params: &Tvl1Params,
    sign: ExtrapolationSign,
) -> Result<ScalarField> {
    check_extrap_alpha(alpha)?;
    frame_t.ensure_same_dims(frame_t1)?;
    if alpha == 0.0 {
        return Ok(frame_t1.clone());
    }
    let flow = interpolation_flow(frame_t, frame_t1, params)?;
    extrapolate_with_flow(frame_t1, &flow, alpha, sign)
}

pub fn extrapolate_with_flow(
    frame_t1: &ScalarField,
    flow: &FlowField,
    alpha: f32,
    sign: ExtrapolationSign,
) -> Result<ScalarField> {
    check_extrap_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(frame_t1.clone());
    }
    let alpha = match sign {
        ExtrapolationSign::Continue => alpha,
        ExtrapolationSign::Reverse => -alpha,
    };
    warp_backward(WarpRequest {
        base: frame_t1,
        flow,
        alpha,
    })
}

/// Iterated one-step-ahead prediction. Each prediction (refined when a
/// refiner is supplied) becomes the newest frame of the next input pair.
pub fn rollout(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    steps: usize,
    params: &Tvl1Params,
    refiner: Option<&dyn Refiner>,
) -> Result<Vec<ScalarField>> {
    if steps == 0 {
        return Err(Error::InvalidParams(
            "rollout needs at least one step".into(),
        ));
    }
    frame_t.ensure_same_dims(frame_t1)?;
    let mut prev = frame_t.clone();
    let mut cur = frame_t1.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut pred = extrapolate(&prev, &cur, 1.0, params)?;
        if let Some(r) = refiner {
            pred = r.refine_frame(&prev, &cur, &pred)?;
        }
        prev = std::mem::replace(&mut cur, pred.clone());
        out.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{generate_synthetic, SyntheticSpec, Texture};
    use crate::metrics::psnr;

    fn ramp(w: usize, h: usize) -> ScalarField {
        ScalarField::from_fn(w, h, |x, _| x as f32 / (w - 1) as f32).unwrap()
    }

    fn central(f: &ScalarField, margin: usize) -> ScalarField {
        f.crop(
            margin,
            margin,
            f.width() - 2 * margin,
            f.height() - 2 * margin,
        )
        .unwrap()
    }

    fn moving(vx: f32, vy: f32, n: usize, seed: u64) -> Vec<ScalarField> {
        let spec = SyntheticSpec {
            width: 64,
            height: 64,
            velocity: (vx, vy),
            texture: Texture::BandlimitedNoise,
            seed,
            ..Default::default()
        };
        generate_synthetic(&spec, n).unwrap().frames
    }

    #[test]
    fn alpha_zero_and_zero_flow_identity() {
        let base = ramp(9, 6);
        let flow = FlowField::uniform(9, 6, 2.0, -1.0).unwrap();
        let out = warp_backward(WarpRequest {
            base: &base,
            flow: &flow,
            alpha: 0.0,
        })
        .unwrap();
        assert_eq!(out, base);
        let zero = FlowField::zeros(9, 6).unwrap();
        for alpha in [0.3, 1.0, 7.5] {
            let out = warp_backward(WarpRequest {
                base: &base,
                flow: &zero,
                alpha,
            })
            .unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn ramp_shift_composition() {
        let w = 10;
        let base = ramp(w, 5);
        let flow = FlowField::uniform(w, 5, 1.0, 0.0).unwrap();
        let out = warp_backward(WarpRequest {
            base: &base,
            flow: &flow,
            alpha: 1.0,
        })
        .unwrap();
        for y in 0..5 {
            for x in 0..w - 1 {
                assert!((out.get(x, y) - (x + 1) as f32 / (w - 1) as f32).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_in_alpha_on_ramp() {
        let base = ramp(12, 4);
        let flow = FlowField::uniform(12, 4, 2.0, 0.0).unwrap();
        let at = |alpha| {
            warp_backward(WarpRequest {
                base: &base,
                flow: &flow,
                alpha,
            })
            .unwrap()
        };
        let (a0, a5, a1) = (at(0.0), at(0.5), at(1.0));
        for y in 0..4 {
            for x in 0..9 {
                let mid = 0.5 * (a0.get(x, y) + a1.get(x, y));
                assert!((a5.get(x, y) - mid).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let base = ramp(8, 8);
        let flow = FlowField::zeros(8, 9).unwrap();
        assert!(warp_backward(WarpRequest {
            base: &base,
            flow: &flow,
            alpha: 1.0
        })
        .is_err());
    }

    #[test]
    fn interpolate_identities() {
        let f = moving(4.0, 0.0, 2, 1);
        let p = Tvl1Params::default();
        assert_eq!(interpolate(&f[0], &f[1], 0.0, &p).unwrap(), f[0]);
        assert_eq!(extrapolate(&f[0], &f[1], 0.0, &p).unwrap(), f[1]);
        assert!(interpolate(&f[0], &f[1], 1.5, &p).is_err());
        assert!(extrapolate(&f[0], &f[1], -0.5, &p).is_err());
    }

    #[test]
    fn static_scene_is_fixed_point() {
        let f = moving(0.0, 0.0, 2, 2);
        let p = Tvl1Params::default();
        for alpha in [0.25, 0.5, 1.0] {
            let out = interpolate(&f[0], &f[0], alpha, &p).unwrap();
            assert!(psnr(&out, &f[0]).unwrap() >= 50.0);
        }
        let ext = extrapolate(&f[0], &f[0], 1.0, &p).unwrap();
        assert!(psnr(&ext, &f[0]).unwrap() >= 50.0);
    }

    #[test]
    fn midpoint_of_translating_texture() {
        // 4 px/frame: frames 0 and 2 of a 2 px/frame sequence.
        let f = moving(2.0, 0.0, 3, 3);
        let out = interpolate(&f[0], &f[2], 0.5, &Tvl1Params::default()).unwrap();
        let q = psnr(&central(&out, 8), &central(&f[1], 8)).unwrap();
        assert!(q >= 35.0, "psnr {q}");
    }

    #[test]
    fn extrapolate_continues_motion() {
        let f = moving(2.0, 0.0, 3, 4);
        let p = Tvl1Params::default();
        let out = extrapolate(&f[0], &f[1], 1.0, &p).unwrap();
        let q = psnr(&central(&out, 8), &central(&f[2], 8)).unwrap();
        assert!(q >= 30.0, "psnr {q}");
        let rev = extrapolate_with(&f[0], &f[1], 1.0, &p, ExtrapolationSign::Reverse).unwrap();
        let q_rev = psnr(&central(&rev, 8), &central(&f[2], 8)).unwrap();
        assert!(q_rev < q);
    }

    #[test]
    fn rollout_contract() {
        let f = moving(1.0, 0.0, 6, 5);
        let p = Tvl1Params::default();
        let out = rollout(&f[0], &f[1], 4, &p, None).unwrap();
        assert_eq!(out.len(), 4);
        let single = extrapolate(&f[0], &f[1], 1.0, &p).unwrap();
        assert_eq!(out[0], single);
        for (k, frame) in out.iter().enumerate() {
            assert_eq!(frame.dims(), f[0].dims());
            let q = psnr(&central(frame, 12), &central(&f[k + 2], 12)).unwrap();
            assert!(q >= 25.0, "step {} psnr {q}", k + 1);
        }
        assert!(rollout(&f[0], &f[1], 0, &p, None).is_err());
    }
}
