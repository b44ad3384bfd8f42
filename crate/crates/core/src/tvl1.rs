//! Duality-based TV-L1 optical flow.
//!
//! Minimises `lambda * sum |rho(u)| + sum |grad u|` coarse-to-fine. At each
//! pyramid level the target is warped by the current flow, the brightness
//! residual is linearised, and the solver alternates a pointwise three-case
//! shrinkage on the data term with a Chambolle dual-projection step on the
//! TV term. A 3x3 median filter on the flow follows every warp.
//!
//! Direction convention: `estimate_flow(source, target)` returns `F` with
//! `target(x + F(x)) ~= source(x)`, i.e. the field that backward-warps the
//! target onto the source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, sample_bilinear, FlowField, ScalarField};
use crate::par;

/// Below this squared gradient magnitude the data step is skipped.
const MIN_GRAD_SQ: f32 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tvl1Params {
    /// Dual time step. Stable for `tau <= 0.25`.
    pub tau: f32,
    /// Data attachment weight.
    pub lambda: f32,
    /// Coupling between the data and TV sub-problems.
    pub theta: f32,
    pub warps_per_level: usize,
    pub iters_per_warp: usize,
    /// Inner loop stops once the mean per-pixel update `|u - u_prev|` drops below this.
    pub stop_epsilon: f32,
    pub pyramid_factor: f32,
    pub pyramid_min_dim: usize,
    pub median_filter: bool,
    /// Inputs in `[0, 1]` are multiplied by this before solving, so that
    /// `lambda` keeps its usual calibration for 8-bit intensities.
    pub intensity_scale: f32,
}

impl Default for Tvl1Params {
    fn default() -> Self {
        Self {
            tau: 0.25,
            lambda: 0.15,
            theta: 0.3,
            warps_per_level: 5,
            iters_per_warp: 30,
            stop_epsilon: 0.01,
            pyramid_factor: 0.5,
            pyramid_min_dim: 16,
            median_filter: true,
            intensity_scale: 255.0,
        }
    }
}

impl Tvl1Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad(format!("tau must be in (0, 0.25], got {}", self.tau));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be > 0, got {}", self.theta));
        }
        if self.warps_per_level == 0 || self.iters_per_warp == 0 {
            return bad("warps_per_level and iters_per_warp must be >= 1".into());
        }
        if !(self.stop_epsilon >= 0.0 && self.stop_epsilon.is_finite()) {
            return bad(format!(
                "stop_epsilon must be >= 0, got {}",
                self.stop_epsilon
            ));
        }
        if !(self.pyramid_factor > 0.0 && self.pyramid_factor < 1.0) {
            return bad(format!(
                "pyramid_factor must be in (0, 1), got {}",
                self.pyramid_factor
            ));
        }
        if self.pyramid_min_dim < 2 {
            return bad("pyramid_min_dim must be >= 2".into());
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return bad(format!(
                "intensity_scale must be > 0, got {}",
                self.intensity_scale
            ));
        }
        Ok(())
    }
}

/// Diagnostics collected by [`estimate_flow_traced`].
#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    /// Largest per-pixel `|p|` seen after any dual iteration, over both flow components.
    pub max_dual_norm: f32,
    /// Number of dual iterations checked.
    pub dual_iterations: usize,
    /// TV-L1 energy at the end of every warp on the finest level.
    pub finest_energies: Vec<f64>,
}

/// Estimates the flow pulling `target` onto `source`.
pub fn estimate_flow(
    source: &ScalarField,
    target: &ScalarField,
    params: &Tvl1Params,
) -> Result<FlowField> {
    Solver::new(params, None).run(source, target)
}

/// [`estimate_flow`] plus dual-feasibility and energy diagnostics.
///
/// Panics in debug builds if any dual variable leaves the unit ball.
pub fn estimate_flow_traced(
    source: &ScalarField,
    target: &ScalarField,
    params: &Tvl1Params,
) -> Result<(FlowField, SolverTrace)> {
    let mut trace = SolverTrace::default();
    let flow = Solver::new(params, Some(&mut trace)).run(source, target)?;
    Ok((flow, trace))
}

/// Per-component 3x3 median with replicate borders.
pub fn median_filter_flow(flow: &FlowField) -> FlowField {
    let (w, h) = flow.dims();
    FlowField::from_components(
        ScalarField::from_raw(w, h, median3x3(flow.u(), w, h)),
        ScalarField::from_raw(w, h, median3x3(flow.v(), w, h)),
    )
}

fn median3x3(data: &[f32], w: usize, h: usize) -> Vec<f32> {
    par::map_pixels(w, h, |x, y| {
        let mut win = [0.0f32; 9];
        let mut k = 0;
        for dy in -1isize..=1 {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for dx in -1isize..=1 {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                win[k] = data[yy * w + xx];
                k += 1;
            }
        }
        win.sort_unstable_by(f32::total_cmp);
        win[4]
    })
}

/// Flow plus dual variables for one pyramid level.
struct LevelState {
    w: usize,
    h: usize,
    u1: Vec<f32>,
    u2: Vec<f32>,
    p11: Vec<f32>,
    p12: Vec<f32>,
    p21: Vec<f32>,
    p22: Vec<f32>,
}

impl LevelState {
    fn zeros(w: usize, h: usize) -> Self {
        let z = vec![0.0f32; w * h];
        Self {
            w,
            h,
            u1: z.clone(),
            u2: z.clone(),
            p11: z.clone(),
            p12: z.clone(),
            p21: z.clone(),
            p22: z,
        }
    }

    /// Resizes to a finer level; displacements are rescaled by the size ratio.
    fn upscale(&self, w: usize, h: usize) -> Result<Self> {
        let resize = |d: &Vec<f32>, mul: f32| -> Result<Vec<f32>> {
            let f = ScalarField::from_raw(self.w, self.h, d.clone());
            let mut r = grid::resize_bilinear(&f, w, h)?.into_data();
            if mul != 1.0 {
                r.iter_mut().for_each(|v| *v *= mul);
            }
            Ok(r)
        };
        let sx = w as f32 / self.w as f32;
        let sy = h as f32 / self.h as f32;
        Ok(Self {
            w,
            h,
            u1: resize(&self.u1, sx)?,
            u2: resize(&self.u2, sy)?,
            p11: resize(&self.p11, 1.0)?,
            p12: resize(&self.p12, 1.0)?,
            p21: resize(&self.p21, 1.0)?,
            p22: resize(&self.p22, 1.0)?,
        })
    }
}

struct Solver<'a> {
    params: &'a Tvl1Params,
    trace: Option<&'a mut SolverTrace>,
}

impl<'a> Solver<'a> {
    fn new(params: &'a Tvl1Params, trace: Option<&'a mut SolverTrace>) -> Self {
        Self { params, trace }
    }

    fn run(mut self, source: &ScalarField, target: &ScalarField) -> Result<FlowField> {
        self.params.validate()?;
        source.ensure_same_dims(target)?;
        let p = self.params;
        let s = p.intensity_scale;
        let i0 = source.map(|v| v * s)?;
        let i1 = target.map(|v| v * s)?;
        let pyr0 = grid::build_pyramid(&i0, p.pyramid_factor, p.pyramid_min_dim)?;
        let pyr1 = grid::build_pyramid(&i1, p.pyramid_factor, p.pyramid_min_dim)?;
        debug_assert_eq!(pyr0.levels.len(), pyr1.levels.len());

        let n_levels = pyr0.levels.len();
        let mut state: Option<LevelState> = None;
        for level in (0..n_levels).rev() {
            let l0 = &pyr0.levels[level];
            let l1 = &pyr1.levels[level];
            let (w, h) = l0.dims();
            let mut st = match state.take() {
                None => LevelState::zeros(w, h),
                Some(prev) => prev.upscale(w, h)?,
            };
            self.solve_level(l0, l1, &mut st, level == 0)?;
            state = Some(st);
        }
        let st = state.expect("at least one level");
        FlowField::new(st.w, st.h, st.u1, st.u2)
    }

    fn solve_level(
        &mut self,
        i0: &ScalarField,
        i1: &ScalarField,
        st: &mut LevelState,
        finest: bool,
    ) -> Result<()> {
        let p = self.params;
        let (w, h) = i0.dims();
        let n = w * h;
        let (g1x, g1y) = grid::gradient(i1);
        let l_t = p.lambda * p.theta;
        let taut = p.tau / p.theta;

        let mut i1w = vec![0.0f32; n];
        let mut gxw = vec![0.0f32; n];
        let mut gyw = vec![0.0f32; n];
        let mut rho_c = vec![0.0f32; n];
        let mut v1 = vec![0.0f32; n];
        let mut v2 = vec![0.0f32; n];

        for _warp in 0..p.warps_per_level {
            {
                let (u1, u2) = (&st.u1, &st.u2);
                let fill = |dst: &mut Vec<f32>, src: &ScalarField| {
                    par::for_each_row(dst, w, |y, row| {
                        for (x, o) in row.iter_mut().enumerate() {
                            let i = y * w + x;
                            *o = sample_bilinear(src, x as f32 + u1[i], y as f32 + u2[i]);
                        }
                    });
                };
                fill(&mut i1w, i1);
                fill(&mut gxw, &g1x);
                fill(&mut gyw, &g1y);
                // No data term where the match lies outside the target frame.
                let (maxx, maxy) = ((w - 1) as f32, (h - 1) as f32);
                par::for_each_row2(&mut gxw, &mut gyw, w, |y, rx, ry| {
                    for x in 0..w {
                        let i = y * w + x;
                        let (px, py) = (x as f32 + u1[i], y as f32 + u2[i]);
                        if px < 0.0 || px > maxx || py < 0.0 || py > maxy {
                            rx[x] = 0.0;
                            ry[x] = 0.0;
                        }
                    }
                });
            }
            {
                let (u1, u2, i0d) = (&st.u1, &st.u2, i0.data());
                let (i1w, gxw, gyw) = (&i1w, &gxw, &gyw);
                par::for_each_row(&mut rho_c, w, |y, row| {
                    for (x, o) in row.iter_mut().enumerate() {
                        let i = y * w + x;
                        *o = i1w[i] - gxw[i] * u1[i] - gyw[i] * u2[i] - i0d[i];
                    }
                });
            }

            for _ in 0..p.iters_per_warp {
                // Data step: pointwise shrinkage of the linearised residual.
                {
                    let (u1, u2) = (&st.u1, &st.u2);
                    let (gxw, gyw, rho_c) = (&gxw, &gyw, &rho_c);
                    let shrink = |i: usize| -> (f32, f32) {
                        let gx = gxw[i];
                        let gy = gyw[i];
                        let g2 = gx * gx + gy * gy;
                        if g2 < MIN_GRAD_SQ {
                            return (u1[i], u2[i]);
                        }
                        let rho = rho_c[i] + gx * u1[i] + gy * u2[i];
                        let (d1, d2) = if rho < -l_t * g2 {
                            (l_t * gx, l_t * gy)
                        } else if rho > l_t * g2 {
                            (-l_t * gx, -l_t * gy)
                        } else {
                            (-rho * gx / g2, -rho * gy / g2)
                        };
                        (u1[i] + d1, u2[i] + d2)
                    };
                    par::for_each_row2(&mut v1, &mut v2, w, |y, r1, r2| {
                        for x in 0..w {
                            (r1[x], r2[x]) = shrink(y * w + x);
                        }
                    });
                }

                // u = v + theta * div p, tracking the update size.
                let change = {
                    let (p11, p12, p21, p22) = (&st.p11, &st.p12, &st.p21, &st.p22);
                    let (v1r, v2r) = (&v1, &v2);
                    let (u1, u2) = (&st.u1, &st.u2);
                    par::sum_rows(h, |y| {
                        let mut s = 0.0f64;
                        for x in 0..w {
                            let i = y * w + x;
                            let n1 = v1r[i] + p.theta * grid::divergence_at(p11, p12, w, h, x, y);
                            let n2 = v2r[i] + p.theta * grid::divergence_at(p21, p22, w, h, x, y);
                            s += ((n1 - u1[i]) as f64).hypot((n2 - u2[i]) as f64);
                        }
                        s
                    })
                };
                {
                    let (p11, p12, p21, p22) = (&st.p11, &st.p12, &st.p21, &st.p22);
                    let (v1r, v2r) = (&v1, &v2);
                    let theta = p.theta;
                    par::for_each_row2(&mut st.u1, &mut st.u2, w, |y, r1, r2| {
                        for x in 0..w {
                            let i = y * w + x;
                            r1[x] = v1r[i] + theta * grid::divergence_at(p11, p12, w, h, x, y);
                            r2[x] = v2r[i] + theta * grid::divergence_at(p21, p22, w, h, x, y);
                        }
                    });
                }

                // Dual step: p <- (p + taut * grad u) / (1 + taut * |grad u|).
                dual_update(&st.u1, &mut st.p11, &mut st.p12, w, h, taut);
                dual_update(&st.u2, &mut st.p21, &mut st.p22, w, h, taut);
                if let Some(trace) = self.trace.as_deref_mut() {
                    let m = max_norm(&st.p11, &st.p12).max(max_norm(&st.p21, &st.p22));
                    debug_assert!(m <= 1.0 + 1e-6, "dual variable left the unit ball: {m}");
                    trace.max_dual_norm = trace.max_dual_norm.max(m);
                    trace.dual_iterations += 1;
                }

                if change / (n as f64) < p.stop_epsilon as f64 {
                    break;
                }
            }

            if p.median_filter {
                st.u1 = median3x3(&st.u1, w, h);
                st.u2 = median3x3(&st.u2, w, h);
            }
            if finest {
                if let Some(trace) = self.trace.as_deref_mut() {
                    trace
                        .finest_energies
                        .push(tvl1_energy(i0, i1, &st.u1, &st.u2, p.lambda));
                }
            }
        }
        Ok(())
    }
}

fn dual_update(u: &[f32], pa: &mut [f32], pb: &mut [f32], w: usize, h: usize, taut: f32) {
    let step = |i: usize, x: usize, y: usize| -> (f32, f32) {
        let gx = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
        let gy = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        (gx, gy)
    };
    par::for_each_row2(pa, pb, w, |y, ra, rb| {
        for x in 0..w {
            let (gx, gy) = step(y * w + x, x, y);
            let d = 1.0 + taut * (gx * gx + gy * gy).sqrt();
            ra[x] = (ra[x] + taut * gx) / d;
            rb[x] = (rb[x] + taut * gy) / d;
        }
    });
}

fn max_norm(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .fold(0.0, f32::max)
}

/// `lambda * sum |I1(x + u) - I0(x)| + sum (|grad u1| + |grad u2|)` on the
/// solver's intensity scale.
fn tvl1_energy(i0: &ScalarField, i1: &ScalarField, u1: &[f32], u2: &[f32], lambda: f32) -> f64 {
    let (w, h) = i0.dims();
    let tv = |u: &[f32], x: usize, y: usize| -> f64 {
        let i = y * w + x;
        let gx = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
        let gy = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        ((gx * gx + gy * gy) as f64).sqrt()
    };
    par::sum_rows(h, |y| {
        let mut s = 0.0f64;
        for x in 0..w {
            let i = y * w + x;
            let warped = sample_bilinear(i1, x as f32 + u1[i], y as f32 + u2[i]);
            s += lambda as f64 * ((warped - i0.get(x, y)) as f64).abs();
            s += tv(u1, x, y) + tv(u2, x, y);
        }
        s
    })
}
