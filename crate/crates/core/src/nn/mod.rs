//! Minimal reverse-mode autodiff: tensors, a tape of NCHW ops, Adam and
//! checkpoints. Generic over `f32` and `f64` so gradients can be checked in
//! double precision.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

use rand::Rng;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{check_gradients, GradCheckOptions, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use tensor::{Elem, ParamSet, Tensor};

/// He-uniform init: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        random(&[n], seed).into_data()
    }

    /// Six nested loops straight from the definition of cross-correlation.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
        mode: Padding,
    ) -> Vec<f64> {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [k, _, kh, kw] = w.shape().try_into().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ko in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[ko];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    let inside =
                                        iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize;
                                    if !inside && mode == Padding::Zero {
                                        continue;
                                    }
                                    let iy = iy.clamp(0, h as isize - 1) as usize;
                                    let ix = ix.clamp(0, wd as isize - 1) as usize;
                                    s += x.data()[((ni * c + ci) * h + iy) * wd + ix]
                                        * w.data()[((ko * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * k + ko) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (i, &(stride, pad, mode, kh)) in [
            (1, 1, Padding::Zero, 3),
            (1, 1, Padding::Replicate, 3),
            (2, 1, Padding::Zero, 3),
            (1, 0, Padding::Zero, 1),
            (2, 2, Padding::Replicate, 5),
        ]
        .iter()
        .enumerate()
        {
            let x = random(&[2, 3, 9, 7], 10 + i as u64);
            let w = random(&[4, 3, kh, kh], 20 + i as u64);
            let b = weights(4, 30 + i as u64);
            let g = Graph::new();
            let (xv, wv) = (g.leaf(&x), g.leaf(&w));
            let bv = g.constant(vec![4], b.clone()).unwrap();
            let y = g.conv2d(xv, wv, Some(bv), stride, pad, mode).unwrap();
            let got = g.value(y);
            let want = conv_oracle(&x, &w, &b, stride, pad, mode);
            assert_eq!(got.numel(), want.len());
            for (a, e) in got.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-5, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_known_values() {
        let g = Graph::<f32>::new();
        let x = g
            .constant(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect())
            .unwrap();
        let id = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv2d(x, id, None, 1, 0, Padding::Zero).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let input = g.constant(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let y = g.conv2d(input, ones, None, 1, 1, Padding::Zero).unwrap();
        let v = g.value(y);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2], 6.0);
        let y = g
            .conv2d(input, ones, None, 1, 1, Padding::Replicate)
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn shape_errors() {
        let g = Graph::<f32>::new();
        let x = g.constant(vec![1, 2, 4, 4], vec![0.0; 32]).unwrap();
        let w = g.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(matches!(
            g.conv2d(x, w, None, 1, 1, Padding::Zero),
            Err(Error::ShapeMismatch { op: "conv2d", .. })
        ));
        let y = g.constant(vec![1, 2, 4, 3], vec![0.0; 24]).unwrap();
        assert!(g.add(x, y).is_err());
        assert!(g.concat_channels(x, y).is_err());
        assert!(g.backward(x).is_err());
    }

    fn assert_f64(reports: &[GradReport], what: &str) {
        for r in reports {
            assert!(
                r.max_rel_err < 1e-6,
                "{what}: input {} rel err {:.3e}",
                r.input,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn gradcheck_conv() {
        for (stride, pad, mode) in [
            (1, 1, Padding::Zero),
            (2, 1, Padding::Replicate),
            (1, 0, Padding::Zero),
        ] {
            let x = random(&[2, 2, 6, 5], 1);
            let w = random(&[3, 2, 3, 3], 2);
            let b = random(&[3], 3);
            let r = check_gradients(
                &[x, w, b],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad, mode)?;
                    let n = g.value(y).numel();
                    g.weighted_sum(y, weights(n, 4))
                },
                GradCheckOptions::f64(),
            )
            .unwrap();
            assert_f64(&r, "conv2d");
        }
    }

    #[test]
    fn gradcheck_pointwise_ops() {
        let x = random(&[2, 3, 4, 6], 5);
        let y = random(&[2, 1, 4, 6], 6);
        let r = check_gradients(
            &[x, y],
            |g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let up = g.upsample_bilinear(c, 2)?;
                let p = g.maxpool2(up)?;
                let r = g.relu(p);
                let s = g.scale(r, 1.5);
                let a = g.add(s, c)?;
                let n = g.value(a).numel();
                g.weighted_sum(a, weights(n, 7))
            },
            GradCheckOptions::f64(),
        )
        .unwrap();
        assert_f64(&r, "pointwise chain");
    }

    #[test]
    fn gradcheck_attention_ops() {
        let q = random(&[2, 5, 3], 8);
        let k = random(&[2, 3, 4], 9);
        let v = random(&[2, 4, 3], 10);
        let r = check_gradients(
            &[q, k, v],
            |g, x| {
                let a = g.matmul(x[0], x[1])?;
                let a = g.scale(a, 2.0);
                let s = g.softmax(a, 2)?;
                let o = g.matmul(s, x[2])?;
                let t = g.transpose(o)?;
                let t = g.reshape(t, vec![2, 3, 5, 1])?;
                let c = g.clamp01(t);
                let st = g.softmax(t, 1)?;
                let sum = g.add(c, st)?;
                let n = g.value(sum).numel();
                g.weighted_sum(sum, weights(n, 11))
            },
            GradCheckOptions::f64(),
        )
        .unwrap();
        assert_f64(&r, "attention chain");
    }

    #[test]
    fn gradcheck_l1() {
        let p = random(&[3, 7], 12);
        let t = random(&[3, 7], 13);
        let r = check_gradients(
            &[p, t],
            |g, v| g.l1_loss(v[0], v[1]),
            GradCheckOptions::f64(),
        )
        .unwrap();
        assert_f64(&r, "l1");
    }

    #[test]
    fn gradcheck_f32_conv() {
        let x = random(&[1, 2, 8, 8], 14).cast::<f32>();
        let w = random(&[2, 2, 3, 3], 15).cast::<f32>();
        let r = check_gradients(
            &[x, w],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 1, 1, Padding::Zero)?;
                let n = g.value(y).numel();
                let wts = weights(n, 16).into_iter().map(|v| v as f32).collect();
                g.weighted_sum(y, wts)
            },
            GradCheckOptions::f32(),
        )
        .unwrap();
        for rep in r {
            assert!(rep.norm_rel_err < 1e-3, "{rep:?}");
        }
    }

    #[test]
    fn l1_known_values() {
        let g = Graph::<f64>::new();
        let a = g.constant(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let same = g.l1_loss(a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let b = g.constant(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.scalar(l), 1.0);

        let p = Tensor::new(vec![3], vec![2.0, -1.0, 0.5])
            .unwrap()
            .with_grad();
        let g = Graph::<f64>::new();
        let pv = g.leaf(&p);
        let t = g.constant(vec![3], vec![1.0, 0.0, 0.5]).unwrap();
        let l = g.l1_loss(pv, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(pv).unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let g = Graph::<f32>::new();
        let x = g
            .constant(vec![1, 3], vec![1000.0, 1001.0, 1002.0])
            .unwrap();
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        assert!(v.data().iter().all(|p| p.is_finite()));
        let e = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
        let z: f64 = e.iter().sum();
        for (p, q) in v.data().iter().zip(e) {
            assert!((*p as f64 - q / z).abs() < 1e-6);
        }
        let y = g.constant(vec![1, 3], vec![-1000.0, 0.0, 1000.0]).unwrap();
        let s = g.softmax(y, 1).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tape_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = kaiming_uniform(vec![2, 3, 16, 16], 1, &mut rng);
            let w = kaiming_uniform(vec![8, 3, 3, 3], 27, &mut rng).with_grad();
            let g = Graph::new();
            let (xv, wv) = (g.leaf(&x), g.leaf(&w));
            let y = g.conv2d(xv, wv, None, 1, 1, Padding::Zero).unwrap();
            let y = g.relu(y);
            let t = g
                .constant(vec![2, 8, 16, 16], vec![0.5; 2 * 8 * 256])
                .unwrap();
            let l = g.l1_loss(y, t).unwrap();
            let grads = g.backward(l).unwrap();
            (
                g.scalar(l).to_bits(),
                grads
                    .get(wv)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kaiming_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = kaiming_uniform(vec![16, 8, 3, 3], 72, &mut rng);
        let b = (6.0f32 / 72.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max > 0.9 * b);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let b = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let l = g.weighted_sum(a, vec![1.0, 1.0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
    }
}
