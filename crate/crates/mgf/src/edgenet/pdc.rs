//! Pixel-difference convolution kernels.
//!
//! A pixel-difference convolution replaces each sampled value with the
//! difference of a pixel pair before applying the kernel weight:
//! `sum_i w_i * (x_i - x_pair(i))`. Because the map from the learned kernel
//! to an equivalent vanilla kernel is linear, every variant is run as a
//! plain cross-correlation with the transformed kernel.
//!
//! Pair picking per variant:
//! - `Cpdc`: every tap pairs with the center of the 3x3 window.
//! - `Apdc`: each of the eight 3x3 ring taps pairs with its clockwise
//!   neighbor on the ring; the center weight is inert.
//! - `Rpdc`: each of the sixteen 5x5 outer-ring taps pairs with its
//!   radially-inner 3x3 ring tap (coordinates clamped toward the center);
//!   inner-ring and center weights are inert.
//!
//! Differences vanish on constant inputs, so all variants output exactly
//! zero there - provided the convolution samples edge-replicated (not
//! zero-padded) values at the borders, which is how the network applies
//! them.

use crate::error::{MgfError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdcKind {
    Vanilla,
    Cpdc,
    Apdc,
    Rpdc,
}

impl PdcKind {
    /// Kernel side length: 3 for vanilla/cpdc/apdc, 5 for rpdc.
    pub fn kernel_size(&self) -> usize {
        match self {
            PdcKind::Rpdc => 5,
            _ => 3,
        }
    }

    pub fn parse(s: &str) -> Result<PdcKind> {
        match s {
            "vanilla" => Ok(PdcKind::Vanilla),
            "cpdc" => Ok(PdcKind::Cpdc),
            "apdc" => Ok(PdcKind::Apdc),
            "rpdc" => Ok(PdcKind::Rpdc),
            other => Err(MgfError::invalid_argument(format!(
                "unknown pixel-difference kind {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PdcKind::Vanilla => "vanilla",
            PdcKind::Cpdc => "cpdc",
            PdcKind::Apdc => "apdc",
            PdcKind::Rpdc => "rpdc",
        }
    }
}

/// The 3x3 ring in clockwise order starting at the top-left corner.
const RING8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// (pair_tap, weight_tap, sign) triples defining the linear kernel map
/// w' = T(w) for one 2-D kernel, as flat tap indices.
pub(crate) fn transform_triples(kind: PdcKind) -> Vec<(usize, usize, f64)> {
    let k = kind.kernel_size();
    let idx = |dy: isize, dx: isize| -> usize {
        let half = (k / 2) as isize;
        ((dy + half) * k as isize + (dx + half)) as usize
    };
    match kind {
        PdcKind::Vanilla => (0..k * k).map(|i| (i, i, 1.0)).collect(),
        PdcKind::Cpdc => {
            let center = idx(0, 0);
            let mut t = Vec::new();
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy, dx) == (0, 0) {
                        continue;
                    }
                    t.push((idx(dy, dx), idx(dy, dx), 1.0));
                    t.push((center, idx(dy, dx), -1.0));
                }
            }
            t
        }
        PdcKind::Apdc => {
            let mut t = Vec::new();
            for (i, &(dy, dx)) in RING8.iter().enumerate() {
                let (ny, nx) = RING8[(i + 1) % 8];
                t.push((idx(dy, dx), idx(dy, dx), 1.0));
                t.push((idx(ny, nx), idx(dy, dx), -1.0));
            }
            t
        }
        PdcKind::Rpdc => {
            let mut t = Vec::new();
            for dy in -2..=2isize {
                for dx in -2..=2isize {
                    if dy.abs().max(dx.abs()) != 2 {
                        continue;
                    }
                    let (iy, ix) = (dy.clamp(-1, 1), dx.clamp(-1, 1));
                    t.push((idx(dy, dx), idx(dy, dx), 1.0));
                    t.push((idx(iy, ix), idx(dy, dx), -1.0));
                }
            }
            t
        }
    }
}

/// Transform a learned pixel-difference kernel into the equivalent vanilla
/// kernel, per output/input channel slice.
pub fn pdc_to_vanilla(kind: PdcKind, weight: &Tensor) -> Result<Tensor> {
    let k = kind.kernel_size();
    if weight.shape().len() != 4 || weight.shape()[2] != k || weight.shape()[3] != k {
        return Err(MgfError::invalid_argument(format!(
            "{} expects {}x{} kernels, got weight shape {:?}",
            kind.name(),
            k,
            k,
            weight.shape()
        )));
    }
    if kind == PdcKind::Vanilla {
        return Ok(weight.clone());
    }
    let triples = transform_triples(kind);
    let taps = k * k;
    let slices = weight.numel() / taps;
    let mut out = vec![0.0; weight.numel()];
    for s in 0..slices {
        let src = &weight.data()[s * taps..(s + 1) * taps];
        let dst = &mut out[s * taps..(s + 1) * taps];
        for &(d, w, sign) in &triples {
            dst[d] += sign * src[w];
        }
    }
    Tensor::new(weight.shape().to_vec(), out)
}

/// Adjoint of [`pdc_to_vanilla`] for backpropagation through the transform.
pub(crate) fn pdc_transform_adjoint(kind: PdcKind, dprime: &Tensor) -> Tensor {
    let k = kind.kernel_size();
    let taps = k * k;
    let triples = transform_triples(kind);
    let slices = dprime.numel() / taps;
    let mut out = vec![0.0; dprime.numel()];
    for s in 0..slices {
        let src = &dprime.data()[s * taps..(s + 1) * taps];
        let dst = &mut out[s * taps..(s + 1) * taps];
        for &(d, w, sign) in &triples {
            dst[w] += sign * src[d];
        }
    }
    Tensor::new(dprime.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::ops::{conv2d, ConvSpec};

    /// Direct pairwise-difference computation with edge-replicated sampling.
    fn pdc_direct(kind: PdcKind, image: &Tensor, weight: &Tensor) -> Tensor {
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let k = kind.kernel_size();
        let half = (k / 2) as isize;
        let sample = |y: isize, x: isize| -> f64 {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            image.data()[yy * w + xx]
        };
        let tap = |i: usize| -> (isize, isize) {
            ((i / k) as isize - half, (i % k) as isize - half)
        };
        let triples = transform_triples(kind);
        // Regroup triples into (weight tap, plus tap, minus tap) pairs.
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for &(d, wt, sign) in &triples {
                    let (dy, dx) = tap(d);
                    acc += sign * weight.data()[wt] * sample(y + dy, x + dx);
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        Tensor::new(vec![1, 1, h, w], out).unwrap()
    }

    fn replicate_pad_tensor(image: &Tensor, pad: usize) -> Tensor {
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
            for x in 0..ow {
                let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                out[y * ow + x] = image.data()[sy * w + sx];
            }
        }
        Tensor::new(vec![1, 1, oh, ow], out).unwrap()
    }

    #[test]
    fn cpdc_and_apdc_vanish_on_constant_images() {
        let img = Tensor::full(&[1, 1, 6, 6], 0.8);
        let mut rng = Rng::new(9);
        for kind in [PdcKind::Cpdc, PdcKind::Apdc, PdcKind::Rpdc] {
            let k = kind.kernel_size();
            let w = Tensor::from_fn(&[1, 1, k, k], |_| rng.normal(1.0));
            let out = pdc_direct(kind, &img, &w);
            for v in out.data() {
                assert!(v.abs() < 1e-12, "{} on constant gave {v}", kind.name());
            }
        }
    }

    #[test]
    fn transformed_kernel_matches_direct_differences() {
        let mut rng = Rng::new(31);
        for kind in [PdcKind::Cpdc, PdcKind::Apdc, PdcKind::Rpdc] {
            let k = kind.kernel_size();
            for _ in 0..10 {
                let img = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.uniform());
                let w = Tensor::from_fn(&[1, 1, k, k], |_| rng.normal(1.0));
                let direct = pdc_direct(kind, &img, &w);
                let wt = pdc_to_vanilla(kind, &w).unwrap();
                let padded = replicate_pad_tensor(&img, k / 2);
                let conv = conv2d(&padded, &wt, None, &ConvSpec::default()).unwrap();
                for (a, b) in direct.data().iter().zip(conv.data()) {
                    assert!(
                        (a - b).abs() < 1e-10,
                        "{}: direct {a} vs conv {b}",
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn kernel_size_must_match_kind() {
        let w3 = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(pdc_to_vanilla(PdcKind::Rpdc, &w3).is_err());
        let w5 = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(pdc_to_vanilla(PdcKind::Cpdc, &w5).is_err());
        assert!(pdc_to_vanilla(PdcKind::Apdc, &w5).is_err());
    }

    #[test]
    fn adjoint_is_transpose_of_forward() {
        let mut rng = Rng::new(12);
        for kind in [PdcKind::Cpdc, PdcKind::Apdc, PdcKind::Rpdc] {
            let k = kind.kernel_size();
            let w = Tensor::from_fn(&[1, 1, k, k], |_| rng.normal(1.0));
            let g = Tensor::from_fn(&[1, 1, k, k], |_| rng.normal(1.0));
            // <T(w), g> == <w, T^*(g)>
            let tw = pdc_to_vanilla(kind, &w).unwrap();
            let tg = pdc_transform_adjoint(kind, &g);
            let lhs: f64 = tw.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.data().iter().zip(tg.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
