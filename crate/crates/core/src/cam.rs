//! Class activation maps over the egocentric head features.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, minmax_normalize, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceHeatmap {
    /// `h × w`, values in `[0, 1]`.
    pub map: Tensor,
    pub affordance: usize,
    pub image_id: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CamOptions {
    /// Clamp negative activations before normalizing.
    pub relu_before_normalize: bool,
}

/// `Y = Σ_i w_i·D^i` for the classifier row of `class_id`; raw and unnormalized.
pub fn compute_cam(d_ego: &Tensor, fc_weights: &Tensor, class_id: usize) -> Result<Tensor> {
    let [d, h, w] = d_ego.dims()[..] else {
        return Err(Error::Shape(format!("cam: features must be d×h×w, got {:?}", d_ego.dims())));
    };
    let [n_classes, wd] = fc_weights.dims()[..] else {
        return Err(Error::Shape(format!("cam: weights must be N_c×d, got {:?}", fc_weights.dims())));
    };
    if wd != d {
        return Err(Error::Shape(format!("cam: {d} feature maps but {wd} weights per class")));
    }
    if class_id >= n_classes {
        return Err(Error::Contract(format!(
            "cam: class {class_id} out of range for {n_classes} classes"
        )));
    }
    let row = &fc_weights.data()[class_id * d..(class_id + 1) * d];
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for (plane, &wi) in d_ego.data().chunks_exact(hw).zip(row) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += wi * v;
        }
    }
    Tensor::from_op(vec![h, w], out, "compute_cam")
}

/// Min-max normalize, then upsample to `out_h × out_w`.
pub fn postprocess(raw: &Tensor, out_h: usize, out_w: usize, options: CamOptions) -> Result<Tensor> {
    let src = if options.relu_before_normalize {
        raw.map(|v| v.max(0.0))?
    } else {
        raw.clone()
    };
    bilinear_resize(&minmax_normalize(&src), out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn weighted_sum_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random(&mut rng, &[3, 4, 4]);
        let w = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.2, 0.3, 0.4]]).unwrap();
        let y = compute_cam(&d, &w, 0).unwrap();
        assert_eq!(y.data(), &d.data()[..16]);

        let plane = random(&mut rng, &[1, 2, 2]);
        let mut stacked = plane.data().to_vec();
        stacked.extend_from_slice(plane.data());
        stacked.extend_from_slice(plane.data());
        let dd = Tensor::new(vec![3, 2, 2], stacked).unwrap();
        let half = Tensor::full(&[1, 3], 0.5);
        let y = compute_cam(&dd, &half, 0).unwrap();
        for (a, b) in y.data().iter().zip(plane.data()) {
            assert!((a - 0.5 * 3.0 * b).abs() < 1e-12);
        }

        let dd = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let w = Tensor::matrix(&[&[1.0, -1.0]]).unwrap();
        assert_eq!(compute_cam(&dd, &w, 0).unwrap().data(), &[-2.0]);
        assert!(matches!(compute_cam(&dd, &w, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn cam_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d1 = random(&mut rng, &[4, 3, 3]);
        let d2 = random(&mut rng, &[4, 3, 3]);
        let w1 = random(&mut rng, &[2, 4]);
        let w2 = random(&mut rng, &[2, 4]);
        let lhs = compute_cam(&d1.add(&d2).unwrap().scale(2.0).unwrap(), &w1, 1).unwrap();
        let rhs = compute_cam(&d1, &w1, 1)
            .unwrap()
            .add(&compute_cam(&d2, &w1, 1).unwrap())
            .unwrap()
            .scale(2.0)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        let lhs = compute_cam(&d1, &w1.add(&w2).unwrap(), 0).unwrap();
        let rhs = compute_cam(&d1, &w1, 0).unwrap().add(&compute_cam(&d1, &w2, 0).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn postprocess_examples() {
        let o = CamOptions::default();
        let flat = postprocess(&Tensor::full(&[8, 8], 3.0), 64, 64, o).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));

        let norm = Tensor::matrix(&[&[0.0, 0.25], &[1.0, 0.5]]).unwrap();
        assert_eq!(postprocess(&norm, 2, 2, o).unwrap(), norm);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random(&mut rng, &[4, 4]);
        let base = postprocess(&y, 9, 9, o).unwrap();
        let scaled = postprocess(&y.scale(3.7).unwrap(), 9, 9, o).unwrap();
        assert!(base.max_abs_diff(&scaled).unwrap() < 1e-12);
    }

    #[test]
    fn single_peak_location_survives_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut raw = Tensor::new(
                vec![8, 8],
                (0..64).map(|_| rng.gen_range(0.0..0.5)).collect(),
            )
            .unwrap();
            let (py, px) = (rng.gen_range(0..8), rng.gen_range(0..8));
            raw.set(py * 8 + px, 1.0).unwrap();
            let up = postprocess(&raw, 64, 64, CamOptions::default()).unwrap();
            // Brute-force scan of the upsampled map.
            let mut best = (0, 0, f64::NEG_INFINITY);
            for y in 0..64 {
                for x in 0..64 {
                    let v = up.data()[y * 64 + x];
                    if v > best.2 {
                        best = (y, x, v);
                    }
                }
            }
            // align-corners: source pixel i lands on target pixel 9·i
            assert_eq!((best.0, best.1), (9 * py, 9 * px));
        }
    }
}
