//! Minimal reverse-mode differentiation and the layers of the toy network.

mod checkpoint;
mod conv;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, XVC_MAGIC,
    XVC_VERSION,
};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
pub use gradcheck::{fd_resolution, grad_check, relative_error, relative_error_above, GradCheckReport, FD_STEP};
pub use params::ParamStore;
pub use tape::{Tape, Var};

use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0)).expect("relu preserves finiteness")
}

/// `weight·x + bias`.
pub fn fc(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    tape::fc_apply(x, weight, bias)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    tape::cross_entropy_value(logits.data(), label)
}

pub(crate) use tape::corelation_ce_value;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(&[0.0, 3.5]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_gradient_mask_has_zero_subgradient_at_zero() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.relu(x).unwrap();
        // sum(relu(x)) via fc with a ones row
        let w = tape.constant(Tensor::full(&[1, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let s = tape.fc(y, w, b).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::vector(&[2.0, 3.0]).unwrap();
        assert_eq!(fc(&x, &Tensor::eye(2), &Tensor::zeros(&[2])).unwrap(), x);
        let b = Tensor::vector(&[4.0, -1.0]).unwrap();
        assert_eq!(fc(&x, &Tensor::zeros(&[2, 2]), &b).unwrap(), b);
        let w = Tensor::matrix(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(fc(&x, &w, &Tensor::vector(&[1.0]).unwrap()).unwrap().data(), &[6.0]);
        assert!(matches!(fc(&x, &Tensor::zeros(&[2, 3]), &b), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let dominant = Tensor::vector(&[0.0, 1e6, 0.0]).unwrap();
        assert!(cross_entropy(&dominant, 1).unwrap() < 1e-12);
        let uniform = Tensor::vector(&[0.3; 4]).unwrap();
        assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let lo = cross_entropy(&Tensor::vector(&[0.5, 1.0, -1.0]).unwrap(), 0).unwrap();
        let hi = cross_entropy(&Tensor::vector(&[1.5, 1.0, -1.0]).unwrap(), 0).unwrap();
        assert!(hi < lo);
        assert!(matches!(cross_entropy(&uniform, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(&[1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_parameters_keep_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::vector(&[1.0, 2.0]).unwrap()).unwrap();
        store.insert("unused", Tensor::vector(&[5.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "used").unwrap();
        let z = tape.constant(Tensor::zeros(&[2]));
        let l = tape.l2_distance(x, z, true).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("used").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_parameter_accumulates_from_every_use() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[1, 1], 3.0)).unwrap();
        store.insert("b", Tensor::zeros(&[1])).unwrap();
        let mut tape = Tape::new();
        let x1 = tape.constant(Tensor::vector(&[1.0]).unwrap());
        let x2 = tape.constant(Tensor::vector(&[2.0]).unwrap());
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y1 = tape.fc(x1, w, b).unwrap();
        let w_again = tape.param(&store, "w").unwrap();
        assert_eq!(w, w_again);
        let y2 = tape.fc(x2, w_again, b).unwrap();
        let s = tape.weighted_sum(&[(y1, 1.0), (y2, 1.0)]).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[3.0]);
        assert_eq!(store.grad("b").unwrap().data(), &[2.0]);
    }

    #[test]
    fn replay_substitutes_detached_values() {
        let mut tape = Tape::new();
        tape.detached(Tensor::vector(&[1.0]).unwrap()).unwrap();
        let frozen = tape.detached_values().to_vec();
        let mut replay = Tape::replaying(frozen);
        let v = replay.detached(Tensor::vector(&[9.0]).unwrap()).unwrap();
        assert_eq!(replay.value(v).data(), &[1.0]);
        assert!(replay.detached(Tensor::vector(&[9.0]).unwrap()).is_err());
    }

    fn random_tensor(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        use rand::Rng;
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_gradient_is_exact_to_fd_precision() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            store.insert("x", random_tensor(&mut r, &[6])).unwrap();
            store.insert("w", random_tensor(&mut r, &[4, 6])).unwrap();
            store.insert("b", random_tensor(&mut r, &[4])).unwrap();
            let target = random_tensor(&mut r, &[4]);
            let report = grad_check(
                &store,
                |tape, p| {
                    let x = tape.param(p, "x")?;
                    let w = tape.param(p, "w")?;
                    let b = tape.param(p, "b")?;
                    let y = tape.fc(x, w, b)?;
                    let t = tape.constant(target.clone());
                    tape.l2_distance(y, t, true)
                },
                64,
                &mut r,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-7, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn zero_input_through_relu_gives_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2, 2, 3, 3], 0.5)).unwrap();
        store.insert("b", Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let g = tape.gap(y).unwrap();
        let z = tape.constant(Tensor::zeros(&[2]));
        let l = tape.l2_distance(g, z, true).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!(store.grad("w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.grad("b").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
