//! The two-branch network: shared backbone, invariance mining on the
//! exocentric branch, egocentric adaptation convolutions, a head
//! convolution and classifier shared by both branches.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aim::{self, aim_forward, DictionaryState, NmfConfig, NmfResult};
use crate::autodiff::{read_checkpoint, write_checkpoint, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss_on_tape, LossBreakdown, LossOptions, LossWeights};
use crate::tensor::Tensor;

/// Checkpoint entry holding the persisted dictionary.
pub const DICTIONARY_ENTRY: &str = "aim.dictionary";

pub const HEAD_W: &str = "head.conv.w";
pub const HEAD_B: &str = "head.conv.b";
pub const FC_W: &str = "cls.fc.w";
pub const FC_B: &str = "cls.fc.b";
pub const EGO_CONV1: (&str, &str) = ("ego.conv1.w", "ego.conv1.b");
pub const EGO_CONV2: (&str, &str) = ("ego.conv2.w", "ego.conv2.b");

/// Subtracted from every pixel before the backbone.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Backbone output channels `c`.
    pub channels: usize,
    /// Channels `c'` of the factorized features.
    pub reduced_channels: usize,
    /// Head feature dimension `d`.
    pub head_dim: usize,
    pub num_classes: usize,
    pub nmf: NmfConfig,
    pub share_backbone: bool,
    /// ReLU after the shared head convolution.
    pub head_relu: bool,
    /// When false the exocentric features bypass invariance mining (`F_i = Z_i`).
    pub aim_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 32,
            reduced_channels: 16,
            head_dim: 32,
            num_classes: 5,
            nmf: NmfConfig::default(),
            share_backbone: true,
            head_relu: true,
            aim_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of 4",
                self.channels
            )));
        }
        if self.reduced_channels == 0 || self.head_dim == 0 {
            return Err(Error::Config("reduced channels and head dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 affordance classes".into()));
        }
        self.nmf.validate(self.reduced_channels)
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 8
    }

    fn block_channels(&self) -> [usize; 4] {
        [3, self.channels / 4, self.channels / 2, self.channels]
    }
}

fn backbone_prefix(ego: bool, shared: bool) -> &'static str {
    if ego && !shared {
        "ego_backbone"
    } else {
        "backbone"
    }
}

/// Tape handles of one training forward pass.
pub struct TrainGraph {
    pub s: Var,
    pub g: Var,
    pub f_exo: Var,
    pub f_ego: Var,
    pub d_ego: Var,
    pub d_exo: Vec<Var>,
    /// Exocentric features after invariance mining (or `Z_i` when disabled).
    pub f_list: Vec<Var>,
    pub z_list: Vec<Var>,
    pub nmf: Option<NmfResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub s: Tensor,
    pub g: Tensor,
    pub f_exo: Tensor,
    pub f_ego: Tensor,
    pub d_ego: Tensor,
    pub nmf: Option<NmfResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub dictionary: DictionaryState,
}

impl CrossViewModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let chans = config.block_channels();
        let mut prefixes = vec!["backbone"];
        if !config.share_backbone {
            prefixes.push("ego_backbone");
        }
        for prefix in prefixes {
            for b in 0..3 {
                let (cin, cout) = (chans[b], chans[b + 1]);
                params.insert_kaiming(
                    format!("{prefix}.b{}.conv.w", b + 1),
                    &[cout, cin, 3, 3],
                    cin * 9,
                    rng,
                )?;
                params.insert(format!("{prefix}.b{}.conv.b", b + 1), Tensor::zeros(&[cout]))?;
                params.insert_fan_in(
                    format!("{prefix}.b{}.down.w", b + 1),
                    &[cout, cout, 2, 2],
                    cout * 4,
                    1.0,
                    rng,
                )?;
                params.insert(format!("{prefix}.b{}.down.b", b + 1), Tensor::zeros(&[cout]))?;
            }
        }
        let c = config.channels;
        aim::init_params(&mut params, c, config.reduced_channels, rng)?;
        for (w, b) in [EGO_CONV1, EGO_CONV2] {
            params.insert_fan_in(w, &[c, c, 3, 3], c * 9, 1.0, rng)?;
            params.insert(b, Tensor::zeros(&[c]))?;
        }
        let head_gain = if config.head_relu { std::f64::consts::SQRT_2 } else { 1.0 };
        params.insert_fan_in(HEAD_W, &[config.head_dim, c, 3, 3], c * 9, head_gain, rng)?;
        params.insert(HEAD_B, Tensor::zeros(&[config.head_dim]))?;
        params.insert_fan_in(FC_W, &[config.num_classes, config.head_dim], config.head_dim, 1.0, rng)?;
        params.insert(FC_B, Tensor::zeros(&[config.num_classes]))?;
        let dictionary = DictionaryState::init(config.reduced_channels, config.nmf.rank, rng);
        Ok(Self {
            config,
            params,
            dictionary,
        })
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let n = self.config.image_size;
        if img.dims() != [3, n, n] {
            return Err(Error::Shape(format!(
                "image dims {:?}, model expects [3, {n}, {n}]",
                img.dims()
            )));
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, x: Var, w: &str, b: &str, stride: usize, pad: usize) -> Result<Var> {
        let wv = tape.param(&self.params, w)?;
        let bv = tape.param(&self.params, b)?;
        tape.conv2d(x, wv, bv, stride, pad)
    }

    /// Three blocks of `conv3×3 → relu → stride-2 conv2×2`: `3×n×n → c×n/8×n/8`.
    pub fn backbone(&self, tape: &mut Tape, image: &Tensor, ego: bool) -> Result<Var> {
        self.check_image(image)?;
        let prefix = backbone_prefix(ego, self.config.share_backbone);
        let mut x = tape.constant(image.map(|v| v - INPUT_MEAN)?);
        for b in 1..=3 {
            x = self.conv(tape, x, &format!("{prefix}.b{b}.conv.w"), &format!("{prefix}.b{b}.conv.b"), 1, 1)?;
            x = tape.relu(x)?;
            x = self.conv(tape, x, &format!("{prefix}.b{b}.down.w"), &format!("{prefix}.b{b}.down.b"), 2, 0)?;
        }
        Ok(x)
    }

    fn head(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let d = self.conv(tape, f, HEAD_W, HEAD_B, 1, 1)?;
        if self.config.head_relu {
            tape.relu(d)
        } else {
            Ok(d)
        }
    }

    fn classify(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let w = tape.param(&self.params, FC_W)?;
        let b = tape.param(&self.params, FC_B)?;
        tape.fc(f, w, b)
    }

    /// Egocentric path: backbone → two adaptation convs → head → GAP → fc.
    /// Returns `(g, f_ego, D_ego)`.
    fn ego_branch(&self, tape: &mut Tape, ego: &Tensor) -> Result<(Var, Var, Var)> {
        let z = self.backbone(tape, ego, true)?;
        let f = self.conv(tape, z, EGO_CONV1.0, EGO_CONV1.1, 1, 1)?;
        let f = self.conv(tape, f, EGO_CONV2.0, EGO_CONV2.1, 1, 1)?;
        let d = self.head(tape, f)?;
        let pooled = tape.gap(d)?;
        let g = self.classify(tape, pooled)?;
        Ok((g, pooled, d))
    }

    pub fn forward_train_on_tape(&self, tape: &mut Tape, exo: &[Tensor], ego: &Tensor) -> Result<TrainGraph> {
        if exo.is_empty() {
            return Err(Error::Shape("a sample group needs at least one exocentric image".into()));
        }
        self.check_image(ego)?;
        let z_list = exo
            .iter()
            .map(|img| self.backbone(tape, img, false))
            .collect::<Result<Vec<_>>>()?;
        let (f_list, nmf) = if self.config.aim_enabled {
            let (f, nmf) = aim_forward(tape, &self.params, &z_list, &self.dictionary, &self.config.nmf)?;
            (f, Some(nmf))
        } else {
            (z_list.clone(), None)
        };
        let d_exo = f_list
            .iter()
            .map(|&f| self.head(tape, f))
            .collect::<Result<Vec<_>>>()?;
        let d_mean = tape.mean(&d_exo)?;
        let f_exo = tape.gap(d_mean)?;
        let s = self.classify(tape, f_exo)?;
        let (g, f_ego, d_ego) = self.ego_branch(tape, ego)?;
        Ok(TrainGraph {
            s,
            g,
            f_exo,
            f_ego,
            d_ego,
            d_exo,
            f_list,
            z_list,
            nmf,
        })
    }

    pub fn forward_train(&self, exo: &[Tensor], ego: &Tensor) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let graph = self.forward_train_on_tape(&mut tape, exo, ego)?;
        Ok(ForwardOutputs {
            s: tape.value(graph.s).clone(),
            g: tape.value(graph.g).clone(),
            f_exo: tape.value(graph.f_exo).clone(),
            f_ego: tape.value(graph.f_ego).clone(),
            d_ego: tape.value(graph.d_ego).clone(),
            nmf: graph.nmf,
        })
    }

    /// Inference from an egocentric image alone: `(logits, D_ego)`.
    pub fn forward_infer(&self, ego: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (g, _, d) = self.ego_branch(&mut tape, ego)?;
        Ok((tape.value(g).clone(), tape.value(d).clone()))
    }

    /// Build the weighted objective for one group on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn objective_on_tape(
        &self,
        tape: &mut Tape,
        exo: &[Tensor],
        ego: &Tensor,
        label: usize,
        weights: &LossWeights,
        options: &LossOptions,
    ) -> Result<(Var, TrainGraph, crate::losses::TapeLoss)> {
        if label >= self.config.num_classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let graph = self.forward_train_on_tape(tape, exo, ego)?;
        let loss = total_loss_on_tape(tape, graph.s, graph.g, graph.f_exo, graph.f_ego, label, weights, options)?;
        Ok((loss.total, graph, loss))
    }

    /// Forward and backward for one group; gradients are added to the
    /// parameter store. Returns the loss breakdown and the converged
    /// dictionary of this group, if invariance mining ran.
    pub fn accumulate_gradients(
        &mut self,
        exo: &[Tensor],
        ego: &Tensor,
        label: usize,
        weights: &LossWeights,
        options: &LossOptions,
    ) -> Result<(LossBreakdown, Option<Tensor>)> {
        let mut tape = Tape::new();
        let (total, graph, parts) = self.objective_on_tape(&mut tape, exo, ego, label, weights, options)?;
        let breakdown = parts.breakdown(&tape);
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss: cls={} acp={} kt={} total={}",
                breakdown.cls, breakdown.acp, breakdown.kt, breakdown.total
            )));
        }
        tape.backward(total, &mut self.params)?;
        Ok((breakdown, graph.nmf.map(|n| n.w)))
    }

    pub fn checkpoint_entries(&self) -> Vec<(&str, &Tensor)> {
        let mut entries: Vec<(&str, &Tensor)> = self.params.iter().collect();
        entries.push((DICTIONARY_ENTRY, &self.dictionary.w0));
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.checkpoint_entries())
    }

    /// Load weights into a model built from `config`; every entry must match
    /// the expected name set and shapes.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        let expected = model.params.len() + 1;
        if entries.len() != expected {
            return Err(Error::Compat(format!(
                "checkpoint has {} entries, model expects {expected}",
                entries.len()
            )));
        }
        for (name, tensor) in entries {
            if name == DICTIONARY_ENTRY {
                if tensor.dims() != model.dictionary.w0.dims() {
                    return Err(Error::Compat(format!(
                        "dictionary dims {:?}, expected {:?}",
                        tensor.dims(),
                        model.dictionary.w0.dims()
                    )));
                }
                model.dictionary.w0 = tensor;
                continue;
            }
            match model.params.get(&name) {
                Err(_) => return Err(Error::Compat(format!("unexpected entry `{name}`"))),
                Ok(cur) if cur.dims() != tensor.dims() => {
                    return Err(Error::Compat(format!(
                        "`{name}` has dims {:?}, expected {:?}",
                        tensor.dims(),
                        cur.dims()
                    )))
                }
                Ok(_) => model.params.set(&name, tensor)?,
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            channels: 8,
            reduced_channels: 4,
            head_dim: 6,
            num_classes: 3,
            nmf: NmfConfig { rank: 3, ..NmfConfig::default() },
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, n, n], (0..3 * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn model(seed: u64, cfg: ModelConfig) -> CrossViewModel {
        CrossViewModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn set_identity_conv(m: &mut CrossViewModel, name: &str, c: usize) {
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.set(((i * c + i) * 3 + 1) * 3 + 1, 1.0).unwrap();
        }
        m.params.set(name, w).unwrap();
    }

    #[test]
    fn symmetric_pipeline_aligns_branches() {
        let cfg = small_config();
        let mut m = model(1, cfg.clone());
        m.params.set(aim::RES_W, Tensor::zeros(&[8, 4, 1, 1])).unwrap();
        set_identity_conv(&mut m, EGO_CONV1.0, 8);
        set_identity_conv(&mut m, EGO_CONV2.0, 8);
        let img = image(2, 16);
        let out = m.forward_train(std::slice::from_ref(&img), &img).unwrap();
        assert!(out.f_exo.max_abs_diff(&out.f_ego).unwrap() <= 1e-6);
        assert!(crate::losses::kt_loss(&out.f_exo, &out.f_ego).unwrap() <= 1e-6);
    }

    #[test]
    fn exo_pooling_is_mean_then_gap_equal_gap_then_mean() {
        let m = model(3, small_config());
        let exo: Vec<_> = (0..3).map(|i| image(10 + i, 16)).collect();
        let mut tape = Tape::new();
        let graph = m.forward_train_on_tape(&mut tape, &exo, &image(20, 16)).unwrap();
        let mut avg = Tensor::zeros(&[6]);
        for &d in &graph.d_exo {
            avg = avg.add(&crate::tensor::gap(tape.value(d)).unwrap()).unwrap();
        }
        let avg = avg.scale(1.0 / 3.0).unwrap();
        assert!(avg.max_abs_diff(tape.value(graph.f_exo)).unwrap() <= 1e-9);
    }

    #[test]
    fn forward_is_deterministic_and_inference_matches_ego_half() {
        let m = model(4, small_config());
        let exo: Vec<_> = (0..2).map(|i| image(30 + i, 16)).collect();
        let ego = image(40, 16);
        let a = m.forward_train(&exo, &ego).unwrap();
        let b = model(4, small_config()).forward_train(&exo, &ego).unwrap();
        assert_eq!(a, b);
        let (g, d) = m.forward_infer(&ego).unwrap();
        assert_eq!(g, a.g);
        assert_eq!(d, a.d_ego);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn zero_classifier_weights_yield_bias_logits() {
        let mut m = model(5, small_config());
        m.params.set(FC_W, Tensor::zeros(&[3, 6])).unwrap();
        let bias = Tensor::vector(&[0.1, -0.2, 0.3]).unwrap();
        m.params.set(FC_B, bias.clone()).unwrap();
        let (g, _) = m.forward_infer(&image(6, 16)).unwrap();
        assert_eq!(g, bias);
    }

    #[test]
    fn head_and_classifier_are_single_shared_instances() {
        let mut m = model(7, small_config());
        let exo = vec![image(8, 16)];
        let ego = image(9, 16);
        let mut tape = Tape::new();
        m.forward_train_on_tape(&mut tape, &exo, &ego).unwrap();
        // Both branches request the head through the same tape leaf.
        let w1 = tape.param(&m.params, HEAD_W).unwrap();
        let w2 = tape.param(&m.params, HEAD_W).unwrap();
        assert_eq!(w1, w2);
        // Changing the head once changes both branch outputs.
        let before = m.forward_train(&exo, &ego).unwrap();
        let head = m.params.get(HEAD_W).unwrap().scale(2.0).unwrap();
        m.params.set(HEAD_W, head).unwrap();
        let after = m.forward_train(&exo, &ego).unwrap();
        assert_ne!(before.f_exo, after.f_exo);
        assert_ne!(before.f_ego, after.f_ego);
    }

    #[test]
    fn aim_off_passes_backbone_features_through() {
        let cfg = ModelConfig { aim_enabled: false, ..small_config() };
        let m = model(11, cfg);
        let exo: Vec<_> = (0..3).map(|i| image(50 + i, 16)).collect();
        let mut tape = Tape::new();
        let graph = m.forward_train_on_tape(&mut tape, &exo, &image(60, 16)).unwrap();
        assert_eq!(graph.f_list, graph.z_list);
        assert!(graph.nmf.is_none());
    }

    #[test]
    fn zero_residual_conv_makes_aim_the_identity() {
        let mut m = model(12, small_config());
        m.params.set(aim::RES_W, Tensor::zeros(&[8, 4, 1, 1])).unwrap();
        let exo: Vec<_> = (0..3).map(|i| image(70 + i, 16)).collect();
        let mut tape = Tape::new();
        let graph = m.forward_train_on_tape(&mut tape, &exo, &image(80, 16)).unwrap();
        for (&f, &z) in graph.f_list.iter().zip(&graph.z_list) {
            assert_eq!(tape.value(f), tape.value(z));
        }
        let nmf = graph.nmf.unwrap();
        assert_eq!(nmf.m.dims(), &[4, 3 * 2 * 2]);
    }

    #[test]
    fn backbone_output_dims() {
        let m = model(13, ModelConfig::default());
        let mut tape = Tape::new();
        let z = m.backbone(&mut tape, &image(1, 64), false).unwrap();
        assert_eq!(tape.value(z).dims(), &[32, 8, 8]);
        assert!(matches!(m.forward_infer(&image(1, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xvc");
        let m = model(14, small_config());
        m.save(&path).unwrap();
        let back = CrossViewModel::load(small_config(), &path).unwrap();
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert!(a.max_abs_diff(b).unwrap() < 1e-6);
        }
        let other = ModelConfig { head_dim: 7, ..small_config() };
        assert!(matches!(CrossViewModel::load(other, &path), Err(Error::Compat(_))));
    }
}
