//! The network: a shared conv + FC feature extractor with three affine
//! heads (activity classifier, augmentation-type classifier, and a binary
//! domain discriminator), plus an optional affine projection used only by
//! the contrastive loss.

use crate::augment::N_AUG_CLASSES;
use crate::error::{Error, Result};
use crate::tape::{Parameter, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of domain classes (original vs augmented).
pub const N_DOMAIN_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_width: usize,
}

/// Static description of the network; parameter count and all derived
/// widths are pure functions of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub input_width: usize,
    /// Conv layers, each followed by a rectifier and a (1, 2)/stride-2 pool.
    pub conv_layers: Vec<ConvLayerSpec>,
    pub fc_feature_dim: usize,
    pub n_activity_classes: usize,
    /// Extra affine projection feeding only the contrastive loss.
    #[serde(default)]
    pub projection_head: bool,
}

impl ArchitectureSpec {
    /// Two conv layers with width-9 kernels, 64-dim features.
    pub fn dsads() -> Self {
        Self {
            input_channels: 45,
            input_width: 125,
            conv_layers: vec![
                ConvLayerSpec { out_channels: 16, kernel_width: 9 },
                ConvLayerSpec { out_channels: 32, kernel_width: 9 },
            ],
            fc_feature_dim: 64,
            n_activity_classes: 19,
            projection_head: false,
        }
    }

    pub fn pamap2() -> Self {
        Self {
            input_channels: 27,
            input_width: 512,
            n_activity_classes: 8,
            ..Self::dsads()
        }
    }

    /// Three conv layers with width-6 kernels, 128-dim features.
    pub fn uschad() -> Self {
        Self {
            input_channels: 6,
            input_width: 500,
            conv_layers: vec![
                ConvLayerSpec { out_channels: 16, kernel_width: 6 },
                ConvLayerSpec { out_channels: 32, kernel_width: 6 },
                ConvLayerSpec { out_channels: 64, kernel_width: 6 },
            ],
            fc_feature_dim: 128,
            n_activity_classes: 12,
            projection_head: false,
        }
    }

    /// `(channels, width)` after each conv+pool stage, starting from the
    /// input stage.
    pub fn shape_trace(&self) -> Result<Vec<(usize, usize)>> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("architecture needs at least one conv layer".into()));
        }
        if self.fc_feature_dim == 0 || self.n_activity_classes == 0 {
            return Err(Error::Config("feature dim and class count must be >= 1".into()));
        }
        let mut trace = vec![(self.input_channels, self.input_width)];
        let mut w = self.input_width;
        let mut _c = self.input_channels;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.out_channels == 0 || layer.kernel_width == 0 {
                return Err(Error::Config(format!("conv layer {i} has a zero extent")));
            }
            if w < layer.kernel_width {
                return Err(Error::Config(format!(
                    "conv layer {i}: width {w} is narrower than kernel {}; trace so far {trace:?}",
                    layer.kernel_width
                )));
            }
            w = w - layer.kernel_width + 1;
            if w < 2 {
                return Err(Error::Config(format!(
                    "conv layer {i}: width {w} too narrow to pool; trace so far {trace:?}"
                )));
            }
            w /= 2;
            _c = layer.out_channels;
            trace.push((layer.out_channels, w));
        }
        Ok(trace)
    }

    /// Flattened extractor width feeding the FC layer.
    pub fn flattened_len(&self) -> Result<usize> {
        let trace = self.shape_trace()?;
        let (c, w) = *trace.last().unwrap();
        Ok(c * w)
    }
}

/// Parameter layout: conv kernels/biases in layer order, then the FC
/// layer, then the three heads, then the optional projection.
#[derive(Clone, Debug)]
pub struct DDLearnModel {
    spec: ArchitectureSpec,
    params: Vec<Parameter>,
}

/// Tape handles for one forward pass over a model's parameters.
pub struct ModelBinding {
    vars: Vec<Var>,
}

impl ModelBinding {
    /// Parameter leaf handles in `parameters()` order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl DDLearnModel {
    /// Seeded fan-in-scaled uniform initialization; biases start at zero.
    pub fn build(spec: ArchitectureSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.shape_trace()?;
        let mut params = Vec::new();
        let mut in_c = spec.input_channels;
        for (i, layer) in spec.conv_layers.iter().enumerate() {
            let fan_in = in_c * layer.kernel_width;
            params.push(Parameter::new(
                format!("conv{i}.kernel"),
                fan_in_uniform(vec![layer.out_channels, in_c, 1, layer.kernel_width], fan_in, rng),
            ));
            params.push(Parameter::new(
                format!("conv{i}.bias"),
                Tensor::zeros(vec![layer.out_channels]),
            ));
            in_c = layer.out_channels;
        }
        let flat = spec.flattened_len()?;
        params.push(Parameter::new(
            "fc.weight",
            fan_in_uniform(vec![spec.fc_feature_dim, flat], flat, rng),
        ));
        params.push(Parameter::new("fc.bias", Tensor::zeros(vec![spec.fc_feature_dim])));
        let d = spec.fc_feature_dim;
        for (name, width) in [
            ("activity", spec.n_activity_classes),
            ("augment", N_AUG_CLASSES),
            ("domain", N_DOMAIN_CLASSES),
        ] {
            params.push(Parameter::new(
                format!("{name}.weight"),
                fan_in_uniform(vec![width, d], d, rng),
            ));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![width])));
        }
        if spec.projection_head {
            params.push(Parameter::new("projection.weight", fan_in_uniform(vec![d, d], d, rng)));
            params.push(Parameter::new("projection.bias", Tensor::zeros(vec![d])));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rebuild a model around explicit named parameters (checkpoint load).
    pub(crate) fn from_parts(spec: ArchitectureSpec, params: Vec<Parameter>) -> Result<Self> {
        let mut rng = crate::rng::stream(0, &[]);
        let template = Self::build(spec.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, architecture implies {}",
                params.len(),
                template.params.len()
            )));
        }
        for (have, want) in params.iter().zip(&template.params) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(Error::Schema(format!(
                    "checkpoint parameter `{}` {:?} does not match expected `{}` {:?}",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    fn idx_fc(&self) -> usize {
        2 * self.spec.conv_layers.len()
    }

    fn idx_head(&self, head: usize) -> usize {
        self.idx_fc() + 2 + 2 * head
    }

    /// Copy all parameter values onto a tape as leaves.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding { vars: self.params.iter().map(|p| tape.param(p)).collect() }
    }

    /// conv → rectifier → pool per layer, flatten, FC, rectifier.
    pub fn forward_features(&self, tape: &mut Tape, bind: &ModelBinding, batch: Var) -> Result<Var> {
        let shape = tape.value(batch).shape().to_vec();
        if shape.len() != 4
            || shape[1] != self.spec.input_channels
            || shape[2] != 1
            || shape[3] != self.spec.input_width
        {
            return Err(Error::dim(
                "forward_features",
                format!(
                    "expected [b, {}, 1, {}], got {shape:?}",
                    self.spec.input_channels, self.spec.input_width
                ),
            ));
        }
        let b = shape[0];
        let mut x = batch;
        for i in 0..self.spec.conv_layers.len() {
            let conv = tape.conv2d(x, bind.vars[2 * i], bind.vars[2 * i + 1])?;
            let act = tape.relu(conv);
            x = tape.maxpool2d(act)?;
        }
        let flat = self.spec.flattened_len()?;
        let flattened = tape.reshape(x, vec![b, flat])?;
        let fc = tape.fc(flattened, bind.vars[self.idx_fc()], bind.vars[self.idx_fc() + 1])?;
        Ok(tape.relu(fc))
    }

    pub fn activity_logits(&self, tape: &mut Tape, bind: &ModelBinding, features: Var) -> Result<Var> {
        tape.fc(features, bind.vars[self.idx_head(0)], bind.vars[self.idx_head(0) + 1])
    }

    pub fn aug_logits(&self, tape: &mut Tape, bind: &ModelBinding, features: Var) -> Result<Var> {
        tape.fc(features, bind.vars[self.idx_head(1)], bind.vars[self.idx_head(1) + 1])
    }

    pub fn domain_logits(&self, tape: &mut Tape, bind: &ModelBinding, features: Var) -> Result<Var> {
        tape.fc(features, bind.vars[self.idx_head(2)], bind.vars[self.idx_head(2) + 1])
    }

    /// All three head outputs: `(activity, augmentation, domain)` logits.
    pub fn forward_heads(
        &self,
        tape: &mut Tape,
        bind: &ModelBinding,
        features: Var,
    ) -> Result<(Var, Var, Var)> {
        Ok((
            self.activity_logits(tape, bind, features)?,
            self.aug_logits(tape, bind, features)?,
            self.domain_logits(tape, bind, features)?,
        ))
    }

    /// Representation fed to the contrastive loss: the features, or their
    /// affine projection when the projection head is enabled.
    pub fn contrastive_input(&self, tape: &mut Tape, bind: &ModelBinding, features: Var) -> Result<Var> {
        if self.spec.projection_head {
            let i = self.idx_head(3);
            tape.fc(features, bind.vars[i], bind.vars[i + 1])
        } else {
            Ok(features)
        }
    }

    /// Add the tape's gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bind: &ModelBinding) -> Result<()> {
        for (param, &var) in self.params.iter_mut().zip(&bind.vars) {
            param.accumulate(tape.grad(var)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::dim(
                "restore",
                format!("snapshot has {} tensors, model has {}", snapshot.len(), self.params.len()),
            ));
        }
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            if p.value.shape() != s.shape() {
                return Err(Error::dim(
                    "restore",
                    format!("parameter `{}` shape mismatch", p.name),
                ));
            }
            p.value = s.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn preset_shape_traces() {
        // 125 →(conv9) 117 →(pool) 58 →(conv9) 50 →(pool) 25
        let trace = ArchitectureSpec::dsads().shape_trace().unwrap();
        assert_eq!(trace, vec![(45, 125), (16, 58), (32, 25)]);
        let trace = ArchitectureSpec::pamap2().shape_trace().unwrap();
        assert_eq!(trace, vec![(27, 512), (16, 252), (32, 122)]);
        let trace = ArchitectureSpec::uschad().shape_trace().unwrap();
        assert_eq!(trace, vec![(6, 500), (16, 247), (32, 121), (64, 58)]);
    }

    #[test]
    fn param_counts_are_pinned() {
        let mut r = rng::stream(0, &[]);
        let dsads = DDLearnModel::build(ArchitectureSpec::dsads(), &mut r).unwrap();
        assert_eq!(dsads.param_count(), 64_285);
        let pamap2 = DDLearnModel::build(ArchitectureSpec::pamap2(), &mut r).unwrap();
        assert_eq!(pamap2.param_count(), 259_634);
        let uschad = DDLearnModel::build(ArchitectureSpec::uschad(), &mut r).unwrap();
        assert_eq!(uschad.param_count(), 494_150);
    }

    #[test]
    fn build_is_deterministic() {
        let a = DDLearnModel::build(ArchitectureSpec::dsads(), &mut rng::stream(5, &[])).unwrap();
        let b = DDLearnModel::build(ArchitectureSpec::dsads(), &mut rng::stream(5, &[])).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
    }

    #[test]
    fn too_narrow_input_errors_with_trace() {
        let spec = ArchitectureSpec {
            input_width: 10,
            ..ArchitectureSpec::dsads()
        };
        // 10 →(conv9) 2 →(pool) 1, then the second conv9 cannot fit.
        let err = spec.shape_trace().unwrap_err();
        assert!(err.to_string().contains("trace so far"), "{err}");
    }

    #[test]
    fn dsads_feature_dim_is_64() {
        let spec = ArchitectureSpec::dsads();
        let model = DDLearnModel::build(spec, &mut rng::stream(1, &[])).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![2, 45, 1, 125]));
        let f = model.forward_features(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[2, 64]);
        // Zero input and zero biases rectify to zero features.
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        let (act, aug, dom) = model.forward_heads(&mut tape, &bind, f).unwrap();
        assert_eq!(tape.value(act).shape(), &[2, 19]);
        assert_eq!(tape.value(aug).shape(), &[2, 8]);
        assert_eq!(tape.value(dom).shape(), &[2, 2]);
    }

    #[test]
    fn uschad_feature_dim_is_128() {
        let model =
            DDLearnModel::build(ArchitectureSpec::uschad(), &mut rng::stream(1, &[])).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![1, 6, 1, 500]));
        let f = model.forward_features(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 128]);
    }

    #[test]
    fn batch_duplication_duplicates_rows() {
        let spec = ArchitectureSpec {
            input_channels: 3,
            input_width: 16,
            conv_layers: vec![ConvLayerSpec { out_channels: 2, kernel_width: 3 }],
            fc_feature_dim: 5,
            n_activity_classes: 4,
            projection_head: false,
        };
        let model = DDLearnModel::build(spec, &mut rng::stream(2, &[])).unwrap();
        let mut r = rng::stream(9, &[1]);
        let one = Tensor::uniform(vec![1, 3, 1, 16], -1.0, 1.0, &mut r);
        let mut two_data = one.data().to_vec();
        two_data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 3, 1, 16], two_data).unwrap();

        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let x1 = tape.leaf(one);
        let x2 = tape.leaf(two);
        let f1 = model.forward_features(&mut tape, &bind, x1).unwrap();
        let f2 = model.forward_features(&mut tape, &bind, x2).unwrap();
        let d = tape.value(f1).data().to_vec();
        let dd = tape.value(f2).data();
        assert_eq!(&dd[..d.len()], &d[..]);
        assert_eq!(&dd[d.len()..], &d[..]);
    }

    #[test]
    fn batch_permutation_permutes_outputs_identically() {
        let spec = ArchitectureSpec {
            input_channels: 3,
            input_width: 16,
            conv_layers: vec![ConvLayerSpec { out_channels: 2, kernel_width: 3 }],
            fc_feature_dim: 5,
            n_activity_classes: 4,
            projection_head: false,
        };
        let model = DDLearnModel::build(spec, &mut rng::stream(6, &[])).unwrap();
        let mut r = rng::stream(7, &[2]);
        let samples: Vec<Tensor> =
            (0..4).map(|_| Tensor::uniform(vec![3, 1, 16], -1.0, 1.0, &mut r)).collect();
        let perm = [2usize, 0, 3, 1];

        let features_of = |order: &[usize]| {
            let mut data = Vec::new();
            for &i in order {
                data.extend_from_slice(samples[i].data());
            }
            let batch = Tensor::new(vec![order.len(), 3, 1, 16], data).unwrap();
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let x = tape.leaf(batch);
            let f = model.forward_features(&mut tape, &bind, x).unwrap();
            tape.value(f).data().to_vec()
        };
        let base = features_of(&[0, 1, 2, 3]);
        let permuted = features_of(&perm);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(&permuted[row * 5..(row + 1) * 5], &base[src * 5..(src + 1) * 5]);
        }
    }

    #[test]
    fn heads_are_independent() {
        let spec = ArchitectureSpec {
            input_channels: 3,
            input_width: 16,
            conv_layers: vec![ConvLayerSpec { out_channels: 2, kernel_width: 3 }],
            fc_feature_dim: 5,
            n_activity_classes: 4,
            projection_head: false,
        };
        let mut model = DDLearnModel::build(spec, &mut rng::stream(3, &[])).unwrap();
        let x = Tensor::uniform(vec![1, 3, 1, 16], -1.0, 1.0, &mut rng::stream(4, &[]));

        let run = |m: &DDLearnModel| {
            let mut tape = Tape::new();
            let bind = m.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let f = m.forward_features(&mut tape, &bind, xv).unwrap();
            let (a, g, d) = m.forward_heads(&mut tape, &bind, f).unwrap();
            (
                tape.value(a).data().to_vec(),
                tape.value(g).data().to_vec(),
                tape.value(d).data().to_vec(),
            )
        };
        let (a0, g0, d0) = run(&model);
        // Perturb only the activity head (its bias, which always feeds in).
        let act_bias = model.idx_head(0) + 1;
        model.params[act_bias].value.data_mut()[0] += 0.5;
        let (a1, g1, d1) = run(&model);
        assert_ne!(a0, a1);
        assert_eq!(g0, g1);
        assert_eq!(d0, d1);
    }
}
