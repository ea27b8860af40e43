//! The detector: named convolution layers, forward pass with optional
//! feature-map capture, and a hand-written backward pass.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::mining::HookRegistry;
use crate::tensor::{col2im, gemm, im2col, ConvGeometry, FeatureMap, MatRef};

/// Which part of the detector a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Backbone,
    Neck,
    Head,
}

impl Scope {
    /// The scopes freezing criteria and weight mining operate on.
    pub const TRAINABLE: [Scope; 2] = [Scope::Neck, Scope::Head];
    pub const ALL: [Scope; 3] = [Scope::Backbone, Scope::Neck, Scope::Head];
}

/// A named parameter tensor with its gradient buffer and update flags.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Whole-tensor update exemption (`requires_grad == false`).
    pub requires_grad: bool,
    /// Element-level update exemption: `true` entries keep their value.
    pub fixed: Option<Vec<bool>>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            name,
            shape,
            value,
            grad: vec![0.0; n],
            requires_grad: true,
            fixed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// One convolution (with its bias), the unit of freezing.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub scope: Scope,
    pub geometry: ConvGeometry,
    pub relu: bool,
    pub weight: Param,
    pub bias: Param,
}

impl Layer {
    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn is_trainable(&self) -> bool {
        self.weight.requires_grad || self.bias.requires_grad
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<f32>) {
        let g = &self.geometry;
        let (ho, wo) = g.output_size(x.height, x.width);
        let cols = if g.kernel == 1 && g.stride == 1 && g.padding == 0 {
            x.data.clone()
        } else {
            im2col(x, g)
        };
        let np = x.batch * ho * wo;
        let mut out = FeatureMap::zeros(g.out_channels, x.batch, ho, wo);
        for (row, b) in out.data.chunks_mut(np).zip(&self.bias.value) {
            row.fill(*b);
        }
        gemm(
            MatRef::new(&self.weight.value, g.out_channels, g.patch_len()),
            MatRef::new(&cols, g.patch_len(), np),
            1.0,
            &mut out.data,
        );
        if self.relu {
            out.relu_inplace();
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and optionally returns the input
    /// gradient.
    fn backward(
        &mut self,
        tape: &LayerTape,
        grad_out: &FeatureMap,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let g = self.geometry;
        let np = grad_out.len() / g.out_channels;
        let mut pre = grad_out.data.clone();
        if self.relu {
            for (d, o) in pre.iter_mut().zip(&tape.output.data) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if self.weight.requires_grad {
            gemm(
                MatRef::new(&pre, g.out_channels, np),
                MatRef::new(&tape.cols, g.patch_len(), np).t(),
                1.0,
                &mut self.weight.grad,
            );
        }
        if self.bias.requires_grad {
            for (gb, row) in self.bias.grad.iter_mut().zip(pre.chunks(np)) {
                *gb += row.iter().sum::<f32>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut cols = vec![0.0f32; g.patch_len() * np];
        gemm(
            MatRef::new(&self.weight.value, g.out_channels, g.patch_len()).t(),
            MatRef::new(&pre, g.out_channels, np),
            0.0,
            &mut cols,
        );
        let (batch, h, w) = tape.input_shape;
        if g.kernel == 1 && g.stride == 1 && g.padding == 0 {
            Some(FeatureMap {
                channels: g.in_channels,
                batch,
                height: h,
                width: w,
                data: cols,
            })
        } else {
            Some(col2im(&cols, &g, batch, h, w))
        }
    }
}

/// Public description of a layer: name, scope and parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub scope: Scope,
    pub parameter_tensors: Vec<(String, Vec<usize>)>,
}

/// Backbone outputs at the neck levels, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures {
    pub levels: Vec<FeatureMap>,
}

impl BackboneFeatures {
    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |l| l.batch)
    }

    pub fn select(&self, images: &[usize]) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.select(images)).collect(),
        }
    }

    pub fn concat(parts: &[&BackboneFeatures]) -> Self {
        let depth = parts.first().map_or(0, |p| p.levels.len());
        Self {
            levels: (0..depth)
                .map(|i| {
                    let lv: Vec<&FeatureMap> = parts.iter().map(|p| &p.levels[i]).collect();
                    FeatureMap::concat_batch(&lv)
                })
                .collect(),
        }
    }
}

/// What the forward pass starts from.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Images(&'a FeatureMap),
    /// Precomputed backbone outputs; only valid while the backbone is frozen.
    Features(&'a BackboneFeatures),
}

impl Input<'_> {
    fn batch(&self) -> usize {
        match self {
            Input::Images(x) => x.batch,
            Input::Features(f) => f.batch(),
        }
    }
}

/// Dense per-cell outputs of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    /// `[num_classes, N, grid_h, grid_w]` classification logits.
    pub cls_logits: FeatureMap,
    /// `[4, N, grid_h, grid_w]` box regressions `(dx, dy, log w, log h)`.
    pub box_regs: FeatureMap,
    pub stride: usize,
}

impl RawPredictions {
    pub fn batch(&self) -> usize {
        self.cls_logits.batch
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    input_shape: (usize, usize, usize),
    cols: Vec<f32>,
    output: FeatureMap,
}

/// Saved forward state needed by [`Detector::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<Option<LayerTape>>,
}

struct Outcome {
    predictions: RawPredictions,
    captures: BTreeMap<String, FeatureMap>,
    tape: Option<Tape>,
}

/// Desk-scale one-stage detector with a backbone / neck / head split.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    seed: u64,
    layers: Vec<Layer>,
    backbone: Vec<usize>,
    /// Lateral projections, coarsest level first.
    laterals: Vec<usize>,
    neck_out: usize,
    shared: Vec<usize>,
    cls: usize,
    regress: usize,
    by_name: HashMap<String, usize>,
    pub(crate) hooks: HookRegistry,
}

const PRIOR_PROBABILITY: f64 = 0.01;

impl Detector {
    /// Builds a detector with deterministic initial weights. The backbone is
    /// update-exempt unless `config.train_backbone` is set.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut push = |name: String,
                        scope: Scope,
                        geometry: ConvGeometry,
                        relu: bool,
                        init: Init,
                        rng: &mut ChaCha8Rng| {
            let fan_in = geometry.patch_len() as f64;
            let std = match init {
                Init::He => (2.0 / fan_in).sqrt(),
                Init::Small => 0.01,
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let weight: Vec<f32> = (0..geometry.weight_len())
                .map(|_| normal.sample(rng) as f32)
                .collect();
            let bias_value = match init {
                Init::Small if scope == Scope::Head && name.starts_with("head.cls") => {
                    -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln() as f32
                }
                _ => 0.0,
            };
            let g = geometry;
            layers.push(Layer {
                weight: Param::new(
                    format!("{name}.weight"),
                    vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                    weight,
                ),
                bias: Param::new(
                    format!("{name}.bias"),
                    vec![g.out_channels],
                    vec![bias_value; g.out_channels],
                ),
                name,
                scope,
                geometry,
                relu,
            });
            layers.len() - 1
        };

        let conv3 = |cin, cout, stride| ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
        };

        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            backbone.push(push(
                format!("backbone.{i}"),
                Scope::Backbone,
                conv3(cin, c, 2),
                true,
                Init::He,
                &mut rng,
            ));
            cin = c;
        }

        let first = config.first_neck_level();
        let nc = config.neck_channels;
        let mut laterals = Vec::new();
        for (k, level) in (first..config.backbone_channels.len()).rev().enumerate() {
            laterals.push(push(
                format!("neck.{k}"),
                Scope::Neck,
                ConvGeometry {
                    in_channels: config.backbone_channels[level],
                    out_channels: nc,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                false,
                Init::He,
                &mut rng,
            ));
        }
        let neck_out = push(
            format!("neck.{}", laterals.len()),
            Scope::Neck,
            conv3(nc, nc, 1),
            true,
            Init::He,
            &mut rng,
        );
        let shared: Vec<usize> = (0..config.head_depth)
            .map(|i| {
                push(
                    format!("head.shared.{i}"),
                    Scope::Head,
                    conv3(nc, nc, 1),
                    true,
                    Init::He,
                    &mut rng,
                )
            })
            .collect();
        let cls = push(
            "head.cls.0".into(),
            Scope::Head,
            conv3(nc, config.num_classes, 1),
            false,
            Init::Small,
            &mut rng,
        );
        let regress = push(
            "head.box.0".into(),
            Scope::Head,
            conv3(nc, 4, 1),
            false,
            Init::Small,
            &mut rng,
        );

        let by_name = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        let mut model = Self {
            config,
            seed,
            layers,
            backbone,
            laterals,
            neck_out,
            shared,
            cls,
            regress,
            by_name,
            hooks: HookRegistry::default(),
        };
        let train_backbone = model.config.train_backbone;
        model.set_scope_trainable(Scope::Backbone, train_backbone);
        Ok(model)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Layers in forward-pass order.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.by_name
            .get(name)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut Layer> {
        match self.by_name.get(name) {
            Some(&i) => Ok(&mut self.layers[i]),
            None => Err(Error::UnknownLayer(name.to_string())),
        }
    }

    pub(crate) fn layer_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Layers whose scope is in `scopes`, in forward-pass order.
    pub fn layer_inventory(&self, scopes: &[Scope]) -> Vec<NamedLayer> {
        self.layers
            .iter()
            .filter(|l| scopes.contains(&l.scope))
            .map(|l| NamedLayer {
                name: l.name.clone(),
                scope: l.scope,
                parameter_tensors: l
                    .params()
                    .iter()
                    .map(|p| (p.name.clone(), p.shape.clone()))
                    .collect(),
            })
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params_mut().find(|p| p.name == name)
    }

    /// Copy of every parameter tensor, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f32>> {
        self.params()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn set_layer_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let layer = self.layer_mut(name)?;
        layer.weight.requires_grad = trainable;
        layer.bias.requires_grad = trainable;
        Ok(())
    }

    pub fn set_scope_trainable(&mut self, scope: Scope, trainable: bool) {
        for layer in self.layers.iter_mut().filter(|l| l.scope == scope) {
            layer.weight.requires_grad = trainable;
            layer.bias.requires_grad = trainable;
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone.iter().all(|&i| !self.layers[i].is_trainable())
    }

    /// Removes every element-level exemption.
    pub fn clear_fixed_masks(&mut self) {
        for p in self.params_mut() {
            p.fixed = None;
        }
    }

    pub fn hooks(&self) -> &HookRegistry {
        &self.hooks
    }

    /// Runs only the backbone, returning the neck-level outputs.
    pub fn backbone_features(&self, images: &FeatureMap) -> BackboneFeatures {
        let first = self.config.first_neck_level();
        let mut levels = Vec::new();
        let mut x = images.clone();
        for (i, &li) in self.backbone.iter().enumerate() {
            let (out, _) = self.layers[li].forward(&x);
            if i >= first {
                levels.push(out.clone());
            }
            x = out;
        }
        BackboneFeatures { levels }
    }

    /// Inference forward pass.
    pub fn forward(&self, input: Input<'_>) -> RawPredictions {
        self.run(input, &[], false)
            .expect("capture-free forward cannot fail")
            .predictions
    }

    /// Forward pass that also returns the post-activation output of each
    /// requested layer.
    pub fn forward_with_capture(
        &self,
        input: Input<'_>,
        layers: &[&str],
    ) -> Result<(RawPredictions, BTreeMap<String, FeatureMap>)> {
        let mut idx = Vec::with_capacity(layers.len());
        for name in layers {
            let i = self
                .layer_index(name)
                .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
            if matches!(input, Input::Features(_)) && self.layers[i].scope == Scope::Backbone {
                return Err(Error::Argument(format!(
                    "backbone layer `{name}` cannot be captured from precomputed features"
                )));
            }
            idx.push(i);
        }
        let out = self.run(input, &idx, false)?;
        Ok((out.predictions, out.captures))
    }

    /// Forward pass that records what [`Detector::backward`] needs.
    pub fn forward_train(&self, input: Input<'_>) -> Result<(RawPredictions, Tape)> {
        if matches!(input, Input::Features(_)) && !self.backbone_frozen() {
            return Err(Error::State(
                "precomputed backbone features require a frozen backbone".into(),
            ));
        }
        let out = self.run(input, &[], true)?;
        Ok((out.predictions, out.tape.expect("tape requested")))
    }

    fn run(&self, input: Input<'_>, capture: &[usize], keep_tape: bool) -> Result<Outcome> {
        let mut tapes: Vec<Option<LayerTape>> = vec![None; self.layers.len()];
        let mut captures = BTreeMap::new();
        let tape_backbone = keep_tape && !self.backbone_frozen();

        let mut apply = |li: usize, x: &FeatureMap, record: bool| -> FeatureMap {
            let (out, cols) = self.layers[li].forward(x);
            if capture.contains(&li) {
                captures.insert(self.layers[li].name.clone(), out.clone());
            }
            if record {
                tapes[li] = Some(LayerTape {
                    input_shape: (x.batch, x.height, x.width),
                    cols,
                    output: out.clone(),
                });
            }
            out
        };

        let owned;
        let levels: &[FeatureMap] = match input {
            Input::Images(images) => {
                let first = self.config.first_neck_level();
                let mut levels = Vec::new();
                let mut x = images.clone();
                for (i, &li) in self.backbone.iter().enumerate() {
                    let out = apply(li, &x, tape_backbone);
                    if i >= first {
                        levels.push(out.clone());
                    }
                    x = out;
                }
                owned = levels;
                &owned
            }
            Input::Features(f) => {
                if f.levels.len() != self.laterals.len() {
                    return Err(Error::Structural(format!(
                        "expected {} backbone levels, got {}",
                        self.laterals.len(),
                        f.levels.len()
                    )));
                }
                &f.levels
            }
        };

        let mut merged: Option<FeatureMap> = None;
        for (k, &li) in self.laterals.iter().enumerate() {
            let level = &levels[levels.len() - 1 - k];
            let mut lat = apply(li, level, keep_tape);
            if let Some(prev) = merged {
                lat.add_assign(&prev.upsample2());
            }
            merged = Some(lat);
        }
        let mut x = apply(self.neck_out, &merged.expect("at least one level"), keep_tape);
        for &li in &self.shared {
            x = apply(li, &x, keep_tape);
        }
        let cls_logits = apply(self.cls, &x, keep_tape);
        let box_regs = apply(self.regress, &x, keep_tape);
        debug_assert_eq!(cls_logits.batch, input.batch());
        Ok(Outcome {
            predictions: RawPredictions {
                cls_logits,
                box_regs,
                stride: self.config.grid_stride,
            },
            captures,
            tape: keep_tape.then_some(Tape { layers: tapes }),
        })
    }

    fn trainable_before(&self, li: usize) -> bool {
        self.layers[..li].iter().any(Layer::is_trainable)
    }

    /// Back-propagates output gradients, overwriting every parameter's
    /// `grad`, then applies any attached gradient hooks.
    pub fn backward(&mut self, tape: &Tape, grad_cls: &FeatureMap, grad_box: &FeatureMap) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
        let backbone_trainable = !self.backbone_frozen();
        let need_cls = self.trainable_before(self.cls);

        let step = |model: &mut Self, li: usize, g: &FeatureMap, need_input: bool| {
            let layer_tape = tape.layers[li]
                .as_ref()
                .expect("layer missing from tape; was forward_train used?");
            model.layers[li].backward(layer_tape, g, need_input)
        };

        let mut g = match (
            step(self, self.cls, grad_cls, need_cls),
            step(self, self.regress, grad_box, need_cls),
        ) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                a
            }
            _ => {
                self.hooks.apply(&mut self.layers);
                return;
            }
        };
        for &li in self.shared.clone().iter().rev() {
            let need = self.trainable_before(li);
            match step(self, li, &g, need) {
                Some(next) => g = next,
                None => {
                    self.hooks.apply(&mut self.layers);
                    return;
                }
            }
        }
        let need = self.trainable_before(self.neck_out);
        let Some(mut g_merged) = step(self, self.neck_out, &g, need) else {
            self.hooks.apply(&mut self.layers);
            return;
        };

        // Reverse the top-down pathway: finest lateral first.
        let first = self.config.first_neck_level();
        let mut level_grads: Vec<Option<FeatureMap>> = vec![None; self.backbone.len()];
        let laterals = self.laterals.clone();
        for (k, &li) in laterals.iter().enumerate().rev() {
            let level = first + (laterals.len() - 1 - k);
            if let Some(gl) = step(self, li, &g_merged, backbone_trainable) {
                level_grads[level] = Some(gl);
            }
            if k > 0 {
                g_merged = g_merged.downsample2_sum();
            }
        }

        if backbone_trainable {
            let mut carry: Option<FeatureMap> = None;
            for (i, &li) in self.backbone.clone().iter().enumerate().rev() {
                let mut gi = match (carry.take(), level_grads[i].take()) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        a
                    }
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => continue,
                };
                let need = i > 0 && self.trainable_before(li);
                carry = step(self, li, &gi, need);
                gi.data.clear();
            }
        }
        self.hooks.apply(&mut self.layers);
    }
}

#[derive(Clone, Copy)]
enum Init {
    He,
    Small,
}
