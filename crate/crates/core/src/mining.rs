//! Weight-level mining (top-K by magnitude), gradient-penalty hooks and
//! application of layer freeze plans.
//!
//! Two mechanisms protect mined weights:
//! - a gradient hook scales the raw gradient of every mined entry by a
//!   penalty `P` before the optimizer sees it (`P = 0` blocks the gradient);
//! - a fixed mask marks entries the optimizer must not touch at all.
//!
//! With plain gradient descent and no weight decay the two coincide at
//! `P = 0`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::importance::FreezePlan;
use crate::model::{Detector, Layer, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    MmnTopk,
}

/// Boolean selection over parameter tensors; `true` marks a mined entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    pub entries: BTreeMap<String, Vec<bool>>,
    pub fraction: f64,
    pub origin: MaskOrigin,
}

impl ParamMask {
    pub fn selected(&self) -> usize {
        self.entries
            .values()
            .map(|m| m.iter().filter(|b| **b).count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// Number of entries kept out of `n` for `fraction`: `ceil(fraction * n)`.
/// A small tolerance absorbs binary rounding of decimal fractions so that,
/// e.g., `0.7 * 10` keeps 7 rather than 8.
pub fn topk_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Top-K mask of a single tensor by absolute value, ties broken by index.
pub fn topk_mask(values: &[f32], fraction: f64) -> Vec<bool> {
    let k = topk_count(fraction, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; values.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Marks, within every parameter tensor of the layers in `scopes`, the
/// `ceil(fraction * size)` entries of largest magnitude.
pub fn mine_topk_weights(model: &Detector, fraction: f64, scopes: &[Scope]) -> Result<ParamMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "mining fraction must be in (0, 1], got {fraction}"
        )));
    }
    let entries = model
        .layers()
        .iter()
        .filter(|l| scopes.contains(&l.scope))
        .flat_map(|l| l.params())
        .map(|p| (p.name.clone(), topk_mask(&p.value, fraction)))
        .collect();
    Ok(ParamMask {
        entries,
        fraction,
        origin: MaskOrigin::MmnTopk,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientHook {
    pub tensor: String,
    pub penalty: f32,
    #[serde(skip)]
    mask: Vec<bool>,
    #[serde(skip)]
    layer: usize,
    #[serde(skip)]
    is_bias: bool,
}

/// Active gradient hooks; at most one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HookRegistry {
    active_hooks: Vec<GradientHook>,
    penalty: f32,
}

impl HookRegistry {
    pub fn active_hooks(&self) -> impl Iterator<Item = (&str, f32)> {
        self.active_hooks
            .iter()
            .map(|h| (h.tensor.as_str(), h.penalty))
    }

    pub fn len(&self) -> usize {
        self.active_hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active_hooks.is_empty()
    }

    pub fn penalty(&self) -> f32 {
        self.penalty
    }

    pub(crate) fn apply(&self, layers: &mut [Layer]) {
        for hook in &self.active_hooks {
            let layer = &mut layers[hook.layer];
            let param = if hook.is_bias {
                &mut layer.bias
            } else {
                &mut layer.weight
            };
            for (g, m) in param.grad.iter_mut().zip(&hook.mask) {
                if *m {
                    *g *= hook.penalty;
                }
            }
        }
    }
}

fn check_mask_shapes(model: &Detector, mask: &ParamMask) -> Result<Vec<(usize, bool)>> {
    mask.entries
        .iter()
        .map(|(name, bits)| {
            let (layer_name, is_bias) = match name.rsplit_once('.') {
                Some((l, "weight")) => (l, false),
                Some((l, "bias")) => (l, true),
                _ => return Err(Error::Structural(format!("unknown tensor `{name}`"))),
            };
            let li = model
                .layer_index(layer_name)
                .ok_or_else(|| Error::Structural(format!("unknown tensor `{name}`")))?;
            let layer = &model.layers()[li];
            let param = if is_bias { &layer.bias } else { &layer.weight };
            if param.len() != bits.len() {
                return Err(Error::Structural(format!(
                    "mask for `{name}` has {} entries, tensor has {}",
                    bits.len(),
                    param.len()
                )));
            }
            Ok((li, is_bias))
        })
        .collect()
}

/// Installs hooks scaling the gradient of every masked entry by `penalty`
/// during subsequent backward passes.
pub fn attach_gradient_penalty(
    model: &mut Detector,
    mask: &ParamMask,
    penalty: f32,
) -> Result<HookRegistry> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::Argument(format!(
            "penalty must be finite and >= 0, got {penalty}"
        )));
    }
    let slots = check_mask_shapes(model, mask)?;
    for name in mask.entries.keys() {
        if model.hooks.active_hooks.iter().any(|h| &h.tensor == name) {
            return Err(Error::State(format!(
                "tensor `{name}` already has an active hook; dump hooks first"
            )));
        }
    }
    for ((name, bits), (layer, is_bias)) in mask.entries.iter().zip(slots) {
        model.hooks.active_hooks.push(GradientHook {
            tensor: name.clone(),
            penalty,
            mask: bits.clone(),
            layer,
            is_bias,
        });
    }
    model.hooks.penalty = penalty;
    Ok(model.hooks.clone())
}

/// Removes every active hook. Idempotent.
pub fn dump_hooks(model: &mut Detector) {
    model.hooks = HookRegistry::default();
}

/// Marks the masked entries as fixed: the optimizer leaves them unchanged.
pub fn fix_masked_weights(model: &mut Detector, mask: &ParamMask) -> Result<()> {
    let slots = check_mask_shapes(model, mask)?;
    for (bits, (li, is_bias)) in mask.entries.values().zip(slots) {
        let name = {
            let layer = &model.layers()[li];
            if is_bias {
                layer.bias.name.clone()
            } else {
                layer.weight.name.clone()
            }
        };
        model
            .param_mut(&name)
            .expect("validated above")
            .fixed = Some(bits.clone());
    }
    Ok(())
}

/// Makes every neck and head layer update-enabled again. The backbone keeps
/// its own exemption.
pub fn reset_update_exemptions(model: &mut Detector) {
    for scope in Scope::TRAINABLE {
        model.set_scope_trainable(scope, true);
    }
}

/// Resets neck/head exemptions, then exempts every layer in the plan.
pub fn apply_freeze_plan(model: &mut Detector, plan: &FreezePlan) -> Result<()> {
    for name in &plan.frozen_layers {
        match model.layer(name) {
            Ok(l) if l.scope != Scope::Backbone => {}
            Ok(_) => {
                return Err(Error::Structural(format!(
                    "freeze plan names backbone layer `{name}`"
                )))
            }
            Err(_) => {
                return Err(Error::Structural(format!(
                    "freeze plan names unknown layer `{name}`"
                )))
            }
        }
    }
    reset_update_exemptions(model);
    for name in &plan.frozen_layers {
        model.set_layer_trainable(name, false)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskTensorEntry {
    offset: u64,
    size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskManifest {
    fraction: f64,
    origin: MaskOrigin,
    tensors: BTreeMap<String, MaskTensorEntry>,
}

/// Writes `<stem>.json` (manifest) and `<stem>.bits` (LSB-first bit-packed
/// masks, each tensor starting on a byte boundary; `offset` is in bytes).
pub fn save_mask(mask: &ParamMask, dir: &Path, stem: &str) -> Result<()> {
    let mut bits = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, m) in &mask.entries {
        tensors.insert(
            name.clone(),
            MaskTensorEntry {
                offset: bits.len() as u64,
                size: m.len() as u64,
            },
        );
        for chunk in m.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, b)| acc | ((*b as u8) << i));
            bits.push(byte);
        }
    }
    let manifest = MaskManifest {
        fraction: mask.fraction,
        origin: mask.origin,
        tensors,
    };
    fs::create_dir_all(dir).at(dir)?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?).at(&json_path)?;
    let bits_path = dir.join(format!("{stem}.bits"));
    fs::write(&bits_path, bits).at(bits_path)
}

pub fn load_mask(dir: &Path, stem: &str) -> Result<ParamMask> {
    let json_path = dir.join(format!("{stem}.json"));
    let manifest: MaskManifest = serde_json::from_slice(&fs::read(&json_path).at(&json_path)?)?;
    let bits_path = dir.join(format!("{stem}.bits"));
    let bits = fs::read(&bits_path).at(&bits_path)?;
    let mut entries = BTreeMap::new();
    for (name, e) in manifest.tensors {
        let size = e.size as usize;
        let bytes = bits
            .get(e.offset as usize..e.offset as usize + size.div_ceil(8))
            .ok_or_else(|| Error::Structural(format!("truncated mask for `{name}`")))?;
        let m = (0..size).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        entries.insert(name, m);
    }
    Ok(ParamMask {
        entries,
        fraction: manifest.fraction,
        origin: manifest.origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_example() {
        assert_eq!(
            topk_mask(&[0.5, -0.9, 0.1, 0.3], 0.5),
            vec![true, true, false, false]
        );
        assert!(topk_mask(&[0.5, -0.9, 0.1], 1.0).iter().all(|b| *b));
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(
            topk_mask(&[1.0, -1.0, 1.0, 1.0], 0.5),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn count_rule_handles_decimal_fractions() {
        assert_eq!(topk_count(0.7, 10), 7);
        assert_eq!(topk_count(0.75, 7), 6);
        assert_eq!(topk_count(0.25, 1), 1);
        assert_eq!(topk_count(0.9, 10), 9);
        assert_eq!(topk_count(0.01, 10), 1);
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        let m = Detector::new(Default::default(), 0).unwrap();
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                mine_topk_weights(&m, f, &Scope::TRAINABLE),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn hooks_are_one_per_tensor_and_dump_is_idempotent() {
        let mut m = Detector::new(Default::default(), 0).unwrap();
        let mask = mine_topk_weights(&m, 0.5, &Scope::TRAINABLE).unwrap();
        let reg = attach_gradient_penalty(&mut m, &mask, 0.1).unwrap();
        assert_eq!(reg.len(), mask.entries.len());
        assert!(matches!(
            attach_gradient_penalty(&mut m, &mask, 0.1),
            Err(Error::State(_))
        ));
        dump_hooks(&mut m);
        dump_hooks(&mut m);
        assert!(m.hooks().is_empty());
        attach_gradient_penalty(&mut m, &mask, 0.1).unwrap();
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut m = Detector::new(Default::default(), 0).unwrap();
        let mut mask = mine_topk_weights(&m, 0.5, &Scope::TRAINABLE).unwrap();
        mask.entries.get_mut("head.cls.0.bias").unwrap().push(true);
        assert!(matches!(
            attach_gradient_penalty(&mut m, &mask, 0.0),
            Err(Error::Structural(_))
        ));
        let mut bogus = mask.clone();
        bogus.entries.clear();
        bogus.entries.insert("nope.weight".into(), vec![true]);
        assert!(matches!(
            fix_masked_weights(&mut m, &bogus),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn freeze_plan_resets_then_freezes() {
        let mut m = Detector::new(Default::default(), 0).unwrap();
        let plan = |layers: &[&str]| FreezePlan {
            criterion: crate::importance::Criterion::Entropy,
            percentage: 0.0,
            frozen_layers: layers.iter().map(|s| s.to_string()).collect(),
            candidate_count: 8,
        };
        apply_freeze_plan(&mut m, &plan(&["neck.0", "head.cls.0"])).unwrap();
        assert!(!m.layer("neck.0").unwrap().is_trainable());
        apply_freeze_plan(&mut m, &plan(&[])).unwrap();
        for l in m.layers() {
            assert_eq!(l.is_trainable(), l.scope != Scope::Backbone, "{}", l.name);
        }
        assert!(matches!(
            apply_freeze_plan(&mut m, &plan(&["neck.42"])),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn mask_sidecar_round_trip() {
        let m = Detector::new(Default::default(), 3).unwrap();
        let mask = mine_topk_weights(&m, 0.25, &Scope::TRAINABLE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_mask(&mask, dir.path(), "mask").unwrap();
        assert_eq!(load_mask(dir.path(), "mask").unwrap(), mask);
    }
}
