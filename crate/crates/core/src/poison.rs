//! Trigger planting, poison-set assembly, and the mislabeling strategies used
//! by backdoor functionality extraction.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A trigger planting procedure: overwrite a patch window, or blend a
/// full-size pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerSpec {
    Patch {
        /// (c, hp, wp) pixel block written over the image
        mark: Tensor,
        /// top-left (row, col) of the window
        position: (usize, usize),
    },
    Blend {
        /// (c, h, w) pattern, same shape as the inputs
        pattern: Tensor,
        /// blending opacity in [0,1]
        alpha: f64,
    },
}

impl TriggerSpec {
    /// 3x3 checkered high-contrast patch in the bottom-right corner.
    pub fn default_patch(image_shape: [usize; 3]) -> Result<TriggerSpec> {
        let [c, h, w] = image_shape;
        if h < 3 || w < 3 {
            return Err(Error::Geometry(format!(
                "image {h}x{w} cannot hold a 3x3 patch"
            )));
        }
        let cell = [1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let mut data = Vec::with_capacity(c * 9);
        for _ in 0..c {
            data.extend_from_slice(&cell);
        }
        Ok(TriggerSpec::Patch {
            mark: Tensor::new(vec![c, 3, 3], data)?,
            position: (h - 3, w - 3),
        })
    }

    /// Fixed pseudo-random full-image pattern blended at the given alpha.
    /// The pattern is a low-frequency binary cell mosaic (random 0/1 per 4x4
    /// cell, shared across channels): salient enough for small convolutional
    /// models to key on, the way they key on natural blend images.
    pub fn default_blend(image_shape: [usize; 3], alpha: f64) -> Result<TriggerSpec> {
        let [c, h, w] = image_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(0xB1E5D);
        let cell = 4usize;
        let (ch_cells, cw_cells) = (h.div_ceil(cell), w.div_ceil(cell));
        let cells: Vec<f32> = (0..ch_cells * cw_cells)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let mut data = vec![0.0f32; c * h * w];
        for chan in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let ci = (y / cell) * cw_cells + x / cell;
                    data[(chan * h + y) * w + x] = cells[ci];
                }
            }
        }
        Ok(TriggerSpec::Blend {
            pattern: Tensor::new(vec![c, h, w], data)?,
            alpha,
        })
    }

    /// Same trigger with a different blend opacity; geometry triggers are
    /// returned unchanged.
    pub fn with_alpha(&self, alpha: f64) -> TriggerSpec {
        match self {
            TriggerSpec::Blend { pattern, .. } => TriggerSpec::Blend {
                pattern: pattern.clone(),
                alpha,
            },
            other => other.clone(),
        }
    }
}

/// Attack target: every class to a fixed one, or each class i to (i-1) mod C.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    AllToOne { target: usize },
    AllToAll,
}

impl TargetMode {
    /// Class a successful backdoor input with original label `y` maps to.
    pub fn target_for(&self, y: usize, classes: usize) -> usize {
        match self {
            TargetMode::AllToOne { target } => *target,
            TargetMode::AllToAll => (y + classes - 1) % classes,
        }
    }
}

/// Trigger + target + poison rate: the full data-poisoning recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPolicy {
    pub trigger: TriggerSpec,
    pub target: TargetMode,
    pub poison_rate: f64,
    pub seed: u64,
}

impl PoisonPolicy {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poison_rate) {
            return Err(Error::Config(format!(
                "poison_rate {} outside [0,1]",
                self.poison_rate
            )));
        }
        if let TargetMode::AllToOne { target } = self.target {
            if target >= classes {
                return Err(Error::Label {
                    label: target,
                    classes,
                });
            }
        }
        if let TriggerSpec::Blend { alpha, .. } = self.trigger {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("blend alpha {alpha} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Plant a trigger into a single input; the input itself is untouched.
pub fn apply_trigger(x: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::InputShape {
            expected: "(c, h, w) input".into(),
            got: format!("{shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    match spec {
        TriggerSpec::Patch { mark, position } => {
            let ms = mark.shape();
            if ms.len() != 3 || ms[0] != c {
                return Err(Error::InputShape {
                    expected: format!("({c}, hp, wp) mark"),
                    got: format!("{ms:?}"),
                });
            }
            let (hp, wp) = (ms[1], ms[2]);
            let (row, col) = *position;
            if row + hp > h || col + wp > w {
                return Err(Error::Geometry(format!(
                    "{hp}x{wp} patch at ({row}, {col}) exceeds {h}x{w} image"
                )));
            }
            let mut out = x.clone();
            let data = out.data_mut();
            for ch in 0..c {
                for dy in 0..hp {
                    for dx in 0..wp {
                        data[(ch * h + row + dy) * w + col + dx] =
                            mark.data()[(ch * hp + dy) * wp + dx];
                    }
                }
            }
            Ok(out)
        }
        TriggerSpec::Blend { pattern, alpha } => {
            if pattern.shape() != shape {
                return Err(Error::InputShape {
                    expected: format!("{shape:?} pattern"),
                    got: format!("{:?}", pattern.shape()),
                });
            }
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::Config(format!("blend alpha {alpha} outside [0,1]")));
            }
            let a = *alpha;
            let data = x
                .data()
                .iter()
                .zip(pattern.data())
                .map(|(&xi, &pi)| {
                    (((1.0 - a) * xi as f64 + a * pi as f64).clamp(0.0, 1.0)) as f32
                })
                .collect();
            Tensor::new(shape.to_vec(), data)
        }
    }
}

/// Poison `floor(rate * |D|)` samples chosen uniformly without replacement:
/// each gets the trigger planted and its label rewritten per the target mode.
/// Returns the poisoned dataset and the sorted index set that was touched.
pub fn poison_dataset(
    dataset: &LabeledDataset,
    policy: &PoisonPolicy,
) -> Result<(LabeledDataset, Vec<usize>)> {
    policy.validate(dataset.num_classes())?;
    let count = (policy.poison_rate * dataset.len() as f64).floor() as usize;
    let mut poisoned = dataset.clone();
    if count == 0 {
        return Ok((poisoned, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut indices = rand::seq::index::sample(&mut rng, dataset.len(), count).into_vec();
    indices.sort_unstable();
    let classes = dataset.num_classes();
    for &i in &indices {
        let triggered = apply_trigger(dataset.input(i), &policy.trigger)?;
        let new_label = policy.target.target_for(dataset.label(i), classes);
        poisoned.set_sample(i, triggered, new_label);
    }
    Ok((poisoned, indices))
}

/// Mislabeling rules for backdoor functionality extraction.
#[derive(Debug, Clone, PartialEq)]
pub enum MislabelStrategy {
    /// y' = (y + 1) mod C
    Shift,
    /// y' uniform over the other C-1 classes
    RandomOther { seed: u64 },
    /// one-hot row replaced by epsilon off the true class, normalized
    Soft { epsilon: f64 },
}

/// Hard relabels or per-sample label distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum Mislabeled {
    Hard(Vec<usize>),
    Soft(Vec<Vec<f32>>),
}

/// Apply a mislabeling strategy; hard variants guarantee y' != y.
pub fn mislabel(labels: &[usize], strategy: &MislabelStrategy, classes: usize) -> Result<Mislabeled> {
    if classes < 2 {
        return Err(Error::Config(
            "mislabeling undefined for fewer than 2 classes".into(),
        ));
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
    }
    match strategy {
        MislabelStrategy::Shift => Ok(Mislabeled::Hard(
            labels.iter().map(|&y| (y + 1) % classes).collect(),
        )),
        MislabelStrategy::RandomOther { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(Mislabeled::Hard(
                labels
                    .iter()
                    .map(|&y| {
                        let r = rng.gen_range(0..classes - 1);
                        if r >= y {
                            r + 1
                        } else {
                            r
                        }
                    })
                    .collect(),
            ))
        }
        MislabelStrategy::Soft { epsilon } => {
            if !(*epsilon > 0.0 && *epsilon <= 1.0) {
                return Err(Error::Config(format!("soft epsilon {epsilon} outside (0,1]")));
            }
            // epsilon on every non-true class, 0 on the true class, then
            // normalized to a probability row
            let weight = (1.0 / (classes - 1) as f64) as f32;
            Ok(Mislabeled::Soft(
                labels
                    .iter()
                    .map(|&y| {
                        let mut row = vec![weight; classes];
                        row[y] = 0.0;
                        row
                    })
                    .collect(),
            ))
        }
    }
}
