//! BadNets-style data poisoning: stamp a fixed pixel patch and relabel to
//! the attacker's target class.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Result, SimError};

/// Patch trigger specification for a poisoning attacker.
#[derive(Clone, Debug)]
pub struct BadNetsConfig {
    /// Pixel values stamped over the patch region, `[s, s, C]`.
    pub patch: Tensor,
    /// Top-left anchor of the patch; `None` means bottom-right corner.
    pub position: Option<(usize, usize)>,
    pub target_label: usize,
    /// Fraction of a poisoned shard that gets stamped and relabeled.
    pub poison_fraction: f64,
}

impl BadNetsConfig {
    /// Square single-value patch (the common all-max-intensity trigger).
    pub fn uniform_patch(size: usize, channels: usize, value: f64, target_label: usize, poison_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(SimError::InvalidArgument {
                op: "BadNetsConfig::uniform_patch",
                detail: format!("patch value {} outside [0, 1]", value),
            });
        }
        Ok(BadNetsConfig {
            patch: Tensor::full(vec![size, size, channels], value),
            position: None,
            target_label,
            poison_fraction,
        })
    }

    pub fn patch_size(&self) -> (usize, usize, usize) {
        let s = self.patch.shape();
        (s[0], s[1], s[2])
    }

    /// Resolve the anchor for an `H x W` image, defaulting to bottom-right.
    pub fn resolve_position(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw, _) = self.patch_size();
        let (row, col) = match self.position {
            Some(rc) => rc,
            None => {
                if ph > h || pw > w {
                    return Err(SimError::InvalidArgument {
                        op: "resolve_position",
                        detail: format!("{}x{} patch does not fit {}x{} image", ph, pw, h, w),
                    });
                }
                (h - ph, w - pw)
            }
        };
        if row + ph > h || col + pw > w {
            return Err(SimError::InvalidArgument {
                op: "resolve_position",
                detail: format!(
                    "patch {}x{} at ({}, {}) exceeds {}x{} image",
                    ph, pw, row, col, h, w
                ),
            });
        }
        Ok((row, col))
    }

    /// Cells of an `H x W` mask covered by the patch (for mask-recovery checks).
    pub fn patch_region(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let (ph, pw, _) = self.patch_size();
        let (row, col) = self.resolve_position(h, w)?;
        let mut cells = Vec::with_capacity(ph * pw);
        for r in row..row + ph {
            for c in col..col + pw {
                cells.push((r, c));
            }
        }
        Ok(cells)
    }
}

/// Overwrite the patch region of an image with the trigger pixels.
pub fn stamp_trigger(image: &Tensor, cfg: &BadNetsConfig) -> Result<Tensor> {
    let [h, w, c] = match image.shape() {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(SimError::ShapeMismatch {
                op: "stamp_trigger",
                detail: format!("expected [H, W, C] image, got {:?}", other),
            })
        }
    };
    let (ph, pw, pc) = cfg.patch_size();
    if pc != c {
        return Err(SimError::ShapeMismatch {
            op: "stamp_trigger",
            detail: format!("patch has {} channels, image has {}", pc, c),
        });
    }
    let (row, col) = cfg.resolve_position(h, w)?;
    let mut out = image.clone();
    for pr in 0..ph {
        for pw_i in 0..pw {
            for ch in 0..c {
                let src = (pr * pw + pw_i) * pc + ch;
                let dst = ((row + pr) * w + (col + pw_i)) * c + ch;
                out.data_mut()[dst] = cfg.patch.data()[src];
            }
        }
    }
    Ok(out)
}

/// Stamp and relabel a uniformly-sampled `poison_fraction` of the dataset.
/// The poison count is `floor(N * fraction)`; unpoisoned samples are
/// untouched. Deterministic under the RNG.
pub fn poison_dataset<R: Rng>(dataset: &Dataset, cfg: &BadNetsConfig, rng: &mut R) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&cfg.poison_fraction) {
        return Err(SimError::InvalidArgument {
            op: "poison_dataset",
            detail: format!("poison_fraction {} outside [0, 1]", cfg.poison_fraction),
        });
    }
    if cfg.target_label >= dataset.num_classes() {
        return Err(SimError::InvalidArgument {
            op: "poison_dataset",
            detail: format!(
                "target label {} out of range for {} classes",
                cfg.target_label,
                dataset.num_classes()
            ),
        });
    }
    let count = (dataset.len() as f64 * cfg.poison_fraction).floor() as usize;
    let mut out = dataset.clone();
    let chosen = rand::seq::index::sample(rng, dataset.len(), count);
    for i in chosen {
        let stamped = stamp_trigger(&dataset.image(i), cfg)?;
        out.replace(i, &stamped, cfg.target_label)?;
    }
    Ok(out)
}

/// Stamp every test sample whose true label differs from the target class.
/// True labels are retained (the set exists only for backdoor-rate
/// evaluation, which counts predictions equal to the target).
pub fn build_triggered_testset(clean_test: &Dataset, cfg: &BadNetsConfig) -> Result<Dataset> {
    let keep: Vec<usize> = (0..clean_test.len())
        .filter(|&i| clean_test.label(i) != cfg.target_label)
        .collect();
    let mut out = clean_test.subset(&keep)?;
    for i in 0..out.len() {
        let stamped = stamp_trigger(&out.image(i), cfg)?;
        let label = out.label(i);
        out.replace(i, &stamped, label)?;
    }
    Ok(out)
}
