//! Backdoor defense built on benign adversarial perturbation.
//!
//! The defense reverse-engineers a perturbation trigger (a mask locating the
//! suspected backdoor region and a per-client pattern maximizing output
//! disruption), then uses it for client-side adversarial training with true
//! labels so the global model stops relying on the trigger region. A
//! server-side scaling factor adapts the perturbation strength from round
//! loss ratios.

use rand::Rng;

use crate::autodiff::{GradTape, NodeId, Tensor, DENOM_FLOOR};
use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::model::MlpModel;

/// Trigger mask `[H, W]` plus pattern `[H, W, C]`, both valued in [0, 1].
/// After the server merge the mask is binary.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationTrigger {
    pub mask: Tensor,
    pub pattern: Tensor,
}

impl PerturbationTrigger {
    /// L1 norm of the mask: the number of pixels (fractionally) covered.
    pub fn backdoor_distance(&self) -> f64 {
        self.mask.l1_norm().scalar_value().expect("l1 norm is scalar")
    }
}

/// Mix pattern into an image under a 2-D mask: `(1 - M) . x + M . dx`
/// with the mask broadcast across channels.
pub fn embed_trigger(x: &Tensor, mask: &Tensor, pattern: &Tensor) -> Result<Tensor> {
    let channels = match x.shape() {
        [_, _, c] => *c,
        other => {
            return Err(SimError::ShapeMismatch {
                op: "embed_trigger",
                detail: format!("expected [H, W, C] image, got {:?}", other),
            })
        }
    };
    let mb = mask.broadcast_mask(channels)?;
    let keep = mb.scale(-1.0)?.add_scalar(1.0)?.mul(x)?;
    let insert = mb.mul(pattern)?;
    keep.add(&insert)
}

/// Tape-recorded twin of [`embed_trigger`]; gradients flow into both the
/// mask and the pattern.
pub fn embed_trigger_on_tape(
    tape: &mut GradTape,
    x: NodeId,
    mask: NodeId,
    pattern: NodeId,
) -> Result<NodeId> {
    let channels = match tape.value(x).shape() {
        [_, _, c] => *c,
        other => {
            return Err(SimError::ShapeMismatch {
                op: "embed_trigger_on_tape",
                detail: format!("expected [H, W, C] image, got {:?}", other),
            })
        }
    };
    let mb = tape.broadcast_mask(mask, channels)?;
    let neg = tape.scale(mb, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let keep = tape.mul(one_minus, x)?;
    let insert = tape.mul(mb, pattern)?;
    tape.add(keep, insert)
}

/// Parameters of the per-client mask search.
#[derive(Clone, Debug)]
pub struct MaskGenParams {
    pub epochs: usize,
    pub lr: f64,
    pub acc_threshold: f64,
    pub lambda: f64,
    pub num_classes: usize,
    pub batch_size: usize,
}

impl Default for MaskGenParams {
    fn default() -> Self {
        MaskGenParams {
            epochs: 100,
            lr: 0.1,
            acc_threshold: 0.9,
            lambda: 0.01,
            num_classes: 10,
            batch_size: 64,
        }
    }
}

/// Fraction of the shard routed to `target` when the current trigger is
/// embedded.
fn backdoor_accuracy(
    model: &MlpModel,
    data: &Dataset,
    mask: &Tensor,
    pattern: &Tensor,
    target: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..data.len() {
        let embedded = embed_trigger(&data.image(i), mask, pattern)?;
        if model.predict(&embedded.flattened())? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// One projected-gradient epoch of the mask objective
/// `ce(w(embed(x, M, dx)), target) + lambda * |M|_1` for a fixed target class.
fn mask_epoch<R: Rng>(
    model: &MlpModel,
    data: &Dataset,
    mask: &mut Tensor,
    pattern: &mut Tensor,
    target: usize,
    params: &MaskGenParams,
    rng: &mut R,
) -> Result<()> {
    use rand::seq::SliceRandom;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(params.batch_size) {
        let mut tape = GradTape::new();
        let taped = model.register_on_tape(&mut tape);
        let mask_id = tape.leaf(mask.clone());
        let pattern_id = tape.leaf(pattern.clone());
        let mut losses = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let x = tape.leaf(data.image(i));
            let embedded = embed_trigger_on_tape(&mut tape, x, mask_id, pattern_id)?;
            let flat = tape.flatten(embedded)?;
            let (logits, _) = model.forward_on_tape(&mut tape, &taped, flat)?;
            losses.push(crate::model::cross_entropy_on_tape(
                &mut tape,
                logits,
                target,
                model.num_classes(),
            )?);
        }
        let ce = tape.mean_of(&losses)?;
        let l1 = tape.l1_norm(mask_id);
        let reg = tape.scale(l1, params.lambda)?;
        let loss = tape.add(ce, reg)?;
        let grads = tape.backward(loss)?;
        *mask = mask.sub(&grads.wrt(mask_id, &tape).scale(params.lr)?)?.clamp01();
        *pattern = pattern
            .sub(&grads.wrt(pattern_id, &tape).scale(params.lr)?)?
            .clamp01();
    }
    Ok(())
}

/// Per-client mask search over every candidate target class.
///
/// For each class the mask and pattern start uniform random in [0, 1] and are
/// optimized with projected gradient descent; after each epoch the trigger is
/// scored by backdoor accuracy on the client's own shard. The best mask is
/// the smallest-L1 mask among those reaching the accuracy threshold
/// (initialized to the all-ones mask so any qualifying mask replaces it).
/// Classes are visited in ascending index order and L1 ties keep the earlier
/// mask. If no (class, epoch) pair qualifies, the client falls back to the
/// lowest-L1 mask among those with the highest accuracy seen.
pub fn mask_gen_client<R: Rng>(
    model: &MlpModel,
    data: &Dataset,
    params: &MaskGenParams,
    rng: &mut R,
) -> Result<Tensor> {
    if data.is_empty() {
        return Err(SimError::EmptyInput("mask_gen_client"));
    }
    let (h, w, c) = data.image_dims();
    let mut best_l1 = (h * w) as f64;
    let mut best_mask = Tensor::ones(vec![h, w]);
    let mut qualified = false;
    // (accuracy, l1, mask) of the best non-qualifying candidate.
    let mut fallback: (f64, f64, Tensor) = (-1.0, f64::INFINITY, best_mask.clone());

    for target in 0..params.num_classes {
        let mut mask = Tensor::rand_uniform(vec![h, w], rng);
        let mut pattern = Tensor::rand_uniform(vec![h, w, c], rng);
        for _ in 0..params.epochs {
            mask_epoch(model, data, &mut mask, &mut pattern, target, params, rng)?;
            let acc = backdoor_accuracy(model, data, &mask, &pattern, target)?;
            let l1 = mask.l1_norm().scalar_value()?;
            if acc >= params.acc_threshold {
                qualified = true;
                if l1 < best_l1 {
                    best_l1 = l1;
                    best_mask = mask.clone();
                }
            }
            if acc > fallback.0 || (acc == fallback.0 && l1 < fallback.1) {
                fallback = (acc, l1, mask.clone());
            }
        }
    }
    Ok(if qualified { best_mask } else { fallback.2 })
}

/// Server-side merge: cell-wise mean across client masks, binarized at the
/// inclusive 0.5 threshold.
pub fn merge_masks(client_masks: &[Tensor]) -> Result<Tensor> {
    let first = client_masks.first().ok_or(SimError::EmptyInput("merge_masks"))?;
    let shape = first.shape().to_vec();
    if let Some(bad) = client_masks.iter().find(|m| m.shape() != shape.as_slice()) {
        return Err(SimError::ShapeMismatch {
            op: "merge_masks",
            detail: format!("{:?} vs {:?}", shape, bad.shape()),
        });
    }
    let n = client_masks.len() as f64;
    let mut data = vec![0.0; first.len()];
    for m in client_masks {
        for (acc, &v) in data.iter_mut().zip(m.data()) {
            *acc += v;
        }
    }
    for v in data.iter_mut() {
        *v = if *v / n >= 0.5 { 1.0 } else { 0.0 };
    }
    Tensor::new(shape, data)
}

/// Per-client pattern search: minimize the cosine similarity between the
/// penultimate-layer representations of triggered and clean inputs, with the
/// merged mask held fixed.
pub fn pattern_gen_client<R: Rng>(
    model: &MlpModel,
    mask: &Tensor,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<Tensor> {
    use rand::seq::SliceRandom;

    if data.is_empty() {
        return Err(SimError::EmptyInput("pattern_gen_client"));
    }
    let (h, w, c) = data.image_dims();
    let mut pattern = Tensor::rand_uniform(vec![h, w, c], rng);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut tape = GradTape::new();
            let taped = model.register_on_tape(&mut tape);
            let mask_id = tape.leaf(mask.clone());
            let pattern_id = tape.leaf(pattern.clone());
            let mut cosines = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.leaf(data.image(i));
                let embedded = embed_trigger_on_tape(&mut tape, x, mask_id, pattern_id)?;
                let triggered_flat = tape.flatten(embedded)?;
                let clean_flat = tape.flatten(x)?;
                let (_, r1) = model.forward_on_tape(&mut tape, &taped, triggered_flat)?;
                let (_, r2) = model.forward_on_tape(&mut tape, &taped, clean_flat)?;
                let num = tape.dot(r1, r2)?;
                let n1 = tape.l2_norm(r1);
                let n2 = tape.l2_norm(r2);
                let prod = tape.mul(n1, n2)?;
                let denom = tape.add_scalar(prod, DENOM_FLOOR)?;
                cosines.push(tape.div(num, denom)?);
            }
            let objective = tape.mean_of(&cosines)?;
            let grads = tape.backward(objective)?;
            pattern = pattern
                .sub(&grads.wrt(pattern_id, &tape).scale(lr)?)?
                .clamp01();
        }
    }
    Ok(pattern)
}

/// Client-side benign adversarial training: SGD on
/// `c * ce(w(embed(x, M, dx)), y)` with the TRUE label `y`, so triggered
/// inputs must still classify correctly. Returns the mean scaled batch loss
/// over all batches of all epochs.
pub fn bap_gen<R: Rng>(
    c: f64,
    model: &mut MlpModel,
    data: &Dataset,
    mask: &Tensor,
    pattern: &Tensor,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if c < 0.0 {
        return Err(SimError::InvalidArgument {
            op: "bap_gen",
            detail: format!("scaling factor must be nonnegative, got {}", c),
        });
    }
    if data.is_empty() {
        return Err(SimError::EmptyInput("bap_gen"));
    }
    // The trigger is fixed for the whole call, so inputs embed once.
    let inputs: Vec<Tensor> = (0..data.len())
        .map(|i| Ok(embed_trigger(&data.image(i), mask, pattern)?.flattened()))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    crate::model::train_batches(model, &inputs, &labels, epochs, lr, batch_size, c, rng)
}

/// Scaling-factor state advanced once per round after defense activation.
#[derive(Clone, Debug)]
pub struct ScalingState {
    c: f64,
    start_round: u32,
    step_size: f64,
    window: usize,
    loss_history: Vec<f64>,
    alpha_history: Vec<f64>,
}

impl ScalingState {
    pub fn new(c_init: f64, start_round: u32, step_size: f64, window: usize) -> Result<Self> {
        if step_size <= 0.0 || window == 0 || c_init <= 0.0 {
            return Err(SimError::InvalidArgument {
                op: "ScalingState::new",
                detail: format!("c_init={} step_size={} window={}", c_init, step_size, window),
            });
        }
        Ok(ScalingState {
            c: c_init,
            start_round,
            step_size,
            window,
            loss_history: Vec::new(),
            alpha_history: Vec::new(),
        })
    }

    /// Scaling factor to apply in the current round.
    pub fn factor(&self) -> f64 {
        self.c
    }

    pub fn alpha_history(&self) -> &[f64] {
        &self.alpha_history
    }

    /// Advance the factor from the round's mean perturbation loss.
    ///
    /// At the start round the loss ratio and its windowed mean are forced to
    /// 1. Otherwise the ratio compares against the previous round and the
    /// smoothing term averages the ratios of the last `window` rounds
    /// (excluding the current one). Decreasing loss (`alpha < 1`) grows the
    /// factor faster than increasing loss shrinks the growth; both branches
    /// add a positive increment. Divisors are floored at 1e-12.
    pub fn update(&mut self, loss: f64, round: u32) -> Result<()> {
        if round < self.start_round {
            return Err(SimError::InvalidArgument {
                op: "ScalingState::update",
                detail: format!("round {} precedes start round {}", round, self.start_round),
            });
        }
        if !loss.is_finite() || loss < 0.0 {
            return Err(SimError::InvalidArgument {
                op: "ScalingState::update",
                detail: format!("loss must be finite and nonnegative, got {}", loss),
            });
        }
        let alpha = if round == self.start_round {
            1.0
        } else {
            let prev = self.loss_history.last().copied().unwrap_or(0.0);
            loss / prev.max(DENOM_FLOOR)
        };
        let beta = if round == self.start_round {
            1.0
        } else {
            let n = self.alpha_history.len();
            let taken = n.min(self.window);
            let tail = &self.alpha_history[n - taken..];
            tail.iter().sum::<f64>() / taken as f64
        };
        let increment = if alpha >= 1.0 {
            self.step_size * beta / alpha.sqrt()
        } else {
            self.step_size * beta / (alpha * alpha).max(DENOM_FLOOR)
        };
        self.c += increment;
        self.loss_history.push(loss);
        self.alpha_history.push(alpha);
        Ok(())
    }
}

/// Binarize a mask at a threshold (inclusive).
pub fn binarize(mask: &Tensor, threshold: f64) -> Tensor {
    let data = mask
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(mask.shape().to_vec(), data).expect("same shape")
}

/// Intersection-over-union between a binary `[H, W]` mask and a cell region.
pub fn mask_region_iou(mask: &Tensor, region: &[(usize, usize)]) -> Result<f64> {
    let [_, w] = match mask.shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(SimError::ShapeMismatch {
                op: "mask_region_iou",
                detail: format!("expected 2-D mask, got {:?}", other),
            })
        }
    };
    let on: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.5)
        .map(|(i, _)| i)
        .collect();
    let region_set: std::collections::BTreeSet<usize> =
        region.iter().map(|&(r, c)| r * w + c).collect();
    let inter = on.iter().filter(|i| region_set.contains(i)).count();
    let union = on.len() + region_set.len() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::seed::rng_from;

    #[test]
    fn embed_identities() {
        let mut rng = rng_from(61);
        let x = Tensor::rand_uniform(vec![4, 4, 2], &mut rng);
        let pattern = Tensor::rand_uniform(vec![4, 4, 2], &mut rng);

        let zero_mask = Tensor::zeros(vec![4, 4]);
        assert_eq!(embed_trigger(&x, &zero_mask, &pattern).unwrap(), x);

        let full_mask = Tensor::ones(vec![4, 4]);
        assert_eq!(embed_trigger(&x, &full_mask, &pattern).unwrap(), pattern);

        // embed(x, M, x) == x for any mask.
        let any_mask = Tensor::rand_uniform(vec![4, 4], &mut rng);
        let out = embed_trigger(&x, &any_mask, &x).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_scalar_pixel_case() {
        let x = Tensor::new(vec![1, 1, 1], vec![0.2]).unwrap();
        let dx = Tensor::new(vec![1, 1, 1], vec![0.8]).unwrap();
        let m = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let out = embed_trigger(&x, &m, &dx).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn embed_taped_matches_pure() {
        let mut rng = rng_from(67);
        let x = Tensor::rand_uniform(vec![3, 3, 1], &mut rng);
        let m = Tensor::rand_uniform(vec![3, 3], &mut rng);
        let dx = Tensor::rand_uniform(vec![3, 3, 1], &mut rng);
        let pure = embed_trigger(&x, &m, &dx).unwrap();
        let mut tape = GradTape::new();
        let (xi, mi, di) = (tape.leaf(x), tape.leaf(m), tape.leaf(dx));
        let out = embed_trigger_on_tape(&mut tape, xi, mi, di).unwrap();
        assert_eq!(tape.value(out), &pure);
    }

    #[test]
    fn merge_masks_majority_and_inclusive_threshold() {
        let a = Tensor::new(vec![1, 2], vec![0.4, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.6, 0.2]).unwrap();
        // Cell 0 mean = 0.5 -> 1 (inclusive threshold); cell 1 mean = 0.1 -> 0.
        let merged = merge_masks(&[a, b]).unwrap();
        assert_eq!(merged.data(), &[1.0, 0.0]);
    }

    #[test]
    fn merge_masks_single_client_binarizes() {
        let a = Tensor::new(vec![2, 1], vec![0.49, 0.51]).unwrap();
        let merged = merge_masks(&[a]).unwrap();
        assert_eq!(merged.data(), &[0.0, 1.0]);
    }

    #[test]
    fn merge_masks_zero_and_empty() {
        let zeros = vec![Tensor::zeros(vec![2, 2]); 3];
        assert!(merge_masks(&zeros).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(merge_masks(&[]).is_err());
    }

    #[test]
    fn merge_masks_output_is_binary() {
        let mut rng = rng_from(71);
        let masks: Vec<Tensor> = (0..7).map(|_| Tensor::rand_uniform(vec![3, 3], &mut rng)).collect();
        let merged = merge_masks(&masks).unwrap();
        assert!(merged.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn mask_gen_deterministic_under_seed() {
        let mut rng = rng_from(73);
        let data = synth_blobs(6, 2, 4, 0.1, &mut rng).unwrap();
        let model = MlpModel::new(&[16, 8, 2], &mut rng).unwrap();
        let params = MaskGenParams {
            epochs: 2,
            lr: 0.1,
            acc_threshold: 0.9,
            lambda: 0.01,
            num_classes: 2,
            batch_size: 4,
        };
        let a = mask_gen_client(&model, &data, &params, &mut rng_from(99)).unwrap();
        let b = mask_gen_client(&model, &data, &params, &mut rng_from(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pattern_gen_zero_mask_leaves_pattern_at_init() {
        let mut rng = rng_from(79);
        let data = synth_blobs(6, 2, 4, 0.1, &mut rng).unwrap();
        let model = MlpModel::new(&[16, 8, 2], &mut rng).unwrap();
        let mask = Tensor::zeros(vec![4, 4]);
        let out = pattern_gen_client(&model, &mask, &data, 2, 1.0, 4, &mut rng_from(7)).unwrap();
        let init = Tensor::rand_uniform(vec![4, 4, 1], &mut rng_from(7));
        assert_eq!(out, init);
    }

    #[test]
    fn pattern_gen_lowers_cosine_on_trained_model() {
        let mut rng = rng_from(83);
        let data = synth_blobs(15, 2, 4, 0.08, &mut rng).unwrap();
        let model = crate::model::sgd_train(
            MlpModel::new(&[16, 12, 2], &mut rng).unwrap(),
            &data,
            10,
            0.3,
            8,
            &mut rng_from(11),
        )
        .unwrap();
        let mut mask = Tensor::zeros(vec![4, 4]);
        // 2x2 active corner region.
        for (r, c) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
            mask.data_mut()[r * 4 + c] = 1.0;
        }
        let mean_cos = |pattern: &Tensor| -> f64 {
            let mut total = 0.0;
            for i in 0..data.len() {
                let clean = data.image(i);
                let (_, r2) = model.forward(&clean.flattened()).unwrap();
                let trig = embed_trigger(&clean, &mask, pattern).unwrap();
                let (_, r1) = model.forward(&trig.flattened()).unwrap();
                let num = r1.dot(&r2).unwrap().scalar_value().unwrap();
                let den = r1.l2_norm().scalar_value().unwrap() * r2.l2_norm().scalar_value().unwrap()
                    + DENOM_FLOOR;
                total += num / den;
            }
            total / data.len() as f64
        };
        let init = Tensor::rand_uniform(vec![4, 4, 1], &mut rng_from(13));
        let before = mean_cos(&init);
        let out = pattern_gen_client(&model, &mask, &data, 20, 2.0, 8, &mut rng_from(13)).unwrap();
        let after = mean_cos(&out);
        assert!(after < before, "cosine did not drop: {} -> {}", before, after);
    }

    #[test]
    fn pattern_gen_differs_across_shards() {
        let mut rng = rng_from(89);
        let data = synth_blobs(20, 2, 4, 0.1, &mut rng).unwrap();
        let model = MlpModel::new(&[16, 8, 2], &mut rng).unwrap();
        let shard_a = data.subset(&(0..10).collect::<Vec<_>>()).unwrap();
        let shard_b = data.subset(&(20..30).collect::<Vec<_>>()).unwrap();
        let mask = merge_masks(&[Tensor::ones(vec![4, 4])]).unwrap();
        let pa = pattern_gen_client(&model, &mask, &shard_a, 3, 5.0, 4, &mut rng_from(17)).unwrap();
        let pb = pattern_gen_client(&model, &mask, &shard_b, 3, 5.0, 4, &mut rng_from(17)).unwrap();
        assert_ne!(pa, pb);
    }

    #[test]
    fn bap_zero_factor_is_a_no_op() {
        let mut rng = rng_from(97);
        let data = synth_blobs(8, 2, 4, 0.1, &mut rng).unwrap();
        let mut model = MlpModel::new(&[16, 8, 2], &mut rng).unwrap();
        let before = model.flatten();
        let mask = Tensor::rand_uniform(vec![4, 4], &mut rng);
        let pattern = Tensor::rand_uniform(vec![4, 4, 1], &mut rng);
        let loss = bap_gen(0.0, &mut model, &data, &mask, &pattern, 2, 0.1, 4, &mut rng_from(3)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(model.flatten(), before);
    }

    #[test]
    fn bap_zero_mask_trains_on_clean_inputs() {
        let mut rng = rng_from(101);
        let data = synth_blobs(10, 2, 4, 0.08, &mut rng).unwrap();
        let trained = crate::model::sgd_train(
            MlpModel::new(&[16, 8, 2], &mut rng).unwrap(),
            &data,
            15,
            0.3,
            8,
            &mut rng_from(19),
        )
        .unwrap();
        // With an all-zero mask the BAP objective is c * clean training loss.
        let clean_loss: f64 = (0..data.len())
            .map(|i| {
                let (logits, _) = trained.forward(&data.flattened_image(i)).unwrap();
                crate::model::cross_entropy(&logits, data.label(i)).unwrap()
            })
            .sum::<f64>()
            / data.len() as f64;
        let mask = Tensor::zeros(vec![4, 4]);
        let pattern = Tensor::rand_uniform(vec![4, 4, 1], &mut rng);
        let c = 2.0;
        let mut model = trained.clone();
        let mean_loss =
            bap_gen(c, &mut model, &data, &mask, &pattern, 1, 0.0, data.len(), &mut rng_from(5))
                .unwrap();
        assert!(
            (mean_loss - c * clean_loss).abs() < 1e-9,
            "{} vs {}",
            mean_loss,
            c * clean_loss
        );
    }

    #[test]
    fn bap_doubling_factor_doubles_first_step() {
        let mut rng = rng_from(103);
        let data = synth_blobs(8, 2, 4, 0.1, &mut rng).unwrap();
        let base = MlpModel::new(&[16, 8, 2], &mut rng).unwrap();
        let mask = Tensor::rand_uniform(vec![4, 4], &mut rng);
        let pattern = Tensor::rand_uniform(vec![4, 4, 1], &mut rng);

        // Single full-batch step isolates the first update.
        let run = |c: f64| -> (f64, crate::model::ParamVector) {
            let mut model = base.clone();
            let loss = bap_gen(c, &mut model, &data, &mask, &pattern, 1, 0.05, data.len(), &mut rng_from(7))
                .unwrap();
            (loss, model.flatten().sub(&base.flatten()).unwrap())
        };
        let (l1, d1) = run(1.0);
        let (l2, d2) = run(2.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-9);
        for (a, b) in d1.as_slice().iter().zip(d2.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_start_round_adds_full_step() {
        let mut s = ScalingState::new(1.0, 10, 1.0, 5).unwrap();
        s.update(3.7, 10).unwrap();
        assert!((s.factor() - 2.0).abs() < 1e-12);
        assert_eq!(s.alpha_history(), &[1.0]);
    }

    #[test]
    fn scaling_rising_loss_example() {
        // losses [1.0, 2.0] from round 0: alpha = 2, beta = 1, increment 1/sqrt(2).
        let mut s = ScalingState::new(1.0, 0, 1.0, 5).unwrap();
        s.update(1.0, 0).unwrap();
        let before = s.factor();
        s.update(2.0, 1).unwrap();
        let inc = s.factor() - before;
        assert!((inc - 1.0 / 2.0f64.sqrt()).abs() < 1e-12, "increment {}", inc);
    }

    #[test]
    fn scaling_falling_loss_example() {
        // losses [1.0, 0.5]: alpha = 0.5 < 1, beta = 1, increment 1/0.25 = 4.
        let mut s = ScalingState::new(1.0, 0, 1.0, 5).unwrap();
        s.update(1.0, 0).unwrap();
        let before = s.factor();
        s.update(0.5, 1).unwrap();
        assert!((s.factor() - before - 4.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_strictly_increases_on_positive_losses() {
        let mut s = ScalingState::new(1.0, 0, 0.5, 5).unwrap();
        let mut rng = rng_from(107);
        let mut last = s.factor();
        for t in 0..50 {
            let loss: f64 = 0.01 + rng.gen::<f64>() * 3.0;
            s.update(loss, t).unwrap();
            assert!(s.factor() > last, "factor not increasing at round {}", t);
            last = s.factor();
        }
    }

    #[test]
    fn scaling_favors_decreasing_loss() {
        // For fixed beta, increment(alpha = 1/a) > increment(alpha = a), a > 1.
        for a in [1.5, 2.0, 4.0, 10.0] {
            let up = {
                let mut s = ScalingState::new(1.0, 0, 1.0, 5).unwrap();
                s.update(1.0, 0).unwrap();
                let before = s.factor();
                s.update(a, 1).unwrap();
                s.factor() - before
            };
            let down = {
                let mut s = ScalingState::new(1.0, 0, 1.0, 5).unwrap();
                s.update(1.0, 0).unwrap();
                let before = s.factor();
                s.update(1.0 / a, 1).unwrap();
                s.factor() - before
            };
            assert!(down > up, "a={}: down={} up={}", a, down, up);
        }
    }

    #[test]
    fn scaling_window_uses_last_k_ratios() {
        let mut s = ScalingState::new(1.0, 0, 1.0, 2).unwrap();
        // Losses 1, 2, 4, 8: alphas 1, 2, 2, 2. At round 3 beta should use the
        // last 2 alphas (2, 2) -> 2, not the full mean 5/3.
        for (t, loss) in [1.0, 2.0, 4.0].iter().enumerate() {
            s.update(*loss, t as u32).unwrap();
        }
        let before = s.factor();
        s.update(8.0, 3).unwrap();
        let inc = s.factor() - before;
        assert!((inc - 2.0 / 2.0f64.sqrt()).abs() < 1e-12, "increment {}", inc);
    }

    #[test]
    fn scaling_rejects_rounds_before_start() {
        let mut s = ScalingState::new(1.0, 5, 1.0, 5).unwrap();
        assert!(s.update(1.0, 4).is_err());
    }

    #[test]
    fn iou_of_exact_recovery_is_one() {
        let mut mask = Tensor::zeros(vec![4, 4]);
        let region = vec![(2usize, 2usize), (2, 3), (3, 2), (3, 3)];
        for &(r, c) in &region {
            mask.data_mut()[r * 4 + c] = 1.0;
        }
        assert!((mask_region_iou(&mask, &region).unwrap() - 1.0).abs() < 1e-15);
        let empty = Tensor::zeros(vec![4, 4]);
        assert_eq!(mask_region_iou(&empty, &region).unwrap(), 0.0);
    }
}
