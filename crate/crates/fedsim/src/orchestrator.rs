//! Round-by-round federated training: client selection, local training
//! (benign and malicious), defense hooks, aggregation, and evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, UpdateSet};
use crate::attack::{build_triggered_testset, poison_dataset, BadNetsConfig};
use crate::autodiff::Tensor;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{dirichlet_partition, load_idx, synth_blobs_split, Dataset};
use crate::defense::{
    bap_gen, mask_gen_client, merge_masks, pattern_gen_client, MaskGenParams, ScalingState,
};
use crate::error::{Result, SimError};
use crate::model::{sgd_train, MlpModel};
use crate::seed::{self, domain};

/// Whether a client trains honestly or on a poisoned shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Benign,
    Malicious,
}

/// A simulated client: fixed shard (poisoned at construction for malicious
/// clients) and, once the defense activates, a personal trigger pattern.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: u32,
    pub role: Role,
    pub shard: Dataset,
    pub pattern: Option<Tensor>,
}

/// Metrics captured after each round.
#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: u32,
    pub acc: f64,
    pub bsr: f64,
    /// Scaling factor in effect during the round.
    pub c: f64,
    /// Mean uploaded perturbation loss (zero before the defense starts).
    pub mean_bap_loss: f64,
    pub selected: Vec<u32>,
}

/// Windowed summary over the last rounds of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub absr: f64,
    pub bbsr: f64,
    pub acc: f64,
}

/// Clean accuracy and backdoor success rate of a model.
pub fn evaluate(
    model: &MlpModel,
    clean_test: &Dataset,
    triggered_test: &Dataset,
    target_label: usize,
) -> Result<(f64, f64)> {
    if clean_test.is_empty() || triggered_test.is_empty() {
        return Err(SimError::EmptyInput("evaluate"));
    }
    let correct: usize = (0..clean_test.len())
        .into_par_iter()
        .map(|i| {
            let ok = model.predict(&clean_test.flattened_image(i))? == clean_test.label(i);
            Ok(usize::from(ok))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let hits: usize = (0..triggered_test.len())
        .into_par_iter()
        .map(|i| {
            let hit = model.predict(&triggered_test.flattened_image(i))? == target_label;
            Ok(usize::from(hit))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok((
        correct as f64 / clean_test.len() as f64,
        hits as f64 / triggered_test.len() as f64,
    ))
}

/// ABSR / BBSR / ACC over the last `window` rounds.
pub fn summarize(records: &[RoundRecord], window: usize) -> Result<Summary> {
    if window == 0 {
        return Err(SimError::InvalidArgument {
            op: "summarize",
            detail: "window must be >= 1".into(),
        });
    }
    if window > records.len() {
        return Err(SimError::InvalidArgument {
            op: "summarize",
            detail: format!("window {} exceeds {} recorded rounds", window, records.len()),
        });
    }
    let tail = &records[records.len() - window..];
    let absr = tail.iter().map(|r| r.bsr).sum::<f64>() / window as f64;
    let bbsr = tail.iter().map(|r| r.bsr).fold(f64::NEG_INFINITY, f64::max);
    let acc = tail.iter().map(|r| r.acc).sum::<f64>() / window as f64;
    Ok(Summary { absr, bbsr, acc })
}

/// Train and test datasets resolved from a config.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Blobs { n_per_class, num_classes, side, spread, test_per_class } => {
            let mut rng = seed::rng_from(seed::derive(cfg.seed, domain::DATASET, &[]));
            let (train, test) =
                synth_blobs_split(*n_per_class, *test_per_class, *num_classes, *side, *spread, &mut rng)?;
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            if let Some(limit) = train_limit {
                train = train.truncated(*limit)?;
            }
            if let Some(limit) = test_limit {
                test = test.truncated(*limit)?;
            }
            Ok((train, test))
        }
    }
}

/// Attack configuration resolved against the dataset's channel count.
pub fn build_attack(cfg: &ExperimentConfig, train: &Dataset) -> Result<BadNetsConfig> {
    let (_, _, channels) = train.image_dims();
    if cfg.target_label >= train.num_classes() {
        return Err(SimError::Config {
            key: "target_label".into(),
            detail: format!("must be < {} classes", train.num_classes()),
        });
    }
    let mut attack = BadNetsConfig::uniform_patch(
        cfg.trigger_size,
        channels,
        cfg.trigger_value,
        cfg.target_label,
        cfg.poison_fraction,
    )?;
    attack.position = cfg.trigger_position;
    let (h, w, _) = train.image_dims();
    attack.resolve_position(h, w)?;
    Ok(attack)
}

struct ClientUpload {
    id: u32,
    delta: crate::model::ParamVector,
    bap_loss: f64,
}

/// A fully constructed experiment, stepped one round at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    rule: AggregationRule,
    attack: BadNetsConfig,
    clients: Vec<ClientState>,
    global: MlpModel,
    clean_test: Dataset,
    triggered_test: Dataset,
    scaling: ScalingState,
    merged_mask: Option<Tensor>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let rule = cfg.aggregation_rule()?;
        let (train, clean_test) = build_datasets(&cfg)?;
        let attack = build_attack(&cfg, &train)?;
        let triggered_test = build_triggered_testset(&clean_test, &attack)?;

        let mut partition_rng = seed::rng_from(seed::derive(cfg.seed, domain::PARTITION, &[]));
        let partition = dirichlet_partition(&train, cfg.n_clients, cfg.partition_h, &mut partition_rng)?;

        // Roles: first floor(malicious_fraction * n) ids after a seeded shuffle.
        let mut ids: Vec<u32> = (0..cfg.n_clients as u32).collect();
        let mut role_rng = seed::rng_from(seed::derive(cfg.seed, domain::ROLES, &[]));
        ids.shuffle(&mut role_rng);
        let malicious: std::collections::BTreeSet<u32> =
            ids[..cfg.malicious_count()].iter().copied().collect();

        let mut clients = Vec::with_capacity(cfg.n_clients);
        for id in 0..cfg.n_clients as u32 {
            let shard = train.subset(partition.client_indices(id as usize))?;
            let (role, shard) = if malicious.contains(&id) {
                let mut rng = seed::rng_from(seed::derive(cfg.seed, domain::POISON, &[id as u64]));
                (Role::Malicious, poison_dataset(&shard, &attack, &mut rng)?)
            } else {
                (Role::Benign, shard)
            };
            clients.push(ClientState { id, role, shard, pattern: None });
        }

        let mut init_rng = seed::rng_from(seed::derive(cfg.seed, domain::MODEL_INIT, &[]));
        let (_, _, channels) = train.image_dims();
        let (h, w, _) = train.image_dims();
        let mut dims = vec![h * w * channels];
        dims.extend_from_slice(&cfg.hidden_dims);
        dims.push(train.num_classes());
        let global = MlpModel::new(&dims, &mut init_rng)?;

        let scaling = ScalingState::new(cfg.c_init, cfg.t_s, cfg.delta, cfg.window)?;

        Ok(Experiment {
            cfg,
            rule,
            attack,
            clients,
            global,
            clean_test,
            triggered_test,
            scaling,
            merged_mask: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global_model(&self) -> &MlpModel {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn attack(&self) -> &BadNetsConfig {
        &self.attack
    }

    pub fn test_sets(&self) -> (&Dataset, &Dataset) {
        (&self.clean_test, &self.triggered_test)
    }

    pub fn merged_mask(&self) -> Option<&Tensor> {
        self.merged_mask.as_ref()
    }

    /// Whether the perturbation pipeline runs at all. Disabling BAP reduces
    /// every round to plain training, which also makes trigger generation and
    /// scaling pointless.
    fn defense_active(&self) -> bool {
        self.cfg.defense && self.cfg.bap
    }

    /// Run trigger generation on the set of all clients (regardless of the
    /// round's selection) and fix each client's pattern.
    fn generate_triggers(&mut self) -> Result<()> {
        let params = MaskGenParams {
            epochs: self.cfg.mask_epochs,
            lr: self.cfg.mask_lr,
            acc_threshold: self.cfg.acc_threshold,
            lambda: self.cfg.lambda,
            num_classes: self.global.num_classes(),
            batch_size: self.cfg.batch_size,
        };
        let global = &self.global;
        let cfg_seed = self.cfg.seed;
        let masks: Vec<Tensor> = self
            .clients
            .par_iter()
            .map(|client| {
                let mut rng =
                    seed::rng_from(seed::derive(cfg_seed, domain::MASK_GEN, &[client.id as u64]));
                mask_gen_client(global, &client.shard, &params, &mut rng)
            })
            .collect::<Result<_>>()?;
        let merged = merge_masks(&masks)?;

        let pattern_epochs = self.cfg.pattern_epochs;
        let pattern_lr = self.cfg.pattern_lr;
        let batch_size = self.cfg.batch_size;
        let use_pattern_gen = self.cfg.pattern_gen;
        let patterns: Vec<Tensor> = self
            .clients
            .par_iter()
            .map(|client| {
                let mut rng = seed::rng_from(seed::derive(
                    cfg_seed,
                    domain::PATTERN_GEN,
                    &[client.id as u64],
                ));
                if use_pattern_gen {
                    pattern_gen_client(
                        global,
                        &merged,
                        &client.shard,
                        pattern_epochs,
                        pattern_lr,
                        batch_size,
                        &mut rng,
                    )
                } else {
                    // Ablation: keep the random initialization untouched.
                    let (h, w, c) = client.shard.image_dims();
                    Ok(Tensor::rand_uniform(vec![h, w, c], &mut rng))
                }
            })
            .collect::<Result<_>>()?;
        for (client, pattern) in self.clients.iter_mut().zip(patterns) {
            client.pattern = Some(pattern);
        }
        self.merged_mask = Some(merged);
        Ok(())
    }

    fn client_round(&self, client: &ClientState, t: u32, c_factor: f64) -> Result<ClientUpload> {
        let mut local = self.global.clone();
        let mut bap_loss = 0.0;
        let defense_phase = self.defense_active() && t >= self.cfg.t_s;
        let runs_bap = defense_phase
            && (client.role == Role::Benign || self.cfg.malicious_run_bap);
        if runs_bap {
            let mask = self
                .merged_mask
                .as_ref()
                .ok_or_else(|| SimError::InvalidArgument {
                    op: "client_round",
                    detail: "defense phase reached without a merged mask".into(),
                })?;
            let pattern = client.pattern.as_ref().ok_or_else(|| SimError::InvalidArgument {
                op: "client_round",
                detail: format!("client {} has no trigger pattern", client.id),
            })?;
            let mut rng = seed::rng_from(seed::derive(
                self.cfg.seed,
                domain::BAP,
                &[client.id as u64, t as u64],
            ));
            bap_loss = bap_gen(
                c_factor,
                &mut local,
                &client.shard,
                mask,
                pattern,
                self.cfg.bap_epochs,
                self.cfg.bap_lr,
                self.cfg.batch_size,
                &mut rng,
            )?;
        }
        let mut rng = seed::rng_from(seed::derive(
            self.cfg.seed,
            domain::LOCAL_TRAIN,
            &[client.id as u64, t as u64],
        ));
        let trained = sgd_train(
            local,
            &client.shard,
            self.cfg.local_epochs,
            self.cfg.lr,
            self.cfg.batch_size,
            &mut rng,
        )?;
        let delta = trained.flatten().sub(&self.global.flatten())?;
        Ok(ClientUpload { id: client.id, delta, bap_loss })
    }

    /// Execute round `t` (1-based) and record metrics.
    pub fn run_round(&mut self, t: u32) -> Result<RoundRecord> {
        // Selection happens before trigger generation, mirroring the round
        // structure (triggers are generated by all clients, not the selection).
        let mut select_rng = seed::rng_from(seed::derive(self.cfg.seed, domain::SELECT, &[t as u64]));
        let m = self.cfg.clients_per_round();
        let mut selected: Vec<u32> =
            rand::seq::index::sample(&mut select_rng, self.cfg.n_clients, m)
                .into_iter()
                .map(|i| i as u32)
                .collect();
        selected.sort_unstable();

        if self.defense_active() && t == self.cfg.t_s {
            self.generate_triggers()?;
        }

        let c_factor = self.scaling.factor();
        let uploads: Vec<ClientUpload> = selected
            .par_iter()
            .map(|&id| self.client_round(&self.clients[id as usize], t, c_factor))
            .collect::<Result<_>>()?;

        // Server side: mean uploaded loss over the whole selection (malicious
        // clients upload zero unless they run the perturbation step).
        let mut mean_loss = 0.0;
        if self.defense_active() && t >= self.cfg.t_s {
            mean_loss = uploads.iter().map(|u| u.bap_loss).sum::<f64>() / uploads.len() as f64;
            if self.cfg.adaptive_scaling {
                self.scaling.update(mean_loss, t)?;
            }
        }

        let update_set = UpdateSet::new(uploads.into_iter().map(|u| (u.id, u.delta)).collect())?;
        let aggregate = self.rule.aggregate(&update_set)?;
        self.global = self.global.apply_delta(&aggregate)?;

        let (acc, bsr) = evaluate(
            &self.global,
            &self.clean_test,
            &self.triggered_test,
            self.attack.target_label,
        )?;
        Ok(RoundRecord { round: t, acc, bsr, c: c_factor, mean_bap_loss: mean_loss, selected })
    }

    /// Run all configured rounds.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(self.cfg.rounds as usize);
        for t in 1..=self.cfg.rounds {
            records.push(self.run_round(t)?);
        }
        Ok(records)
    }
}

/// Build and run an experiment; the summary covers the last
/// `summary_window` rounds (clamped to the run length, `None` for empty runs).
pub fn run_experiment(
    cfg: ExperimentConfig,
) -> Result<(MlpModel, Vec<RoundRecord>, Option<Summary>)> {
    let mut experiment = Experiment::new(cfg)?;
    let records = experiment.run()?;
    let summary = if records.is_empty() {
        None
    } else {
        let window = experiment.cfg.summary_window.min(records.len());
        Some(summarize(&records, window)?)
    };
    Ok((experiment.global, records, summary))
}
