//! Experiment configuration: JSON with defaults for every key, unknown-key
//! rejection, and range validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{rule_from_config, AggregationRule};
use crate::error::{Result, SimError};

/// Data source for an experiment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian class blobs rendered as square images.
    Blobs {
        n_per_class: usize,
        num_classes: usize,
        side: usize,
        spread: f64,
        test_per_class: usize,
    },
    /// IDX image/label file pairs (the MNIST family format).
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            n_per_class: 300,
            num_classes: 4,
            side: 8,
            spread: 0.08,
            test_per_class: 100,
        }
    }
}

/// Full experiment configuration. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // Federation.
    pub n_clients: usize,
    pub select_fraction: f64,
    pub malicious_fraction: f64,
    pub rounds: u32,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub partition_h: f64,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    pub summary_window: usize,

    // Aggregation.
    pub aggregation: String,
    pub krum_f: usize,
    pub multikrum_keep: usize,
    pub rlr_threshold: u32,
    pub server_lr: f64,

    // Attack.
    pub trigger_size: usize,
    pub trigger_value: f64,
    pub trigger_position: Option<(usize, usize)>,
    pub target_label: usize,
    pub poison_fraction: f64,

    // Defense.
    pub defense: bool,
    pub t_s: u32,
    pub c_init: f64,
    pub delta: f64,
    pub window: usize,
    pub mask_epochs: usize,
    pub mask_lr: f64,
    pub acc_threshold: f64,
    pub lambda: f64,
    pub pattern_epochs: usize,
    pub pattern_lr: f64,
    pub bap_epochs: usize,
    pub bap_lr: f64,
    pub adaptive_scaling: bool,
    pub pattern_gen: bool,
    pub bap: bool,
    pub malicious_run_bap: bool,

    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_clients: 100,
            select_fraction: 0.1,
            malicious_fraction: 0.1,
            rounds: 200,
            local_epochs: 2,
            lr: 0.01,
            batch_size: 64,
            partition_h: 0.9,
            hidden_dims: vec![128, 64],
            seed: 42,
            summary_window: 20,
            aggregation: "fedavg".into(),
            krum_f: 1,
            multikrum_keep: 5,
            rlr_threshold: 4,
            server_lr: 1.0,
            trigger_size: 5,
            trigger_value: 1.0,
            trigger_position: None,
            target_label: 0,
            poison_fraction: 0.5,
            defense: true,
            t_s: 100,
            c_init: 1.0,
            delta: 1.0,
            window: 5,
            mask_epochs: 100,
            mask_lr: 0.1,
            acc_threshold: 0.9,
            lambda: 0.01,
            pattern_epochs: 100,
            pattern_lr: 10.0,
            bap_epochs: 10,
            bap_lr: 0.01,
            adaptive_scaling: true,
            pattern_gen: true,
            bap: true,
            malicious_run_bap: false,
            dataset: DatasetConfig::default(),
        }
    }
}

fn check(ok: bool, key: &str, detail: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(SimError::Config { key: key.into(), detail })
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.n_clients >= 1, "n_clients", "must be >= 1".into())?;
        check(
            self.select_fraction > 0.0 && self.select_fraction <= 1.0,
            "select_fraction",
            format!("must lie in (0, 1], got {}", self.select_fraction),
        )?;
        check(
            (0.0..=1.0).contains(&self.malicious_fraction),
            "malicious_fraction",
            format!("must lie in [0, 1], got {}", self.malicious_fraction),
        )?;
        check(
            (0.0..=1.0).contains(&self.poison_fraction),
            "poison_fraction",
            format!("must lie in [0, 1], got {}", self.poison_fraction),
        )?;
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1".into())?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1".into())?;
        check(self.lr > 0.0, "lr", format!("must be positive, got {}", self.lr))?;
        check(self.partition_h > 0.0, "partition_h", format!("must be positive, got {}", self.partition_h))?;
        check(!self.hidden_dims.is_empty() && self.hidden_dims.iter().all(|&d| d > 0),
            "hidden_dims", "must list positive layer widths".into())?;
        check(self.summary_window >= 1, "summary_window", "must be >= 1".into())?;
        check(self.server_lr > 0.0, "server_lr", format!("must be positive, got {}", self.server_lr))?;
        check(self.trigger_size >= 1, "trigger_size", "must be >= 1".into())?;
        check(
            (0.0..=1.0).contains(&self.trigger_value),
            "trigger_value",
            format!("must lie in [0, 1], got {}", self.trigger_value),
        )?;
        check(self.t_s >= 1, "t_s", "must be >= 1".into())?;
        check(self.c_init > 0.0, "c_init", format!("must be positive, got {}", self.c_init))?;
        check(self.delta > 0.0, "delta", format!("must be positive, got {}", self.delta))?;
        check(self.window >= 1, "window", "must be >= 1".into())?;
        check(self.mask_epochs >= 1, "mask_epochs", "must be >= 1".into())?;
        check(self.mask_lr > 0.0, "mask_lr", format!("must be positive, got {}", self.mask_lr))?;
        check(
            (0.0..=1.0).contains(&self.acc_threshold),
            "acc_threshold",
            format!("must lie in [0, 1], got {}", self.acc_threshold),
        )?;
        check(self.lambda >= 0.0, "lambda", format!("must be nonnegative, got {}", self.lambda))?;
        check(self.pattern_epochs >= 1, "pattern_epochs", "must be >= 1".into())?;
        check(self.pattern_lr > 0.0, "pattern_lr", format!("must be positive, got {}", self.pattern_lr))?;
        check(self.bap_epochs >= 1, "bap_epochs", "must be >= 1".into())?;
        check(self.bap_lr > 0.0, "bap_lr", format!("must be positive, got {}", self.bap_lr))?;
        match &self.dataset {
            DatasetConfig::Blobs { n_per_class, num_classes, side, spread, test_per_class } => {
                check(*n_per_class >= 1, "dataset.n_per_class", "must be >= 1".into())?;
                check(*num_classes >= 2, "dataset.num_classes", "must be >= 2".into())?;
                check(*side >= 1, "dataset.side", "must be >= 1".into())?;
                check(*spread > 0.0, "dataset.spread", format!("must be positive, got {}", spread))?;
                check(*test_per_class >= 1, "dataset.test_per_class", "must be >= 1".into())?;
                check(
                    self.target_label < *num_classes,
                    "target_label",
                    format!("must be < num_classes ({})", num_classes),
                )?;
                check(
                    self.trigger_size <= *side,
                    "trigger_size",
                    format!("{} does not fit {}x{} images", self.trigger_size, side, side),
                )?;
            }
            DatasetConfig::Idx { .. } => {}
        }
        // The aggregation string and its parameters must parse.
        self.aggregation_rule()?;
        Ok(())
    }

    pub fn aggregation_rule(&self) -> Result<AggregationRule> {
        rule_from_config(
            &self.aggregation,
            self.krum_f,
            self.multikrum_keep,
            self.rlr_threshold,
            self.server_lr,
        )
    }

    /// Number of clients selected each round.
    pub fn clients_per_round(&self) -> usize {
        ((self.select_fraction * self.n_clients as f64).ceil() as usize).clamp(1, self.n_clients)
    }

    /// Number of malicious clients (floor rounding).
    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.n_clients as f64).floor() as usize
    }
}

/// Parse and validate a config file.
pub fn parse_config<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&path)?;
    parse_config_str(&text)
}

/// Parse and validate a config from a JSON string.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_full_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg.n_clients, 100);
        assert_eq!(cfg.select_fraction, 0.1);
        assert_eq!(cfg.malicious_fraction, 0.1);
        assert_eq!(cfg.poison_fraction, 0.5);
        assert_eq!(cfg.trigger_size, 5);
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.local_epochs, 2);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.t_s, 100);
        assert_eq!(cfg.mask_epochs, 100);
        assert_eq!(cfg.mask_lr, 0.1);
        assert_eq!(cfg.acc_threshold, 0.9);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.pattern_epochs, 100);
        assert_eq!(cfg.pattern_lr, 10.0);
        assert_eq!(cfg.bap_epochs, 10);
        assert_eq!(cfg.bap_lr, 0.01);
        assert_eq!(cfg.delta, 1.0);
        assert_eq!(cfg.window, 5);
        assert_eq!(cfg.partition_h, 0.9);
        assert_eq!(cfg.summary_window, 20);
    }

    #[test]
    fn out_of_range_fraction_names_the_key() {
        let err = parse_config_str(r#"{"malicious_fraction": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("malicious_fraction"), "{}", err);
    }

    #[test]
    fn single_key_override_leaves_other_defaults() {
        let cfg = parse_config_str(r#"{"delta": 3}"#).unwrap();
        assert_eq!(cfg.delta, 3.0);
        let defaults = ExperimentConfig::default();
        assert_eq!(cfg.window, defaults.window);
        assert_eq!(cfg.lr, defaults.lr);
        assert_eq!(cfg.t_s, defaults.t_s);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_str(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{}", err);
    }

    #[test]
    fn invalid_aggregation_string_rejected() {
        let err = parse_config_str(r#"{"aggregation": "median"}"#).unwrap_err();
        assert!(err.to_string().contains("aggregation"), "{}", err);
    }

    #[test]
    fn negative_lr_rejected() {
        let err = parse_config_str(r#"{"lr": -0.5}"#).unwrap_err();
        assert!(err.to_string().contains("lr"), "{}", err);
    }

    #[test]
    fn trigger_must_fit_blob_images() {
        let err = parse_config_str(
            r#"{"trigger_size": 9, "dataset": {"kind": "blobs", "n_per_class": 10, "num_classes": 2, "side": 8, "spread": 0.1, "test_per_class": 5}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("trigger_size"), "{}", err);
    }

    #[test]
    fn round_trip_serialization() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = parse_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn clients_per_round_rounds_up() {
        let mut cfg = ExperimentConfig::default();
        cfg.n_clients = 20;
        cfg.select_fraction = 0.26;
        assert_eq!(cfg.clients_per_round(), 6);
        cfg.select_fraction = 1.0;
        assert_eq!(cfg.clients_per_round(), 20);
    }

    #[test]
    fn malicious_count_uses_floor() {
        let mut cfg = ExperimentConfig::default();
        cfg.n_clients = 7;
        cfg.malicious_fraction = 0.3;
        assert_eq!(cfg.malicious_count(), 2);
    }
}
