//! `key = value` configuration files, flag overrides, validation, and the
//! config fingerprint stamped into checkpoints and reports.

use std::collections::BTreeMap;

use crate::corpus::SynthConfig;
use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::model::{DomainSet, ModelConfig, ModelFlags};
use crate::rng::Streams;
use crate::tcl::CsmConfig;

/// Fully resolved run configuration. Defaults follow the reference
/// training settings: Adam at lr 0.0005, batch 120, embedding size 64,
/// sequence cap 200, temperature 0.1.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub n_neg: usize,
    pub lambda_csm: f64,
    pub lambda_fdm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub gamma: f64,
    pub encoder: EncoderVariant,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub residual_layernorm: bool,
    pub domains: DomainSet,
    pub tca: bool,
    pub csm: bool,
    pub fdm: bool,
    pub skip_pretrain: bool,
    pub warm_start_mixed: bool,
    pub sliding_window: bool,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub n_eval_neg: usize,
    pub min_target: usize,
    pub min_source: usize,
    pub synth_users: usize,
    pub synth_items_source: usize,
    pub synth_items_target: usize,
    pub synth_source_len: usize,
    pub synth_target_len: usize,
    pub synth_latent_dim: usize,
    pub synth_rho: f64,
    pub synth_sharpness: f64,
    pub data: Option<String>,
    pub data_source: Option<String>,
    pub data_target: Option<String>,
    pub corpus_dir: Option<String>,
    pub out_dir: Option<String>,
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            lr: 0.0005,
            batch_size: 120,
            embed_dim: 64,
            max_len: 200,
            epochs: 100,
            pretrain_epochs: 50,
            patience: 10,
            n_neg: 1,
            lambda_csm: 0.5,
            lambda_fdm: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.1,
            gamma: 0.5,
            encoder: EncoderVariant::SelfAttention,
            n_blocks: 2,
            n_heads: 1,
            dropout: 0.2,
            residual_layernorm: false,
            domains: DomainSet::full(),
            tca: true,
            csm: true,
            fdm: true,
            skip_pretrain: false,
            warm_start_mixed: false,
            sliding_window: false,
            grad_clip: 0.0,
            n_eval_neg: 99,
            min_target: 3,
            min_source: 1,
            synth_users: 500,
            synth_items_source: 300,
            synth_items_target: 300,
            synth_source_len: 14,
            synth_target_len: 8,
            synth_latent_dim: 8,
            synth_rho: 0.8,
            synth_sharpness: 6.0,
            data: None,
            data_source: None,
            data_target: None,
            corpus_dir: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            max_len: self.max_len,
            dropout: self.dropout,
            variant: self.encoder,
            residual_layernorm: self.residual_layernorm,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            flags: ModelFlags {
                domains: self.domains,
                tca: self.tca,
                csm: self.csm,
                fdm: self.fdm,
            },
            lambda_csm: self.lambda_csm,
            lambda_fdm: self.lambda_fdm,
            csm: CsmConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                tau: self.tau,
            },
            gamma: self.gamma,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_users: self.synth_users,
            n_items_source: self.synth_items_source,
            n_items_target: self.synth_items_target,
            source_len: self.synth_source_len,
            target_len: self.synth_target_len,
            latent_dim: self.synth_latent_dim,
            rho: self.synth_rho,
            affinity_sharpness: self.synth_sharpness,
        }
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(bad("lr", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.n_neg == 0 {
            return Err(bad("n_neg", "must be at least 1"));
        }
        if self.grad_clip < 0.0 {
            return Err(bad("grad_clip", "must be nonnegative (0 disables)"));
        }
        self.model_config().validate()
    }

    /// Hex fingerprint over every model- and training-relevant key.
    /// Paths and commands stay out, so re-running the same experiment in
    /// a different directory matches.
    pub fn fingerprint(&self) -> String {
        let mut canon = String::new();
        let enc_label = match self.encoder {
            EncoderVariant::SelfAttention => "sasrec",
            EncoderVariant::Gru => "gru",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("csm", self.csm.to_string()),
            ("domains", self.domains.label()),
            ("dropout", format!("{:?}", self.dropout)),
            ("embed_dim", self.embed_dim.to_string()),
            ("encoder", enc_label.to_string()),
            ("epochs", self.epochs.to_string()),
            ("fdm", self.fdm.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("lambda1", format!("{:?}", self.lambda1)),
            ("lambda2", format!("{:?}", self.lambda2)),
            ("lambda3", format!("{:?}", self.lambda3)),
            ("lambda_csm", format!("{:?}", self.lambda_csm)),
            ("lambda_fdm", format!("{:?}", self.lambda_fdm)),
            ("lr", format!("{:?}", self.lr)),
            ("max_len", self.max_len.to_string()),
            ("min_source", self.min_source.to_string()),
            ("min_target", self.min_target.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_eval_neg", self.n_eval_neg.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_neg", self.n_neg.to_string()),
            ("patience", self.patience.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("residual_layernorm", self.residual_layernorm.to_string()),
            ("seed", self.seed.to_string()),
            ("skip_pretrain", self.skip_pretrain.to_string()),
            ("sliding_window", self.sliding_window.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("tca", self.tca.to_string()),
            ("warm_start_mixed", self.warm_start_mixed.to_string()),
        ];
        for (k, v) in pairs {
            canon.push_str(k);
            canon.push('=');
            canon.push_str(&v);
            canon.push('\n');
        }
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn bad(key: &str, msg: &str) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

/// Parse a config file body (`key = value` lines, `#` comments) plus
/// override pairs that win over the file. Unknown keys are rejected.
pub fn parse_config(file: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    if let Some(body) = file {
        for raw in body.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for (k, v) in overrides {
        kv.insert(k.clone(), v.clone());
    }

    let mut cfg = RunConfig::default();
    for (key, value) in kv {
        apply_key(&mut cfg, &key, &value)?;
    }
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    fn int(key: &str, v: &str) -> Result<usize> {
        v.parse().map_err(|_| Error::Config {
            key: key.into(),
            msg: format!("`{v}` is not an integer"),
        })
    }
    fn uint64(key: &str, v: &str) -> Result<u64> {
        v.parse().map_err(|_| Error::Config {
            key: key.into(),
            msg: format!("`{v}` is not an integer"),
        })
    }
    fn real(key: &str, v: &str) -> Result<f64> {
        v.parse().map_err(|_| Error::Config {
            key: key.into(),
            msg: format!("`{v}` is not a number"),
        })
    }
    fn boolean(key: &str, v: &str) -> Result<bool> {
        match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::Config { key: key.into(), msg: format!("`{v}` is not a boolean") }),
        }
    }
    match key {
        "seed" => cfg.seed = uint64(key, value)?,
        "lr" => cfg.lr = real(key, value)?,
        "batch_size" => cfg.batch_size = int(key, value)?,
        "embed_dim" => cfg.embed_dim = int(key, value)?,
        "max_len" => cfg.max_len = int(key, value)?,
        "epochs" => cfg.epochs = int(key, value)?,
        "pretrain_epochs" => cfg.pretrain_epochs = int(key, value)?,
        "patience" => cfg.patience = int(key, value)?,
        "n_neg" => cfg.n_neg = int(key, value)?,
        "lambda_csm" => cfg.lambda_csm = real(key, value)?,
        "lambda_fdm" => cfg.lambda_fdm = real(key, value)?,
        "lambda1" => cfg.lambda1 = real(key, value)?,
        "lambda2" => cfg.lambda2 = real(key, value)?,
        "lambda3" => cfg.lambda3 = real(key, value)?,
        "tau" => cfg.tau = real(key, value)?,
        "gamma" => cfg.gamma = real(key, value)?,
        "encoder" => {
            cfg.encoder = match value {
                "sasrec" | "self-attention" => EncoderVariant::SelfAttention,
                "gru" => EncoderVariant::Gru,
                _ => {
                    return Err(Error::Config {
                        key: key.into(),
                        msg: format!("`{value}` is not one of sasrec, gru"),
                    })
                }
            }
        }
        "n_blocks" => cfg.n_blocks = int(key, value)?,
        "n_heads" => cfg.n_heads = int(key, value)?,
        "dropout" => cfg.dropout = real(key, value)?,
        "residual_layernorm" => cfg.residual_layernorm = boolean(key, value)?,
        "domains" => cfg.domains = DomainSet::parse(value)?,
        "tca" => cfg.tca = boolean(key, value)?,
        "csm" => cfg.csm = boolean(key, value)?,
        "fdm" => cfg.fdm = boolean(key, value)?,
        "skip_pretrain" => cfg.skip_pretrain = boolean(key, value)?,
        "warm_start_mixed" => cfg.warm_start_mixed = boolean(key, value)?,
        "sliding_window" => cfg.sliding_window = boolean(key, value)?,
        "grad_clip" => cfg.grad_clip = real(key, value)?,
        "n_eval_neg" => cfg.n_eval_neg = int(key, value)?,
        "min_target" => cfg.min_target = int(key, value)?,
        "min_source" => cfg.min_source = int(key, value)?,
        "synth_users" => cfg.synth_users = int(key, value)?,
        "synth_items_source" => cfg.synth_items_source = int(key, value)?,
        "synth_items_target" => cfg.synth_items_target = int(key, value)?,
        "synth_source_len" => cfg.synth_source_len = int(key, value)?,
        "synth_target_len" => cfg.synth_target_len = int(key, value)?,
        "synth_latent_dim" => cfg.synth_latent_dim = int(key, value)?,
        "synth_rho" => cfg.synth_rho = real(key, value)?,
        "synth_sharpness" => cfg.synth_sharpness = real(key, value)?,
        "data" => cfg.data = Some(value.to_string()),
        "data_source" => cfg.data_source = Some(value.to_string()),
        "data_target" => cfg.data_target = Some(value.to_string()),
        "corpus_dir" => cfg.corpus_dir = Some(value.to_string()),
        "out_dir" => cfg.out_dir = Some(value.to_string()),
        "checkpoint" => cfg.checkpoint = Some(value.to_string()),
        _ => {
            return Err(Error::Config { key: key.into(), msg: "unknown key".into() });
        }
    }
    Ok(())
}
