//! Training configuration file: `key=value` lines with `#` comments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::network::NetworkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub batch: usize,
    pub iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub patch: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub noise_sigma: f64,
    pub use_wavelet_loss: bool,
    pub augment: bool,
    /// Multiplier of the summed wavelet losses; 1 is the plain sum.
    pub wavelet_weight: f64,
    /// Iterations between validation passes; 0 validates only at the ends.
    pub eval_interval: usize,
    pub weight_decay: f64,
    /// Adam epsilon of the filter-bank parameters.
    pub bank_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            batch: 8,
            iters: 3000,
            lr_max: 1e-3,
            lr_min: 1e-7,
            seed: 0,
            patch: 64,
            train_count: 200,
            val_count: 32,
            noise_sigma: 0.01,
            use_wavelet_loss: true,
            augment: true,
            wavelet_weight: 1000.0,
            eval_interval: 500,
            weight_decay: 0.0,
            bank_eps: 10.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.network.set(key, value)? {
            return Ok(());
        }
        match key {
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "lr_max" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "use_wavelet_loss" => self.use_wavelet_loss = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "wavelet_weight" => self.wavelet_weight = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "bank_eps" => self.bank_eps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let kv = parse_key_values(text)?;
        if let Some((k, v)) = kv.iter().find(|(k, _)| k == "scales") {
            cfg.set(k, v)?;
        }
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}batch={}\niters={}\nlr_max={:e}\nlr_min={:e}\nseed={}\npatch={}\ntrain_count={}\nval_count={}\n\
             noise_sigma={}\nuse_wavelet_loss={}\naugment={}\nwavelet_weight={}\neval_interval={}\nweight_decay={}\nbank_eps={:e}\n",
            self.network.to_text(),
            self.batch,
            self.iters,
            self.lr_max,
            self.lr_min,
            self.seed,
            self.patch,
            self.train_count,
            self.val_count,
            self.noise_sigma,
            self.use_wavelet_loss,
            self.augment,
            self.wavelet_weight,
            self.eval_interval,
            self.weight_decay,
            self.bank_eps
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.train_count == 0 {
            return bad("train_count must be positive".into());
        }
        if self.patch == 0 || self.patch % self.network.size_multiple() != 0 {
            return bad(format!(
                "patch {} must be a positive multiple of {}",
                self.patch,
                self.network.size_multiple()
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 <= lr_min <= lr_max, lr_max > 0 (got {} and {})", self.lr_min, self.lr_max));
        }
        if !(self.wavelet_weight >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("wavelet_weight and weight_decay must be non-negative".into());
        }
        if !(self.bank_eps > 0.0) || !self.bank_eps.is_finite() {
            return bad("bank_eps must be positive".into());
        }
        Ok(())
    }
}
