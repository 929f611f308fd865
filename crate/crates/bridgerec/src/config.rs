//! `key=value` configuration files layered under command-line flags.
//!
//! Keys are the long flag names with `-` replaced by `_`. Module-qualified
//! spellings such as `schedule.kind` or `sampler.steps` are accepted too.
//! Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use bridgerec_core::data::{Pattern, SyntheticSpec};
use bridgerec_core::eval::Retrieval;
use bridgerec_core::model::ConnectivityInputConfig;
use bridgerec_core::sampler::{SamplerConfig, SamplerMode};
use bridgerec_core::schedule::{ScheduleKind, ScheduleParams};
use bridgerec_core::trainer::TrainConfig;

use crate::{Error, Result};

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "seed",
    "schedule",
    "beta0",
    "beta1",
    "mode",
    "steps",
    "guidance_w",
    "sampler_seed",
    "retrieval",
    "k_clusters",
    "cond_drop_p",
    "mu",
    "sigma",
    "lambda",
    "epochs",
    "lr",
    "batch",
    "dim",
    "blocks",
    "max_len",
    "dropout",
    "patience",
    "con_mode",
    "svd_rank",
    "cluster_iterations",
    "out",
    "data",
    "checkpoint",
    "user_embeddings",
    "stage",
    "steps_sweep",
    "k",
    "users",
    "items",
    "pattern",
    "noise",
    "populations",
    "block_size",
    "seq_min",
    "seq_max",
    "zipf",
    "kinds",
    "modes",
    "beta1_list",
    "history",
    "history_file",
    "user_index",
    "quick",
    "perturb_sigma2",
];

const ALIASES: &[(&str, &str)] = &[
    ("schedule.kind", "schedule"),
    ("schedule.beta0", "beta0"),
    ("schedule.beta1", "beta1"),
    ("sampler.mode", "mode"),
    ("sampler.steps", "steps"),
    ("sampler.guidance_w", "guidance_w"),
    ("sampler.seed", "sampler_seed"),
    ("learning_rate", "lr"),
    ("batch_size", "batch"),
    ("noise_rate", "noise"),
    ("num_users", "users"),
    ("num_items", "items"),
];

fn canonical(key: &str) -> Option<&'static str> {
    let key = key.trim().replace('-', "_");
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Some(k);
    }
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, k)| *k)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key=value", n + 1)))?;
            let key = canonical(k)
                .ok_or_else(|| Error::Usage(format!("config line {}: unknown key `{}`", n + 1, k.trim())))?;
            out.values.insert(key, v.trim().to_string());
        }
        Ok(out)
    }

    /// Sets `key`, replacing any value from a file.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let key = canonical(key).unwrap_or_else(|| panic!("unregistered key {key}"));
        self.values.insert(key, value.to_string());
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        canonical(key).and_then(|k| self.values.get(k)).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Usage(format!("{key}={v}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Usage(format!("{key}: `{s}`: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            None => Ok(false),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Usage(format!("{key}={v}: expected true or false"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 0)
    }

    pub fn schedule(&self, base: ScheduleParams) -> Result<ScheduleParams> {
        let kind = match self.raw("schedule") {
            None => base.kind,
            Some(s) => parse_kind(s)?,
        };
        let p =
            ScheduleParams { kind, beta0: self.get_or("beta0", base.beta0)?, beta1: self.get_or("beta1", base.beta1)? };
        p.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(p)
    }

    pub fn sampler(&self, base: SamplerConfig) -> Result<SamplerConfig> {
        let mode = match self.raw("mode") {
            None => base.mode,
            Some(s) => parse_mode(s)?,
        };
        let seed = match self.get("sampler_seed")? {
            Some(s) => s,
            None => self.get_or("seed", base.rng_seed)?,
        };
        let c = SamplerConfig {
            mode,
            steps: self.get_or("steps", base.steps)?,
            guidance_w: self.get_or("guidance_w", base.guidance_w)?,
            rng_seed: seed,
        };
        if c.steps == 0 {
            return Err(Error::Usage("steps must be positive".into()));
        }
        Ok(c)
    }

    pub fn retrieval(&self) -> Result<Retrieval> {
        match self.raw("retrieval") {
            None | Some("ip" | "inner-product" | "inner_product") => Ok(Retrieval::InnerProduct),
            Some("cosine") => Ok(Retrieval::Cosine),
            Some(v) => Err(Error::Usage(format!("retrieval={v}: expected inner-product or cosine"))),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let seed = self.seed()?;
        let input = ConnectivityInputConfig {
            mu: self.get_or("mu", d.input.mu)?,
            sigma: self.get_or("sigma", d.input.sigma)?,
            lambda: self.get_or("lambda", d.input.lambda)?,
        };
        let c = TrainConfig {
            learning_rate: self.get_or("lr", d.learning_rate)?,
            batch_size: self.get_or("batch", d.batch_size)?,
            epochs: self.get_or("epochs", d.epochs)?,
            cond_drop_p: self.get_or("cond_drop_p", d.cond_drop_p)?,
            schedule: self.schedule(d.schedule)?,
            input,
            seed,
            con_mode: self.flag("con_mode")?,
            k_clusters: self.get_or("k_clusters", d.k_clusters)?,
            dim: self.get_or("dim", d.dim)?,
            blocks: self.get_or("blocks", d.blocks)?,
            max_len: self.get_or("max_len", d.max_len)?,
            dropout: self.get_or("dropout", d.dropout)?,
            patience: self.get_or("patience", d.patience)?,
            sampler: self.sampler(SamplerConfig { rng_seed: seed, ..d.sampler })?,
            adam: d.adam,
            cluster_iterations: self.get_or("cluster_iterations", d.cluster_iterations)?,
        };
        c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        c.model_config(1).validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let pattern = match self.raw("pattern") {
            None => d.pattern,
            Some(s) => Pattern::parse(s)
                .ok_or_else(|| Error::Usage(format!("pattern={s}: expected markov or block-cyclic")))?,
        };
        let s = SyntheticSpec {
            num_users: self.get_or("users", d.num_users)?,
            num_items: self.get_or("items", d.num_items)?,
            pattern,
            noise_rate: self.get_or("noise", d.noise_rate)?,
            seed: self.seed()?,
            block_size: self.get_or("block_size", d.block_size)?,
            min_len: self.get_or("seq_min", d.min_len)?,
            max_len: self.get_or("seq_max", d.max_len)?,
            zipf_exponent: self.get_or("zipf", d.zipf_exponent)?,
            populations: self.get_or("populations", d.populations)?,
        };
        s.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(s)
    }
}

pub fn parse_kind(s: &str) -> Result<ScheduleKind> {
    ScheduleKind::parse(s).ok_or_else(|| Error::Usage(format!("schedule `{s}`: expected gmax or vp")))
}

pub fn parse_mode(s: &str) -> Result<SamplerMode> {
    SamplerMode::parse(s).ok_or_else(|| Error::Usage(format!("mode `{s}`: expected sde or ode")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_and_comments() {
        let s = Settings::parse("# run\nschedule.kind = vp\nsampler.steps=7\nlearning-rate=0.01\n\n").unwrap();
        assert_eq!(s.raw("schedule"), Some("vp"));
        assert_eq!(s.get::<usize>("steps").unwrap(), Some(7));
        assert_eq!(s.get::<f64>("lr").unwrap(), Some(0.01));
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        assert!(matches!(Settings::parse("colour=blue"), Err(Error::Usage(_))));
        assert!(matches!(Settings::parse("no equals sign"), Err(Error::Usage(_))));
    }

    #[test]
    fn later_values_win() {
        let mut s = Settings::parse("epochs=3\nseed=5").unwrap();
        s.set("epochs", 9);
        let c = s.train().unwrap();
        assert_eq!(c.epochs, 9);
        assert_eq!(c.seed, 5);
        assert_eq!(c.sampler.rng_seed, 5);
    }

    #[test]
    fn bad_values() {
        assert!(Settings::parse("schedule=cosine").unwrap().train().is_err());
        assert!(Settings::parse("steps=abc").unwrap().train().is_err());
        assert!(Settings::parse("cond_drop_p=1.5").unwrap().train().is_err());
        assert!(Settings::parse("con_mode=maybe").unwrap().train().is_err());
    }

    #[test]
    fn every_key_round_trips() {
        for k in KEYS {
            let mut s = Settings::default();
            s.set(k, "x");
            assert_eq!(s.raw(k), Some("x"));
        }
    }
}
