//! Flat `key=value` configuration for [`TrainConfig`].
//!
//! Layering, lowest to highest: defaults, config file, `GPCOUNT_<KEY>`
//! environment variables, explicit command-line flags.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gp::NeighborMetric;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "GPCOUNT_";

pub const KEYS: &[&str] = &[
    "lambda_un",
    "n_neighbors",
    "noise_variance",
    "neighbor_metric",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "crop_size",
    "seed",
    "gp_enabled",
    "ranking_enabled",
    "ranking_margin",
    "detach_pseudo",
    "interleave",
    "flip",
    "density_sigma",
    "encoder_channels",
    "latent_channels",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Set one field by name. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_un" => self.lambda_un = parse(key, value)?,
            "n_neighbors" => self.n_neighbors = parse(key, value)?,
            "noise_variance" => self.noise_variance = parse(key, value)?,
            "neighbor_metric" => self.neighbor_metric = parse::<NeighborMetric>(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "gp_enabled" => self.gp_enabled = parse_bool(key, value)?,
            "ranking_enabled" => self.ranking_enabled = parse_bool(key, value)?,
            "ranking_margin" => self.ranking_margin = parse(key, value)?,
            "detach_pseudo" => self.detach_pseudo = parse_bool(key, value)?,
            "interleave" => self.interleave = parse_bool(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "density_sigma" => self.density_sigma = parse(key, value)?,
            "encoder_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?;
                self.encoder_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs exactly 3 comma-separated widths")))?;
            }
            "latent_channels" => self.latent_channels = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "lambda_un" => self.lambda_un.to_string(),
            "n_neighbors" => self.n_neighbors.to_string(),
            "noise_variance" => self.noise_variance.to_string(),
            "neighbor_metric" => self.neighbor_metric.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "crop_size" => self.crop_size.to_string(),
            "seed" => self.seed.to_string(),
            "gp_enabled" => self.gp_enabled.to_string(),
            "ranking_enabled" => self.ranking_enabled.to_string(),
            "ranking_margin" => self.ranking_margin.to_string(),
            "detach_pseudo" => self.detach_pseudo.to_string(),
            "interleave" => self.interleave.to_string(),
            "flip" => self.flip.to_string(),
            "density_sigma" => self.density_sigma.to_string(),
            "encoder_channels" => {
                let [a, b, c] = self.encoder_channels;
                format!("{a},{b},{c}")
            }
            "latent_channels" => self.latent_channels.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Every field as `key=value` lines, in [`KEYS`] order.
    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

/// Parse `key=value` lines. Blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Apply a config file on top of `cfg`.
pub fn apply_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    for (i, (k, v)) in parse_kv(&text, &path.display().to_string())?.into_iter().enumerate() {
        cfg.set(&k, &v).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: entry {}: {msg}", path.display(), i + 1)),
            other => other,
        })?;
    }
    Ok(())
}

/// Apply `GPCOUNT_<KEY>` overrides from an environment snapshot.
pub fn apply_env<I, K, V>(cfg: &mut TrainConfig, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut found: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    found.sort();
    for (k, v) in found {
        if !KEYS.contains(&k.as_str()) {
            // other GPCOUNT_ variables may belong to the command layer
            continue;
        }
        cfg.set(&k, &v)?;
    }
    Ok(())
}
