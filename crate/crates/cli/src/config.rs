//! Run settings: defaults, then a `[section]`/`key = value` file, then
//! `--set section.key=value` overrides, then dedicated flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use maskgate::optim::{AdamConfig, SgdConfig};
use maskgate::train::{default_schedule, TrainConfig};
use maskgate::{Error, ModelKind, Result, SteConvention};

const SECTIONS: [&str; 4] = ["model", "train", "prune", "data"];

/// Flat `section.key → value` map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(pub BTreeMap<String, String>);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]",
                        n + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            let sec = section.as_deref().ok_or_else(|| {
                Error::Config(format!("line {}: key outside of a section", n + 1))
            })?;
            map.insert(format!("{sec}.{}", key.trim()), value.trim().to_string());
        }
        Ok(RawConfig(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        if !key
            .split_once('.')
            .is_some_and(|(s, k)| SECTIONS.contains(&s) && !k.is_empty())
        {
            return Err(Error::Config(format!(
                "override key {key:?} must look like section.key with section in {SECTIONS:?}"
            )));
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn put(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.0.remove(key).as_deref() {
            None => Ok(None),
            Some("true" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "no" | "0") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!(
                "{key}: expected true or false, got {v:?}"
            ))),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() || v.trim() == "none" => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: bad entry {s:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

/// Parses `epoch:multiplier` pairs separated by commas.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
    if text.trim().is_empty() || text.trim() == "none" {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let (e, m) = item.split_once(':').ok_or_else(|| {
                Error::Config(format!("schedule entry {item:?} is not epoch:multiplier"))
            })?;
            let e = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule epoch {e:?}")))?;
            let m = m
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule multiplier {m:?}")))?;
            Ok((e, m))
        })
        .collect()
}

/// Model choices that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub kind: ModelKind,
    pub widths: Option<Vec<usize>>,
    pub mask_placement: Option<Vec<usize>>,
    pub residual: bool,
    pub channel_affine: bool,
    pub kernel_size: Option<usize>,
    pub mask_hidden: Option<usize>,
    pub branch_width: Option<usize>,
    pub ste: SteConvention,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub dataset: String,
    pub samples_per_class: usize,
    pub noise: f64,
    pub separation: f64,
    /// Held-out samples for evaluation; 0 trains and evaluates on everything.
    pub holdout: usize,
    /// `C,H,W` of CSV images; inferred as one square channel when absent.
    pub image_shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Settings {
    /// Consumes every known key; anything left over is an error.
    pub fn resolve(mut raw: RawConfig) -> Result<Self> {
        let seed = raw.take("train.seed")?.unwrap_or(0);
        let kind: ModelKind = raw.take("model.kind")?.unwrap_or(ModelKind::Mlp);
        let ste = raw.take("model.ste_sign_convention")?.unwrap_or_default();
        let model = ModelSettings {
            kind,
            widths: raw.take_list("model.widths")?,
            mask_placement: raw.take_list("model.mask_placement")?,
            residual: raw.take_bool("model.residual")?.unwrap_or(false),
            channel_affine: raw.take_bool("model.channel_affine")?.unwrap_or(false),
            kernel_size: raw.take("model.kernel_size")?,
            mask_hidden: raw.take("model.mask_hidden")?,
            branch_width: raw.take("model.branch_width")?,
            ste,
            tau: raw.take("model.tau")?.unwrap_or(0.0),
        };

        let epochs = raw.take("train.epochs")?.unwrap_or(100);
        let sgd_default = SgdConfig::default();
        let adam_default = AdamConfig::default();
        let schedule = match raw.0.remove("train.schedule") {
            Some(s) => parse_schedule(&s)?,
            None => default_schedule(epochs),
        };
        let train = TrainConfig {
            epochs,
            batch_size: raw.take("train.batch_size")?.unwrap_or(32),
            sgd: SgdConfig {
                lr: raw.take("train.lr")?.unwrap_or(sgd_default.lr),
                momentum: raw.take("train.momentum")?.unwrap_or(sgd_default.momentum),
                weight_decay: raw
                    .take("train.weight_decay")?
                    .unwrap_or(sgd_default.weight_decay),
            },
            adam: AdamConfig {
                lr: raw.take("train.mask_lr")?.unwrap_or(adam_default.lr),
                weight_decay: raw
                    .take("train.mask_weight_decay")?
                    .unwrap_or(adam_default.weight_decay),
                ..adam_default
            },
            schedule,
            seed,
            freeze_branches: raw.take_bool("train.freeze_branches")?.unwrap_or(false),
            freeze_masks: false,
        };
        train.validate()?;

        let data = DataSettings {
            dataset: raw
                .0
                .remove("data.dataset")
                .unwrap_or_else(|| "synthetic".into()),
            samples_per_class: raw.take("data.samples_per_class")?.unwrap_or(200),
            noise: raw.take("data.noise")?.unwrap_or(0.1),
            separation: raw.take("data.separation")?.unwrap_or(2.0),
            holdout: raw.take("data.holdout")?.unwrap_or(0),
            image_shape: raw.take_list("data.image_shape")?,
        };
        let finetune_epochs = raw.take("prune.finetune_epochs")?.unwrap_or(40);
        let finetune_lr = raw.take("prune.finetune_lr")?.unwrap_or(0.001);
        if let Some(key) = raw.0.keys().next() {
            return Err(Error::Config(format!("unknown setting {key}")));
        }
        Ok(Settings {
            model,
            train,
            data,
            finetune_epochs,
            finetune_lr,
            seed,
        })
    }
}
