//! Run settings: defaults merged with an optional config file, repeatable
//! `--set key=value` overrides, and the dedicated convenience flags. Every
//! resolved run can be serialized back to the flat key=value form, which is
//! what the effective-config snapshot contains.

use std::collections::BTreeMap;
use std::path::Path;

use xyscan_core::error::{Error, Result};
use xyscan_core::kvconfig::{self, Reader};
use xyscan_core::loss::LossWeights;
use xyscan_core::network::ModelConfig;
use xyscan_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub count: usize,
    pub size: usize,
    pub kernel_min: f64,
    pub kernel_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Directory with `blur/` and `sharp/` PNG pairs; synthetic pairs are
    /// generated when empty.
    pub dir: String,
    /// Hold the last pair out of training for the periodic PSNR column.
    pub holdout: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            count: 8,
            size: 64,
            kernel_min: 3.0,
            kernel_max: 9.0,
            noise_sigma: 0.0,
            seed: 0,
            dir: String::new(),
            holdout: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub channels: usize,
    pub state_dim: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            channels: 16,
            state_dim: 8,
            depth: 2,
            height: 128,
            width: 128,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub bench: BenchSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            // desk-scale defaults; the full-size architecture is reachable
            // via model.base_channels = 144, model.blocks_per_level = 3,3,6
            model: ModelConfig {
                base_channels: 16,
                blocks_per_level: [1, 1, 2],
                state_dim: 8,
                ..ModelConfig::default()
            },
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl Settings {
    /// defaults <- config file <- --set overrides <- dedicated flags.
    pub fn resolve(
        config_path: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
        steps: Option<u64>,
        size: Option<(usize, usize)>,
    ) -> Result<Settings> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            map = kvconfig::parse(&text)?;
        }
        for pair in sets {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::config(pair.clone(), "expected KEY=VALUE"));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        if let Some(seed) = seed {
            map.insert("model.seed".into(), seed.to_string());
            map.insert("train.seed".into(), seed.to_string());
            map.insert("data.seed".into(), seed.to_string());
        }
        if let Some(steps) = steps {
            map.insert("train.steps".into(), steps.to_string());
        }
        if let Some((h, w)) = size {
            map.insert("data.size".into(), h.max(w).to_string());
            map.insert("bench.height".into(), h.to_string());
            map.insert("bench.width".into(), w.to_string());
        }

        let defaults = Settings::default();
        let mut reader = Reader::new(map);
        let model = kvconfig::model_config_from(&mut reader, &defaults.model)?;
        let loss = LossWeights {
            lambda1: reader.f64("loss.lambda1", defaults.loss.lambda1)?,
            lambda2: reader.f64("loss.lambda2", defaults.loss.lambda2)?,
            eps_char: reader.f64("loss.eps_char", defaults.loss.eps_char)?,
        };
        loss.validate()?;
        let train = TrainConfig {
            steps: reader.u64("train.steps", defaults.train.steps)?,
            batch: reader.usize("train.batch", defaults.train.batch)?,
            patch: reader.usize("train.patch", defaults.train.patch)?,
            lr0: reader.f64("train.lr0", defaults.train.lr0)?,
            lr_min: reader.f64("train.lr_min", defaults.train.lr_min)?,
            loss,
            seed: reader.u64("train.seed", defaults.train.seed)?,
            eval_every: reader.u64("train.eval_every", defaults.train.eval_every)?,
            ckpt_every: reader.u64("train.ckpt_every", defaults.train.ckpt_every)?,
        };
        if train.batch == 0 {
            return Err(Error::config("train.batch", "must be >= 1"));
        }
        if train.patch < 8 {
            return Err(Error::config("train.patch", "must be >= 8"));
        }
        let data = DataSettings {
            count: reader.usize("data.count", defaults.data.count)?,
            size: reader.usize("data.size", defaults.data.size)?,
            kernel_min: reader.f64("data.kernel_min", defaults.data.kernel_min)?,
            kernel_max: reader.f64("data.kernel_max", defaults.data.kernel_max)?,
            noise_sigma: reader.f64("data.noise_sigma", defaults.data.noise_sigma)?,
            seed: reader.u64("data.seed", defaults.data.seed)?,
            dir: reader.string("data.dir", &defaults.data.dir),
            holdout: reader.bool("data.holdout", defaults.data.holdout)?,
        };
        if data.kernel_min < 1.0 || data.kernel_max < data.kernel_min {
            return Err(Error::config(
                "data.kernel_min/data.kernel_max",
                "need 1 <= min <= max",
            ));
        }
        let bench = BenchSettings {
            channels: reader.usize("bench.channels", defaults.bench.channels)?,
            state_dim: reader.usize("bench.state_dim", defaults.bench.state_dim)?,
            depth: reader.usize("bench.depth", defaults.bench.depth)?,
            height: reader.usize("bench.height", defaults.bench.height)?,
            width: reader.usize("bench.width", defaults.bench.width)?,
            repeats: reader.usize("bench.repeats", defaults.bench.repeats)?,
        };
        reader.finish()?;
        Ok(Settings {
            model,
            loss,
            train,
            data,
            bench,
        })
    }

    /// Full resolved key set, ready to be written as the snapshot.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = kvconfig::model_config_to_map(&self.model);
        map.insert("loss.lambda1".into(), self.loss.lambda1.to_string());
        map.insert("loss.lambda2".into(), self.loss.lambda2.to_string());
        map.insert("loss.eps_char".into(), self.loss.eps_char.to_string());
        map.insert("train.steps".into(), self.train.steps.to_string());
        map.insert("train.batch".into(), self.train.batch.to_string());
        map.insert("train.patch".into(), self.train.patch.to_string());
        map.insert("train.lr0".into(), self.train.lr0.to_string());
        map.insert("train.lr_min".into(), self.train.lr_min.to_string());
        map.insert("train.eval_every".into(), self.train.eval_every.to_string());
        map.insert("train.ckpt_every".into(), self.train.ckpt_every.to_string());
        map.insert("train.seed".into(), self.train.seed.to_string());
        map.insert("data.count".into(), self.data.count.to_string());
        map.insert("data.size".into(), self.data.size.to_string());
        map.insert("data.kernel_min".into(), self.data.kernel_min.to_string());
        map.insert("data.kernel_max".into(), self.data.kernel_max.to_string());
        map.insert("data.noise_sigma".into(), self.data.noise_sigma.to_string());
        map.insert("data.seed".into(), self.data.seed.to_string());
        map.insert("data.dir".into(), self.data.dir.clone());
        map.insert("data.holdout".into(), self.data.holdout.to_string());
        map.insert("bench.channels".into(), self.bench.channels.to_string());
        map.insert("bench.state_dim".into(), self.bench.state_dim.to_string());
        map.insert("bench.depth".into(), self.bench.depth.to_string());
        map.insert("bench.height".into(), self.bench.height.to_string());
        map.insert("bench.width".into(), self.bench.width.to_string());
        map.insert("bench.repeats".into(), self.bench.repeats.to_string());
        map
    }

    pub fn snapshot(&self) -> String {
        kvconfig::serialize(&self.to_map())
    }
}
