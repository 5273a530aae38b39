//! Flat `key = value` configuration text with dotted keys. Trivially
//! diffable; `#` starts a comment. Readers must consume every key so
//! unknown or misspelled keys are rejected rather than ignored.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{FusionKind, ModelConfig};

/// Parse `key = value` lines into a map; later duplicates are errors.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{raw}`"),
            ));
        };
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "duplicate key"));
        }
    }
    Ok(out)
}

pub fn serialize(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Typed view over a parsed map that tracks consumption; call [`finish`]
/// to reject unknown keys.
///
/// [`finish`]: Reader::finish
pub struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Reader { map }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Reader::new(parse(text)?))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn string(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected integer, got `{v}`"))),
        }
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected integer, got `{v}`"))),
        }
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected number, got `{v}`"))),
        }
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::config(key, format!("expected bool, got `{other}`"))),
            },
        }
    }

    pub fn usize3(&mut self, key: &str, default: [usize; 3]) -> Result<[usize; 3]> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::config(key, format!("expected three values, got `{v}`")));
                }
                let mut out = [0usize; 3];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p
                        .parse()
                        .map_err(|_| Error::config(key, format!("expected integer, got `{p}`")))?;
                }
                Ok(out)
            }
        }
    }

    /// Error listing every unconsumed key.
    pub fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<String> = self.map.into_keys().collect();
            Err(Error::config(keys.join(", "), "unknown key(s)"))
        }
    }
}

/// Read `model.*` keys; missing keys take the given base's values.
pub fn model_config_from(reader: &mut Reader, base: &ModelConfig) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        base_channels: reader.usize("model.base_channels", base.base_channels)?,
        blocks_per_level: reader.usize3("model.blocks_per_level", base.blocks_per_level)?,
        state_dim: reader.usize("model.state_dim", base.state_dim)?,
        gdfn_ratio: reader.f64("model.gdfn_ratio", base.gdfn_ratio)?,
        level_multipliers: reader.usize3("model.level_multipliers", base.level_multipliers)?,
        fusion: FusionKind::parse(&reader.string("model.fusion", base.fusion.as_str()))?,
        vssm_out_proj: reader.bool("model.vssm_out_proj", base.vssm_out_proj)?,
        seed: reader.u64("model.seed", base.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config_to_map(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("model.base_channels".into(), cfg.base_channels.to_string());
    map.insert(
        "model.blocks_per_level".into(),
        format!(
            "{},{},{}",
            cfg.blocks_per_level[0], cfg.blocks_per_level[1], cfg.blocks_per_level[2]
        ),
    );
    map.insert("model.state_dim".into(), cfg.state_dim.to_string());
    map.insert("model.gdfn_ratio".into(), cfg.gdfn_ratio.to_string());
    map.insert(
        "model.level_multipliers".into(),
        format!(
            "{},{},{}",
            cfg.level_multipliers[0], cfg.level_multipliers[1], cfg.level_multipliers[2]
        ),
    );
    map.insert("model.fusion".into(), cfg.fusion.as_str().to_string());
    map.insert("model.vssm_out_proj".into(), cfg.vssm_out_proj.to_string());
    map.insert("model.seed".into(), cfg.seed.to_string());
    map
}
