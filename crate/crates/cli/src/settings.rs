//! Flat `key = value` settings merged from a config file, `--set` pairs and
//! dedicated flags, then dispatched to the configs that own each key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{Context, Result};
use nlf_core::fitting::{EncoderConfig, FitConfig};
use nlf_core::io::parse_config;
use nlf_core::training::TrainConfig;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

fn train_keys() -> BTreeSet<String> {
    let mut k: BTreeSet<String> = TrainConfig::default().to_map().into_keys().collect();
    k.extend(["control_points".to_string(), "latent_dim".to_string()]);
    k
}

impl Settings {
    /// File entries first, then `--set` pairs, then explicit flags.
    pub fn load(config: Option<&Path>, sets: &[String], flags: &[(&str, Option<String>)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(p) = config {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            for (k, v) in parse_config(&text)? {
                map.insert(k.replace('-', "_"), v);
            }
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(nlf_core::Error::Validation(format!("--set expects key=value, got `{s}`")).into());
            };
            map.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        let s = Self { map };
        s.check_known()?;
        Ok(s)
    }

    fn check_known(&self) -> Result<()> {
        let train = train_keys();
        let fit = FitConfig::default().to_map();
        let enc = EncoderConfig::default().to_map();
        for k in self.map.keys() {
            if !train.contains(k) && !fit.contains_key(k) && !enc.contains_key(k) {
                return Err(nlf_core::Error::Validation(format!("unknown config key `{k}`")).into());
            }
        }
        Ok(())
    }

    pub fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn seed(&self) -> Result<u64> {
        match self.map.get("seed") {
            Some(v) => v.parse().map_err(|_| nlf_core::Error::Validation(format!("bad seed `{v}`")).into()),
            None => Ok(0),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let keys = train_keys();
        let mut c = TrainConfig::default();
        for (k, v) in self.map.iter().filter(|(k, _)| keys.contains(*k)) {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn fit(&self) -> Result<FitConfig> {
        let keys = FitConfig::default().to_map();
        let mut c = FitConfig::default();
        for (k, v) in self.map.iter().filter(|(k, _)| keys.contains_key(*k)) {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let keys = EncoderConfig::default().to_map();
        let mut c = EncoderConfig::default();
        for (k, v) in self.map.iter().filter(|(k, _)| keys.contains_key(*k)) {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Expected control-point count when the user asked for one.
    pub fn expected_k(&self) -> Result<Option<usize>> {
        if self.has("k_control") || self.has("control_points") {
            Ok(Some(self.train()?.control_points))
        } else {
            Ok(None)
        }
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_set_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        std::fs::write(&p, "epochs = 5\nlr = 0.1\niterations = 7\n").unwrap();
        let s = Settings::load(Some(&p), &["lr=0.2".into()], &[("epochs", Some("9".into())), ("seed", None)]).unwrap();
        let t = s.train().unwrap();
        assert_eq!((t.epochs, t.lr), (9, 0.2));
        assert_eq!(s.fit().unwrap().iterations, 7);
        assert_eq!(s.seed().unwrap(), 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::load(None, &["bogus=1".into()], &[]).is_err());
        assert!(Settings::load(None, &["k-control=12".into()], &[]).unwrap().expected_k().unwrap() == Some(12));
    }
}
