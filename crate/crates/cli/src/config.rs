//! Flat `key = value` run configuration.
//!
//! Every [`ModelConfig`] and [`TrainHyper`] field is a key, plus `mode`.
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Unset keys keep the toy defaults; `d_head` follows
//! `d_model / n_heads`, `attn_scale_dim` follows `2 * d_head` and
//! `warmup_steps` is 2% of `total_steps` unless given.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use phase2bit_core::model::Mode;
use phase2bit_core::training::TrainHyper;
use phase2bit_core::ModelConfig;
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

fn to_map<T: serde::Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("plain struct") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn typed(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let bad = || anyhow!("config key `{key}`: cannot parse `{raw}`");
    match template {
        Value::Number(n) if n.is_u64() => Ok(Value::from(raw.parse::<u64>().map_err(|_| bad())?)),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)
        }
        _ => unreachable!("config fields are numeric"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                bail!("config key `{k}` given twice");
            }
        }

        let mut model = to_map(&ModelConfig::toy());
        let mut hyper = to_map(&TrainHyper::default());
        let mut mode = Mode::Qat;
        for (k, v) in &entries {
            if k == "mode" {
                mode = match Mode::parse(v) {
                    Some(m @ (Mode::Qat | Mode::FullPrecision)) => m,
                    _ => bail!("config key `mode`: expected `qat` or `full_precision`, got `{v}`"),
                };
            } else if let Some(t) = model.get(k) {
                let val = typed(k, v, t)?;
                model.insert(k.clone(), val);
            } else if let Some(t) = hyper.get(k) {
                let val = typed(k, v, t)?;
                hyper.insert(k.clone(), val);
            } else {
                bail!("unknown config key `{k}`");
            }
        }
        let set = |k: &str| entries.contains_key(k);
        let get = |m: &Map<String, Value>, k: &str| m[k].as_u64().unwrap();
        if !set("d_head") {
            let heads = get(&model, "n_heads");
            let d = if heads == 0 { 0 } else { get(&model, "d_model") / heads };
            model.insert("d_head".into(), d.into());
        }
        if !set("attn_scale_dim") {
            let d = 2 * get(&model, "d_head");
            model.insert("attn_scale_dim".into(), d.into());
        }
        if !set("warmup_steps") {
            let w = (get(&hyper, "total_steps") as f64 * 0.02).round() as u64;
            hyper.insert("warmup_steps".into(), w.into());
        }
        let model: ModelConfig = serde_json::from_value(Value::Object(model))?;
        let hyper: TrainHyper = serde_json::from_value(Value::Object(hyper))?;
        model.validate().context("invalid model config")?;
        hyper.validate().context("invalid training config")?;
        Ok(Self { model, hyper, mode })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }
}
