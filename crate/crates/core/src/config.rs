//! Flat `key=value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Missing keys keep their defaults and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::runtime::{DataSource, RunConfig};

pub const KEYS: &[&str] = &[
    "mode",
    "n_clients",
    "ratio",
    "rounds",
    "epochs",
    "batch",
    "lr",
    "alpha",
    "tau",
    "lambda",
    "seed",
    "seeds",
    "model",
    "hidden",
    "rep_dim",
    "raw_threshold",
    "data",
    "out",
    "min_per_client",
    "train_aux",
    "swap_kl",
    "parallel",
    "fail",
    "dump_packets",
];

/// A run template plus the seeds to run it with and where results go.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { run: RunConfig::default(), seeds: vec![0], out: PathBuf::from("results") }
    }
}

impl ExperimentConfig {
    /// The run configuration for each seed, in order.
    pub fn runs(&self) -> Vec<RunConfig> {
        self.seeds.iter().map(|&seed| RunConfig { seed, ..self.run.clone() }).collect()
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn float_in(v: &str, ok: impl Fn(f64) -> bool, range: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if ok(x) {
        Ok(x)
    } else {
        Err(format!("{x} outside {range}"))
    }
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    let x: usize = num(v)?;
    if x == 0 {
        Err("must be at least 1".into())
    } else {
        Ok(x)
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

/// Parses `synth[:k=v,...]` or treats the value as an FMIC path.
pub fn parse_data_source(v: &str) -> std::result::Result<DataSource, String> {
    let Some(rest) = v.strip_prefix("synth") else {
        return if v.is_empty() { Err("empty data source".into()) } else { Ok(DataSource::File(PathBuf::from(v))) };
    };
    let mut spec = SynthSpec::default();
    let rest = match rest.strip_prefix(':') {
        Some(r) => r,
        None if rest.is_empty() => "",
        None => return Ok(DataSource::File(PathBuf::from(v))),
    };
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (k, val) = part.split_once('=').ok_or_else(|| format!("expected key=value in `{part}`"))?;
        match k {
            "classes" => spec.n_classes = num(val)?,
            "per_class" => spec.per_class = num(val)?,
            "noise" => spec.noise = num(val)?,
            "seed" => spec.seed = num(val)?,
            "shape" => {
                let dims: Vec<usize> = val.split('x').map(num).collect::<std::result::Result<_, _>>()?;
                spec.shape = dims.try_into().map_err(|_| format!("shape `{val}` must be CxHxW"))?;
            }
            _ => return Err(format!("unknown synth field `{k}`")),
        }
    }
    Ok(DataSource::Synth(spec))
}

pub fn format_data_source(d: &DataSource) -> String {
    match d {
        DataSource::File(p) => p.display().to_string(),
        DataSource::Synth(s) => format!(
            "synth:classes={},per_class={},shape={}x{}x{},noise={},seed={}",
            s.n_classes, s.per_class, s.shape[0], s.shape[1], s.shape[2], s.noise, s.seed
        ),
    }
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let r = &mut cfg.run;
    match key {
        "mode" => r.mode = v.parse()?,
        "n_clients" => r.n_clients = num(v)?,
        "ratio" => r.ratio = float_in(v, |x| x > 0.0 && x <= 1.0, "(0, 1]")?,
        "rounds" => r.rounds = positive(v)?,
        "epochs" => r.epochs = positive(v)?,
        "batch" => r.batch = positive(v)?,
        "lr" => r.lr = float_in(v, |x| x >= 0.0 && x.is_finite(), "[0, inf)")?,
        "alpha" => r.alpha = float_in(v, |x| x > 0.0 && x <= 1.0, "(0, 1]")?,
        "tau" => r.tau = float_in(v, |x| x >= 0.0 && x.is_finite(), "[0, inf)")?,
        "lambda" => r.lambda = float_in(v, |x| x > 0.0 && x.is_finite(), "(0, inf)")?,
        "seed" => cfg.seeds = vec![num(v)?],
        "seeds" => {
            cfg.seeds = list(v)?;
            if cfg.seeds.is_empty() {
                return Err("at least one seed is required".into());
            }
        }
        "model" => {
            r.model = match v {
                "mlp" => ModelKind::Mlp,
                "cnn" => ModelKind::Cnn,
                _ => return Err(format!("unknown model `{v}` (expected mlp or cnn)")),
            }
        }
        "hidden" => r.hidden = Some(list(v)?),
        "rep_dim" => r.rep_dim = Some(positive(v)?),
        "raw_threshold" => r.raw_threshold = num(v)?,
        "data" => r.data = parse_data_source(v)?,
        "out" => cfg.out = PathBuf::from(v),
        "min_per_client" => r.min_per_client = num(v)?,
        "train_aux" => r.train_aux = boolean(v)?,
        "swap_kl" => r.swap_kl = boolean(v)?,
        "parallel" => r.parallel = boolean(v)?,
        "fail" => r.fail = list(v)?,
        "dump_packets" => r.dump_packets = (!v.is_empty()).then(|| PathBuf::from(v)),
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Parses a config document, then applies `overrides` (`key`, `value`)
/// which win over the document. Override errors report line 0.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            key: line.to_string(),
            msg: "expected key=value".into(),
        })?;
        let key = key.trim();
        apply(&mut cfg, key, value.trim()).map_err(|msg| Error::Parse { line: i + 1, key: key.to_string(), msg })?;
    }
    for (key, value) in overrides {
        apply(&mut cfg, key, value.trim()).map_err(|msg| Error::Parse { line: 0, key: key.clone(), msg })?;
    }
    cfg.run.validate()?;
    Ok(cfg)
}

/// Splits a `--key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    body.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| Error::Parse { line: 0, key: body.to_string(), msg: "expected --key=value".into() })
}

/// Writes every setting so that parsing the result gives back `cfg`.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let r = &cfg.run;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let _ = writeln!(s, "mode={}", r.mode);
    let _ = writeln!(s, "n_clients={}", r.n_clients);
    let _ = writeln!(s, "ratio={}", r.ratio);
    let _ = writeln!(s, "rounds={}", r.rounds);
    let _ = writeln!(s, "epochs={}", r.epochs);
    let _ = writeln!(s, "batch={}", r.batch);
    let _ = writeln!(s, "lr={}", r.lr);
    let _ = writeln!(s, "alpha={}", r.alpha);
    let _ = writeln!(s, "tau={}", r.tau);
    let _ = writeln!(s, "lambda={}", r.lambda);
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds={}", seeds.join(","));
    let _ = writeln!(s, "model={}", if r.model == ModelKind::Cnn { "cnn" } else { "mlp" });
    if let Some(h) = &r.hidden {
        let _ = writeln!(s, "hidden={}", join(h));
    }
    if let Some(d) = r.rep_dim {
        let _ = writeln!(s, "rep_dim={d}");
    }
    let _ = writeln!(s, "raw_threshold={}", r.raw_threshold);
    let _ = writeln!(s, "data={}", format_data_source(&r.data));
    let _ = writeln!(s, "out={}", cfg.out.display());
    let _ = writeln!(s, "min_per_client={}", r.min_per_client);
    let _ = writeln!(s, "train_aux={}", r.train_aux);
    let _ = writeln!(s, "swap_kl={}", r.swap_kl);
    let _ = writeln!(s, "parallel={}", r.parallel);
    let _ = writeln!(s, "fail={}", join(&r.fail));
    if let Some(d) = &r.dump_packets {
        let _ = writeln!(s, "dump_packets={}", d.display());
    }
    s
}
