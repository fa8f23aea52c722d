//! Declarative config files: plain `key = value` lines, `#` comments.
//!
//! The run config mirrors the training and integrator field names
//! (`d`, `depth`, `hidden`, `freqs`, `learning_rate`, `weight_decay`,
//! `batch_size`, `total_steps`, `warmup_steps`, `seed`, `geometry_mode`,
//! `adam_beta1`, `adam_beta2`, `adam_eps`, `steps`, `probes`,
//! `probe_distribution`, `divergence_mode`, `metrics_every`,
//! `checkpoint_every`). The synthetic-data spec adds `[component]` sections
//! with `mean`, `kappa`, and `weight` keys.

use crate::CliError;
use sphereflow_core::datastore::{SyntheticKind, SyntheticSpec, VmfComponent};
use sphereflow_core::likelihood::{DivergenceMode, IntegratorConfig, ProbeDistribution};
use sphereflow_core::sphere::SpherePoint;
use sphereflow_core::trainer::{FlowConfig, GeometryMode};
use std::path::Path;

fn parse_err(path: &Path, lineno: usize, msg: impl std::fmt::Display) -> CliError {
    CliError {
        category: "config-parse",
        code: 2,
        message: format!("{}:{}: {}", path.display(), lineno, msg),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError {
                category: "input-not-found",
                code: 2,
                message: format!("{}: {e}", path.display()),
            }
        } else {
            CliError {
                category: "io",
                code: 2,
                message: format!("{}: {e}", path.display()),
            }
        }
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn split_kv(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn parse_value<T: std::str::FromStr>(
    path: &Path,
    lineno: usize,
    key: &str,
    value: &str,
) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("invalid value for {key}: {value:?}")))
}

/// Training + integrator settings resolved from one config file.
pub struct RunSettings {
    pub flow: FlowConfig,
    pub integrator: IntegratorConfig,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
}

impl RunSettings {
    pub fn defaults(dim: usize) -> Self {
        RunSettings {
            flow: FlowConfig::new(dim),
            integrator: IntegratorConfig::default(),
            metrics_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// Loads a run config. `dim` keys must appear in the file (as `d`) unless a
/// caller-provided default is already set through `fallback_dim`.
pub fn load_run_settings(path: &Path, fallback_dim: Option<usize>) -> Result<RunSettings, CliError> {
    let mut settings = RunSettings::defaults(fallback_dim.unwrap_or(2));
    let mut saw_dim = fallback_dim.is_some();
    for (i, raw) in read_lines(path)?.iter().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = split_kv(line) else {
            return Err(parse_err(path, lineno, format!("expected key = value, got {line:?}")));
        };
        let flow = &mut settings.flow;
        match key {
            "d" | "dim" => {
                flow.dim = parse_value(path, lineno, key, value)?;
                saw_dim = true;
            }
            "depth" => flow.depth = parse_value(path, lineno, key, value)?,
            "hidden" => flow.hidden = parse_value(path, lineno, key, value)?,
            "freqs" => flow.freqs = parse_value(path, lineno, key, value)?,
            "learning_rate" => flow.learning_rate = parse_value(path, lineno, key, value)?,
            "weight_decay" => flow.weight_decay = parse_value(path, lineno, key, value)?,
            "batch_size" => flow.batch_size = parse_value(path, lineno, key, value)?,
            "total_steps" => flow.total_steps = parse_value(path, lineno, key, value)?,
            "warmup_steps" => flow.warmup_steps = parse_value(path, lineno, key, value)?,
            "seed" => flow.seed = parse_value(path, lineno, key, value)?,
            "geometry_mode" => {
                flow.geometry_mode =
                    GeometryMode::parse(value).map_err(|e| parse_err(path, lineno, e))?;
            }
            "adam_beta1" => flow.adam_beta1 = parse_value(path, lineno, key, value)?,
            "adam_beta2" => flow.adam_beta2 = parse_value(path, lineno, key, value)?,
            "adam_eps" => flow.adam_eps = parse_value(path, lineno, key, value)?,
            "steps" => settings.integrator.steps = parse_value(path, lineno, key, value)?,
            "probes" => settings.integrator.probes = parse_value(path, lineno, key, value)?,
            "probe_distribution" => {
                settings.integrator.probe_distribution =
                    ProbeDistribution::parse(value).map_err(|e| parse_err(path, lineno, e))?;
            }
            "divergence_mode" => {
                settings.integrator.divergence_mode =
                    DivergenceMode::parse(value).map_err(|e| parse_err(path, lineno, e))?;
            }
            "metrics_every" => settings.metrics_every = parse_value(path, lineno, key, value)?,
            "checkpoint_every" => {
                settings.checkpoint_every = parse_value(path, lineno, key, value)?
            }
            other => {
                return Err(parse_err(path, lineno, format!("unknown key {other:?}")));
            }
        }
    }
    if !saw_dim {
        return Err(CliError::input(format!(
            "{}: config must set d",
            path.display()
        )));
    }
    settings.integrator.geometry_mode = settings.flow.geometry_mode;
    Ok(settings)
}

/// Parses a synthetic-data spec file.
pub fn load_synth_spec(path: &Path) -> Result<SyntheticSpec, CliError> {
    let mut kind: Option<SyntheticKind> = None;
    let mut dim: Option<usize> = None;
    let mut count: Option<usize> = None;
    let mut seed: u64 = 0;
    #[derive(Default)]
    struct PendingComponent {
        mean: Option<Vec<f64>>,
        kappa: Option<f64>,
        weight: Option<f64>,
    }
    let mut components: Vec<PendingComponent> = Vec::new();
    let mut in_component = false;

    for (i, raw) in read_lines(path)?.iter().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[component]" {
            components.push(PendingComponent::default());
            in_component = true;
            continue;
        }
        let Some((key, value)) = split_kv(line) else {
            return Err(parse_err(path, lineno, format!("expected key = value, got {line:?}")));
        };
        if in_component {
            let comp = components.last_mut().expect("inside a component section");
            match key {
                "mean" => {
                    let coords: Result<Vec<f64>, _> =
                        value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    comp.mean = Some(coords.map_err(|_| {
                        parse_err(path, lineno, format!("invalid mean vector: {value:?}"))
                    })?);
                }
                "kappa" => comp.kappa = Some(parse_value(path, lineno, key, value)?),
                "weight" => comp.weight = Some(parse_value(path, lineno, key, value)?),
                other => {
                    return Err(parse_err(path, lineno, format!("unknown component key {other:?}")))
                }
            }
        } else {
            match key {
                "kind" => {
                    kind = Some(SyntheticKind::parse(value).map_err(|e| parse_err(path, lineno, e))?)
                }
                "d" | "dim" => dim = Some(parse_value(path, lineno, key, value)?),
                "count" => count = Some(parse_value(path, lineno, key, value)?),
                "seed" => seed = parse_value(path, lineno, key, value)?,
                other => return Err(parse_err(path, lineno, format!("unknown key {other:?}"))),
            }
        }
    }

    let kind = kind.ok_or_else(|| CliError::input("spec must set kind"))?;
    let dim = dim.ok_or_else(|| CliError::input("spec must set d"))?;
    let count = count.ok_or_else(|| CliError::input("spec must set count"))?;
    let mut built = Vec::with_capacity(components.len());
    for (i, comp) in components.into_iter().enumerate() {
        let mean = comp
            .mean
            .ok_or_else(|| CliError::input(format!("component {i} is missing mean")))?;
        let kappa = comp
            .kappa
            .ok_or_else(|| CliError::input(format!("component {i} is missing kappa")))?;
        if kappa < 0.0 {
            return Err(CliError::input(format!(
                "component {i}: kappa must be nonnegative, got {kappa}"
            )));
        }
        let weight = comp
            .weight
            .ok_or_else(|| CliError::input(format!("component {i} is missing weight")))?;
        let mean = SpherePoint::new(mean)
            .map_err(|e| CliError::input(format!("component {i} mean: {e}")))?;
        built.push(VmfComponent {
            mean,
            kappa,
            weight,
        });
    }
    let spec = SyntheticSpec {
        kind,
        dim,
        components: built,
        count,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}
