//! Implementations of the five subcommands.

use crate::config::{self, RunSettings};
use crate::manifest::Manifest;
use crate::CliError;
use sphereflow_core::datastore;
use sphereflow_core::evalkit::{self, EvalTable};
use sphereflow_core::fieldnet;
use sphereflow_core::likelihood::{self, DivergenceMode, IntegratorConfig, ProbeDistribution, ScoreRecord};
use sphereflow_core::sphere::{Modality, SpherePoint};
use sphereflow_core::trainer::{self, FlowConfig, GeometryMode, StepMetrics, TrainHooks, TrainSummary};
use std::io::Write;
use std::path::{Path, PathBuf};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let category = if e.kind() == std::io::ErrorKind::NotFound {
        "input-not-found"
    } else {
        "io"
    };
    CliError {
        category,
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push('.');
    name.push_str(suffix);
    path.with_file_name(name)
}

fn echo_settings(m: &mut Manifest, flow: &FlowConfig, integrator: Option<&IntegratorConfig>) {
    m.set("flow.d", flow.dim)
        .set("flow.depth", flow.depth)
        .set("flow.hidden", flow.hidden)
        .set("flow.freqs", flow.freqs)
        .set("flow.learning_rate", flow.learning_rate)
        .set("flow.weight_decay", flow.weight_decay)
        .set("flow.batch_size", flow.batch_size)
        .set("flow.total_steps", flow.total_steps)
        .set("flow.warmup_steps", flow.warmup_steps)
        .set("flow.seed", flow.seed)
        .set("flow.geometry_mode", flow.geometry_mode.name())
        .set("flow.adam_beta1", flow.adam_beta1)
        .set("flow.adam_beta2", flow.adam_beta2)
        .set("flow.adam_eps", flow.adam_eps);
    if let Some(icfg) = integrator {
        m.set("integrator.steps", icfg.steps)
            .set("integrator.probes", icfg.probes)
            .set("integrator.probe_distribution", icfg.probe_distribution.name())
            .set("integrator.divergence_mode", icfg.divergence_mode.name())
            .set("integrator.geometry_mode", icfg.geometry_mode.name());
    }
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub pairs: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub geometry: Option<String>,
    pub metrics_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub threads: usize,
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let pairs = datastore::load_pairs(&args.pairs)?;

    let mut settings = match &args.config {
        Some(path) => config::load_run_settings(path, Some(pairs.dim()))?,
        None => RunSettings::defaults(pairs.dim()),
    };
    if let Some(seed) = args.seed {
        settings.flow.seed = seed;
    }
    if let Some(steps) = args.total_steps {
        settings.flow.total_steps = steps;
    }
    if let Some(batch) = args.batch_size {
        settings.flow.batch_size = batch;
    }
    if let Some(lr) = args.learning_rate {
        settings.flow.learning_rate = lr;
    }
    if let Some(g) = &args.geometry {
        settings.flow.geometry_mode = GeometryMode::parse(g)?;
    }
    if let Some(every) = args.metrics_every {
        settings.metrics_every = every;
    }
    if let Some(every) = args.checkpoint_every {
        settings.checkpoint_every = every;
    }
    settings.flow.validate()?;
    if settings.flow.dim != pairs.dim() {
        return Err(CliError {
            category: "shape-mismatch",
            code: 2,
            message: format!(
                "config d = {} but pairs file has d = {}",
                settings.flow.dim,
                pairs.dim()
            ),
        });
    }

    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let checkpoint_path = args.out_dir.join("checkpoint.sflc");
    let meta_path = args.out_dir.join("checkpoint.meta");

    let metrics_file =
        std::fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics_writer = std::io::BufWriter::new(metrics_file);
    let mut metrics_io_err: Option<std::io::Error> = None;
    let mut summary: Option<TrainSummary> = None;

    eprintln!(
        "training: d={} steps={} batch={} geometry={} ({} pairs)",
        settings.flow.dim,
        settings.flow.total_steps,
        settings.flow.batch_size,
        settings.flow.geometry_mode.name(),
        pairs.n_pairs()
    );

    let out_dir = args.out_dir.clone();
    let params = {
        let mut hooks = TrainHooks {
            metrics_every: settings.metrics_every,
            on_metrics: Some(Box::new(|m: &StepMetrics| {
                if metrics_io_err.is_none() {
                    let line = format!(
                        "{{\"step\":{},\"loss\":{},\"lr\":{},\"grad_norm\":{}}}",
                        m.step, m.loss, m.lr, m.grad_norm
                    );
                    if let Err(e) = writeln!(metrics_writer, "{line}") {
                        metrics_io_err = Some(e);
                    }
                }
                eprintln!(
                    "step {:>8}  loss {:.6}  lr {:.3e}  grad_norm {:.3e}",
                    m.step, m.loss, m.lr, m.grad_norm
                );
            })),
            checkpoint_every: settings.checkpoint_every,
            on_checkpoint: Some(Box::new(|step, params| {
                let path = out_dir.join(format!("checkpoint-step-{step:08}.sflc"));
                fieldnet::save_checkpoint(params, &path)
            })),
            on_complete: Some(Box::new(|s: &TrainSummary| summary = Some(*s))),
        };
        trainer::fit(&pairs, &settings.flow, &mut hooks)?
    };
    metrics_writer.flush().map_err(|e| io_err(&metrics_path, e))?;
    if let Some(e) = metrics_io_err {
        return Err(io_err(&metrics_path, e));
    }

    fieldnet::save_checkpoint(&params, &checkpoint_path)?;

    let mut meta = Manifest::new("train-meta");
    if let Some(s) = &summary {
        meta.set("step", s.final_step)
            .set("final_loss", s.final_loss)
            .set("rng_word_pos", s.rng_word_pos);
    } else {
        meta.set("step", 0);
    }
    echo_settings(&mut meta, &settings.flow, None);
    meta.write(&meta_path)?;

    let mut manifest = Manifest::new("train");
    manifest
        .set("seed", settings.flow.seed)
        .set("threads", args.threads)
        .set("input.pairs", args.pairs.display())
        .set("output.checkpoint", checkpoint_path.display())
        .set("output.metrics", metrics_path.display())
        .set("metrics_every", settings.metrics_every)
        .set("checkpoint_every", settings.checkpoint_every);
    echo_settings(&mut manifest, &settings.flow, None);
    manifest.write(&args.out_dir.join("manifest.txt"))?;

    eprintln!("wrote {}", checkpoint_path.display());
    Ok(())
}

pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub modality: String,
    pub out: PathBuf,
    pub steps: usize,
    pub probes: usize,
    pub divergence: String,
    pub probe_dist: String,
    pub geometry: String,
    pub seed: u64,
    pub threads: usize,
}

pub fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let params = fieldnet::load_checkpoint(&args.checkpoint)?;
    let set = datastore::load_labeled(&args.embeddings)?;
    if set.dim() != params.dim {
        return Err(CliError {
            category: "shape-mismatch",
            code: 2,
            message: format!(
                "checkpoint d = {} but embeddings have d = {}",
                params.dim,
                set.dim()
            ),
        });
    }
    let modality = Modality::parse(&args.modality)?;
    let icfg = IntegratorConfig {
        steps: args.steps,
        probes: args.probes,
        probe_distribution: ProbeDistribution::parse(&args.probe_dist)?,
        divergence_mode: DivergenceMode::parse(&args.divergence)?,
        geometry_mode: GeometryMode::parse(&args.geometry)?,
    };
    icfg.validate()?;

    let points: Vec<(SpherePoint, Modality)> =
        (0..set.len()).map(|i| (set.point(i), modality)).collect();

    let fwd = params.flops_per_eval();
    let vjps_per_step = match icfg.divergence_mode {
        DivergenceMode::Hutchinson => icfg.probes as u64,
        DivergenceMode::Exact => params.dim as u64,
    };
    let per_point = icfg.steps as u64 * (fwd + vjps_per_step * 3 * fwd);
    eprintln!(
        "scoring {} embeddings (d={}): ~{:.3} MFLOPs per call, {} network params",
        set.len(),
        set.dim(),
        per_point as f64 / 1e6,
        params.num_params()
    );

    let records = likelihood::score_batch(&params, &points, &icfg, args.seed, 0)?;
    let tagged: Vec<(Modality, ScoreRecord)> =
        records.into_iter().map(|r| (modality, r)).collect();
    likelihood::write_scores(&args.out, &tagged)?;

    let mut manifest = Manifest::new("score");
    manifest
        .set("seed", args.seed)
        .set("threads", args.threads)
        .set("modality", modality)
        .set("input.checkpoint", args.checkpoint.display())
        .set("input.embeddings", args.embeddings.display())
        .set("output.scores", args.out.display())
        .set("integrator.steps", icfg.steps)
        .set("integrator.probes", icfg.probes)
        .set("integrator.probe_distribution", icfg.probe_distribution.name())
        .set("integrator.divergence_mode", icfg.divergence_mode.name())
        .set("integrator.geometry_mode", icfg.geometry_mode.name());
    manifest.write(&sidecar(&args.out, "manifest"))?;

    eprintln!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_eval(
    scores: PathBuf,
    labels: PathBuf,
    mode: String,
    out_dir: PathBuf,
    grid_step: f64,
    threads: usize,
) -> Result<(), CliError> {
    let rows = likelihood::read_scores(&scores)?;
    let set = datastore::load_labeled(&labels)?;
    if rows.len() != set.len() {
        return Err(CliError {
            category: "shape-mismatch",
            code: 2,
            message: format!(
                "score file has {} rows but labels file has {}",
                rows.len(),
                set.len()
            ),
        });
    }
    if rows.is_empty() {
        return Err(CliError::input("score file is empty"));
    }
    let uncertainty: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();

    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metric_lines: Vec<String> = Vec::new();

    match mode.as_str() {
        "selective" => {
            let correctness = set.correctness().ok_or_else(|| {
                CliError::input("selective mode needs correctness bits in the labels file")
            })?;
            if !(0.0..=0.9).contains(&grid_step) || grid_step <= 0.0 {
                return Err(CliError::input("grid step must lie in (0, 0.9]"));
            }
            let mut grid = Vec::new();
            let mut r = 0.0;
            while r <= 0.90 + 1e-12 {
                grid.push(r);
                r += grid_step;
            }
            let table = EvalTable::selective(uncertainty, correctness.to_vec())?;
            let curve = evalkit::rejection_curve(&table, &grid)?;
            let acc90 = evalkit::acc_at_rejection(&table, 0.90)?;
            let s = evalkit::spearman_s(&curve)?;

            metric_lines.push(evalkit::metric_line("base_accuracy", curve.accuracies[0]));
            metric_lines.push(evalkit::metric_line("acc_at_rejection_0.90", acc90));
            metric_lines.push(evalkit::metric_line("spearman_s", s.value));
            metric_lines.push(evalkit::metric_line(
                "spearman_degenerate",
                s.degenerate as u8 as f64,
            ));

            let csv_path = out_dir.join("rejection_curve.csv");
            std::fs::write(&csv_path, evalkit::curve_csv(&curve))
                .map_err(|e| io_err(&csv_path, e))?;
            eprintln!(
                "selective: base acc {:.4}, acc@90% rejection {:.4}, S {:.4}",
                curve.accuracies[0], acc90, s.value
            );
        }
        "ood" => {
            let flags: Vec<bool> = set.labels().iter().map(|&l| l != 0).collect();
            let table = EvalTable::ood(uncertainty, flags)?;
            let rp = evalkit::roc_pr(&table)?;
            metric_lines.push(evalkit::metric_line("auroc", rp.auroc));
            metric_lines.push(evalkit::metric_line("aupr", rp.aupr));

            let roc_path = out_dir.join("roc_curve.csv");
            std::fs::write(&roc_path, evalkit::roc_csv(&rp)).map_err(|e| io_err(&roc_path, e))?;
            let pr_path = out_dir.join("pr_curve.csv");
            std::fs::write(&pr_path, evalkit::pr_csv(&rp)).map_err(|e| io_err(&pr_path, e))?;
            eprintln!("ood: AUROC {:.4}, AUPR {:.4}", rp.auroc, rp.aupr);
        }
        other => {
            return Err(CliError::input(format!(
                "mode must be selective or ood, got {other:?}"
            )))
        }
    }

    std::fs::write(&metrics_path, metric_lines.join("\n") + "\n")
        .map_err(|e| io_err(&metrics_path, e))?;

    let mut manifest = Manifest::new("eval");
    manifest
        .set("threads", threads)
        .set("mode", &mode)
        .set("grid_step", grid_step)
        .set("input.scores", scores.display())
        .set("input.labels", labels.display())
        .set("output.metrics", metrics_path.display());
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(())
}

pub fn cmd_synth(
    spec_path: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    as_pairs: bool,
    threads: usize,
) -> Result<(), CliError> {
    let mut spec = config::load_synth_spec(&spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let count = if as_pairs {
        let pairs = datastore::generate_synthetic_pairs(&spec)?;
        datastore::save_pairs(&pairs, &out)?;
        pairs.n_pairs()
    } else {
        let set = datastore::generate_synthetic(&spec)?;
        datastore::save_labeled(&set, &out)?;
        set.len()
    };

    let mut manifest = Manifest::new("synth");
    manifest
        .set("seed", spec.seed)
        .set("threads", threads)
        .set("kind", format!("{:?}", spec.kind).to_lowercase())
        .set("d", spec.dim)
        .set("count", spec.count)
        .set("as_pairs", as_pairs)
        .set("input.spec", spec_path.display())
        .set("output.embeddings", out.display());
    for (i, comp) in spec.components.iter().enumerate() {
        manifest.set(
            &format!("component.{i}"),
            format!("kappa={} weight={}", comp.kappa, comp.weight),
        );
    }
    manifest.write(&sidecar(&out, "manifest"))?;

    eprintln!(
        "wrote {count} {} (d={}) to {}",
        if as_pairs { "pairs" } else { "points" },
        spec.dim,
        out.display()
    );
    Ok(())
}

pub fn cmd_curate(
    scores: PathBuf,
    top_k: Option<usize>,
    fraction: Option<f64>,
    out: PathBuf,
    threads: usize,
) -> Result<(), CliError> {
    let rows = likelihood::read_scores(&scores)?;
    let k = match (top_k, fraction) {
        (Some(k), None) => k,
        (None, Some(f)) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(CliError::input("fraction must lie in [0, 1]"));
            }
            (f * rows.len() as f64).ceil() as usize
        }
        _ => {
            return Err(CliError::input(
                "exactly one of --top-k or --fraction is required",
            ))
        }
    };
    let uncertainty: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();
    let positions = evalkit::rank_descending(&uncertainty, k)?;

    let mut body = String::new();
    for p in &positions {
        body.push_str(&rows[*p].index.to_string());
        body.push('\n');
    }
    std::fs::write(&out, body).map_err(|e| io_err(&out, e))?;

    let mut manifest = Manifest::new("curate");
    manifest
        .set("threads", threads)
        .set("k", k)
        .set("input.scores", scores.display())
        .set("output.ranking", out.display());
    manifest.write(&sidecar(&out, "manifest"))?;

    eprintln!("wrote {} ids to {}", positions.len(), out.display());
    Ok(())
}
