//! Ablation batteries: the component-toggle table and the
//! orthogonality-variant comparison, run over several seeds.

use crate::error::Result;
use crate::evalkit::EvalReport;
use crate::model::ProjectorKind;
use crate::parallel;
use crate::subspace;
use crate::synthdata::{generate, GenConfig};
use crate::trainer::{run_experiment, Toggles, TrainConfig};
use serde::Serialize;

/// Component-toggle rows: each experiment adds one mechanism.
pub fn component_rows() -> Vec<(String, Toggles)> {
    let t = |kl, ortho, sr, se, reweight| Toggles {
        kl,
        ortho,
        sr,
        se,
        reweight,
    };
    vec![
        ("exp1_baseline".into(), t(false, false, false, false, false)),
        ("exp2_kl".into(), t(true, false, false, false, false)),
        ("exp3_kl_sr".into(), t(true, false, true, false, false)),
        ("exp4_kl_sr_se".into(), t(true, false, true, true, false)),
        ("exp5_kl_ortho_sr_se".into(), t(true, true, true, true, false)),
        ("exp6_full".into(), t(true, true, true, true, true)),
    ]
}

/// Orthogonality-variant rows: projector layout x orthogonality pressure,
/// everything else at the full objective.
pub fn projector_rows(m: usize) -> Vec<(String, ProjectorKind, bool)> {
    let m2 = 2 * m;
    vec![
        ("proj2_plain".into(), ProjectorKind::Two { m2 }, false),
        ("proj2_cross".into(), ProjectorKind::Two { m2 }, true),
        ("proj1_plain".into(), ProjectorKind::Single, false),
        ("proj1_ortho".into(), ProjectorKind::Single, true),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    pub eval: EvalReport,
    pub final_ortho: f64,
    pub final_cos: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub component_runs: Vec<AblationRun>,
    pub projector_runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn runs_of<'a>(&'a self, row: &str) -> Vec<&'a AblationRun> {
        self.component_runs
            .iter()
            .chain(&self.projector_runs)
            .filter(|r| r.row == row)
            .collect()
    }

    pub fn mean_map(&self, row: &str) -> f64 {
        let runs = self.runs_of(row);
        runs.iter().map(|r| r.eval.map).sum::<f64>() / runs.len().max(1) as f64
    }

    pub fn mean_cos(&self, row: &str) -> f64 {
        let runs = self.runs_of(row);
        runs.iter().map(|r| r.final_cos).sum::<f64>() / runs.len().max(1) as f64
    }

    fn render_rows(out: &mut String, title: &str, rows: &[String], runs: &[AblationRun]) {
        use std::fmt::Write as _;
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "row", "mean_map", "mean_cmc1", "mean_r2sr", "mean_r2se", "mean_cos"
        );
        for row in rows {
            let picked: Vec<&AblationRun> = runs.iter().filter(|r| &r.row == row).collect();
            let n = picked.len().max(1) as f64;
            let mean = |f: &dyn Fn(&AblationRun) -> f64| picked.iter().map(|r| f(r)).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "{:<22} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                row,
                mean(&|r| r.eval.map),
                mean(&|r| r.eval.cmc1),
                mean(&|r| r.eval.r2_zsr),
                mean(&|r| r.eval.r2_zse),
                mean(&|r| r.final_cos),
            );
        }
    }

    /// Comparison tables as structured text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let rows: Vec<String> = component_rows().into_iter().map(|(n, _)| n).collect();
        Self::render_rows(&mut out, "component ablation", &rows, &self.component_runs);
        out.push('\n');
        let rows: Vec<String> = self
            .projector_runs
            .iter()
            .map(|r| r.row.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::render_rows(&mut out, "orthogonality variants", &rows, &self.projector_runs);
        out
    }
}

fn one_run(
    base: &TrainConfig,
    gen: &GenConfig,
    row: &str,
    toggles: Toggles,
    projector: ProjectorKind,
    seed: u64,
) -> Result<AblationRun> {
    let dataset = generate(gen, seed)?;
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.toggles = toggles;
    cfg.model.projector = projector;
    cfg.model.shared_se_head =
        base.model.shared_se_head && matches!(projector, ProjectorKind::Single);
    cfg.eval_every = cfg.epochs; // final evaluation only
    let out = run_experiment(&cfg, &dataset)?;
    let p = &out.state.model.p;
    Ok(AblationRun {
        row: row.into(),
        seed,
        eval: out.final_eval,
        final_ortho: subspace::ortho_penalty_value(p),
        final_cos: subspace::mean_pairwise_abs_cosine(p),
    })
}

/// Run both batteries over the given seeds; runs are independent and execute
/// in parallel, collected in a fixed order.
pub fn run_battery(base: &TrainConfig, gen: &GenConfig, seeds: &[u64]) -> Result<AblationReport> {
    let mut component_jobs = Vec::new();
    for (row, toggles) in component_rows() {
        for &seed in seeds {
            component_jobs.push((row.clone(), toggles, seed));
        }
    }
    let component_runs: Vec<Result<AblationRun>> =
        parallel::map_slice(&component_jobs, |(row, toggles, seed)| {
            one_run(base, gen, row, *toggles, base.model.projector, *seed)
        });

    let mut projector_jobs = Vec::new();
    for (row, kind, ortho) in projector_rows(base.model.m) {
        for &seed in seeds {
            projector_jobs.push((row.clone(), kind, ortho, seed));
        }
    }
    let projector_runs: Vec<Result<AblationRun>> =
        parallel::map_slice(&projector_jobs, |(row, kind, ortho, seed)| {
            let toggles = Toggles {
                ortho: *ortho,
                ..Toggles::default()
            };
            one_run(base, gen, row, toggles, *kind, *seed)
        });

    Ok(AblationReport {
        component_runs: component_runs.into_iter().collect::<Result<Vec<_>>>()?,
        projector_runs: projector_runs.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Training budget for ablation batteries: short runs with a compressed
/// decay schedule, long enough for the orthogonality pressure to settle.
pub fn battery_config(base_model: crate::model::ModelConfig) -> TrainConfig {
    TrainConfig {
        model: base_model,
        epochs: 13,
        steps_per_epoch: 40,
        lr_decay_epochs: vec![7, 11],
        eval_every: 13,
        ..TrainConfig::default()
    }
}
