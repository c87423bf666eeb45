//! The optimization loop: composite objective with gradient-norm
//! re-weighting, SGD with momentum on a two-slot learning-rate schedule,
//! EMA teacher maintenance and per-epoch evaluation.

use crate::array::{self, Array};
use crate::autodiff::{Binding, NodeId, Params, Tape};
use crate::balance::{reweight, AlphaPair};
use crate::error::{Error, Result};
use crate::evalkit::{retrieval_eval, shape_probe_grouped, EvalReport};
use crate::losses::{self, Composed, LossBundle, LossTerms};
use crate::model::{
    apply_stat_updates, ema_update, BoundModel, EmaState, Mode, Model, ModelConfig,
    ProjectorKind, StatUpdate, View, DEFAULT_EMA_DECAY,
};
use crate::subspace;
use crate::synthdata::{pk_batch, Batch, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Loss-component switches for the ablation battery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub kl: bool,
    pub ortho: bool,
    pub sr: bool,
    pub se: bool,
    pub reweight: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            kl: true,
            ortho: true,
            sr: true,
            se: true,
            reweight: true,
        }
    }
}

impl Toggles {
    pub fn baseline() -> Self {
        Toggles {
            kl: false,
            ortho: false,
            sr: false,
            se: false,
            reweight: false,
        }
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "kl" => self.kl = on,
            "ortho" => self.ortho = on,
            "sr" => self.sr = on,
            "se" => self.se = on,
            "reweight" => self.reweight = on,
            other => return Err(Error::Invalid(format!("unknown toggle `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_random: f64,
    pub lr_pretrained: f64,
    pub momentum: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub triplet_margin: f64,
    pub ema_decay: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub toggles: Toggles,
    pub seed: u64,
    /// Epochs between evaluations; the final epoch always evaluates.
    pub eval_every: usize,
    /// Projector learning rate as a fraction of the base rate. The L1
    /// orthogonality penalty has a constant-magnitude subgradient, so the
    /// projector dithers at a scale proportional to its learning rate; a
    /// smaller rate lets the penalty settle while the encoder aligns to the
    /// subspace.
    pub projector_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 100,
            steps_per_epoch: 50,
            lr_random: 0.1,
            lr_pretrained: 0.01,
            momentum: 0.9,
            lr_decay_epochs: vec![20, 50],
            lr_decay_factor: 0.1,
            triplet_margin: losses::DEFAULT_TRIPLET_MARGIN,
            ema_decay: DEFAULT_EMA_DECAY,
            batch_p: 8,
            batch_k: 4,
            toggles: Toggles::default(),
            seed: 0,
            eval_every: 1,
            projector_lr_scale: 0.008,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_p == 0 || self.batch_k == 0 {
            return Err(Error::Invalid("epochs, steps and batch sizes must be positive".into()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invalid(format!(
                "decay epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if self.batch_p < 2 {
            return Err(Error::Invalid("need at least 2 identities per batch for triplets".into()));
        }
        Ok(())
    }
}

/// Step learning-rate schedule: each configured epoch multiplies both rates
/// by the decay factor.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let mut factor = 1.0;
    for &e in &cfg.lr_decay_epochs {
        if epoch >= e {
            factor *= cfg.lr_decay_factor;
        }
    }
    (cfg.lr_random * factor, cfg.lr_pretrained * factor)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub ema: EmaState,
    pub momenta: Params,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg.model, &mut rng);
        let ema = EmaState::new(&model, cfg.ema_decay)?;
        let mut momenta = Params::new();
        for (name, array, meta) in model.tensors() {
            if meta.trainable {
                momenta.insert(&name, Array::zeros(array.shape().to_vec()));
            }
        }
        Ok(TrainState {
            model,
            ema,
            momenta,
            epoch: 0,
            step: 0,
            rng,
        })
    }
}

/// Cross-modal row matching for the mutual losses, drawn fresh each step:
/// row `i` of one modality pairs with row `pairing[i]` of the other, same
/// identity.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub pair12: Vec<usize>,
    pub pair21: Vec<usize>,
}

pub fn make_plan<R: Rng>(batch: &Batch, k: usize, rng: &mut R) -> StepPlan {
    let half = batch.size() / 2;
    let blocks = half / k;
    let mut draw = |_: ()| {
        let mut pairing = vec![0usize; half];
        for b in 0..blocks {
            let mut perm: Vec<usize> = (0..k).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(rng);
            for (j, &pj) in perm.iter().enumerate() {
                pairing[b * k + j] = b * k + pj;
            }
        }
        pairing
    };
    StepPlan {
        pair12: draw(()),
        pair21: draw(()),
    }
}

/// Everything the step objective produces besides the loss terms.
pub struct StepParts {
    pub terms: LossTerms,
    /// Integrated representations of both modalities, concatenated (2PK, n).
    pub z_all: NodeId,
    pub sr_sum: NodeId,
    pub se_sum: NodeId,
    pub updates: Vec<StatUpdate>,
}

/// Build every loss term of the step objective on the tape. Teacher targets
/// are plain-array forwards (never on the tape); disabled components enter
/// as constant zeros.
pub fn build_step_terms(
    tape: &mut Tape,
    binding: &Binding,
    student: &Model,
    teacher: &Model,
    batch: &Batch,
    plan: &StepPlan,
    cfg: &TrainConfig,
) -> Result<StepParts> {
    let bound = BoundModel::new(student, binding);
    let mut updates = Vec::new();
    let toggles = cfg.toggles;
    let half = batch.size() / 2;
    let zero = tape.constant(Array::scalar(0.0))?;

    let x1 = tape.constant(batch.x1.clone())?;
    let x2 = tape.constant(batch.x2.clone())?;
    let z1 = bound.encode(tape, x1, View::Visible, Mode::Train, &mut updates)?;
    let z2 = bound.encode(tape, x2, View::Infrared, Mode::Train, &mut updates)?;
    let z_all = tape.concat_rows(z1, z2)?;

    // integrated objective
    let n1 = bound.neck(tape, z1, View::Visible, Mode::Train, &mut updates)?;
    let n2 = bound.neck(tape, z2, View::Infrared, Mode::Train, &mut updates)?;
    let logits1 = bound.classify_g(tape, n1)?;
    let logits2 = bound.classify_g(tape, n2)?;
    let logits_all = tape.concat_rows(logits1, logits2)?;
    let id = losses::hard_ce(tape, logits_all, &batch.labels)?;
    let triplet = losses::triplet_batch_hard(tape, z_all, &batch.labels, cfg.triplet_margin)?;
    let kl = if toggles.kl {
        let t12 = tape.gather_rows(logits2, &plan.pair12)?;
        let t21 = tape.gather_rows(logits1, &plan.pair21)?;
        let a = losses::soft_ce(tape, logits1, t12)?;
        let b = losses::soft_ce(tape, logits2, t21)?;
        let s = tape.add(a, b)?;
        tape.scale(s, 0.5)?
    } else {
        zero
    };

    // decomposition
    let need_split = toggles.sr || toggles.se;
    let p = bound.projector();
    let (z_sr, z_se) = if need_split {
        match student.cfg.projector {
            ProjectorKind::Single => {
                let (sr, se) = subspace::decompose(tape, z_all, p)?;
                (Some(sr), Some(se))
            }
            ProjectorKind::Two { .. } => {
                let p2 = bound.projector2().expect("two-projector model");
                let sr = tape.matmul(z_all, p)?;
                let se = tape.matmul(z_all, p2)?;
                (Some(sr), Some(se))
            }
        }
    } else {
        (None, None)
    };

    // shape-related objective plus the shape classifier
    let (srmse, srkl, sid) = if toggles.sr {
        let z_sr = z_sr.expect("sr enabled implies decomposition");
        // student shape path through the teacher's projector columns
        let xs = tape.constant(batch.xs.clone())?;
        let h_s = bound.encode(tape, xs, View::Shape, Mode::Train, &mut updates)?;
        let p_teacher = tape.constant(teacher.p.clone())?;
        let z_s_student = tape.matmul(h_s, p_teacher)?;
        let sid_logits = bound.classify_gs(tape, z_s_student)?;
        let sid = losses::hard_ce(tape, sid_logits, &batch.labels)?;
        // teacher targets, fully off-tape
        let h_s_teacher = teacher.encode_plain(&batch.xs, View::Shape)?;
        let z_s_teacher = array::matmul(&h_s_teacher, &teacher.p)?;
        let target_logits =
            teacher.classify_plain(&z_s_teacher, &teacher.gs_w, &teacher.gs_b)?;
        let z_s_const = tape.constant(z_s_teacher)?;
        let srmse = losses::srmse(tape, z_sr, z_s_const)?;
        let student_sr_logits = bound.classify_gs(tape, z_sr)?;
        let target_const = tape.constant(target_logits)?;
        let srkl = losses::soft_ce(tape, student_sr_logits, target_const)?;
        (srmse, srkl, sid)
    } else {
        (zero, zero, zero)
    };

    // shape-erased objective
    let (seid, sekl) = if toggles.se {
        let z_se = z_se.expect("se enabled implies decomposition");
        let se_logits = bound.classify_se(tape, z_se)?;
        let seid = losses::hard_ce(tape, se_logits, &batch.labels)?;
        let rows1: Vec<usize> = (0..half).collect();
        let rows2: Vec<usize> = (half..2 * half).collect();
        let l1 = tape.gather_rows(se_logits, &rows1)?;
        let l2 = tape.gather_rows(se_logits, &rows2)?;
        let t12 = tape.gather_rows(l2, &plan.pair12)?;
        let t21 = tape.gather_rows(l1, &plan.pair21)?;
        let a = losses::soft_ce(tape, l1, t12)?;
        let b = losses::soft_ce(tape, l2, t21)?;
        let s = tape.add(a, b)?;
        let sekl = tape.scale(s, 0.5)?;
        (seid, sekl)
    } else {
        (zero, zero)
    };

    let ortho = if toggles.ortho {
        match student.cfg.projector {
            ProjectorKind::Single => subspace::ortho_penalty(tape, p)?,
            ProjectorKind::Two { .. } => {
                let p2 = bound.projector2().expect("two-projector model");
                subspace::cross_penalty(tape, p, p2)?
            }
        }
    } else {
        zero
    };

    let sr_sum = tape.add(srmse, srkl)?;
    let se_sum = tape.add(seid, sekl)?;
    Ok(StepParts {
        terms: LossTerms {
            id,
            triplet,
            kl,
            seid,
            sekl,
            srmse,
            srkl,
            sid,
            ortho,
        },
        z_all,
        sr_sum,
        se_sum,
        updates,
    })
}

/// Representation-level gradient norms of the two objectives, turned into
/// weights. Falls back to an even split when re-weighting is off or both
/// objectives are absent.
pub fn compute_alpha(tape: &Tape, parts: &StepParts, cfg: &TrainConfig) -> Result<AlphaPair> {
    if !cfg.toggles.reweight || !(cfg.toggles.sr || cfg.toggles.se) {
        return Ok(AlphaPair::even());
    }
    let g_sr = tape.backward(parts.sr_sum)?.wrt_or_zeros(tape, parts.z_all);
    let g_se = tape.backward(parts.se_sum)?.wrt_or_zeros(tape, parts.z_all);
    reweight(&g_sr, &g_se)
}

#[derive(Clone, Debug, Serialize)]
pub struct StepDiagnostics {
    pub epoch: usize,
    pub step: usize,
    pub lr_random: f64,
    pub lr_pretrained: f64,
    pub loss: LossBundle,
    /// Current ortho penalty of the student projector.
    pub ortho_diag: f64,
    /// Mean pairwise |cosine| among projector columns.
    pub cos_diag: f64,
}

/// One optimization step: forward all views, compose the objective with the
/// step's weights, update the student with SGD momentum, fold batch
/// statistics into the running stats, then advance the teacher.
pub fn train_step(
    batch: &Batch,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<StepDiagnostics> {
    let plan = make_plan(batch, cfg.batch_k, &mut state.rng);
    let params = state.model.trainable_params();
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        ids.push((name.to_string(), tape.param(value.clone())?));
    }
    let binding = Binding::from_pairs(ids);
    let parts = build_step_terms(
        &mut tape,
        &binding,
        &state.model,
        &state.ema.teacher,
        batch,
        &plan,
        cfg,
    )?;
    let alpha = compute_alpha(&tape, &parts, cfg)?;
    let composed: Composed = losses::compose(&mut tape, &parts.terms, alpha.alpha_sr, alpha.alpha_se)?;
    if !composed.bundle.total.is_finite() {
        return Err(Error::NonFiniteComponent("total".into()));
    }
    let grads = tape.backward(composed.total)?;

    let (lr_random, lr_pretrained) = lr_at(state.epoch, cfg);
    let binding_ref = &binding;
    // SGD momentum: v <- mu v + g; p <- p - lr v
    for (name, tensor, meta) in state.model.tensors_mut() {
        if !meta.trainable {
            continue;
        }
        let node = binding_ref.get(&name);
        let g = grads.wrt_or_zeros(&tape, node);
        let v = state
            .momenta
            .get_mut(&name)
            .expect("momentum buffer exists");
        let mut lr = match meta.slot {
            crate::model::Slot::Pretrained => lr_pretrained,
            crate::model::Slot::Random => lr_random,
        };
        if name.starts_with("proj.") {
            lr *= cfg.projector_lr_scale;
        }
        for ((vi, ti), &gi) in v
            .data_mut()
            .iter_mut()
            .zip(tensor.data_mut())
            .zip(g.data())
        {
            *vi = cfg.momentum * *vi + gi;
            *ti -= lr * *vi;
        }
    }
    apply_stat_updates(&mut state.model, &parts.updates);
    ema_update(&mut state.ema, &state.model)?;
    state.step += 1;

    Ok(StepDiagnostics {
        epoch: state.epoch,
        step: state.step,
        lr_random,
        lr_pretrained,
        loss: composed.bundle,
        ortho_diag: subspace::ortho_penalty_value(&state.model.p),
        cos_diag: subspace::mean_pairwise_abs_cosine(&state.model.p),
    })
}

/// Teacher-model features for a sample set: the post-neck integrated
/// feature for retrieval plus the decomposed pre-neck components.
pub struct TestFeatures {
    pub z_neck: Array,
    pub z_sr: Array,
    pub z_se: Array,
    pub labels: Vec<usize>,
    pub shape_codes: Array,
}

pub fn teacher_features(teacher: &Model, dataset: &Dataset, modality: u8) -> Result<TestFeatures> {
    let test_labels = &dataset.test_identities;
    let (x, labels) = dataset.modality_matrix(test_labels, modality);
    let view = if modality == 1 {
        View::Visible
    } else {
        View::Infrared
    };
    let z = teacher.encode_plain(&x, view)?;
    let z_neck = teacher.neck_plain(&z, view);
    let (z_sr, z_se) = match teacher.cfg.projector {
        ProjectorKind::Single => subspace::decompose_plain(&z, &teacher.p)?,
        ProjectorKind::Two { .. } => {
            let p2 = teacher.p2.as_ref().expect("two-projector model");
            (array::matmul(&z, &teacher.p)?, array::matmul(&z, p2)?)
        }
    };
    let d_shape = dataset.config.d_shape;
    let mut codes = Vec::with_capacity(labels.len() * d_shape);
    for &label in &labels {
        codes.extend_from_slice(&dataset.identities[label].shape_code);
    }
    let shape_codes = Array::from_vec(vec![labels.len(), d_shape], codes)?;
    Ok(TestFeatures {
        z_neck,
        z_sr,
        z_se,
        labels,
        shape_codes,
    })
}

/// Evaluate the teacher on the held-out identities: infrared queries against
/// a visible gallery, plus shape-probe diagnostics on all test samples.
pub fn evaluate(teacher: &Model, dataset: &Dataset, probe_seed: u64) -> Result<EvalReport> {
    let gallery = teacher_features(teacher, dataset, 1)?;
    let query = teacher_features(teacher, dataset, 2)?;

    let main = retrieval_eval(&query.z_neck, &query.labels, &gallery.z_neck, &gallery.labels)?;
    let sr = retrieval_eval(&query.z_sr, &query.labels, &gallery.z_sr, &gallery.labels)?;
    let se = retrieval_eval(&query.z_se, &query.labels, &gallery.z_se, &gallery.labels)?;

    let stack = |a: &Array, b: &Array| -> Array {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Array::from_vec(vec![a.rows() + b.rows(), a.cols()], data).unwrap()
    };
    let pre_neck_q = |f: &TestFeatures| -> Array {
        // probe the raw decomposed spaces; the integrated probe uses z_neck
        f.z_neck.clone()
    };
    let z_probe_feats = stack(&pre_neck_q(&gallery), &pre_neck_q(&query));
    let zsr_feats = stack(&gallery.z_sr, &query.z_sr);
    let zse_feats = stack(&gallery.z_se, &query.z_se);
    let codes = stack(&gallery.shape_codes, &query.shape_codes);
    let mut groups = gallery.labels.clone();
    groups.extend_from_slice(&query.labels);

    // identity-grouped probe split: only shape structure that generalizes to
    // unseen identities counts as shape content
    Ok(EvalReport {
        cmc1: main.cmc_at(1),
        cmc5: main.cmc_at(5),
        cmc10: main.cmc_at(10),
        map: main.map,
        map_zsr: sr.map,
        map_zse: se.map,
        r2_z: shape_probe_grouped(&z_probe_feats, &codes, &groups, probe_seed)?,
        r2_zsr: shape_probe_grouped(&zsr_feats, &codes, &groups, probe_seed)?,
        r2_zse: shape_probe_grouped(&zse_feats, &codes, &groups, probe_seed)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBundle,
    pub eval: Option<EvalReport>,
}

/// Full run output: the metrics stream as serialized lines plus final
/// artifacts, kept in memory so callers decide what to persist.
pub struct RunOutput {
    pub metrics_lines: Vec<String>,
    pub final_eval: EvalReport,
    pub state: TrainState,
}

fn mean_bundle(bundles: &[LossBundle]) -> LossBundle {
    let mut acc = LossBundle::default();
    let n = bundles.len().max(1) as f64;
    for b in bundles {
        acc.id += b.id / n;
        acc.triplet += b.triplet / n;
        acc.kl += b.kl / n;
        acc.seid += b.seid / n;
        acc.sekl += b.sekl / n;
        acc.srmse += b.srmse / n;
        acc.srkl += b.srkl / n;
        acc.sid += b.sid / n;
        acc.ortho += b.ortho / n;
        acc.sr += b.sr / n;
        acc.se += b.se / n;
        acc.int += b.int / n;
        acc.total += b.total / n;
        acc.alpha_sr += b.alpha_sr / n;
        acc.alpha_se += b.alpha_se / n;
    }
    acc
}

/// Train on the given dataset, emitting one metrics line per step and one
/// per epoch; deterministic given the config seed.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.model.classes != dataset.num_train_classes() {
        return Err(Error::Invalid(format!(
            "classifier width {} does not match {} train identities",
            cfg.model.classes,
            dataset.num_train_classes()
        )));
    }
    if cfg.model.input_dim != dataset.config.input_dim {
        return Err(Error::Invalid(format!(
            "model input_dim {} does not match dataset input_dim {}",
            cfg.model.input_dim, dataset.config.input_dim
        )));
    }
    let mut state = TrainState::new(cfg)?;
    let mut lines = Vec::new();
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut bundles = Vec::with_capacity(cfg.steps_per_epoch);
        for _ in 0..cfg.steps_per_epoch {
            let batch = pk_batch(dataset, cfg.batch_p, cfg.batch_k, &mut state.rng)?;
            let diag = train_step(&batch, &mut state, cfg)?;
            bundles.push(diag.loss);
            lines.push(serde_json::to_string(&diag).expect("diagnostics serialize"));
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        let eval = if last_epoch || (epoch + 1) % cfg.eval_every.max(1) == 0 {
            let report = evaluate(&state.ema.teacher, dataset, cfg.seed)?;
            if last_epoch {
                final_eval = Some(report);
            }
            Some(report)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            mean_loss: mean_bundle(&bundles),
            eval,
        };
        lines.push(serde_json::to_string(&record).expect("epoch record serialize"));
    }
    Ok(RunOutput {
        metrics_lines: lines,
        final_eval: final_eval.expect("at least one epoch"),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::value_and_grad;
    use crate::synthdata::{generate, GenConfig};

    fn tiny_gen() -> GenConfig {
        GenConfig {
            identities: 8,
            test_identities: 2,
            samples_per_modality: 6,
            input_dim: 8,
            d_shape: 3,
            d_app: 3,
            ..GenConfig::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                input_dim: 8,
                hidden: 10,
                n: 6,
                m: 2,
                classes: 6,
                projector: ProjectorKind::Single,
                shared_se_head: true,
            },
            epochs: 1,
            steps_per_epoch: 2,
            batch_p: 3,
            batch_k: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_reference_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), (0.1, 0.01));
        assert_eq!(lr_at(19, &cfg), (0.1, 0.01));
        let (a, b) = lr_at(20, &cfg);
        assert!((a - 0.01).abs() < 1e-15 && (b - 0.001).abs() < 1e-15);
        let (a, b) = lr_at(99, &cfg);
        assert!((a - 0.001).abs() < 1e-15 && (b - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn decay_epochs_must_increase() {
        let cfg = TrainConfig {
            lr_decay_epochs: vec![50, 20],
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_step_matches_hand_rolled_sgd() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 3).unwrap();
        let cfg = tiny_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let mut rng_probe = state.rng.clone();
        let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
        let batch_probe = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut rng_probe).unwrap();

        // replicate the plan and weights the step will draw
        let mut plan_rng = state.rng.clone();
        let plan = make_plan(&batch_probe, cfg.batch_k, &mut plan_rng);
        let before = state.model.clone();
        let teacher = state.ema.teacher.clone();
        let params = before.trainable_params();

        // alpha exactly as the step computes it
        let alpha = {
            let mut tape = Tape::new();
            let mut ids = Vec::new();
            for (name, value) in params.iter() {
                ids.push((name.to_string(), tape.param(value.clone()).unwrap()));
            }
            let binding = Binding::from_pairs(ids);
            let parts =
                build_step_terms(&mut tape, &binding, &before, &teacher, &batch_probe, &plan, &cfg)
                    .unwrap();
            compute_alpha(&tape, &parts, &cfg).unwrap()
        };

        let (_, grads) = value_and_grad(
            |tape, binding| {
                let parts =
                    build_step_terms(tape, binding, &before, &teacher, &batch_probe, &plan, &cfg)?;
                Ok(losses::compose(tape, &parts.terms, alpha.alpha_sr, alpha.alpha_se)?.total)
            },
            &params,
        )
        .unwrap();

        let diag = train_step(&batch, &mut state, &cfg).unwrap();
        assert_eq!(diag.loss.alpha_sr, alpha.alpha_sr);

        let (lr_random, lr_pretrained) = lr_at(0, &cfg);
        for (name, tensor, meta) in before.tensors() {
            if !meta.trainable {
                continue;
            }
            let mut lr = match meta.slot {
                crate::model::Slot::Pretrained => lr_pretrained,
                crate::model::Slot::Random => lr_random,
            };
            if name.starts_with("proj.") {
                lr *= cfg.projector_lr_scale;
            }
            let g = grads.get(&name).unwrap();
            let updated = state
                .model
                .tensors()
                .into_iter()
                .find(|(n, _, _)| *n == name)
                .unwrap()
                .1
                .clone();
            for ((&x0, &gi), &x1) in tensor.data().iter().zip(g.data()).zip(updated.data()) {
                // fresh momentum buffers: v = g
                let want = x0 - lr * gi;
                assert!(
                    (x1 - want).abs() < 1e-10,
                    "{name}: got {x1}, want {want}"
                );
            }
        }
    }

    #[test]
    fn teacher_only_moves_by_ema() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 5).unwrap();
        let cfg = tiny_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let student_before = state.model.clone();
        let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
        train_step(&batch, &mut state, &cfg).unwrap();
        // teacher after one step must equal decay*teacher0 + (1-decay)*student1
        for (((_, t1, _), (_, t0, _)), (_, s1, _)) in state
            .ema
            .teacher
            .tensors()
            .iter()
            .zip(student_before.tensors().iter())
            .zip(state.model.tensors().iter())
        {
            for ((&a, &b), &c) in t1.data().iter().zip(t0.data()).zip(s1.data()) {
                let want = cfg.ema_decay * b + (1.0 - cfg.ema_decay) * c;
                assert!((a - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_toggles_reduce_to_id_plus_triplet() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 7).unwrap();
        let cfg = TrainConfig {
            toggles: Toggles::baseline(),
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
        let diag = train_step(&batch, &mut state, &cfg).unwrap();
        let l = diag.loss;
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.sr, 0.0);
        assert_eq!(l.se, 0.0);
        assert_eq!(l.sid, 0.0);
        assert_eq!(l.ortho, 0.0);
        assert!((l.total - (l.id + l.triplet)).abs() < 1e-12);
        assert_eq!(l.alpha_sr, 0.5);
    }

    #[test]
    fn alpha_sums_to_one_every_step() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 9).unwrap();
        let cfg = tiny_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        for _ in 0..5 {
            let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
            let diag = train_step(&batch, &mut state, &cfg).unwrap();
            assert_eq!(diag.loss.alpha_sr + diag.loss.alpha_se, 1.0);
        }
    }

    #[test]
    fn reweight_off_pins_even_weights() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 13).unwrap();
        let mut cfg = tiny_cfg();
        cfg.toggles.reweight = false;
        let mut state = TrainState::new(&cfg).unwrap();
        for _ in 0..3 {
            let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
            let diag = train_step(&batch, &mut state, &cfg).unwrap();
            assert_eq!(diag.loss.alpha_sr, 0.5);
            assert_eq!(diag.loss.alpha_se, 0.5);
        }
    }

    #[test]
    fn metrics_stream_deterministic_across_runs() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 15).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            ..tiny_cfg()
        };
        let a = run_experiment(&cfg, &dataset).unwrap();
        let b = run_experiment(&cfg, &dataset).unwrap();
        assert_eq!(a.metrics_lines, b.metrics_lines);
        let c = run_experiment(
            &TrainConfig {
                seed: cfg.seed + 1,
                ..cfg.clone()
            },
            &dataset,
        )
        .unwrap();
        assert_ne!(a.metrics_lines, c.metrics_lines);
    }

    #[test]
    fn loss_decreases_over_short_training() {
        // directional: mean total over the last 20 steps under the mean over
        // the first 5, averaged across seeds
        let gen = tiny_gen();
        let mut wins = 0;
        for seed in 0..3 {
            let dataset = generate(&gen, 100 + seed).unwrap();
            let cfg = TrainConfig {
                epochs: 4,
                steps_per_epoch: 25,
                seed,
                eval_every: 100,
                ..tiny_cfg()
            };
            let mut state = TrainState::new(&cfg).unwrap();
            let mut totals = Vec::new();
            for epoch in 0..cfg.epochs {
                state.epoch = epoch;
                for _ in 0..cfg.steps_per_epoch {
                    let batch =
                        pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
                    totals.push(train_step(&batch, &mut state, &cfg).unwrap().loss.total);
                }
            }
            let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = totals[totals.len() - 20..].iter().sum::<f64>() / 20.0;
            if tail < head {
                wins += 1;
            }
        }
        assert!(wins >= 2, "loss failed to decrease in {}/3 seeds", 3 - wins);
    }

    #[test]
    fn two_projector_variant_trains() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 21).unwrap();
        let mut cfg = tiny_cfg();
        cfg.model.projector = ProjectorKind::Two { m2: 3 };
        cfg.model.shared_se_head = false;
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = pk_batch(&dataset, cfg.batch_p, cfg.batch_k, &mut state.rng).unwrap();
        let diag = train_step(&batch, &mut state, &cfg).unwrap();
        assert!(diag.loss.total.is_finite());
        let report = evaluate(&state.ema.teacher, &dataset, 0).unwrap();
        assert!(report.map >= 0.0 && report.map <= 1.0);
    }

    #[test]
    fn evaluate_produces_sane_report() {
        let gen = tiny_gen();
        let dataset = generate(&gen, 23).unwrap();
        let cfg = tiny_cfg();
        let state = TrainState::new(&cfg).unwrap();
        let report = evaluate(&state.ema.teacher, &dataset, 1).unwrap();
        assert!(report.cmc1 <= report.cmc5 && report.cmc5 <= report.cmc10);
        assert!((0.0..=1.0).contains(&report.map));
    }
}
