//! Synthetic two-modality identity data with ground-truth shape and
//! appearance latent factors, plus a derived shape view paired one-to-one
//! with every sample.
//!
//! Each identity draws a shape code and an appearance code. A sample mixes
//! the pose-perturbed shape code with a modality-masked appearance code
//! through a fixed linear map; its shape view sees the pose-perturbed shape
//! code only, so no appearance information can leak into it.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::textio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    /// Identity count (train + test).
    pub identities: usize,
    /// Identities held out for retrieval evaluation.
    pub test_identities: usize,
    pub samples_per_modality: usize,
    pub d_shape: usize,
    pub d_app: usize,
    pub input_dim: usize,
    /// Pose noise: per-sample perturbation of the shape code.
    pub sigma_pose: f64,
    /// Sensor noise on every emitted vector.
    pub sigma_sensor: f64,
    /// Fraction of appearance dims visible to modality 2.
    pub appearance_carryover: f64,
    /// Seed for the fixed generative mixing maps.
    pub mixing_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            identities: 40,
            test_identities: 8,
            samples_per_modality: 20,
            d_shape: 6,
            d_app: 6,
            input_dim: 32,
            sigma_pose: 0.3,
            sigma_sensor: 0.1,
            appearance_carryover: 0.5,
            mixing_seed: 1234,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 identities for retrieval, got {}",
                self.identities
            )));
        }
        if self.test_identities == 0 || self.test_identities >= self.identities {
            return Err(Error::Invalid(format!(
                "test identities {} must be in 1..identities",
                self.test_identities
            )));
        }
        if self.samples_per_modality == 0 || self.d_shape == 0 || self.d_app == 0 || self.input_dim == 0
        {
            return Err(Error::Invalid("all counts must be at least 1".into()));
        }
        if self.sigma_pose < 0.0 || self.sigma_sensor < 0.0 {
            return Err(Error::Invalid("noise levels must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.appearance_carryover) {
            return Err(Error::Invalid(format!(
                "appearance carryover must lie in [0,1], got {}",
                self.appearance_carryover
            )));
        }
        Ok(())
    }

    /// Appearance dims visible to modality 2.
    pub fn carried_app_dims(&self) -> usize {
        (self.appearance_carryover * self.d_app as f64).ceil() as usize
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Vec<f64>,
    pub x_shape: Vec<f64>,
    pub label: usize,
    pub modality: u8,
    pub pose: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub shape_code: Vec<f64>,
    pub app_code: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub identities: Vec<Identity>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(|s| self.train_identities.contains(&s.label))
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(|s| self.test_identities.contains(&s.label))
    }

    /// Dense class index per train identity.
    pub fn train_class_of(&self, label: usize) -> Option<usize> {
        self.train_identities.iter().position(|&l| l == label)
    }

    pub fn num_train_classes(&self) -> usize {
        self.train_identities.len()
    }

    /// Feature matrix and labels for one modality of the given split.
    pub fn modality_matrix(&self, labels: &[usize], modality: u8) -> (Array, Vec<usize>) {
        let rows: Vec<&Sample> = self
            .samples
            .iter()
            .filter(|s| s.modality == modality && labels.contains(&s.label))
            .collect();
        let mut data = Vec::with_capacity(rows.len() * self.config.input_dim);
        let mut out_labels = Vec::with_capacity(rows.len());
        for s in &rows {
            data.extend_from_slice(&s.x);
            out_labels.push(s.label);
        }
        (
            Array::from_vec(vec![rows.len(), self.config.input_dim], data).unwrap(),
            out_labels,
        )
    }
}

fn randn_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        })
        .collect()
}

/// Fixed linear mixing maps, drawn once from the mixing seed so probes and
/// oracles can rely on them across datasets.
struct MixingMaps {
    /// Per modality: input_dim x (d_shape + d_app).
    w_mod: [Vec<f64>; 2],
    b_mod: [Vec<f64>; 2],
    /// input_dim x d_shape.
    w_shape: Vec<f64>,
}

fn mixing_maps(cfg: &GenConfig) -> MixingMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mixing_seed);
    let latent = cfg.d_shape + cfg.d_app;
    let scale = 1.0 / (latent as f64).sqrt();
    let w1 = randn_vec(cfg.input_dim * latent, scale, &mut rng);
    let w2 = randn_vec(cfg.input_dim * latent, scale, &mut rng);
    let b1 = randn_vec(cfg.input_dim, 0.5, &mut rng);
    let b2 = randn_vec(cfg.input_dim, 0.5, &mut rng);
    let w_shape = randn_vec(
        cfg.input_dim * cfg.d_shape,
        1.0 / (cfg.d_shape as f64).sqrt(),
        &mut rng,
    );
    MixingMaps {
        w_mod: [w1, w2],
        b_mod: [b1, b2],
        w_shape,
    }
}

fn apply_map(w: &[f64], input: &[f64], rows: usize) -> Vec<f64> {
    let cols = input.len();
    (0..rows)
        .map(|i| {
            w[i * cols..(i + 1) * cols]
                .iter()
                .zip(input)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Generate a dataset with an identity-disjoint train/test split,
/// deterministic given the seed.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let maps = mixing_maps(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let identities: Vec<Identity> = (0..config.identities)
        .map(|_| Identity {
            shape_code: randn_vec(config.d_shape, 1.0, &mut rng),
            app_code: randn_vec(config.d_app, 1.0, &mut rng),
        })
        .collect();

    let mut order: Vec<usize> = (0..config.identities).collect();
    order.shuffle(&mut rng);
    let split = config.identities - config.test_identities;
    let mut train_identities = order[..split].to_vec();
    let mut test_identities = order[split..].to_vec();
    train_identities.sort_unstable();
    test_identities.sort_unstable();

    let carried = config.carried_app_dims();
    let mut samples = Vec::new();
    for (label, identity) in identities.iter().enumerate() {
        for modality in [1u8, 2u8] {
            for _ in 0..config.samples_per_modality {
                let pose = randn_vec(config.d_shape, config.sigma_pose, &mut rng);
                let shape_in: Vec<f64> = identity
                    .shape_code
                    .iter()
                    .zip(&pose)
                    .map(|(s, p)| s + p)
                    .collect();
                let mut latent = shape_in.clone();
                latent.extend(identity.app_code.iter().enumerate().map(|(d, &a)| {
                    if modality == 1 || d < carried {
                        a
                    } else {
                        0.0
                    }
                }));
                let mi = (modality - 1) as usize;
                let mut x = apply_map(&maps.w_mod[mi], &latent, config.input_dim);
                for (v, b) in x.iter_mut().zip(&maps.b_mod[mi]) {
                    *v += b;
                }
                for v in x.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += e * config.sigma_sensor;
                }
                let mut x_shape = apply_map(&maps.w_shape, &shape_in, config.input_dim);
                for v in x_shape.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += e * config.sigma_sensor;
                }
                samples.push(Sample {
                    x,
                    x_shape,
                    label,
                    modality,
                    pose,
                });
            }
        }
    }
    Ok(Dataset {
        config: *config,
        seed,
        identities,
        train_identities,
        test_identities,
        samples,
    })
}

/// A PK-sampled mini-batch: `p` identities, `k` samples per modality each,
/// every sample carrying its paired shape view.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Visible inputs (p*k, input_dim).
    pub x1: Array,
    /// Infrared inputs (p*k, input_dim).
    pub x2: Array,
    /// Shape views aligned with the rows of `x1` then `x2` (2*p*k, input_dim).
    pub xs: Array,
    /// Train-class labels aligned with the rows of `x1` then `x2`.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Draw a PK batch from the training split.
pub fn pk_batch<R: Rng>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    if dataset.train_identities.len() < p {
        return Err(Error::Invalid(format!(
            "need {p} train identities, have {}",
            dataset.train_identities.len()
        )));
    }
    let mut picked = dataset.train_identities.clone();
    picked.shuffle(rng);
    picked.truncate(p);

    let input_dim = dataset.config.input_dim;
    let mut x1 = Vec::with_capacity(p * k * input_dim);
    let mut x2 = Vec::with_capacity(p * k * input_dim);
    let mut xs1 = Vec::with_capacity(p * k * input_dim);
    let mut xs2 = Vec::with_capacity(p * k * input_dim);
    let mut labels = Vec::with_capacity(p * k);
    for &identity in &picked {
        let class = dataset.train_class_of(identity).expect("train identity");
        for modality in [1u8, 2u8] {
            let mut pool: Vec<&Sample> = dataset
                .samples
                .iter()
                .filter(|s| s.label == identity && s.modality == modality)
                .collect();
            if pool.len() < k {
                return Err(Error::InsufficientSamples {
                    identity,
                    modality,
                    available: pool.len(),
                    needed: k,
                });
            }
            pool.shuffle(rng);
            for s in pool.into_iter().take(k) {
                match modality {
                    1 => {
                        x1.extend_from_slice(&s.x);
                        xs1.extend_from_slice(&s.x_shape);
                        labels.push(class);
                    }
                    _ => {
                        x2.extend_from_slice(&s.x);
                        xs2.extend_from_slice(&s.x_shape);
                    }
                }
            }
        }
    }
    // labels cover visible rows then repeat for infrared rows
    let infrared_labels: Vec<usize> = labels.clone();
    labels.extend(infrared_labels);
    xs1.extend_from_slice(&xs2);
    Ok(Batch {
        x1: Array::from_vec(vec![p * k, input_dim], x1)?,
        x2: Array::from_vec(vec![p * k, input_dim], x2)?,
        xs: Array::from_vec(vec![2 * p * k, input_dim], xs1)?,
        labels,
    })
}

// ---- dataset file format ----

const DATASET_HEADER: &str = "shapesplit dataset v1";

pub fn dataset_to_string(ds: &Dataset) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let c = &ds.config;
    let _ = writeln!(s, "{DATASET_HEADER}");
    let _ = writeln!(s, "identities = {}", c.identities);
    let _ = writeln!(s, "test_identities = {}", c.test_identities);
    let _ = writeln!(s, "samples_per_modality = {}", c.samples_per_modality);
    let _ = writeln!(s, "d_shape = {}", c.d_shape);
    let _ = writeln!(s, "d_app = {}", c.d_app);
    let _ = writeln!(s, "input_dim = {}", c.input_dim);
    let _ = writeln!(s, "sigma_pose = {}", c.sigma_pose);
    let _ = writeln!(s, "sigma_sensor = {}", c.sigma_sensor);
    let _ = writeln!(s, "appearance_carryover = {}", c.appearance_carryover);
    let _ = writeln!(s, "mixing_seed = {}", c.mixing_seed);
    let _ = writeln!(s, "seed = {}", ds.seed);
    let ids: Vec<String> = ds.train_identities.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(s, "train_split = {}", ids.join(" "));
    let ids: Vec<String> = ds.test_identities.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(s, "test_split = {}", ids.join(" "));
    for (i, identity) in ds.identities.iter().enumerate() {
        let _ = writeln!(s, "identity {i}");
        let _ = writeln!(s, "shape_code {}", textio::fmt_floats(&identity.shape_code));
        let _ = writeln!(s, "app_code {}", textio::fmt_floats(&identity.app_code));
    }
    for sample in &ds.samples {
        let _ = writeln!(s, "sample label={} modality={}", sample.label, sample.modality);
        let _ = writeln!(s, "pose {}", textio::fmt_floats(&sample.pose));
        let _ = writeln!(s, "x {}", textio::fmt_floats(&sample.x));
        let _ = writeln!(s, "x_shape {}", textio::fmt_floats(&sample.x_shape));
    }
    s
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty dataset file".into(),
    })?;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header `{header}`"),
        });
    }
    let mut kv = std::collections::HashMap::new();
    let mut train_split = Vec::new();
    let mut test_split = Vec::new();
    let mut identities: Vec<Identity> = Vec::new();
    let mut samples: Vec<Sample> = Vec::new();
    let mut current_sample: Option<Sample> = None;

    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("identity ") {
            let _idx: usize = rest.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: "bad identity index".into(),
            })?;
            identities.push(Identity {
                shape_code: vec![],
                app_code: vec![],
            });
        } else if let Some(rest) = line.strip_prefix("shape_code ") {
            let id = identities.last_mut().ok_or(Error::Parse {
                line: line_no,
                msg: "shape_code before identity".into(),
            })?;
            id.shape_code = textio::parse_floats(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("app_code ") {
            let id = identities.last_mut().ok_or(Error::Parse {
                line: line_no,
                msg: "app_code before identity".into(),
            })?;
            id.app_code = textio::parse_floats(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("sample ") {
            if let Some(s) = current_sample.take() {
                samples.push(s);
            }
            let mut label = None;
            let mut modality = None;
            for tok in rest.split_whitespace() {
                if let Some(v) = tok.strip_prefix("label=") {
                    label = v.parse().ok();
                } else if let Some(v) = tok.strip_prefix("modality=") {
                    modality = v.parse().ok();
                }
            }
            let (label, modality) = match (label, modality) {
                (Some(l), Some(m)) => (l, m),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "sample line needs label= and modality=".into(),
                    })
                }
            };
            current_sample = Some(Sample {
                x: vec![],
                x_shape: vec![],
                label,
                modality,
                pose: vec![],
            });
        } else if let Some(rest) = line.strip_prefix("pose ") {
            current_sample
                .as_mut()
                .ok_or(Error::Parse {
                    line: line_no,
                    msg: "pose before sample".into(),
                })?
                .pose = textio::parse_floats(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("x_shape ") {
            current_sample
                .as_mut()
                .ok_or(Error::Parse {
                    line: line_no,
                    msg: "x_shape before sample".into(),
                })?
                .x_shape = textio::parse_floats(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("x ") {
            current_sample
                .as_mut()
                .ok_or(Error::Parse {
                    line: line_no,
                    msg: "x before sample".into(),
                })?
                .x = textio::parse_floats(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("train_split =") {
            train_split = textio::parse_usizes(rest, line_no)?;
        } else if let Some(rest) = line.strip_prefix("test_split =") {
            test_split = textio::parse_usizes(rest, line_no)?;
        } else if let Some((k, v)) = textio::split_kv(line) {
            kv.insert(k.to_string(), v.to_string());
        } else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("unrecognized line `{line}`"),
            });
        }
    }
    if let Some(s) = current_sample.take() {
        samples.push(s);
    }

    let get = |key: &str| -> Result<String> {
        kv.get(key).cloned().ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    };
    let config = GenConfig {
        identities: get("identities")?.parse().map_err(|_| bad("identities"))?,
        test_identities: get("test_identities")?.parse().map_err(|_| bad("test_identities"))?,
        samples_per_modality: get("samples_per_modality")?
            .parse()
            .map_err(|_| bad("samples_per_modality"))?,
        d_shape: get("d_shape")?.parse().map_err(|_| bad("d_shape"))?,
        d_app: get("d_app")?.parse().map_err(|_| bad("d_app"))?,
        input_dim: get("input_dim")?.parse().map_err(|_| bad("input_dim"))?,
        sigma_pose: get("sigma_pose")?.parse().map_err(|_| bad("sigma_pose"))?,
        sigma_sensor: get("sigma_sensor")?.parse().map_err(|_| bad("sigma_sensor"))?,
        appearance_carryover: get("appearance_carryover")?
            .parse()
            .map_err(|_| bad("appearance_carryover"))?,
        mixing_seed: get("mixing_seed")?.parse().map_err(|_| bad("mixing_seed"))?,
    };
    Ok(Dataset {
        config,
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        identities,
        train_identities: train_split,
        test_identities: test_split,
        samples,
    })
}

fn bad(key: &str) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("bad value for `{key}`"),
    }
}

pub fn save_dataset(ds: &Dataset, path: &std::path::Path) -> Result<()> {
    textio::write_string(path, &dataset_to_string(ds))
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    dataset_from_str(&textio::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::shape_probe;

    fn small_cfg() -> GenConfig {
        GenConfig {
            identities: 10,
            test_identities: 2,
            samples_per_modality: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg, 7).unwrap();
        let b = generate(&cfg, 7).unwrap();
        assert_eq!(dataset_to_string(&a), dataset_to_string(&b));
        let c = generate(&cfg, 8).unwrap();
        assert_ne!(dataset_to_string(&a), dataset_to_string(&c));
    }

    #[test]
    fn noise_free_shape_views_identical_within_identity() {
        let cfg = GenConfig {
            sigma_pose: 0.0,
            sigma_sensor: 0.0,
            ..small_cfg()
        };
        let ds = generate(&cfg, 3).unwrap();
        for label in 0..cfg.identities {
            let shapes: Vec<&Vec<f64>> = ds
                .samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| &s.x_shape)
                .collect();
            for s in &shapes[1..] {
                assert_eq!(*s, shapes[0]);
            }
        }
    }

    #[test]
    fn identity_disjoint_split() {
        let ds = generate(&small_cfg(), 5).unwrap();
        for t in &ds.test_identities {
            assert!(!ds.train_identities.contains(t));
        }
        assert_eq!(
            ds.train_identities.len() + ds.test_identities.len(),
            ds.config.identities
        );
    }

    fn stack_app_codes(ds: &Dataset, modality: u8) -> (Array, Array) {
        let rows: Vec<&Sample> = ds.samples.iter().filter(|s| s.modality == modality).collect();
        let d_app = ds.config.d_app;
        let input_dim = ds.config.input_dim;
        let mut xs = Vec::new();
        let mut codes = Vec::new();
        for s in &rows {
            xs.extend_from_slice(&s.x);
            codes.extend_from_slice(&ds.identities[s.label].app_code);
        }
        (
            Array::from_vec(vec![rows.len(), input_dim], xs).unwrap(),
            Array::from_vec(vec![rows.len(), d_app], codes).unwrap(),
        )
    }

    /// Many identities keep the probe from memorizing identity-level
    /// shape/appearance pairings; spurious fit scales like dims/identities.
    fn wide_cfg(appearance_carryover: f64) -> GenConfig {
        GenConfig {
            appearance_carryover,
            identities: 200,
            test_identities: 20,
            samples_per_modality: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_carryover_hides_appearance_from_modality_two() {
        let ds = generate(&wide_cfg(0.0), 11).unwrap();
        let (x1, a1) = stack_app_codes(&ds, 1);
        let (x2, a2) = stack_app_codes(&ds, 2);
        let r2_mod1 = shape_probe(&x1, &a1, 0).unwrap();
        let r2_mod2 = shape_probe(&x2, &a2, 0).unwrap();
        assert!(r2_mod1 > 0.8, "modality 1 should expose appearance: {r2_mod1}");
        assert!(r2_mod2 < 0.1, "modality 2 should hide appearance: {r2_mod2}");
    }

    #[test]
    fn shape_view_purity_appearance_unreadable() {
        for (i, rho) in [0.0, 0.3, 0.8].into_iter().enumerate() {
            let cfg = wide_cfg(rho);
            let ds = generate(&cfg, 13 + i as u64).unwrap();
            let rows: Vec<&Sample> = ds.samples.iter().collect();
            let mut xs = Vec::new();
            let mut codes = Vec::new();
            for s in &rows {
                xs.extend_from_slice(&s.x_shape);
                codes.extend_from_slice(&ds.identities[s.label].app_code);
            }
            let xsa = Array::from_vec(vec![rows.len(), cfg.input_dim], xs).unwrap();
            let ca = Array::from_vec(vec![rows.len(), cfg.d_app], codes).unwrap();
            let r2 = shape_probe(&xsa, &ca, 1).unwrap();
            assert!(r2 < 0.05, "shape view leaks appearance at rho {rho}: r2 {r2}");
        }
    }

    #[test]
    fn modality_gap_is_linearly_separable() {
        let ds = generate(&GenConfig::default(), 17).unwrap();
        // ridge-fit +-1 modality labels on one half, sign accuracy on the other
        let rows: Vec<&Sample> = ds.samples.iter().collect();
        let n = rows.len();
        let d = ds.config.input_dim;
        let half = n / 2;
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        let y_of = |s: &Sample| if s.modality == 1 { 1.0 } else { -1.0 };
        for s in &rows[..half] {
            for a in 0..d {
                for b in 0..d {
                    xtx[a * d + b] += s.x[a] * s.x[b];
                }
                xty[a] += s.x[a] * y_of(s);
            }
        }
        for a in 0..d {
            xtx[a * d + a] += 1e-3;
        }
        let w = crate::evalkit::solve_spd(&xtx, &xty, d, 1).unwrap();
        let mut correct = 0;
        for s in &rows[half..] {
            let pred: f64 = s.x.iter().zip(&w).map(|(a, b)| a * b).sum();
            if pred.signum() == y_of(s) {
                correct += 1;
            }
        }
        let acc = correct as f64 / (n - half) as f64;
        assert!(acc > 0.9, "modalities should separate: acc {acc}");
    }

    #[test]
    fn pk_batch_default_shape() {
        let ds = generate(&GenConfig::default(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = pk_batch(&ds, 8, 4, &mut rng).unwrap();
        assert_eq!(batch.size(), 64);
        assert_eq!(batch.x1.shape(), &[32, 32]);
        assert_eq!(batch.x2.shape(), &[32, 32]);
        assert_eq!(batch.xs.shape(), &[64, 32]);
        // exactly 4 visible + 4 infrared per identity
        let mut counts = std::collections::HashMap::new();
        for &l in &batch.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 8)); // 4 per modality x 2
    }

    #[test]
    fn pk_batch_small_counts() {
        let ds = generate(&small_cfg(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = pk_batch(&ds, 2, 1, &mut rng).unwrap();
        assert_eq!(batch.size(), 4);
    }

    #[test]
    fn pk_batch_deterministic_given_rng_seed() {
        let ds = generate(&small_cfg(), 29).unwrap();
        let a = pk_batch(&ds, 4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = pk_batch(&ds, 4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.x1, b.x1);
        assert_eq!(a.xs, b.xs);
    }

    #[test]
    fn pk_batch_insufficient_samples_names_identity() {
        let cfg = GenConfig {
            samples_per_modality: 2,
            ..small_cfg()
        };
        let ds = generate(&cfg, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = pk_batch(&ds, 2, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 3, .. }));
    }

    #[test]
    fn config_validation() {
        let mut cfg = GenConfig::default();
        cfg.identities = 1;
        assert!(generate(&cfg, 0).is_err());
        let mut cfg = GenConfig::default();
        cfg.appearance_carryover = 1.5;
        assert!(generate(&cfg, 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip_value_exact() {
        let ds = generate(&small_cfg(), 37).unwrap();
        let text = dataset_to_string(&ds);
        let back = dataset_from_str(&text).unwrap();
        assert_eq!(text, dataset_to_string(&back));
        assert_eq!(ds.samples.len(), back.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.x_shape, b.x_shape);
            assert_eq!(a.label, b.label);
        }
    }
}
