//! Training of the shape space and the deformation space, similar-shape
//! selection and the procedural dataset used for smoke runs.

mod deformation;
mod shape_space;
mod synth;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{ParamSet, Tensor};
use crate::error::{ensure, Error, Result};
use crate::losses::{mask_iou, LossReport, LossWeights};
use crate::sdf::Mask2D;

pub use deformation::{
    latent_norm_vs_motion, train_deformation_stage1, train_deformation_stage2, DeformModel, DeformPair, PairBase, MAP_PHI,
};
pub(crate) use deformation::subsample;
pub use shape_space::{sdf_target_scale, train_shape_space, ShapeDataset, ShapeModel, ShapeSample, SIL_SHARPNESS};
pub use synth::{
    apply_deformation, generate_synthetic_dataset, leaf_mask, DeformKind, DeformTruth, LeafParams, SyntheticDataset,
};

/// Hyper-parameters shared by the training stages. Every field can be set by
/// name through [`TrainConfig::set`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    /// SDF samples per shape step.
    pub batch_size: usize,
    pub truncation: f64,
    /// Standard deviation of the latent prior.
    pub sigma: f64,
    pub weights: LossWeights,
    pub control_points: usize,
    pub shape_dim: usize,
    pub deform_dim: usize,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub deform_hidden: usize,
    pub deform_depth: usize,
    pub pe_order: usize,
    /// Raster resolution of decoded base meshes.
    pub mesh_res: usize,
    /// Initial silhouette sharpness `k` in `sigmoid(k f)`.
    pub sil_sharpness: f64,
    /// Points per step that carry the gradient-norm penalty.
    pub eik_points: usize,
    /// Similar bases per pair in the second deformation stage.
    pub similar: usize,
    pub optimize_controls: bool,
    pub early_stop: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Target points per pair used by the training chamfer term.
    pub cloud_points: usize,
    pub latent_init_std: f64,
    pub skin_similarity: f64,
    /// Order of max-distance normalization and truncation of the SDF targets.
    pub sdf_prep: SdfPrep,
}

/// How training SDF targets are prepared from the raw distance transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SdfPrep {
    /// Distances in UV units, truncated at `truncation`.
    Raw,
    /// Divided by the largest magnitude, then truncated at `truncation`.
    #[default]
    NormalizeThenTruncate,
    /// Truncated at `truncation`, then divided by `truncation`; the loss clamps
    /// at 1.
    TruncateThenNormalize,
}

impl SdfPrep {
    pub fn name(self) -> &'static str {
        match self {
            SdfPrep::Raw => "raw",
            SdfPrep::NormalizeThenTruncate => "normalize-truncate",
            SdfPrep::TruncateThenNormalize => "truncate-normalize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "raw" => SdfPrep::Raw,
            "normalize-truncate" => SdfPrep::NormalizeThenTruncate,
            "truncate-normalize" => SdfPrep::TruncateThenNormalize,
            _ => return Err(Error::Validation(format!("unknown sdf preparation `{s}`"))),
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_interval: 500,
            batch_size: 2048,
            truncation: 0.01,
            sigma: 10.0,
            weights: LossWeights::default(),
            control_points: 100,
            shape_dim: 16,
            deform_dim: 16,
            seed: 0,
            hidden: 64,
            depth: 4,
            deform_hidden: 64,
            deform_depth: 3,
            pe_order: 8,
            mesh_res: 32,
            sil_sharpness: 50.0,
            eik_points: 256,
            similar: 5,
            optimize_controls: true,
            early_stop: true,
            plateau_window: 50,
            plateau_tol: 1e-5,
            cloud_points: 1000,
            latent_init_std: 0.001,
            skin_similarity: 1.0,
            sdf_prep: SdfPrep::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Validation(format!("config key `{key}` has invalid value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Validation(format!("config key `{key}` needs a boolean, got `{value}`"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "epochs" => self.epochs = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "lr_decay" => self.lr_decay = parse(&key, value)?,
            "decay_interval" => self.decay_interval = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "truncation" => self.truncation = parse(&key, value)?,
            "sigma" => self.sigma = parse(&key, value)?,
            "k_control" | "control_points" => self.control_points = parse(&key, value)?,
            "latent_dim" => {
                self.shape_dim = parse(&key, value)?;
                self.deform_dim = self.shape_dim;
            }
            "shape_dim" => self.shape_dim = parse(&key, value)?,
            "deform_dim" => self.deform_dim = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "depth" => self.depth = parse(&key, value)?,
            "deform_hidden" => self.deform_hidden = parse(&key, value)?,
            "deform_depth" => self.deform_depth = parse(&key, value)?,
            "pe_order" => self.pe_order = parse(&key, value)?,
            "mesh_res" => self.mesh_res = parse(&key, value)?,
            "sil_sharpness" => self.sil_sharpness = parse(&key, value)?,
            "eik_points" => self.eik_points = parse(&key, value)?,
            "similar" => self.similar = parse(&key, value)?,
            "optimize_controls" => self.optimize_controls = parse_bool(&key, value)?,
            "early_stop" => self.early_stop = parse_bool(&key, value)?,
            "plateau_window" => self.plateau_window = parse(&key, value)?,
            "plateau_tol" => self.plateau_tol = parse(&key, value)?,
            "cloud_points" => self.cloud_points = parse(&key, value)?,
            "latent_init_std" => self.latent_init_std = parse(&key, value)?,
            "skin_similarity" => self.skin_similarity = parse(&key, value)?,
            "sdf_prep" => self.sdf_prep = SdfPrep::parse(value)?,
            k => match k.strip_prefix("w_") {
                Some(term) => self.weights.set(term, parse(&key, value)?)?,
                None => return Err(Error::Validation(format!("unknown training config key `{k}`"))),
            },
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("epochs", self.epochs.to_string());
        put("lr", self.lr.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("decay_interval", self.decay_interval.to_string());
        put("batch_size", self.batch_size.to_string());
        put("truncation", self.truncation.to_string());
        put("sigma", self.sigma.to_string());
        put("k_control", self.control_points.to_string());
        put("shape_dim", self.shape_dim.to_string());
        put("deform_dim", self.deform_dim.to_string());
        put("seed", self.seed.to_string());
        put("hidden", self.hidden.to_string());
        put("depth", self.depth.to_string());
        put("deform_hidden", self.deform_hidden.to_string());
        put("deform_depth", self.deform_depth.to_string());
        put("pe_order", self.pe_order.to_string());
        put("mesh_res", self.mesh_res.to_string());
        put("sil_sharpness", self.sil_sharpness.to_string());
        put("eik_points", self.eik_points.to_string());
        put("similar", self.similar.to_string());
        put("optimize_controls", self.optimize_controls.to_string());
        put("early_stop", self.early_stop.to_string());
        put("plateau_window", self.plateau_window.to_string());
        put("plateau_tol", self.plateau_tol.to_string());
        put("cloud_points", self.cloud_points.to_string());
        put("latent_init_std", self.latent_init_std.to_string());
        put("skin_similarity", self.skin_similarity.to_string());
        put("sdf_prep", self.sdf_prep.name().to_string());
        for name in LossWeights::NAMES {
            put(&format!("w_{name}"), self.weights.get(name).unwrap_or_default().to_string());
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Validation, "epochs must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Validation, "learning rate must be positive");
        ensure!(self.lr_decay > 0.0 && self.lr_decay <= 1.0, Validation, "lr decay must be in (0, 1]");
        ensure!(self.decay_interval >= 1, Validation, "decay interval must be positive");
        ensure!(self.batch_size >= 1 && self.cloud_points >= 1, Validation, "batch sizes must be positive");
        ensure!(self.truncation > 0.0 && self.sigma > 0.0, Validation, "truncation and sigma must be positive");
        ensure!(self.shape_dim >= 1 && self.deform_dim >= 1, Validation, "latent sizes must be positive");
        ensure!(self.hidden >= 1 && self.depth >= 1, Validation, "shape decoder needs a hidden layer");
        ensure!(self.deform_hidden >= 1 && self.deform_depth >= 1, Validation, "deformation nets need a hidden layer");
        ensure!(self.mesh_res >= 4, Validation, "mesh resolution must be at least 4");
        ensure!(self.sil_sharpness > 0.0, Validation, "silhouette sharpness must be positive");
        ensure!(self.similar >= 1, Validation, "similar-shape count must be positive");
        ensure!(self.plateau_window >= 1, Validation, "plateau window must be positive");
        ensure!(self.latent_init_std >= 0.0, Validation, "latent init spread must be nonnegative");
        Ok(())
    }
}

/// Per-epoch loss history of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean report over the steps of each epoch.
    pub epochs: Vec<LossReport>,
    pub stopped_early: bool,
    /// Set when a non-finite loss ended the run; the model is the last
    /// finite state.
    pub diverged: bool,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.total).collect()
    }

    pub fn last_total(&self) -> f64 {
        self.epochs.last().map(|r| r.total).unwrap_or(f64::NAN)
    }
}

/// Relative change of the epoch loss over the last `window` epochs fell below
/// `tol`.
pub(crate) fn plateaued(totals: &[f64], window: usize, tol: f64) -> bool {
    if totals.len() <= window {
        return false;
    }
    let now = totals[totals.len() - 1];
    let then = totals[totals.len() - 1 - window];
    (then - now).abs() <= tol * then.abs().max(1e-300)
}

pub(crate) fn average_reports(reports: &[LossReport]) -> LossReport {
    let mut out = LossReport::default();
    if reports.is_empty() {
        return out;
    }
    let n = reports.len() as f64;
    for k in reports[0].terms.keys() {
        let v = reports.iter().map(|r| r.terms.get(k).copied().unwrap_or(0.0)).sum::<f64>() / n;
        out.add(k, reports[0].weights[k], v);
    }
    out
}

pub(crate) fn row_name(table: &str, i: usize) -> String {
    format!("{table}.{i:05}")
}

/// Adds one parameter per latent row, drawn from `N(0, std^2)`.
pub(crate) fn init_latent_rows(params: &mut ParamSet, table: &str, rows: usize, dim: usize, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std.max(0.0)).unwrap();
    for i in 0..rows {
        let z: Vec<f64> = (0..dim).map(|_| if std > 0.0 { normal.sample(rng) } else { 0.0 }).collect();
        params.insert(row_name(table, i), Tensor::row(&z));
    }
}

/// Replaces per-row latent parameters with a single `rows x dim` table.
pub(crate) fn pack_latent_rows(params: &mut ParamSet, table: &str, rows: usize) -> Result<()> {
    let mut data = Vec::new();
    let mut dim = 0;
    for i in 0..rows {
        let t = params.remove(&row_name(table, i)).ok_or_else(|| Error::Contract(format!("latent row {i} missing")))?;
        dim = t.cols();
        data.extend_from_slice(t.data());
    }
    params.insert(table, Tensor::new(vec![rows, dim], data)?);
    Ok(())
}

/// Splits a `rows x dim` latent table into per-row parameters.
pub(crate) fn unpack_latent_rows(params: &mut ParamSet, table: &str) -> Result<usize> {
    let t = params.remove(table).ok_or_else(|| Error::Contract(format!("latent table `{table}` missing")))?;
    for i in 0..t.rows() {
        params.insert(row_name(table, i), Tensor::row(t.row_slice(i)));
    }
    Ok(t.rows())
}

/// Ids of the `m` pool masks with the highest IoU against `query`, with their
/// IoU, descending; ties keep pool order.
pub fn select_similar_shapes(query: &Mask2D, pool: &[(String, Mask2D)], m: usize) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::with_capacity(pool.len());
    for (k, (id, mask)) in pool.iter().enumerate() {
        scored.push((k, id.clone(), mask_iou(query, mask)?));
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(m).map(|(_, id, s)| (id, s)).collect())
}

/// Deterministic per-step seed.
pub(crate) fn step_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, item as u64] {
        x = x.wrapping_add(v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}
