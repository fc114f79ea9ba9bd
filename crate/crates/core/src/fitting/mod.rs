//! Reconstruction from 3D observations: latent inversion with volumetric
//! encoders, direct latent refinement and joint fitting of several leaves of
//! one plant.

mod encoder;
mod multi;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::deform::BlendMode;
use crate::engine::{decayed_lr, Adam, ParamSet, SparseMatrix, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::losses::{metric_surface_chamfer, record};
use crate::mesh::TriMesh;
use crate::shape::{BaseMesh, SHAPE_NET};
use crate::training::{DeformModel, ShapeModel};

pub use encoder::{
    invert_latents, latent_means, train_inversion_encoders, EncoderConfig, EncoderReport, GridEncoder, Inversion,
    InversionEncoders, DEFORM_ENCODER, SHAPE_ENCODER,
};
pub use multi::{choose_anchor, fit_multi_leaf, kmeans, KMeans, MultiFit};

const ZS: &str = "zs";
const ZD: &str = "zd";

/// Settings of latent refinement and multi-leaf fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    /// Prior spread of both latents in the regularizer.
    pub sigma: f64,
    pub chamfer_weight: f64,
    pub reg_weight: f64,
    pub anchor_weight: f64,
    /// Shape-latent halvings allowed after the base shape degenerates.
    pub max_resets: usize,
    /// Observation points used by the loss (evenly strided subset).
    pub cloud_points: usize,
    /// Move contour vertices onto the decoded zero level, which also makes the
    /// base outline differentiable in `z_s`.
    pub snap_contour: bool,
    /// Alternate shape and deformation updates instead of joint steps.
    pub alternate: bool,
    pub clusters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_interval: 50,
            sigma: 10.0,
            chamfer_weight: 1.0,
            reg_weight: 1.0,
            anchor_weight: 0.1,
            max_resets: 5,
            cloud_points: 2000,
            snap_contour: true,
            alternate: false,
            clusters: 3,
            restarts: 20,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Validation(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Validation(format!("config key `{key}` needs a boolean, got `{v}`"))),
            }
        }
        let key = key.replace('-', "_");
        match key.as_str() {
            "iterations" => self.iterations = num(&key, value)?,
            "fit_lr" => self.lr = num(&key, value)?,
            "fit_lr_decay" => self.lr_decay = num(&key, value)?,
            "fit_decay_interval" => self.decay_interval = num(&key, value)?,
            "sigma" => self.sigma = num(&key, value)?,
            "w_fit_cham" => self.chamfer_weight = num(&key, value)?,
            "w_reg" => self.reg_weight = num(&key, value)?,
            "w_anc" => self.anchor_weight = num(&key, value)?,
            "max_resets" => self.max_resets = num(&key, value)?,
            "fit_cloud_points" => self.cloud_points = num(&key, value)?,
            "snap_contour" => self.snap_contour = flag(&key, value)?,
            "alternate" => self.alternate = flag(&key, value)?,
            "clusters" => self.clusters = num(&key, value)?,
            "restarts" => self.restarts = num(&key, value)?,
            "seed" => self.seed = num(&key, value)?,
            k => return Err(Error::Validation(format!("unknown fitting config key `{k}`"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("iterations", self.iterations.to_string()),
            ("fit_lr", self.lr.to_string()),
            ("fit_lr_decay", self.lr_decay.to_string()),
            ("fit_decay_interval", self.decay_interval.to_string()),
            ("sigma", self.sigma.to_string()),
            ("w_fit_cham", self.chamfer_weight.to_string()),
            ("w_reg", self.reg_weight.to_string()),
            ("w_anc", self.anchor_weight.to_string()),
            ("max_resets", self.max_resets.to_string()),
            ("fit_cloud_points", self.cloud_points.to_string()),
            ("snap_contour", self.snap_contour.to_string()),
            ("alternate", self.alternate.to_string()),
            ("clusters", self.clusters.to_string()),
            ("restarts", self.restarts.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Validation, "fitting learning rate must be positive");
        ensure!(self.lr_decay > 0.0 && self.lr_decay <= 1.0, Validation, "fitting lr decay must be in (0, 1]");
        ensure!(self.decay_interval >= 1 && self.cloud_points >= 1, Validation, "fitting intervals must be positive");
        ensure!(self.sigma > 0.0, Validation, "sigma must be positive");
        ensure!(
            [self.chamfer_weight, self.reg_weight, self.anchor_weight].iter().all(|w| *w >= 0.0 && w.is_finite()),
            Validation,
            "fitting weights must be nonnegative"
        );
        ensure!(self.clusters >= 1 && self.restarts >= 1, Validation, "clustering needs at least one cluster and restart");
        Ok(())
    }
}

/// Outcome of refining one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub zs: Vec<f64>,
    pub zd: Vec<f64>,
    /// Flat base of the best iterate.
    pub base: BaseMesh,
    /// Deformed leaf of the best iterate.
    pub mesh: TriMesh,
    /// Surface chamfer between the full observation and `mesh`.
    pub residual: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    /// Objective at every evaluated iterate.
    pub losses: Vec<f64>,
    pub resets: usize,
}

impl FitResult {
    /// Lowest objective seen up to each iterate.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.losses
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }
}

/// Base-mesh vertices with every contour vertex moved along the decoded
/// field gradient onto its zero level, `p - f grad f / |grad f|^2`. The shift
/// is clamped to one raster cell per axis.
pub fn record_snapped_vertices(
    tape: &mut Tape,
    shape: &ShapeModel,
    bound: &crate::engine::Bound,
    zs: Var,
    base: &BaseMesh,
) -> Result<Var> {
    let n = base.mesh.vertices.len();
    let all = tape.constant(Tensor::from_points(&base.mesh.vertices));
    if base.contour.is_empty() {
        return Ok(all);
    }
    let m = base.contour.len();
    let uv = Tensor::matrix(
        m,
        2,
        base.contour.iter().flat_map(|&i| [base.mesh.vertices[i][0], base.mesh.vertices[i][1]]).collect(),
    )?;
    let uv = tape.constant(uv);
    let (f, du, dv) = shape.decoder.record_with_gradient(tape, bound, uv, zs)?;
    let du2 = tape.square(du);
    let dv2 = tape.square(dv);
    let g2 = tape.add(du2, dv2);
    let g2 = tape.add_const(g2, 1e-12);
    let s = tape.div(f, g2);
    let cell = 1.0 / shape.mesh_res as f64;
    let ou = tape.mul(s, du);
    let ou = tape.scale(ou, -1.0);
    let ou = tape.clamp(ou, -cell, cell);
    let ov = tape.mul(s, dv);
    let ov = tape.scale(ov, -1.0);
    let ov = tape.clamp(ov, -cell, cell);
    let zero = tape.constant(Tensor::zeros(m, 1));
    let offsets = tape.concat(&[ou, ov, zero]);
    let scatter = SparseMatrix::from_triplets(n, m, base.contour.iter().enumerate().map(|(k, &i)| (i, k, 1.0)).collect());
    let full = tape.sparse_matmul(Rc::new(scatter), offsets);
    Ok(tape.add(all, full))
}

fn bind_models(tape: &mut Tape, shape: &ShapeModel, deform: &DeformModel) -> crate::engine::Bound {
    let mut bound = deform.params.bind_frozen(tape);
    bound.merge(shape.params.bind_selected(tape, &[&format!("{SHAPE_NET}.")], false));
    bound
}

/// Flat base and deformed leaf for a latent pair, as the fitter sees it.
pub fn generate_leaf(
    shape: &ShapeModel,
    deform: &DeformModel,
    zs: &[f64],
    zd: &[f64],
    snap_contour: bool,
) -> Result<(BaseMesh, TriMesh)> {
    let mut base = shape.decoded_mesh(zs)?;
    let mut tape = Tape::new();
    let bound = bind_models(&mut tape, shape, deform);
    let zsv = tape.constant(Tensor::row(zs));
    let zdv = tape.constant(Tensor::row(zd));
    let verts = if snap_contour {
        record_snapped_vertices(&mut tape, shape, &bound, zsv, &base)?
    } else {
        tape.constant(Tensor::from_points(&base.mesh.vertices))
    };
    let flat = tape.value(verts).to_points();
    let moved = deform.model.record_deform(&mut tape, &bound, zsv, zdv, verts, BlendMode::Pivoted)?;
    let mesh = TriMesh::new(tape.value(moved).to_points(), base.mesh.faces.clone())?;
    base.mesh.vertices = flat;
    Ok((base, mesh))
}

/// Random latent pair inside the trained range: each latent is a random
/// convex combination of two rows of its training table.
pub fn sample_trained_latents(
    shape: &ShapeModel,
    deform: &DeformModel,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    fn mix(t: &Tensor, rng: &mut impl Rng) -> Vec<f64> {
        let (i, j) = (rng.gen_range(0..t.rows()), rng.gen_range(0..t.rows()));
        let a: f64 = rng.gen();
        t.row_slice(i).iter().zip(t.row_slice(j)).map(|(x, y)| (1.0 - a) * x + a * y).collect()
    }
    Ok((mix(shape.latent_table()?, rng), mix(deform.latent_table()?, rng)))
}

/// Gradient descent on `(z_s, z_d)` against a bidirectional chamfer plus the
/// latent prior, and optionally an anchor pull on `z_s`. The decoders stay
/// fixed; the base mesh is re-extracted every iteration. Returns the iterate
/// with the lowest objective.
pub fn refine_fit(
    shape: &ShapeModel,
    deform: &DeformModel,
    zs0: &[f64],
    zd0: &[f64],
    cloud: &[[f64; 3]],
    anchor: Option<&[f64]>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    ensure!(!cloud.is_empty(), Validation, "observation is empty");
    ensure!(zs0.len() == shape.decoder.latent_dim, Dimension, "shape latent has {} values", zs0.len());
    ensure!(zd0.len() == deform.model.deform_dim, Dimension, "deformation latent has {} values", zd0.len());
    if let Some(a) = anchor {
        ensure!(a.len() == zs0.len(), Dimension, "anchor latent has {} values", a.len());
    }
    let target = crate::training::subsample(cloud, cfg.cloud_points);
    let mut latents = ParamSet::new();
    latents.insert(ZS, Tensor::row(zs0));
    latents.insert(ZD, Tensor::row(zd0));
    let adam = Adam::default();
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>, BaseMesh, Vec<[f64; 3]>)> = None;
    let mut resets = 0;
    let mut it = 0;
    while it <= cfg.iterations {
        let zs_now = latents.value(ZS)?.data().to_vec();
        let zd_now = latents.value(ZD)?.data().to_vec();
        let base = match shape.decoded_mesh(&zs_now) {
            Ok(b) => b,
            Err(Error::Degenerate(msg)) => {
                resets += 1;
                ensure!(resets <= cfg.max_resets, Numerical, "base shape degenerated {resets} times: {msg}");
                latents.set(ZS, Tensor::row(&zs_now.iter().map(|v| v * 0.5).collect::<Vec<_>>()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let shape_phase = !cfg.alternate || it % 2 == 0;
        let deform_phase = !cfg.alternate || it % 2 == 1;
        let mut tape = Tape::new();
        let bound = bind_models(&mut tape, shape, deform);
        let zs = if shape_phase { tape.leaf(ZS, Tensor::row(&zs_now)) } else { tape.constant(Tensor::row(&zs_now)) };
        let zd = if deform_phase { tape.leaf(ZD, Tensor::row(&zd_now)) } else { tape.constant(Tensor::row(&zd_now)) };
        let verts = if cfg.snap_contour {
            record_snapped_vertices(&mut tape, shape, &bound, zs, &base)?
        } else {
            tape.constant(Tensor::from_points(&base.mesh.vertices))
        };
        let moved = deform.model.record_deform(&mut tape, &bound, zs, zd, verts, BlendMode::Pivoted)?;
        let obs = tape.constant(Tensor::from_points(&target));
        let cham = record::chamfer(&mut tape, moved, obs);
        let rs = record::latent(&mut tape, zs, cfg.sigma);
        let rd = record::latent(&mut tape, zd, cfg.sigma);
        let reg = tape.add(rs, rd);
        let c = tape.scale(cham, cfg.chamfer_weight);
        let r = tape.scale(reg, cfg.reg_weight);
        let mut total = tape.add(c, r);
        if let (Some(a), true) = (anchor, cfg.anchor_weight > 0.0) {
            let l = record::anchor(&mut tape, zs, a);
            let l = tape.scale(l, cfg.anchor_weight);
            total = tape.add(total, l);
        }
        let loss = tape.scalar_value(total);
        ensure!(loss.is_finite(), Numerical, "fitting objective is not finite at iteration {it}");
        losses.push(loss);
        if best.as_ref().map_or(true, |b| loss < b.0) {
            let flat = tape.value(verts).to_points();
            let mut b = base.clone();
            b.mesh.vertices = flat;
            best = Some((loss, it, zs_now.clone(), zd_now.clone(), b, tape.value(moved).to_points()));
        }
        if it < cfg.iterations {
            let grads = tape.backward(total)?.into_named();
            adam.update(&mut latents, &grads, decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_interval, it))?;
        }
        it += 1;
    }
    let (_, best_iteration, zs, zd, base, moved) = best.expect("at least one iterate");
    let mesh = TriMesh::new(moved, base.mesh.faces.clone())?;
    let residual = metric_surface_chamfer(cloud, &mesh)?;
    Ok(FitResult { zs, zd, base, mesh, residual, iterations: cfg.iterations, best_iteration, losses, resets })
}
