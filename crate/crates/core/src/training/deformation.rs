//! Two-stage training of the deformation space.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::DeformTruth;
use super::{
    average_reports, init_latent_rows, pack_latent_rows, plateaued, row_name, select_similar_shapes, unpack_latent_rows,
    ShapeDataset, ShapeModel, TrainConfig, TrainLog,
};
use crate::deform::{BlendMode, DeformationModel, CONTROL_POINTS, DEFORM_LATENTS, SKIN_NET, TRANSFORM_NET};
use crate::engine::{decayed_lr, Adam, Bound, ParamSet, SparseMatrix, Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::io::Checkpoint;
use crate::losses::{boundary_corners, record, uniform_laplacian, BoundaryCorner, LossReport};
use crate::shape::BaseMesh;

/// Learnable target ratio of the mapping loss (`1 x 1`).
pub const MAP_PHI: &str = "map_phi";

/// A base leaf and an observation of it after deformation, in the base's UV
/// frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformPair {
    pub id: String,
    pub base_id: String,
    pub cloud: Vec<[f64; 3]>,
    pub truth: Option<DeformTruth>,
}

/// Base-mesh data needed to deform a shape latent.
#[derive(Clone, Debug)]
pub struct PairBase {
    pub zs: Vec<f64>,
    pub base: BaseMesh,
    pub lap: Rc<SparseMatrix>,
    pub corners: Vec<BoundaryCorner>,
}

impl PairBase {
    pub fn new(shape: &ShapeModel, zs: Vec<f64>) -> Result<Self> {
        let base = shape.decoded_mesh(&zs)?;
        let lap = Rc::new(uniform_laplacian(&base.mesh));
        let corners = boundary_corners(&base.mesh, &base.contour);
        Ok(Self { zs, base, lap, corners })
    }
}

/// Trained deformation networks, control points and per-pair latents.
#[derive(Clone, Debug)]
pub struct DeformModel {
    pub model: DeformationModel,
    pub params: ParamSet,
    pub pair_ids: Vec<String>,
    pub base_ids: Vec<String>,
    pub stage: u32,
}

impl DeformModel {
    pub fn latent_table(&self) -> Result<&Tensor> {
        self.params.value(DEFORM_LATENTS)
    }

    pub fn latent(&self, i: usize) -> Result<Vec<f64>> {
        let t = self.latent_table()?;
        ensure!(i < t.rows(), Validation, "deformation latent index {i} out of range");
        Ok(t.row_slice(i).to_vec())
    }

    /// Deformed vertices of `base` under `(zs, zd)`.
    pub fn deform(&self, zs: &[f64], zd: &[f64], base: &BaseMesh) -> Result<Vec<[f64; 3]>> {
        self.model.deform(&self.params, zs, zd, &base.mesh.vertices, BlendMode::Pivoted)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_params(&self.params);
        let m = &self.model;
        for (k, v) in [
            ("kind", "deform".to_string()),
            ("k_control", m.control_count.to_string()),
            ("deform_dim", m.deform_dim.to_string()),
            ("shape_dim", m.shape_dim.to_string()),
            ("hidden", m.transform.layer_widths[0].to_string()),
            ("depth", (m.transform.layer_widths.len() - 1).to_string()),
            ("pe_order", m.pe_order.to_string()),
            ("stage", self.stage.to_string()),
            ("pair_ids", self.pair_ids.join(",")),
            ("base_ids", self.base_ids.join(",")),
        ] {
            c.meta.insert(k.into(), v);
        }
        c
    }

    /// Restores a model; `expected_k` rejects checkpoints with a different
    /// control-point count.
    pub fn from_checkpoint(c: &Checkpoint, expected_k: Option<usize>) -> Result<Self> {
        ensure!(c.meta_str("kind")? == "deform", Incompatible, "checkpoint is not a deformation model");
        let k: usize = c.meta_parse("k_control")?;
        if let Some(e) = expected_k {
            ensure!(e == k, Incompatible, "checkpoint has {k} control points, configuration expects {e}");
        }
        let model = DeformationModel::new(
            k,
            c.meta_parse("deform_dim")?,
            c.meta_parse("shape_dim")?,
            c.meta_parse("hidden")?,
            c.meta_parse("depth")?,
            c.meta_parse("pe_order")?,
        )?;
        let params = c.to_params();
        model.check_params(&params)?;
        let split = |key: &str| -> Result<Vec<String>> {
            Ok(c.meta_str(key)?.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
        };
        let pair_ids = split("pair_ids")?;
        let base_ids = split("base_ids")?;
        let t = params.value(DEFORM_LATENTS)?;
        ensure!(
            t.rows() == pair_ids.len() && t.cols() == model.deform_dim && base_ids.len() == pair_ids.len(),
            Incompatible,
            "deformation latent table does not match the pair list"
        );
        Ok(Self { model, params, pair_ids, base_ids, stage: c.meta_parse("stage")? })
    }
}

/// Evenly strided subset of at most `n` points.
pub(crate) fn subsample(points: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    if points.len() <= n {
        return points.to_vec();
    }
    (0..n).map(|k| points[k * points.len() / n]).collect()
}

/// Weighted sum of tape scalars with a matching report.
pub(crate) struct Objective {
    pub report: LossReport,
    total: Option<Var>,
}

impl Objective {
    pub fn new() -> Self {
        Self { report: LossReport::default(), total: None }
    }

    pub fn push(&mut self, tape: &mut Tape, name: &str, weight: f64, term: Var) {
        self.report.add(name, weight, tape.scalar_value(term));
        if weight == 0.0 {
            return;
        }
        let s = tape.scale(term, weight);
        self.total = Some(match self.total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }

    pub fn backward(self, tape: &Tape) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
        let grads = match self.total {
            Some(t) => tape.backward(t)?.into_named(),
            None => BTreeMap::new(),
        };
        Ok((self.report, grads))
    }
}

/// Stage-one terms of one pair: chamfer to the target, edge-length and
/// Laplacian regularizers, mapping loss and latent prior.
fn pair_terms(
    tape: &mut Tape,
    obj: &mut Objective,
    model: &DeformationModel,
    bound: &Bound,
    zd: Var,
    pb: &PairBase,
    cloud: &[[f64; 3]],
    cfg: &TrainConfig,
) -> Result<Var> {
    let w = &cfg.weights;
    let zs = tape.constant(Tensor::row(&pb.zs));
    let verts = tape.constant(Tensor::from_points(&pb.base.mesh.vertices));
    let deformed = model.record_deform(tape, bound, zs, zd, verts, BlendMode::Pivoted)?;
    let target = tape.constant(Tensor::from_points(cloud));
    let cham = record::chamfer(tape, deformed, target);
    obj.push(tape, "cham", w.chamfer, cham);
    let leng = record::edge_length(tape, &pb.base.mesh, deformed);
    obj.push(tape, "leng", w.edge_length, leng);
    let lap = record::laplacian(tape, pb.lap.clone(), deformed);
    obj.push(tape, "lap", w.laplacian, lap);
    if w.map > 0.0 {
        let moved = tape.chamfer(verts, deformed, true);
        let map = record::map(tape, moved, zd, bound.get(MAP_PHI));
        obj.push(tape, "map", w.map, map);
    }
    let lat = record::latent(tape, zd, cfg.sigma);
    obj.push(tape, "lat", w.latent, lat);
    Ok(deformed)
}

fn resolve_bases(pairs: &[DeformPair], shape: &ShapeModel) -> Result<Vec<Rc<PairBase>>> {
    let mut cache: BTreeMap<String, Rc<PairBase>> = BTreeMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !cache.contains_key(&p.base_id) {
            let zs = shape.latent_by_id(&p.base_id)?;
            cache.insert(p.base_id.clone(), Rc::new(PairBase::new(shape, zs)?));
        }
        out.push(cache[&p.base_id].clone());
    }
    Ok(out)
}

fn trainable_prefixes(cfg: &TrainConfig) -> Vec<String> {
    let mut p = vec![format!("{TRANSFORM_NET}."), format!("{SKIN_NET}."), MAP_PHI.to_string()];
    if cfg.optimize_controls {
        p.push(CONTROL_POINTS.to_string());
    }
    p
}

fn bind(params: &ParamSet, tape: &mut Tape, trainable: &[String], extra_trainable: &[String]) -> Bound {
    let mut names: Vec<&str> = trainable.iter().map(String::as_str).collect();
    names.extend(extra_trainable.iter().map(String::as_str));
    let mut bound = params.bind_selected(tape, &names, true);
    if !names.contains(&CONTROL_POINTS) {
        bound.merge(params.bind_selected(tape, &[CONTROL_POINTS], false));
    }
    bound
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    log: TrainLog,
    last_good: ParamSet,
}

impl<'a> Loop<'a> {
    /// Returns `false` when training must stop.
    fn end_epoch(&mut self, params: &mut ParamSet, reports: &[LossReport], what: &str, epoch: usize) -> bool {
        let avg = average_reports(reports);
        log::debug!("{what} epoch {epoch}: {avg}");
        self.log.epochs.push(avg);
        self.last_good = params.clone();
        if self.cfg.early_stop && plateaued(&self.log.totals(), self.cfg.plateau_window, self.cfg.plateau_tol) {
            self.log.stopped_early = true;
            return false;
        }
        true
    }
}

/// Correspondence-free first stage: optimizes the per-pair deformation
/// latents, the control points, both deformation networks and the mapping
/// ratio. The shape model is read-only.
pub fn train_deformation_stage1(
    pairs: &[DeformPair],
    shape: &ShapeModel,
    cfg: &TrainConfig,
) -> Result<(DeformModel, TrainLog)> {
    cfg.validate()?;
    ensure!(!pairs.is_empty(), Validation, "deformation training needs at least one pair");
    ensure!(pairs.iter().all(|p| !p.cloud.is_empty()), Validation, "every pair needs a non-empty target cloud");
    let bases = resolve_bases(pairs, shape)?;
    let clouds: Vec<Vec<[f64; 3]>> = pairs.iter().map(|p| subsample(&p.cloud, cfg.cloud_points)).collect();
    let model = DeformationModel::new(
        cfg.control_points,
        cfg.deform_dim,
        shape.decoder.latent_dim,
        cfg.deform_hidden,
        cfg.deform_depth,
        cfg.pe_order,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    model.init_params(&mut params, &mut rng)?;
    params.insert(MAP_PHI, Tensor::scalar(0.0));
    init_latent_rows(&mut params, DEFORM_LATENTS, pairs.len(), cfg.deform_dim, cfg.latent_init_std, &mut rng);

    let adam = Adam::default();
    let prefixes = trainable_prefixes(cfg);
    let mut lp = Loop { cfg, log: TrainLog::default(), last_good: params.clone() };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_interval, epoch);
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(pairs.len());
        for &i in &order {
            let latent = row_name(DEFORM_LATENTS, i);
            let mut tape = Tape::new();
            let bound = bind(&params, &mut tape, &prefixes, std::slice::from_ref(&latent));
            let mut obj = Objective::new();
            pair_terms(&mut tape, &mut obj, &model, &bound, bound.get(&latent), &bases[i], &clouds[i], cfg)?;
            let (report, grads) = obj.backward(&tape)?;
            if !report.is_finite() {
                lp.log.diverged = true;
                params = lp.last_good.clone();
                break 'epochs;
            }
            adam.update(&mut params, &grads, lr)?;
            reports.push(report);
        }
        if !lp.end_epoch(&mut params, &reports, "deform stage 1", epoch) {
            break;
        }
    }
    pack_latent_rows(&mut params, DEFORM_LATENTS, pairs.len())?;
    let out = DeformModel {
        model,
        params,
        pair_ids: pairs.iter().map(|p| p.id.clone()).collect(),
        base_ids: pairs.iter().map(|p| p.base_id.clone()).collect(),
        stage: 1,
    };
    Ok((out, lp.log))
}

/// Second stage: keeps the stage-one objective on every pair and, for a base
/// drawn from the pair's most similar pool shapes, adds a skinning-similarity
/// penalty at the pair's vertex locations plus boundary-length and
/// boundary-angle terms on that base deformed with the pair's latent. Pair
/// latents stay fixed.
pub fn train_deformation_stage2(
    stage1: &DeformModel,
    shape: &ShapeModel,
    pool: &ShapeDataset,
    pairs: &[DeformPair],
    cfg: &TrainConfig,
) -> Result<(DeformModel, TrainLog)> {
    cfg.validate()?;
    ensure!(
        pairs.len() == stage1.pair_ids.len() && pairs.iter().zip(&stage1.pair_ids).all(|(p, id)| &p.id == id),
        Contract,
        "stage two needs the pairs of the stage-one checkpoint"
    );
    pool.validate()?;
    let bases = resolve_bases(pairs, shape)?;
    let clouds: Vec<Vec<[f64; 3]>> = pairs.iter().map(|p| subsample(&p.cloud, cfg.cloud_points)).collect();
    let pool_pairs: Vec<(String, crate::sdf::Mask2D)> =
        pool.samples.iter().map(|s| (s.id.clone(), s.mask.clone())).collect();
    let mut similar: Vec<Vec<Rc<PairBase>>> = Vec::with_capacity(pairs.len());
    let mut pool_cache: BTreeMap<String, Rc<PairBase>> = BTreeMap::new();
    for p in pairs {
        let query = match pool.index_of(&p.base_id) {
            Some(k) => pool.samples[k].mask.clone(),
            None => {
                let res = pool.samples[0].mask.width();
                shape.decoded_mask(&shape.latent_by_id(&p.base_id)?, res)?
            }
        };
        let others: Vec<(String, crate::sdf::Mask2D)> =
            pool_pairs.iter().filter(|(id, _)| id != &p.base_id).cloned().collect();
        let ranked = if others.is_empty() { Vec::new() } else { select_similar_shapes(&query, &others, cfg.similar)? };
        let mut list = Vec::new();
        for (id, _) in ranked {
            if !pool_cache.contains_key(&id) {
                let zs = shape.latent_by_id(&id)?;
                pool_cache.insert(id.clone(), Rc::new(PairBase::new(shape, zs)?));
            }
            list.push(pool_cache[&id].clone());
        }
        similar.push(list);
    }

    let model = stage1.model.clone();
    let mut params = stage1.params.clone();
    let n = unpack_latent_rows(&mut params, DEFORM_LATENTS)?;
    ensure!(n == pairs.len(), Contract, "latent table does not match the pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let adam = Adam::default();
    let prefixes = trainable_prefixes(cfg);
    let w = &cfg.weights;
    let mut lp = Loop { cfg, log: TrainLog::default(), last_good: params.clone() };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_interval, epoch);
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(pairs.len());
        for &i in &order {
            let mut tape = Tape::new();
            let bound = bind(&params, &mut tape, &prefixes, &[]);
            let zd = tape.constant(params.value(&row_name(DEFORM_LATENTS, i))?.clone());
            let mut obj = Objective::new();
            let pb = &bases[i];
            pair_terms(&mut tape, &mut obj, &model, &bound, zd, pb, &clouds[i], cfg)?;
            if !similar[i].is_empty() {
                let other = &similar[i][rng.gen_range(0..similar[i].len())];
                let verts = tape.constant(Tensor::from_points(&pb.base.mesh.vertices));
                let zs_i = tape.constant(Tensor::row(&pb.zs));
                let zs_j = tape.constant(Tensor::row(&other.zs));
                let wi = model.record_skinning(&mut tape, &bound, zs_i, verts)?;
                let wj = model.record_skinning(&mut tape, &bound, zs_j, verts)?;
                let d = tape.sub(wi, wj);
                let d = tape.square(d);
                let d = tape.row_sum(d);
                let sim = tape.mean(d);
                obj.push(&mut tape, "skin", cfg.skin_similarity, sim);

                let ov = tape.constant(Tensor::from_points(&other.base.mesh.vertices));
                let moved = model.record_deform(&mut tape, &bound, zs_j, zd, ov, BlendMode::Pivoted)?;
                let contour = &other.base.contour;
                let bl = record::boundary_length(&mut tape, contour, &other.base.mesh.vertices, moved);
                obj.push(&mut tape, "bound", w.boundary / contour.len().max(1) as f64, bl);
                if !other.corners.is_empty() {
                    let ang = record::face_angle(&mut tape, &other.corners, moved);
                    obj.push(&mut tape, "ang", w.angle / other.corners.len() as f64, ang);
                }
            }
            let (report, grads) = obj.backward(&tape)?;
            if !report.is_finite() {
                lp.log.diverged = true;
                params = lp.last_good.clone();
                break 'epochs;
            }
            adam.update(&mut params, &grads, lr)?;
            reports.push(report);
        }
        if !lp.end_epoch(&mut params, &reports, "deform stage 2", epoch) {
            break;
        }
    }
    pack_latent_rows(&mut params, DEFORM_LATENTS, pairs.len())?;
    let out = DeformModel { model, params, pair_ids: stage1.pair_ids.clone(), base_ids: stage1.base_ids.clone(), stage: 2 };
    Ok((out, lp.log))
}

/// Latent norms and base-to-deformed chamfer per pair, for checking that
/// latent size tracks deformation size.
pub fn latent_norm_vs_motion(model: &DeformModel, shape: &ShapeModel) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, base_id) in model.base_ids.iter().enumerate() {
        let zs = shape.latent_by_id(base_id)?;
        let pb = PairBase::new(shape, zs)?;
        let zd = model.latent(i)?;
        let moved = model.deform(&pb.zs, &zd, &pb.base)?;
        let c = crate::losses::chamfer(&pb.base.mesh.vertices, &moved, true)?;
        out.push((zd.iter().map(|x| x * x).sum::<f64>().sqrt(), c));
    }
    Ok(out)
}
