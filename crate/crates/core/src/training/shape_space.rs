//! Auto-decoder training of the base-shape space.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{average_reports, SdfPrep, init_latent_rows, pack_latent_rows, plateaued, row_name, step_seed, TrainConfig, TrainLog};
use crate::engine::{decayed_lr, Adam, ParamSet, Tape, Tensor};
use crate::error::{ensure, Error, Result};
use crate::io::Checkpoint;
use crate::losses::{record, LossReport};
use crate::sdf::{jump_flood_sdf, sample_training_points, Mask2D, SdfGrid2D};
use crate::shape::{BaseMesh, ShapeDecoder, SHAPE_LATENTS, SHAPE_NET};

/// Learnable silhouette sharpness `k` (`1 x 1`).
pub const SIL_SHARPNESS: &str = "sil_sharpness";

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub id: String,
    pub mask: Mask2D,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeDataset {
    pub samples: Vec<ShapeSample>,
}

impl ShapeDataset {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.samples.is_empty(), Validation, "shape dataset is empty");
        let ids: BTreeSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ensure!(ids.len() == self.samples.len(), Validation, "shape dataset ids are not unique");
        for s in &self.samples {
            s.mask.validate()?;
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

/// Trained shape decoder with its latent table.
#[derive(Clone, Debug)]
pub struct ShapeModel {
    pub decoder: ShapeDecoder,
    pub params: ParamSet,
    pub ids: Vec<String>,
    pub mesh_res: usize,
}

impl ShapeModel {
    pub fn latent_table(&self) -> Result<&Tensor> {
        self.params.value(SHAPE_LATENTS)
    }

    pub fn latent(&self, i: usize) -> Result<Vec<f64>> {
        let t = self.latent_table()?;
        ensure!(i < t.rows(), Validation, "shape latent index {i} out of range");
        Ok(t.row_slice(i).to_vec())
    }

    pub fn latent_by_id(&self, id: &str) -> Result<Vec<f64>> {
        let i = self.ids.iter().position(|x| x == id).ok_or_else(|| Error::Validation(format!("unknown shape id `{id}`")))?;
        self.latent(i)
    }

    pub fn sharpness(&self) -> f64 {
        self.params.get(SIL_SHARPNESS).map(|t| t.data()[0].max(1.0)).unwrap_or(50.0)
    }

    pub fn decoded_mask(&self, z: &[f64], res: usize) -> Result<Mask2D> {
        self.decoder.decoded_mask(&self.params, z, res, self.sharpness())
    }

    pub fn decoded_mesh(&self, z: &[f64]) -> Result<BaseMesh> {
        self.decoder.decoded_mesh(&self.params, z, self.mesh_res, self.sharpness())
    }

    /// Self-reconstruction IoU of every training mask.
    pub fn reconstruction_iou(&self, dataset: &ShapeDataset) -> Result<Vec<f64>> {
        dataset
            .samples
            .iter()
            .map(|s| {
                let z = self.latent_by_id(&s.id)?;
                let m = self.decoded_mask(&z, s.mask.width())?;
                m.iou(&s.mask)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_params(&self.params);
        c.meta.insert("kind".into(), "shape".into());
        c.meta.insert("shape_dim".into(), self.decoder.latent_dim.to_string());
        c.meta.insert("hidden".into(), self.decoder.spec.layer_widths[0].to_string());
        c.meta.insert("depth".into(), (self.decoder.spec.layer_widths.len() - 1).to_string());
        c.meta.insert("mesh_res".into(), self.mesh_res.to_string());
        c.meta.insert("ids".into(), self.ids.join(","));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        ensure!(c.meta_str("kind")? == "shape", Incompatible, "checkpoint is not a shape model");
        let decoder = ShapeDecoder::new(c.meta_parse("shape_dim")?, c.meta_parse("hidden")?, c.meta_parse("depth")?)?;
        let params = c.to_params();
        decoder.spec.check_params(SHAPE_NET, &params)?;
        let ids: Vec<String> = c.meta_str("ids")?.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
        let t = params.value(SHAPE_LATENTS)?;
        ensure!(
            t.rows() == ids.len() && t.cols() == decoder.latent_dim,
            Incompatible,
            "shape latent table is {}x{}, expected {}x{}",
            t.rows(),
            t.cols(),
            ids.len(),
            decoder.latent_dim
        );
        Ok(Self { decoder, params, ids, mesh_res: c.meta_parse("mesh_res")? })
    }
}

/// Maps raw distances to training targets. Returns the per-mask scale
/// applied before the loss clamp, and the clamp itself.
pub fn sdf_target_scale(grid: &SdfGrid2D, prep: SdfPrep, truncation: f64) -> (f64, f64) {
    match prep {
        SdfPrep::Raw => (1.0, truncation),
        SdfPrep::NormalizeThenTruncate => {
            let m = grid.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / m, truncation)
        }
        SdfPrep::TruncateThenNormalize => (1.0 / truncation, 1.0),
    }
}

fn shape_step(
    decoder: &ShapeDecoder,
    params: &ParamSet,
    latent: &str,
    samples: &[crate::sdf::SdfSample],
    eik_uv: &[[f64; 2]],
    delta: f64,
    cfg: &TrainConfig,
) -> Result<(LossReport, std::collections::BTreeMap<String, Tensor>)> {
    let w = &cfg.weights;
    let mut tape = Tape::new();
    let bound = params.bind_selected(&mut tape, &[&format!("{SHAPE_NET}."), SIL_SHARPNESS, latent], true);
    let z = bound.get(latent);
    let uv = tape.constant(Tensor::from_raw(samples.len(), 2, samples.iter().flat_map(|s| s.uv).collect()));
    let truth: Vec<f64> = samples.iter().map(|s| s.d).collect();
    let f = decoder.record(&mut tape, &bound, uv, z)?;

    let l_sdf = record::sdf(&mut tape, f, &truth, delta);
    let k = tape.clamp(bound.get(SIL_SHARPNESS), 1.0, 1e6);
    let kf = tape.mul(f, k);
    let soft = tape.sigmoid(kf);
    let inside = Tensor::from_raw(truth.len(), 1, truth.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect());
    let inside = tape.constant(inside);
    let diff = tape.sub(soft, inside);
    let diff = tape.abs(diff);
    let l_sil = tape.mean(diff);
    let l_eik = if eik_uv.is_empty() || w.eikonal == 0.0 {
        None
    } else {
        let q = tape.constant(Tensor::from_raw(eik_uv.len(), 2, eik_uv.iter().flat_map(|p| *p).collect()));
        let (_, du, dv) = decoder.record_with_gradient(&mut tape, &bound, q, z)?;
        Some(record::eikonal(&mut tape, du, dv))
    };
    let l_lat = record::latent(&mut tape, z, cfg.sigma);

    let mut terms = vec![("sdf", w.sdf, l_sdf), ("sil", w.silhouette, l_sil), ("lat", w.latent, l_lat)];
    if let Some(e) = l_eik {
        terms.push(("eik", w.eikonal, e));
    }
    let mut report = LossReport::default();
    let mut total = None;
    for (name, weight, var) in terms {
        report.add(name, weight, tape.scalar_value(var));
        let s = tape.scale(var, weight);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    let grads = tape.backward(total.expect("at least one term"))?.into_named();
    Ok((report, grads))
}

/// Jointly optimizes the decoder, the silhouette sharpness and one latent per
/// sample. One sample per step; the sample order is reshuffled every epoch.
pub fn train_shape_space(dataset: &ShapeDataset, cfg: &TrainConfig) -> Result<(ShapeModel, TrainLog)> {
    cfg.validate()?;
    dataset.validate()?;
    let n = dataset.samples.len();
    let decoder = ShapeDecoder::new(cfg.shape_dim, cfg.hidden, cfg.depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    decoder.init_params(&mut params, &mut rng, 0.5);
    params.insert(SIL_SHARPNESS, Tensor::scalar(cfg.sil_sharpness));
    init_latent_rows(&mut params, SHAPE_LATENTS, n, cfg.shape_dim, cfg.latent_init_std, &mut rng);
    let grids = dataset.samples.iter().map(|s| jump_flood_sdf(&s.mask, false)).collect::<Result<Vec<_>>>()?;
    let scales: Vec<(f64, f64)> = grids.iter().map(|g| sdf_target_scale(g, cfg.sdf_prep, cfg.truncation)).collect();

    let adam = Adam::default();
    let mut log = TrainLog::default();
    let mut last_good = params.clone();
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_interval, epoch);
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(n);
        for &i in &order {
            let (scale, delta) = scales[i];
            let mut samples = sample_training_points(&grids[i], cfg.batch_size, step_seed(cfg.seed, epoch, i))?;
            samples.iter_mut().for_each(|s| s.d *= scale);
            let eik_uv: Vec<[f64; 2]> = (0..cfg.eik_points).map(|_| [rng.gen(), rng.gen()]).collect();
            let (report, grads) = shape_step(&decoder, &params, &row_name(SHAPE_LATENTS, i), &samples, &eik_uv, delta, cfg)?;
            if !report.is_finite() {
                log.diverged = true;
                params = last_good;
                break 'epochs;
            }
            adam.update(&mut params, &grads, lr)?;
            reports.push(report);
        }
        let avg = average_reports(&reports);
        log::debug!("shape epoch {epoch}: {avg}");
        log.epochs.push(avg);
        last_good = params.clone();
        if cfg.early_stop && plateaued(&log.totals(), cfg.plateau_window, cfg.plateau_tol) {
            log.stopped_early = true;
            break;
        }
    }
    pack_latent_rows(&mut params, SHAPE_LATENTS, n)?;
    let ids = dataset.samples.iter().map(|s| s.id.clone()).collect();
    Ok((ShapeModel { decoder, params, ids, mesh_res: cfg.mesh_res }, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 5e-3,
            batch_size: 256,
            eik_points: 64,
            hidden: 32,
            depth: 3,
            shape_dim: 4,
            mesh_res: 16,
            early_stop: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_disk_is_learned() {
        let mask = Mask2D::from_fn(64, |u, v| (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.3 * 0.3).unwrap();
        let ds = ShapeDataset { samples: vec![ShapeSample { id: "disk".into(), mask }] };
        let cfg = TrainConfig { epochs: 500, early_stop: false, ..TrainConfig::default() };
        let (model, log) = train_shape_space(&ds, &cfg).unwrap();
        let iou = model.reconstruction_iou(&ds).unwrap();
        assert!(iou[0] > 0.98, "iou {iou:?}");
        assert!(!log.diverged);
        let back = ShapeModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back.ids, model.ids);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = super::super::generate_synthetic_dataset(2, 5, 32).unwrap().shapes;
        let (a, la) = train_shape_space(&ds, &small_cfg(3)).unwrap();
        let (b, lb) = train_shape_space(&ds, &small_cfg(3)).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(la, lb);
    }
}
