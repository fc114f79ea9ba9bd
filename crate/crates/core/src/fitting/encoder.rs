//! Volumetric encoders that predict initial latents from a distance grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{generate_leaf, sample_trained_latents};
use crate::engine::{decayed_lr, Adam, Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::io::Checkpoint;
use crate::sdf::{backproject_to_grid, GridFrame, SdfGrid3D};
use crate::training::{DeformModel, DeformPair, ShapeModel};

pub const SHAPE_ENCODER: &str = "enc_s";
pub const DEFORM_ENCODER: &str = "enc_d";
const LEAKY: f64 = 0.01;

/// Stride-2 `3x3x3` convolutions followed by a fully connected head. Outputs
/// are de-standardized with a stored per-dimension mean and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEncoder {
    pub res: usize,
    pub channels: Vec<usize>,
    pub out_dim: usize,
}

impl GridEncoder {
    pub fn new(res: usize, channels: Vec<usize>, out_dim: usize) -> Result<Self> {
        ensure!(!channels.is_empty() && channels.iter().all(|&c| c > 0), Validation, "encoder needs positive channel widths");
        ensure!(out_dim > 0, Validation, "encoder output must be non-empty");
        let div = 1usize << channels.len();
        ensure!(res >= div && res % div == 0, Validation, "grid resolution {res} is not divisible by {div}");
        Ok(Self { res, channels, out_dim })
    }

    fn final_side(&self) -> usize {
        self.res >> self.channels.len()
    }

    fn flat_width(&self) -> usize {
        let s = self.final_side();
        self.channels.last().copied().unwrap_or(1) * s * s * s
    }

    fn names(prefix: &str, layer: usize) -> (String, String) {
        (format!("{prefix}.conv{layer}.w"), format!("{prefix}.conv{layer}.b"))
    }

    pub fn init_params(&self, prefix: &str, params: &mut ParamSet, rng: &mut impl rand::Rng) {
        let mut cin = 1;
        for (l, &cout) in self.channels.iter().enumerate() {
            let fan = cin * 27;
            let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).unwrap();
            let (w, b) = Self::names(prefix, l);
            params.insert(w, Tensor::from_raw(cout, fan, (0..cout * fan).map(|_| normal.sample(rng)).collect()));
            params.insert(b, Tensor::zeros(cout, 1));
            cin = cout;
        }
        let f = self.flat_width();
        let normal = Normal::new(0.0, (1.0 / f as f64).sqrt()).unwrap();
        params.insert(format!("{prefix}.fc.w"), Tensor::from_raw(f, self.out_dim, (0..f * self.out_dim).map(|_| normal.sample(rng)).collect()));
        params.insert(format!("{prefix}.fc.b"), Tensor::zeros(1, self.out_dim));
        params.insert(format!("{prefix}.out_mean"), Tensor::zeros(1, self.out_dim));
        params.insert(format!("{prefix}.out_scale"), Tensor::filled(1, self.out_dim, 1.0));
    }

    pub fn check_params(&self, prefix: &str, params: &ParamSet) -> Result<()> {
        let mut cin = 1;
        let mut expect = Vec::new();
        for (l, &cout) in self.channels.iter().enumerate() {
            let (w, b) = Self::names(prefix, l);
            expect.push((w, cout, cin * 27));
            expect.push((b, cout, 1));
            cin = cout;
        }
        expect.push((format!("{prefix}.fc.w"), self.flat_width(), self.out_dim));
        for tail in ["fc.b", "out_mean", "out_scale"] {
            expect.push((format!("{prefix}.{tail}"), 1, self.out_dim));
        }
        for (name, r, c) in expect {
            let t = params.value(&name)?;
            ensure!(t.rows() == r && t.cols() == c, Incompatible, "`{name}` is {}x{}, expected {r}x{c}", t.rows(), t.cols());
        }
        Ok(())
    }

    /// `input` is `1 x res^3`; returns `1 x out_dim`.
    pub fn record(&self, tape: &mut Tape, bound: &Bound, prefix: &str, input: Var) -> Result<Var> {
        ensure!(tape.value(input).len() == self.res.pow(3), Dimension, "encoder input has the wrong size");
        let mut x = tape.reshape(input, 1, self.res.pow(3));
        let (mut cin, mut side) = (1, self.res);
        for (l, &cout) in self.channels.iter().enumerate() {
            let (w, b) = Self::names(prefix, l);
            let cols = tape.im2col3d(x, cin, side);
            let y = tape.matmul(bound.get(&w), cols);
            let y = tape.add(y, bound.get(&b));
            x = tape.unary(crate::engine::Unary::LeakyRelu(LEAKY), y);
            cin = cout;
            side /= 2;
        }
        let flat = tape.reshape(x, 1, self.flat_width());
        let h = tape.matmul(flat, bound.get(&format!("{prefix}.fc.w")));
        let h = tape.add(h, bound.get(&format!("{prefix}.fc.b")));
        let h = tape.mul(h, bound.get(&format!("{prefix}.out_scale")));
        Ok(tape.add(h, bound.get(&format!("{prefix}.out_mean"))))
    }
}

/// Settings of encoder training and of the observation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub grid_res: usize,
    /// Cube side in model units.
    pub grid_side: f64,
    pub grid_center: [f64; 3],
    /// Truncation of the unsigned distance grid.
    pub delta_grid: f64,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    /// Extra training observations generated from random in-range latents.
    pub augment: usize,
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid_res: 32,
            grid_side: 1.25,
            grid_center: [0.5, 0.5, 0.0],
            delta_grid: 0.1,
            channels: vec![8, 16, 32, 64],
            epochs: 40,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_interval: 20,
            augment: 200,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Validation(format!("bad value `{v}` for `{key}`")))
        }
        let key = key.replace('-', "_");
        match key.as_str() {
            "grid_res" => self.grid_res = num(&key, value)?,
            "grid_side" => self.grid_side = num(&key, value)?,
            "delta_grid" => self.delta_grid = num(&key, value)?,
            "channels" => {
                self.channels = value.split(',').map(|c| num(&key, c)).collect::<Result<Vec<usize>>>()?;
            }
            "enc_epochs" => self.epochs = num(&key, value)?,
            "enc_lr" => self.lr = num(&key, value)?,
            "enc_lr_decay" => self.lr_decay = num(&key, value)?,
            "enc_decay_interval" => self.decay_interval = num(&key, value)?,
            "augment" => self.augment = num(&key, value)?,
            "holdout" => self.holdout = num(&key, value)?,
            "seed" => self.seed = num(&key, value)?,
            k => return Err(Error::Validation(format!("unknown encoder config key `{k}`"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> std::collections::BTreeMap<String, String> {
        [
            ("grid_res", self.grid_res.to_string()),
            ("grid_side", self.grid_side.to_string()),
            ("delta_grid", self.delta_grid.to_string()),
            ("channels", self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")),
            ("enc_epochs", self.epochs.to_string()),
            ("enc_lr", self.lr.to_string()),
            ("enc_lr_decay", self.lr_decay.to_string()),
            ("enc_decay_interval", self.decay_interval.to_string()),
            ("augment", self.augment.to_string()),
            ("holdout", self.holdout.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn frame(&self) -> Result<GridFrame> {
        GridFrame::new(self.grid_center, self.grid_side, self.grid_res)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.delta_grid > 0.0 && self.grid_side > 0.0, Validation, "grid side and truncation must be positive");
        ensure!(self.epochs >= 1 && self.lr > 0.0, Validation, "encoder training needs epochs and a learning rate");
        ensure!((0.0..1.0).contains(&self.holdout), Validation, "holdout fraction must be in [0, 1)");
        GridEncoder::new(self.grid_res, self.channels.clone(), 1)?;
        Ok(())
    }
}

/// Trained shape and deformation encoders with their grid definition.
#[derive(Clone, Debug)]
pub struct InversionEncoders {
    pub shape: GridEncoder,
    pub deform: GridEncoder,
    pub params: ParamSet,
    pub frame: GridFrame,
    pub delta: f64,
}

/// Encoder output for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub zs: Vec<f64>,
    pub zd: Vec<f64>,
    /// No voxel is within the truncation band: the grid carries no surface.
    pub low_confidence: bool,
}

impl InversionEncoders {
    /// Back-projects an observation given in model units.
    pub fn grid_for(&self, cloud: &[[f64; 3]]) -> Result<SdfGrid3D> {
        backproject_to_grid(cloud, self.frame, self.delta)
    }

    fn input(&self, grid: &SdfGrid3D) -> Tensor {
        Tensor::row(&grid.values.iter().map(|v| 1.0 - v / self.delta).collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_params(&self.params);
        let chans = self.shape.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        for (k, v) in [
            ("kind", "encoder".to_string()),
            ("grid_res", self.frame.res.to_string()),
            ("voxel", format!("{:e}", self.frame.voxel)),
            ("origin", self.frame.origin.iter().map(|o| format!("{o:e}")).collect::<Vec<_>>().join(",")),
            ("delta_grid", format!("{:e}", self.delta)),
            ("channels", chans),
            ("shape_dim", self.shape.out_dim.to_string()),
            ("deform_dim", self.deform.out_dim.to_string()),
        ] {
            c.meta.insert(k.into(), v);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        ensure!(c.meta_str("kind")? == "encoder", Incompatible, "checkpoint is not an encoder");
        let res: usize = c.meta_parse("grid_res")?;
        let channels = c
            .meta_str("channels")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad channel width `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let origin = c
            .meta_str("origin")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad grid origin `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        ensure!(origin.len() == 3, Parse, "grid origin needs three values");
        let frame = GridFrame { origin: [origin[0], origin[1], origin[2]], voxel: c.meta_parse("voxel")?, res };
        let shape = GridEncoder::new(res, channels.clone(), c.meta_parse("shape_dim")?)?;
        let deform = GridEncoder::new(res, channels, c.meta_parse("deform_dim")?)?;
        let params = c.to_params();
        shape.check_params(SHAPE_ENCODER, &params)?;
        deform.check_params(DEFORM_ENCODER, &params)?;
        Ok(Self { shape, deform, params, frame, delta: c.meta_parse("delta_grid")? })
    }

    /// Checks that the encoders produce latents of the models' sizes.
    pub fn check_models(&self, shape: &ShapeModel, deform: &DeformModel) -> Result<()> {
        ensure!(
            self.shape.out_dim == shape.decoder.latent_dim && self.deform.out_dim == deform.model.deform_dim,
            Incompatible,
            "encoders predict {}/{} latents, models use {}/{}",
            self.shape.out_dim,
            self.deform.out_dim,
            shape.decoder.latent_dim,
            deform.model.deform_dim
        );
        Ok(())
    }
}

/// Deterministic forward pass of both encoders.
pub fn invert_latents(grid: &SdfGrid3D, enc: &InversionEncoders) -> Result<Inversion> {
    ensure!(
        grid.res() == enc.frame.res,
        Validation,
        "grid resolution {} does not match the encoder resolution {}",
        grid.res(),
        enc.frame.res
    );
    let mut tape = Tape::new();
    let bound = enc.params.bind_frozen(&mut tape);
    let x = tape.constant(enc.input(grid));
    let zs = enc.shape.record(&mut tape, &bound, SHAPE_ENCODER, x)?;
    let zd = enc.deform.record(&mut tape, &bound, DEFORM_ENCODER, x)?;
    let out = Inversion {
        zs: tape.value(zs).data().to_vec(),
        zd: tape.value(zd).data().to_vec(),
        low_confidence: grid.values.iter().all(|&v| v >= grid.delta),
    };
    ensure!(out.zs.iter().chain(&out.zd).all(|v| v.is_finite()), Numerical, "encoder produced non-finite latents");
    Ok(out)
}

/// Held-out and training inversion losses, with the loss of predicting the
/// training mean as a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub mean_baseline: f64,
    pub epoch_losses: Vec<f64>,
}

struct Sample {
    input: Tensor,
    zs: Vec<f64>,
    zd: Vec<f64>,
}

fn mean_and_scale(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let d = rows.first().map_or(0, |r| r.len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    (mean, scale)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trains both encoders on back-projected grids of the training pairs plus
/// observations generated from random in-range latents, with the squared
/// latent error as loss.
pub fn train_inversion_encoders(
    shape: &ShapeModel,
    deform: &DeformModel,
    pairs: &[DeformPair],
    cfg: &EncoderConfig,
) -> Result<(InversionEncoders, EncoderReport)> {
    cfg.validate()?;
    let (st, dt) = match (shape.latent_table(), deform.latent_table()) {
        (Ok(s), Ok(d)) if s.rows() > 0 && d.rows() > 0 => (s, d),
        _ => return Err(Error::Contract("encoder training needs trained latent tables".into())),
    };
    ensure!(
        pairs.len() == deform.pair_ids.len() && pairs.iter().zip(&deform.pair_ids).all(|(p, id)| &p.id == id),
        Contract,
        "pairs do not match the deformation checkpoint"
    );
    let enc = InversionEncoders {
        shape: GridEncoder::new(cfg.grid_res, cfg.channels.clone(), st.cols())?,
        deform: GridEncoder::new(cfg.grid_res, cfg.channels.clone(), dt.cols())?,
        params: ParamSet::new(),
        frame: cfg.frame()?,
        delta: cfg.delta_grid,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let grid = enc.grid_for(&p.cloud)?;
        samples.push(Sample { input: enc.input(&grid), zs: shape.latent_by_id(&p.base_id)?, zd: deform.latent(i)? });
    }
    let mut skipped = 0;
    for _ in 0..cfg.augment {
        let (zs, zd) = sample_trained_latents(shape, deform, &mut rng)?;
        match generate_leaf(shape, deform, &zs, &zd, true) {
            Ok((_, mesh)) => {
                let grid = enc.grid_for(&mesh.vertices)?;
                samples.push(Sample { input: enc.input(&grid), zs, zd });
            }
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} degenerate generated observations");
    }
    samples.shuffle(&mut rng);
    let n_hold = ((samples.len() as f64) * cfg.holdout).floor() as usize;
    let n_train = samples.len() - n_hold;
    ensure!(n_train >= 1, Validation, "no training samples left after the holdout split");
    let (train, hold) = samples.split_at(n_train);

    let mut enc = enc;
    let mut params = ParamSet::new();
    enc.shape.init_params(SHAPE_ENCODER, &mut params, &mut rng);
    enc.deform.init_params(DEFORM_ENCODER, &mut params, &mut rng);
    for (prefix, rows) in [
        (SHAPE_ENCODER, train.iter().map(|s| s.zs.as_slice()).collect::<Vec<_>>()),
        (DEFORM_ENCODER, train.iter().map(|s| s.zd.as_slice()).collect::<Vec<_>>()),
    ] {
        let (m, s) = mean_and_scale(&rows);
        params.set(&format!("{prefix}.out_mean"), Tensor::row(&m));
        params.set(&format!("{prefix}.out_scale"), Tensor::row(&s));
    }
    let trainable: Vec<String> = ["conv", "fc."]
        .iter()
        .flat_map(|t| [format!("{SHAPE_ENCODER}.{t}"), format!("{DEFORM_ENCODER}.{t}")])
        .collect();
    let trainable: Vec<&str> = trainable.iter().map(String::as_str).collect();
    let frozen = [format!("{SHAPE_ENCODER}.out_"), format!("{DEFORM_ENCODER}.out_")];
    let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();

    let adam = Adam::default();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_interval, epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let s = &train[i];
            let mut tape = Tape::new();
            let mut bound = params.bind_selected(&mut tape, &trainable, true);
            bound.merge(params.bind_selected(&mut tape, &frozen, false));
            let x = tape.constant(s.input.clone());
            let ps = enc.shape.record(&mut tape, &bound, SHAPE_ENCODER, x)?;
            let pd = enc.deform.record(&mut tape, &bound, DEFORM_ENCODER, x)?;
            let ts = tape.constant(Tensor::row(&s.zs));
            let td = tape.constant(Tensor::row(&s.zd));
            let es = tape.sub(ps, ts);
            let es = tape.square(es);
            let es = tape.sum(es);
            let ed = tape.sub(pd, td);
            let ed = tape.square(ed);
            let ed = tape.sum(ed);
            let loss = tape.add(es, ed);
            let l = tape.scalar_value(loss);
            ensure!(l.is_finite(), Numerical, "encoder loss is not finite at epoch {epoch}");
            sum += l;
            let grads = tape.backward(loss)?.into_named();
            adam.update(&mut params, &grads, lr)?;
        }
        epoch_losses.push(sum / n_train as f64);
        log::debug!("encoder epoch {epoch}: {:.6e}", sum / n_train as f64);
    }
    enc.params = params;

    let eval = |set: &[Sample]| -> Result<f64> {
        let mut sum = 0.0;
        for s in set {
            let (zs, zd) = predict(&enc, &s.input)?;
            sum += sq_dist(&zs, &s.zs) + sq_dist(&zd, &s.zd);
        }
        Ok(sum / set.len().max(1) as f64)
    };
    let train_loss = eval(train)?;
    let holdout_loss = if hold.is_empty() { f64::NAN } else { eval(hold)? };
    let ms = mean_and_scale(&train.iter().map(|s| s.zs.as_slice()).collect::<Vec<_>>()).0;
    let md = mean_and_scale(&train.iter().map(|s| s.zd.as_slice()).collect::<Vec<_>>()).0;
    let mean_baseline = if hold.is_empty() {
        f64::NAN
    } else {
        hold.iter().map(|s| sq_dist(&ms, &s.zs) + sq_dist(&md, &s.zd)).sum::<f64>() / hold.len() as f64
    };
    let report = EncoderReport {
        train_samples: n_train,
        holdout_samples: hold.len(),
        train_loss,
        holdout_loss,
        mean_baseline,
        epoch_losses,
    };
    Ok((enc, report))
}

fn predict(enc: &InversionEncoders, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = enc.params.bind_frozen(&mut tape);
    let x = tape.constant(input.clone());
    let zs = enc.shape.record(&mut tape, &bound, SHAPE_ENCODER, x)?;
    let zd = enc.deform.record(&mut tape, &bound, DEFORM_ENCODER, x)?;
    Ok((tape.value(zs).data().to_vec(), tape.value(zd).data().to_vec()))
}

/// Mean of the shape and deformation latent tables, the initialization used
/// when no encoder is available.
pub fn latent_means(shape: &ShapeModel, deform: &DeformModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let col_mean = |t: &Tensor| -> Vec<f64> {
        (0..t.cols()).map(|j| (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / t.rows().max(1) as f64).collect()
    };
    Ok((col_mean(shape.latent_table()?), col_mean(deform.latent_table()?)))
}
