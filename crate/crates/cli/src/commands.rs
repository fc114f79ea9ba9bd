use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use nlf_core::fitting::{
    fit_multi_leaf, generate_leaf, invert_latents, latent_means, refine_fit, train_inversion_encoders, FitResult,
    Inversion, InversionEncoders,
};
use nlf_core::io::{
    atomic_write, load_dataset, read_latents, read_obj, read_pgm, read_ply_points, read_xyz, save_dataset, write_latents,
    write_obj, write_ply, Checkpoint, RunManifest,
};
use nlf_core::losses::{metric_chamfer_l2, metric_normal_consistency, metric_surface_chamfer};
use nlf_core::mesh::{self, TriMesh};
use nlf_core::registration::{
    arap_register, cpd_register, rigid_align, sample_contour_keypoints, AlignOptions, ArapOptions, CpdOptions,
    KeypointConstraint, RigidPose,
};
use nlf_core::shape::{extract_base_mesh, interpolate_latent, sample_latent};
use nlf_core::spatial::KdTree;
use nlf_core::training::{
    generate_synthetic_dataset, train_deformation_stage1, train_deformation_stage2, train_shape_space, DeformModel,
    ShapeModel,
};
use nlf_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::settings::Settings;
use crate::Command;

/// Leaves fill 90% of the unit square along their main axis, centred at
/// `(0.5, 0.5)`.
const MODEL_EXTENT: f64 = 0.9;
const MODEL_CENTER: [f64; 3] = [0.5, 0.5, 0.0];

/// Maps observations in input units to the model frame and back.
#[derive(Clone, Copy, Debug)]
struct ModelFrame {
    pose: Option<RigidPose>,
}

impl ModelFrame {
    fn new(cloud: &[[f64; 3]], aligned: bool) -> Result<Self> {
        Ok(Self { pose: if aligned { None } else { Some(rigid_align(cloud, AlignOptions::default())?) } })
    }

    fn to_model(&self, p: [f64; 3]) -> [f64; 3] {
        match &self.pose {
            Some(pose) => mesh::add(mesh::scale(pose.apply(p), MODEL_EXTENT), MODEL_CENTER),
            None => p,
        }
    }

    fn to_input(&self, q: [f64; 3]) -> [f64; 3] {
        let Some(pose) = &self.pose else { return q };
        let c = mesh::sub(mesh::scale(mesh::sub(q, MODEL_CENTER), 1.0 / MODEL_EXTENT), pose.translation);
        let r = &pose.rotation;
        let mut p = [0.0; 3];
        for (a, pa) in p.iter_mut().enumerate() {
            *pa = (r[0][a] * c[0] + r[1][a] * c[1] + r[2][a] * c[2]) / pose.scale;
        }
        p
    }

    /// Mesh in input units; the unit scale is 1 in the model frame.
    fn mesh_to_input(&self, m: &TriMesh) -> TriMesh {
        TriMesh { vertices: m.vertices.iter().map(|p| self.to_input(*p)).collect(), ..m.clone() }
    }

    fn model_unit(&self) -> f64 {
        self.pose.map_or(1.0, |p| 1.0 / (p.scale * MODEL_EXTENT))
    }
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn new(argv: Vec<String>, config: BTreeMap<String, String>, seed: u64) -> Self {
        Self { manifest: RunManifest::new(argv, config, seed) }
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.record_output(path)?;
        Ok(())
    }

    fn finish(mut self, path: &Path, start: std::time::Instant) -> Result<()> {
        self.manifest.wall_time_s = start.elapsed().as_secs_f64();
        self.manifest.save(path)?;
        Ok(())
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read_cloud(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    Ok(match ext.as_str() {
        "ply" => read_ply_points(&text)?,
        "obj" => read_obj(&text)?.vertices,
        _ => read_xyz(&text)?,
    })
}

fn read_mesh(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_obj(&text)?)
}

fn load_shape(path: &Path) -> Result<ShapeModel> {
    Ok(ShapeModel::from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))?)
}

fn load_deform(path: &Path, s: &Settings) -> Result<DeformModel> {
    let c = Checkpoint::load(path)?;
    Ok(DeformModel::from_checkpoint(&c, s.expected_k()?).with_context(|| format!("loading {}", path.display()))?)
}

fn load_encoders(path: Option<&Path>) -> Result<Option<InversionEncoders>> {
    path.map(|p| {
        InversionEncoders::from_checkpoint(&Checkpoint::load(p)?).with_context(|| format!("loading {}", p.display()))
    })
    .transpose()
}

fn with_uvs(mut m: TriMesh, uvs: &[[f64; 2]]) -> TriMesh {
    if uvs.len() == m.vertices.len() {
        m.uvs = uvs.to_vec();
    }
    m
}

pub fn run(cmd: &Command, s: &Settings, argv: Vec<String>) -> Result<()> {
    let start = std::time::Instant::now();
    let seed = s.seed()?;
    match cmd {
        Command::Synth { n, res, out } => {
            let data = generate_synthetic_dataset(*n, seed, *res)?;
            let mut config = s.raw().clone();
            config.insert("n".into(), n.to_string());
            config.insert("res".into(), res.to_string());
            let mut run = Run::new(argv, config, seed);
            for p in save_dataset(out, &data.shapes, &data.pairs)? {
                run.manifest.record_output(&p)?;
            }
            println!("wrote {} masks and {} pairs to {}", data.shapes.samples.len(), data.pairs.len(), out.display());
            run.finish(&out.join("manifest.json"), start)
        }
        Command::TrainShape { data, out } => {
            let cfg = s.train()?;
            let (shapes, _) = load_dataset(data)?;
            let (model, log) = train_shape_space(&shapes, &cfg)?;
            let mut run = Run::new(argv, cfg.to_map(), cfg.seed);
            run.write(out, &model.to_checkpoint().to_bytes()?)?;
            let iou = model.reconstruction_iou(&shapes)?;
            let mut report = String::from("id,iou\n");
            for (smp, v) in shapes.samples.iter().zip(&iou) {
                writeln!(report, "{},{v:.6}", smp.id)?;
            }
            let min = iou.iter().copied().fold(f64::INFINITY, f64::min);
            println!("epochs={} loss={:.6e} min_iou={min:.4}", log.epochs.len(), log.last_total());
            run.write(&out.with_extension("iou.csv"), report.as_bytes())?;
            run.finish(&sidecar(out), start)
        }
        Command::TrainDeform { data, shape, stage, init, out } => {
            let cfg = s.train()?;
            let (shapes, pairs) = load_dataset(data)?;
            let shape = load_shape(shape)?;
            let (model, log) = if *stage == 1 {
                train_deformation_stage1(&pairs, &shape, &cfg)?
            } else {
                let init = init.as_deref().ok_or_else(|| Error::Validation("stage 2 needs --init".into()))?;
                let first = load_deform(init, s)?;
                train_deformation_stage2(&first, &shape, &shapes, &pairs, &cfg)?
            };
            let mut run = Run::new(argv, cfg.to_map(), cfg.seed);
            run.write(out, &model.to_checkpoint().to_bytes()?)?;
            println!("stage={stage} epochs={} loss={:.6e}", log.epochs.len(), log.last_total());
            run.finish(&sidecar(out), start)
        }
        Command::TrainEnc { data, shape, deform, out } => {
            let cfg = s.encoder()?;
            let (_, pairs) = load_dataset(data)?;
            let shape = load_shape(shape)?;
            let deform = load_deform(deform, s)?;
            let (enc, rep) = train_inversion_encoders(&shape, &deform, &pairs, &cfg)?;
            let mut run = Run::new(argv, cfg.to_map(), cfg.seed);
            run.write(out, &enc.to_checkpoint().to_bytes()?)?;
            println!(
                "train_samples={} holdout_samples={} train_loss={:.6e} holdout_loss={:.6e} mean_baseline={:.6e}",
                rep.train_samples, rep.holdout_samples, rep.train_loss, rep.holdout_loss, rep.mean_baseline
            );
            run.finish(&sidecar(out), start)
        }
        Command::Register { data, pair, keypoints } => {
            let mut run = Run::new(argv, s.raw().clone(), seed);
            let root = data.join("pairs");
            let mut ids: Vec<String> = match pair {
                Some(p) => vec![p.clone()],
                None => fs::read_dir(&root)
                    .with_context(|| format!("reading {}", root.display()))?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().is_dir())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect(),
            };
            ids.sort();
            for id in &ids {
                let dir = root.join(id);
                let stats = register_pair(&dir, *keypoints, &mut run)?;
                println!("{id} {stats}");
            }
            run.finish(&data.join("register.manifest.json"), start)
        }
        Command::Fit { model, deform, enc, cloud, aligned, gt, out } => {
            let cfg = s.fit()?;
            let shape = load_shape(model)?;
            let deform = load_deform(deform, s)?;
            let enc = load_encoders(enc.as_deref())?;
            let input = read_cloud(cloud)?;
            let frame = ModelFrame::new(&input, *aligned)?;
            let obs: Vec<[f64; 3]> = input.iter().map(|p| frame.to_model(*p)).collect();
            let inv = initial_latents(&shape, &deform, enc.as_ref(), &obs)?;
            let fit = refine_fit(&shape, &deform, &inv.zs, &inv.zd, &obs, None, &cfg)?;
            let mut run = Run::new(argv, cfg.to_map(), cfg.seed);
            let gt = gt.as_deref().map(read_mesh).transpose()?;
            write_fit(&mut run, out, "", &fit, &inv, &frame, &input, gt.as_ref())?;
            run.finish(&out.join("manifest.json"), start)
        }
        Command::FitMulti { model, deform, enc, clouds, aligned, no_share, out } => {
            let cfg = s.fit()?;
            let shape = load_shape(model)?;
            let deform = load_deform(deform, s)?;
            let enc = load_encoders(enc.as_deref())?;
            let inputs = clouds.iter().map(|c| read_cloud(c)).collect::<Result<Vec<_>>>()?;
            let frames = inputs.iter().map(|c| ModelFrame::new(c, *aligned)).collect::<Result<Vec<_>>>()?;
            let obs: Vec<Vec<[f64; 3]>> =
                inputs.iter().zip(&frames).map(|(c, f)| c.iter().map(|p| f.to_model(*p)).collect()).collect();
            let multi = fit_multi_leaf(&obs, &shape, &deform, enc.as_ref(), !no_share, &cfg)?;
            let mut run = Run::new(argv, cfg.to_map(), cfg.seed);
            let mut summary = String::new();
            if let Some(i) = multi.anchor_index {
                writeln!(summary, "anchor_instance={i}")?;
            }
            for (i, fit) in multi.fits.iter().enumerate() {
                let tag = format!("_{i:03}");
                write_fit(&mut run, out, &tag, fit, &multi.inversions[i], &frames[i], &inputs[i], None)?;
                writeln!(summary, "instance={i} cloud={} residual={:.6e}", clouds[i].display(), fit.residual)?;
            }
            run.write(&out.join("summary.txt"), summary.as_bytes())?;
            print!("{summary}");
            run.finish(&out.join("manifest.json"), start)
        }
        Command::Generate { model, deform, zs_seed, zd_seed, latents, flat, out } => {
            let shape = load_shape(model)?;
            let deform = load_deform(deform, s)?;
            let (zs, zd) = match latents {
                Some(p) => read_latents(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => (
                    sample_latent(shape.latent_table()?, &mut ChaCha8Rng::seed_from_u64(*zs_seed))?,
                    sample_latent(deform.latent_table()?, &mut ChaCha8Rng::seed_from_u64(*zd_seed))?,
                ),
            };
            let (base, leaf) = generate_leaf(&shape, &deform, &zs, &zd, true)?;
            let m = if *flat { base.mesh } else { with_uvs(leaf, &base.mesh.uvs) };
            let mut config = s.raw().clone();
            config.insert("zs_seed".into(), zs_seed.to_string());
            config.insert("zd_seed".into(), zd_seed.to_string());
            let mut run = Run::new(argv, config, seed);
            run.write(out, write_obj(&m).as_bytes())?;
            run.write(&out.with_extension("latents.txt"), write_latents(&zs, &zd).as_bytes())?;
            println!("vertices={} faces={}", m.vertices.len(), m.faces.len());
            run.finish(&sidecar(out), start)
        }
        Command::Interp { model, deform, from, to, steps, out } => {
            let shape = load_shape(model)?;
            let deform = load_deform(deform, s)?;
            let (st, dt) = (shape.latent_table()?, deform.latent_table()?);
            let end = |p: &Option<PathBuf>, row: usize| -> Result<(Vec<f64>, Vec<f64>)> {
                match p {
                    Some(p) => Ok(read_latents(&fs::read_to_string(p)?)?),
                    None => Ok((st.row_slice(row.min(st.rows() - 1)).to_vec(), dt.row_slice(row.min(dt.rows() - 1)).to_vec())),
                }
            };
            let a = end(from, 0)?;
            let b = end(to, usize::MAX)?;
            anyhow::ensure!(*steps >= 2, Error::Validation("interpolation needs at least two steps".into()));
            let mut run = Run::new(argv, s.raw().clone(), seed);
            for k in 0..*steps {
                let t = k as f64 / (*steps - 1) as f64;
                let zs = interpolate_latent(&a.0, &b.0, t)?;
                let zd = interpolate_latent(&a.1, &b.1, t)?;
                let (base, leaf) = generate_leaf(&shape, &deform, &zs, &zd, true)?;
                run.write(&out.join(format!("interp_{k:03}.obj")), write_obj(&with_uvs(leaf, &base.mesh.uvs)).as_bytes())?;
            }
            println!("wrote {steps} meshes to {}", out.display());
            run.finish(&out.join("manifest.json"), start)
        }
        Command::Eval { gt, pred, out } => {
            let report = evaluate(gt, pred)?;
            print!("{report}");
            if let Some(out) = out {
                let mut run = Run::new(argv, s.raw().clone(), seed);
                run.write(out, report.as_bytes())?;
                run.finish(&sidecar(out), start)?;
            }
            Ok(())
        }
    }
}

fn initial_latents(
    shape: &ShapeModel,
    deform: &DeformModel,
    enc: Option<&InversionEncoders>,
    obs: &[[f64; 3]],
) -> Result<Inversion> {
    Ok(match enc {
        Some(e) => {
            e.check_models(shape, deform)?;
            invert_latents(&e.grid_for(obs)?, e)?
        }
        None => {
            let (zs, zd) = latent_means(shape, deform)?;
            Inversion { zs, zd, low_confidence: true }
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn write_fit(
    run: &mut Run,
    out: &Path,
    tag: &str,
    fit: &FitResult,
    inv: &Inversion,
    frame: &ModelFrame,
    input: &[[f64; 3]],
    gt: Option<&TriMesh>,
) -> Result<()> {
    let mesh = with_uvs(frame.mesh_to_input(&fit.mesh), &fit.base.mesh.uvs);
    run.write(&out.join(format!("fitted{tag}.obj")), write_obj(&mesh).as_bytes())?;
    run.write(&out.join(format!("latents{tag}.txt")), write_latents(&fit.zs, &fit.zd).as_bytes())?;
    let mut r = String::new();
    writeln!(r, "chamfer_l2_mm={:.6}", metric_chamfer_l2(input, &mesh.vertices)?)?;
    writeln!(r, "surface_chamfer_mm={:.6}", fit.residual * frame.model_unit())?;
    if let Some(gt) = gt {
        writeln!(r, "gt_chamfer_l2_mm={:.6}", metric_chamfer_l2(&gt.vertices, &mesh.vertices)?)?;
        writeln!(r, "nc={:.6}", metric_normal_consistency(gt, &mesh)?)?;
    }
    writeln!(r, "iterations={}", fit.iterations)?;
    writeln!(r, "best_iteration={}", fit.best_iteration)?;
    writeln!(r, "resets={}", fit.resets)?;
    writeln!(r, "low_confidence_init={}", inv.low_confidence)?;
    run.write(&out.join(format!("report{tag}.txt")), r.as_bytes())?;
    if tag.is_empty() {
        print!("{r}");
    }
    info!("fit{tag}: residual {:.3e} after {} iterations", fit.residual, fit.iterations);
    Ok(())
}

/// Rigid alignment into the base frame, ARAP towards contour keypoints and
/// the cloud, then point drift from the ARAP result to the aligned cloud.
fn register_pair(dir: &Path, keypoints: usize, run: &mut Run) -> Result<String> {
    let mask = read_pgm(&fs::read(dir.join("base_mask.pgm")).with_context(|| format!("reading {}", dir.display()))?)?;
    let base = extract_base_mesh(&mask)?;
    let cloud = read_xyz(&fs::read_to_string(dir.join("deformed.xyz"))?)?;
    let frame = ModelFrame::new(&cloud, false)?;
    let aligned: Vec<[f64; 3]> = cloud.iter().map(|p| frame.to_model(*p)).collect();
    let contour: Vec<[f64; 3]> = base.contour.iter().map(|&i| base.mesh.vertices[i]).collect();
    let tree = KdTree::new(&aligned);
    let constraints: Vec<KeypointConstraint> = sample_contour_keypoints(&contour, keypoints.min(contour.len()))?
        .iter()
        .map(|k| KeypointConstraint {
            a: base.contour[k.from],
            b: base.contour[k.to],
            t: k.t,
            target: aligned[tree.nearest(&k.point).0],
        })
        .collect();
    let arap = arap_register(&base.mesh, &constraints, Some(&aligned), ArapOptions::default())?;
    let cpd = cpd_register(&arap.vertices, &aligned, CpdOptions::default())?;
    let mut csv = String::from("base_vertex_index,target_index,confidence\n");
    for (i, c) in cpd.correspondences.iter().enumerate() {
        writeln!(csv, "{i},{},{:.6}", c.target_index, c.confidence)?;
    }
    run.write(&dir.join("correspondence.csv"), csv.as_bytes())?;
    run.write(&dir.join("aligned_deformed.ply"), write_ply(&aligned, &[]).as_bytes())?;
    let before = metric_chamfer_l2(&base.mesh.vertices, &aligned)?;
    let after = metric_chamfer_l2(&cpd.moved, &aligned)?;
    Ok(format!("chamfer_before={before:.6} chamfer_after={after:.6} cpd_iterations={}", cpd.iterations))
}

fn evaluate(gt: &Path, pred: &Path) -> Result<String> {
    let is_obj = |p: &Path| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    let (g, p) = (read_cloud(gt)?, read_cloud(pred)?);
    let chamfer = metric_chamfer_l2(&g, &p)?;
    let nc = if is_obj(gt) && is_obj(pred) { Some(metric_normal_consistency(&read_mesh(gt)?, &read_mesh(pred)?)?) } else { None };
    let surface = if is_obj(pred) { Some(metric_surface_chamfer(&g, &read_mesh(pred)?)?) } else { None };
    let mut r = String::new();
    match nc {
        Some(nc) => writeln!(r, "chamfer_l2_mm={chamfer:.3} nc={nc:.3}")?,
        None => writeln!(r, "chamfer_l2_mm={chamfer:.3}")?,
    }
    writeln!(r, "{:<24}{:>14}", "metric", "value")?;
    writeln!(r, "{:<24}{:>14.6}", "chamfer_l2_mm", chamfer)?;
    if let Some(nc) = nc {
        writeln!(r, "{:<24}{:>14.6}", "nc", nc)?;
    }
    if let Some(sc) = surface {
        writeln!(r, "{:<24}{:>14.6}", "surface_chamfer_mm", sc)?;
    }
    writeln!(r, "{:<24}{:>14}", "gt_points", g.len())?;
    writeln!(r, "{:<24}{:>14}", "pred_points", p.len())?;
    Ok(r)
}
