//! Skeleton-free blend skinning: control points, the latent-conditioned
//! transformation and skinning-weight decoders, and linear blend skinning.

use rand::Rng;

use crate::engine::{encoded_width, quat_matrix, Activation, Bound, MlpSpec, OutputHead, ParamSet, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

pub const TRANSFORM_NET: &str = "transform_net";
pub const SKIN_NET: &str = "skin_net";
pub const CONTROL_POINTS: &str = "control_points";
/// Name of the per-pair deformation latent table (`M x N_d`).
pub const DEFORM_LATENTS: &str = "deform_latents";

pub const MAX_CONTROL_POINTS: usize = 1000;

/// `ceil(sqrt(K))` square lattice of cell centers over the unit square,
/// row by row from the bottom, truncated to `K` points in the `z = 0` plane.
pub fn init_control_points(k: usize) -> Result<Vec<[f64; 3]>> {
    ensure!((1..=MAX_CONTROL_POINTS).contains(&k), Validation, "control point count {k} outside 1..={MAX_CONTROL_POINTS}");
    let n = (k as f64).sqrt().ceil() as usize;
    let n = if n * n < k { n + 1 } else { n };
    Ok((0..k).map(|p| [((p % n) as f64 + 0.5) / n as f64, ((p / n) as f64 + 0.5) / n as f64, 0.0]).collect())
}

/// Rotates `v` by the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_rotate(q: [f64; 4], v: [f64; 3]) -> Result<[f64; 3]> {
    let r = rotation_of(q)?;
    Ok(mat_vec(&r, v))
}

fn rotation_of(q: [f64; 4]) -> Result<[f64; 9]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n >= 1e-8) {
        return Err(Error::Degenerate(format!("quaternion norm {n} is too small to define a rotation")));
    }
    Ok(quat_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

fn mat_vec(r: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
        r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
        r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
    ]
}

/// How each control point's transform is applied before blending.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendMode {
    /// `R (v - c) + c + t`: rotation about the control point.
    #[default]
    Pivoted,
    /// `R (v - c) + t`: the control point offset is not restored, so identity
    /// transforms do not reproduce the input.
    Unpivoted,
}

/// Rigid transform of one control point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] };
}

/// Linear blend skinning of `vertices` (`N`) with weights `N x K`.
pub fn lbs_deform(
    vertices: &[[f64; 3]],
    weights: &Tensor,
    transforms: &[RigidTransform],
    controls: &[[f64; 3]],
    mode: BlendMode,
) -> Result<Vec<[f64; 3]>> {
    let k = controls.len();
    ensure!(transforms.len() == k, Dimension, "{} transforms for {k} control points", transforms.len());
    ensure!(
        weights.rows() == vertices.len() && weights.cols() == k,
        Dimension,
        "weights are {}x{}, expected {}x{k}",
        weights.rows(),
        weights.cols(),
        vertices.len()
    );
    for i in 0..weights.rows() {
        let s: f64 = weights.row_slice(i).iter().sum();
        ensure!((s - 1.0).abs() <= 1e-4, Contract, "skinning weights of vertex {i} sum to {s}");
    }
    let rots = transforms.iter().map(|t| rotation_of(t.rotation)).collect::<Result<Vec<_>>>()?;
    let out = vertices
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = weights.row_slice(i);
            match mode {
                BlendMode::Pivoted => {
                    // v + sum_k w_k ((R_k - I)(v - c_k) + t_k): exact for identity transforms.
                    let mut d = [0.0; 3];
                    for kk in 0..k {
                        if w[kk] == 0.0 {
                            continue;
                        }
                        let p = [v[0] - controls[kk][0], v[1] - controls[kk][1], v[2] - controls[kk][2]];
                        let rp = mat_vec(&rots[kk], p);
                        for a in 0..3 {
                            d[a] += w[kk] * (rp[a] - p[a] + transforms[kk].translation[a]);
                        }
                    }
                    [v[0] + d[0], v[1] + d[1], v[2] + d[2]]
                }
                BlendMode::Unpivoted => {
                    let mut o = [0.0; 3];
                    for kk in 0..k {
                        let p = [v[0] - controls[kk][0], v[1] - controls[kk][1], v[2] - controls[kk][2]];
                        let rp = mat_vec(&rots[kk], p);
                        for a in 0..3 {
                            o[a] += w[kk] * (rp[a] + transforms[kk].translation[a]);
                        }
                    }
                    o
                }
            }
        })
        .collect();
    Ok(out)
}

/// Records blend skinning on a tape. `rotations` is `K x 9` (row-major).
pub fn record_lbs(
    tape: &mut Tape,
    vertices: Var,
    weights: Var,
    rotations: Var,
    translations: Var,
    controls: Var,
    mode: BlendMode,
) -> Var {
    match mode {
        BlendMode::Pivoted => {
            let k = tape.value(rotations).rows();
            let eye: Vec<f64> = (0..k).flat_map(|_| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).collect();
            let eye = tape.constant(Tensor::from_raw(k, 9, eye));
            let delta = tape.sub(rotations, eye);
            let blended = tape.matmul(weights, delta);
            let local = tape.row_mat_vec(blended, vertices);
            let dc = tape.row_mat_vec(delta, controls);
            let offset = tape.sub(translations, dc);
            let shift = tape.matmul(weights, offset);
            let moved = tape.add(local, shift);
            tape.add(vertices, moved)
        }
        BlendMode::Unpivoted => {
            let blended = tape.matmul(weights, rotations);
            let local = tape.row_mat_vec(blended, vertices);
            let rc = tape.row_mat_vec(rotations, controls);
            let offset = tape.sub(translations, rc);
            let shift = tape.matmul(weights, offset);
            tape.add(local, shift)
        }
    }
}

/// Network layouts of the deformation model.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationModel {
    pub control_count: usize,
    pub deform_dim: usize,
    pub shape_dim: usize,
    pub pe_order: usize,
    pub transform: MlpSpec,
    pub skinning: MlpSpec,
}

impl DeformationModel {
    pub fn new(
        control_count: usize,
        deform_dim: usize,
        shape_dim: usize,
        hidden: usize,
        depth: usize,
        pe_order: usize,
    ) -> Result<Self> {
        ensure!(
            (1..=MAX_CONTROL_POINTS).contains(&control_count),
            Validation,
            "control point count {control_count} outside 1..={MAX_CONTROL_POINTS}"
        );
        ensure!(pe_order >= 1, Validation, "positional encoding order must be at least 1");
        ensure!(hidden >= 1 && depth >= 1, Validation, "deformation networks need a hidden layer");
        let pe = encoded_width(3, pe_order);
        let mut tw = vec![hidden; depth];
        tw.push(7);
        let mut sw = vec![hidden; depth];
        sw.push(control_count);
        let transform = MlpSpec {
            input_width: pe + deform_dim,
            layer_widths: tw,
            activation: Activation::LeakyRelu,
            skip_layers: Vec::new(),
            output_head: OutputHead::Raw,
        };
        let skinning = MlpSpec {
            input_width: pe + shape_dim,
            layer_widths: sw,
            activation: Activation::LeakyRelu,
            skip_layers: Vec::new(),
            output_head: OutputHead::Softmax,
        };
        transform.validate()?;
        skinning.validate()?;
        Ok(Self { control_count, deform_dim, shape_dim, pe_order, transform, skinning })
    }

    /// Random hidden layers, identity transform head and lattice control points.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.transform.init_params(TRANSFORM_NET, params, rng);
        self.skinning.init_params(SKIN_NET, params, rng);
        let last = self.transform.layer_widths.len() - 1;
        let inp = self.transform.layer_input_width(last);
        params.set(&MlpSpec::weight_name(TRANSFORM_NET, last), Tensor::zeros(inp, 7));
        params.set(&MlpSpec::bias_name(TRANSFORM_NET, last), Tensor::row(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let c = init_control_points(self.control_count)?;
        params.set(CONTROL_POINTS, Tensor::from_points(&c));
        Ok(())
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.transform.check_params(TRANSFORM_NET, params)?;
        self.skinning.check_params(SKIN_NET, params)?;
        let c = params.value(CONTROL_POINTS)?;
        ensure!(
            c.rows() == self.control_count && c.cols() == 3,
            Incompatible,
            "checkpoint has {} control points, model expects {}",
            c.rows(),
            self.control_count
        );
        Ok(())
    }

    /// Quaternions (`K x 4`, unnormalized) and translations (`K x 3`).
    pub fn record_transforms(&self, tape: &mut Tape, bound: &Bound, zd: Var, controls: Var) -> Result<(Var, Var)> {
        ensure!(tape.value(zd).cols() == self.deform_dim, Dimension, "deformation latent width mismatch");
        let pe = tape.positional_encode(controls, self.pe_order);
        let x = tape.concat(&[pe, zd]);
        let out = self.transform.forward(tape, bound, TRANSFORM_NET, x)?;
        let q = tape.slice_cols(out, 0, 4);
        let t = tape.slice_cols(out, 4, 7);
        Ok((q, t))
    }

    /// Row-stochastic `N x K` skinning weights.
    pub fn record_skinning(&self, tape: &mut Tape, bound: &Bound, zs: Var, vertices: Var) -> Result<Var> {
        ensure!(tape.value(zs).cols() == self.shape_dim, Dimension, "shape latent width mismatch");
        let pe = tape.positional_encode(vertices, self.pe_order);
        let x = tape.concat(&[pe, zs]);
        self.skinning.forward(tape, bound, SKIN_NET, x)
    }

    /// Deformed vertices for a base mesh.
    pub fn record_deform(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        zs: Var,
        zd: Var,
        vertices: Var,
        mode: BlendMode,
    ) -> Result<Var> {
        let controls = bound.get(CONTROL_POINTS);
        let (q, t) = self.record_transforms(tape, bound, zd, controls)?;
        let w = self.record_skinning(tape, bound, zs, vertices)?;
        let r = tape.quat_to_rotation(q);
        Ok(record_lbs(tape, vertices, w, r, t, controls, mode))
    }

    pub fn decode_transforms(&self, params: &ParamSet, zd: &[f64]) -> Result<Vec<RigidTransform>> {
        self.check_params(params)?;
        ensure!(zd.len() == self.deform_dim, Dimension, "deformation latent has {} values, expected {}", zd.len(), self.deform_dim);
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::row(zd));
        let (q, t) = self.record_transforms(&mut tape, &bound, z, bound.get(CONTROL_POINTS))?;
        let (q, t) = (tape.value(q), tape.value(t));
        Ok((0..q.rows())
            .map(|k| {
                let a = q.row_slice(k);
                let b = t.row_slice(k);
                RigidTransform { rotation: [a[0], a[1], a[2], a[3]], translation: [b[0], b[1], b[2]] }
            })
            .collect())
    }

    pub fn decode_skinning_weights(&self, params: &ParamSet, zs: &[f64], vertices: &[[f64; 3]]) -> Result<Tensor> {
        self.skinning.check_params(SKIN_NET, params)?;
        ensure!(zs.len() == self.shape_dim, Dimension, "shape latent has {} values, expected {}", zs.len(), self.shape_dim);
        let mut tape = Tape::new();
        let bound = params.bind_selected(&mut tape, &[&format!("{SKIN_NET}.")], false);
        let z = tape.constant(Tensor::row(zs));
        let v = tape.constant(Tensor::from_points(vertices));
        let w = self.record_skinning(&mut tape, &bound, z, v)?;
        Ok(tape.value(w).clone())
    }

    pub fn control_points(&self, params: &ParamSet) -> Result<Vec<[f64; 3]>> {
        Ok(params.value(CONTROL_POINTS)?.to_points())
    }

    /// Deforms base-mesh vertices with the decoded transforms and weights.
    pub fn deform(
        &self,
        params: &ParamSet,
        zs: &[f64],
        zd: &[f64],
        vertices: &[[f64; 3]],
        mode: BlendMode,
    ) -> Result<Vec<[f64; 3]>> {
        let t = self.decode_transforms(params, zd)?;
        let w = self.decode_skinning_weights(params, zs, vertices)?;
        lbs_deform(vertices, &w, &t, &self.control_points(params)?, mode)
    }
}
