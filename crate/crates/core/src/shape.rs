//! Base shape space: a latent-conditioned 2D signed distance decoder and the
//! flat triangle mesh extracted from its occupancy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Activation, Bound, MlpSpec, OutputHead, ParamSet, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::mesh::TriMesh;
use crate::sdf::{sdf_to_soft_mask, Mask2D};

/// Parameter-name prefix of the shape decoder network.
pub const SHAPE_NET: &str = "shape_net";
/// Name of the per-sample shape latent table (`M x N_s`).
pub const SHAPE_LATENTS: &str = "shape_latents";

/// Maps `(u, v, z_s)` to a signed distance, positive inside the leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDecoder {
    pub latent_dim: usize,
    pub spec: MlpSpec,
}

impl ShapeDecoder {
    /// `depth` hidden layers of width `hidden`; inputs are re-injected halfway
    /// when `depth >= 4`.
    pub fn new(latent_dim: usize, hidden: usize, depth: usize) -> Result<Self> {
        ensure!(depth >= 1 && hidden >= 1, Validation, "shape decoder needs at least one hidden layer");
        let mut layer_widths = vec![hidden; depth];
        layer_widths.push(1);
        let skip_layers = if depth >= 4 { vec![depth / 2] } else { Vec::new() };
        let spec = MlpSpec {
            input_width: 2 + latent_dim,
            layer_widths,
            activation: Activation::Softplus,
            skip_layers,
            output_head: OutputHead::Raw,
        };
        spec.validate()?;
        Ok(Self { latent_dim, spec })
    }

    /// Geometric initialization: the untrained decoder approximates the signed
    /// distance of a disk of `radius` centered in the UV square, independent of
    /// the latent code.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng, radius: f64) {
        let n = self.spec.layer_widths.len();
        for l in 0..n {
            let inp = self.spec.layer_input_width(l);
            let out = self.spec.layer_widths[l];
            let mut w = vec![0.0; inp * out];
            let mut b = vec![0.0; out];
            if l + 1 == n {
                let normal = Normal::new(-(std::f64::consts::PI / inp as f64).sqrt(), 1e-4).unwrap();
                w.iter_mut().for_each(|x| *x = normal.sample(rng));
                b[0] = radius;
            } else {
                let normal = Normal::new(0.0, (2.0 / out as f64).sqrt()).unwrap();
                w.iter_mut().for_each(|x| *x = normal.sample(rng));
                // Rows fed by the latent code start at zero.
                let latent_rows = if l == 0 {
                    Some(2..inp)
                } else if self.spec.skip_layers.contains(&l) {
                    Some(inp - self.latent_dim..inp)
                } else {
                    None
                };
                if let Some(rows) = latent_rows {
                    for r in rows {
                        w[r * out..(r + 1) * out].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
            params.insert(MlpSpec::weight_name(SHAPE_NET, l), Tensor::from_raw(inp, out, w));
            params.insert(MlpSpec::bias_name(SHAPE_NET, l), Tensor::from_raw(1, out, b));
        }
        // Softplus offsets shift the output; recenter so the middle of the UV
        // square decodes to exactly `radius`.
        let zero = vec![0.0; self.latent_dim];
        if let Ok(v) = self.decode_sdf(params, &zero, &[[0.5, 0.5]]) {
            let name = MlpSpec::bias_name(SHAPE_NET, n - 1);
            let mut b = params.value(&name).expect("bias just inserted").clone();
            b.data_mut()[0] += radius - v[0];
            params.set(&name, b);
        }
    }

    fn input(&self, tape: &mut Tape, uv: Var, z: Var) -> Result<Var> {
        ensure!(tape.value(uv).cols() == 2, Dimension, "UV input needs 2 columns");
        let zv = tape.value(z);
        ensure!(zv.cols() == self.latent_dim, Dimension, "shape latent has {} values, expected {}", zv.cols(), self.latent_dim);
        ensure!(
            zv.rows() == 1 || zv.rows() == tape.value(uv).rows(),
            Dimension,
            "shape latent rows must be 1 or match the query count"
        );
        let centered = tape.add_const(uv, -0.5);
        Ok(tape.concat(&[centered, z]))
    }

    /// Records the decoder for `n x 2` UV queries and a `1 x N` or `n x N` latent.
    pub fn record(&self, tape: &mut Tape, bound: &Bound, uv: Var, z: Var) -> Result<Var> {
        let x = self.input(tape, uv, z)?;
        self.spec.forward(tape, bound, SHAPE_NET, x)
    }

    /// Decoder output and its partial derivatives along `u` and `v`.
    pub fn record_with_gradient(&self, tape: &mut Tape, bound: &Bound, uv: Var, z: Var) -> Result<(Var, Var, Var)> {
        let x = self.input(tape, uv, z)?;
        let n = tape.value(x).rows();
        let w = self.spec.input_width;
        let mut tangents = Vec::with_capacity(2);
        for axis in 0..2 {
            let mut t = vec![0.0; n * w];
            for r in 0..n {
                t[r * w + axis] = 1.0;
            }
            tangents.push(tape.constant(Tensor::from_raw(n, w, t)));
        }
        let (f, t) = self.spec.forward_with_tangents(tape, bound, SHAPE_NET, x, &tangents)?;
        Ok((f, t[0], t[1]))
    }

    /// Signed distances at `uv` for the latent `z`.
    pub fn decode_sdf(&self, params: &ParamSet, z: &[f64], uv: &[[f64; 2]]) -> Result<Vec<f64>> {
        self.spec.check_params(SHAPE_NET, params)?;
        ensure!(z.len() == self.latent_dim, Dimension, "shape latent has {} values, expected {}", z.len(), self.latent_dim);
        ensure!(z.iter().all(|x| x.is_finite()), Validation, "shape latent contains non-finite values");
        if uv.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = params.bind_selected(&mut tape, &[&format!("{SHAPE_NET}.")], false);
        let q = tape.constant(Tensor::from_raw(uv.len(), 2, uv.iter().flat_map(|p| *p).collect()));
        let zv = tape.constant(Tensor::row(z));
        let f = self.record(&mut tape, &bound, q, zv)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Occupancy of the decoded shape on a `resolution x resolution` UV raster.
    pub fn decoded_mask(&self, params: &ParamSet, z: &[f64], resolution: usize, k: f64) -> Result<Mask2D> {
        ensure!(resolution > 0, Validation, "mesh resolution must be positive");
        let s = 1.0 / resolution as f64;
        let uv: Vec<[f64; 2]> = (0..resolution * resolution)
            .map(|p| [((p % resolution) as f64 + 0.5) * s, ((p / resolution) as f64 + 0.5) * s])
            .collect();
        let d = self.decode_sdf(params, z, &uv)?;
        Mask2D::unit(resolution, d.iter().map(|&d| sdf_to_soft_mask(d, k) > 0.5).collect())
    }

    /// Thresholds the decoded field, cleans the mask and meshes it.
    pub fn decoded_mesh(&self, params: &ParamSet, z: &[f64], resolution: usize, k: f64) -> Result<BaseMesh> {
        let mut mask = self.decoded_mask(params, z, resolution, k)?;
        mask.cleanup();
        if mask.count() < 3 {
            return Err(Error::Degenerate("shape latent decodes to an empty shape".into()));
        }
        extract_base_mesh(&mask)
    }
}

/// Flat leaf mesh in the `z = 0` plane with its ordered outer contour.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseMesh {
    pub mesh: TriMesh,
    /// Boundary vertex indices, counter-clockwise seen from `+z`.
    pub contour: Vec<usize>,
    /// Source pixel of every vertex.
    pub pixels: Vec<[usize; 2]>,
}

/// One vertex per foreground pixel center (raster order, bottom row first);
/// every fully occupied 2x2 pixel block becomes two counter-clockwise triangles
/// split along the lower-left to upper-right diagonal.
pub fn extract_base_mesh(mask: &Mask2D) -> Result<BaseMesh> {
    let (w, h) = (mask.width(), mask.height());
    ensure!(mask.count() >= 3, Degenerate, "mask has fewer than 3 foreground pixels");
    let mut index = vec![usize::MAX; w * h];
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut pixels = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if mask.get(i, j) {
                index[j * w + i] = vertices.len();
                let c = mask.center(i, j);
                vertices.push([c[0], c[1], 0.0]);
                uvs.push(c);
                pixels.push([i, j]);
            }
        }
    }
    let mut faces = Vec::new();
    for j in 0..h.saturating_sub(1) {
        for i in 0..w.saturating_sub(1) {
            let a = index[j * w + i];
            let b = index[j * w + i + 1];
            let c = index[(j + 1) * w + i + 1];
            let d = index[(j + 1) * w + i];
            if [a, b, c, d].iter().all(|&x| x != usize::MAX) {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
    ensure!(!faces.is_empty(), Degenerate, "mask contains no fully occupied 2x2 block");
    let mesh = TriMesh { vertices, faces, uvs };
    let contour = mesh.boundary_loop()?;
    Ok(BaseMesh { mesh, contour, pixels })
}

/// Linear blend `(1 - t) a + t b` of two latent codes.
pub fn interpolate_latent(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure!(a.len() == b.len(), Dimension, "latent lengths differ: {} vs {}", a.len(), b.len());
    ensure!(t.is_finite(), Validation, "interpolation weight must be finite");
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

/// Draws a latent from `N(0, s^2 I)` where `s` is the empirical standard
/// deviation of all entries of a trained latent table.
pub fn sample_latent(table: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
    ensure!(table.rows() >= 1 && table.cols() >= 1, Validation, "latent table is empty");
    let n = table.len() as f64;
    let mean = table.data().iter().sum::<f64>() / n;
    let var = table.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; table.cols()]);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((0..table.cols()).map(|_| normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn block(n: usize) -> Mask2D {
        let mut bits = vec![false; 25];
        for j in 1..1 + n {
            for i in 1..1 + n {
                bits[j * 5 + i] = true;
            }
        }
        Mask2D::unit(5, bits).unwrap()
    }

    #[test]
    fn two_by_two_block() {
        let m = extract_base_mesh(&block(2)).unwrap();
        assert_eq!(m.mesh.vertices.len(), 4);
        assert_eq!(m.mesh.faces, vec![[0, 1, 3], [0, 3, 2]]);
        for f in 0..2 {
            assert!(m.mesh.face_normal(f)[2] > 0.0);
        }
    }

    #[test]
    fn three_by_three_block() {
        let m = extract_base_mesh(&block(3)).unwrap();
        assert_eq!(m.mesh.vertices.len(), 9);
        assert_eq!(m.mesh.faces.len(), 8);
        assert_eq!(m.contour.len(), 8);
        assert_eq!(m.mesh.euler_characteristic(), 1);
        assert!(!m.contour.contains(&4));
    }

    #[test]
    fn too_small_masks_are_degenerate() {
        let mut bits = vec![false; 25];
        bits[6] = true;
        bits[7] = true;
        assert!(matches!(extract_base_mesh(&Mask2D::unit(5, bits).unwrap()), Err(Error::Degenerate(_))));
    }

    fn decoder() -> (ShapeDecoder, ParamSet) {
        let d = ShapeDecoder::new(8, 64, 4).unwrap();
        let mut p = ParamSet::new();
        d.init_params(&mut p, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0), 0.5);
        (d, p)
    }

    #[test]
    fn geometric_init_is_disk() {
        let (d, p) = decoder();
        let z = vec![0.3; 8];
        let v = d.decode_sdf(&p, &z, &[[0.5, 0.5], [0.5, 0.8], [1.2, 0.5]]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-9, "{v:?}");
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    }

    #[test]
    fn decoded_mesh_errors() {
        let (d, p) = decoder();
        assert!(matches!(d.decoded_mesh(&p, &[0.0; 8], 0, 50.0), Err(Error::Validation(_))));
        assert!(d.decode_sdf(&p, &[0.0; 3], &[[0.5, 0.5]]).is_err());
        let m = d.decoded_mesh(&p, &[0.0; 8], 16, 50.0).unwrap();
        assert_eq!(m.mesh.euler_characteristic(), 1);
    }

    #[test]
    fn gradient_tangents_match_finite_differences() {
        let (d, p) = decoder();
        let z = Tensor::row(&[0.1; 8]);
        let uv = [[0.3, 0.6], [0.7, 0.45]];
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let q = tape.constant(Tensor::from_raw(2, 2, uv.iter().flat_map(|x| *x).collect()));
        let zv = tape.constant(z.clone());
        let (_, du, dv) = d.record_with_gradient(&mut tape, &bound, q, zv).unwrap();
        let h = 1e-5;
        for (r, c) in uv.iter().enumerate() {
            let f = |a: f64, b: f64| d.decode_sdf(&p, z.data(), &[[a, b]]).unwrap()[0];
            let gu = (f(c[0] + h, c[1]) - f(c[0] - h, c[1])) / (2.0 * h);
            let gv = (f(c[0], c[1] + h) - f(c[0], c[1] - h)) / (2.0 * h);
            assert!((tape.value(du).data()[r] - gu).abs() < 1e-5);
            assert!((tape.value(dv).data()[r] - gv).abs() < 1e-5);
        }
    }

    #[test]
    fn latent_helpers() {
        assert_eq!(interpolate_latent(&[0.0, 2.0], &[2.0, 4.0], 0.25).unwrap(), vec![0.5, 2.5]);
        assert!(interpolate_latent(&[0.0], &[1.0, 2.0], 0.5).is_err());
        let t = Tensor::matrix(2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let z = sample_latent(&t, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(z.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cleaned_masks_mesh_to_disks(bits in proptest::collection::vec(any::<bool>(), 144), fill in 0.0f64..1.0) {
            let mut m = Mask2D::unit(12, bits.iter().enumerate().map(|(k, &b)| b || ((k % 7) as f64) < fill * 7.0).collect()).unwrap();
            m.cleanup();
            prop_assume!(m.count() >= 4);
            let bm = extract_base_mesh(&m).unwrap();
            prop_assert_eq!(bm.mesh.euler_characteristic(), 1);
            prop_assert_eq!(bm.mesh.vertices.len(), m.count());
            for f in 0..bm.mesh.faces.len() {
                prop_assert!(bm.mesh.face_normal(f)[2] > 0.0);
            }
        }
    }
}
