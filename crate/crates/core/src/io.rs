//! File formats: checkpoints, flat configs, masks, point clouds, meshes and
//! run manifests. Every writer goes through [`atomic_write`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ParamSet, Tensor};
use crate::error::{ensure, Error, Result};
use crate::mesh::TriMesh;
use crate::sdf::Mask2D;
use crate::training::{DeformPair, ShapeDataset, ShapeSample};

pub const CHECKPOINT_MAGIC: &str = "NLF1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().ok_or_else(|| Error::Validation(format!("`{}` is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Named tensors plus string metadata, stored as 32-bit floats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet) -> Self {
        let tensors = params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        Self { meta: BTreeMap::new(), tensors }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, v) in &self.tensors {
            p.insert(k.clone(), v.clone());
        }
        p
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| Error::Parse(format!("checkpoint field `{key}` has bad value `{s}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Incompatible(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Textual header, `end` line, then little-endian `f32` payloads in
    /// header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            ensure!(valid_token(k) && !v.contains('\n'), Validation, "metadata entry `{k}` cannot be stored");
            let _ = writeln!(head, "meta {k} {v}");
        }
        for (k, t) in &self.tensors {
            ensure!(valid_token(k), Validation, "tensor name `{k}` cannot be stored");
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(head, "tensor {k} {}", dims.join(" "));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in self.tensors.values() {
            for &x in t.data() {
                let f = x as f32;
                ensure!(f.is_finite(), Numerical, "tensor value {x} does not fit a 32-bit float");
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated"));
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let n = rest.iter().position(|&b| b == b'\n').ok_or_else(truncated)?;
            let line = std::str::from_utf8(&rest[..n]).map_err(|_| Error::Parse("checkpoint header is not text".into()))?;
            *pos += n + 1;
            Ok(line.to_string())
        };
        let magic = next_line(&mut pos)?;
        ensure!(magic == CHECKPOINT_MAGIC, Parse, "not a checkpoint file (magic `{magic}`)");
        let ver = next_line(&mut pos)?;
        let version: u32 = ver
            .strip_prefix("version ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse("checkpoint version line is malformed".into()))?;
        ensure!(
            version == CHECKPOINT_VERSION,
            Incompatible,
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        );
        let mut meta = BTreeMap::new();
        let mut dir: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut it = rest.split_whitespace();
                let name = it.next().ok_or_else(|| Error::Parse("tensor entry without a name".into()))?;
                let shape = it
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Parse(format!("bad dimension `{d}` for `{name}`"))))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(!shape.is_empty(), Parse, "tensor `{name}` has no shape");
                dir.push((name.to_string(), shape));
            } else {
                return Err(Error::Parse(format!("unexpected checkpoint header line `{line}`")));
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in dir {
            let n: usize = shape.iter().product();
            let end = pos.checked_add(n * 4).ok_or_else(truncated)?;
            if end > bytes.len() {
                return Err(truncated());
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos = end;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        ensure!(pos == bytes.len(), Parse, "checkpoint has {} trailing bytes", bytes.len() - pos);
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Later keys override
/// earlier ones.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {} is not `key = value`", n + 1)))?;
        let k = k.trim();
        ensure!(valid_token(k), Parse, "config line {} has an invalid key", n + 1);
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_config(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Binary greymap; the top image row is the mask's last row.
pub fn write_pgm(mask: &Mask2D) -> Vec<u8> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for j in (0..h).rev() {
        for i in 0..w {
            out.push(if mask.get(i, j) { 255 } else { 0 });
        }
    }
    out
}

/// Reads binary (`P5`) or plain (`P2`) greymaps; pixels above half of the
/// maximum value are foreground.
pub fn read_pgm(bytes: &[u8]) -> Result<Mask2D> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        ensure!(start < *pos, Parse, "greymap header is truncated");
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    ensure!(magic == "P5" || magic == "P2", Parse, "unsupported greymap type `{magic}`");
    let num = |pos: &mut usize| -> Result<usize> {
        let t = token(pos)?;
        t.parse().map_err(|_| Error::Parse(format!("bad greymap header value `{t}`")))
    };
    let (w, h, max) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
    ensure!(w > 0 && h > 0 && (1..=65535).contains(&max), Parse, "bad greymap dimensions");
    let mut raw = Vec::with_capacity(w * h);
    if magic == "P5" {
        pos += 1;
        let bpp = if max > 255 { 2 } else { 1 };
        ensure!(bytes.len() >= pos + w * h * bpp, Parse, "greymap pixel data is truncated");
        for k in 0..w * h {
            let p = pos + k * bpp;
            raw.push(if bpp == 2 { (bytes[p] as usize) << 8 | bytes[p + 1] as usize } else { bytes[p] as usize });
        }
    } else {
        for _ in 0..w * h {
            raw.push(num(&mut pos)?);
        }
    }
    let mut bits = vec![false; w * h];
    for r in 0..h {
        for i in 0..w {
            bits[(h - 1 - r) * w + i] = raw[r * w + i] * 2 > max;
        }
    }
    Mask2D::new(w, h, bits, 1.0 / w.max(h) as f64)
}

fn parse_floats(line: &str, n: usize, what: &str, lineno: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .take(n)
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("{what} line {lineno}: bad number `{t}`"))))
        .collect::<Result<_>>()?;
    ensure!(v.len() == n, Parse, "{what} line {lineno}: expected {n} numbers");
    ensure!(v.iter().all(|x| x.is_finite()), Parse, "{what} line {lineno}: non-finite value");
    Ok(v)
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn read_xyz(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(line, 3, "xyz", n + 1)?;
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

pub fn write_xyz(points: &[[f64; 3]]) -> String {
    points.iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect()
}

pub fn write_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {} {}", t[0], t[1]);
    }
    let with_uv = !mesh.uvs.is_empty();
    for f in &mesh.faces {
        if with_uv {
            let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1);
        } else {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    s
}

/// Strict reader for triangle OBJ files: `v`, `vt`, `vn` and triangular `f`
/// records only, indices 1-based and in range.
pub fn read_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match tag {
            "v" => {
                let v = parse_floats(rest, 3, "obj", n + 1)?;
                vertices.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                let v = parse_floats(rest, 2, "obj", n + 1)?;
                uvs.push([v[0], v[1]]);
            }
            "vn" | "o" | "g" | "s" => {}
            "f" => {
                let idx = rest
                    .split_whitespace()
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        match first.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(Error::Parse(format!("obj line {}: bad face index `{t}`", n + 1))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                ensure!(idx.len() == 3, Parse, "obj line {}: only triangles are supported", n + 1);
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => return Err(Error::Parse(format!("obj line {}: unsupported record `{tag}`", n + 1))),
        }
    }
    if uvs.len() != vertices.len() {
        uvs.clear();
    }
    let mesh = TriMesh { vertices, faces, uvs };
    mesh.validate().map_err(|e| Error::Parse(format!("obj mesh is invalid: {e}")))?;
    Ok(mesh)
}

pub fn write_ply(points: &[[f64; 3]], faces: &[[usize; 3]]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        points.len()
    );
    if !faces.is_empty() {
        let _ = writeln!(s, "element face {}\nproperty list uchar int vertex_indices", faces.len());
    }
    s.push_str("end_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Reads the vertex positions of an ASCII PLY file.
pub fn read_ply_points(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines();
    ensure!(lines.next().map(str::trim) == Some("ply"), Parse, "not a PLY file");
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line.starts_with("format") {
            ensure!(line.contains("ascii"), Parse, "only ASCII PLY files are supported");
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse::<usize>().map_err(|_| Error::Parse("bad PLY vertex count".into()))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let n = count.ok_or_else(|| Error::Parse("PLY file has no vertex element".into()))?;
    let mut out = Vec::with_capacity(n);
    for (k, line) in lines.take(n).enumerate() {
        let v = parse_floats(line, 3, "ply", k + 1)?;
        out.push([v[0], v[1], v[2]]);
    }
    ensure!(out.len() == n, Parse, "PLY file ends after {} of {n} vertices", out.len());
    Ok(out)
}

/// Latents as decimal text, one value per line, `z_s` then a `---` line then
/// `z_d`.
pub fn write_latents(zs: &[f64], zd: &[f64]) -> String {
    let mut s: String = zs.iter().map(|v| format!("{v}\n")).collect();
    s.push_str("---\n");
    s.extend(zd.iter().map(|v| format!("{v}\n")));
    s
}

pub fn read_latents(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut parts = [Vec::new(), Vec::new()];
    let mut k = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "---" {
            ensure!(k == 0, Parse, "latent file has more than one separator");
            k = 1;
            continue;
        }
        parts[k].push(line.parse::<f64>().map_err(|_| Error::Parse(format!("latent line {}: bad number", n + 1)))?);
    }
    ensure!(k == 1, Parse, "latent file lacks the `---` separator");
    let [zs, zd] = parts;
    Ok((zs, zd))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: BTreeMap<String, String>, seed: u64) -> Self {
        Self { command, config, seed, version: version_string(), wall_time_s: 0.0, outputs: Vec::new() }
    }

    /// Hashes an already-written output file.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.outputs.push(OutputRecord { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        atomic_write(path, format!("{json}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Parse(format!("manifest: {e}")))
    }
}

/// `v<crate version>`, extended with the commit description when the build
/// environment provides `NLF_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("NLF_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// All regular files below `dir`, sorted, relative to it.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Writes `masks/<id>.pgm` and `pairs/<id>/{base_id.txt, deformed.xyz,
/// base_mask.pgm, truth.json}` below `dir`. Returns the written paths in order.
pub fn save_dataset(dir: &Path, shapes: &ShapeDataset, pairs: &[DeformPair]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for s in &shapes.samples {
        let p = dir.join("masks").join(format!("{}.pgm", s.id));
        atomic_write(&p, &write_pgm(&s.mask))?;
        out.push(p);
    }
    for pair in pairs {
        let d = dir.join("pairs").join(&pair.id);
        let p = d.join("base_id.txt");
        atomic_write(&p, format!("{}\n", pair.base_id).as_bytes())?;
        out.push(p);
        let p = d.join("deformed.xyz");
        atomic_write(&p, write_xyz(&pair.cloud).as_bytes())?;
        out.push(p);
        if let Some(i) = shapes.index_of(&pair.base_id) {
            let p = d.join("base_mask.pgm");
            atomic_write(&p, &write_pgm(&shapes.samples[i].mask))?;
            out.push(p);
        }
        if let Some(t) = &pair.truth {
            let json = serde_json::to_string_pretty(t).map_err(|e| Error::Parse(e.to_string()))?;
            let p = d.join("truth.json");
            atomic_write(&p, format!("{json}\n").as_bytes())?;
            out.push(p);
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Reads a dataset directory written by [`save_dataset`]; masks and pairs
/// come back sorted by id. A missing `pairs/` directory yields no pairs.
pub fn load_dataset(dir: &Path) -> Result<(ShapeDataset, Vec<DeformPair>)> {
    ensure!(dir.join("masks").is_dir(), Validation, "{} has no masks/ directory", dir.display());
    let mut samples = Vec::new();
    for p in sorted_entries(&dir.join("masks"))? {
        if p.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        samples.push(ShapeSample { id, mask: read_pgm(&fs::read(&p)?)? });
    }
    let mut pairs = Vec::new();
    for d in sorted_entries(&dir.join("pairs"))? {
        if !d.is_dir() {
            continue;
        }
        let id = d.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let base_id = fs::read_to_string(d.join("base_id.txt"))?.trim().to_string();
        let cloud = read_xyz(&fs::read_to_string(d.join("deformed.xyz"))?)?;
        let tp = d.join("truth.json");
        let truth = if tp.exists() {
            Some(serde_json::from_slice(&fs::read(&tp)?).map_err(|e| Error::Parse(format!("{}: {e}", tp.display())))?)
        } else {
            None
        };
        pairs.push(DeformPair { id, base_id, cloud, truth });
    }
    Ok((ShapeDataset { samples }, pairs))
}
