//! Joint fitting of several leaves of one plant with a shared anchor shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::encoder::latent_means;
use super::{invert_latents, refine_fit, FitConfig, FitResult, Inversion, InversionEncoders};
use crate::error::{ensure, Result};
use crate::training::{DeformModel, ShapeModel};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(c: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    c.iter().enumerate().map(|(i, c)| (i, d2(c, p))).fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> KMeans {
    // k-means++ seeding.
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let w: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            w.iter().position(|&x| {
                t -= x;
                t < 0.0
            })
            .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        if next == labels {
            break;
        }
        labels = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            *centroid = (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| d2(p, &centroids[l])).sum();
    KMeans { labels, centroids, inertia }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins (earliest on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    ensure!(k >= 1 && points.len() >= k, Validation, "k-means needs at least {k} points");
    ensure!(restarts >= 1, Validation, "k-means needs at least one restart");
    let dim = points[0].len();
    ensure!(points.iter().all(|p| p.len() == dim), Dimension, "k-means points differ in length");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let r = lloyd(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Index of the anchor latent: the member of the largest cluster closest to
/// its centroid, or the medoid when there are fewer latents than clusters.
pub fn choose_anchor(latents: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<(usize, Option<KMeans>)> {
    ensure!(!latents.is_empty(), Validation, "no latents to choose an anchor from");
    if latents.len() < k {
        let medoid = (0..latents.len())
            .map(|i| (i, latents.iter().map(|q| d2(&latents[i], q).sqrt()).sum::<f64>()))
            .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
            .0;
        return Ok((medoid, None));
    }
    let km = kmeans(latents, k, restarts, seed)?;
    let sizes: Vec<usize> = (0..k).map(|c| km.labels.iter().filter(|&&l| l == c).count()).collect();
    let largest = (0..k).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
    let anchor = (0..latents.len())
        .filter(|&i| km.labels[i] == largest)
        .map(|i| (i, d2(&latents[i], &km.centroids[largest])))
        .fold((usize::MAX, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
        .0;
    Ok((anchor, Some(km)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiFit {
    pub fits: Vec<FitResult>,
    pub inversions: Vec<Inversion>,
    pub anchor: Option<Vec<f64>>,
    pub anchor_index: Option<usize>,
}

/// Inverts every instance, picks an anchor shape latent when `shared`, then
/// refines each instance independently with the anchor pull. Without
/// encoders every instance starts from the latent-table means.
pub fn fit_multi_leaf(
    instances: &[Vec<[f64; 3]>],
    shape: &ShapeModel,
    deform: &DeformModel,
    encoders: Option<&InversionEncoders>,
    shared: bool,
    cfg: &FitConfig,
) -> Result<MultiFit> {
    cfg.validate()?;
    ensure!(!instances.is_empty(), Validation, "no leaf instances to fit");
    let inversions = instances
        .iter()
        .map(|cloud| match encoders {
            Some(enc) => {
                enc.check_models(shape, deform)?;
                invert_latents(&enc.grid_for(cloud)?, enc)
            }
            None => {
                let (zs, zd) = latent_means(shape, deform)?;
                Ok(Inversion { zs, zd, low_confidence: true })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (anchor, anchor_index) = if shared {
        let zs: Vec<Vec<f64>> = inversions.iter().map(|i| i.zs.clone()).collect();
        let (i, _) = choose_anchor(&zs, cfg.clusters, cfg.restarts, cfg.seed)?;
        (Some(zs[i].clone()), Some(i))
    } else {
        (None, None)
    };
    let fit = |(cloud, inv): (&Vec<[f64; 3]>, &Inversion)| {
        refine_fit(shape, deform, &inv.zs, &inv.zd, cloud, anchor.as_deref(), cfg)
    };
    #[cfg(feature = "parallel")]
    let fits = instances.par_iter().zip(inversions.par_iter()).map(fit).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let fits = instances.iter().zip(inversions.iter()).map(fit).collect::<Result<Vec<_>>>()?;
    Ok(MultiFit { fits, inversions, anchor, anchor_index })
}
