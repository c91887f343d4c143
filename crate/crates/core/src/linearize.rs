//! The gradient cache built at the meta-initialization and first-order
//! approximation diagnostics.
//!
//! For each cached sample we keep `b = -y h(theta_star)` and
//! `g_proj = P^T grad h(theta_star)`. Multi-class and generative samples use
//! the log-odds margin with `y = +1`, so one scalar `b` per sample is enough.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::digest::{self, Digest};
use crate::model::{check_len, dot, margin, margin_and_gradient, ModelConfig, ParamVector, Sample};
use crate::project::{Projector, ProjectorId};
use crate::taskgen::{Corpus, Split};
use crate::{GradexError, Result, TaskId, TARGET_TASK};

pub const CACHE_MAGIC: &[u8; 8] = b"GXCACHE\0";
pub const CACHE_VERSION: u32 = 1;

/// `|h_X|` below this is excluded from RRSS aggregates.
pub const RRSS_DENOMINATOR_GUARD: f64 = 1e-8;

/// Gradients materialized at once while building a cache.
const BUILD_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Corpus-wide sample index (see [`Corpus::indexed_samples`]).
    pub sample_ref: usize,
    pub task_id: TaskId,
    /// `y` of the logistic form; always `+1` for multi-class samples.
    pub y_sign: i16,
    /// `-y h(theta_star)`.
    pub b: f64,
    pub g_proj: Vec<f64>,
}

impl CacheEntry {
    /// `h(theta_star)` recovered from `b`.
    pub fn margin_at_theta_star(&self) -> f64 {
        -(self.y_sign as f64) * self.b
    }
}

/// Immutable cache of `(b, g_proj)` pairs.
///
/// `entries` hold every training sample (sources and target); `val_entries`
/// hold the target validation samples, used only by the linearized scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCache {
    entries: Vec<CacheEntry>,
    val_entries: Vec<CacheEntry>,
    projector: ProjectorId,
    theta_star_digest: Digest,
    config_digest: Digest,
    by_task: BTreeMap<TaskId, Vec<usize>>,
}

impl GradientCache {
    pub fn from_parts(
        entries: Vec<CacheEntry>,
        val_entries: Vec<CacheEntry>,
        projector: ProjectorId,
        theta_star_digest: Digest,
    ) -> Result<Self> {
        for e in entries.iter().chain(&val_entries) {
            check_len("cached projected gradient", projector.d, e.g_proj.len())?;
            if !e.b.is_finite() || e.g_proj.iter().any(|v| !v.is_finite()) {
                return Err(GradexError::NonFinite("cache entry"));
            }
        }
        let mut by_task: BTreeMap<TaskId, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_task.entry(e.task_id).or_default().push(i);
        }
        Ok(GradientCache {
            entries,
            val_entries,
            projector,
            theta_star_digest,
            config_digest: [0; 32],
            by_task,
        })
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn val_entries(&self) -> &[CacheEntry] {
        &self.val_entries
    }

    pub fn projector_id(&self) -> ProjectorId {
        self.projector
    }

    pub fn d(&self) -> usize {
        self.projector.d
    }

    pub fn p(&self) -> usize {
        self.projector.p
    }

    pub fn theta_star_digest(&self) -> Digest {
        self.theta_star_digest
    }

    /// Digest of the configuration that produced the cache (zero if unset).
    pub fn config_digest(&self) -> Digest {
        self.config_digest
    }

    pub fn with_config_digest(mut self, digest: Digest) -> Self {
        self.config_digest = digest;
        self
    }

    /// Entry indices of one task's training samples.
    pub fn task_indices(&self, task: TaskId) -> &[usize] {
        self.by_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Source task ids present in the cache.
    pub fn source_tasks(&self) -> Vec<TaskId> {
        self.by_task.keys().copied().filter(|&t| t != TARGET_TASK).collect()
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.by_task.contains_key(&task)
    }

    /// Copy with task ids of source entries replaced via `relabel(entry)`.
    pub fn relabeled(&self, mut relabel: impl FnMut(&CacheEntry) -> TaskId) -> Result<GradientCache> {
        let entries = self
            .entries
            .iter()
            .map(|e| CacheEntry {
                task_id: if e.task_id == TARGET_TASK { TARGET_TASK } else { relabel(e) },
                ..e.clone()
            })
            .collect();
        Ok(
            GradientCache::from_parts(entries, self.val_entries.clone(), self.projector, self.theta_star_digest)?
                .with_config_digest(self.config_digest),
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let d = self.projector.d;
        let mut buf = Vec::with_capacity(128 + (self.entries.len() + self.val_entries.len()) * (16 + 4 * d));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.projector.p as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.val_entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.theta_star_digest);
        buf.extend_from_slice(&self.projector.seed.to_le_bytes());
        buf.extend_from_slice(&self.projector.generator_version.to_le_bytes());
        buf.extend_from_slice(&self.config_digest);
        for e in self.entries.iter().chain(&self.val_entries) {
            let sample_ref = u32::try_from(e.sample_ref)
                .map_err(|_| GradexError::format("cache", "sample index exceeds u32"))?;
            buf.extend_from_slice(&sample_ref.to_le_bytes());
            buf.extend_from_slice(&e.task_id.to_le_bytes());
            buf.extend_from_slice(&e.y_sign.to_le_bytes());
            buf.extend_from_slice(&e.b.to_le_bytes());
            for &g in &e.g_proj {
                buf.extend_from_slice(&(g as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a cache written by [`GradientCache::write_to`]. Projected
    /// gradients are stored as `f32`.
    pub fn read_from(mut r: impl Read) -> Result<GradientCache> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes, "cache");
        if cur.take(8)? != CACHE_MAGIC {
            return Err(GradexError::format("cache", "bad magic"));
        }
        let version = cur.u32()?;
        if version != CACHE_VERSION {
            return Err(GradexError::format("cache", format!("unsupported version {version}")));
        }
        let p = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let n_train = cur.u64()? as usize;
        let n_val = cur.u64()? as usize;
        let theta_star_digest: Digest = cur.take(32)?.try_into().expect("32 bytes");
        let seed = cur.u64()?;
        let generator_version = cur.u32()?;
        let config_digest: Digest = cur.take(32)?.try_into().expect("32 bytes");
        let record = 16 + 4 * d;
        if cur.remaining() != (n_train + n_val) * record {
            return Err(GradexError::format("cache", "record section length does not match header"));
        }
        let mut read_entry = || -> Result<CacheEntry> {
            let sample_ref = cur.u32()? as usize;
            let task_id = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
            let y_sign = i16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
            let b = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            let g_proj = cur
                .take(4 * d)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok(CacheEntry {
                sample_ref,
                task_id,
                y_sign,
                b,
                g_proj,
            })
        };
        let entries = (0..n_train).map(|_| read_entry()).collect::<Result<Vec<_>>>()?;
        let val_entries = (0..n_val).map(|_| read_entry()).collect::<Result<Vec<_>>>()?;
        GradientCache::from_parts(
            entries,
            val_entries,
            ProjectorId {
                seed,
                p,
                d,
                generator_version,
            },
            theta_star_digest,
        )
        .map(|c| c.with_config_digest(config_digest))
    }

    /// Digest of the serialized cache.
    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        digest::of_bytes(&buf)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        ByteCursor { bytes, pos: 0, kind }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GradexError::format(self.kind, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Builds the cache for every training sample of every task (target
/// included) plus the target validation samples.
pub fn build_cache(
    model: &ModelConfig,
    theta_star: &ParamVector,
    corpus: &Corpus,
    projector: &Projector,
) -> Result<GradientCache> {
    check_len("projector rows", model.param_count(), projector.p())?;
    check_len("parameter vector", model.param_count(), theta_star.len())?;
    let selected: Vec<(usize, Split, &Sample)> = corpus
        .indexed_samples()
        .filter(|(_, split, s)| *split == Split::Train || s.task_id == TARGET_TASK)
        .collect();
    let mut entries = Vec::new();
    let mut val_entries = Vec::new();
    for chunk in selected.chunks(BUILD_CHUNK) {
        let parts = chunk
            .par_iter()
            .map(|(_, _, s)| margin_and_gradient(model, theta_star, s))
            .collect::<Result<Vec<_>>>()?;
        let grads: Vec<&[f64]> = parts.iter().map(|(_, g)| g.as_slice()).collect();
        let projected = projector.project_many(&grads)?;
        for ((&(sample_ref, split, s), (h, _)), g_proj) in chunk.iter().zip(&parts).zip(projected) {
            let y = s.y_sign(model);
            let entry = CacheEntry {
                sample_ref,
                task_id: s.task_id,
                y_sign: y as i16,
                b: -y * h,
                g_proj,
            };
            match split {
                Split::Train => entries.push(entry),
                Split::Val => val_entries.push(entry),
            }
        }
    }
    GradientCache::from_parts(entries, val_entries, projector.id(), theta_star.digest())
}

/// Least-squares coordinates `z` with `P z` closest to `x - theta_star`;
/// exact whenever the displacement lies in the span of `P`.
pub fn projected_displacement(projector: &Projector, theta_star: &ParamVector, x: &ParamVector) -> Result<Vec<f64>> {
    check_len("projector rows", theta_star.len(), projector.p())?;
    let delta = x.sub(theta_star)?;
    let rhs = projector.project(delta.as_slice())?;
    let d = projector.d();
    let gram = DMatrix::from_row_slice(d, d, &projector.gram());
    let rhs = DVector::from_vec(rhs);
    let z = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| GradexError::InvalidConfig("projection matrix has dependent columns".into()))?;
    Ok(z.iter().copied().collect())
}

/// `h(theta_star) + g_proj . z` for displacement coordinates `z`.
pub fn taylor_margin_projected(entry: &CacheEntry, z: &[f64]) -> f64 {
    entry.margin_at_theta_star() + dot(&entry.g_proj, z)
}

/// First-order margin at `x` from a cache entry.
pub fn taylor_margin(entry: &CacheEntry, theta_star: &ParamVector, x: &ParamVector, projector: &Projector) -> Result<f64> {
    let z = projected_displacement(projector, theta_star, x)?;
    Ok(taylor_margin_projected(entry, &z))
}

/// First-order margin at `x` from the full gradient.
pub fn taylor_margin_full(h_star: f64, grad: &ParamVector, theta_star: &ParamVector, x: &ParamVector) -> Result<f64> {
    Ok(h_star + grad.dot(&x.sub(theta_star)?))
}

/// Per-sample relative squared residual of the first-order expansion,
/// `None` when `|h_X|` is below [`RRSS_DENOMINATOR_GUARD`].
pub fn rrss(model: &ModelConfig, theta_star: &ParamVector, x: &ParamVector, sample: &Sample) -> Result<Option<f64>> {
    let h_x = margin(model, x, sample)?;
    let (h_star, grad) = margin_and_gradient(model, theta_star, sample)?;
    let residual = h_x - taylor_margin_full(h_star, &grad, theta_star, x)?;
    if h_x.abs() < RRSS_DENOMINATOR_GUARD {
        return Ok(None);
    }
    Ok(Some(residual * residual / (h_x * h_x)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrssRow {
    pub distance: f64,
    pub mean: f64,
    pub std: f64,
    pub directions: usize,
    /// Sample evaluations dropped by the denominator guard.
    pub excluded: usize,
}

/// RRSS across relative distances `||X - theta_star|| / ||theta_star||`.
///
/// Directions come from `endpoints` (normalized `theta_S - theta_star`) first,
/// then seeded random unit vectors; each is rescaled to the exact distance.
/// The same directions are reused at every distance. Per direction the
/// statistic is `sum(residual^2) / sum(h_X^2)` over `samples`.
pub fn rrss_sweep(
    model: &ModelConfig,
    theta_star: &ParamVector,
    samples: &[Sample],
    distances: &[f64],
    n_directions: usize,
    endpoints: &[ParamVector],
    seed: u64,
) -> Result<Vec<RrssRow>> {
    if samples.is_empty() {
        return Err(GradexError::EmptyData("RRSS samples"));
    }
    if n_directions == 0 {
        return Err(GradexError::InvalidConfig("n_directions must be positive".into()));
    }
    if distances.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(GradexError::InvalidConfig("distances must be finite and non-negative".into()));
    }
    let theta_norm = theta_star.norm();
    if theta_norm == 0.0 {
        return Err(GradexError::ZeroNorm("theta_star"));
    }
    let p = theta_star.len();

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n_directions);
    for end in endpoints {
        if directions.len() == n_directions {
            break;
        }
        let u = end.sub(theta_star)?;
        let norm = u.norm();
        if norm > 0.0 {
            directions.push(u.as_slice().iter().map(|v| v / norm).collect());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while directions.len() < n_directions {
        let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dot(&v, &v).sqrt();
        directions.push(v.into_iter().map(|x| x / norm).collect());
    }

    let linear: Vec<(f64, ParamVector)> = samples
        .par_iter()
        .map(|s| margin_and_gradient(model, theta_star, s))
        .collect::<Result<_>>()?;

    distances
        .iter()
        .map(|&r| {
            let step = r * theta_norm;
            let per_direction = directions
                .par_iter()
                .map(|u| -> Result<(f64, usize)> {
                    let x = ParamVector::new(
                        theta_star.as_slice().iter().zip(u).map(|(t, v)| t + step * v).collect(),
                    )?;
                    let mut num = 0.0;
                    let mut den = 0.0;
                    let mut excluded = 0;
                    for (s, (h_star, grad)) in samples.iter().zip(&linear) {
                        let h_x = margin(model, &x, s)?;
                        if h_x.abs() < RRSS_DENOMINATOR_GUARD {
                            excluded += 1;
                            continue;
                        }
                        let residual = h_x - h_star - step * dot(grad.as_slice(), u);
                        num += residual * residual;
                        den += h_x * h_x;
                    }
                    Ok((if den > 0.0 { num / den } else { 0.0 }, excluded))
                })
                .collect::<Result<Vec<_>>>()?;
            let k = per_direction.len() as f64;
            let mean = per_direction.iter().map(|(v, _)| v).sum::<f64>() / k;
            let std = if per_direction.len() > 1 {
                (per_direction.iter().map(|(v, _)| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(RrssRow {
                distance: r,
                mean,
                std,
                directions: per_direction.len(),
                excluded: per_direction.iter().map(|(_, e)| e).sum(),
            })
        })
        .collect()
}
