//! Pairwise distances: DTW over sequences, cosine over attribution masks, and
//! their normalized blend.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::AttributionMask;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Dtw,
    Cosine,
    Aggregated,
}

/// Symmetric, zero-diagonal, non-negative `N x N` matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub kind: DistanceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a matrix from the strict upper triangle, row by row.
    fn from_upper(ids: Vec<String>, kind: DistanceKind, upper: Vec<Vec<f64>>) -> Self {
        let n = ids.len();
        let mut entries = vec![0.0; n * n];
        for (i, row) in upper.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        DistanceMatrix {
            ids,
            kind,
            alpha: None,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.entries.len() != n * n {
            return Err(Error::Mismatch {
                what: "distance matrix entries",
                expected: n * n,
                found: self.entries.len(),
            });
        }
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidConfig(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !(v >= 0.0 && v.is_finite()) || (v - self.get(j, i)).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!("invalid entry at ({i}, {j})")));
                }
                if self.kind == DistanceKind::Aggregated && v > 1.0 {
                    return Err(Error::InvalidConfig(format!("aggregated entry {v} > 1")));
                }
            }
        }
        Ok(())
    }

    /// Min-max normalization over off-diagonal entries. A matrix whose
    /// off-diagonal entries are all equal normalizes to all zeros.
    pub fn normalized(&self) -> DistanceMatrix {
        let n = self.len();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    lo = lo.min(self.get(i, j));
                    hi = hi.max(self.get(i, j));
                }
            }
        }
        let span = hi - lo;
        let entries = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i == j || !(span > 0.0) {
                    0.0
                } else {
                    ((self.entries[idx] - lo) / span).clamp(0.0, 1.0)
                }
            })
            .collect();
        DistanceMatrix {
            entries,
            ..self.clone()
        }
    }

    /// Reorders rows and columns: entry `(a, b)` of the result is entry
    /// `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> DistanceMatrix {
        let n = self.len();
        let mut entries = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                entries[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        DistanceMatrix {
            ids: perm.iter().map(|&p| self.ids[p].clone()).collect(),
            kind: self.kind,
            alpha: self.alpha,
            entries,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: DistanceMatrix = serde_json::from_slice(&bytes)?;
        m.validate()?;
        Ok(m)
    }

    /// Compact little-endian encoding: magic, kind, alpha (NaN when absent),
    /// ids as length-prefixed UTF-8, then the `N x N` entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.entries.len() * 8);
        out.extend_from_slice(BINARY_MAGIC);
        out.push(match self.kind {
            DistanceKind::Dtw => 0,
            DistanceKind::Cosine => 1,
            DistanceKind::Aggregated => 2,
        });
        out.extend_from_slice(&self.alpha.unwrap_or(f64::NAN).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Parse {
            line: 0,
            message: format!("distance cache: {what}"),
        };
        let mut rest = bytes.strip_prefix(BINARY_MAGIC).ok_or_else(|| bad("bad magic"))?;
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let kind = match take(1)?[0] {
            0 => DistanceKind::Dtw,
            1 => DistanceKind::Cosine,
            2 => DistanceKind::Aggregated,
            _ => return Err(bad("unknown kind")),
        };
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let alpha = f64_at(take(8)?);
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| bad("id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        let raw = take(n.checked_mul(n).and_then(|c| c.checked_mul(8)).ok_or_else(|| bad("size overflow"))?)?;
        let entries = raw.chunks_exact(8).map(f64_at).collect();
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let m = DistanceMatrix {
            ids,
            kind,
            alpha: (!alpha.is_nan()).then_some(alpha),
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

const BINARY_MAGIC: &[u8; 8] = b"SPSDIST1";

/// Column-major-in-time copy: `out[t * d + c]`.
fn time_major(s: &TimeSeries) -> Vec<f64> {
    let (d, n) = (s.channels(), s.len());
    let mut out = vec![0.0; d * n];
    for (c, row) in s.values.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            out[t * d + c] = *v;
        }
    }
    out
}

/// DTW over time-major buffers with optional Sakoe-Chiba half-width.
pub(crate) fn dtw_time_major(a: &[f64], b: &[f64], d: usize, window: Option<usize>) -> f64 {
    let (n, m) = (a.len() / d, b.len() / d);
    if n == 0 || m == 0 {
        return if n == m { 0.0 } else { f64::INFINITY };
    }
    let w = window.map_or(n.max(m), |w| w.max(n.abs_diff(m)));
    let cost = |i: usize, j: usize| -> f64 {
        let (x, y) = (&a[(i - 1) * d..i * d], &b[(j - 1) * d..j * d]);
        if d == 1 {
            (x[0] - y[0]).abs()
        } else {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        }
    };
    let inf = f64::INFINITY;
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        cur[lo - 1] = inf;
        if hi < m {
            cur[hi + 1] = inf;
        }
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = cost(i, j) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Univariate DTW of `a` against `L` series of one common length, computed
/// together so their dependency chains overlap. `bt` interleaves the series
/// as `bt[t * L + l]`. Each lane performs exactly the operations of
/// [`dtw_time_major`] and returns the same bits.
fn dtw_univariate_lanes<const L: usize>(a: &[f64], bt: &[f64], window: Option<usize>) -> [f64; L] {
    let (n, m) = (a.len(), bt.len() / L);
    debug_assert!(n > 0 && m > 0);
    let w = window.map_or(n.max(m), |w| w.max(n.abs_diff(m)));
    let inf = [f64::INFINITY; L];
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = [0.0; L];
    for i in 1..=n {
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        cur[lo - 1] = inf;
        if hi < m {
            cur[hi + 1] = inf;
        }
        let ai = a[i - 1];
        let mut left = inf;
        let row = &mut cur[lo..=hi];
        let diag = &prev[lo - 1..hi];
        let up = &prev[lo..=hi];
        let ys = bt[(lo - 1) * L..hi * L].chunks_exact(L);
        for (((c, d), u), y) in row.iter_mut().zip(diag).zip(up).zip(ys) {
            for l in 0..L {
                let best = d[l].min(u[l]).min(left[l]);
                left[l] = (ai - y[l]).abs() + best;
            }
            *c = left;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Unconstrained DTW with Euclidean local cost between time-step vectors.
pub fn dtw_distance(a: &TimeSeries, b: &TimeSeries) -> Result<f64> {
    dtw_distance_banded(a, b, None)
}

pub fn dtw_distance_banded(a: &TimeSeries, b: &TimeSeries, window: Option<usize>) -> Result<f64> {
    if a.channels() != b.channels() {
        return Err(Error::Mismatch {
            what: "DTW channel count",
            expected: a.channels(),
            found: b.channels(),
        });
    }
    Ok(dtw_time_major(&time_major(a), &time_major(b), a.channels(), window))
}

/// `1 - a.b / (|a| |b|)`; zero vectors are at distance 0 from each other and
/// 1 from anything else.
pub fn cosine_attribution_distance(a: &AttributionMask, b: &AttributionMask) -> Result<f64> {
    cosine_distance(&a.weights, &b.weights)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Mismatch {
            what: "attribution mask length",
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (1.0 - dot / (na * nb)).max(0.0)
        }
    })
}

/// Pairs computed together on the univariate fast path.
const LANES: usize = 4;

pub fn dtw_matrix(series: &[&TimeSeries], window: Option<usize>) -> Result<DistanceMatrix> {
    if let Some(first) = series.first() {
        if let Some(bad) = series.iter().find(|s| s.channels() != first.channels()) {
            return Err(Error::instance(&bad.id, "channel count differs within DTW matrix"));
        }
    }
    let d = series.first().map_or(1, |s| s.channels());
    let buffers: Vec<Vec<f64>> = series.iter().map(|s| time_major(s)).collect();
    let n = series.len();
    let len = buffers.first().map_or(0, Vec::len);
    let lanes = d == 1 && len > 0 && buffers.iter().all(|b| b.len() == len);
    let upper = par::map_indices(n, |i| {
        let mut row = Vec::with_capacity(n - i - 1);
        let mut j = i + 1;
        if lanes {
            let mut bt = vec![0.0; len * LANES];
            while j + LANES <= n {
                for l in 0..LANES {
                    for (t, v) in buffers[j + l].iter().enumerate() {
                        bt[t * LANES + l] = *v;
                    }
                }
                row.extend(dtw_univariate_lanes::<LANES>(&buffers[i], &bt, window));
                j += LANES;
            }
        }
        row.extend((j..n).map(|j| dtw_time_major(&buffers[i], &buffers[j], d, window)));
        row
    });
    let ids = series.iter().map(|s| s.id.clone()).collect();
    Ok(DistanceMatrix::from_upper(ids, DistanceKind::Dtw, upper))
}

pub fn cosine_matrix(masks: &[AttributionMask]) -> Result<DistanceMatrix> {
    let n = masks.len();
    let upper = par::map_indices(n, |i| {
        ((i + 1)..n)
            .map(|j| cosine_attribution_distance(&masks[i], &masks[j]))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ids = masks.iter().map(|m| m.instance_id.clone()).collect();
    Ok(DistanceMatrix::from_upper(ids, DistanceKind::Cosine, upper))
}

/// `alpha * norm(dtw) + (1 - alpha) * norm(cos)`, both min-max normalized
/// over their off-diagonal entries.
pub fn combine(dtw: &DistanceMatrix, cos: &DistanceMatrix, alpha: f64) -> Result<DistanceMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if dtw.ids != cos.ids {
        return Err(Error::InvalidConfig(
            "DTW and cosine matrices cover different instances".into(),
        ));
    }
    let (dn, cn) = (dtw.normalized(), cos.normalized());
    let entries = dn
        .entries
        .iter()
        .zip(&cn.entries)
        .map(|(x, y)| (alpha * x + (1.0 - alpha) * y).clamp(0.0, 1.0))
        .collect();
    Ok(DistanceMatrix {
        ids: dtw.ids.clone(),
        kind: DistanceKind::Aggregated,
        alpha: Some(alpha),
        entries,
    })
}

/// The attribution-aware distance between the given instances.
pub fn aggregated_matrix(
    series: &[&TimeSeries],
    masks: &[AttributionMask],
    alpha: f64,
    window: Option<usize>,
) -> Result<DistanceMatrix> {
    if series.len() != masks.len() {
        return Err(Error::Mismatch {
            what: "masks per instance",
            expected: series.len(),
            found: masks.len(),
        });
    }
    if let Some((s, m)) = series.iter().zip(masks).find(|(s, m)| s.id != m.instance_id) {
        return Err(Error::instance(
            &s.id,
            format!("aligned with mask of `{}`", m.instance_id),
        ));
    }
    combine(&dtw_matrix(series, window)?, &cosine_matrix(masks)?, alpha)
}
