//! Extremely randomized trees baseline: per-pixel band-vector regression.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::nn::seeded_rng;
use crate::par::map_indexed;
use crate::seeds::{sub_seed, SALT_TREES};
use crate::tile::LabeledPatch;

pub const DEFAULT_NUM_TREES: usize = 100;
pub const MIN_LEAF: usize = 2;
pub const ETR1_MAGIC: &[u8; 4] = b"ETR1";

/// One training row: the band vector at a labeled pixel plus its target.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRow {
    pub features: Vec<f64>,
    pub target: f64,
}

/// Flat binary-tree node. `left == u32::MAX` marks a leaf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

const LEAF: u32 = u32::MAX;

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.left == LEAF
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            i = if features[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble {
    pub feature_count: usize,
    pub trees: Vec<Tree>,
}

/// Per-band means over valid pixels of the labeled blocks; used to impute
/// NaN features at prediction and extraction time.
pub fn band_means(patches: &[LabeledPatch]) -> Result<Vec<f64>> {
    let c = patches
        .first()
        .map(|p| p.tile.bands.count())
        .ok_or_else(|| Error::InsufficientData("no patches for band means".into()))?;
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for p in patches {
        for (r, cc, _) in p.labeled_pixels() {
            for band in 0..c {
                if p.tile.is_valid(band, r, cc) {
                    sum[band] += p.tile.get(band, r, cc) as f64;
                    count[band] += 1;
                }
            }
        }
    }
    Ok((0..c).map(|b| if count[b] > 0 { sum[b] / count[b] as f64 } else { 0.0 }).collect())
}

/// One row per labeled pixel; NaN features imputed with the training band
/// mean. Returns no rows when every labeled pixel is invalid in every band.
pub fn extract_pixel_features(patch: &LabeledPatch, means: &[f64]) -> Vec<PixelRow> {
    let c = patch.tile.bands.count();
    let mut rows = Vec::new();
    let mut any_valid = false;
    for (r, cc, label) in patch.labeled_pixels() {
        let mut features = Vec::with_capacity(c);
        let mut pixel_valid = false;
        for band in 0..c {
            if patch.tile.is_valid(band, r, cc) {
                features.push(patch.tile.get(band, r, cc) as f64);
                pixel_valid = true;
            } else {
                features.push(means[band]);
            }
        }
        any_valid |= pixel_valid;
        rows.push(PixelRow { features, target: label as f64 });
    }
    if !any_valid {
        return Vec::new();
    }
    rows
}

/// Extract rows for a whole dataset; fully invalid patches are skipped and
/// their indices reported.
pub fn extract_dataset(patches: &[LabeledPatch]) -> Result<(Vec<PixelRow>, Vec<usize>)> {
    let means = band_means(patches)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        let r = extract_pixel_features(p, &means);
        if r.is_empty() {
            skipped.push(i);
        } else {
            rows.extend(r);
        }
    }
    Ok((rows, skipped))
}

fn mean_target(rows: &[PixelRow], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| rows[i].target).sum::<f64>() / idx.len() as f64
}

fn sq_sum(rows: &[PixelRow], idx: &[usize]) -> f64 {
    // n * variance, computed stably around the mean
    let m = mean_target(rows, idx);
    idx.iter().map(|&i| (rows[i].target - m).powi(2)).sum()
}

fn build_node(
    rows: &[PixelRow],
    idx: Vec<usize>,
    k: usize,
    rng: &mut impl Rng,
    nodes: &mut Vec<TreeNode>,
) -> u32 {
    let here = nodes.len() as u32;
    nodes.push(TreeNode { feature: 0, threshold: 0.0, left: LEAF, right: LEAF, value: 0.0 });
    nodes[here as usize].value = mean_target(rows, &idx);
    if idx.len() < 2 * MIN_LEAF {
        return here;
    }
    let first = rows[idx[0]].target;
    if idx.iter().all(|&i| rows[i].target == first) {
        return here;
    }
    let c = rows[0].features.len();
    let mut candidates: Vec<usize> = (0..c).collect();
    candidates.shuffle(rng);
    candidates.truncate(k);
    let mut best: Option<(f64, usize, f64)> = None;
    for &f in &candidates {
        let lo = idx.iter().map(|&i| rows[i].features[f]).fold(f64::INFINITY, f64::min);
        let hi = idx.iter().map(|&i| rows[i].features[f]).fold(f64::NEG_INFINITY, f64::max);
        if lo >= hi {
            continue;
        }
        let thr = rng.gen_range(lo..hi);
        let left: Vec<usize> = idx.iter().copied().filter(|&i| rows[i].features[f] <= thr).collect();
        if left.len() < MIN_LEAF || idx.len() - left.len() < MIN_LEAF {
            continue;
        }
        let right: Vec<usize> = idx.iter().copied().filter(|&i| rows[i].features[f] > thr).collect();
        let score = sq_sum(rows, &left) + sq_sum(rows, &right);
        if best.is_none_or(|(s, _, _)| score < s) {
            best = Some((score, f, thr));
        }
    }
    let Some((_, f, thr)) = best else { return here };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idx.into_iter().partition(|&i| rows[i].features[f] <= thr);
    let left = build_node(rows, left_idx, k, rng, nodes);
    let right = build_node(rows, right_idx, k, rng, nodes);
    let n = &mut nodes[here as usize];
    n.feature = f as u32;
    n.threshold = thr;
    n.left = left;
    n.right = right;
    here
}

fn fit_one_tree(rows: &[PixelRow], seed: u64) -> Tree {
    let c = rows[0].features.len();
    let k = (c as f64).sqrt().ceil() as usize;
    let mut rng = seeded_rng(seed);
    let mut nodes = Vec::new();
    build_node(rows, (0..rows.len()).collect(), k, &mut rng, &mut nodes);
    Tree { nodes }
}

/// Fit an extremely randomized ensemble: each tree sees all rows but its own
/// random feature/threshold draws, derived from a per-tree seed.
pub fn fit_trees(rows: &[PixelRow], n_trees: usize, seed: u64) -> Result<TreeEnsemble> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!("{} rows, need at least 2", rows.len())));
    }
    let c = rows[0].features.len();
    if rows.iter().any(|r| r.features.len() != c) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let trees = map_indexed(n_trees, |t| fit_one_tree(rows, sub_seed(seed, SALT_TREES, t as u64)));
    Ok(TreeEnsemble { feature_count: c, trees })
}

pub fn predict_trees(ens: &TreeEnsemble, features: &[f64]) -> Result<f64> {
    if features.len() != ens.feature_count {
        return Err(Error::Shape(format!(
            "{} features, ensemble expects {}",
            features.len(),
            ens.feature_count
        )));
    }
    Ok(ens.trees.iter().map(|t| t.predict(features)).sum::<f64>() / ens.trees.len() as f64)
}

/// (prediction, target) pairs at the labeled pixels of a held-out patch.
pub fn predict_at_labels(
    ens: &TreeEnsemble,
    means: &[f64],
    p: &LabeledPatch,
) -> Result<Vec<(f64, f64)>> {
    let rows = extract_pixel_features(p, means);
    rows.iter()
        .map(|r| Ok((predict_trees(ens, &r.features)?, r.target)))
        .collect()
}

pub fn encode_ensemble(ens: &TreeEnsemble) -> Result<Vec<u8>> {
    for t in &ens.trees {
        for n in &t.nodes {
            if n.is_leaf() && !n.value.is_finite() {
                return Err(Error::Validation("non-finite leaf value".into()));
            }
        }
    }
    let mut w = Writer::new();
    w.bytes(ETR1_MAGIC);
    w.u16(1); // version
    w.u32(ens.feature_count as u32);
    w.u32(ens.trees.len() as u32);
    for t in &ens.trees {
        w.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            w.u32(n.feature);
            w.f64(n.threshold);
            w.u32(n.left);
            w.u32(n.right);
            w.f64(n.value);
        }
    }
    Ok(w.into_bytes())
}

pub fn decode_ensemble(buf: &[u8]) -> Result<TreeEnsemble> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != ETR1_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected ETR1")));
    }
    let version = r.u16()?;
    if version != 1 {
        return Err(Error::format(4, format!("unsupported ETR1 version {version}")));
    }
    let feature_count = r.u32()? as usize;
    let n_trees = r.u32()? as usize;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let off = r.offset();
            let node = TreeNode {
                feature: r.u32()?,
                threshold: r.f64()?,
                left: r.u32()?,
                right: r.u32()?,
                value: r.f64()?,
            };
            if !node.is_leaf() {
                let ok = (node.feature as usize) < feature_count
                    && (node.left as usize) < n_nodes
                    && (node.right as usize) < n_nodes;
                if !ok {
                    return Err(Error::format(off, "node references out of range"));
                }
            } else if !node.value.is_finite() {
                return Err(Error::format(off, "non-finite leaf value"));
            }
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(Error::format(r.offset(), "empty tree"));
        }
        trees.push(Tree { nodes });
    }
    r.done()?;
    Ok(TreeEnsemble { feature_count, trees })
}

pub fn write_ensemble(ens: &TreeEnsemble, path: &std::path::Path) -> Result<usize> {
    let bytes = encode_ensemble(ens)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_ensemble(path: &std::path::Path) -> Result<TreeEnsemble> {
    let buf =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ensemble(&buf)
}
