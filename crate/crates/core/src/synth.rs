//! Synthetic multispectral ocean fields with a known band-to-target mapping,
//! so training claims can be verified without satellite archives.

use rand::Rng;

use crate::error::Result;
use crate::nn::seeded_rng;
use crate::sampling::make_labeled_patch;
use crate::seeds::{sub_seed, SALT_SYNTH};
use crate::tile::{BandSet, LabeledPatch, TargetKind, Tile, TileMeta, LABEL_BLOCK_START, PATCH_SIZE};

pub const REFLECTANCE_LO: f32 = 0.01;
pub const REFLECTANCE_HI: f32 = 0.19;
pub const SST_LO: f32 = 272.0;
pub const SST_HI: f32 = 304.0;

const SYNTH_REGIONS: [&str; 4] = ["SYNA", "SYNB", "SYNC", "SYND"];
const HARMONICS: usize = 8;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    /// number of reflectance bands (SST, when enabled, comes on top)
    pub bands: usize,
    pub sst: bool,
    pub size: usize,
    /// spatial correlation length in pixels, >= 1
    pub correlation_len: f64,
    /// fraction of pixels invalidated by a contiguous cloud mask, in [0, 1)
    pub cloud_fraction: f64,
    /// per-band weights of the band-to-target mapping
    pub mapping_w: Vec<f64>,
    pub mapping_b: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, bands: usize, size: usize) -> Self {
        SynthConfig {
            seed,
            bands,
            sst: false,
            size,
            correlation_len: 8.0,
            cloud_fraction: 0.0,
            mapping_w: vec![0.0; bands],
            mapping_b: 0.0,
        }
    }

    pub fn band_set(&self) -> BandSet {
        if self.sst {
            let mut names: Vec<String> = (0..self.bands).map(|i| format!("B{i}")).collect();
            names.push("SST".to_string());
            BandSet::new(names).unwrap()
        } else {
            BandSet::synthetic(self.bands)
        }
    }

    pub fn total_bands(&self) -> usize {
        self.bands + usize::from(self.sst)
    }
}

/// Smooth random field from a sum of random-phase sinusoids, min-max scaled
/// into [lo, hi].
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize, corr_len: f64, lo: f32, hi: f32) -> Vec<f32> {
    let mut amp = [0.0f64; HARMONICS];
    let mut kx = [0.0f64; HARMONICS];
    let mut ky = [0.0f64; HARMONICS];
    let mut phase = [0.0f64; HARMONICS];
    for i in 0..HARMONICS {
        amp[i] = rng.gen_range(0.5..1.0);
        let wavelength = rng.gen_range(corr_len.max(1.0) * 2.0..corr_len.max(1.0) * 8.0);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        kx[i] = std::f64::consts::TAU * theta.cos() / wavelength;
        ky[i] = std::f64::consts::TAU * theta.sin() / wavelength;
        phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    let mut field = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for i in 0..HARMONICS {
                v += amp[i] * (kx[i] * x as f64 + ky[i] * y as f64 + phase[i]).sin();
            }
            field[y * w + x] = v;
        }
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    field
        .iter()
        .map(|&v| lo + ((v - min) / span) as f32 * (hi - lo))
        .collect()
}

/// Indices of the `count` lowest values of a field: a contiguous-ish cloud
/// mask when the field is smooth, with an exact pixel count.
fn cloud_mask(rng: &mut impl Rng, h: usize, w: usize, corr_len: f64, fraction: f64) -> Vec<bool> {
    let n = h * w;
    let count = (fraction * n as f64).floor() as usize;
    let mut mask = vec![false; n];
    if count == 0 {
        return mask;
    }
    let field = smooth_field(rng, h, w, corr_len, 0.0, 1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].partial_cmp(&field[b]).unwrap().then(a.cmp(&b)));
    for &i in &order[..count] {
        mask[i] = true;
    }
    mask
}

/// Generate one synthetic tile. Pure function of (cfg, index).
pub fn gen_tile(cfg: &SynthConfig, index: u64) -> Tile {
    gen_tile_protected(cfg, index, None)
}

fn gen_tile_protected(cfg: &SynthConfig, index: u64, keep_valid: Option<(usize, usize)>) -> Tile {
    let mut rng = seeded_rng(sub_seed(cfg.seed, SALT_SYNTH, index));
    let (h, w) = (cfg.size, cfg.size);
    let c = cfg.total_bands();
    let mut planes = Vec::with_capacity(c * h * w);
    for band in 0..c {
        let is_sst = cfg.sst && band == c - 1;
        let (lo, hi) = if is_sst { (SST_LO, SST_HI) } else { (REFLECTANCE_LO, REFLECTANCE_HI) };
        planes.extend(smooth_field(&mut rng, h, w, cfg.correlation_len, lo, hi));
    }
    let mut cloud = cloud_mask(&mut rng, h, w, cfg.correlation_len, cfg.cloud_fraction);
    if let Some((r0, c0)) = keep_valid {
        for r in r0..r0 + 3 {
            for cc in c0..c0 + 3 {
                cloud[r * w + cc] = false;
            }
        }
    }
    let mut validity = Vec::with_capacity(c * h * w);
    for band in 0..c {
        for i in 0..h * w {
            if cloud[i] {
                planes[band * h * w + i] = f32::NAN;
                validity.push(false);
            } else {
                validity.push(true);
            }
        }
    }
    let meta = TileMeta {
        region: SYNTH_REGIONS[(index % SYNTH_REGIONS.len() as u64) as usize].to_string(),
        year: 2017 + (index / 48 % 5) as i16,
        month: (index % 12) as u8 + 1,
        lat: -60.0 + (index % 120) as f64,
        lon: -180.0 + (index % 360) as f64,
    };
    Tile::new(cfg.band_set(), h, w, planes, validity, meta).expect("synthetic tile is valid")
}

/// Mean band vector over the center 3x3 block, then the mapping
/// target = exp(w . xbar + b). NaN values are skipped in the mean.
pub fn mapping_target(cfg: &SynthConfig, tile: &Tile) -> f64 {
    let hw = tile.height * tile.width;
    let mut z = cfg.mapping_b;
    for band in 0..cfg.total_bands() {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for r in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
            for c in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
                let v = tile.planes[band * hw + r * tile.width + c];
                if !v.is_nan() {
                    sum += v as f64;
                    count += 1;
                }
            }
        }
        let xbar = if count > 0 { sum / count as f64 } else { 0.0 };
        z += cfg.mapping_w.get(band).copied().unwrap_or(0.0) * xbar;
    }
    z.exp()
}

/// Generate `n` labeled 80x80 patches whose label follows the known mapping.
/// The center 3x3 block is kept cloud-free so the label is always defined.
pub fn gen_labeled_dataset(cfg: &SynthConfig, n: usize, kind: TargetKind) -> Result<Vec<LabeledPatch>> {
    let mut patch_cfg = cfg.clone();
    patch_cfg.size = PATCH_SIZE;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tile = gen_tile_protected(&patch_cfg, i as u64, Some((LABEL_BLOCK_START, LABEL_BLOCK_START)));
        let value = mapping_target(&patch_cfg, &tile);
        out.push(make_labeled_patch(&tile, value, kind, &format!("synth-{i}"))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::valid_fraction;
    use crate::tile::validate_labeled_patch;

    #[test]
    fn zero_cloud_fraction_all_valid() {
        let cfg = SynthConfig::new(1, 2, 45);
        let t = gen_tile(&cfg, 0);
        assert_eq!(valid_fraction(&t), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::new(9, 3, 45);
        assert_eq!(gen_tile(&cfg, 5), gen_tile(&cfg, 5));
        assert_ne!(gen_tile(&cfg, 5).planes, gen_tile(&cfg, 6).planes);
    }

    #[test]
    fn cloud_fraction_is_respected() {
        for seed in 0..20 {
            let mut cfg = SynthConfig::new(seed, 1, 45);
            cfg.cloud_fraction = 0.5;
            let t = gen_tile(&cfg, 0);
            let vf = valid_fraction(&t);
            assert!((0.4..=0.6).contains(&vf), "seed {seed}: valid fraction {vf}");
        }
    }

    #[test]
    fn reflectance_range_and_sst_range() {
        let mut cfg = SynthConfig::new(3, 2, 45);
        cfg.sst = true;
        let t = gen_tile(&cfg, 1);
        let hw = 45 * 45;
        for &v in &t.planes[..2 * hw] {
            assert!((0.0..=0.2).contains(&v));
        }
        for &v in &t.planes[2 * hw..] {
            assert!((271.0..=305.0).contains(&v));
        }
    }

    #[test]
    fn labels_match_independent_mapping() {
        let mut cfg = SynthConfig::new(11, 3, PATCH_SIZE);
        cfg.mapping_w = vec![4.0, -2.0, 1.0];
        cfg.mapping_b = 0.1;
        let ds = gen_labeled_dataset(&cfg, 5, TargetKind::Chlorophyll).unwrap();
        for p in &ds {
            assert!(validate_labeled_patch(p).is_empty());
            let expect = mapping_target(&cfg, &p.tile).log10();
            assert!((p.label_value() as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mapping_gives_zero_labels() {
        let cfg = SynthConfig::new(2, 2, PATCH_SIZE);
        let ds = gen_labeled_dataset(&cfg, 3, TargetKind::PrimaryProduction).unwrap();
        for p in &ds {
            assert_eq!(p.label_value(), 0.0);
        }
    }

    #[test]
    fn realistic_dataset_sizes() {
        let cfg = SynthConfig::new(4, 2, PATCH_SIZE);
        assert_eq!(gen_labeled_dataset(&cfg, 188, TargetKind::Chlorophyll).unwrap().len(), 188);
        assert_eq!(gen_labeled_dataset(&cfg, 103, TargetKind::PrimaryProduction).unwrap().len(), 103);
    }
}
