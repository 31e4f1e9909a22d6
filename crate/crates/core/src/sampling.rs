//! Dataset construction: tile splitting, validity filtering, balanced
//! sampling, median compositing, label construction and depth integration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tile::{LabeledPatch, TargetKind, Tile, LABEL_BLOCK_START, PATCH_SIZE};

pub const PRETRAIN_TILE: usize = 45;
pub const VALID_FRACTION_THRESHOLD: f64 = 0.8;
pub const DEFAULT_EXCLUDED_REGIONS: [&str; 3] = ["APLR", "ANTA", "LAKE"];

/// Cut a scene into non-overlapping 45x45 tiles from the top-left corner.
/// Trailing remainder rows/columns are discarded; metadata is copied.
pub fn split_scene(scene: &Tile) -> Vec<Tile> {
    let (h, w) = (scene.height, scene.width);
    let s = PRETRAIN_TILE;
    let (ny, nx) = (h / s, w / s);
    let c = scene.bands.count();
    let mut out = Vec::with_capacity(ny * nx);
    for ty in 0..ny {
        for tx in 0..nx {
            let mut planes = Vec::with_capacity(c * s * s);
            let mut validity = Vec::with_capacity(c * s * s);
            for band in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        planes.push(scene.get(band, ty * s + y, tx * s + x));
                        validity.push(scene.is_valid(band, ty * s + y, tx * s + x));
                    }
                }
            }
            out.push(
                Tile::new(scene.bands.clone(), s, s, planes, validity, scene.meta.clone())
                    .expect("subtile inherits validity from parent"),
            );
        }
    }
    out
}

/// Fraction of pixels valid in at least one band.
pub fn valid_fraction(tile: &Tile) -> f64 {
    let hw = tile.height * tile.width;
    let c = tile.bands.count();
    let mut count = 0usize;
    for i in 0..hw {
        if (0..c).any(|b| tile.validity[b * hw + i]) {
            count += 1;
        }
    }
    count as f64 / hw as f64
}

pub fn passes_pretrain_filter(tile: &Tile) -> bool {
    valid_fraction(tile) >= VALID_FRACTION_THRESHOLD
}

/// Sampling metadata of one candidate tile.
#[derive(Clone, Debug)]
pub struct SampleMeta {
    pub region: String,
    pub month: u8,
}

/// Per-region target counts with excluded region codes.
#[derive(Clone, Debug)]
pub struct SampleBudget {
    pub per_region: usize,
    pub excluded: Vec<String>,
}

impl SampleBudget {
    pub fn new(per_region: usize) -> Self {
        SampleBudget {
            per_region,
            excluded: DEFAULT_EXCLUDED_REGIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A (region, month) cell that could not be filled.
#[derive(Clone, Debug, PartialEq)]
pub struct Shortfall {
    pub region: String,
    pub month: u8,
    pub wanted: usize,
    pub got: usize,
}

/// Draw a geographically and monthly balanced sample.
///
/// For each non-excluded region present in the candidates, the per-region
/// budget is split as evenly as possible over the months present (remainder
/// months chosen by seeded draw), sampling without replacement. Returns the
/// selected candidate indices plus a shortfall report for infeasible cells.
pub fn balanced_sample(
    candidates: &[SampleMeta],
    budget: &SampleBudget,
    seed: u64,
) -> (Vec<usize>, Vec<Shortfall>) {
    // region -> month -> candidate indices, deterministic iteration order
    let mut by_cell: BTreeMap<String, BTreeMap<u8, Vec<usize>>> = BTreeMap::new();
    for (i, m) in candidates.iter().enumerate() {
        if budget.excluded.contains(&m.region) {
            continue;
        }
        by_cell.entry(m.region.clone()).or_default().entry(m.month).or_default().push(i);
    }
    let mut rng = seeded_rng(seed);
    let mut selected = Vec::new();
    let mut shortfalls = Vec::new();
    for (region, months) in &by_cell {
        let month_keys: Vec<u8> = months.keys().copied().collect();
        let base = budget.per_region / month_keys.len();
        let remainder = budget.per_region % month_keys.len();
        // remainder months by seeded draw
        let mut extra = month_keys.clone();
        extra.shuffle(&mut rng);
        extra.truncate(remainder);
        for &month in &month_keys {
            let want = base + usize::from(extra.contains(&month));
            let pool = &months[&month];
            let mut picks: Vec<usize> = pool.clone();
            picks.shuffle(&mut rng);
            picks.truncate(want);
            if picks.len() < want {
                shortfalls.push(Shortfall {
                    region: region.clone(),
                    month,
                    wanted: want,
                    got: picks.len(),
                });
            }
            picks.sort_unstable();
            selected.extend(picks);
        }
    }
    (selected, shortfalls)
}

/// A stack of co-registered tiles with acquisition timestamps in days.
#[derive(Clone, Debug)]
pub struct SceneStack {
    pub tiles: Vec<Tile>,
    pub days: Vec<f64>,
}

impl SceneStack {
    pub fn new(tiles: Vec<Tile>, days: Vec<f64>) -> Result<Self> {
        if tiles.len() != days.len() {
            return Err(Error::Validation("stack tiles/timestamps length mismatch".into()));
        }
        if days.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Validation("stack timestamps not sorted".into()));
        }
        if let Some(first) = tiles.first() {
            for t in &tiles[1..] {
                if t.height != first.height || t.width != first.width || t.bands != first.bands {
                    return Err(Error::Validation("stack tiles differ in shape or bands".into()));
                }
            }
        }
        Ok(SceneStack { tiles, days })
    }
}

/// Per-pixel, per-band median of valid values among tiles inside the closed
/// window |t - center| <= window/2. A pixel is invalid iff no tile
/// contributes; even counts use the mean of the two middle values.
pub fn median_composite(stack: &SceneStack, center_day: f64, window_days: f64) -> Result<Tile> {
    let in_window: Vec<&Tile> = stack
        .tiles
        .iter()
        .zip(&stack.days)
        .filter(|(_, &d)| (d - center_day).abs() <= window_days / 2.0)
        .map(|(t, _)| t)
        .collect();
    if in_window.is_empty() {
        return Err(Error::EmptyWindow { center_day, window_days });
    }
    let first = in_window[0];
    let n = first.planes.len();
    let mut planes = Vec::with_capacity(n);
    let mut validity = Vec::with_capacity(n);
    let mut values: Vec<f32> = Vec::with_capacity(in_window.len());
    for i in 0..n {
        values.clear();
        for t in &in_window {
            if t.validity[i] {
                values.push(t.planes[i]);
            }
        }
        if values.is_empty() {
            planes.push(f32::NAN);
            validity.push(false);
        } else {
            planes.push(median_of(&mut values));
            validity.push(true);
        }
    }
    Tile::new(
        first.bands.clone(),
        first.height,
        first.width,
        planes,
        validity,
        first.meta.clone(),
    )
}

fn median_of(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Build an 80x80 labeled patch: the label plane is NaN except the center
/// 3x3 block (rows/cols 38..=40), set to log10(value).
pub fn make_labeled_patch(
    composite: &Tile,
    value: f64,
    kind: TargetKind,
    source_id: &str,
) -> Result<LabeledPatch> {
    if composite.height != PATCH_SIZE || composite.width != PATCH_SIZE {
        return Err(Error::Validation(format!(
            "composite is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
            composite.height, composite.width
        )));
    }
    if !(value > 0.0) {
        return Err(Error::Domain(format!("target value {value} must be positive for log10")));
    }
    let label = value.log10() as f32;
    let mut label_plane = vec![f32::NAN; PATCH_SIZE * PATCH_SIZE];
    for r in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
        for c in LABEL_BLOCK_START..LABEL_BLOCK_START + 3 {
            label_plane[r * PATCH_SIZE + c] = label;
        }
    }
    Ok(LabeledPatch {
        tile: composite.clone(),
        label_plane,
        kind,
        source_id: source_id.to_string(),
    })
}

/// A production-vs-depth profile, sorted by strictly increasing depth.
#[derive(Clone, Debug)]
pub struct DepthProfile {
    entries: Vec<(f64, f64)>,
}

impl DepthProfile {
    pub fn new(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "depth profile has {} entries, need at least 2",
                entries.len()
            )));
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Validation("depths not strictly increasing".into()));
            }
        }
        if entries.iter().any(|&(d, p)| d < 0.0 || p < 0.0) {
            return Err(Error::Validation("negative depth or production".into()));
        }
        Ok(DepthProfile { entries })
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }
}

/// Column-integrated production via the trapezoidal rule, mgC/m^2/day.
pub fn integrate_depth(profile: &DepthProfile) -> f64 {
    profile
        .entries
        .windows(2)
        .map(|pair| (pair[1].0 - pair[0].0) * (pair[0].1 + pair[1].1) / 2.0)
        .sum()
}

/// Build synthetic candidate metadata for tests and stress checks.
pub fn synthetic_metas(regions: &[&str], months: &[u8], per_cell: usize) -> Vec<SampleMeta> {
    let mut out = Vec::new();
    for &r in regions {
        for &m in months {
            for _ in 0..per_cell {
                out.push(SampleMeta { region: r.to_string(), month: m });
            }
        }
    }
    out
}

/// One line of the sampling manifest: path, region, month, valid fraction.
pub fn manifest_line(path: &str, region: &str, month: u8, vf: f64) -> String {
    format!("{path}\t{region}\t{month}\t{vf:.6}")
}

pub fn gen_range_f64(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tile::{BandSet, TileMeta};

    fn scene(h: usize, w: usize) -> Tile {
        let n = h * w;
        Tile::new(
            BandSet::synthetic(1),
            h,
            w,
            (0..n).map(|i| i as f32).collect(),
            vec![true; n],
            TileMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn split_90x90_gives_four_tiles() {
        assert_eq!(split_scene(&scene(90, 90)).len(), 4);
    }

    #[test]
    fn split_100x100_drops_remainders() {
        let tiles = split_scene(&scene(100, 100));
        assert_eq!(tiles.len(), 4);
        for t in &tiles {
            assert_eq!((t.height, t.width), (45, 45));
        }
    }

    #[test]
    fn split_45x45_is_identity() {
        let s = scene(45, 45);
        let tiles = split_scene(&s);
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0], s);
    }

    #[test]
    fn split_small_scene_is_empty() {
        assert!(split_scene(&scene(44, 90)).is_empty());
    }

    #[test]
    fn split_tiles_are_disjoint_and_cover() {
        let s = scene(100, 92);
        let tiles = split_scene(&s);
        let expect = (100 / 45) * (92 / 45);
        assert_eq!(tiles.len(), expect);
        let covered: usize = tiles.iter().map(|t| t.height * t.width).sum();
        assert_eq!(covered, expect * 45 * 45);
        // disjointness: values in the scene are unique, so union of pixel
        // values must have no duplicates
        let mut vals: Vec<i64> = tiles
            .iter()
            .flat_map(|t| t.planes.iter().map(|&v| v as i64))
            .collect();
        vals.sort_unstable();
        let before = vals.len();
        vals.dedup();
        assert_eq!(vals.len(), before);
    }

    #[test]
    fn valid_fraction_extremes() {
        let t = scene(4, 4);
        assert_eq!(valid_fraction(&t), 1.0);
        let n = 16;
        let invalid = Tile::new(
            BandSet::synthetic(1),
            4,
            4,
            vec![f32::NAN; n],
            vec![false; n],
            TileMeta::default(),
        )
        .unwrap();
        assert_eq!(valid_fraction(&invalid), 0.0);
    }

    #[test]
    fn valid_fraction_exact_boundary() {
        // 45x45 with 405 fully invalid pixels -> exactly 0.8, passes
        let n = 45 * 45;
        let mut planes: Vec<f32> = vec![0.1; n];
        let mut validity = vec![true; n];
        for i in 0..405 {
            planes[i] = f32::NAN;
            validity[i] = false;
        }
        let t = Tile::new(BandSet::synthetic(1), 45, 45, planes, validity, TileMeta::default())
            .unwrap();
        assert_eq!(valid_fraction(&t), 0.8);
        assert!(passes_pretrain_filter(&t));
    }

    #[test]
    fn balanced_sample_even_split() {
        let months: Vec<u8> = (1..=12).collect();
        let metas = synthetic_metas(&["AAAA", "BBBB", "CCCC"], &months, 3);
        let (sel, shortfalls) = balanced_sample(&metas, &SampleBudget::new(12), 7);
        assert!(shortfalls.is_empty());
        assert_eq!(sel.len(), 36);
        // one per (region, month)
        let mut cells = std::collections::HashMap::new();
        for &i in &sel {
            *cells.entry((metas[i].region.clone(), metas[i].month)).or_insert(0usize) += 1;
        }
        assert_eq!(cells.len(), 36);
        assert!(cells.values().all(|&c| c == 1));
    }

    #[test]
    fn balanced_sample_zero_budget() {
        let metas = synthetic_metas(&["AAAA"], &[1, 2], 3);
        let (sel, _) = balanced_sample(&metas, &SampleBudget::new(0), 1);
        assert!(sel.is_empty());
    }

    #[test]
    fn balanced_sample_deterministic_and_excludes_polar() {
        let months: Vec<u8> = (1..=12).collect();
        let mut metas = synthetic_metas(&["AAAA", "APLR", "ANTA", "LAKE"], &months, 5);
        metas.extend(synthetic_metas(&["BBBB"], &months, 5));
        let (s1, _) = balanced_sample(&metas, &SampleBudget::new(24), 42);
        let (s2, _) = balanced_sample(&metas, &SampleBudget::new(24), 42);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&i| metas[i].region == "AAAA" || metas[i].region == "BBBB"));
        assert_eq!(s1.len(), 48);
    }

    #[test]
    fn balanced_sample_reports_shortfall() {
        let metas = synthetic_metas(&["AAAA"], &[1, 2], 1);
        let (sel, shorts) = balanced_sample(&metas, &SampleBudget::new(6), 1);
        assert_eq!(sel.len(), 2);
        assert_eq!(shorts.len(), 2);
        assert!(shorts.iter().all(|s| s.wanted == 3 && s.got == 1));
    }

    fn stack_of(values: &[&[f32]], days: &[f64]) -> SceneStack {
        let tiles: Vec<Tile> = values
            .iter()
            .map(|vals| {
                let validity = vals.iter().map(|v| !v.is_nan()).collect();
                Tile::new(BandSet::synthetic(1), 1, vals.len(), vals.to_vec(), validity, TileMeta::default())
                    .unwrap()
            })
            .collect();
        SceneStack::new(tiles, days.to_vec()).unwrap()
    }

    #[test]
    fn median_single_tile_identity() {
        let s = stack_of(&[&[1.0, 2.0]], &[0.0]);
        let c = median_composite(&s, 0.0, 6.0).unwrap();
        assert_eq!(c, s.tiles[0]);
    }

    #[test]
    fn median_robust_to_outlier() {
        let s = stack_of(&[&[1.0], &[2.0], &[100.0]], &[0.0, 1.0, 2.0]);
        let c = median_composite(&s, 1.0, 6.0).unwrap();
        assert_eq!(c.planes[0], 2.0);
    }

    #[test]
    fn median_skips_nan() {
        let s = stack_of(&[&[1.0], &[f32::NAN], &[3.0]], &[0.0, 1.0, 2.0]);
        let c = median_composite(&s, 1.0, 6.0).unwrap();
        assert_eq!(c.planes[0], 2.0);
    }

    #[test]
    fn median_window_filtering_and_empty_window() {
        let s = stack_of(&[&[1.0], &[9.0]], &[0.0, 10.0]);
        let c = median_composite(&s, 0.0, 6.0).unwrap();
        assert_eq!(c.planes[0], 1.0);
        assert!(matches!(
            median_composite(&s, 100.0, 6.0),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn median_permutation_invariant() {
        let a = stack_of(&[&[1.0], &[5.0], &[3.0]], &[0.0, 1.0, 2.0]);
        let b = stack_of(&[&[3.0], &[1.0], &[5.0]], &[0.0, 1.0, 2.0]);
        assert_eq!(
            median_composite(&a, 1.0, 6.0).unwrap().planes,
            median_composite(&b, 1.0, 6.0).unwrap().planes
        );
    }

    fn composite_80() -> Tile {
        let n = PATCH_SIZE * PATCH_SIZE;
        Tile::new(
            BandSet::synthetic(1),
            PATCH_SIZE,
            PATCH_SIZE,
            vec![0.05; n],
            vec![true; n],
            TileMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn labeled_patch_center_block() {
        let p = make_labeled_patch(&composite_80(), 8.85, TargetKind::Chlorophyll, "s").unwrap();
        let labeled: Vec<_> = p.labeled_pixels().collect();
        assert_eq!(labeled.len(), 9);
        for &(r, c, v) in &labeled {
            assert!((38..=40).contains(&r) && (38..=40).contains(&c));
            assert!((v as f64 - 8.85f64.log10()).abs() < 1e-6);
        }
        assert!(crate::tile::validate_labeled_patch(&p).is_empty());
    }

    #[test]
    fn labeled_patch_log_of_one_is_zero() {
        let p = make_labeled_patch(&composite_80(), 1.0, TargetKind::Chlorophyll, "s").unwrap();
        assert_eq!(p.label_value(), 0.0);
    }

    #[test]
    fn labeled_patch_rejects_nonpositive() {
        assert!(matches!(
            make_labeled_patch(&composite_80(), -1.0, TargetKind::Chlorophyll, "s"),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn trapezoid_closed_forms() {
        let constant = DepthProfile::new(vec![(0.0, 10.0), (10.0, 10.0)]).unwrap();
        assert_eq!(integrate_depth(&constant), 100.0);
        let linear = DepthProfile::new(vec![(0.0, 0.0), (10.0, 10.0)]).unwrap();
        assert_eq!(integrate_depth(&linear), 50.0);
        let hand = DepthProfile::new(vec![(0.0, 4.0), (5.0, 2.0), (20.0, 0.0)]).unwrap();
        assert_eq!(integrate_depth(&hand), 30.0);
    }

    #[test]
    fn trapezoid_additive_over_concatenation() {
        let whole = DepthProfile::new(vec![(0.0, 4.0), (5.0, 2.0), (20.0, 0.0)]).unwrap();
        let a = DepthProfile::new(vec![(0.0, 4.0), (5.0, 2.0)]).unwrap();
        let b = DepthProfile::new(vec![(5.0, 2.0), (20.0, 0.0)]).unwrap();
        assert!((integrate_depth(&whole) - integrate_depth(&a) - integrate_depth(&b)).abs() < 1e-12);
    }

    #[test]
    fn short_profile_rejected() {
        assert!(DepthProfile::new(vec![(0.0, 1.0)]).is_err());
    }
}
