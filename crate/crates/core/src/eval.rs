//! Cross-validation, metrics, tiled inference and the data-fraction ablation.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::finetune::PixelModel;
use crate::nn::seeded_rng;
use crate::seeds::{sub_seed, SALT_FOLDS, SALT_FRACTION};
use crate::tile::{LabeledPatch, Tile};

pub const DEFAULT_FOLDS: usize = 5;
pub const INFERENCE_STRIDE: usize = 21;
/// training-set fractions of the ablation grid
pub const FRACTION_GRID: [f64; 8] = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All indices outside fold `f`, in ascending order.
    pub fn complement(&self, f: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle then round-robin assignment into k folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(Error::InsufficientData(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(sub_seed(seed, SALT_FOLDS, 0));
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    Ok(FoldPlan { k, seed, folds })
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "rmse over {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let se: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((se / preds.len() as f64).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            k.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean local SSIM with an 11x11 Gaussian window. Pixels that are NaN in
/// either plane are excluded pairwise and the window weights renormalized;
/// windows with no valid pair are skipped.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, dynamic_range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape("ssim plane extents do not match shape".into()));
    }
    if dynamic_range <= 0.0 {
        return Err(Error::Domain(format!("dynamic range {dynamic_range} not positive")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "plane {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..=h - SSIM_WINDOW {
        for wx in 0..=w - SSIM_WINDOW {
            let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let i = (wy + ky) * w + wx + kx;
                    let (va, vb) = (a[i] as f64, b[i] as f64);
                    if va.is_nan() || vb.is_nan() {
                        continue;
                    }
                    let g = kernel[ky * SSIM_WINDOW + kx];
                    wsum += g;
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            if wsum <= 0.0 {
                continue;
            }
            let (ma, mb) = (ma / wsum, mb / wsum);
            let va = saa / wsum - ma * ma;
            let vb = sbb / wsum - mb * mb;
            let cov = sab / wsum - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / windows as f64)
}

/// Window start offsets along one axis: stride steps plus an edge-aligned
/// final window, deduplicated.
pub fn window_offsets(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..=extent - window).step_by(stride.max(1)).collect();
    let last = extent - window;
    if offs.last() != Some(&last) {
        offs.push(last);
    }
    offs
}

/// Slide `window`-sized crops over a scene at the given stride (plus
/// edge-aligned final windows) and average overlapping predictions with
/// equal weights. `predict_window` returns a window-sized plane; NaN
/// predictions are skipped in the average, and uncovered pixels stay NaN.
pub fn tiled_inference_with(
    scene: &Tile,
    window: usize,
    stride: usize,
    mut predict_window: impl FnMut(&Tile) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    let (h, w) = (scene.height, scene.width);
    if h < window || w < window {
        return Err(Error::Shape(format!("scene {h}x{w} smaller than a {window}x{window} window")));
    }
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for &oy in &window_offsets(h, window, stride) {
        for &ox in &window_offsets(w, window, stride) {
            let crop = crate::mae::crop(scene, oy, ox, window);
            let pred = predict_window(&crop)?;
            if pred.len() != window * window {
                return Err(Error::Shape("window prediction has wrong extent".into()));
            }
            for y in 0..window {
                for x in 0..window {
                    let v = pred[y * window + x];
                    if v.is_finite() {
                        let i = (oy + y) * w + ox + x;
                        sum[i] += v as f64;
                        count[i] += 1;
                    }
                }
            }
        }
    }
    Ok((0..h * w)
        .map(|i| if count[i] > 0 { (sum[i] / count[i] as f64) as f32 } else { f32::NAN })
        .collect())
}

/// Large-area inference with a trained pixel model at the default stride.
pub fn tiled_inference(model: &PixelModel, scene: &Tile) -> Result<Vec<f32>> {
    let window = model.profile.input_size;
    tiled_inference_with(scene, window, INFERENCE_STRIDE, |crop| {
        crate::finetune::predict(model, crop)
    })
}

/// (prediction, target) pairs at the labeled pixels of one patch.
pub type LabelPredictions = Vec<(f64, f64)>;

/// A fitted per-fold model: maps a held-out patch to predictions at its
/// labeled pixels.
pub type FittedModel = Box<dyn Fn(&LabeledPatch) -> Result<LabelPredictions>>;

#[derive(Clone, Debug)]
pub struct MetricReport {
    /// per-fold RMSE; None where training failed
    pub per_fold: Vec<Option<f64>>,
    pub failures: Vec<(usize, String)>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    fn from_folds(per_fold: Vec<Option<f64>>, failures: Vec<(usize, String)>) -> Self {
        let ok: Vec<f64> = per_fold.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&ok);
        MetricReport { per_fold, failures, mean, std }
    }

    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Mean and population standard deviation; (NaN, NaN) for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// K-fold cross-validation: fit on each fold's complement, evaluate RMSE at
/// the labeled pixels of the held-out fold. A failing fold is flagged and
/// the report completed from the remaining folds.
pub fn run_cv(
    dataset: &[LabeledPatch],
    folds: &FoldPlan,
    mut fit: impl FnMut(&[LabeledPatch], usize) -> Result<FittedModel>,
) -> Result<MetricReport> {
    if folds.len() != dataset.len() {
        return Err(Error::Validation(format!(
            "fold plan covers {} samples, dataset has {}",
            folds.len(),
            dataset.len()
        )));
    }
    let mut per_fold = Vec::with_capacity(folds.k);
    let mut failures = Vec::new();
    for f in 0..folds.k {
        let train: Vec<LabeledPatch> =
            folds.complement(f).into_iter().map(|i| dataset[i].clone()).collect();
        let outcome = fit(&train, f).and_then(|model| {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for &i in &folds.folds[f] {
                for (p, t) in model(&dataset[i])? {
                    preds.push(p);
                    targets.push(t);
                }
            }
            rmse(&preds, &targets)
        });
        match outcome {
            Ok(v) => per_fold.push(Some(v)),
            Err(e) => {
                per_fold.push(None);
                failures.push((f, e.to_string()));
            }
        }
    }
    Ok(MetricReport::from_folds(per_fold, failures))
}

#[derive(Clone, Debug)]
pub struct AblationPoint {
    pub fraction: f64,
    pub mean_rmse: f64,
    /// true when every fold was skipped for having under 2 training samples
    pub skipped: bool,
}

/// Data-fraction ablation: the same folds are reused at every fraction, and
/// per-fold training subsets are nested (a smaller fraction is a prefix of a
/// larger one under the same seeded shuffle).
pub fn fraction_ablation(
    dataset: &[LabeledPatch],
    folds: &FoldPlan,
    fractions: &[f64],
    seed: u64,
    mut fit: impl FnMut(&[LabeledPatch], usize) -> Result<FittedModel>,
) -> Result<Vec<AblationPoint>> {
    for &f in fractions {
        if !FRACTION_GRID.iter().any(|&g| (g - f).abs() < 1e-9) {
            return Err(Error::Config(format!("fraction {f} outside the ablation grid")));
        }
    }
    // per-fold shuffled training order, fixed across fractions
    let orders: Vec<Vec<usize>> = (0..folds.k)
        .map(|f| {
            let mut order = folds.complement(f);
            let mut rng = seeded_rng(sub_seed(seed, SALT_FRACTION, f as u64));
            order.shuffle(&mut rng);
            order
        })
        .collect();
    let mut curve = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut per_fold = Vec::with_capacity(folds.k);
        let mut failures = Vec::new();
        for f in 0..folds.k {
            let n_take = (fraction * orders[f].len() as f64).floor() as usize;
            if n_take < 2 {
                failures.push((f, format!("{n_take} training samples at fraction {fraction}")));
                per_fold.push(None);
                continue;
            }
            let mut subset_idx = orders[f][..n_take].to_vec();
            subset_idx.sort_unstable();
            let train: Vec<LabeledPatch> =
                subset_idx.into_iter().map(|i| dataset[i].clone()).collect();
            let outcome = fit(&train, f).and_then(|model| {
                let mut preds = Vec::new();
                let mut targets = Vec::new();
                for &i in &folds.folds[f] {
                    for (p, t) in model(&dataset[i])? {
                        preds.push(p);
                        targets.push(t);
                    }
                }
                rmse(&preds, &targets)
            });
            match outcome {
                Ok(v) => per_fold.push(Some(v)),
                Err(e) => {
                    per_fold.push(None);
                    failures.push((f, e.to_string()));
                }
            }
        }
        let report = MetricReport::from_folds(per_fold, failures);
        curve.push(AblationPoint {
            fraction,
            mean_rmse: report.mean,
            skipped: report.per_fold.iter().all(Option::is_none),
        });
    }
    Ok(curve)
}

/// Fixed-bin histogram over the finite values of a plane, as CSV.
pub fn histogram_csv(values: &[f32], bins: usize) -> Result<String> {
    let finite: Vec<f64> = values.iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
    if finite.is_empty() {
        return Err(Error::EmptyLoss);
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &v in &finite {
        let b = (((v - lo) / span) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (b, &c) in counts.iter().enumerate() {
        let blo = lo + span * b as f64 / bins as f64;
        let bhi = lo + span * (b + 1) as f64 / bins as f64;
        s.push_str(&format!("{blo:.9},{bhi:.9},{c}\n"));
    }
    Ok(s)
}

/// Plain-text summary table: one row per (model, task) with mean +- std RMSE.
pub fn format_report(rows: &[(String, String, MetricReport)]) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<16} {:<6} {:>18} {}\n", "model", "task", "rmse (mean+-std)", "folds"));
    for (model, task, report) in rows {
        let folds: Vec<String> = report
            .per_fold
            .iter()
            .map(|f| match f {
                Some(v) => format!("{v:.4}"),
                None => "failed".to_string(),
            })
            .collect();
        s.push_str(&format!(
            "{:<16} {:<6} {:>8.4} +- {:.4}  [{}]\n",
            model,
            task,
            report.mean,
            report.std,
            folds.join(", ")
        ));
    }
    s
}
