//! Masked-autoencoder pre-training of the ViT encoder on ocean tiles.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io::ModelCheckpoint;
use crate::nn::{
    dense, final_norm, init_block, init_normal, init_xavier, seeded_rng, transformer_block,
    BoundParams,
    ParamSet,
};
use crate::optim::{LrSchedule, OptimizerState, DEFAULT_WEIGHT_DECAY};
use crate::seeds::{sub_seed, SALT_AUGMENT, SALT_INIT, SALT_MASK, SALT_SHUFFLE, SALT_VALSPLIT};
use crate::tensor::Tensor;
use crate::tile::Tile;

pub const DEFAULT_MASK_RATIO: f64 = 0.75;

/// Architecture profile shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelProfile {
    pub name: String,
    pub input_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dec_embed_dim: usize,
    pub dec_depth: usize,
    /// fusion channel width of the fine-tune decoder head
    pub head_channels: usize,
}

impl ModelProfile {
    pub fn by_name(name: &str) -> Result<Self> {
        let p = match name {
            // for gradient checks: 8x8 inputs, 16 tokens
            "tiny" => ModelProfile {
                name: "tiny".into(),
                input_size: 8,
                patch: 2,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                dec_embed_dim: 16,
                dec_depth: 1,
                head_channels: 8,
            },
            "small" => ModelProfile {
                name: "small".into(),
                input_size: 42,
                patch: 2,
                embed_dim: 32,
                depth: 2,
                heads: 4,
                dec_embed_dim: 32,
                dec_depth: 1,
                head_channels: 16,
            },
            "desk" => ModelProfile {
                name: "desk".into(),
                input_size: 42,
                patch: 2,
                embed_dim: 128,
                depth: 6,
                heads: 8,
                dec_embed_dim: 64,
                dec_depth: 2,
                head_channels: 32,
            },
            "paper" => ModelProfile {
                name: "paper".into(),
                input_size: 42,
                patch: 2,
                embed_dim: 512,
                depth: 12,
                heads: 8,
                dec_embed_dim: 64,
                dec_depth: 2,
                head_channels: 64,
            },
            other => return Err(Error::Config(format!("unknown profile {other}"))),
        };
        debug_assert_eq!(p.input_size % p.patch, 0);
        debug_assert_eq!(p.embed_dim % p.heads, 0);
        Ok(p)
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self, in_chans: usize) -> usize {
        in_chans * self.patch * self.patch
    }
}

/// Split a [C,H,W] image into patch vectors: row-major patch order, and
/// within a patch channel-major then row-major pixel order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patchify expects [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let t = gh * gw;
    let d = c * patch * patch;
    let mut out = Tensor::zeros(&[t, d]);
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * d;
            let mut e = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out.data_mut()[row + e] =
                            image.data()[(ch * h + py * patch + dy) * w + px * patch + dx];
                        e += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify`.
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch, w / patch);
    let d = c * patch * patch;
    if tokens.shape() != [gh * gw, d] {
        return Err(Error::Shape(format!(
            "unpatchify expects [{}, {d}], got {:?}",
            gh * gw,
            tokens.shape()
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * d;
            let mut e = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out.data_mut()[(ch * h + py * patch + dy) * w + px * patch + dx] =
                            tokens.data()[row + e];
                        e += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2D sin/cos positional embeddings: half the channels encode the row,
/// half the column; each half alternates sin/cos over geometric frequencies
/// with base 10000.
pub fn pos_embed_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!("embedding dim {dim} not divisible by 4")));
    }
    let quarter = dim / 4;
    let mut out = Tensor::zeros(&[grid_h * grid_w, dim]);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = (r * grid_w + c) * dim;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                out.data_mut()[row + 2 * i] = (r as f64 * omega).sin();
                out.data_mut()[row + 2 * i + 1] = (r as f64 * omega).cos();
                out.data_mut()[row + dim / 2 + 2 * i] = (c as f64 * omega).sin();
                out.data_mut()[row + dim / 2 + 2 * i + 1] = (c as f64 * omega).cos();
            }
        }
    }
    Ok(out)
}

/// Keep/mask assignment for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub total: usize,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn visible(&self) -> Vec<usize> {
        let mut is_masked = vec![false; self.total];
        for &i in &self.masked {
            is_masked[i] = true;
        }
        (0..self.total).filter(|&i| !is_masked[i]).collect()
    }

    pub fn none(total: usize) -> Self {
        MaskPlan { total, masked: Vec::new(), ratio: 0.0 }
    }
}

/// Uniform sample without replacement of floor(ratio * total) masked indices.
pub fn random_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
    }
    let count = (ratio * total as f64).floor() as usize;
    let mut rng = seeded_rng(seed);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    let mut masked = idx[..count].to_vec();
    masked.sort_unstable();
    Ok(MaskPlan { total, masked, ratio })
}

/// Register all MAE parameters for a profile.
pub fn init_mae_params(profile: &ModelProfile, in_chans: usize, seed: u64) -> ParamSet {
    let mut rng = seeded_rng(sub_seed(seed, SALT_INIT, 0));
    let mut p = ParamSet::new();
    let td = profile.token_dim(in_chans);
    let (d, dd) = (profile.embed_dim, profile.dec_embed_dim);
    p.insert("patch_embed.w", init_xavier(&mut rng, &[td, d]));
    p.insert("patch_embed.b", Tensor::zeros(&[d]));
    for i in 0..profile.depth {
        init_block(&mut p, &mut rng, &format!("enc.{i}"), d, profile.depth);
    }
    p.insert("enc.norm.g", Tensor::full(&[d], 1.0));
    p.insert("enc.norm.b", Tensor::zeros(&[d]));
    p.insert("dec.embed.w", init_xavier(&mut rng, &[d, dd]));
    p.insert("dec.embed.b", Tensor::zeros(&[dd]));
    p.insert("dec.mask_token", init_normal(&mut rng, &[1, dd], 0.02));
    for i in 0..profile.dec_depth {
        init_block(&mut p, &mut rng, &format!("dec.{i}"), dd, profile.dec_depth);
    }
    p.insert("dec.norm.g", Tensor::full(&[dd], 1.0));
    p.insert("dec.norm.b", Tensor::zeros(&[dd]));
    p.insert("dec.pred.w", init_xavier(&mut rng, &[dd, td]));
    p.insert("dec.pred.b", Tensor::zeros(&[td]));
    p
}

/// Run the ViT encoder over already-embedded tokens (used by both the MAE
/// decoder path and the fine-tune head). Returns the per-block outputs and
/// the final-norm output.
pub fn encoder_forward(
    g: &mut Graph,
    bound: &BoundParams,
    profile: &ModelProfile,
    tokens: Var,
) -> Result<(Vec<Var>, Var)> {
    let mut x = tokens;
    let mut block_outputs = Vec::with_capacity(profile.depth);
    for i in 0..profile.depth {
        x = transformer_block(g, x, bound, &format!("enc.{i}"), profile.heads)?;
        block_outputs.push(x);
    }
    let normed = final_norm(g, x, bound, "enc.norm");
    Ok((block_outputs, normed))
}

/// Embed raw patch tokens: linear projection plus 2D sin/cos positions.
pub fn embed_tokens(
    g: &mut Graph,
    bound: &BoundParams,
    profile: &ModelProfile,
    patch_tokens: &Tensor,
) -> Result<Var> {
    let x = g.constant(patch_tokens.clone());
    let x = dense(g, x, bound.var("patch_embed.w"), bound.var("patch_embed.b"));
    let pos = pos_embed_2d(profile.grid(), profile.grid(), profile.embed_dim)?;
    let pos = g.constant(pos);
    Ok(g.add(x, pos))
}

/// Full MAE forward in token space: encoder over visible tokens, decoder over
/// encoder outputs plus a shared mask token. Returns reconstructed patch
/// tokens [T, C*patch^2] in normalized units.
pub fn mae_forward_graph(
    g: &mut Graph,
    bound: &BoundParams,
    profile: &ModelProfile,
    patch_tokens: &Tensor,
    plan: &MaskPlan,
) -> Result<Var> {
    let t = profile.tokens();
    if plan.total != t {
        return Err(Error::Shape(format!("mask plan covers {} tokens, model has {t}", plan.total)));
    }
    let embedded = embed_tokens(g, bound, profile, patch_tokens)?;
    let visible_idx = plan.visible();
    let visible = if visible_idx.len() == t {
        embedded
    } else {
        g.gather_rows(embedded, &visible_idx)
    };
    let (_, enc_out) = encoder_forward(g, bound, profile, visible)?;

    // decoder input: projected encoder outputs at visible positions, the
    // shared mask token at masked positions, plus decoder positional embeds
    let dec_tokens = dense(g, enc_out, bound.var("dec.embed.w"), bound.var("dec.embed.b"));
    let placed = g.scatter_rows(dec_tokens, &visible_idx, t);
    let full = if plan.masked.is_empty() {
        placed
    } else {
        let mask_tok = g.broadcast_row(bound.var("dec.mask_token"), plan.masked.len());
        let placed_mask = g.scatter_rows(mask_tok, &plan.masked, t);
        g.add(placed, placed_mask)
    };
    let dec_pos = pos_embed_2d(profile.grid(), profile.grid(), profile.dec_embed_dim)?;
    let dec_pos = g.constant(dec_pos);
    let mut x = g.add(full, dec_pos);
    for i in 0..profile.dec_depth {
        x = transformer_block(g, x, bound, &format!("dec.{i}"), profile.heads)?;
    }
    let x = final_norm(g, x, bound, "dec.norm");
    Ok(dense(g, x, bound.var("dec.pred.w"), bound.var("dec.pred.b")))
}

/// Reconstruct one normalized tile outside a training loop.
pub fn mae_forward(
    image: &Tensor,
    plan: &MaskPlan,
    params: &ParamSet,
    profile: &ModelProfile,
) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let tokens = patchify(image, profile.patch)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let recon = mae_forward_graph(&mut g, &bound, profile, &tokens, plan)?;
    unpatchify(g.value(recon), c, h, w, profile.patch)
}

/// RMSE over pixels that lie in masked patches and are valid.
pub fn masked_rmse_loss(
    recon: &Tensor,
    target: &Tensor,
    plan: &MaskPlan,
    validity: &[bool],
) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape("recon/target shape mismatch".into()));
    }
    if recon.len() != validity.len() {
        return Err(Error::Shape("validity length mismatch".into()));
    }
    let shape = recon.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let weights = pixel_mask_weights(plan, c, h, w, validity)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((&r, &t), &wgt) in recon.data().iter().zip(target.data()).zip(&weights) {
        if wgt != 0.0 {
            let d = r - t;
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((acc / count as f64).sqrt())
}

/// Per-pixel 0/1 weights in image space for masked and valid pixels.
fn pixel_mask_weights(plan: &MaskPlan, c: usize, h: usize, w: usize, validity: &[bool]) -> Result<Vec<f64>> {
    let patch = (h * w / plan.total.max(1)).integer_sqrt();
    // recompute patch from geometry: h/gh where gh^2 = total
    let gh = (plan.total as f64).sqrt().round() as usize;
    if gh * gh != plan.total || h % gh != 0 {
        return Err(Error::Shape(format!("mask plan with {} tokens does not fit {h}x{w}", plan.total)));
    }
    let _ = patch;
    let p = h / gh;
    let mut weights = vec![0.0; c * h * w];
    for &tok in &plan.masked {
        let (py, px) = (tok / gh, tok % gh);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let i = (ch * h + py * p + dy) * w + px * p + dx;
                    if validity[i] {
                        weights[i] = 1.0;
                    }
                }
            }
        }
    }
    Ok(weights)
}

trait IntegerSqrt {
    fn integer_sqrt(self) -> usize;
}
impl IntegerSqrt for usize {
    fn integer_sqrt(self) -> usize {
        (self as f64).sqrt() as usize
    }
}

/// Token-space weights for the training loss: 1 for elements of masked
/// tokens whose source pixel is valid.
pub fn token_mask_weights(
    plan: &MaskPlan,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
    validity: &[bool],
) -> Vec<f64> {
    let gw = w / patch;
    let d = c * patch * patch;
    let mut weights = vec![0.0; plan.total * d];
    for &tok in &plan.masked {
        let (py, px) = (tok / gw, tok % gw);
        let mut e = 0;
        for ch in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    let i = (ch * h + py * patch + dy) * w + px * patch + dx;
                    if validity[i] {
                        weights[tok * d + e] = 1.0;
                    }
                    e += 1;
                }
            }
        }
    }
    weights
}

/// Per-band normalization statistics over valid pixels.
pub fn band_stats(tiles: &[&Tile]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = tiles.first().map(|t| t.bands.count()).unwrap_or(0);
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for t in tiles {
        let hw = t.height * t.width;
        for band in 0..c {
            for i in 0..hw {
                if t.validity[band * hw + i] {
                    let v = t.planes[band * hw + i] as f64;
                    count[band] += 1;
                    let delta = v - mean[band];
                    mean[band] += delta / count[band] as f64;
                    m2[band] += delta * (v - mean[band]);
                }
            }
        }
    }
    let mut std = Vec::with_capacity(c);
    for band in 0..c {
        if count[band] == 0 {
            return Err(Error::InsufficientData(format!("band {band} has no valid pixels")));
        }
        let var = m2[band] / count[band] as f64;
        std.push(var.sqrt().max(1e-6));
    }
    Ok((mean, std))
}

/// Normalize a tile into a [C,H,W] tensor; invalid pixels become 0 (the band
/// mean) after normalization. Returns the tensor, the raw-unit tensor (NaN at
/// invalid pixels) and the validity flags.
pub fn normalize_tile(tile: &Tile, mean: &[f64], std: &[f64]) -> (Tensor, Tensor, Vec<bool>) {
    let c = tile.bands.count();
    let hw = tile.height * tile.width;
    let mut norm = Tensor::zeros(&[c, tile.height, tile.width]);
    let mut raw = Tensor::zeros(&[c, tile.height, tile.width]);
    for band in 0..c {
        for i in 0..hw {
            let idx = band * hw + i;
            if tile.validity[idx] {
                let v = tile.planes[idx] as f64;
                raw.data_mut()[idx] = v;
                norm.data_mut()[idx] = (v - mean[band]) / std[band];
            } else {
                raw.data_mut()[idx] = f64::NAN;
                norm.data_mut()[idx] = 0.0;
            }
        }
    }
    (norm, raw, tile.validity.clone())
}

/// Random 90-degree rotation on the 45x45 source tile, then a random crop to
/// the model input size.
pub fn pretrain_augment(tile: &Tile, input_size: usize, rng: &mut impl Rng) -> Tile {
    let k = rng.gen_range(0..4u8);
    let rotated = rot90(tile, k);
    let max_off = rotated.height - input_size;
    let oy = rng.gen_range(0..=max_off);
    let ox = rng.gen_range(0..=max_off);
    crop(&rotated, oy, ox, input_size)
}

pub fn rot90(tile: &Tile, quarter_turns: u8) -> Tile {
    let mut t = tile.clone();
    for _ in 0..quarter_turns % 4 {
        let (c, h, w) = (t.bands.count(), t.height, t.width);
        let mut planes = vec![0.0f32; c * h * w];
        let mut validity = vec![false; c * h * w];
        for band in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // (y, x) -> (x, h-1-y)
                    let src = (band * h + y) * w + x;
                    let dst = (band * w + x) * h + (h - 1 - y);
                    planes[dst] = t.planes[src];
                    validity[dst] = t.validity[src];
                }
            }
        }
        t = Tile { bands: t.bands, height: w, width: h, planes, validity, meta: t.meta };
    }
    t
}

pub fn crop(tile: &Tile, oy: usize, ox: usize, size: usize) -> Tile {
    let c = tile.bands.count();
    let mut planes = Vec::with_capacity(c * size * size);
    let mut validity = Vec::with_capacity(c * size * size);
    for band in 0..c {
        for y in 0..size {
            for x in 0..size {
                planes.push(tile.get(band, oy + y, ox + x));
                validity.push(tile.is_valid(band, oy + y, ox + x));
            }
        }
    }
    Tile::new(tile.bands.clone(), size, size, planes, validity, tile.meta.clone())
        .expect("crop preserves validity")
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr_peak: f64,
    pub mask_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// fraction of tiles held out for validation (0 disables the split)
    pub val_fraction: f64,
    /// stop once the epoch training loss drops below this value
    pub stop_at_loss: Option<f64>,
}

impl PretrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        PretrainConfig {
            epochs,
            lr_peak: 2.4e-3,
            mask_ratio: DEFAULT_MASK_RATIO,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed,
            val_fraction: 0.1,
            stop_at_loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub split: String,
    pub region: String,
    pub loss: f64,
}

pub fn loss_log_csv(rows: &[LossLogRow]) -> String {
    let mut s = String::from("epoch,split,region,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.9}\n", r.epoch, r.split, r.region, r.loss));
    }
    s
}

/// Build the full loss graph for a single tile: the raw-unit masked RMSE.
fn mae_loss_graph(
    params: &ParamSet,
    profile: &ModelProfile,
    crop_tile: &Tile,
    mean: &[f64],
    std: &[f64],
    plan: &MaskPlan,
) -> Result<(Graph, BoundParams, Var)> {
    let (norm, raw, validity) = normalize_tile(crop_tile, mean, std);
    let c = crop_tile.bands.count();
    let (h, w) = (crop_tile.height, crop_tile.width);
    let tokens = patchify(&norm, profile.patch)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let recon = mae_forward_graph(&mut g, &bound, profile, &tokens, plan)?;
    // de-normalize so the loss is in raw reflectance units
    let d = profile.token_dim(c);
    let mut std_row = Vec::with_capacity(d);
    let mut mean_row = Vec::with_capacity(d);
    for ch in 0..c {
        for _ in 0..profile.patch * profile.patch {
            std_row.push(std[ch]);
            mean_row.push(mean[ch]);
        }
    }
    let std_row = g.constant(Tensor::new(vec![d], std_row)?);
    let mean_row = g.constant(Tensor::new(vec![d], mean_row)?);
    let recon_raw = g.mul_row(recon, std_row);
    let recon_raw = g.add_row(recon_raw, mean_row);
    let target = patchify(&raw, profile.patch)?;
    let weights = token_mask_weights(plan, c, h, w, profile.patch, &validity);
    let mse = g.masked_mse(recon_raw, &target, &weights)?;
    let loss = g.sqrt(mse);
    Ok((g, bound, loss))
}

/// Masked-RMSE loss of one tile without touching gradients.
pub fn mae_loss(
    params: &ParamSet,
    profile: &ModelProfile,
    crop_tile: &Tile,
    mean: &[f64],
    std: &[f64],
    plan: &MaskPlan,
) -> Result<f64> {
    let (g, _, loss) = mae_loss_graph(params, profile, crop_tile, mean, std, plan)?;
    Ok(g.value(loss).item())
}

/// Same loss with gradients accumulated into `params`.
pub fn mae_loss_grad(
    params: &mut ParamSet,
    profile: &ModelProfile,
    crop_tile: &Tile,
    mean: &[f64],
    std: &[f64],
    plan: &MaskPlan,
) -> Result<f64> {
    let (g, bound, loss) = mae_loss_graph(params, profile, crop_tile, mean, std, plan)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    bound.write_grads(&grads, params);
    Ok(value)
}

/// Pre-train an MAE on 45x45 tiles that pass the validity filter.
pub fn pretrain(
    dataset: &[Tile],
    profile: &ModelProfile,
    cfg: &PretrainConfig,
) -> Result<(ModelCheckpoint, Vec<LossLogRow>)> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty pre-training dataset".into()));
    }
    let in_chans = dataset[0].bands.count();
    let refs: Vec<&Tile> = dataset.iter().collect();
    let (mean, std) = band_stats(&refs)?;
    let mut params = init_mae_params(profile, in_chans, cfg.seed);

    // seeded validation split
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut split_rng = seeded_rng(sub_seed(cfg.seed, SALT_VALSPLIT, 0));
    order.shuffle(&mut split_rng);
    let n_val = (dataset.len() as f64 * cfg.val_fraction).floor() as usize;
    let n_val = if dataset.len() - n_val == 0 { 0 } else { n_val };
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let total_steps = cfg.epochs * train_idx.len();
    let mut opt = OptimizerState::new(
        &params,
        LrSchedule::new(cfg.lr_peak, total_steps),
        cfg.weight_decay,
    );
    let mut log = Vec::new();
    let mut step_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let mut epoch_order = train_idx.clone();
        let mut rng = seeded_rng(sub_seed(cfg.seed, SALT_SHUFFLE, epoch as u64));
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (si, &ti) in epoch_order.iter().enumerate() {
            let mut aug_rng = seeded_rng(sub_seed(cfg.seed, SALT_AUGMENT, step_counter));
            let cropped = pretrain_augment(&dataset[ti], profile.input_size, &mut aug_rng);
            let plan = random_mask(
                profile.tokens(),
                cfg.mask_ratio,
                sub_seed(cfg.seed, SALT_MASK, step_counter),
            )?;
            params.zero_grads();
            let loss = mae_loss_grad(&mut params, profile, &cropped, &mean, &std, &plan)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step: si, what: "loss".into() });
            }
            opt.step_scheduled(&mut params)?;
            epoch_loss += loss;
            step_counter += 1;
        }
        let train_loss = epoch_loss / epoch_order.len().max(1) as f64;
        log.push(LossLogRow { epoch, split: "train".into(), region: "ALL".into(), loss: train_loss });
        if !val_idx.is_empty() {
            let val_loss = eval_split(&params, profile, dataset, &val_idx, &mean, &std, cfg)?;
            log.push(LossLogRow { epoch, split: "val".into(), region: "ALL".into(), loss: val_loss });
        }
        if cfg.stop_at_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }

    // per-region validation losses at the end of training
    if !val_idx.is_empty() {
        let final_epoch = log.last().map(|r| r.epoch).unwrap_or(0);
        let mut regions: Vec<String> =
            val_idx.iter().map(|&i| dataset[i].meta.region.clone()).collect();
        regions.sort();
        regions.dedup();
        for region in regions {
            let idx: Vec<usize> = val_idx
                .iter()
                .copied()
                .filter(|&i| dataset[i].meta.region == region)
                .collect();
            let loss = eval_split(&params, profile, dataset, &idx, &mean, &std, cfg)?;
            log.push(LossLogRow { epoch: final_epoch, split: "val".into(), region, loss });
        }
    }

    let ckpt = ModelCheckpoint {
        version: 1,
        profile: profile.name.clone(),
        band_mean: mean,
        band_std: std,
        params,
    };
    Ok((ckpt, log))
}

fn eval_split(
    params: &ParamSet,
    profile: &ModelProfile,
    dataset: &[Tile],
    idx: &[usize],
    mean: &[f64],
    std: &[f64],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        // deterministic center crop and per-tile mask for evaluation
        let off = (dataset[i].height - profile.input_size) / 2;
        let cropped = crop(&dataset[i], off, off, profile.input_size);
        let plan = random_mask(
            profile.tokens(),
            cfg.mask_ratio,
            sub_seed(cfg.seed, SALT_MASK, u64::MAX - i as u64),
        )?;
        total += mae_loss(params, profile, &cropped, mean, std, &plan)?;
    }
    Ok(total / idx.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn patchify_geometry_441_tokens() {
        let img = Tensor::zeros(&[1, 42, 42]);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[441, 4]);
    }

    #[test]
    fn patchify_single_patch_order() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_round_trip_bit_exact() {
        let mut rng = seeded_rng(5);
        let img = crate::nn::init_normal(&mut rng, &[16, 42, 42], 1.0);
        let t = patchify(&img, 2).unwrap();
        let back = unpatchify(&t, 16, 42, 42, 2).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::zeros(&[1, 5, 5]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn pos_embed_origin_is_sin_zero_cos_one() {
        let e = pos_embed_2d(3, 3, 8).unwrap();
        // row 0 = position (0,0): sin channels 0, cos channels 1
        let row = &e.data()[..8];
        assert_eq!(row, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pos_embed_row_col_separable() {
        let d = 16;
        let e = pos_embed_2d(3, 3, d).unwrap();
        let p00 = &e.data()[..d];
        let p01 = &e.data()[d..2 * d]; // position (0, 1)
        for i in 0..d / 2 {
            assert_eq!(p00[i], p01[i], "row half changed between (0,0) and (0,1)");
        }
        assert_ne!(&p00[d / 2..], &p01[d / 2..]);
    }

    #[test]
    fn pos_embed_unique_rows_21x21() {
        let e = pos_embed_2d(21, 21, 64).unwrap();
        let mut rows: Vec<Vec<u64>> = e
            .data()
            .chunks(64)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let before = rows.len();
        rows.dedup();
        assert_eq!(rows.len(), before, "positional embeddings collide");
        assert_eq!(before, 441);
    }

    #[test]
    fn pos_embed_rejects_bad_dim() {
        assert!(pos_embed_2d(2, 2, 6).is_err());
    }

    #[test]
    fn random_mask_counts() {
        let plan = random_mask(441, 0.75, 3).unwrap();
        assert_eq!(plan.masked.len(), 330);
        assert_eq!(plan.visible().len(), 111);
        let mut sorted = plan.masked.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 330);
    }

    #[test]
    fn random_mask_tiny_ratio_floors_to_zero() {
        let plan = random_mask(441, 0.001, 3).unwrap();
        assert!(plan.masked.is_empty());
    }

    #[test]
    fn random_mask_deterministic_per_seed() {
        assert_eq!(random_mask(441, 0.75, 9).unwrap(), random_mask(441, 0.75, 9).unwrap());
        assert_ne!(
            random_mask(441, 0.75, 9).unwrap().masked,
            random_mask(441, 0.75, 10).unwrap().masked
        );
    }

    #[test]
    fn random_mask_rejects_bad_ratio() {
        assert!(random_mask(441, 0.0, 1).is_err());
        assert!(random_mask(441, 1.0, 1).is_err());
    }

    #[test]
    fn masked_rmse_perfect_recon_is_zero() {
        let img = Tensor::full(&[1, 4, 4], 0.5);
        let plan = random_mask(4, 0.5, 1).unwrap();
        let v = vec![true; 16];
        assert_eq!(masked_rmse_loss(&img, &img, &plan, &v).unwrap(), 0.0);
    }

    #[test]
    fn masked_rmse_constant_offset() {
        // one masked 2x2 patch, target zeros, recon ones -> 1.0
        let target = Tensor::zeros(&[1, 4, 4]);
        let recon = Tensor::full(&[1, 4, 4], 1.0);
        let plan = MaskPlan { total: 4, masked: vec![1], ratio: 0.25 };
        let v = vec![true; 16];
        assert_eq!(masked_rmse_loss(&recon, &target, &plan, &v).unwrap(), 1.0);
    }

    #[test]
    fn masked_rmse_skips_invalid_matches_brute_force() {
        let mut rng = seeded_rng(8);
        let recon = crate::nn::init_normal(&mut rng, &[2, 4, 4], 1.0);
        let target = crate::nn::init_normal(&mut rng, &[2, 4, 4], 1.0);
        let plan = random_mask(4, 0.5, 4).unwrap();
        let mut validity = vec![true; 32];
        for i in (0..32).step_by(3) {
            validity[i] = false;
        }
        let got = masked_rmse_loss(&recon, &target, &plan, &validity).unwrap();
        // brute force over all pixels
        let mut acc = 0.0;
        let mut n = 0;
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let tok = (y / 2) * 2 + x / 2;
                    let i = (ch * 4 + y) * 4 + x;
                    if plan.masked.contains(&tok) && validity[i] {
                        let d = recon.data()[i] - target.data()[i];
                        acc += d * d;
                        n += 1;
                    }
                }
            }
        }
        assert!((got - (acc / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn masked_rmse_all_invalid_is_error() {
        let img = Tensor::zeros(&[1, 4, 4]);
        let plan = random_mask(4, 0.5, 1).unwrap();
        let v = vec![false; 16];
        assert!(matches!(masked_rmse_loss(&img, &img, &plan, &v), Err(Error::EmptyLoss)));
    }

    #[test]
    fn loss_ignores_visible_patches() {
        let mut rng = seeded_rng(2);
        let target = crate::nn::init_normal(&mut rng, &[1, 4, 4], 1.0);
        let mut recon = target.clone();
        let plan = MaskPlan { total: 4, masked: vec![0], ratio: 0.25 };
        let v = vec![true; 16];
        let base = masked_rmse_loss(&recon, &target, &plan, &v).unwrap();
        // perturb a pixel of visible token 3 (bottom-right patch)
        recon.data_mut()[15] += 100.0;
        let after = masked_rmse_loss(&recon, &target, &plan, &v).unwrap();
        assert_eq!(base, after);
    }

    fn tiny_profile() -> ModelProfile {
        ModelProfile::by_name("tiny").unwrap()
    }

    #[test]
    fn mae_forward_shape_contract_zero_ratio() {
        let profile = tiny_profile();
        let params = init_mae_params(&profile, 2, 1);
        let img = Tensor::full(&[2, 8, 8], 0.1);
        let plan = MaskPlan::none(profile.tokens());
        let out = mae_forward(&img, &plan, &params, &profile).unwrap();
        assert_eq!(out.shape(), &[2, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn mae_forward_deterministic() {
        let profile = tiny_profile();
        let params = init_mae_params(&profile, 2, 1);
        let img = Tensor::full(&[2, 8, 8], 0.1);
        let plan = random_mask(profile.tokens(), 0.5, 3).unwrap();
        let a = mae_forward(&img, &plan, &params, &profile).unwrap();
        let b = mae_forward(&img, &plan, &params, &profile).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_plans_differ_across_seeds() {
        let mut distinct = 0;
        let base = random_mask(441, 0.75, 0).unwrap();
        for seed in 1..=100 {
            if random_mask(441, 0.75, seed).unwrap().masked != base.masked {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn pretrain_zero_epochs_returns_init() {
        let cfg0 = crate::synth::SynthConfig::new(1, 2, 45);
        let tiles: Vec<Tile> = (0..4).map(|i| crate::synth::gen_tile(&cfg0, i)).collect();
        let profile = tiny_profile();
        let mut cfg = PretrainConfig::new(0, 7);
        cfg.val_fraction = 0.0;
        let (ckpt, log) = pretrain(&tiles, &profile, &cfg).unwrap();
        assert!(log.is_empty());
        let init = init_mae_params(&profile, 2, 7);
        assert_eq!(ckpt.params.get("patch_embed.w"), init.get("patch_embed.w"));
    }
}
