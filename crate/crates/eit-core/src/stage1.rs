//! Supervised boundary-to-interior regression: an encoder-decoder network
//! maps one normalized 208-entry voltage sweep to the full masked potential
//! field on the reconstruction grid.
//!
//! The sweep enters the network twice: resized into a drive-by-offset panel
//! image, and through a learned dense projection onto a coarse feature map
//! that is upsampled and concatenated with the panel. The body is a
//! three-level U-shape (16/32/64 channels, two 3x3 convolutions per level,
//! max pooling down, bilinear upsampling and skip concatenation up, 1x1
//! output head). Training minimizes mean squared error over in-disk pixels
//! only — exterior pixels carry no physics and would only inject noise into
//! the gradients — and augments the training split with the four boundary
//! symmetries that leave the trig drive fixed up to sign.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{normalize_dv, Dataset, NormStats, Split};
use crate::error::{EitError, Result};
use crate::geometry::{GridSpec, PotentialField};
use crate::nn::{
    maxpool2, maxpool2_backward, relu, relu_backward, resize_bilinear, upsample2,
    upsample2_adjoint, Adam, Conv2d,
};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

// --- configuration -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_seconds: f64,
    /// Set when the loss went non-finite; the model holds the best earlier
    /// state and the curves stop at the failing epoch.
    pub diverged_at: Option<usize>,
}

// --- model -------------------------------------------------------------------

const CH1: usize = 16;
const CH2: usize = 32;
const CH3: usize = 64;
/// Channels produced by the dense measurement projection at quarter
/// resolution, before upsampling to the grid.
const STEM_CH: usize = 8;
const MEAS: usize = 208;

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub n: usize,
    /// Dense projection of the measurement vector onto a coarse
    /// `STEM_CH x (n/4) x (n/4)` feature map; rows are output features.
    stem_w: Array2<f32>,
    stem_b: Vec<f32>,
    enc1a: Conv2d,
    enc1b: Conv2d,
    enc2a: Conv2d,
    enc2b: Conv2d,
    bota: Conv2d,
    botb: Conv2d,
    dec2a: Conv2d,
    dec2b: Conv2d,
    dec1a: Conv2d,
    dec1b: Conv2d,
    head: Conv2d,
}

struct ForwardCache {
    dv: Array2<f32>,
    x0: Array4<f32>,
    z1a: Array4<f32>,
    a1a: Array4<f32>,
    z1b: Array4<f32>,
    e1: Array4<f32>,
    p1_idx: Array4<u8>,
    p1: Array4<f32>,
    z2a: Array4<f32>,
    a2a: Array4<f32>,
    z2b: Array4<f32>,
    e2: Array4<f32>,
    p2_idx: Array4<u8>,
    p2: Array4<f32>,
    z3a: Array4<f32>,
    a3a: Array4<f32>,
    z3b: Array4<f32>,
    cat2: Array4<f32>,
    zd2a: Array4<f32>,
    ad2a: Array4<f32>,
    zd2b: Array4<f32>,
    cat1: Array4<f32>,
    zd1a: Array4<f32>,
    ad1a: Array4<f32>,
    zd1b: Array4<f32>,
    d1: Array4<f32>,
}

fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (bn, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::<f32>::zeros((bn, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

impl Stage1Model {
    pub fn new(n: usize, seed: u64) -> Result<Stage1Model> {
        if n < 16 || n % 4 != 0 {
            return Err(EitError::InvalidArgument(format!(
                "grid size {n} must be a multiple of 4 and at least 16"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = n / 4;
        let stem_out = STEM_CH * q * q;
        let stem_scale = (2.0 / MEAS as f64).sqrt();
        let stem_w = Array2::from_shape_fn((stem_out, MEAS), |_| {
            (crate::nn::randn(&mut rng) * stem_scale) as f32
        });
        Ok(Stage1Model {
            n,
            stem_w,
            stem_b: vec![0.0; stem_out],
            enc1a: Conv2d::new(1 + STEM_CH, CH1, 3, &mut rng),
            enc1b: Conv2d::new(CH1, CH1, 3, &mut rng),
            enc2a: Conv2d::new(CH1, CH2, 3, &mut rng),
            enc2b: Conv2d::new(CH2, CH2, 3, &mut rng),
            bota: Conv2d::new(CH2, CH3, 3, &mut rng),
            botb: Conv2d::new(CH3, CH3, 3, &mut rng),
            dec2a: Conv2d::new(CH3 + CH2, CH2, 3, &mut rng),
            dec2b: Conv2d::new(CH2, CH2, 3, &mut rng),
            dec1a: Conv2d::new(CH2 + CH1, CH1, 3, &mut rng),
            dec1b: Conv2d::new(CH1, CH1, 3, &mut rng),
            head: Conv2d::new(CH1, 1, 1, &mut rng),
        })
    }

    fn layers(&self) -> [&Conv2d; 11] {
        [
            &self.enc1a, &self.enc1b, &self.enc2a, &self.enc2b, &self.bota, &self.botb,
            &self.dec2a, &self.dec2b, &self.dec1a, &self.dec1b, &self.head,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d; 11] {
        [
            &mut self.enc1a, &mut self.enc1b, &mut self.enc2a, &mut self.enc2b, &mut self.bota,
            &mut self.botb, &mut self.dec2a, &mut self.dec2b, &mut self.dec1a, &mut self.dec1b,
            &mut self.head,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.stem_w.len()
            + self.stem_b.len()
            + self.layers().iter().map(|l| l.param_count()).sum::<usize>()
    }

    pub fn flatten_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.stem_w.iter());
        out.extend(&self.stem_b);
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(EitError::Model(format!(
                "parameter vector length {} does not match model ({})",
                flat.len(),
                self.param_count()
            )));
        }
        let mut ofs = 0;
        for w in self.stem_w.iter_mut() {
            *w = flat[ofs];
            ofs += 1;
        }
        for b in self.stem_b.iter_mut() {
            *b = flat[ofs];
            ofs += 1;
        }
        for l in self.layers_mut() {
            for w in l.weight.iter_mut() {
                *w = flat[ofs];
                ofs += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[ofs];
                ofs += 1;
            }
        }
        Ok(())
    }

    /// Project a batch of normalized measurement vectors `(B, MEAS)` through
    /// the dense stem and upsample the coarse maps to grid resolution,
    /// yielding `(B, STEM_CH, N, N)`.
    fn stem_forward(&self, dv: &Array2<f32>) -> Array4<f32> {
        let b = dv.dim().0;
        let q = self.n / 4;
        let lin = dv.dot(&self.stem_w.t());
        let mut coarse = Array4::<f32>::zeros((b, STEM_CH, q, q));
        for bi in 0..b {
            for c in 0..STEM_CH {
                for i in 0..q {
                    for j in 0..q {
                        coarse[[bi, c, i, j]] =
                            lin[[bi, c * q * q + i * q + j]] + self.stem_b[c * q * q + i * q + j];
                    }
                }
            }
        }
        upsample2(&upsample2(&coarse))
    }

    /// Gradients of the stem parameters given the gradient arriving at the
    /// upsampled stem output.
    fn stem_backward(&self, dv: &Array2<f32>, g_up: &Array4<f32>) -> (Array2<f32>, Vec<f32>) {
        let (b, _, _, _) = g_up.dim();
        let q = self.n / 4;
        let g_coarse = upsample2_adjoint(&upsample2_adjoint(g_up));
        let mut g_lin = Array2::<f32>::zeros((b, STEM_CH * q * q));
        for bi in 0..b {
            for c in 0..STEM_CH {
                for i in 0..q {
                    for j in 0..q {
                        g_lin[[bi, c * q * q + i * q + j]] = g_coarse[[bi, c, i, j]];
                    }
                }
            }
        }
        let gw = g_lin.t().dot(dv);
        let gb = g_lin.sum_axis(Axis(0)).to_vec();
        (gw, gb)
    }

    /// Forward pass over a batch of normalized measurement vectors
    /// `(B, MEAS)` and their embedded panels `(B, 1, N, N)`.
    pub fn forward(&self, dv: &Array2<f32>, panel: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(dv, panel).1
    }

    fn forward_cached(&self, dv: &Array2<f32>, panel: &Array4<f32>) -> (ForwardCache, Array4<f32>) {
        let x = concat_channels(panel, &self.stem_forward(dv));
        let z1a = self.enc1a.forward(&x);
        let a1a = relu(&z1a);
        let z1b = self.enc1b.forward(&a1a);
        let e1 = relu(&z1b);
        let (p1, p1_idx) = maxpool2(&e1);
        let z2a = self.enc2a.forward(&p1);
        let a2a = relu(&z2a);
        let z2b = self.enc2b.forward(&a2a);
        let e2 = relu(&z2b);
        let (p2, p2_idx) = maxpool2(&e2);
        let z3a = self.bota.forward(&p2);
        let a3a = relu(&z3a);
        let z3b = self.botb.forward(&a3a);
        let b3 = relu(&z3b);
        let cat2 = concat_channels(&upsample2(&b3), &e2);
        let zd2a = self.dec2a.forward(&cat2);
        let ad2a = relu(&zd2a);
        let zd2b = self.dec2b.forward(&ad2a);
        let d2 = relu(&zd2b);
        let cat1 = concat_channels(&upsample2(&d2), &e1);
        let zd1a = self.dec1a.forward(&cat1);
        let ad1a = relu(&zd1a);
        let zd1b = self.dec1b.forward(&ad1a);
        let d1 = relu(&zd1b);
        let out = self.head.forward(&d1);
        (
            ForwardCache {
                dv: dv.clone(),
                x0: x,
                z1a, a1a, z1b, e1, p1_idx, p1, z2a, a2a, z2b, e2, p2_idx, p2,
                z3a, a3a, z3b, cat2, zd2a, ad2a, zd2b, cat1, zd1a, ad1a, zd1b, d1,
            },
            out,
        )
    }

    /// Backward pass; returns parameter gradients in `flatten_params` order.
    fn backward(&self, cache: &ForwardCache, grad_out: &Array4<f32>) -> Vec<f32> {
        let mut grads: Vec<(Array2<f32>, Vec<f32>)> = Vec::with_capacity(12);

        let (g_d1, gw_head, gb_head) = self.head.backward(&cache.d1, grad_out);
        let g = relu_backward(&cache.zd1b, &g_d1);
        let (g_ad1a, gw_d1b, gb_d1b) = self.dec1b.backward(&cache.ad1a, &g);
        let g = relu_backward(&cache.zd1a, &g_ad1a);
        let (g_cat1, gw_d1a, gb_d1a) = self.dec1a.backward(&cache.cat1, &g);
        let g_up2 = g_cat1.slice(s![.., ..CH2, .., ..]).to_owned();
        let mut g_e1 = g_cat1.slice(s![.., CH2.., .., ..]).to_owned();
        let g_d2 = upsample2_adjoint(&g_up2);

        let g = relu_backward(&cache.zd2b, &g_d2);
        let (g_ad2a, gw_d2b, gb_d2b) = self.dec2b.backward(&cache.ad2a, &g);
        let g = relu_backward(&cache.zd2a, &g_ad2a);
        let (g_cat2, gw_d2a, gb_d2a) = self.dec2a.backward(&cache.cat2, &g);
        let g_up1 = g_cat2.slice(s![.., ..CH3, .., ..]).to_owned();
        let mut g_e2 = g_cat2.slice(s![.., CH3.., .., ..]).to_owned();
        let g_b3 = upsample2_adjoint(&g_up1);

        let g = relu_backward(&cache.z3b, &g_b3);
        let (g_a3a, gw_botb, gb_botb) = self.botb.backward(&cache.a3a, &g);
        let g = relu_backward(&cache.z3a, &g_a3a);
        let (g_p2, gw_bota, gb_bota) = self.bota.backward(&cache.p2, &g);
        g_e2 += &maxpool2_backward(&g_p2, &cache.p2_idx, cache.e2.dim());

        let g = relu_backward(&cache.z2b, &g_e2);
        let (g_a2a, gw_e2b, gb_e2b) = self.enc2b.backward(&cache.a2a, &g);
        let g = relu_backward(&cache.z2a, &g_a2a);
        let (g_p1, gw_e2a, gb_e2a) = self.enc2a.backward(&cache.p1, &g);
        g_e1 += &maxpool2_backward(&g_p1, &cache.p1_idx, cache.e1.dim());

        let g = relu_backward(&cache.z1b, &g_e1);
        let (g_a1a, gw_e1b, gb_e1b) = self.enc1b.backward(&cache.a1a, &g);
        let g = relu_backward(&cache.z1a, &g_a1a);
        let (g_x0, gw_e1a, gb_e1a) = self.enc1a.backward(&cache.x0, &g);
        let g_stem = g_x0.slice(s![.., 1.., .., ..]).to_owned();
        let (gw_stem, gb_stem) = self.stem_backward(&cache.dv, &g_stem);

        grads.push((gw_stem, gb_stem));
        grads.push((gw_e1a, gb_e1a));
        grads.push((gw_e1b, gb_e1b));
        grads.push((gw_e2a, gb_e2a));
        grads.push((gw_e2b, gb_e2b));
        grads.push((gw_bota, gb_bota));
        grads.push((gw_botb, gb_botb));
        grads.push((gw_d2a, gb_d2a));
        grads.push((gw_d2b, gb_d2b));
        grads.push((gw_d1a, gb_d1a));
        grads.push((gw_d1b, gb_d1b));
        grads.push((gw_head, gb_head));

        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in grads {
            flat.extend(w.iter());
            flat.extend(b);
        }
        flat
    }
}

// --- measurement embedding ---------------------------------------------------

/// Fold a normalized 208-vector into a 16x13 drive-major panel and resize
/// it bilinearly to the grid size, giving the network a spatially coherent
/// single-channel input.
pub fn embed_measurements(dv: &[f64], n: usize) -> Result<Array2<f32>> {
    if dv.len() != 208 {
        return Err(EitError::InvalidArgument(format!(
            "expected 208 measurements, got {}",
            dv.len()
        )));
    }
    let mut panel = Array2::<f32>::zeros((16, 13));
    for d in 0..16 {
        for m in 0..13 {
            panel[[d, m]] = dv[d * 13 + m] as f32;
        }
    }
    Ok(resize_bilinear(panel.view(), n, n))
}

// --- symmetry augmentation ---------------------------------------------------

/// Number of exact symmetry variants: identity, left-right reflection,
/// top-bottom reflection, and the half-turn they compose to.
pub const SYMMETRY_VARIANTS: usize = 4;

/// Permute a raw adjacent-protocol sweep under one of the ring symmetries.
///
/// Reflecting or rotating the conductivity relabels the electrodes, which
/// turns each drive pair into another (possibly reversed) drive pair and
/// each measurement pair likewise; reversals cancel between the drive and
/// the measurement, so every entry of the transformed sweep is a plain copy
/// of one entry of the original.
pub fn symmetry_variant_dv(dv: &[f64], variant: usize) -> Result<Vec<f64>> {
    if dv.len() != MEAS {
        return Err(EitError::InvalidArgument(format!(
            "expected {MEAS} measurements, got {}",
            dv.len()
        )));
    }
    if variant >= SYMMETRY_VARIANTS {
        return Err(EitError::InvalidArgument(format!(
            "symmetry variant {variant} out of range"
        )));
    }
    let mut out = vec![0.0f64; MEAS];
    for d in 0..16 {
        for k in 0..13 {
            let (sd, sk) = match variant {
                0 => (d, k),
                1 => ((23 - d) % 16, 12 - k),
                2 => ((31 - d) % 16, 12 - k),
                _ => ((d + 8) % 16, k),
            };
            out[13 * d + k] = dv[13 * sd + sk];
        }
    }
    Ok(out)
}

/// Transform a grid field under the same ring symmetry. The drive pattern is
/// odd in the vertical coordinate, so the two variants that flip it also
/// flip the sign of the potential.
pub fn symmetry_variant_field(field: ndarray::ArrayView2<f32>, variant: usize) -> Array2<f32> {
    let (n, _) = field.dim();
    match variant {
        1 => Array2::from_shape_fn((n, n), |(i, j)| field[[n - 1 - i, j]]),
        2 => Array2::from_shape_fn((n, n), |(i, j)| -field[[i, n - 1 - j]]),
        3 => Array2::from_shape_fn((n, n), |(i, j)| -field[[n - 1 - i, n - 1 - j]]),
        _ => field.to_owned(),
    }
}

// --- training ----------------------------------------------------------------

fn masked_mse_and_grad(
    pred: &Array4<f32>,
    targets: &Array3<f32>,
    mask: &Array2<f32>,
    mask_count: usize,
) -> (f64, Array4<f32>) {
    let n = mask.dim().0;
    let batch = pred.dim().0;
    let denom = (batch * mask_count) as f64;
    let mut grad = Array4::<f32>::zeros(pred.dim());
    let mut loss = 0.0f64;
    for k in 0..batch {
        for i in 0..n {
            for j in 0..n {
                let m = mask[[i, j]];
                if m == 0.0 {
                    continue;
                }
                let d = (pred[[k, 0, i, j]] - targets[[k, i, j]]) as f64;
                loss += d * d;
                grad[[k, 0, i, j]] = (2.0 * d / denom) as f32;
            }
        }
    }
    (loss / denom, grad)
}

/// One precomputed symmetry variant of the whole dataset: normalized sweeps,
/// their embedded panels, and the matching scaled targets.
struct VariantTensors {
    dv: Array2<f32>,
    panels: Array3<f32>,
    targets: Array3<f32>,
}

fn gather_batch(
    variants: &[VariantTensors],
    ids: &[usize],
    picks: &[usize],
) -> (Array2<f32>, Array4<f32>, Array3<f32>) {
    let n = variants[0].panels.dim().1;
    let mut dv = Array2::<f32>::zeros((ids.len(), MEAS));
    let mut panels = Array4::<f32>::zeros((ids.len(), 1, n, n));
    let mut targets = Array3::<f32>::zeros((ids.len(), n, n));
    for (k, (&id, &v)) in ids.iter().zip(picks).enumerate() {
        dv.row_mut(k).assign(&variants[v].dv.row(id));
        panels
            .slice_mut(s![k, 0, .., ..])
            .assign(&variants[v].panels.index_axis(Axis(0), id));
        targets
            .index_axis_mut(Axis(0), k)
            .assign(&variants[v].targets.index_axis(Axis(0), id));
    }
    (dv, panels, targets)
}

/// Train on a dataset's train split, validating each epoch and keeping the
/// best-validation parameters.
pub fn train_stage1(ds: &Dataset, config: &Stage1Config) -> Result<(Stage1Model, TrainReport)> {
    let start = Instant::now();
    let n = ds.manifest.config.grid_n;
    let stats = &ds.manifest.stats;
    let train_ids = ds.indices_of(Split::Train);
    let val_ids = ds.indices_of(Split::Val);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(EitError::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(EitError::InvalidArgument(
            "batch size and epoch count must be positive".into(),
        ));
    }
    let grid = ds.grid()?;
    let mut mask = Array2::<f32>::zeros((n, n));
    let mut mask_count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if grid.is_masked(i, j) {
                mask[[i, j]] = 1.0;
                mask_count += 1;
            }
        }
    }

    // Precompute every symmetry variant of every sample once: the raw sweep
    // is permuted, then normalized and embedded exactly as an observed sweep
    // of the transformed phantom would be; targets are scaled into roughly
    // [-1, 1] and flipped alongside.
    let total = ds.manifest.records.len();
    let scale = stats.u_scale as f32;
    let mut base_targets = Array3::<f32>::zeros((total, n, n));
    for s_id in 0..total {
        for i in 0..n {
            for j in 0..n {
                base_targets[[s_id, i, j]] = ds.u[[s_id, i, j]] / scale;
            }
        }
    }
    let mut variants = Vec::with_capacity(SYMMETRY_VARIANTS);
    for v in 0..SYMMETRY_VARIANTS {
        let mut dv = Array2::<f32>::zeros((total, MEAS));
        let mut panels = Array3::<f32>::zeros((total, n, n));
        let mut targets = Array3::<f32>::zeros((total, n, n));
        for s_id in 0..total {
            let raw: Vec<f64> = ds.dv.row(s_id).iter().map(|v| *v as f64).collect();
            let normalized = normalize_dv(&symmetry_variant_dv(&raw, v)?, stats)?;
            for (c, value) in normalized.iter().enumerate() {
                dv[[s_id, c]] = *value as f32;
            }
            panels
                .index_axis_mut(Axis(0), s_id)
                .assign(&embed_measurements(&normalized, n)?);
            targets.index_axis_mut(Axis(0), s_id).assign(&symmetry_variant_field(
                base_targets.index_axis(Axis(0), s_id),
                v,
            ));
        }
        variants.push(VariantTensors {
            dv,
            panels,
            targets,
        });
    }

    let mut model = Stage1Model::new(n, config.seed)?;
    let mut params = model.flatten_params();
    let mut opt = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51AB_21E5_7E11_BEEF);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        wall_seconds: 0.0,
        diverged_at: None,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        // Each sample trains on one uniformly drawn symmetry variant per
        // epoch; validation always scores the untouched data.
        let picks: Vec<usize> = order
            .iter()
            .map(|_| rng.gen_range(0..SYMMETRY_VARIANTS))
            .collect();
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (chunk, chunk_picks) in order.chunks(config.batch).zip(picks.chunks(config.batch)) {
            let (dv, panels, target_batch) = gather_batch(&variants, chunk, chunk_picks);
            let (cache, pred) = model.forward_cached(&dv, &panels);
            let (loss, grad) = masked_mse_and_grad(&pred, &target_batch, &mask, mask_count);
            if !loss.is_finite() {
                report.diverged_at = Some(epoch);
                break 'epochs;
            }
            let grads = model.backward(&cache, &grad);
            opt.step(&mut params, &grads, config.lr as f32);
            model.set_params(&params)?;
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        report.train_loss.push(epoch_loss / seen as f64);

        let mut val_loss = 0.0f64;
        let mut val_seen = 0usize;
        for chunk in val_ids.chunks(config.batch) {
            let zeros = vec![0usize; chunk.len()];
            let (dv, panels, target_batch) = gather_batch(&variants, chunk, &zeros);
            let pred = model.forward(&dv, &panels);
            let (loss, _) = masked_mse_and_grad(&pred, &target_batch, &mask, mask_count);
            val_loss += loss * chunk.len() as f64;
            val_seen += chunk.len();
        }
        let val_loss = val_loss / val_seen as f64;
        if !val_loss.is_finite() {
            report.diverged_at = Some(epoch);
            break;
        }
        report.val_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    model.set_params(&best_params)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Map one raw measurement vector to a gauge-fixed potential field.
pub fn predict_potential(
    model: &Stage1Model,
    dv: &[f64],
    stats: &NormStats,
    grid: &GridSpec,
) -> Result<PotentialField> {
    if grid.n != model.n {
        return Err(EitError::InvalidArgument(format!(
            "grid size {} does not match model size {}",
            grid.n, model.n
        )));
    }
    let normalized = normalize_dv(dv, stats)?;
    let mut dvm = Array2::<f32>::zeros((1, MEAS));
    for (c, value) in normalized.iter().enumerate() {
        dvm[[0, c]] = *value as f32;
    }
    let emb = embed_measurements(&normalized, model.n)?;
    let mut x = Array4::<f32>::zeros((1, 1, model.n, model.n));
    x.slice_mut(s![0, 0, .., ..]).assign(&emb);
    let pred = model.forward(&dvm, &x);
    let mut field = PotentialField::zeros(model.n);
    for i in 0..model.n {
        for j in 0..model.n {
            if grid.is_masked(i, j) {
                field.values[[i, j]] = pred[[0, 0, i, j]] as f64 * stats.u_scale;
            }
        }
    }
    field.regauge(grid);
    Ok(field)
}

// --- checkpointing -----------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"EITCKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub grid_n: usize,
    pub stats_hash: String,
    pub config: Stage1Config,
}

/// Hash of the normalization statistics a model was trained against;
/// prediction refuses a dataset whose statistics hash differently.
pub fn stats_hash(stats: &NormStats) -> String {
    let json = serde_json::to_string(stats).expect("stats serialize");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn save_checkpoint(
    model: &Stage1Model,
    stats: &NormStats,
    config: &Stage1Config,
    path: &Path,
) -> Result<()> {
    let params = model.flatten_params();
    let mut bytes = Vec::with_capacity(16 + params.len() * 4);
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&(model.n as u32).to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| EitError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| EitError::io(path, e))?;
    let meta = CheckpointMeta {
        grid_n: model.n,
        stats_hash: stats_hash(stats),
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| EitError::Model(format!("sidecar serialization failed: {e}")))?;
    let sp = sidecar_path(path);
    fs::write(&sp, json).map_err(|e| EitError::io(sp, e))
}

/// Load a checkpoint and its sidecar; `expected_stats`, when given, must
/// hash to the value recorded at save time.
pub fn load_checkpoint(
    path: &Path,
    expected_stats: Option<&NormStats>,
) -> Result<(Stage1Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| EitError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(EitError::Model(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + count * 4 {
        return Err(EitError::Model(format!(
            "checkpoint {} truncated: {} bytes for {} parameters",
            path.display(),
            bytes.len(),
            count
        )));
    }
    let params: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(EitError::Model("checkpoint contains non-finite parameters".into()));
    }
    let sp = sidecar_path(path);
    let json = fs::read_to_string(&sp).map_err(|e| EitError::io(&sp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)
        .map_err(|e| EitError::Model(format!("bad sidecar {}: {e}", sp.display())))?;
    if meta.grid_n != n {
        return Err(EitError::Model(format!(
            "sidecar grid size {} disagrees with checkpoint ({n})",
            meta.grid_n
        )));
    }
    if let Some(stats) = expected_stats {
        let have = stats_hash(stats);
        if have != meta.stats_hash {
            return Err(EitError::Model(format!(
                "checkpoint was trained against different normalization statistics \
                 (saved {}, dataset {have})",
                meta.stats_hash
            )));
        }
    }
    let mut model = Stage1Model::new(n, 0)?;
    model.set_params(&params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, load_dataset, DatasetConfig};
    use once_cell::sync::Lazy;
    use tempfile::{tempdir, TempDir};

    static TINY: Lazy<(TempDir, Dataset)> = Lazy::new(|| {
        let dir = tempdir().unwrap();
        let config = DatasetConfig {
            n_samples: 12,
            seed: 31,
            grid_n: 32,
            mesh_target_h: 0.06,
            ..DatasetConfig::default()
        };
        generate_dataset(&config, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        (dir, ds)
    });

    #[test]
    fn embed_zero_and_constant_vectors() {
        let zero = embed_measurements(&[0.0; 208], 64).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let c = embed_measurements(&[1.5; 208], 64).unwrap();
        for v in c.iter() {
            assert!((v - 1.5).abs() < 1e-6);
        }
        assert!(embed_measurements(&[0.0; 100], 64).is_err());
    }

    #[test]
    fn embed_hot_first_entry_lands_top_left() {
        let mut dv = [0.0; 208];
        dv[0] = 1.0;
        let e = embed_measurements(&dv, 64).unwrap();
        let (mut best, mut best_v) = ((0usize, 0usize), f32::NEG_INFINITY);
        for i in 0..64 {
            for j in 0..64 {
                if e[[i, j]] > best_v {
                    best_v = e[[i, j]];
                    best = (i, j);
                }
            }
        }
        assert!(best.0 < 4 && best.1 < 5, "max at {best:?}");
    }

    #[test]
    fn forward_is_deterministic_with_expected_shape() {
        let model = Stage1Model::new(32, 5).unwrap();
        let dv = Array2::<f32>::from_shape_fn((2, MEAS), |(b, c)| {
            ((b * 31 + c * 7) % 13) as f32 * 0.1
        });
        let x = Array4::<f32>::from_shape_fn((2, 1, 32, 32), |(_, _, i, j)| {
            ((i * 7 + j) % 13) as f32 * 0.1
        });
        let a = model.forward(&dv, &x);
        let b = model.forward(&dv, &x);
        assert_eq!(a.dim(), (2, 1, 32, 32));
        assert_eq!(a, b);
    }

    #[test]
    fn stem_gradients_satisfy_the_adjoint_identity() {
        // The stem is affine in its parameters, so pairing a parameter
        // perturbation with the output probe must equal pairing the
        // perturbation with the reported gradient exactly, up to f32 sums.
        let model = Stage1Model::new(16, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut draw = |scale: f32| -> f32 { (crate::nn::randn(&mut rng) as f32) * scale };
        let dv = Array2::<f32>::from_shape_fn((3, MEAS), |_| draw(0.5));
        let probe = Array4::<f32>::from_shape_fn((3, STEM_CH, 16, 16), |_| draw(1.0));
        let (gw, gb) = model.stem_backward(&dv, &probe);

        let mut lin = model.clone();
        lin.stem_w = Array2::from_shape_fn(model.stem_w.dim(), |_| draw(1.0));
        lin.stem_b = vec![0.0; model.stem_b.len()];
        let lhs: f64 = lin
            .stem_forward(&dv)
            .iter()
            .zip(probe.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let rhs: f64 = lin
            .stem_w
            .iter()
            .zip(gw.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!(
            (lhs - rhs).abs() <= 1e-3 * lhs.abs().max(1.0),
            "weight pairing {lhs} vs {rhs}"
        );

        let mut off = model.clone();
        off.stem_w.fill(0.0);
        for b in off.stem_b.iter_mut() {
            *b = draw(1.0);
        }
        let lhs_b: f64 = off
            .stem_forward(&dv)
            .iter()
            .zip(probe.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let rhs_b: f64 = off
            .stem_b
            .iter()
            .zip(&gb)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!(
            (lhs_b - rhs_b).abs() <= 1e-3 * lhs_b.abs().max(1.0),
            "bias pairing {lhs_b} vs {rhs_b}"
        );
    }

    #[test]
    fn backward_gradients_match_finite_differences() {
        // Scalar probe loss L = <forward(dv, panel), r>; the analytic
        // directional derivative along a random parameter direction is
        // checked against a central difference. The tolerance is loose
        // because the activations put kinks along the path, but a routing
        // mistake in the backward chain would miss by far more.
        let mut model = Stage1Model::new(16, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut draw = |scale: f32| -> f32 { (crate::nn::randn(&mut rng) as f32) * scale };
        let dv = Array2::<f32>::from_shape_fn((2, MEAS), |_| draw(0.5));
        let panel = Array4::<f32>::from_shape_fn((2, 1, 16, 16), |_| draw(0.5));
        let r = Array4::<f32>::from_shape_fn((2, 1, 16, 16), |_| draw(1.0));

        let (cache, _) = model.forward_cached(&dv, &panel);
        let grads = model.backward(&cache, &r);
        let params = model.flatten_params();
        let dir: Vec<f32> = (0..params.len()).map(|_| draw(1.0)).collect();
        let predicted: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| *g as f64 * *d as f64)
            .sum();

        let eps = 3e-4f32;
        let shift = |sign: f32, model: &mut Stage1Model| {
            let moved: Vec<f32> = params
                .iter()
                .zip(&dir)
                .map(|(p, d)| p + sign * eps * d)
                .collect();
            model.set_params(&moved).unwrap();
            let out = model.forward(&dv, &panel);
            out.iter().zip(r.iter()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
        };
        let plus = shift(1.0, &mut model);
        let minus = shift(-1.0, &mut model);
        let fd = (plus - minus) / (2.0 * eps as f64);
        assert!(
            (fd - predicted).abs() <= 0.1 * predicted.abs().max(1.0),
            "finite difference {fd} vs analytic {predicted}"
        );
    }

    #[test]
    fn params_round_trip_through_flat_vector() {
        let model = Stage1Model::new(32, 9).unwrap();
        let flat = model.flatten_params();
        let mut other = Stage1Model::new(32, 10).unwrap();
        assert_ne!(other.flatten_params(), flat);
        other.set_params(&flat).unwrap();
        assert_eq!(other.flatten_params(), flat);
        assert!(other.set_params(&flat[1..]).is_err());
    }

    #[test]
    fn loss_ignores_values_outside_mask() {
        let (_, ds) = &*TINY;
        let grid = ds.grid().unwrap();
        let n = 32;
        let mut mask = Array2::<f32>::zeros((n, n));
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if grid.is_masked(i, j) {
                    mask[[i, j]] = 1.0;
                    count += 1;
                }
            }
        }
        let pred = Array4::<f32>::from_elem((1, 1, n, n), 0.3);
        let mut targets = Array3::<f32>::zeros((1, n, n));
        let (l0, _) = masked_mse_and_grad(&pred, &targets, &mask, count);
        targets[[0, 0, 0]] = 99.0; // corner is outside the disk
        let (l1, g) = masked_mse_and_grad(&pred, &targets, &mask, count);
        assert_eq!(l0, l1);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn short_training_run_improves_and_reports() {
        let (_, ds) = &*TINY;
        let config = Stage1Config {
            epochs: 8,
            batch: 4,
            lr: 2e-3,
            seed: 3,
            patience: 30,
        };
        let (model, report) = train_stage1(ds, &config).unwrap();
        assert!(report.diverged_at.is_none());
        assert_eq!(report.train_loss.len(), report.val_loss.len());
        assert!(!report.val_loss.is_empty());
        let first = report.val_loss[0];
        let best = report.val_loss[report.best_epoch];
        assert!(best <= first, "best {best} vs first {first}");
        assert!(report.train_loss.iter().all(|l| l.is_finite() && *l >= 0.0));

        // Trained model must beat an untrained one on a validation sample.
        let grid = ds.grid().unwrap();
        let val = ds.indices_of(Split::Val)[0];
        let raw: Vec<f64> = ds.dv.row(val).iter().map(|v| *v as f64).collect();
        let trained = predict_potential(&model, &raw, &ds.manifest.stats, &grid).unwrap();
        let untrained_model = Stage1Model::new(32, 3).unwrap();
        let untrained =
            predict_potential(&untrained_model, &raw, &ds.manifest.stats, &grid).unwrap();
        let mse = |f: &PotentialField| {
            let mut acc = 0.0;
            let mut cnt = 0;
            for i in 0..32 {
                for j in 0..32 {
                    if grid.is_masked(i, j) {
                        let d = f.values[[i, j]] - ds.u[[val, i, j]] as f64;
                        acc += d * d;
                        cnt += 1;
                    }
                }
            }
            acc / cnt as f64
        };
        assert!(
            mse(&trained) < mse(&untrained),
            "trained {} vs untrained {}",
            mse(&trained),
            mse(&untrained)
        );
    }

    #[test]
    fn prediction_is_gauge_fixed_and_masked() {
        let (_, ds) = &*TINY;
        let grid = ds.grid().unwrap();
        let model = Stage1Model::new(32, 17).unwrap();
        let raw: Vec<f64> = ds.dv.row(0).iter().map(|v| *v as f64).collect();
        let field = predict_potential(&model, &raw, &ds.manifest.stats, &grid).unwrap();
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..32 {
            for j in 0..32 {
                if grid.is_masked(i, j) {
                    sum += field.values[[i, j]];
                    cnt += 1;
                } else {
                    assert_eq!(field.values[[i, j]], 0.0);
                }
            }
        }
        assert!((sum / cnt as f64).abs() < 1e-6);
    }

    #[test]
    fn symmetry_variants_compose_and_fix_the_homogeneous_sweep() {
        let dv: Vec<f64> = (0..MEAS).map(|i| (i as f64 * 0.37).sin()).collect();
        // Applying the two reflections in sequence must equal the half-turn
        // exactly: all three maps are pure entry permutations.
        let through = symmetry_variant_dv(&symmetry_variant_dv(&dv, 2).unwrap(), 1).unwrap();
        let half_turn = symmetry_variant_dv(&dv, 3).unwrap();
        assert_eq!(through, half_turn);
        // Each variant is an involution.
        for v in 0..SYMMETRY_VARIANTS {
            let twice = symmetry_variant_dv(&symmetry_variant_dv(&dv, v).unwrap(), v).unwrap();
            assert_eq!(twice, dv);
        }
        assert!(symmetry_variant_dv(&dv, 4).is_err());
        assert!(symmetry_variant_dv(&dv[..10], 0).is_err());

        // A homogeneous disk is invariant under the half-turn, and the mesh
        // shares the ring's rotational structure, so the measured sweep must
        // map onto itself to solver precision.
        let layout = crate::geometry::electrode_layout(16, 0.5, 0.01).unwrap();
        let mesh = crate::geometry::build_trimesh(0.06, &layout).unwrap();
        let sigma = vec![1.0; mesh.node_count()];
        let frame = crate::fem::measure_protocol(&mesh, &sigma, &layout).unwrap();
        let mapped = symmetry_variant_dv(&frame.values, 3).unwrap();
        let norm: f64 = frame.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = frame
            .values
            .iter()
            .zip(&mapped)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm < 1e-6, "half-turn invariance broke: {}", err / norm);
    }

    #[test]
    fn symmetries_match_solves_on_mirrored_phantoms() {
        use crate::fem::{interpolate_to_grid, measure_protocol, solve_continuum, CurrentPattern};
        use crate::geometry::{build_grid, build_trimesh, electrode_layout};
        use crate::phantom::{sigma_on_mesh, Family, Inclusion, Phantom, Shape};

        let layout = electrode_layout(16, 0.5, 0.01).unwrap();
        let mesh = build_trimesh(0.06, &layout).unwrap();
        let grid = build_grid(32).unwrap();
        let solve = |center: [f64; 2]| -> (Vec<f64>, Array2<f32>) {
            let phantom = Phantom {
                family: Family::OneCircle,
                inclusions: vec![Inclusion {
                    shape: Shape::Circle {
                        center,
                        radius: 0.22,
                    },
                    value: 3.0,
                }],
                background: 1.0,
            };
            let sigma = sigma_on_mesh(&phantom, &mesh);
            let frame = measure_protocol(&mesh, &sigma, &layout).unwrap();
            let sol = solve_continuum(&mesh, &sigma, &CurrentPattern::trig_default()).unwrap();
            let mut field = interpolate_to_grid(&mesh, &sol.u, &grid).unwrap();
            field.regauge(&grid);
            let values = Array2::from_shape_fn((32, 32), |(i, j)| field.values[[i, j]] as f32);
            (frame.values, values)
        };

        let (dv_base, u_base) = solve([0.35, 0.15]);
        let mirrored = [
            (1usize, [-0.35, 0.15]),
            (2, [0.35, -0.15]),
            (3, [-0.35, -0.15]),
        ];
        for (variant, center) in mirrored {
            let (dv_ref, u_ref) = solve(center);
            let dv_mapped = symmetry_variant_dv(&dv_base, variant).unwrap();
            let dv_norm: f64 = dv_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dv_err: f64 = dv_ref
                .iter()
                .zip(&dv_mapped)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                dv_err / dv_norm < 2e-2,
                "variant {variant}: sweep mismatch {}",
                dv_err / dv_norm
            );

            let u_mapped = symmetry_variant_field(u_base.view(), variant);
            let u_norm: f64 = u_ref.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let u_err: f64 = u_ref
                .iter()
                .zip(u_mapped.iter())
                .map(|(a, b)| ((*a - *b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                u_err / u_norm < 2e-2,
                "variant {variant}: field mismatch {}",
                u_err / u_norm
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_and_stats_guard() {
        let (_, ds) = &*TINY;
        let model = Stage1Model::new(32, 21).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = Stage1Config::default();
        save_checkpoint(&model, &ds.manifest.stats, &config, &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path, Some(&ds.manifest.stats)).unwrap();
        assert_eq!(loaded.flatten_params(), model.flatten_params());
        assert_eq!(meta.grid_n, 32);

        let mut other = ds.manifest.stats.clone();
        other.u_scale *= 2.0;
        let err = load_checkpoint(&path, Some(&other));
        assert!(err.is_err(), "mismatched stats must be refused");

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
