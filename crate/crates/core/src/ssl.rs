//! Two-view augmentation and the NT-Xent contrastive loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f32 = 0.5;

/// Logit added to self-similarities so they vanish from the softmax.
const SELF_MASK: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_scale_min: f32,
    pub flip_prob: f32,
    pub noise_std: f32,
    /// Mixed into client stream seeds; lets two runs share everything but
    /// their augmentation draws.
    #[serde(default)]
    pub stream_id: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop_scale_min: 0.5, flip_prob: 0.5, noise_std: 0.05, stream_id: 0 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { crop_scale_min: 1.0, flip_prob: 0.0, noise_std: 0.0, stream_id: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::config("crop_scale_min", format!("{} is outside (0, 1]", self.crop_scale_min)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", format!("{} is outside [0, 1]", self.flip_prob)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", format!("{} is negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Row `i` of both views derives from source image `sources[i]`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub sources: Vec<usize>,
}

impl ContrastiveBatch {
    /// Both views in one `[2b, 3, H, W]` tensor, view A first.
    pub fn into_stacked(self) -> Tensor {
        let mut shape = self.view_a.shape().to_vec();
        shape[0] *= 2;
        let mut data = Vec::with_capacity(self.view_a.numel() * 2);
        data.extend_from_slice(self.view_a.data());
        drop(self.view_a);
        data.extend_from_slice(self.view_b.data());
        drop(self.view_b);
        Tensor::from_parts(shape, data)
    }
}

pub fn make_views<R: Rng>(images: &Tensor, aug: &AugmentConfig, rng: &mut R) -> Result<ContrastiveBatch> {
    aug.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Dimension(format!("expected [b, 3, H, W] images, got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = 3 * h * w;
    let mut a = Vec::with_capacity(images.numel());
    let mut bv = Vec::with_capacity(images.numel());
    for img in images.data().chunks(plane) {
        augment_into(img, h, w, aug, rng, &mut a);
        augment_into(img, h, w, aug, rng, &mut bv);
    }
    Ok(ContrastiveBatch {
        view_a: Tensor::from_parts(s.to_vec(), a),
        view_b: Tensor::from_parts(s.to_vec(), bv),
        sources: (0..b).collect(),
    })
}

/// Random resized square crop, horizontal flip, Gaussian pixel noise,
/// clamped to `[0, 1]`.
fn augment_into<R: Rng>(img: &[f32], h: usize, w: usize, aug: &AugmentConfig, rng: &mut R, out: &mut Vec<f32>) {
    let scale = if aug.crop_scale_min < 1.0 { rng.random_range(aug.crop_scale_min..=1.0) } else { 1.0 };
    let side_y = ((scale.sqrt() * h as f32).round() as usize).clamp(1, h);
    let side_x = ((scale.sqrt() * w as f32).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - side_y);
    let x0 = rng.random_range(0..=w - side_x);
    let flip = aug.flip_prob > 0.0 && rng.random::<f32>() < aug.flip_prob;
    let (sy, sx) = (side_y as f32 / h as f32, side_x as f32 / w as f32);
    for c in 0..3 {
        let channel = &img[c * h * w..(c + 1) * h * w];
        for oy in 0..h {
            let fy = (y0 as f32 + (oy as f32 + 0.5) * sy - 0.5).clamp(y0 as f32, (y0 + side_y - 1) as f32);
            let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
            let iy1 = (iy + 1).min(y0 + side_y - 1);
            for ox in 0..w {
                let col = if flip { w - 1 - ox } else { ox };
                let fx = (x0 as f32 + (col as f32 + 0.5) * sx - 0.5).clamp(x0 as f32, (x0 + side_x - 1) as f32);
                let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
                let ix1 = (ix + 1).min(x0 + side_x - 1);
                let top = channel[iy * w + ix] * (1.0 - tx) + channel[iy * w + ix1] * tx;
                let bottom = channel[iy1 * w + ix] * (1.0 - tx) + channel[iy1 * w + ix1] * tx;
                let mut v = top * (1.0 - ty) + bottom * ty;
                if aug.noise_std > 0.0 {
                    v += aug.noise_std * rng.sample::<f32, _>(StandardNormal);
                }
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

/// NT-Xent over two aligned `[b, k]` embedding batches.
pub fn nt_xent_on(tape: &mut Tape, z_a: &Var, z_b: &Var, temperature: f32) -> Result<Var> {
    if z_a.shape() != z_b.shape() {
        return Err(Error::Dimension(format!(
            "view embeddings differ in shape: {:?} vs {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    let z = tape.concat_rows(&[z_a, z_b])?;
    nt_xent_stacked(tape, &z, temperature)
}

/// NT-Xent over `[2b, k]` embeddings whose first half pairs row-wise with
/// the second half. Similarities are dot products, so rows are expected to
/// be unit-normalized.
pub fn nt_xent_stacked(tape: &mut Tape, z: &Var, temperature: f32) -> Result<Var> {
    let s = z.shape();
    if s.len() != 2 || !s[0].is_multiple_of(2) {
        return Err(Error::Dimension(format!("expected [2b, k] embeddings, got {s:?}")));
    }
    let (n, b) = (s[0], s[0] / 2);
    if b < 2 {
        return Err(Error::Validation(format!("contrastive batch of {b} has no negatives; need b >= 2")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    let zt = tape.permute(z, &[1, 0])?;
    let mut logits = tape.matmul(z, &zt)?;
    drop(zt);
    logits = tape.scale(&logits, 1.0 / temperature)?;
    let mut mask = vec![0.0f32; n * n];
    for i in 0..n {
        mask[i * n + i] = SELF_MASK;
    }
    let mask = tape.constant(Tensor::from_parts(vec![n, n], mask));
    logits = tape.add(&logits, &mask)?;
    drop(mask);
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    tape.softmax_cross_entropy(&logits, &targets)
}

pub fn nt_xent(z_a: &Tensor, z_b: &Tensor, temperature: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z_a.clone()), tape.constant(z_b.clone()));
    Ok(nt_xent_on(&mut tape, &a, &b, temperature)?.value().item())
}
