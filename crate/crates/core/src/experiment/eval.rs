//! Downstream evaluation at a chosen layer: a linear probe on frozen
//! mean-pooled features, or finetuning layers `0..=k` with a classifier.
//! Evaluation always uses the full model; depth dropout is a training-time
//! device only.

use rand::seq::SliceRandom;

use crate::autodiff::{ParamId, Tape};
use crate::data::Dataset;
use crate::encoder::{KeptSet, LayeredEncoder};
use crate::error::{Error, Result};
use crate::experiment::config::{EvalConfig, EvalMode};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

const FEATURE_CHUNK: usize = 250;
const STD_FLOOR: f32 = 1e-6;
const CLS_W: ParamId = ParamId::new(usize::MAX, "cls.w");
const CLS_B: ParamId = ParamId::new(usize::MAX, "cls.b");

/// Mean-pooled `[n, d]` representations after layer `layer`.
pub fn extract_features(encoder: &LayeredEncoder, images: &Tensor, layer: usize) -> Result<Tensor> {
    let s = images.shape();
    let plane: usize = s[1..].iter().product();
    let kept = KeptSet::prefix(layer);
    let mut out = Vec::with_capacity(s[0] * encoder.config().width);
    for start in (0..s[0]).step_by(FEATURE_CHUNK) {
        let end = (start + FEATURE_CHUNK).min(s[0]);
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * plane..end * plane].to_vec())?;
        out.extend_from_slice(encoder.forward(&chunk, &kept, layer)?.data());
    }
    Tensor::new(vec![s[0], encoder.config().width], out)
}

/// Per-feature mean and standard deviation of `x` (`[n, d]`).
pub fn standardizer(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            mean[j] += f64::from(row[j]);
            sq[j] += f64::from(row[j]) * f64::from(row[j]);
        }
    }
    let mean: Vec<f64> = mean.into_iter().map(|m| m / n as f64).collect();
    let std =
        sq.iter().zip(&mean).map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR)).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn standardize(x: &Tensor, mean: &[f32], std: &[f32]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    out
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("row gather keeps shape")
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Linear softmax classifier trained by minibatch SGD from zero weights.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearClassifier { w: Tensor::zeros(&[dim, classes]), b: Tensor::zeros(&[classes]) }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.constant(x.clone()), tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        let h = tape.matmul(&x, &w)?;
        Ok(tape.add(&h, &b)?.into_value())
    }

    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &EvalConfig, seed: u64) -> Result<Self> {
        let mut clf = Self::zeros(x.shape()[1], classes);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut stream_rng(seed, Stream::Probe, &[epoch as u64]));
            for batch in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let xb = tape.constant(rows(x, batch));
                let w = tape.param(CLS_W, clf.w.clone());
                let b = tape.param(CLS_B, clf.b.clone());
                let h = tape.matmul(&xb, &w)?;
                let logits = tape.add(&h, &b)?;
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let loss = tape.softmax_cross_entropy(&logits, &y)?;
                let grads = tape.backward(&loss)?;
                drop((w, b));
                clf.w = clf.w.zip_map(&grads[&CLS_W], |p, g| p - cfg.lr * g)?;
                clf.b = clf.b.zip_map(&grads[&CLS_B], |p, g| p - cfg.lr * g)?;
            }
        }
        Ok(clf)
    }
}

/// Linear probe on standardized raw pixels; the no-encoder reference.
pub fn pixel_probe(train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    let flat = |d: &Dataset| d.images.reshape(&[d.len(), d.images.numel() / d.len()]);
    let (xtr, xte) = (flat(train)?, flat(test)?);
    let (mean, std) = standardizer(&xtr);
    let clf = LinearClassifier::fit(&standardize(&xtr, &mean, &std), &train.labels, train.num_classes, cfg, seed)?;
    Ok(accuracy(&clf.logits(&standardize(&xte, &mean, &std))?, &test.labels))
}

pub fn linear_probe(
    encoder: &LayeredEncoder,
    layer: usize,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    check_layer(encoder, layer)?;
    let ftr = extract_features(encoder, &train.images, layer)?;
    let fte = extract_features(encoder, &test.images, layer)?;
    let (mean, std) = standardizer(&ftr);
    let clf = LinearClassifier::fit(&standardize(&ftr, &mean, &std), &train.labels, train.num_classes, cfg, seed)?;
    Ok(accuracy(&clf.logits(&standardize(&fte, &mean, &std))?, &test.labels))
}

/// Trains layers `0..=layer` and a classifier on their pooled output.
/// Features are standardized with the starting encoder's statistics.
pub fn finetune(
    encoder: &LayeredEncoder,
    layer: usize,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    check_layer(encoder, layer)?;
    let kept = KeptSet::prefix(layer);
    let (mean, std) = standardizer(&extract_features(encoder, &train.images, layer)?);
    let shift = Tensor::new(vec![mean.len()], mean.iter().map(|m| -m).collect())?;
    let inv = Tensor::new(vec![std.len()], std.iter().map(|s| 1.0 / s).collect())?;
    let mut model = encoder.restrict(&kept, &[])?;
    model.set_trainable_layers(&(0..=layer).collect::<Vec<_>>(), None)?;
    let mut clf = LinearClassifier::zeros(encoder.config().width, train.num_classes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(seed, Stream::Probe, &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let rep = model.forward_on(&mut tape, &train.gather(batch), &kept, layer)?;
            let (s, k) = (tape.constant(shift.clone()), tape.constant(inv.clone()));
            let centered = tape.add(&rep, &s)?;
            let feats = tape.mul(&centered, &k)?;
            let w = tape.param(CLS_W, clf.w.clone());
            let b = tape.param(CLS_B, clf.b.clone());
            let h = tape.matmul(&feats, &w)?;
            let logits = tape.add(&h, &b)?;
            let loss = tape.softmax_cross_entropy(&logits, &train.gather_labels(batch))?;
            let grads = tape.backward(&loss)?;
            drop((w, b, rep, centered, feats, h, logits, loss, tape));
            for (id, g) in grads {
                let p = if id == CLS_W {
                    &mut clf.w
                } else if id == CLS_B {
                    &mut clf.b
                } else {
                    &mut model.param_mut(id).expect("encoder gradient").value
                };
                for (w, g) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.lr * g;
                }
            }
        }
    }
    let fte = extract_features(&model, &test.images, layer)?;
    Ok(accuracy(&clf.logits(&standardize(&fte, &mean, &std))?, &test.labels))
}

pub fn evaluate(
    encoder: &LayeredEncoder,
    layer: usize,
    mode: EvalMode,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    match mode {
        EvalMode::Linear => linear_probe(encoder, layer, train, test, cfg, seed),
        EvalMode::Finetune => finetune(encoder, layer, train, test, cfg, seed),
    }
}

fn check_layer(encoder: &LayeredEncoder, layer: usize) -> Result<()> {
    if layer > encoder.num_blocks() {
        return Err(Error::Usage(format!("layer {layer} exceeds depth {}", encoder.num_blocks())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, synth_test_set, SynthSpec};

    #[test]
    fn pixel_probe_separates_two_synthetic_classes() {
        let spec = SynthSpec::new(2, 200, 16, 16, 5);
        let train = synth_dataset(&spec).unwrap();
        let test = synth_test_set(&spec, 200).unwrap();
        let acc = pixel_probe(&train, &test, &EvalConfig::default(), 0).unwrap();
        assert!(acc >= 0.9, "pixel probe accuracy {acc}");
    }

    #[test]
    fn standardizer_matches_hand_statistics() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 5.0, 3.0, 5.0, 5.0, 5.0, 7.0, 5.0]).unwrap();
        let (mean, std) = standardizer(&x);
        assert_eq!(mean, vec![4.0, 5.0]);
        assert!((std[0] - 5.0f32.sqrt()).abs() < 1e-6);
        assert_eq!(std[1], STD_FLOOR);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 1.0, 0.5, 0.4]).unwrap();
        assert!((accuracy(&logits, &[1, 0, 1]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
