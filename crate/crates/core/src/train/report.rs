//! Held-out evaluation and sparsity reports of a trained model.

use std::path::Path;

use serde::Serialize;

use super::data::windows;
use crate::error::{Error, Result};
use crate::metrics::{activation_magnitude, allocation_histogram, AllocationHistogram, SparsityReport};
use crate::model::TransformerLm;
use crate::numerics::Tensor2D;

/// Chunk lengths of the CLS curve.
pub const CLS_CURVE: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// `exp(mean next-token NLL)` over the stream, split into consecutive
/// windows of at most `context + 1` tokens.
pub fn evaluate_ppl(model: &TransformerLm<f32>, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Empty("held-out stream needs at least two tokens"));
    }
    let span = model.config.context + 1;
    let (mut nll, mut count) = (0.0f64, 0usize);
    let mut start = 0;
    while start + 1 < tokens.len() {
        let w = &tokens[start..(start + span).min(tokens.len())];
        let n = w.len() - 1;
        let out = model.infer(&w[..n], 0)?;
        for r in 0..n {
            let row = out.logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            nll += lse - row[w[r + 1]] as f64;
        }
        count += n;
        start += n;
    }
    Ok((nll / count as f64).exp())
}

/// Router activations of every layer for each window of `len` tokens
/// (at most `max_windows`).
pub fn window_activations(
    model: &TransformerLm<f32>,
    tokens: &[usize],
    len: usize,
    max_windows: usize,
) -> Result<Vec<(Vec<usize>, Vec<Tensor2D<f32>>)>> {
    let mut out = Vec::new();
    for w in windows(tokens, len).take(max_windows) {
        out.push((w.to_vec(), model.infer(w, 0)?.activations));
    }
    if out.is_empty() {
        return Err(Error::SequenceTooShort { len: tokens.len(), chunk: len });
    }
    Ok(out)
}

/// Sparsity over windows of `len` tokens, averaged over windows and layers.
pub fn sparsity_on(
    model: &TransformerLm<f32>,
    tokens: &[usize],
    len: usize,
    chunk_lens: &[usize],
    max_windows: usize,
) -> Result<SparsityReport> {
    let mut reports = Vec::new();
    for (_, acts) in window_activations(model, tokens, len, max_windows)? {
        for a in &acts {
            reports.push(SparsityReport::measure(a, chunk_lens, 0.0)?);
        }
    }
    SparsityReport::average(&reports).ok_or(Error::Empty("sparsity_on"))
}

#[derive(Debug, Serialize)]
struct ClsRow {
    layer: String,
    chunk_len: usize,
    cls: f64,
}

#[derive(Debug, Serialize)]
struct AllocationRow {
    layer: usize,
    token_id: usize,
    frequency: usize,
    mean_ratio: f64,
}

#[derive(Debug, Serialize)]
struct MagnitudeRow {
    layer: usize,
    magnitude: f64,
}

/// Everything [`report`] writes, also returned to the caller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub layers: Vec<SparsityReport>,
    pub mean: SparsityReport,
    pub magnitudes: Vec<f64>,
    #[serde(skip)]
    pub allocation: Vec<AllocationHistogram>,
}

/// Measures the model on `tokens` and, with `out_dir`, writes
/// `cls_curve.csv` (`layer,chunk_len,cls`, layer `mean` for the average),
/// `allocation.csv` (`layer,token_id,frequency,mean_ratio`),
/// `magnitude.csv` (`layer,magnitude`) and `sparsity.json`.
pub fn report(model: &TransformerLm<f32>, tokens: &[usize], out_dir: Option<&Path>) -> Result<ModelReport> {
    let len = model.config.context.min(tokens.len());
    let windows = window_activations(model, tokens, len, usize::MAX)?;
    let n_layers = model.config.n_layers;
    let mut layers = Vec::with_capacity(n_layers);
    let mut magnitudes = Vec::with_capacity(n_layers);
    let mut allocation = Vec::with_capacity(n_layers);
    let mut all = Vec::new();
    for l in 0..n_layers {
        let mut reports = Vec::new();
        let mut hist = AllocationHistogram::default();
        let mut mag = 0.0;
        for (ids, acts) in &windows {
            reports.push(SparsityReport::measure(&acts[l], &CLS_CURVE, 0.0)?);
            hist.merge(&allocation_histogram(ids, &acts[l], 0.0)?);
            mag += activation_magnitude(&acts[l])?;
        }
        all.extend(reports.iter().cloned());
        layers.push(SparsityReport::average(&reports).ok_or(Error::Empty("report"))?);
        magnitudes.push(mag / windows.len() as f64);
        allocation.push(hist);
    }
    let mean = SparsityReport::average(&all).ok_or(Error::Empty("report"))?;
    let out = ModelReport { layers, mean, magnitudes, allocation };
    if let Some(dir) = out_dir {
        write_report(&out, dir)?;
    }
    Ok(out)
}

fn write_report(r: &ModelReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("cls_curve.csv"))?;
    let named = r.layers.iter().enumerate().map(|(l, s)| (l.to_string(), s));
    for (layer, s) in named.chain([("mean".to_string(), &r.mean)]) {
        for (&chunk_len, &cls) in &s.cls {
            w.serialize(ClsRow { layer: layer.clone(), chunk_len, cls })?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("cls_curve.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("allocation.csv"))?;
    for (layer, h) in r.allocation.iter().enumerate() {
        for (&token_id, e) in &h.entries {
            w.serialize(AllocationRow { layer, token_id, frequency: e.frequency, mean_ratio: e.mean_ratio })?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("allocation.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("magnitude.csv"))?;
    for (layer, &magnitude) in r.magnitudes.iter().enumerate() {
        w.serialize(MagnitudeRow { layer, magnitude })?;
    }
    w.flush().map_err(|e| Error::io(dir.join("magnitude.csv"), e))?;

    let path = dir.join("sparsity.json");
    std::fs::write(&path, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ffn::FfnConfig;
    use crate::model::ModelConfig;
    use crate::train::data::{tokenize, toy_corpus};

    fn model(seed: u64) -> TransformerLm<f32> {
        let config =
            ModelConfig { vocab_size: 256, context: 32, n_layers: 2, n_heads: 2, ffn: FfnConfig::block_ffn(16, 4, 8) };
        TransformerLm::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = model(1);
        m.lm_head = Tensor2D::zeros(16, 256);
        let tokens = tokenize(toy_corpus(100, 1).as_bytes());
        let ppl = evaluate_ppl(&m, &tokens).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn perplexity_is_deterministic_and_needs_data() {
        let m = model(2);
        let tokens = tokenize(toy_corpus(300, 2).as_bytes());
        assert_eq!(evaluate_ppl(&m, &tokens).unwrap(), evaluate_ppl(&m, &tokens).unwrap());
        assert!(evaluate_ppl(&m, &[]).is_err());
        assert!(evaluate_ppl(&m, &[1]).is_err());
    }

    #[test]
    fn untrained_cls_curve_is_non_increasing() {
        let m = model(3);
        let tokens = tokenize(toy_corpus(320, 3).as_bytes());
        let r = report(&m, &tokens, None).unwrap();
        let curve: Vec<f64> = CLS_CURVE.iter().map(|l| r.mean.cls[l]).collect();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]), "{curve:?}");
        assert!((r.mean.cls[&1] - r.mean.tls).abs() < 1e-12);
    }

    #[test]
    fn report_writes_artifacts() {
        let m = model(4);
        let tokens = tokenize(toy_corpus(200, 4).as_bytes());
        let dir = tempfile::tempdir().unwrap();
        report(&m, &tokens, Some(dir.path())).unwrap();
        let curve = std::fs::read_to_string(dir.path().join("cls_curve.csv")).unwrap();
        assert!(curve.starts_with("layer,chunk_len,cls\n"));
        assert!(curve.contains("\nmean,32,"));
        let alloc = std::fs::read_to_string(dir.path().join("allocation.csv")).unwrap();
        assert!(alloc.starts_with("layer,token_id,frequency,mean_ratio\n"));
        let mag = std::fs::read_to_string(dir.path().join("magnitude.csv")).unwrap();
        assert_eq!(mag.lines().count(), 3);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("sparsity.json")).unwrap()).unwrap();
        assert!(json["mean"]["tls"].is_number());
    }
}
