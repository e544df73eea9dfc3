//! Browser demo: attention-mask visualizer, pretraining schedule curves and
//! a tokenize-and-mask view. Every export returns a JSON string.

use hybridlm::corpus::{
    apply_mntp_masking, CorruptionSplit, MaskingContext, Ratio, ScheduleConfig,
};
use hybridlm::model::forward::ModelRng;
use hybridlm::model::{AttentionKind, AttentionMaskSpec};
use hybridlm::training::OptimConfig;
use hybridlm::{train_bpe, Vocab, DEFAULT_SPECIALS};
use rand::SeedableRng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_MASK_LEN: usize = 64;
const MAX_TEXT_BYTES: usize = 4096;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[derive(Debug, Serialize)]
pub struct MaskGrid {
    pub kind: AttentionKind,
    pub len: usize,
    pub prefix_len: usize,
    /// `visible[q][k]`: query `q` may attend to key `k`.
    pub visible: Vec<Vec<bool>>,
}

pub fn mask_grid(kind: &str, len: usize, prefix_len: usize) -> Result<MaskGrid, String> {
    if !(1..=MAX_MASK_LEN).contains(&len) {
        return Err(format!("length must be between 1 and {MAX_MASK_LEN}"));
    }
    let spec = match kind {
        "causal" => AttentionMaskSpec::new(AttentionKind::Causal, len),
        "bidirectional" => AttentionMaskSpec::new(AttentionKind::Bidirectional, len),
        "prefix" => AttentionMaskSpec::prefix(prefix_len, len),
        other => return Err(format!("unknown mask kind {other:?}")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(MaskGrid {
        kind: spec.kind,
        len,
        prefix_len: spec.prefix_len,
        visible: (0..len)
            .map(|q| (0..len).map(|k| spec.visible(q, k)).collect())
            .collect(),
    })
}

#[wasm_bindgen]
pub fn attention_mask(kind: &str, len: usize, prefix_len: usize) -> Result<String, JsValue> {
    js(mask_grid(kind, len, prefix_len)
        .map(|g| serde_json::to_string(&g).expect("grid serializes")))
}

#[derive(Debug, Serialize)]
pub struct Curves {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps: Vec<u64>,
    pub mask_probability: Vec<f64>,
    pub batch_tokens: Vec<u64>,
    pub seq_len: Vec<usize>,
    pub learning_rate: Vec<f64>,
    /// Causal and masked sequences per batch at each sampled step.
    pub causal_sequences: Vec<usize>,
    pub masked_sequences: Vec<usize>,
}

/// The small-model recipe with a custom length and ratio, sampled at
/// `points` evenly spaced steps including both ends.
pub fn curves(total_steps: u64, ratio: &str, points: usize) -> Result<Curves, String> {
    let ratio: Ratio = ratio.parse().map_err(|e: hybridlm::Error| e.to_string())?;
    let schedule = ScheduleConfig {
        total_steps,
        ratio,
        ..ScheduleConfig::small()
    };
    schedule.validate().map_err(|e| e.to_string())?;
    let optim = OptimConfig::small();
    let points = points.clamp(2, 1000);
    let mut steps: Vec<u64> = (0..points)
        .map(|i| i as u64 * total_steps / (points as u64 - 1))
        .collect();
    steps.dedup();
    let err = |e: hybridlm::Error| e.to_string();
    let mut c = Curves {
        total_steps,
        warmup_steps: optim.warmup_steps(total_steps),
        steps: Vec::new(),
        mask_probability: Vec::new(),
        batch_tokens: Vec::new(),
        seq_len: Vec::new(),
        learning_rate: Vec::new(),
        causal_sequences: Vec::new(),
        masked_sequences: Vec::new(),
    };
    for s in steps {
        let seq = schedule.sequence_length(s).map_err(err)?;
        let budget = schedule.batch_token_budget(s).map_err(err)?;
        let n = (budget / seq as u64) as usize;
        let causal = ratio.causal_count(n);
        c.mask_probability
            .push(schedule.mask_probability(s).map_err(err)?);
        c.learning_rate
            .push(optim.learning_rate(s, total_steps).map_err(err)?);
        c.seq_len.push(seq);
        c.batch_tokens.push(budget);
        c.causal_sequences.push(causal);
        c.masked_sequences.push(n - causal);
        c.steps.push(s);
    }
    Ok(c)
}

#[wasm_bindgen]
pub fn schedule_curves(total_steps: u64, ratio: &str, points: usize) -> Result<String, JsValue> {
    js(curves(total_steps, ratio, points)
        .map(|c| serde_json::to_string(&c).expect("curves serialize")))
}

#[derive(Debug, Serialize)]
pub struct MaskedView {
    pub vocab_size: usize,
    /// Token strings of the framed text, BOS first and EOS last.
    pub tokens: Vec<String>,
    /// What the model sees after corruption.
    pub inputs: Vec<String>,
    /// `targets[k]` is trained at output `k` and equals `tokens[k + 1]`.
    pub targets: Vec<Option<String>>,
    pub masked: usize,
}

fn token_text(vocab: &Vocab, id: u32) -> String {
    let sp = vocab.specials();
    match id {
        _ if id == sp.bos => "[BOS]".into(),
        _ if id == sp.eos => "[EOS]".into(),
        _ if id == sp.mask => "[MASK]".into(),
        _ if id == sp.pad => "[PAD]".into(),
        _ => {
            let bytes = vocab.token_bytes(id).unwrap_or_default();
            match std::str::from_utf8(bytes) {
                Ok(s) => s.to_string(),
                Err(_) => bytes.iter().map(|b| format!("<{b:02X}>")).collect(),
            }
        }
    }
}

/// Learn a small vocabulary from `text` itself, frame it and apply masked
/// next-token corruption with probability `p`.
pub fn masked_view(text: &str, merges: usize, p: f64, seed: u64) -> Result<MaskedView, String> {
    if text.trim().is_empty() {
        return Err("enter some text".into());
    }
    if text.len() > MAX_TEXT_BYTES {
        return Err(format!("text is limited to {MAX_TEXT_BYTES} bytes"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err("masking probability must be in (0, 1)".into());
    }
    let base = DEFAULT_SPECIALS.len() + 256;
    let vocab = train_bpe(&[text], base + merges.min(512), &DEFAULT_SPECIALS)
        .or_else(|_| train_bpe(&[text], base, &DEFAULT_SPECIALS))
        .map_err(|e| e.to_string())?;
    let sp = vocab.specials();
    let mut window = vec![sp.bos];
    window.extend(vocab.encode(text));
    window.push(sp.eos);
    let ctx = MaskingContext::new(&vocab, CorruptionSplit::default());
    let mut rng = ModelRng::seed_from_u64(seed);
    let seq = apply_mntp_masking(&window, p, &mut rng, &ctx).map_err(|e| e.to_string())?;
    Ok(MaskedView {
        vocab_size: vocab.vocab_size(),
        tokens: window.iter().map(|&id| token_text(&vocab, id)).collect(),
        inputs: seq
            .inputs
            .iter()
            .map(|&id| token_text(&vocab, id))
            .collect(),
        targets: seq
            .targets
            .iter()
            .map(|t| t.map(|id| token_text(&vocab, id)))
            .collect(),
        masked: seq.targets.iter().filter(|t| t.is_some()).count(),
    })
}

#[wasm_bindgen]
pub fn mask_text(text: &str, merges: usize, p: f64, seed: u64) -> Result<String, JsValue> {
    js(masked_view(text, merges, p, seed)
        .map(|v| serde_json::to_string(&v).expect("view serializes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_grid_has_a_bidirectional_block() {
        let g = mask_grid("prefix", 5, 2).unwrap();
        assert!(g.visible[0][1]);
        assert!(!g.visible[2][3]);
        assert!(g.visible[4][0]);
        assert!(mask_grid("prefix", 5, 0).is_err());
        assert!(mask_grid("diagonal", 5, 0).is_err());
        assert!(mask_grid("causal", 0, 0).is_err());
    }

    #[test]
    fn curves_hit_the_recipe_endpoints() {
        let c = curves(7812, "1:15", 9).unwrap();
        assert_eq!(c.warmup_steps, 125);
        assert_eq!(c.steps.first(), Some(&0));
        assert_eq!(c.steps.last(), Some(&7812));
        assert_eq!(c.mask_probability[0], 0.30);
        assert_eq!(*c.mask_probability.last().unwrap(), 0.15);
        assert_eq!(c.batch_tokens[0], 1 << 20);
        assert_eq!(*c.batch_tokens.last().unwrap(), 1 << 22);
        assert_eq!(*c.seq_len.last().unwrap(), 512);
        assert_eq!(
            c.causal_sequences[0] + c.masked_sequences[0],
            (1 << 20) / 128
        );
        assert!(curves(10, "1:", 4).is_err());
    }

    #[test]
    fn masked_targets_are_the_next_token() {
        let v = masked_view("the cat sat on the mat, the cat sat.", 8, 0.4, 3).unwrap();
        assert!(v.masked > 0);
        assert_eq!(v.tokens.len(), v.inputs.len());
        for (k, t) in v.targets.iter().enumerate() {
            if let Some(t) = t {
                assert_eq!(t, &v.tokens[k + 1]);
            }
        }
        assert!(masked_view("  ", 8, 0.4, 3).is_err());
        let vocab = train_bpe(&["é"], DEFAULT_SPECIALS.len() + 256, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(token_text(&vocab, vocab.encode("é")[0]), "<C3>");
        assert!(masked_view("abc", 8, 1.0, 3).is_err());
    }
}
