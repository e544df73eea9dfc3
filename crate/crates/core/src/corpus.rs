//! Corpus ingestion, schedules and hybrid causal/masked batch construction.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::mask::{AttentionKind, AttentionMaskSpec};
use crate::tokenizer::{Specials, Vocab};

/// Causal-to-masked sequence ratio, written `"c:m"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub causal: u32,
    pub masked: u32,
}

impl Ratio {
    pub fn new(causal: u32, masked: u32) -> Result<Self> {
        if causal == 0 && masked == 0 {
            return Err(Error::config("ratio 0:0 selects no objective"));
        }
        Ok(Ratio { causal, masked })
    }

    /// Number of causal sequences in a batch of `n_seq`: ceil(n * c / (c + m)).
    pub fn causal_count(&self, n_seq: usize) -> usize {
        let total = (self.causal + self.masked) as u64;
        ((n_seq as u64 * self.causal as u64).div_ceil(total)) as usize
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(format!(
                "invalid ratio {s:?}; expected \"<causal>:<masked>\""
            ))
        };
        let (c, m) = s.split_once(':').ok_or_else(bad)?;
        let c = c.trim().parse().map_err(|_| bad())?;
        let m = m.trim().parse().map_err(|_| bad())?;
        Ratio::new(c, m)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        format!("{}:{}", r.causal, r.masked)
    }
}

/// How a position selected for masking is corrupted in the input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        CorruptionSplit {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub batch_tokens_start: u64,
    pub batch_tokens_end: u64,
    pub mask_p_start: f64,
    pub mask_p_end: f64,
    pub seq_len_start: usize,
    pub seq_len_end: usize,
    pub seq_len_switch_fraction: f64,
    pub ratio: Ratio,
    pub seed: u64,
    #[serde(default)]
    pub corruption: CorruptionSplit,
}

impl ScheduleConfig {
    /// The small-model recipe: 7,812 steps, 1M to 4M token batches,
    /// masking 30% to 15%, sequences 128 then 512, ratio 1:15.
    pub fn small() -> Self {
        ScheduleConfig {
            total_steps: 7_812,
            batch_tokens_start: 1 << 20,
            batch_tokens_end: 1 << 22,
            mask_p_start: 0.30,
            mask_p_end: 0.15,
            seq_len_start: 128,
            seq_len_end: 512,
            seq_len_switch_fraction: 0.9,
            ratio: Ratio {
                causal: 1,
                masked: 15,
            },
            seed: 0,
            corruption: CorruptionSplit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return cfg("total_steps must be positive".into());
        }
        if self.batch_tokens_start == 0 || self.batch_tokens_start > self.batch_tokens_end {
            return cfg(format!(
                "batch tokens must satisfy 0 < start <= end, got {} -> {}",
                self.batch_tokens_start, self.batch_tokens_end
            ));
        }
        if self.seq_len_start < 2 || self.seq_len_start > self.seq_len_end {
            return cfg(format!(
                "sequence lengths must satisfy 2 <= start <= end, got {} -> {}",
                self.seq_len_start, self.seq_len_end
            ));
        }
        for p in [self.mask_p_start, self.mask_p_end] {
            if !(p > 0.0 && p < 1.0) {
                return cfg(format!("mask probability {p} outside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.seq_len_switch_fraction) {
            return cfg(format!(
                "seq_len_switch_fraction {} outside [0, 1]",
                self.seq_len_switch_fraction
            ));
        }
        let c = self.corruption;
        if [c.mask, c.random, c.keep]
            .iter()
            .any(|&x| !(0.0..=1.0).contains(&x))
            || ((c.mask + c.random + c.keep) - 1.0).abs() > 1e-9
        {
            return cfg(format!(
                "corruption split {c:?} must be non-negative and sum to 1"
            ));
        }
        Ratio::new(self.ratio.causal, self.ratio.masked)?;
        Ok(())
    }

    fn check_step(&self, step: u64) -> Result<()> {
        if step > self.total_steps {
            return Err(Error::input(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear interpolation from `mask_p_start` to `mask_p_end`.
    pub fn mask_probability(&self, step: u64) -> Result<f64> {
        self.check_step(step)?;
        let t = step as f64 / self.total_steps as f64;
        Ok(self.mask_p_start + (self.mask_p_end - self.mask_p_start) * t)
    }

    /// Step change from the initial to the final length at the switch fraction.
    pub fn sequence_length(&self, step: u64) -> Result<usize> {
        self.check_step(step)?;
        let boundary = self.seq_len_switch_fraction * self.total_steps as f64;
        Ok(if (step as f64) < boundary {
            self.seq_len_start
        } else {
            self.seq_len_end
        })
    }

    /// Linearly growing token budget, floored to a multiple of the current
    /// sequence length.
    pub fn batch_token_budget(&self, step: u64) -> Result<u64> {
        let seq_len = self.sequence_length(step)? as u64;
        let span = (self.batch_tokens_end - self.batch_tokens_start) as u128;
        let raw = self.batch_tokens_start as u128 + span * step as u128 / self.total_steps as u128;
        Ok((raw as u64 / seq_len) * seq_len)
    }
}

/// Framed documents plus the window index at the current sequence length.
#[derive(Clone, Debug)]
pub struct PackedDataset {
    docs: Vec<Vec<u32>>,
    pad: u32,
    seq_len: usize,
    index: Vec<(u32, u32)>,
}

impl PackedDataset {
    /// Build from already-framed documents (`BOS ... EOS`).
    pub fn from_documents(docs: Vec<Vec<u32>>, pad: u32, seq_len: usize) -> Self {
        let mut ds = PackedDataset {
            docs,
            pad,
            seq_len: 0,
            index: Vec::new(),
        };
        ds.set_seq_len(seq_len);
        ds
    }

    /// Tokenize and frame raw document texts.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocab, seq_len: usize) -> Self {
        let sp = vocab.specials();
        let docs = texts
            .iter()
            .map(|t| frame(vocab.encode(t.as_ref()), sp))
            .collect();
        Self::from_documents(docs, sp.pad, seq_len)
    }

    /// Read plain-text (blank-line separated documents) or JSON-lines files
    /// (`.jsonl`/`.json`, one `{"text": ...}` object per line).
    pub fn ingest<P: AsRef<Path>>(paths: &[P], vocab: &Vocab, seq_len: usize) -> Result<Self> {
        let mut texts = Vec::new();
        for p in paths {
            texts.extend(read_documents(p.as_ref())?);
        }
        Ok(Self::from_texts(&texts, vocab, seq_len))
    }

    /// Rebuild the window index; windows never cross a document boundary.
    /// Trailing chunks with fewer than two real tokens are dropped.
    pub fn set_seq_len(&mut self, seq_len: usize) {
        if seq_len == self.seq_len {
            return;
        }
        self.seq_len = seq_len;
        self.index.clear();
        if seq_len == 0 {
            return;
        }
        for (d, doc) in self.docs.iter().enumerate() {
            let mut off = 0;
            while off < doc.len() {
                if doc.len() - off >= 2 {
                    self.index.push((d as u32, off as u32));
                }
                off += seq_len;
            }
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_windows(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn documents(&self) -> &[Vec<u32>] {
        &self.docs
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Window `i`, PAD-filled to exactly `seq_len` ids.
    pub fn window(&self, i: usize) -> Vec<u32> {
        let (d, off) = self.index[i];
        let doc = &self.docs[d as usize];
        let off = off as usize;
        let end = (off + self.seq_len).min(doc.len());
        let mut w = doc[off..end].to_vec();
        w.resize(self.seq_len, self.pad);
        w
    }
}

fn frame(mut ids: Vec<u32>, sp: Specials) -> Vec<u32> {
    ids.insert(0, sp.bos);
    ids.push(sp.eos);
    ids
}

pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    if is_jsonl {
        parse_jsonl_documents(&text, &path.display().to_string())
    } else {
        Ok(split_documents(&text))
    }
}

/// Split on blank lines; each block becomes one document.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

pub fn parse_jsonl_documents(text: &str, source_name: &str) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::format(source_name, i + 1, e.to_string()))?;
        let t = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::format(source_name, i + 1, "missing string field `text`"))?;
        docs.push(t.to_string());
    }
    Ok(docs)
}

/// Which objective a sequence of a hybrid batch is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Causal,
    Masked,
}

impl Objective {
    /// Causal sequences use the causal mask, masked sequences see everything.
    pub fn attention(self) -> AttentionKind {
        match self {
            Objective::Causal => AttentionKind::Causal,
            Objective::Masked => AttentionKind::Bidirectional,
        }
    }
}

/// One row of a training batch. `targets[k]` is the token the output at
/// position `k` must predict, `None` where no loss is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<u32>,
    pub targets: Vec<Option<u32>>,
    pub objective: Objective,
    pub mask: AttentionMaskSpec,
}

impl Sequence {
    pub fn loss_positions(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    pub fn num_loss_positions(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub sequences: Vec<Sequence>,
    pub seq_len: usize,
}

impl TrainingBatch {
    pub fn num_loss_positions(&self) -> usize {
        self.sequences
            .iter()
            .map(Sequence::num_loss_positions)
            .sum()
    }

    pub fn count(&self, objective: Objective) -> usize {
        self.sequences
            .iter()
            .filter(|s| s.objective == objective)
            .count()
    }
}

/// Next-token targets: every real position whose successor is real.
pub fn causal_sequence(window: &[u32], pad: u32) -> Sequence {
    let n = window.len();
    let mut targets = vec![None; n];
    for k in 0..n.saturating_sub(1) {
        if window[k] != pad && window[k + 1] != pad {
            targets[k] = Some(window[k + 1]);
        }
    }
    Sequence {
        inputs: window.to_vec(),
        targets,
        objective: Objective::Causal,
        mask: AttentionMaskSpec::new(AttentionKind::Causal, n),
    }
}

/// Token-space facts the masking procedure needs.
#[derive(Clone, Copy, Debug)]
pub struct MaskingContext {
    pub specials: Specials,
    pub num_specials: u32,
    pub vocab_size: u32,
    pub split: CorruptionSplit,
}

impl MaskingContext {
    pub fn new(vocab: &Vocab, split: CorruptionSplit) -> Self {
        MaskingContext {
            specials: vocab.specials(),
            num_specials: vocab.num_specials() as u32,
            vocab_size: vocab.vocab_size() as u32,
            split,
        }
    }
}

/// Masked next-token prediction corruption of one window.
///
/// Each position `k >= 1` that is neither BOS nor PAD is selected with
/// probability `p`; if nothing is selected the last eligible position is.
/// A token selected at `k + 1` is supervised at output position `k`.
pub fn apply_mntp_masking<R: Rng + ?Sized>(
    window: &[u32],
    p: f64,
    rng: &mut R,
    ctx: &MaskingContext,
) -> Result<Sequence> {
    let sp = ctx.specials;
    let real = window.iter().filter(|&&t| t != sp.pad).count();
    if real < 2 {
        return Err(Error::input(format!(
            "window has {real} real tokens, need at least 2"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::input(format!("mask probability {p} outside (0, 1)")));
    }
    let eligible: Vec<usize> = (1..window.len())
        .filter(|&k| window[k] != sp.pad && window[k] != sp.bos)
        .collect();
    let mut selected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p)
        .collect();
    if selected.is_empty() {
        match eligible.last() {
            Some(&k) => selected.push(k),
            None => return Err(Error::input("window has no maskable position")),
        }
    }

    let mut inputs = window.to_vec();
    let mut targets = vec![None; window.len()];
    for &k in &selected {
        let u: f64 = rng.random();
        if u < ctx.split.mask {
            inputs[k] = sp.mask;
        } else if u < ctx.split.mask + ctx.split.random {
            inputs[k] = rng.random_range(ctx.num_specials..ctx.vocab_size);
        }
        targets[k - 1] = Some(window[k]);
    }
    Ok(Sequence {
        inputs,
        targets,
        objective: Objective::Masked,
        mask: AttentionMaskSpec::new(AttentionKind::Bidirectional, window.len()),
    })
}

/// Epoch-wise shuffled traversal of the window index. The permutation of an
/// epoch is a pure function of (seed, sequence length, epoch), so only the
/// cursor needs to be persisted.
#[derive(Clone, Debug, Eq, Serialize, Deserialize)]
pub struct WindowSampler {
    pub seed: u64,
    pub seq_len: usize,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    perm: Vec<usize>,
}

/// The cached permutation is derived state and does not take part.
impl PartialEq for WindowSampler {
    fn eq(&self, other: &Self) -> bool {
        (self.seed, self.seq_len, self.epoch, self.cursor)
            == (other.seed, other.seq_len, other.epoch, other.cursor)
    }
}

impl WindowSampler {
    pub fn new(seed: u64) -> Self {
        WindowSampler {
            seed,
            seq_len: 0,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        }
    }

    fn permutation(&self, n: usize) -> Vec<usize> {
        let mix = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((self.seq_len as u64).rotate_left(32))
            .wrapping_add(self.epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm
    }

    pub fn next_indices(&mut self, count: usize, dataset: &PackedDataset) -> Vec<usize> {
        let n = dataset.num_windows();
        if self.seq_len != dataset.seq_len() {
            self.seq_len = dataset.seq_len();
            self.epoch = 0;
            self.cursor = 0;
            self.perm.clear();
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count && n > 0 {
            if self.perm.len() != n {
                self.perm = self.permutation(n);
            }
            if self.cursor >= n {
                self.epoch += 1;
                self.cursor = 0;
                self.perm = self.permutation(n);
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Assemble the batch for `step`: the scheduled number of windows, the
/// causal share tagged first, tags shuffled, masked rows corrupted.
pub fn build_hybrid_batch<R: Rng + ?Sized>(
    dataset: &mut PackedDataset,
    sampler: &mut WindowSampler,
    step: u64,
    cfg: &ScheduleConfig,
    ctx: &MaskingContext,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let seq_len = cfg.sequence_length(step)?;
    let budget = cfg.batch_token_budget(step)?;
    if budget < seq_len as u64 {
        return Err(Error::config(format!(
            "batch budget {budget} smaller than sequence length {seq_len}"
        )));
    }
    dataset.set_seq_len(seq_len);
    if dataset.is_empty() {
        return Err(Error::input("dataset has no trainable windows"));
    }
    let n_seq = (budget / seq_len as u64) as usize;
    let n_causal = cfg.ratio.causal_count(n_seq);
    let mut objectives: Vec<Objective> = (0..n_seq)
        .map(|i| {
            if i < n_causal {
                Objective::Causal
            } else {
                Objective::Masked
            }
        })
        .collect();
    objectives.shuffle(rng);

    let p = cfg.mask_probability(step)?;
    let windows = sampler.next_indices(n_seq, dataset);
    let mut sequences = Vec::with_capacity(n_seq);
    for (obj, wi) in objectives.into_iter().zip(windows) {
        let w = dataset.window(wi);
        sequences.push(match obj {
            Objective::Causal => causal_sequence(&w, ctx.specials.pad),
            Objective::Masked => apply_mntp_masking(&w, p, rng, ctx)?,
        });
    }
    Ok(TrainingBatch { sequences, seq_len })
}
