//! The training step loop, its state and its on-disk artifacts.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_hybrid_batch, MaskingContext, Objective, PackedDataset, ScheduleConfig, Sequence,
    WindowSampler,
};
use crate::error::{Error, Result};
use crate::model::forward::ModelRng;
use crate::model::{backward, forward_with_cache, AttentionMaskSpec, ModelConfig, ModelParameters};

pub use checkpoint::{checkpoint_dir_name, latest_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{cross_entropy_with_grad, hybrid_loss, sequence_cross_entropy, LossBreakdown};
pub use optim::{clip_gradients, lamb_step, lamb_update_tensor, LambHyper, LambState, OptimConfig};

fn default_checkpoint_every() -> u64 {
    500
}

/// Everything that determines a training run apart from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.optim.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if self.schedule.seq_len_end > self.model.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {} exceeds the model's max_seq_len {}",
                self.schedule.seq_len_end, self.model.max_seq_len
            )));
        }
        if self.schedule.batch_tokens_start < self.schedule.seq_len_end as u64 {
            return Err(Error::config(format!(
                "batch_tokens_start {} cannot hold one sequence of {} tokens",
                self.schedule.batch_tokens_start, self.schedule.seq_len_end
            )));
        }
        Ok(())
    }
}

/// Cumulative per-mode loss sums since step 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub causal_sum: f64,
    pub causal_positions: u64,
    pub masked_sum: f64,
    pub masked_positions: u64,
    pub last_total: Option<f64>,
}

impl LossStats {
    fn record(&mut self, l: &LossBreakdown) {
        if let Some(c) = l.causal {
            self.causal_sum += c * l.causal_positions as f64;
            self.causal_positions += l.causal_positions as u64;
        }
        if let Some(m) = l.masked {
            self.masked_sum += m * l.masked_positions as f64;
            self.masked_positions += l.masked_positions as u64;
        }
        self.last_total = Some(l.total);
    }

    pub fn mean_causal(&self) -> Option<f64> {
        (self.causal_positions > 0).then(|| self.causal_sum / self.causal_positions as f64)
    }

    pub fn mean_masked(&self) -> Option<f64> {
        (self.masked_positions > 0).then(|| self.masked_sum / self.masked_positions as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParameters<f32>,
    pub optimizer: LambState<f32>,
    pub step: u64,
    pub rng: ModelRng,
    pub sampler: WindowSampler,
    pub stats: LossStats,
}

impl TrainState {
    /// Fresh parameters and optimizer state, all drawn from the schedule seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.schedule.seed;
        let mut rng = ModelRng::seed_from_u64(seed);
        let params = ModelParameters::init(&config.model, &mut rng)?;
        let optimizer = LambState::new(&params);
        Ok(TrainState {
            config,
            params,
            optimizer,
            step: 0,
            rng,
            sampler: WindowSampler::new(seed),
            stats: LossStats::default(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.schedule.total_steps
    }
}

/// One record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub batch_tokens: u64,
    pub mask_p: f64,
    pub seq_len: usize,
    pub loss_total: f64,
    pub loss_causal: Option<f64>,
    pub loss_masked: Option<f64>,
    pub grad_norm: f64,
}

/// Sequences per gradient-accumulation chunk. Fixed so that the reduction
/// order, and therefore every bit of the result, is independent of the
/// thread count.
const CHUNK: usize = 4;

struct ChunkResult {
    causal: (f64, usize),
    masked: (f64, usize),
    grads: ModelParameters<f32>,
}

fn run_chunk(
    params: &ModelParameters<f32>,
    seqs: &[(&Sequence, u64)],
    pad: u32,
    scale: f64,
) -> Result<ChunkResult> {
    let mut out = ChunkResult {
        causal: (0.0, 0),
        masked: (0.0, 0),
        grads: params.zeros_like(),
    };
    let dropout = params.config.dropout_p > 0.0 || params.config.attention_dropout_p > 0.0;
    for &(seq, seed) in seqs {
        let (inputs, targets, mask) = trim_padding(seq, pad);
        let mut rng = ModelRng::seed_from_u64(seed);
        let (logits, cache) = forward_with_cache(
            params,
            inputs,
            &mask,
            Some(pad),
            dropout.then_some(&mut rng),
        )?;
        let (sum, dlogits): (f64, Array2<f32>) = cross_entropy_with_grad(&logits, targets, scale);
        let n = seq.num_loss_positions();
        let acc = match seq.objective {
            Objective::Causal => &mut out.causal,
            Objective::Masked => &mut out.masked,
        };
        acc.0 += sum;
        acc.1 += n;
        backward(params, &cache, &mask, Some(pad), &dlogits, &mut out.grads)?;
    }
    Ok(out)
}

/// Drop the PAD suffix. PAD keys are invisible and PAD rows carry no
/// targets, so the loss and gradients of the real positions are unchanged.
fn trim_padding(seq: &Sequence, pad: u32) -> (&[u32], &[Option<u32>], AttentionMaskSpec) {
    let real = seq
        .inputs
        .iter()
        .rposition(|&t| t != pad)
        .map_or(0, |i| i + 1);
    let supervised = seq
        .targets
        .iter()
        .rposition(Option::is_some)
        .map_or(0, |i| i + 1);
    let len = real.max(supervised).max(1);
    let mask = AttentionMaskSpec {
        seq_len: len,
        prefix_len: seq.mask.prefix_len.min(len),
        ..seq.mask
    };
    (&seq.inputs[..len], &seq.targets[..len], mask)
}

#[cfg(feature = "parallel")]
fn run_chunks(
    params: &ModelParameters<f32>,
    work: &[(&Sequence, u64)],
    pad: u32,
    scale: f64,
) -> Vec<Result<ChunkResult>> {
    use rayon::prelude::*;
    work.par_chunks(CHUNK)
        .map(|c| run_chunk(params, c, pad, scale))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_chunks(
    params: &ModelParameters<f32>,
    work: &[(&Sequence, u64)],
    pad: u32,
    scale: f64,
) -> Vec<Result<ChunkResult>> {
    work.chunks(CHUNK)
        .map(|c| run_chunk(params, c, pad, scale))
        .collect()
}

/// Advance `state` by one optimizer step.
pub fn train_step(
    state: &mut TrainState,
    dataset: &mut PackedDataset,
    ctx: &MaskingContext,
) -> Result<StepMetrics> {
    if state.is_finished() {
        return Err(Error::input(format!(
            "training already reached total_steps {}",
            state.config.schedule.total_steps
        )));
    }
    if ctx.vocab_size as usize != state.config.model.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} tokens but the model expects {}",
            ctx.vocab_size, state.config.model.vocab_size
        )));
    }
    let t = state.step + 1;
    let sched = &state.config.schedule;
    let lr = state.config.optim.learning_rate(t, sched.total_steps)?;
    let mask_p = sched.mask_probability(t)?;
    let batch = build_hybrid_batch(dataset, &mut state.sampler, t, sched, ctx, &mut state.rng)?;
    let n_positions = batch.num_loss_positions();
    if n_positions == 0 {
        return Err(Error::input("batch has no supervised positions"));
    }
    let work: Vec<(&Sequence, u64)> = batch
        .sequences
        .iter()
        .map(|s| (s, state.rng.next_u64()))
        .collect();

    let scale = 1.0 / n_positions as f64;
    let mut grads = state.params.zeros_like();
    let mut causal = (0.0, 0);
    let mut masked = (0.0, 0);
    for r in run_chunks(&state.params, &work, ctx.specials.pad, scale) {
        let r = r?;
        grads.add_assign(&r.grads);
        causal = (causal.0 + r.causal.0, causal.1 + r.causal.1);
        masked = (masked.0 + r.masked.0, masked.1 + r.masked.1);
    }
    let loss = LossBreakdown::from_sums(causal, masked)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is {} at step {t}",
            loss.total
        )));
    }
    let grad_norm = clip_gradients(&mut grads, state.config.optim.gradient_clipping)?;
    let hyper = LambHyper::from(&state.config.optim);
    let mut params = state.params.clone();
    let mut optimizer = state.optimizer.clone();
    lamb_step(&mut params, &grads, &mut optimizer, &hyper, lr)?;
    if !params.all_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at step {t}"
        )));
    }
    state.params = params;
    state.optimizer = optimizer;
    state.step = t;
    state.stats.record(&loss);
    Ok(StepMetrics {
        step: t,
        lr,
        batch_tokens: (batch.sequences.len() * batch.seq_len) as u64,
        mask_p,
        seq_len: batch.seq_len,
        loss_total: loss.total,
        loss_causal: loss.causal,
        loss_masked: loss.masked,
        grad_norm,
    })
}

/// Drives [`train_step`], writing metrics and checkpoints when an output
/// directory is attached.
pub struct Trainer {
    pub state: TrainState,
    dataset: PackedDataset,
    ctx: MaskingContext,
    out_dir: Option<PathBuf>,
    metrics: Option<File>,
}

impl Trainer {
    pub fn new(state: TrainState, dataset: PackedDataset, ctx: MaskingContext) -> Self {
        Trainer {
            state,
            dataset,
            ctx,
            out_dir: None,
            metrics: None,
        }
    }

    /// Attach a run directory. Existing metrics records past the current
    /// step (left over from a run this one resumes) are dropped.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("metrics.jsonl");
        truncate_metrics(&path, self.state.step)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.metrics = Some(file);
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn dataset(&self) -> &PackedDataset {
        &self.dataset
    }

    /// Run up to `n_steps` steps, stopping early at `total_steps`. A
    /// checkpoint is written every `checkpoint_every` steps and after the
    /// last step taken.
    pub fn run(&mut self, n_steps: u64) -> Result<Vec<StepMetrics>> {
        self.run_with(n_steps, |_| {})
    }

    /// [`Trainer::run`], calling `on_step` after each step is logged.
    pub fn run_with(
        &mut self,
        n_steps: u64,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        let mut last_saved = None;
        for _ in 0..n_steps {
            if self.state.is_finished() {
                break;
            }
            let m = train_step(&mut self.state, &mut self.dataset, &self.ctx)?;
            if let Some(f) = &mut self.metrics {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
            }
            if self.state.step % self.state.config.checkpoint_every == 0 {
                self.checkpoint()?;
                last_saved = Some(self.state.step);
            }
            on_step(&m);
            log.push(m);
        }
        if !log.is_empty() && last_saved != Some(self.state.step) {
            self.checkpoint()?;
        }
        if let Some(f) = &mut self.metrics {
            f.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(log)
    }

    /// Run until `total_steps`.
    pub fn run_to_end(&mut self) -> Result<Vec<StepMetrics>> {
        let remaining = self.state.config.schedule.total_steps - self.state.step;
        self.run(remaining)
    }

    fn checkpoint(&self) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            Some(dir) => save_checkpoint(dir, &self.state).map(Some),
            None => Ok(None),
        }
    }
}

fn truncate_metrics(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    let mut dropped = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line)
            .map_err(|e| Error::format(path.display().to_string(), i + 1, e.to_string()))?;
        if m.step <= keep_through {
            kept.push_str(&line);
            kept.push('\n');
        } else {
            dropped = true;
        }
    }
    if dropped {
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{apply_mntp_masking, causal_sequence, CorruptionSplit, Ratio};
    use crate::model::AttentionKind;
    use crate::tokenizer::{train_bpe, DEFAULT_SPECIALS};

    pub(crate) fn toy_config(vocab_size: usize, steps: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                n_layers: 1,
                hidden_size: 16,
                ff_intermediate_size: 24,
                n_heads: 2,
                vocab_size,
                dropout_p: 0.1,
                attention_dropout_p: 0.1,
                max_seq_len: 16,
                tie_embeddings: true,
                rope_base: 10_000.0,
            },
            schedule: ScheduleConfig {
                total_steps: steps,
                batch_tokens_start: 64,
                batch_tokens_end: 128,
                mask_p_start: 0.3,
                mask_p_end: 0.15,
                seq_len_start: 8,
                seq_len_end: 16,
                seq_len_switch_fraction: 0.5,
                ratio: Ratio::new(1, 1).unwrap(),
                seed: 9,
                corruption: CorruptionSplit::default(),
            },
            optim: OptimConfig {
                initial_learning_rate: 0.01,
                final_learning_rate: 0.001,
                ..OptimConfig::small()
            },
            checkpoint_every: 3,
        }
    }

    fn setup(steps: u64) -> (TrainState, PackedDataset, MaskingContext) {
        let texts = [
            "the cat sat on the mat",
            "a dog ran in the park",
            "the cat and the dog",
        ];
        let vocab = train_bpe(&texts, 270, &DEFAULT_SPECIALS).unwrap();
        let data = PackedDataset::from_texts(&texts, &vocab, 8);
        let ctx = MaskingContext::new(&vocab, CorruptionSplit::default());
        (TrainState::new(toy_config(270, steps)).unwrap(), data, ctx)
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let (s, d, ctx) = setup(6);
        let mut a = Trainer::new(s.clone(), d.clone(), ctx);
        let mut b = Trainer::new(s, d, ctx);
        let la = a.run(6).unwrap();
        let lb = b.run(6).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.state, b.state);
        assert!(la
            .iter()
            .all(|m| m.loss_total.is_finite() && m.grad_norm.is_finite()));
        assert_eq!(la[0].seq_len, 8);
        assert_eq!(la[5].seq_len, 16);
        assert!(a.run(5).unwrap().is_empty());
    }

    #[test]
    fn zero_steps_leave_state_unchanged() {
        let (s, d, ctx) = setup(4);
        let mut t = Trainer::new(s.clone(), d, ctx);
        assert!(t.run(0).unwrap().is_empty());
        assert_eq!(t.state, s);
    }

    #[test]
    fn split_run_equals_straight_run() {
        let (s, d, ctx) = setup(6);
        let mut straight = Trainer::new(s.clone(), d.clone(), ctx);
        straight.run(6).unwrap();
        let mut first = Trainer::new(s, d.clone(), ctx);
        first.run(2).unwrap();
        let mut second = Trainer::new(first.state.clone(), d, ctx);
        second.run(4).unwrap();
        assert_eq!(second.state, straight.state);
    }

    #[test]
    fn batches_route_objectives_to_masks() {
        let (mut s, mut d, ctx) = setup(4);
        let t = 1;
        let batch = build_hybrid_batch(
            &mut d,
            &mut s.sampler,
            t,
            &s.config.schedule,
            &ctx,
            &mut s.rng,
        )
        .unwrap();
        assert!(batch.count(Objective::Causal) > 0 && batch.count(Objective::Masked) > 0);
        for seq in &batch.sequences {
            let expected = match seq.objective {
                Objective::Causal => AttentionKind::Causal,
                Objective::Masked => AttentionKind::Bidirectional,
            };
            assert_eq!(seq.mask.kind, expected);
        }
    }

    #[test]
    fn trimming_padding_keeps_loss_and_gradients() {
        let mut config = toy_config(270, 4).model;
        config.dropout_p = 0.0;
        config.attention_dropout_p = 0.0;
        let params = ModelParameters::init(&config, &mut ModelRng::seed_from_u64(5)).unwrap();
        let (_, _, ctx) = setup(4);
        let window = [0, 40, 41, 42, 43, 1, 3, 3, 3, 3, 3, 3];
        let causal = causal_sequence(&window, 3);
        let masked =
            apply_mntp_masking(&window, 0.5, &mut ModelRng::seed_from_u64(2), &ctx).unwrap();
        for seq in [causal, masked] {
            assert_eq!(trim_padding(&seq, 3).0.len(), 6);
            let trimmed = run_chunk(&params, &[(&seq, 0)], 3, 1.0).unwrap();
            let (logits, cache) =
                forward_with_cache(&params, &seq.inputs, &seq.mask, Some(3), None).unwrap();
            let (sum, d): (f64, Array2<f32>) = cross_entropy_with_grad(&logits, &seq.targets, 1.0);
            let mut full = params.zeros_like();
            backward(&params, &cache, &seq.mask, Some(3), &d, &mut full).unwrap();
            let got = trimmed.causal.0 + trimmed.masked.0;
            assert!((got - sum).abs() <= 1e-9 * sum.abs());
            for (a, b) in trimmed.grads.tensors().iter().zip(full.tensors()) {
                for (x, y) in a.3.iter().zip(b.3) {
                    assert!(
                        (x - y).abs() <= 1e-6 + 1e-4 * y.abs(),
                        "{}: {x} vs {y}",
                        a.0
                    );
                }
            }
        }
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let (s, mut d, mut ctx) = setup(4);
        ctx.vocab_size += 1;
        let mut s = s;
        assert!(matches!(
            train_step(&mut s, &mut d, &ctx),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn metrics_truncation_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let (s, d, ctx) = setup(6);
        let mut t = Trainer::new(s, d.clone(), ctx)
            .with_output(dir.path())
            .unwrap();
        t.run(6).unwrap();
        let ckpt = load_checkpoint(&dir.path().join(checkpoint_dir_name(3))).unwrap();
        let mut r = Trainer::new(ckpt, d, ctx).with_output(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        r.run(3).unwrap();
        let text2 = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text2.lines().count(), 6);
        assert_eq!(r.state, t.state);
    }
}
