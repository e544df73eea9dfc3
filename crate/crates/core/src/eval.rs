//! Zero-shot scoring under the bidirectional, causal, prefix and fused
//! attention modes, ranked-choice and cloze evaluation, and the suite driver
//! that turns JSON-lines item files into a report.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, log_softmax_row, AttentionKind, AttentionMaskSpec, ModelParameters};
use crate::tokenizer::Vocab;

pub const DEFAULT_TEMPERATURE_GRID: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Pseudo-log-likelihood, one masked position per forward.
    Bidirectional,
    Causal,
    /// Context bidirectional, continuation causal.
    Prefix,
    /// Causal and masked logits summed before the softmax.
    Fused,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" | "masked" => Ok(EvalMode::Bidirectional),
            "causal" => Ok(EvalMode::Causal),
            "prefix" => Ok(EvalMode::Prefix),
            "fused" => Ok(EvalMode::Fused),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (expected bidirectional, causal, prefix or fused)"
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Bidirectional => "bidirectional",
            EvalMode::Causal => "causal",
            EvalMode::Prefix => "prefix",
            EvalMode::Fused => "fused",
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// The logit rows that predict a sequence's scored tokens. Scores at any
/// temperature are read from the same rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLogits {
    rows: Vec<Vec<f32>>,
    targets: Vec<u32>,
}

impl ScoredLogits {
    pub fn new(rows: Vec<Vec<f32>>, targets: Vec<u32>) -> Result<Self> {
        if rows.len() != targets.len() {
            return Err(Error::input("one logit row is needed per target"));
        }
        Ok(ScoredLogits { rows, targets })
    }

    pub fn num_tokens(&self) -> usize {
        self.targets.len()
    }

    pub fn token_log_probs(&self, temperature: f64) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.targets)
            .map(|(r, &t)| log_softmax_row(r, temperature)[t as usize])
            .collect()
    }

    pub fn log_prob(&self, temperature: f64) -> f64 {
        self.token_log_probs(temperature).iter().sum()
    }
}

fn check_ids(params: &ModelParameters<f32>, ids: &[u32]) -> Result<()> {
    if ids.len() < 2 {
        return Err(Error::input("need BOS plus at least one token to score"));
    }
    if ids.len() > params.config.max_seq_len {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            params.config.max_seq_len
        )));
    }
    Ok(())
}

fn run(params: &ModelParameters<f32>, ids: &[u32], mask: AttentionMaskSpec) -> Result<Array2<f32>> {
    forward(params, ids, &mask, None, None)
}

fn check_from(ids: &[u32], from: usize) -> Result<()> {
    if from == 0 || from >= ids.len() {
        return Err(Error::input(format!(
            "first scored position {from} outside 1..{}",
            ids.len()
        )));
    }
    Ok(())
}

/// Rows `k - 1` of one causal forward, for targets `ids[k]`, `k >= from`.
pub fn causal_logits(
    params: &ModelParameters<f32>,
    ids: &[u32],
    from: usize,
) -> Result<ScoredLogits> {
    check_ids(params, ids)?;
    check_from(ids, from)?;
    let logits = run(
        params,
        ids,
        AttentionMaskSpec::new(AttentionKind::Causal, ids.len()),
    )?;
    let rows = (from..ids.len())
        .map(|k| logits.row(k - 1).to_vec())
        .collect();
    ScoredLogits::new(rows, ids[from..].to_vec())
}

/// Prefix mask over the first `prefix_len` positions; targets `ids[k]`,
/// `k >= prefix_len`.
pub fn prefix_logits(
    params: &ModelParameters<f32>,
    ids: &[u32],
    prefix_len: usize,
) -> Result<ScoredLogits> {
    check_ids(params, ids)?;
    if prefix_len == 0 || prefix_len >= ids.len() {
        return Err(Error::input(format!(
            "prefix_len {prefix_len} outside 1..{}",
            ids.len()
        )));
    }
    let logits = run(
        params,
        ids,
        AttentionMaskSpec::prefix(prefix_len, ids.len()),
    )?;
    let rows = (prefix_len..ids.len())
        .map(|k| logits.row(k - 1).to_vec())
        .collect();
    ScoredLogits::new(rows, ids[prefix_len..].to_vec())
}

/// For each `k >= from`, position `k` replaced by MASK and read at `k - 1`
/// after a bidirectional forward.
pub fn masked_logits(
    params: &ModelParameters<f32>,
    ids: &[u32],
    from: usize,
    mask_id: u32,
) -> Result<ScoredLogits> {
    check_ids(params, ids)?;
    check_from(ids, from)?;
    let spec = AttentionMaskSpec::new(AttentionKind::Bidirectional, ids.len());
    let mut rows = Vec::with_capacity(ids.len() - from);
    for k in from..ids.len() {
        let mut masked = ids.to_vec();
        masked[k] = mask_id;
        rows.push(run(params, &masked, spec)?.row(k - 1).to_vec());
    }
    ScoredLogits::new(rows, ids[from..].to_vec())
}

/// Elementwise sum of the causal and masked rows.
pub fn fused_logits(
    params: &ModelParameters<f32>,
    ids: &[u32],
    from: usize,
    mask_id: u32,
) -> Result<ScoredLogits> {
    let c = causal_logits(params, ids, from)?;
    let m = masked_logits(params, ids, from, mask_id)?;
    let rows = c
        .rows
        .iter()
        .zip(&m.rows)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    ScoredLogits::new(rows, c.targets)
}

pub fn causal_logprob(params: &ModelParameters<f32>, ids: &[u32], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(causal_logits(params, ids, 1)?.log_prob(temperature))
}

pub fn masked_pll(
    params: &ModelParameters<f32>,
    ids: &[u32],
    mask_id: u32,
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(masked_logits(params, ids, 1, mask_id)?.log_prob(temperature))
}

pub fn prefix_logprob(
    params: &ModelParameters<f32>,
    ids: &[u32],
    prefix_len: usize,
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(prefix_logits(params, ids, prefix_len)?.log_prob(temperature))
}

/// Joins a context and a continuation the way the texts would read:
/// a space is inserted unless one side already has whitespace at the seam.
fn continuation(context: &str, text: &str) -> String {
    let seam_has_space = context.is_empty()
        || context.ends_with(char::is_whitespace)
        || text.starts_with(char::is_whitespace);
    if seam_has_space {
        text.to_string()
    } else {
        format!(" {text}")
    }
}

/// A model and vocabulary bound to one scoring mode.
pub struct Scorer<'a> {
    pub params: &'a ModelParameters<f32>,
    pub vocab: &'a Vocab,
    pub mode: EvalMode,
    /// Share of each `text` item treated as unscored context. Defaults to
    /// one half in prefix mode and zero otherwise.
    pub prefix_fraction: Option<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParameters<f32>, vocab: &'a Vocab, mode: EvalMode) -> Result<Self> {
        if vocab.vocab_size() != params.config.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.vocab_size(),
                params.config.vocab_size
            )));
        }
        Ok(Scorer {
            params,
            vocab,
            mode,
            prefix_fraction: None,
        })
    }

    pub fn with_prefix_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "prefix fraction {fraction} outside [0, 1)"
            )));
        }
        self.prefix_fraction = Some(fraction);
        Ok(self)
    }

    fn mask_id(&self) -> u32 {
        self.vocab.specials().mask
    }

    /// `BOS context text EOS` and the index of the first token of `text`.
    pub fn frame(&self, context: Option<&str>, text: &str) -> (Vec<u32>, usize) {
        let sp = self.vocab.specials();
        let mut ids = vec![sp.bos];
        let mut from = 1;
        let body = match context {
            Some(c) if !c.is_empty() => {
                ids.extend(self.vocab.encode(c));
                from = ids.len();
                continuation(c, text)
            }
            _ => text.to_string(),
        };
        ids.extend(self.vocab.encode(&body));
        ids.push(sp.eos);
        (ids, from)
    }

    fn fits(&self, len: usize) -> std::result::Result<(), String> {
        if len > self.params.config.max_seq_len {
            Err(format!(
                "{len} tokens exceed max_seq_len {}",
                self.params.config.max_seq_len
            ))
        } else {
            Ok(())
        }
    }

    /// Rows for the tokens from `from` onward. In prefix mode everything
    /// before `from` is the bidirectional prefix.
    pub fn logits(&self, ids: &[u32], from: usize) -> Result<ScoredLogits> {
        match self.mode {
            EvalMode::Causal => causal_logits(self.params, ids, from),
            EvalMode::Bidirectional => masked_logits(self.params, ids, from, self.mask_id()),
            EvalMode::Prefix => prefix_logits(self.params, ids, from),
            EvalMode::Fused => fused_logits(self.params, ids, from, self.mask_id()),
        }
    }

    fn text_from(&self, len: usize) -> usize {
        let default = if self.mode == EvalMode::Prefix {
            0.5
        } else {
            0.0
        };
        let f = self.prefix_fraction.unwrap_or(default);
        ((len as f64 * f).floor() as usize).clamp(1, len - 1)
    }

    /// Score of `text` (after `context`, when given) at each temperature,
    /// or the reason it cannot be scored. Only the tokens of `text` count.
    fn candidate_scores(
        &self,
        context: Option<&str>,
        text: &str,
        temps: &[f64],
    ) -> Result<std::result::Result<Vec<f64>, String>> {
        let (ids, from) = self.frame(context, text);
        if let Err(reason) = self.fits(ids.len()) {
            return Ok(Err(reason));
        }
        let rows = self.logits(&ids, from)?;
        Ok(Ok(temps.iter().map(|&t| rows.log_prob(t)).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOutcome {
    Ranked { chosen: usize, scores: Vec<f64> },
    Skipped { reason: String },
}

/// Score every candidate and pick the best, ties toward the lower index.
/// An item with any over-long candidate is skipped.
pub fn rank_choices(
    scorer: &Scorer,
    context: Option<&str>,
    candidates: &[String],
    temperature: f64,
) -> Result<RankOutcome> {
    check_temperature(temperature)?;
    Ok(
        match rank_at(scorer, context, candidates, &[temperature])? {
            Ok(per_candidate) => {
                let scores: Vec<f64> = per_candidate.iter().map(|s| s[0]).collect();
                RankOutcome::Ranked {
                    chosen: argmax(&scores),
                    scores,
                }
            }
            Err(reason) => RankOutcome::Skipped { reason },
        },
    )
}

type Scores = std::result::Result<Vec<Vec<f64>>, String>;

fn rank_at(
    scorer: &Scorer,
    context: Option<&str>,
    candidates: &[String],
    temps: &[f64],
) -> Result<Scores> {
    if candidates.is_empty() {
        return Err(Error::input("no candidates to rank"));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.is_empty() {
            return Err(Error::input("empty candidate"));
        }
        match scorer.candidate_scores(context, c, temps)? {
            Ok(s) => out.push(s),
            Err(reason) => return Ok(Err(reason)),
        }
    }
    Ok(Ok(out))
}

/// The grid temperature with the highest accuracy. Ties prefer 1.0, then the
/// lowest temperature.
pub fn select_temperature(grid: &[f64], accuracies: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::input("empty temperature grid"));
    }
    if grid.len() != accuracies.len() {
        return Err(Error::input("one accuracy is needed per grid temperature"));
    }
    for &t in grid {
        check_temperature(t)?;
    }
    let best = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<f64> = grid
        .iter()
        .zip(accuracies)
        .filter(|(_, &a)| a == best)
        .map(|(&t, _)| t)
        .collect();
    Ok(if tied.contains(&1.0) {
        1.0
    } else {
        tied.into_iter().fold(f64::INFINITY, f64::min)
    })
}

/// Ranked accuracy over `items` at every grid temperature, with skipped
/// items counted as incorrect, and the selected temperature.
pub fn calibrate_temperature(
    scorer: &Scorer,
    items: &[EvalItem],
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::input("empty temperature grid"));
    }
    for &t in grid {
        check_temperature(t)?;
    }
    let outcomes = items
        .iter()
        .map(|item| evaluate_item(scorer, item, grid))
        .collect::<Result<Vec<_>>>()?;
    let accuracies = ranked_accuracies(&outcomes, grid.len());
    Ok((select_temperature(grid, &accuracies)?, accuracies))
}

fn ranked_accuracies<'a>(
    outcomes: impl IntoIterator<Item = &'a ItemOutcome>,
    n_temps: usize,
) -> Vec<f64> {
    let mut correct = vec![0usize; n_temps];
    let mut count = 0;
    for o in outcomes {
        match o {
            ItemOutcome::Ranked { correct: c } => {
                count += 1;
                for (acc, &ok) in correct.iter_mut().zip(c) {
                    *acc += ok as usize;
                }
            }
            ItemOutcome::Skipped { ranked: true, .. } => count += 1,
            _ => {}
        }
    }
    correct
        .iter()
        .map(|&c| {
            if count == 0 {
                0.0
            } else {
                c as f64 / count as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClozeResult {
    pub predicted: Vec<u32>,
    pub gold: Vec<u32>,
    pub exact_match: bool,
    pub gold_logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClozeOutcome {
    Scored(ClozeResult),
    Skipped { reason: String },
}

/// Predict the `k` tokens of `answer` after `context`.
///
/// Bidirectional mode appends `k` MASK tokens and reads all predictions from
/// one forward. Causal and prefix modes decode greedily, prefix mode with the
/// whole context visible bidirectionally. Fused mode decodes greedily from
/// the sum of the causal row and the row of a forward with the remaining
/// answer positions masked.
pub fn lambada_cloze(
    scorer: &Scorer,
    context: &str,
    answer: &str,
    temperature: f64,
) -> Result<ClozeOutcome> {
    check_temperature(temperature)?;
    Ok(match cloze_at(scorer, context, answer, &[temperature])? {
        Ok((predicted, gold, lps)) => ClozeOutcome::Scored(ClozeResult {
            exact_match: predicted == gold,
            predicted,
            gold,
            gold_logprob: lps[0],
        }),
        Err(reason) => ClozeOutcome::Skipped { reason },
    })
}

type ClozeScores = std::result::Result<(Vec<u32>, Vec<u32>, Vec<f64>), String>;

fn cloze_at(scorer: &Scorer, context: &str, answer: &str, temps: &[f64]) -> Result<ClozeScores> {
    if answer.trim().is_empty() {
        return Err(Error::input("cloze answer is empty"));
    }
    let sp = scorer.vocab.specials();
    let mut ctx = vec![sp.bos];
    ctx.extend(scorer.vocab.encode(context));
    let gold = scorer.vocab.encode(&continuation(context, answer));
    let k = gold.len();
    if k == 0 {
        return Err(Error::input("cloze answer is empty"));
    }
    let c = ctx.len();
    if let Err(reason) = scorer.fits(c + k) {
        return Ok(Err(reason));
    }
    let params = scorer.params;
    let full: Vec<u32> = ctx.iter().chain(&gold).copied().collect();
    let bidi = |ids: &[u32]| {
        run(
            params,
            ids,
            AttentionMaskSpec::new(AttentionKind::Bidirectional, ids.len()),
        )
    };

    let (predicted, rows) = match scorer.mode {
        EvalMode::Bidirectional => {
            let mut ids = ctx.clone();
            ids.extend(std::iter::repeat_n(sp.mask, k));
            let logits = bidi(&ids)?;
            let rows: Vec<Vec<f32>> = (0..k).map(|i| logits.row(c + i - 1).to_vec()).collect();
            (
                rows.iter().map(|r| argmax(r) as u32).collect(),
                ScoredLogits::new(rows, gold.clone())?,
            )
        }
        EvalMode::Causal | EvalMode::Prefix => {
            let spec = |len: usize| match scorer.mode {
                EvalMode::Causal => AttentionMaskSpec::new(AttentionKind::Causal, len),
                _ => AttentionMaskSpec::prefix(c, len),
            };
            let mut ids = ctx.clone();
            let mut predicted = Vec::with_capacity(k);
            for _ in 0..k {
                let logits = run(params, &ids, spec(ids.len()))?;
                let next = argmax(
                    logits
                        .row(ids.len() - 1)
                        .as_slice()
                        .expect("standard layout"),
                ) as u32;
                predicted.push(next);
                ids.push(next);
            }
            let rows = if scorer.mode == EvalMode::Causal {
                causal_logits(params, &full, c)?
            } else {
                prefix_logits(params, &full, c)?
            };
            (predicted, rows)
        }
        EvalMode::Fused => {
            let row = |filled: &[u32]| -> Result<Vec<f32>> {
                let mut ids = ctx.clone();
                ids.extend_from_slice(filled);
                let pos = ids.len() - 1;
                let causal = run(
                    params,
                    &ids,
                    AttentionMaskSpec::new(AttentionKind::Causal, ids.len()),
                )?;
                ids.extend(std::iter::repeat_n(sp.mask, k - filled.len()));
                let masked = bidi(&ids)?;
                Ok(causal
                    .row(pos)
                    .iter()
                    .zip(masked.row(pos))
                    .map(|(a, b)| a + b)
                    .collect())
            };
            let mut predicted = Vec::with_capacity(k);
            for _ in 0..k {
                let r = row(&predicted)?;
                predicted.push(argmax(&r) as u32);
            }
            let rows = (0..k)
                .map(|i| row(&gold[..i]))
                .collect::<Result<Vec<_>>>()?;
            (predicted, ScoredLogits::new(rows, gold.clone())?)
        }
    };
    let lps = temps.iter().map(|&t| rows.log_prob(t)).collect();
    Ok(Ok((predicted, gold, lps)))
}

/// One line of an evaluation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvalItem {
    /// Minimal pair; `good` should score higher.
    Pair {
        good: String,
        bad: String,
    },
    Choice {
        #[serde(default)]
        context: Option<String>,
        candidates: Vec<String>,
        gold: usize,
    },
    Cloze {
        context: String,
        answer: String,
    },
    /// Two contexts and two targets; each target must score higher after
    /// its own context than after the other one.
    Ewok {
        contexts: [String; 2],
        targets: [String; 2],
    },
    /// Held-out text for validation loss.
    Text {
        text: String,
    },
}

impl EvalItem {
    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            EvalItem::Choice {
                candidates, gold, ..
            } => {
                if candidates.len() < 2 {
                    return Err("choice items need at least two candidates".into());
                }
                if *gold >= candidates.len() {
                    return Err(format!(
                        "gold index {gold} out of range for {} candidates",
                        candidates.len()
                    ));
                }
            }
            EvalItem::Cloze { answer, .. } if answer.trim().is_empty() => {
                return Err("cloze answer is empty".into())
            }
            EvalItem::Text { text } if text.is_empty() => return Err("text is empty".into()),
            _ => {}
        }
        Ok(())
    }

    fn is_ranked(&self) -> bool {
        matches!(
            self,
            EvalItem::Pair { .. } | EvalItem::Choice { .. } | EvalItem::Ewok { .. }
        )
    }
}

/// Parse a JSON-lines evaluation file; blank lines are ignored.
pub fn parse_items(text: &str, source_name: &str) -> Result<Vec<(usize, EvalItem)>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(line)
            .map_err(|e| Error::format(source_name, i + 1, e.to_string()))?;
        item.validate()
            .map_err(|m| Error::format(source_name, i + 1, m))?;
        items.push((i + 1, item));
    }
    Ok(items)
}

/// Per-temperature result of one item.
#[derive(Clone, Debug, PartialEq)]
enum ItemOutcome {
    Ranked { correct: Vec<bool> },
    Cloze { exact: bool, gold_logprob: Vec<f64> },
    Text { nll: Vec<f64>, tokens: usize },
    Skipped { reason: String, ranked: bool },
}

fn evaluate_item(scorer: &Scorer, item: &EvalItem, temps: &[f64]) -> Result<ItemOutcome> {
    let skipped = |reason: String| ItemOutcome::Skipped {
        reason,
        ranked: item.is_ranked(),
    };
    let ranked =
        |context: Option<&str>, candidates: &[String], gold: usize| -> Result<ItemOutcome> {
            Ok(match rank_at(scorer, context, candidates, temps)? {
                Ok(s) => ItemOutcome::Ranked {
                    correct: (0..temps.len())
                        .map(|t| argmax(&s.iter().map(|c| c[t]).collect::<Vec<_>>()) == gold)
                        .collect(),
                },
                Err(r) => skipped(r),
            })
        };
    match item {
        EvalItem::Pair { good, bad } => ranked(None, &[good.clone(), bad.clone()], 0),
        EvalItem::Choice {
            context,
            candidates,
            gold,
        } => ranked(context.as_deref(), candidates, *gold),
        EvalItem::Ewok { contexts, targets } => {
            let mut s = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
            for (ci, c) in contexts.iter().enumerate() {
                for (ti, t) in targets.iter().enumerate() {
                    match scorer.candidate_scores(Some(c), t, temps)? {
                        Ok(v) => s[ci][ti] = v,
                        Err(r) => return Ok(skipped(r)),
                    }
                }
            }
            Ok(ItemOutcome::Ranked {
                correct: (0..temps.len())
                    .map(|t| s[0][0][t] > s[1][0][t] && s[1][1][t] > s[0][1][t])
                    .collect(),
            })
        }
        EvalItem::Cloze { context, answer } => {
            Ok(match cloze_at(scorer, context, answer, temps)? {
                Ok((pred, gold, lps)) => ItemOutcome::Cloze {
                    exact: pred == gold,
                    gold_logprob: lps,
                },
                Err(r) => skipped(r),
            })
        }
        EvalItem::Text { text } => {
            let (ids, _) = scorer.frame(None, text);
            if ids.len() < 3 {
                return Ok(skipped("text too short to score".into()));
            }
            if let Err(r) = scorer.fits(ids.len()) {
                return Ok(skipped(r));
            }
            let rows = scorer.logits(&ids, scorer.text_from(ids.len()))?;
            Ok(ItemOutcome::Text {
                nll: temps.iter().map(|&t| -rows.log_prob(t)).collect(),
                tokens: rows.num_tokens(),
            })
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SkippedItem {
    pub line: usize,
    pub reason: String,
}

/// Counts and sums for one file or the whole suite. Skipped ranked and
/// cloze items count as incorrect.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub items: usize,
    pub skipped: usize,
    pub ranked: usize,
    pub ranked_correct: usize,
    pub accuracy: Option<f64>,
    pub cloze: usize,
    pub cloze_exact: usize,
    pub cloze_skipped: usize,
    pub exact_match: Option<f64>,
    pub cloze_gold_logprob_sum: f64,
    pub mean_gold_logprob: Option<f64>,
    pub text: usize,
    pub text_tokens: usize,
    pub text_nll_sum: f64,
    pub mean_loss: Option<f64>,
}

impl Metrics {
    fn absorb(&mut self, other: &Metrics) {
        self.items += other.items;
        self.skipped += other.skipped;
        self.ranked += other.ranked;
        self.ranked_correct += other.ranked_correct;
        self.cloze += other.cloze;
        self.cloze_exact += other.cloze_exact;
        self.cloze_skipped += other.cloze_skipped;
        self.cloze_gold_logprob_sum += other.cloze_gold_logprob_sum;
        self.text += other.text;
        self.text_tokens += other.text_tokens;
        self.text_nll_sum += other.text_nll_sum;
    }

    fn finish(&mut self) {
        let ratio = |a: f64, b: usize| (b > 0).then(|| a / b as f64);
        self.accuracy = ratio(self.ranked_correct as f64, self.ranked);
        self.exact_match = ratio(self.cloze_exact as f64, self.cloze);
        self.mean_gold_logprob =
            ratio(self.cloze_gold_logprob_sum, self.cloze - self.cloze_skipped);
        self.mean_loss = ratio(self.text_nll_sum, self.text_tokens);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileReport {
    pub file: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub skipped_items: Vec<SkippedItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationPoint {
    pub temperature: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub mode: EvalMode,
    pub temperature: f64,
    pub prefix_fraction: Option<f64>,
    pub calibration: Option<Vec<CalibrationPoint>>,
    pub files: Vec<FileReport>,
    pub overall: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub mode: EvalMode,
    pub temperature: f64,
    /// Pick the temperature from this grid by ranked accuracy.
    pub calibrate: Option<Vec<f64>>,
    pub prefix_fraction: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            mode: EvalMode::Bidirectional,
            temperature: 1.0,
            calibrate: None,
            prefix_fraction: None,
        }
    }
}

/// Evaluate named item lists (usually one per file).
pub fn evaluate_items(
    params: &ModelParameters<f32>,
    vocab: &Vocab,
    files: &[(String, Vec<(usize, EvalItem)>)],
    opts: &SuiteOptions,
) -> Result<Report> {
    check_temperature(opts.temperature)?;
    let mut scorer = Scorer::new(params, vocab, opts.mode)?;
    if let Some(f) = opts.prefix_fraction {
        scorer = scorer.with_prefix_fraction(f)?;
    }
    let temps: Vec<f64> = match &opts.calibrate {
        Some(grid) => {
            if grid.is_empty() {
                return Err(Error::input("empty temperature grid"));
            }
            for &t in grid {
                check_temperature(t)?;
            }
            grid.clone()
        }
        None => vec![opts.temperature],
    };

    let mut outcomes = Vec::with_capacity(files.len());
    for (_, items) in files {
        let per_file = evaluate_all(&scorer, items, &temps)?;
        outcomes.push(per_file);
    }

    let (t_index, calibration) = match &opts.calibrate {
        Some(grid) => {
            let acc = ranked_accuracies(outcomes.iter().flatten(), grid.len());
            let chosen = select_temperature(grid, &acc)?;
            let idx = grid
                .iter()
                .position(|&t| t == chosen)
                .expect("chosen from grid");
            let points = grid
                .iter()
                .zip(acc)
                .map(|(&temperature, accuracy)| CalibrationPoint {
                    temperature,
                    accuracy,
                })
                .collect();
            (idx, Some(points))
        }
        None => (0, None),
    };

    let mut overall = Metrics::default();
    let mut reports = Vec::with_capacity(files.len());
    for ((name, items), outs) in files.iter().zip(outcomes) {
        let mut m = Metrics::default();
        let mut skipped_items = Vec::new();
        for ((line, item), o) in items.iter().zip(outs) {
            m.items += 1;
            match o {
                ItemOutcome::Ranked { correct } => {
                    m.ranked += 1;
                    m.ranked_correct += correct[t_index] as usize;
                }
                ItemOutcome::Cloze {
                    exact,
                    gold_logprob,
                } => {
                    m.cloze += 1;
                    m.cloze_exact += exact as usize;
                    m.cloze_gold_logprob_sum += gold_logprob[t_index];
                }
                ItemOutcome::Text { nll, tokens } => {
                    m.text += 1;
                    m.text_tokens += tokens;
                    m.text_nll_sum += nll[t_index];
                }
                ItemOutcome::Skipped { reason, .. } => {
                    m.skipped += 1;
                    match item {
                        EvalItem::Cloze { .. } => {
                            m.cloze += 1;
                            m.cloze_skipped += 1;
                        }
                        EvalItem::Text { .. } => {}
                        _ => m.ranked += 1,
                    }
                    skipped_items.push(SkippedItem {
                        line: *line,
                        reason,
                    });
                }
            }
        }
        overall.absorb(&m);
        m.finish();
        reports.push(FileReport {
            file: name.clone(),
            metrics: m,
            skipped_items,
        });
    }
    overall.finish();
    Ok(Report {
        mode: opts.mode,
        temperature: temps[t_index],
        prefix_fraction: scorer.prefix_fraction,
        calibration,
        files: reports,
        overall,
    })
}

#[cfg(feature = "parallel")]
fn evaluate_all(
    scorer: &Scorer,
    items: &[(usize, EvalItem)],
    temps: &[f64],
) -> Result<Vec<ItemOutcome>> {
    use rayon::prelude::*;
    items
        .par_iter()
        .map(|(_, item)| evaluate_item(scorer, item, temps))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn evaluate_all(
    scorer: &Scorer,
    items: &[(usize, EvalItem)],
    temps: &[f64],
) -> Result<Vec<ItemOutcome>> {
    items
        .iter()
        .map(|(_, item)| evaluate_item(scorer, item, temps))
        .collect()
}

/// Read each JSON-lines file and evaluate it; files are reported by name.
pub fn evaluate_suite<P: AsRef<Path>>(
    params: &ModelParameters<f32>,
    vocab: &Vocab,
    paths: &[P],
    opts: &SuiteOptions,
) -> Result<Report> {
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let name = p.display().to_string();
        files.push((name.clone(), parse_items(&text, &name)?));
    }
    evaluate_items(params, vocab, &files, opts)
}
