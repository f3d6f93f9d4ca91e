//! Segment-aware token advantages.
//!
//! A response is split into paragraph segments. When the predicted item is
//! wrong, every segment that mentions it has its reward scaled by
//! `1 - w_penalty`; all other segments keep the response reward. Segment
//! rewards are broadcast to their tokens and the whole group's token
//! rewards are normalized together (population mean and std).

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{Catalog, ItemId};
use crate::reward::{
    extract_answer, normalize_title, shape_reward, CandidateSet, RewardWeights, ShapedReward,
};

/// Penalty applied to segments that argue for a wrong prediction.
///
/// Valid weights lie in the open interval (0, 1); `disabled()` (exactly 0)
/// is the ablation that reduces to plain response-level advantages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PenaltyWeight(f64);

impl PenaltyWeight {
    pub fn new(w: f64) -> Result<Self> {
        if w > 0.0 && w < 1.0 {
            Ok(PenaltyWeight(w))
        } else {
            Err(Error::Config(format!(
                "w_penalty must lie in (0, 1), got {w}"
            )))
        }
    }

    pub fn disabled() -> Self {
        PenaltyWeight(0.0)
    }

    /// Accepts the ablation point 0 as well as the open interval.
    pub fn from_config(w: f64) -> Result<Self> {
        if w == 0.0 {
            Ok(Self::disabled())
        } else {
            Self::new(w)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for PenaltyWeight {
    fn default() -> Self {
        PenaltyWeight(0.3)
    }
}

impl TryFrom<f64> for PenaltyWeight {
    type Error = Error;

    fn try_from(w: f64) -> Result<Self> {
        Self::from_config(w)
    }
}

impl From<PenaltyWeight> for f64 {
    fn from(w: PenaltyWeight) -> f64 {
        w.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    /// Byte ranges; contiguous and covering the whole text.
    pub spans: Vec<Range<usize>>,
    /// Set when the input was empty.
    pub degenerate: bool,
}

/// Paragraph segmentation. Runs of blank lines end a segment and belong to
/// it; a separator at the very start of the text joins the first segment.
pub fn segment_response(text: &str) -> Segmentation {
    if text.is_empty() {
        return Segmentation {
            spans: vec![Range::default()],
            degenerate: true,
        };
    }
    let bytes = text.as_bytes();
    let len = bytes.len();
    let is_blank = |b: u8| b == b' ' || b == b'\t' || b == b'\r';
    let mut spans = Vec::new();
    let mut seg_start = 0;
    let mut i = 0;
    while i < len {
        if bytes[i] != b'\n' {
            i += 1;
            continue;
        }
        let mut last_nl = i;
        let mut j = i + 1;
        loop {
            let mut k = j;
            while k < len && is_blank(bytes[k]) {
                k += 1;
            }
            if k < len && bytes[k] == b'\n' {
                last_nl = k;
                j = k + 1;
            } else {
                break;
            }
        }
        if last_nl == i {
            i += 1;
            continue;
        }
        let end = last_nl + 1;
        if end < len && !text[seg_start..i].trim().is_empty() {
            spans.push(seg_start..end);
            seg_start = end;
        }
        i = end;
    }
    spans.push(seg_start..len);
    Segmentation {
        spans,
        degenerate: false,
    }
}

/// Whitespace tokenization; returns byte spans.
pub fn tokenize(text: &str) -> Vec<Range<usize>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(s..text.len());
    }
    tokens
}

/// Candidates whose normalized title occurs in the normalized segment text.
pub fn detect_mentions(segment_text: &str, candidates: &CandidateSet) -> BTreeSet<ItemId> {
    let haystack = normalize_title(segment_text);
    (0..candidates.len())
        .filter(|&s| haystack.contains(candidates.normalized_title(s)))
        .map(|s| candidates.ids()[s].clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text_span: Range<usize>,
    pub token_span: Range<usize>,
    pub mentioned_items: BTreeSet<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedResponse {
    pub segments: Vec<Segment>,
    pub token_count: usize,
    pub predicted: Option<ItemId>,
    pub shaped: ShapedReward,
    pub degenerate: bool,
}

/// Assigns each token to the segment containing its first byte. Token
/// spans must be in bounds, ordered and non-overlapping.
pub fn assign_tokens(
    segment_spans: &[Range<usize>],
    token_spans: &[Range<usize>],
    text_len: usize,
) -> Result<Vec<Range<usize>>> {
    let mut prev_end = 0;
    for (k, t) in token_spans.iter().enumerate() {
        if t.start > t.end || t.end > text_len || t.start < prev_end {
            return Err(Error::Validation(format!(
                "token span {k} ({}..{}) is out of order or out of bounds (text length {text_len})",
                t.start, t.end
            )));
        }
        prev_end = t.end;
    }
    let mut out = Vec::with_capacity(segment_spans.len());
    let mut next = 0;
    for (k, seg) in segment_spans.iter().enumerate() {
        let last = k + 1 == segment_spans.len();
        let begin = next;
        while next < token_spans.len() && (last || token_spans[next].start < seg.end) {
            next += 1;
        }
        out.push(begin..next);
    }
    Ok(out)
}

/// Per-segment rewards: scaled by `1 - w_penalty` when the prediction is
/// wrong and the segment mentions it.
pub fn segment_rewards(
    mentions: &[BTreeSet<ItemId>],
    predicted: Option<&ItemId>,
    gt: &ItemId,
    reward: f64,
    w_penalty: PenaltyWeight,
) -> Vec<f64> {
    mentions
        .iter()
        .map(|m| match predicted {
            Some(p) if p != gt && m.contains(p) => (1.0 - w_penalty.value()) * reward,
            _ => reward,
        })
        .collect()
}

/// Expands segment rewards to tokens.
pub fn map_token_rewards(
    segments: &[Segment],
    seg_rewards: &[f64],
    token_count: usize,
) -> Result<Vec<f64>> {
    if segments.len() != seg_rewards.len() {
        return Err(Error::Invariant(format!(
            "{} segments but {} segment rewards",
            segments.len(),
            seg_rewards.len()
        )));
    }
    let mut out = Vec::with_capacity(token_count);
    for (seg, &r) in segments.iter().zip(seg_rewards) {
        if seg.token_span.start != out.len() {
            return Err(Error::Invariant(format!(
                "token {} is not covered by any segment",
                out.len()
            )));
        }
        out.extend(std::iter::repeat_n(r, seg.token_span.len()));
    }
    if out.len() != token_count {
        return Err(Error::Invariant(format!(
            "segments cover {} of {token_count} tokens",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub token_rewards: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub group_mean: f64,
    pub group_std: f64,
}

/// Normalizes token rewards across the whole group with the population
/// standard deviation. A constant reward vector yields all-zero advantages.
pub fn group_advantages(token_rewards: Vec<Vec<f64>>) -> Result<GroupAdvantages> {
    if token_rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group-relative advantages need at least 2 responses, got {}",
            token_rewards.len()
        )));
    }
    let n: usize = token_rewards.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Validation("group has no tokens".into()));
    }
    let mut all = token_rewards.iter().flatten();
    let first = *all.next().unwrap();
    let constant = all.all(|&x| x == first);

    let mean = token_rewards.iter().flatten().sum::<f64>() / n as f64;
    let var = token_rewards
        .iter()
        .flatten()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n as f64;
    let std = if constant { 0.0 } else { var.sqrt() };
    let advantages = token_rewards
        .iter()
        .map(|r| {
            r.iter()
                .map(|&x| if std > 0.0 { (x - mean) / std } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(GroupAdvantages {
        token_rewards,
        advantages,
        group_mean: mean,
        group_std: std,
    })
}

/// Segments, tokenizes and scores one response. When `token_spans` is
/// `None` the text is tokenized on whitespace.
pub fn analyze_response(
    text: &str,
    token_spans: Option<&[Range<usize>]>,
    candidates: &CandidateSet,
    gt: &ItemId,
    catalog: &Catalog,
    embeddings: &EmbeddingTable,
    weights: &RewardWeights,
) -> Result<SegmentedResponse> {
    let owned;
    let tokens = match token_spans {
        Some(t) => t,
        None => {
            owned = tokenize(text);
            &owned
        }
    };
    let seg = segment_response(text);
    let token_ranges = assign_tokens(&seg.spans, tokens, text.len())?;
    let segments = seg
        .spans
        .iter()
        .zip(token_ranges)
        .map(|(span, token_span)| Segment {
            mentioned_items: detect_mentions(&text[span.clone()], candidates),
            text_span: span.clone(),
            token_span,
        })
        .collect();
    let predicted = extract_answer(text, candidates).item;
    let shaped = shape_reward(predicted.as_ref(), gt, catalog, embeddings, weights)?;
    Ok(SegmentedResponse {
        segments,
        token_count: tokens.len(),
        predicted,
        shaped,
        degenerate: seg.degenerate,
    })
}

/// Segment rewards and token advantages for a group of analyzed responses.
pub fn raae_group(
    responses: &[SegmentedResponse],
    gt: &ItemId,
    w_penalty: PenaltyWeight,
) -> Result<(Vec<Vec<f64>>, GroupAdvantages)> {
    let mut seg_rewards = Vec::with_capacity(responses.len());
    let mut token_rewards = Vec::with_capacity(responses.len());
    for r in responses {
        let mentions: Vec<_> = r
            .segments
            .iter()
            .map(|s| s.mentioned_items.clone())
            .collect();
        let sr = segment_rewards(
            &mentions,
            r.predicted.as_ref(),
            gt,
            r.shaped.total,
            w_penalty,
        );
        token_rewards.push(map_token_rewards(&r.segments, &sr, r.token_count)?);
        seg_rewards.push(sr);
    }
    Ok((seg_rewards, group_advantages(token_rewards)?))
}

/// Standard group-relative estimation: every token of a response carries
/// the response reward, normalized over the group's tokens.
pub fn response_level_advantages(
    rewards: &[f64],
    token_counts: &[usize],
) -> Result<GroupAdvantages> {
    if rewards.len() != token_counts.len() {
        return Err(Error::Invariant(
            "rewards and token counts differ in length".into(),
        ));
    }
    group_advantages(
        rewards
            .iter()
            .zip(token_counts)
            .map(|(&r, &n)| vec![r; n])
            .collect(),
    )
}
