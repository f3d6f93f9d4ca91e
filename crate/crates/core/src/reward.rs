//! Shaped reward: ranking accuracy plus attribute-alignment and
//! preference-alignment bonuses.
//!
//! `total = ndcg + w1 * qas + w2 * pas`, where `qas` is the fraction of the
//! ground truth's attribute edges shared by the prediction and `pas` is the
//! (non-negative) cosine between their collaborative embeddings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{Catalog, ItemId};

const BOXED: &str = "\\boxed{";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    /// NDCG cutoff.
    pub k: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 0.01,
            w2: 0.01,
            k: 1,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w1.is_finite() && self.w2 >= 0.0 && self.w2.is_finite()) {
            return Err(Error::Config(format!(
                "reward weights must be finite and non-negative (w1={}, w2={})",
                self.w1, self.w2
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("NDCG cutoff must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapedReward {
    pub ndcg: f64,
    pub qas: f64,
    pub pas: f64,
    pub total: f64,
}

impl ShapedReward {
    pub fn combine(ndcg: f64, qas: f64, pas: f64, weights: &RewardWeights) -> Self {
        ShapedReward {
            ndcg,
            qas,
            pas,
            total: ndcg + weights.w1 * qas + weights.w2 * pas,
        }
    }
}

/// Lowercase, trim, collapse whitespace runs to one space and drop trailing
/// sentence punctuation.
pub fn normalize_title(s: &str) -> String {
    let collapsed = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| {
            matches!(c, '.' | ',' | ';' | ':' | '!' | '?') || c.is_whitespace()
        })
        .to_string()
}

/// Candidate items of one query with their normalized titles.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    ids: Vec<ItemId>,
    indices: Vec<usize>,
    titles: Vec<String>,
}

impl CandidateSet {
    pub fn new(catalog: &Catalog, ids: &[ItemId]) -> Result<Self> {
        let mut indices = Vec::with_capacity(ids.len());
        let mut titles = Vec::with_capacity(ids.len());
        let mut seen = HashSet::new();
        for id in ids {
            let idx = catalog.index_of(id)?;
            let title = normalize_title(&catalog.item(idx).title);
            if title.is_empty() || !seen.insert(title.clone()) {
                return Err(Error::Validation(format!(
                    "candidate titles must be unique and non-empty after normalization (`{id}`)"
                )));
            }
            indices.push(idx);
            titles.push(title);
        }
        Ok(CandidateSet {
            ids: ids.to_vec(),
            indices,
            titles,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    /// Catalog index of the candidate in `slot`.
    pub fn index(&self, slot: usize) -> usize {
        self.indices[slot]
    }

    pub fn normalized_title(&self, slot: usize) -> &str {
        &self.titles[slot]
    }

    pub fn slot_of_title(&self, normalized: &str) -> Option<usize> {
        self.titles.iter().position(|t| t == normalized)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub item: Option<ItemId>,
    pub raw_span: Option<String>,
}

/// Byte ranges of the contents of every complete `\boxed{...}` in `text`.
pub fn boxed_spans(text: &str) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(pos) = text[from..].find(BOXED) {
        let start = from + pos + BOXED.len();
        let mut depth = 1usize;
        let mut end = None;
        for (off, c) in text[start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + off);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(end) = end {
            spans.push(start..end);
        }
        from = start;
    }
    spans
}

/// Matches the last boxed span against the candidate titles.
pub fn extract_answer(response_text: &str, candidates: &CandidateSet) -> ExtractedAnswer {
    match boxed_spans(response_text).pop() {
        None => ExtractedAnswer {
            item: None,
            raw_span: None,
        },
        Some(span) => {
            let raw = &response_text[span];
            let item = candidates
                .slot_of_title(&normalize_title(raw))
                .map(|slot| candidates.ids()[slot].clone());
            ExtractedAnswer {
                item,
                raw_span: Some(raw.to_string()),
            }
        }
    }
}

/// Binary-relevance NDCG@K with a single relevant item (IDCG = 1).
pub fn ndcg_at_k(ranked: &[ItemId], gt: &ItemId, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be >= 1".into()));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for id in ranked {
        if !seen.insert(id) {
            return Err(Error::Validation(format!(
                "duplicate item `{id}` in ranking"
            )));
        }
    }
    Ok(ranked
        .iter()
        .take(k)
        .position(|id| id == gt)
        .map_or(0.0, |j| 1.0 / ((j + 2) as f64).log2()))
}

/// Attribute alignment by catalog index.
pub fn qas_index(p: usize, gt: usize, catalog: &Catalog) -> f64 {
    let graph = catalog.graph();
    let target = graph.attributes(gt);
    if target.is_empty() {
        return if p == gt { 1.0 } else { 0.0 };
    }
    let shared = graph.attributes(p).intersection(target).count();
    shared as f64 / target.len() as f64
}

pub fn qas(p: &ItemId, gt: &ItemId, catalog: &Catalog) -> Result<f64> {
    Ok(qas_index(
        catalog.index_of(p)?,
        catalog.index_of(gt)?,
        catalog,
    ))
}

/// Preference alignment by catalog index: cosine clamped to [0, 1], zero
/// for cold items.
pub fn pas_index(p: usize, gt: usize, embeddings: &EmbeddingTable) -> Result<f64> {
    if p >= embeddings.len() || gt >= embeddings.len() {
        return Err(Error::Validation(format!(
            "missing embedding for item index {}",
            p.max(gt)
        )));
    }
    Ok(embeddings.cosine(p, gt).map_or(0.0, |c| c.clamp(0.0, 1.0)))
}

pub fn pas(p: &ItemId, gt: &ItemId, catalog: &Catalog, embeddings: &EmbeddingTable) -> Result<f64> {
    pas_index(catalog.index_of(p)?, catalog.index_of(gt)?, embeddings)
}

/// Shaped reward of a single-item answer. `None` (no parsable answer) earns 0.
pub fn shape_reward(
    p: Option<&ItemId>,
    gt: &ItemId,
    catalog: &Catalog,
    embeddings: &EmbeddingTable,
    weights: &RewardWeights,
) -> Result<ShapedReward> {
    let gt_idx = catalog.index_of(gt)?;
    let Some(p) = p else {
        return Ok(ShapedReward::default());
    };
    let p_idx = catalog.index_of(p)?;
    let ndcg = ndcg_at_k(std::slice::from_ref(p), gt, weights.k)?;
    let qas = qas_index(p_idx, gt_idx, catalog);
    let pas = pas_index(p_idx, gt_idx, embeddings)?;
    Ok(ShapedReward::combine(ndcg, qas, pas, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Provenance;
    use crate::graph::{Attribute, CatalogRecord, RelationVocab};

    fn rec(id: &str, title: &str, attrs: &[(&str, &str)]) -> CatalogRecord {
        CatalogRecord {
            id: id.into(),
            title: title.into(),
            attributes: attrs.iter().map(|(r, v)| Attribute::new(r, v)).collect(),
        }
    }

    fn catalog() -> Catalog {
        Catalog::from_records(
            vec![
                rec(
                    "gt",
                    "Go (1999)",
                    &[("genre", "scifi"), ("actor", "a1"), ("director", "d1")],
                ),
                rec(
                    "p",
                    "King Kong (1933)",
                    &[("genre", "scifi"), ("actor", "a1"), ("actor", "a2")],
                ),
                rec("q", "Heat (1995)", &[("genre", "crime")]),
                rec("bare", "Nothing", &[]),
            ],
            &RelationVocab::default(),
        )
        .unwrap()
    }

    fn ids(v: &[&str]) -> Vec<ItemId> {
        v.iter().map(|s| ItemId::from(*s)).collect()
    }

    #[test]
    fn extracts_boxed_answers() {
        let cat = catalog();
        let cands = CandidateSet::new(&cat, &ids(&["gt", "p", "q"])).unwrap();
        let a = extract_answer("thinking...\n\\boxed{Go (1999)}", &cands);
        assert_eq!(a.item, Some("gt".into()));
        assert_eq!(a.raw_span.as_deref(), Some("Go (1999)"));

        assert_eq!(extract_answer("no answer here", &cands).item, None);

        let two = "\\boxed{Go (1999)} hmm, actually \\boxed{ king  kong (1933). }";
        assert_eq!(extract_answer(two, &cands).item, Some("p".into()));

        let unknown = extract_answer("\\boxed{Alien}", &cands);
        assert_eq!(unknown.item, None);
        assert_eq!(unknown.raw_span.as_deref(), Some("Alien"));

        assert_eq!(extract_answer("\\boxed{Go (1999)", &cands).item, None);
    }

    #[test]
    fn last_boxed_matches_scanning_oracle() {
        let text = "a \\boxed{x} b \\boxed{y{z}} c \\boxed{open";
        let spans: Vec<&str> = boxed_spans(text).into_iter().map(|r| &text[r]).collect();
        assert_eq!(spans, vec!["x", "y{z}"]);
    }

    #[test]
    fn ndcg_examples() {
        let gt = ItemId::from("gt");
        assert_eq!(ndcg_at_k(&ids(&["gt"]), &gt, 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ids(&["a", "b"]), &gt, 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[], &gt, 2).unwrap(), 0.0);
        let v = ndcg_at_k(&ids(&["a", "gt", "b"]), &gt, 3).unwrap();
        assert!((v - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&ids(&["a", "gt"]), &gt, 1).unwrap(), 0.0);
        assert!(matches!(
            ndcg_at_k(&ids(&["a", "a"]), &gt, 2),
            Err(Error::Validation(_))
        ));
        assert!(ndcg_at_k(&ids(&["a"]), &gt, 0).is_err());
    }

    #[test]
    fn qas_examples() {
        let cat = catalog();
        assert_eq!(qas(&"gt".into(), &"gt".into(), &cat).unwrap(), 1.0);
        assert!((qas(&"p".into(), &"gt".into(), &cat).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(qas(&"q".into(), &"gt".into(), &cat).unwrap(), 0.0);
        assert_eq!(qas(&"bare".into(), &"bare".into(), &cat).unwrap(), 1.0);
        assert_eq!(qas(&"p".into(), &"bare".into(), &cat).unwrap(), 0.0);
        assert!(qas(&"zzz".into(), &"gt".into(), &cat).is_err());
    }

    #[test]
    fn pas_examples() {
        let emb = EmbeddingTable::from_vectors(
            vec![
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![0.0, 0.0],
            ],
            Provenance::Baseline,
        )
        .unwrap();
        assert_eq!(pas_index(0, 0, &emb).unwrap(), 1.0);
        assert!((pas_index(0, 1, &emb).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(pas_index(0, 2, &emb).unwrap(), 0.0);
        assert_eq!(pas_index(3, 3, &emb).unwrap(), 0.0);
        assert!(pas_index(0, 9, &emb).is_err());

        let neg = EmbeddingTable::from_vectors(
            vec![vec![1.0, 0.0], vec![-1.0, 0.1]],
            Provenance::Baseline,
        )
        .unwrap();
        assert_eq!(pas_index(0, 1, &neg).unwrap(), 0.0);
    }

    #[test]
    fn shaped_reward_examples() {
        let cat = catalog();
        let emb = EmbeddingTable::from_vectors(
            vec![
                vec![1.0, 0.0],
                vec![0.5, 0.75f64.sqrt()],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
            Provenance::Baseline,
        )
        .unwrap();
        let w = RewardWeights::default();
        let gt = ItemId::from("gt");

        let exact = shape_reward(Some(&gt), &gt, &cat, &emb, &w).unwrap();
        assert_eq!((exact.ndcg, exact.qas, exact.pas), (1.0, 1.0, 1.0));
        assert!((exact.total - 1.02).abs() < 1e-15);

        let none = shape_reward(None, &gt, &cat, &emb, &w).unwrap();
        assert_eq!(none, ShapedReward::default());

        let near = shape_reward(Some(&"p".into()), &gt, &cat, &emb, &w).unwrap();
        assert_eq!(near.ndcg, 0.0);
        assert!((near.qas - 2.0 / 3.0).abs() < 1e-15);
        assert!((near.pas - 0.5).abs() < 1e-12);
        assert!((near.total - 0.011_666_666_666_666_667).abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_title("  Go   (1999).  "), "go (1999)");
        assert_eq!(normalize_title("Heat!?"), "heat");
        assert_eq!(normalize_title("KING\tKong"), "king kong");
    }
}
