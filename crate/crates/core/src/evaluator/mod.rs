//! Exhaustive ranking of the knowledge base and retrieval metrics.

mod cache;
mod metrics;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Mention;
use crate::encoders::{Encoder, FeatureBundle};
use crate::error::{Error, Result};
use crate::interaction::{
    score_prepared, InteractionWeights, PreparedEntity, PreparedMention, ScoreBreakdown, UnitMask,
};

pub use self::cache::{
    cache_key, kb_fingerprint, precompute_entity_features, CacheStats, EntityFeatureCache, DEFAULT_CHUNK_SIZE,
};
pub use self::metrics::{compute_metrics, MetricsReport, DEFAULT_KS};

/// Entity-side interaction inputs for a whole cache, built once per
/// checkpoint and shared read-only by every mention.
pub struct PreparedKb {
    ids: Vec<String>,
    entities: Vec<PreparedEntity>,
}

impl PreparedKb {
    pub fn new(cache: &EntityFeatureCache, w: &InteractionWeights) -> Result<Self> {
        Self::from_bundles(cache.ids(), cache.bundles(), w)
    }

    pub fn from_bundles(ids: &[String], bundles: &[FeatureBundle], w: &InteractionWeights) -> Result<Self> {
        if ids.is_empty() || ids.len() != bundles.len() {
            return Err(Error::Cache(format!(
                "{} entity ids for {} feature bundles",
                ids.len(),
                bundles.len()
            )));
        }
        let entities = bundles
            .par_iter()
            .map(|b| PreparedEntity::new(b, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: ids.to_vec(),
            entities,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub id: String,
    pub scores: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Every KB entity, best first.
    pub entries: Vec<RankedEntity>,
    /// 1-based position of the ground-truth entity, when one was given.
    pub gt_rank: Option<usize>,
}

/// Total order used for ranking: score descending, the ground truth after
/// any entity it ties with, then id ascending.
pub fn rank_order(a: (f64, bool, &str), b: (f64, bool, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2))
}

pub fn rank_prepared(
    mention: &FeatureBundle,
    gt_id: Option<&str>,
    kb: &PreparedKb,
    w: &InteractionWeights,
    mask: UnitMask,
) -> Result<Ranking> {
    mask.validate()?;
    if let Some(gt) = gt_id {
        if !kb.ids.iter().any(|id| id == gt) {
            return Err(Error::Cache(format!("ground-truth entity `{gt}` is not in the cache")));
        }
    }
    let m = PreparedMention::new(mention, w)?;
    let mut scored: Vec<(usize, ScoreBreakdown)> = kb
        .entities
        .iter()
        .enumerate()
        .map(|(j, e)| (j, score_prepared(&m, e, w, mask)))
        .collect();
    if let Some((j, _)) = scored.iter().find(|(_, s)| !s.s.is_finite()) {
        return Err(Error::NonFinite(format!(
            "score against entity `{}` is not finite",
            kb.ids[*j]
        )));
    }
    let is_gt = |j: usize| gt_id == Some(kb.ids[j].as_str());
    scored.sort_by(|(a, sa), (b, sb)| rank_order((sa.s, is_gt(*a), &kb.ids[*a]), (sb.s, is_gt(*b), &kb.ids[*b])));
    let gt_rank = gt_id.and_then(|_| scored.iter().position(|(j, _)| is_gt(*j)).map(|p| p + 1));
    Ok(Ranking {
        entries: scored
            .into_iter()
            .map(|(j, scores)| RankedEntity {
                id: kb.ids[j].clone(),
                scores,
            })
            .collect(),
        gt_rank,
    })
}

/// Ranks every cached entity for one mention.
pub fn rank_against_kb(
    mention: &FeatureBundle,
    gt_id: Option<&str>,
    cache: &EntityFeatureCache,
    w: &InteractionWeights,
    mask: UnitMask,
) -> Result<Ranking> {
    rank_prepared(mention, gt_id, &PreparedKb::new(cache, w)?, w, mask)
}

/// One line of the per-mention audit dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub mention_id: String,
    pub gt_rank: usize,
    pub top10: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<RankRecord>,
}

/// Encodes each mention fresh, ranks the whole KB for it and aggregates.
/// Mentions are processed in parallel; records keep input order.
pub fn evaluate_split(
    mentions: &[Mention],
    encoder: &Encoder,
    kb: &PreparedKb,
    w: &InteractionWeights,
    mask: UnitMask,
    checkpoint: &str,
) -> Result<Evaluation> {
    if mentions.is_empty() {
        return Err(Error::InvalidArgument("no mentions to evaluate".into()));
    }
    let records = mentions
        .par_iter()
        .map(|m| {
            let bundle = encoder.encode_mention(m)?;
            let ranking = rank_prepared(&bundle, Some(&m.gt_entity_id), kb, w, mask)?;
            Ok(RankRecord {
                mention_id: m.id.clone(),
                gt_rank: ranking.gt_rank.expect("ground truth was supplied"),
                top10: ranking.entries.iter().take(10).map(|e| e.id.clone()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = records.iter().map(|r| r.gt_rank).collect();
    let mut report = compute_metrics(&ranks, &DEFAULT_KS)?;
    report.checkpoint = checkpoint.to_string();
    Ok(Evaluation { report, records })
}

/// Mean reciprocal rank of pre-encoded mentions; used for model selection.
pub fn mrr_of_bundles(
    mentions: &[(FeatureBundle, String)],
    kb: &PreparedKb,
    w: &InteractionWeights,
    mask: UnitMask,
) -> Result<f64> {
    let ranks = mentions
        .par_iter()
        .map(|(b, gt)| {
            Ok(rank_prepared(b, Some(gt), kb, w, mask)?
                .gt_rank
                .expect("ground truth was supplied"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compute_metrics(&ranks, &[1])?.mrr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, KnowledgeBase, Split};
    use crate::encoders::EncoderConfig;
    use crate::interaction::{combined_score_masked, InteractionDims};

    fn setup() -> (Encoder, InteractionWeights, KnowledgeBase, Vec<Mention>) {
        let cfg = EncoderConfig {
            text_dim: 8,
            image_dim: 6,
            max_len: 12,
            patch_size: 8,
            image_size: 16,
            ..EncoderConfig::default()
        };
        let enc = Encoder::from_config(&cfg, None).unwrap();
        let dims = InteractionDims {
            text_dim: 8,
            image_dim: 6,
            tglu_dim: 4,
            cmfu_dim: 4,
        };
        let w = InteractionWeights::init(dims, 3);
        let entities: Vec<Entity> = (0..7)
            .map(|i| Entity {
                id: format!("E{i}"),
                name: format!("name {i}"),
                attributes: vec![format!("kind {}", i % 3)],
                image_refs: vec![],
                description: None,
            })
            .collect();
        let mentions = (0..5)
            .map(|i| Mention {
                id: format!("m{i}"),
                words: format!("name {i}"),
                sentence: format!("a sentence about {i}"),
                image_ref: None,
                gt_entity_id: format!("E{i}"),
                split: Split::Test,
            })
            .collect();
        (enc, w, KnowledgeBase::from_entities(entities).unwrap(), mentions)
    }

    fn fake_kb(scores: &[(&str, f64)]) -> (Vec<(usize, ScoreBreakdown)>, Vec<String>) {
        let ids = scores.iter().map(|(id, _)| id.to_string()).collect();
        let s = scores
            .iter()
            .enumerate()
            .map(|(j, &(_, s))| {
                (
                    j,
                    ScoreBreakdown {
                        s,
                        ..Default::default()
                    },
                )
            })
            .collect();
        (s, ids)
    }

    fn order(scores: &[(&str, f64)], gt: &str) -> Vec<String> {
        let (mut s, ids) = fake_kb(scores);
        s.sort_by(|(a, sa), (b, sb)| rank_order((sa.s, ids[*a] == gt, &ids[*a]), (sb.s, ids[*b] == gt, &ids[*b])));
        s.into_iter().map(|(j, _)| ids[j].clone()).collect()
    }

    #[test]
    fn tie_policy_is_pessimistic_then_by_id() {
        assert_eq!(order(&[("a", 0.1), ("g", 0.9), ("b", 0.2)], "g"), ["g", "b", "a"]);
        assert_eq!(order(&[("g", 0.5), ("z", 0.5), ("a", 0.1)], "g"), ["z", "g", "a"]);
        assert_eq!(order(&[("c", 0.5), ("b", 0.5), ("g", 0.5)], "g"), ["b", "c", "g"]);
    }

    #[test]
    fn ranking_matches_per_pair_scores() {
        let (enc, w, kb, mentions) = setup();
        let (cache, _) = precompute_entity_features(&kb, &enc, "ck", None, 3).unwrap();
        for mask in [
            UnitMask::ALL,
            UnitMask {
                cmfu: false,
                ..UnitMask::ALL
            },
        ] {
            for m in &mentions {
                let mb = enc.encode_mention(m).unwrap();
                let r = rank_against_kb(&mb, Some(&m.gt_entity_id), &cache, &w, mask).unwrap();
                assert_eq!(r.entries.len(), kb.len());
                let mut brute: Vec<(f64, String)> = kb
                    .entities()
                    .iter()
                    .map(|e| {
                        let s = combined_score_masked(&mb, &enc.encode_entity(e).unwrap(), &w, mask)
                            .unwrap()
                            .s;
                        (s, e.id.clone())
                    })
                    .collect();
                brute.sort_by(|a, b| b.0.total_cmp(&a.0));
                let ids: Vec<&str> = r.entries.iter().map(|e| e.id.as_str()).collect();
                let want: Vec<&str> = brute.iter().map(|(_, id)| id.as_str()).collect();
                assert_eq!(ids, want);
                for (e, (s, _)) in r.entries.iter().zip(&brute) {
                    assert!((e.scores.s - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unknown_gt_is_an_error() {
        let (enc, w, kb, mentions) = setup();
        let (cache, _) = precompute_entity_features(&kb, &enc, "ck", None, 3).unwrap();
        let mb = enc.encode_mention(&mentions[0]).unwrap();
        assert!(rank_against_kb(&mb, Some("nope"), &cache, &w, UnitMask::ALL).is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_order_independent() {
        let (enc, w, kb, mentions) = setup();
        let (cache, _) = precompute_entity_features(&kb, &enc, "ck", None, 3).unwrap();
        let pkb = PreparedKb::new(&cache, &w).unwrap();
        let a = evaluate_split(&mentions, &enc, &pkb, &w, UnitMask::ALL, "ck").unwrap();
        let b = evaluate_split(&mentions, &enc, &pkb, &w, UnitMask::ALL, "ck").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.report.n, 5);
        assert_eq!(
            a.records.iter().map(|r| r.mention_id.as_str()).collect::<Vec<_>>(),
            ["m0", "m1", "m2", "m3", "m4"]
        );

        let mut reversed = kb.entities().to_vec();
        reversed.reverse();
        let kb2 = KnowledgeBase::from_entities(reversed).unwrap();
        let (cache2, _) = precompute_entity_features(&kb2, &enc, "ck", None, 2).unwrap();
        let pkb2 = PreparedKb::new(&cache2, &w).unwrap();
        let c = evaluate_split(&mentions, &enc, &pkb2, &w, UnitMask::ALL, "ck").unwrap();
        assert_eq!(a.report, c.report);
        assert_eq!(a.records, c.records);

        let pre: Vec<(FeatureBundle, String)> = mentions
            .iter()
            .map(|m| (enc.encode_mention(m).unwrap(), m.gt_entity_id.clone()))
            .collect();
        assert_eq!(mrr_of_bundles(&pre, &pkb, &w, UnitMask::ALL).unwrap(), a.report.mrr);
    }
}
