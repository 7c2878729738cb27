//! Cosine-distance ranking with junk filtering, mAP and CMC.

use std::cmp::Ordering;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::extract::SampleMeta;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolMode {
    #[serde(rename = "STANDARD")]
    Standard,
    /// Cloth-changing: same-identity gallery items in the query's outfit are junk.
    #[serde(rename = "CC")]
    Cc,
}

impl std::fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolMode::Standard => "STANDARD",
            ProtocolMode::Cc => "CC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingProtocol {
    pub mode: ProtocolMode,
    /// Same identity and same camera as the query is junk.
    pub exclude_same_camera: bool,
}

impl RankingProtocol {
    pub fn standard() -> Self {
        Self {
            mode: ProtocolMode::Standard,
            exclude_same_camera: true,
        }
    }

    pub fn cloth_changing() -> Self {
        Self {
            mode: ProtocolMode::Cc,
            exclude_same_camera: true,
        }
    }

    /// Junk gallery items are removed from the ranking before scoring.
    pub fn is_junk(&self, query: &SampleMeta, gallery: &SampleMeta) -> bool {
        if query.identity != gallery.identity {
            return false;
        }
        (self.exclude_same_camera && query.camera == gallery.camera)
            || (self.mode == ProtocolMode::Cc && query.clothing_id == gallery.clothing_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    /// `cmc[k]` is the fraction of retained queries with a match in the top k+1.
    pub cmc: Vec<f64>,
    pub retained_queries: usize,
    pub dropped_queries: usize,
}

impl RetrievalScores {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

fn cosine_distance(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>, na: f64, nb: f64) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    1.0 - dot / (na * nb)
}

fn norm(row: ArrayView1<'_, f32>) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
        .max(1e-12)
}

/// Ranks the gallery for every query by `1 - cos` and scores the ranking.
///
/// Ties go to the lower gallery index. Queries left without a valid match
/// after junk removal are dropped and counted. With every query dropped,
/// mAP and CMC are reported as zero.
pub fn rank_and_score(
    query: ArrayView2<'_, f32>,
    query_meta: &[SampleMeta],
    gallery: ArrayView2<'_, f32>,
    gallery_meta: &[SampleMeta],
    protocol: &RankingProtocol,
    cmc_depth: usize,
) -> Result<RetrievalScores> {
    if gallery.nrows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if query.nrows() != query_meta.len() || gallery.nrows() != gallery_meta.len() {
        return Err(Error::Shape("feature rows and metadata disagree".into()));
    }
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let depth = cmc_depth.max(1);
    let gallery_norms: Vec<f64> = gallery.rows().into_iter().map(norm).collect();

    let mut ap_sum = 0.0;
    let mut cmc_hits = vec![0usize; depth];
    let mut retained = 0usize;
    let mut dropped = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(gallery.nrows());

    for (q, qm) in query.rows().into_iter().zip(query_meta) {
        let qn = norm(q);
        order.clear();
        order.extend(
            gallery
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(j, _)| !protocol.is_junk(qm, &gallery_meta[*j]))
                .map(|(j, g)| (cosine_distance(q, g, qn, gallery_norms[j]), j)),
        );
        order.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &(_, j)) in order.iter().enumerate() {
            if gallery_meta[j].identity == qm.identity {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        let Some(first) = first_hit else {
            dropped += 1;
            continue;
        };
        retained += 1;
        ap_sum += precision_sum / hits as f64;
        for hit in cmc_hits.iter_mut().skip(first) {
            *hit += 1;
        }
    }

    let denom = retained.max(1) as f64;
    Ok(RetrievalScores {
        map: if retained == 0 { 0.0 } else { ap_sum / denom },
        cmc: cmc_hits.iter().map(|&h| h as f64 / denom).collect(),
        retained_queries: retained,
        dropped_queries: dropped,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    use super::*;

    fn meta(identity: usize, camera: usize, clothing_id: usize) -> SampleMeta {
        SampleMeta {
            identity,
            camera,
            clothing_id,
        }
    }

    #[test]
    fn hand_computed_average_precision() {
        // gallery sorted by distance: match, non-match, match
        let q = array![[1.0f32, 0.0]];
        let g = array![[1.0f32, 0.0], [0.9, 0.1], [0.5, 0.5]];
        let qm = [meta(0, 0, 0)];
        let gm = [meta(0, 1, 0), meta(1, 1, 1), meta(0, 2, 0)];
        let s = rank_and_score(
            q.view(),
            &qm,
            g.view(),
            &gm,
            &RankingProtocol::standard(),
            3,
        )
        .unwrap();
        assert!((s.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(s.rank1(), 1.0);
        assert_eq!(s.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn same_camera_only_match_drops_query() {
        let q = array![[1.0f32, 0.0], [0.0, 1.0]];
        let g = array![[1.0f32, 0.0], [0.0, 1.0]];
        let qm = [meta(0, 0, 0), meta(1, 0, 1)];
        let gm = [meta(0, 0, 0), meta(1, 1, 1)];
        let s = rank_and_score(
            q.view(),
            &qm,
            g.view(),
            &gm,
            &RankingProtocol::standard(),
            1,
        )
        .unwrap();
        assert_eq!(s.dropped_queries, 1);
        assert_eq!(s.retained_queries, 1);
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn cc_protocol_ignores_same_outfit_matches() {
        let q = array![[1.0f32, 0.0]];
        let g = array![[1.0f32, 0.0], [0.8, 0.6], [0.0, 1.0]];
        let qm = [meta(0, 0, 5)];
        let gm = [meta(0, 1, 5), meta(1, 1, 9), meta(0, 2, 6)];
        let std = rank_and_score(
            q.view(),
            &qm,
            g.view(),
            &gm,
            &RankingProtocol::standard(),
            2,
        )
        .unwrap();
        let cc = rank_and_score(
            q.view(),
            &qm,
            g.view(),
            &gm,
            &RankingProtocol::cloth_changing(),
            2,
        )
        .unwrap();
        assert_eq!(std.rank1(), 1.0);
        assert_eq!(cc.rank1(), 0.0);
        assert!((cc.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = array![[1.0f32, 0.0]];
        let g = array![[1.0f32, 0.0], [1.0, 0.0]];
        let qm = [meta(0, 0, 0)];
        let first_wrong = [meta(1, 1, 1), meta(0, 1, 0)];
        let s = rank_and_score(
            q.view(),
            &qm,
            g.view(),
            &first_wrong,
            &RankingProtocol::standard(),
            2,
        )
        .unwrap();
        assert_eq!(s.rank1(), 0.0);
        assert_eq!(s.map, 0.5);
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let q = array![[1.0f32, 0.0]];
        let g = Array2::<f32>::zeros((0, 2));
        assert!(matches!(
            rank_and_score(
                q.view(),
                &[meta(0, 0, 0)],
                g.view(),
                &[],
                &RankingProtocol::standard(),
                1
            ),
            Err(Error::EmptyGallery)
        ));
    }

    fn instance(
    ) -> impl Strategy<Value = (Array2<f32>, Vec<SampleMeta>, Array2<f32>, Vec<SampleMeta>)> {
        (1usize..8, 2usize..20, 1usize..5).prop_flat_map(|(nq, ng, d)| {
            let row = || {
                (
                    proptest::collection::vec(-1.0f32..1.0, d),
                    0usize..4,
                    0usize..3,
                    0usize..3,
                )
            };
            (
                proptest::collection::vec(row(), nq),
                proptest::collection::vec(row(), ng),
            )
                .prop_map(move |(qs, gs)| {
                    let unpack = |rows: Vec<(Vec<f32>, usize, usize, usize)>| {
                        let n = rows.len();
                        let meta = rows.iter().map(|r| meta(r.1, r.2, r.3)).collect();
                        let flat = rows.into_iter().flat_map(|r| r.0).collect();
                        (Array2::from_shape_vec((n, d), flat).unwrap(), meta)
                    };
                    let (q, qm) = unpack(qs);
                    let (g, gm) = unpack(gs);
                    (q, qm, g, gm)
                })
        })
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_cmc_monotone((q, qm, g, gm) in instance()) {
            for protocol in [RankingProtocol::standard(), RankingProtocol::cloth_changing()] {
                let s = rank_and_score(q.view(), &qm, g.view(), &gm, &protocol, 5).unwrap();
                prop_assert!((0.0..=1.0).contains(&s.map));
                prop_assert!(s.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(s.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
                prop_assert_eq!(s.retained_queries + s.dropped_queries, qm.len());
            }
        }

        #[test]
        fn positive_scaling_leaves_metrics_unchanged((q, qm, g, gm) in instance(), scale in 0.5f32..4.0) {
            let p = RankingProtocol::standard();
            let a = rank_and_score(q.view(), &qm, g.view(), &gm, &p, 5).unwrap();
            let q2 = q.mapv(|v| v * scale);
            let g2 = g.mapv(|v| v * 2.0);
            let b = rank_and_score(q2.view(), &qm, g2.view(), &gm, &p, 5).unwrap();
            prop_assert!((a.map - b.map).abs() < 1e-9);
            prop_assert_eq!(a.cmc, b.cmc);
        }

        #[test]
        fn junk_gallery_items_change_nothing((q, qm, g, gm) in instance(), row in 0usize..8) {
            let p = RankingProtocol::standard();
            let base = rank_and_score(q.view(), &qm, g.view(), &gm, &p, 5).unwrap();
            // duplicate a query as a same-camera gallery item: junk for that query only,
            // so score the single query alone
            let r = row % qm.len();
            let q1 = q.slice(ndarray::s![r..r + 1, ..]).to_owned();
            let single = rank_and_score(q1.view(), &qm[r..r + 1], g.view(), &gm, &p, 5).unwrap();
            let mut g2 = g.clone();
            g2.push_row(q.row(r)).unwrap();
            let mut gm2 = gm.clone();
            gm2.push(qm[r]);
            let with_junk = rank_and_score(q1.view(), &qm[r..r + 1], g2.view(), &gm2, &p, 5).unwrap();
            prop_assert_eq!(single, with_junk);
            prop_assert!(base.map >= 0.0);
        }
    }
}
