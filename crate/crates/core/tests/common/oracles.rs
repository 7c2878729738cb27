//! Reference implementations written as plain loops over `f64`, sharing no
//! code with the library beyond the input types.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teata_core::eval::{ProtocolMode, RankingProtocol, SampleMeta};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    // Box-Muller keeps the oracle free of distribution crates
                    let u: f64 = rng.random_range(1e-12..1.0);
                    let v: f64 = rng.random();
                    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
                })
                .collect()
        })
        .collect()
}

/// `k` images for each of `p` identities drawn from `0..classes`, shuffled.
pub fn pk_labels(rng: &mut ChaCha8Rng, p: usize, k: usize, classes: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..classes).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let mut labels: Vec<usize> = ids[..p]
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, k))
        .collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

pub fn tensor(m: &Mat) -> Tensor {
    let rows = m.len();
    let cols = m[0].len();
    Tensor::from_vec(m.concat(), (rows, cols), &Device::Cpu).unwrap()
}

pub fn var(m: &Mat) -> Var {
    Var::from_tensor(&tensor(m)).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Image-to-text: each image against every identity's text row.
pub fn i2t(img: &Mat, txt: &Mat, labels: &[usize], logit_scale: f64) -> f64 {
    let s = logit_scale.exp();
    let txt: Mat = txt.iter().map(|r| unit(r)).collect();
    let mut total = 0.0;
    for (row, &y) in img.iter().zip(labels) {
        let f = unit(row);
        let logits: Vec<f64> = txt.iter().map(|t| s * dot(&f, t)).collect();
        total += log_sum_exp(&logits) - logits[y];
    }
    total / img.len() as f64
}

/// Text-to-image: each present identity's text row against the batch images,
/// averaging over every image of that identity.
pub fn t2i(img: &Mat, txt: &Mat, labels: &[usize], logit_scale: f64) -> f64 {
    let s = logit_scale.exp();
    let img: Mat = img.iter().map(|r| unit(r)).collect();
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut total = 0.0;
    for &y in &present {
        let t = unit(&txt[y]);
        let logits: Vec<f64> = img.iter().map(|f| s * dot(f, &t)).collect();
        let lse = log_sum_exp(&logits);
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        let mean: f64 =
            members.iter().map(|&i| lse - logits[i]).sum::<f64>() / members.len() as f64;
        total += mean;
    }
    total / present.len() as f64
}

/// Smoothed cross-entropy of unit features against raw classifier rows.
pub fn id(feat: &Mat, classifier: &Mat, labels: &[usize], eps: f64) -> f64 {
    let n = classifier.len() as f64;
    let mut total = 0.0;
    for (row, &y) in feat.iter().zip(labels) {
        let f = unit(row);
        let logits: Vec<f64> = classifier.iter().map(|w| dot(&f, w)).collect();
        let lse = log_sum_exp(&logits);
        for (j, z) in logits.iter().enumerate() {
            let q = if j == y { 1.0 - eps + eps / n } else { eps / n };
            total += q * (lse - z);
        }
    }
    total / feat.len() as f64
}

/// Batch-hard triplet on Euclidean distances.
pub fn triplet(feat: &Mat, labels: &[usize], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..feat.len() {
        let mut hardest_pos: f64 = 0.0;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..feat.len() {
            let d = dist(&feat[i], &feat[j]);
            if labels[j] == labels[i] {
                if j != i {
                    hardest_pos = hardest_pos.max(d);
                }
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    total / feat.len() as f64
}

/// Ranking scores recomputed by counting, without sorting: the rank of a
/// valid gallery item is the number of valid items strictly closer, or
/// equally close with a lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScores {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub dropped: usize,
}

pub fn brute_force_ranking(
    query: &[Vec<f32>],
    query_meta: &[SampleMeta],
    gallery: &[Vec<f32>],
    gallery_meta: &[SampleMeta],
    mode: ProtocolMode,
    exclude_same_camera: bool,
    depth: usize,
) -> OracleScores {
    let up = |v: &[f32]| unit(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
    let g_unit: Vec<Vec<f64>> = gallery.iter().map(|g| up(g)).collect();
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; depth];
    let mut retained = 0usize;
    let mut dropped = 0usize;
    for (q, qm) in query.iter().zip(query_meta) {
        let qu = up(q);
        let junk = |gm: &SampleMeta| {
            gm.identity == qm.identity
                && ((exclude_same_camera && gm.camera == qm.camera)
                    || (mode == ProtocolMode::Cc && gm.clothing_id == qm.clothing_id))
        };
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&j| !junk(&gallery_meta[j]))
            .collect();
        let d: Vec<f64> = (0..gallery.len())
            .map(|j| 1.0 - dot(&qu, &g_unit[j]))
            .collect();
        let rank_of = |j: usize| {
            valid
                .iter()
                .filter(|&&k| d[k] < d[j] || (d[k] == d[j] && k < j))
                .count()
        };
        let mut positive_ranks: Vec<usize> = valid
            .iter()
            .filter(|&&j| gallery_meta[j].identity == qm.identity)
            .map(|&j| rank_of(j))
            .collect();
        if positive_ranks.is_empty() {
            dropped += 1;
            continue;
        }
        positive_ranks.sort_unstable();
        retained += 1;
        let ap: f64 = positive_ranks
            .iter()
            .enumerate()
            .map(|(found, &r)| (found + 1) as f64 / (r + 1) as f64)
            .sum::<f64>()
            / positive_ranks.len() as f64;
        ap_sum += ap;
        for (k, h) in hits.iter_mut().enumerate() {
            if positive_ranks[0] <= k {
                *h += 1;
            }
        }
    }
    let denom = retained.max(1) as f64;
    OracleScores {
        map: if retained == 0 { 0.0 } else { ap_sum / denom },
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        dropped,
    }
}

/// A random retrieval instance with duplicated gallery rows to force ties.
pub struct RankingInstance {
    pub query: Vec<Vec<f32>>,
    pub query_meta: Vec<SampleMeta>,
    pub gallery: Vec<Vec<f32>>,
    pub gallery_meta: Vec<SampleMeta>,
    pub protocol: RankingProtocol,
}

pub fn ranking_instance(seed: u64, max_queries: usize, max_gallery: usize) -> RankingInstance {
    let mut r = rng(seed);
    let dim = r.random_range(2..10);
    let identities = r.random_range(2..12);
    let nq = r.random_range(1..=max_queries);
    let ng = r.random_range(1..=max_gallery);
    let meta = |r: &mut ChaCha8Rng| SampleMeta {
        identity: r.random_range(0..identities),
        camera: r.random_range(0..3),
        clothing_id: r.random_range(0..4),
    };
    let row = |r: &mut ChaCha8Rng| {
        (0..dim)
            .map(|_| r.random_range(-1.0f32..1.0))
            .collect::<Vec<f32>>()
    };
    let query: Vec<Vec<f32>> = (0..nq).map(|_| row(&mut r)).collect();
    let query_meta = (0..nq).map(|_| meta(&mut r)).collect();
    let mut gallery: Vec<Vec<f32>> = Vec::with_capacity(ng);
    for j in 0..ng {
        if j > 0 && r.random_bool(0.1) {
            let k = r.random_range(0..j);
            gallery.push(gallery[k].clone());
        } else {
            gallery.push(row(&mut r));
        }
    }
    let gallery_meta = (0..ng).map(|_| meta(&mut r)).collect();
    let protocol = RankingProtocol {
        mode: if r.random_bool(0.5) {
            ProtocolMode::Cc
        } else {
            ProtocolMode::Standard
        },
        exclude_same_camera: r.random_bool(0.7),
    };
    RankingInstance {
        query,
        query_meta,
        gallery,
        gallery_meta,
        protocol,
    }
}

/// Central differences of `f` with respect to every listed element of `v`.
pub fn numeric_grad(v: &Var, coords: &[usize], h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let shape = v.dims().to_vec();
    let base: Vec<f64> = v
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = base.clone();
        plus[c] += h;
        v.set(&Tensor::from_vec(plus, shape.as_slice(), &Device::Cpu).unwrap())
            .unwrap();
        let fp = f();
        let mut minus = base.clone();
        minus[c] -= h;
        v.set(&Tensor::from_vec(minus, shape.as_slice(), &Device::Cpu).unwrap())
            .unwrap();
        let fm = f();
        out.push((fp - fm) / (2.0 * h));
    }
    v.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap())
        .unwrap();
    out
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Up to `count` distinct flat indices of a tensor with `len` elements.
pub fn sample_coords(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.random_range(i..len);
        all.swap(i, j);
    }
    all.truncate(count);
    all
}
