//! Measurements shared by the integration tests, which assert on them, and
//! the acceptance runner, which reports them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::Rng;
use teata_core::config::{Method, RunConfig};
use teata_core::data::{AccessAuditor, ClothingState, Split};
use teata_core::encoders::image::images_to_tensor;
use teata_core::encoders::ImageEncoder;
use teata_core::eval::rank_and_score;
use teata_core::lifelong::{load_sources, DomainSource, ModelState, Recipe};
use teata_core::losses::{
    contrastive_i2t_t2i, id_loss, proj_loss, stage2_total, triplet_loss, LossWeights, Stage2Losses,
};
use teata_core::rng::rng_for;

use super::oracles::{self, Mat};

pub const FD_STEP: f64 = 1e-6;

/// Largest |library - oracle| over mAP and every CMC entry, and whether any
/// instance dropped a query.
pub fn ranking_deviation(instances: u64, max_queries: usize, max_gallery: usize) -> (f64, bool) {
    const DEPTH: usize = 10;
    let matrix = |rows: &[Vec<f32>]| {
        Array2::from_shape_vec((rows.len(), rows[0].len()), rows.concat()).unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut dropped = false;
    for seed in 0..instances {
        let c = oracles::ranking_instance(seed, max_queries, max_gallery);
        let got = rank_and_score(
            matrix(&c.query).view(),
            &c.query_meta,
            matrix(&c.gallery).view(),
            &c.gallery_meta,
            &c.protocol,
            DEPTH,
        )
        .unwrap();
        let want = oracles::brute_force_ranking(
            &c.query,
            &c.query_meta,
            &c.gallery,
            &c.gallery_meta,
            c.protocol.mode,
            c.protocol.exclude_same_camera,
            DEPTH,
        );
        assert_eq!(
            got.dropped_queries, want.dropped,
            "dropped queries differ for seed {seed}"
        );
        worst = worst.max((got.map - want.map).abs());
        for (a, b) in got.cmc.iter().zip(&want.cmc) {
            worst = worst.max((a - b).abs());
        }
        dropped |= want.dropped > 0;
    }
    (worst, dropped)
}

pub struct LossInstance {
    pub feats: Mat,
    pub table: Mat,
    pub labels: Vec<usize>,
    pub logit_scale: f64,
    pub eps: f64,
}

pub fn loss_instance(seed: u64) -> LossInstance {
    let mut r = oracles::rng(seed);
    let p = r.random_range(2..5);
    let k = r.random_range(2..4);
    let classes = p + r.random_range(0..4);
    let d = r.random_range(2..8);
    let labels = oracles::pk_labels(&mut r, p, k, classes);
    LossInstance {
        feats: oracles::gaussian_mat(&mut r, labels.len(), d),
        table: oracles::gaussian_mat(&mut r, classes, d),
        labels,
        logit_scale: r.random_range(0.0..3.0),
        eps: r.random_range(0.0..0.3),
    }
}

fn bump(worst: &mut BTreeMap<String, f64>, key: &str, value: f64) {
    let slot = worst.entry(key.to_string()).or_insert(0.0);
    *slot = slot.max(value);
}

/// Worst |library - scalar loop| per loss over the seeds.
pub fn loss_value_deviation(seeds: std::ops::Range<u64>) -> BTreeMap<String, f64> {
    let mut worst = BTreeMap::new();
    for seed in seeds {
        let c = loss_instance(seed);
        let (f, t) = (oracles::tensor(&c.feats), oracles::tensor(&c.table));
        let s = Tensor::new(&[c.logit_scale], &Device::Cpu).unwrap();
        let (i2t, t2i) = contrastive_i2t_t2i(&f, &t, &c.labels, &s).unwrap();
        let id_ref = oracles::id(&c.feats, &c.table, &c.labels, c.eps);
        let pairs = [
            (
                "L_i2t",
                oracles::scalar(&i2t),
                oracles::i2t(&c.feats, &c.table, &c.labels, c.logit_scale),
            ),
            (
                "L_t2i",
                oracles::scalar(&t2i),
                oracles::t2i(&c.feats, &c.table, &c.labels, c.logit_scale),
            ),
            (
                "L_id",
                oracles::scalar(&id_loss(&f, &t, &c.labels, c.eps).unwrap()),
                id_ref,
            ),
            (
                "L_proj",
                oracles::scalar(&proj_loss(&f, &t, &c.labels, c.eps).unwrap()),
                id_ref,
            ),
            (
                "L_tri",
                oracles::scalar(&triplet_loss(&f, &c.labels, 0.3).unwrap()),
                oracles::triplet(&c.feats, &c.labels, 0.3),
            ),
        ];
        for (name, got, want) in pairs {
            bump(&mut worst, name, (got - want).abs());
        }
    }
    worst
}

fn full_grad_error(v: &Var, analytic: &Tensor, f: impl FnMut() -> f64) -> f64 {
    let coords: Vec<usize> = (0..v.elem_count()).collect();
    let numeric = oracles::numeric_grad(v, &coords, FD_STEP, f);
    let analytic = analytic.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    oracles::relative_error(&analytic, &numeric)
}

/// Worst relative error of analytic gradients against central differences,
/// keyed `loss/input`, at 64-bit precision.
pub fn loss_gradient_error(seeds: std::ops::Range<u64>) -> BTreeMap<String, f64> {
    let mut worst = BTreeMap::new();
    for seed in seeds {
        let c = loss_instance(seed);
        let f = oracles::var(&c.feats);
        let t = oracles::var(&c.table);
        let s = Var::from_tensor(&Tensor::new(&[c.logit_scale], &Device::Cpu).unwrap()).unwrap();
        let labels = c.labels.clone();

        let contrastive = |which: usize| {
            let (a, b) =
                contrastive_i2t_t2i(f.as_tensor(), t.as_tensor(), &labels, s.as_tensor()).unwrap();
            if which == 0 {
                a
            } else {
                b
            }
        };
        for (which, name) in [(0, "L_i2t"), (1, "L_t2i")] {
            let g = contrastive(which).backward().unwrap();
            for (part, v) in [("image", &f), ("text", &t), ("logit_scale", &s)] {
                let analytic = g.get(v.as_tensor()).expect("gradient present").clone();
                let err = full_grad_error(v, &analytic, || oracles::scalar(&contrastive(which)));
                bump(&mut worst, &format!("{name}/{part}"), err);
            }
        }

        let id = || id_loss(f.as_tensor(), t.as_tensor(), &labels, c.eps).unwrap();
        let g = id().backward().unwrap();
        for (part, v) in [("feature", &f), ("classifier", &t)] {
            let analytic = g.get(v.as_tensor()).expect("gradient present").clone();
            bump(
                &mut worst,
                &format!("L_id/{part}"),
                full_grad_error(v, &analytic, || oracles::scalar(&id())),
            );
        }

        let proj = || proj_loss(f.as_tensor(), t.as_tensor(), &labels, c.eps).unwrap();
        let g = proj().backward().unwrap();
        assert!(
            g.get(t.as_tensor()).is_none(),
            "the frozen table received a gradient"
        );
        let analytic = g.get(f.as_tensor()).expect("gradient present").clone();
        bump(
            &mut worst,
            "L_proj/feature",
            full_grad_error(&f, &analytic, || oracles::scalar(&proj())),
        );

        let tri = || triplet_loss(f.as_tensor(), &labels, 0.3).unwrap();
        let g = tri().backward().unwrap();
        // an inactive batch has no gradient at all
        if let Some(analytic) = g.get(f.as_tensor()) {
            let analytic = analytic.clone();
            bump(
                &mut worst,
                "L_tri/feature",
                full_grad_error(&f, &analytic, || oracles::scalar(&tri())),
            );
        }
    }
    worst
}

/// Relative gradient error of the weighted stage-2 objective for every tensor
/// stage 2 trains, through a small f64 image encoder, on sampled coordinates.
pub fn stage2_gradient_error(coords_per_tensor: usize) -> BTreeMap<String, f64> {
    let cfg = super::toy_model();
    let dev = Device::Cpu;
    let encoder = ImageEncoder::new(&cfg, &mut rng_for(3, &[]), DType::F64, &dev).unwrap();
    let mut r = oracles::rng(7);
    let labels = oracles::pk_labels(&mut r, 3, 2, 4);
    let b = labels.len();
    let pixels: Vec<f32> = (0..b * cfg.image_height * cfg.image_width * 3)
        .map(|_| r.random())
        .collect();
    let images = images_to_tensor(
        pixels,
        b,
        cfg.image_height,
        cfg.image_width,
        DType::F64,
        &dev,
    )
    .unwrap();
    let frozen = oracles::tensor(&oracles::gaussian_mat(&mut r, 4, cfg.embed_dim));
    let classifier = oracles::var(&oracles::gaussian_mat(&mut r, 4, cfg.embed_dim));
    let pre_classifier = oracles::var(&oracles::gaussian_mat(&mut r, 4, cfg.pre_dim()));
    let weights = LossWeights::default();

    let total = || {
        let out = encoder.encode_images(&images).unwrap();
        let losses = Stage2Losses {
            proj: Some(proj_loss(&out.feat, &frozen, &labels, weights.epsilon).unwrap()),
            id: Some(id_loss(&out.feat, classifier.as_tensor(), &labels, weights.epsilon).unwrap()),
            id_pre: Some(
                id_loss(
                    &out.pre,
                    pre_classifier.as_tensor(),
                    &labels,
                    weights.epsilon,
                )
                .unwrap(),
            ),
            tri: Some(triplet_loss(&out.feat, &labels, weights.triplet_margin).unwrap()),
            tri_pre: Some(triplet_loss(&out.pre, &labels, weights.triplet_margin).unwrap()),
        };
        stage2_total(&losses, &weights).unwrap()
    };
    let grads = total().backward().unwrap();
    let mut learnable: Vec<(String, &Var)> = encoder.named_params();
    learnable.push(("classifier".into(), &classifier));
    learnable.push(("pre_classifier".into(), &pre_classifier));
    let mut out = BTreeMap::new();
    for (name, v) in learnable {
        let analytic = grads
            .get(v.as_tensor())
            .unwrap_or_else(|| panic!("{name} received no gradient"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let coords = oracles::sample_coords(&mut r, v.elem_count(), coords_per_tensor);
        let numeric = oracles::numeric_grad(v, &coords, FD_STEP, || oracles::scalar(&total()));
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        out.insert(name, oracles::relative_error(&picked, &numeric));
    }
    out
}

/// One generated toy domain with a fresh model state; prompts for step 1
/// exist when the method uses them.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub cfg: RunConfig,
    pub domain: DomainSource,
    pub state: ModelState,
}

impl Fixture {
    pub fn new(method: Method) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = super::toy_config(
            dir.path(),
            method,
            vec![super::toy_domain("only", ClothingState::SC, 5, 6)],
        );
        super::generate_all(&cfg);
        let (mut seen, _) = load_sources(&cfg, &AccessAuditor::new()).unwrap();
        let recipe = Recipe::for_method(method);
        let mut state = ModelState::new(
            &cfg.model,
            cfg.train.seed,
            recipe.text_guided,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        if let Some(store) = state.prompts.as_mut() {
            store.init_domain_prompts(1, 6, 9).unwrap();
        }
        Self {
            _dir: dir,
            cfg,
            domain: seen.remove(0),
            state,
        }
    }

    /// Per-identity mean of projected train features, one image at a time.
    pub fn identity_means(&self) -> Mat {
        let ds = self.domain.dataset();
        let (h, w) = (ds.image_height, ds.image_width);
        let d = self.cfg.model.embed_dim;
        let mut sums = vec![vec![0.0f64; d]; ds.num_identities];
        let mut counts = vec![0usize; ds.num_identities];
        for i in ds.split_indices(Split::Train) {
            let pixels = self.domain.source.pixels(&[i]).unwrap();
            let image = images_to_tensor(pixels, 1, h, w, DType::F32, &Device::Cpu).unwrap();
            let feat = self
                .state
                .image
                .encode_images_inference(&image)
                .unwrap()
                .feat;
            let row = oracles::to_mat(&feat).remove(0);
            let y = ds.records[i].identity;
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
            .collect()
    }
}

pub fn row_normalize(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
