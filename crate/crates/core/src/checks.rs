//! Named gradient checks: backward against central differences on random
//! instances of every differentiable building block.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{DEFAULT_ABS_FLOOR, DEFAULT_EPS, DEFAULT_REL_TOL};
use crate::autodiff::{check_input_gradient, check_param_gradients, finite_difference_gradient, relative_error, Graph, ParamStore, Tensor, Var};
use crate::dtrans::{
    group_mask, pair_geometry, positional_encoding, relation_head, sample_gumbel_noise, select_with_noise, spatial_mha, temporal_mha,
    AttentionParams, DTransConfig, PairBatch, RelationHeadParams, UnionFeatures, GEOMETRY_DIM,
};
use crate::error::{Error, Result};
use crate::eval::Task;
use crate::loss::{ar_graph, bce_graph, mlm_graph, object_cross_entropy, total_loss, LossConfig, LossKind};
use crate::matching::BBox;
use crate::model::{Model, ModelConfig};
use crate::synthdata::{generate_dataset, GeneratorConfig};

/// One instance: returns the worst relative error between the analytic and
/// numeric gradient.
pub type CheckFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64> + Send + Sync>;

pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    check: CheckFn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub worst_error: f64,
    pub passed: bool,
    #[serde(skip)]
    pub seconds: f64,
}

pub struct CheckRegistry {
    pub tolerance: f64,
    checks: Vec<GradCheck>,
}

impl Default for CheckRegistry {
    fn default() -> Self {
        Self::empty()
    }
}

impl CheckRegistry {
    pub fn empty() -> Self {
        Self {
            tolerance: DEFAULT_REL_TOL,
            checks: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, instances: usize, check: impl Fn(&mut ChaCha8Rng) -> Result<f64> + Send + Sync + 'static) {
        self.checks.push(GradCheck {
            name: name.into(),
            instances,
            check: Box::new(check),
        });
    }

    pub fn names(&self) -> Vec<&str> {
        self.checks.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.checks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checks.is_empty()
    }

    /// Every built-in check with `instances` random draws each.
    pub fn standard(instances: usize) -> Self {
        let mut r = Self::empty();
        r.register("graph.primitives", instances, primitives);
        r.register("dtrans.temporal_attention", instances, temporal_attention);
        r.register("dtrans.spatial_attention", instances, spatial_attention);
        r.register("dtrans.selector_soft_path", instances, selector_soft_path);
        r.register("dtrans.relation_head", instances, relation_head_check);
        for kind in [LossKind::Bce, LossKind::Focal, LossKind::Mlm, LossKind::Ar] {
            r.register(format!("loss.{kind}"), instances, move |rng| relation_loss(rng, kind));
        }
        r.register("loss.object_cross_entropy", instances, object_ce);
        r.register("model.sgcls_end_to_end", instances, end_to_end);
        r
    }

    /// Keeps only checks whose name contains `filter`.
    pub fn retain(&mut self, filter: &str) {
        self.checks.retain(|c| c.name.contains(filter));
    }

    /// Runs every check; instance `i` of check `c` draws from its own stream of `seed`.
    pub fn run(&self, seed: u64) -> Result<Vec<CheckOutcome>> {
        if self.checks.is_empty() {
            return Err(Error::contract("no checks registered"));
        }
        self.checks
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                let start = Instant::now();
                let mut worst = 0.0f64;
                for i in 0..c.instances {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((ci as u64) << 32) | i as u64);
                    let err = (c.check)(&mut rng)?;
                    worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
                }
                Ok(CheckOutcome {
                    name: c.name.clone(),
                    instances: c.instances,
                    worst_error: worst,
                    passed: worst <= self.tolerance,
                    seconds: start.elapsed().as_secs_f64(),
                })
            })
            .collect()
    }
}

/// A check whose analytic gradient is scaled by `1 + bias`; used to confirm
/// the harness notices wrong gradients.
pub fn corrupted_check(bias: f64) -> impl Fn(&mut ChaCha8Rng) -> Result<f64> + Send + Sync {
    move |rng| {
        let x = random(2, 3, rng);
        let build = |g: &mut Graph<f64>, xv: Var| -> Result<Var> {
            let e = g.exp(xv);
            let sq = g.mul(e, xv)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let loss = build(&mut g, xv)?;
        let analytic = g.backward(loss)?.wrt(&g, xv).map(|v| v * (1.0 + bias));
        let numeric = finite_difference_gradient(
            |t| {
                let mut g = Graph::new();
                let xv = g.variable(t.clone());
                let l = build(&mut g, xv)?;
                Ok(g.value(l).item())
            },
            &x,
            DEFAULT_EPS,
        )?;
        Ok(relative_error(&analytic, &numeric, DEFAULT_ABS_FLOOR))
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_targets(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).expect("shape");
    // At least one positive per row so every loss term is exercised.
    for r in 0..rows {
        let c = rng.random_range(0..cols);
        t.set(r, c, 1.0);
    }
    t
}

fn readout(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn primitives(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(3, 4, rng);
    let b = random(4, 2, rng);
    let row = random(1, 4, rng);
    let w = random(3, 6, rng);
    check_input_gradient(&x, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, xv| {
        let bv = g.constant(b.clone());
        let rv = g.constant(row.clone());
        let shifted = g.add(xv, rv)?;
        let scaled = g.mul(shifted, rv)?;
        let diff = g.sub(scaled, xv)?;
        let m = g.matmul(diff, bv)?;
        let t = g.transpose(m)?;
        let sm0 = g.softmax(t, 0)?;
        let sm1 = g.softmax(xv, 1)?;
        let lg = g.log(sm1);
        let sg = g.sigmoid(xv);
        let ex = g.exp(sg);
        let ge = g.gelu(diff);
        let ln = g.layer_norm(ge)?;
        let sq = g.pow(sg, 2.5);
        let r = g.rsub_scalar(1.0, sq);
        let a = g.add_scalar(r, 0.5);
        let re = g.relu(xv);
        let sl = g.slice_cols(ln, 1, 2)?;
        let gathered = g.gather_rows(ex, &[2, 0, 2])?;
        let cat = g.concat(&[sl, gathered], 1)?;
        let rs = g.reshape(cat, 3, 6)?;
        let smt = g.transpose(sm0)?;
        let left = g.concat(&[smt, lg], 1)?;
        let all = g.add(rs, left)?;
        let extra_cols = g.slice_cols(a, 0, 2)?;
        let widened = g.concat(&[a, extra_cols], 1)?;
        let all = g.mul(all, widened)?;
        let extra = g.mean(re);
        let body = readout(g, all, &w)?;
        let total = g.add(body, extra)?;
        Ok(g.scalar_mul(total, 0.7))
    })
}

fn attention_setup(rng: &mut ChaCha8Rng, dim: usize) -> (ParamStore<f64>, Vec<AttentionParams>) {
    let mut store = ParamStore::new();
    let layers = AttentionParams::register_stack(&mut store, "blk", 2, dim, 2 * dim, rng);
    (store, layers)
}

fn temporal_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (store, layers) = attention_setup(rng, 4);
    let x = random(3, 4, rng);
    let mem = random(6, 4, rng);
    let e = random(1, 4, rng);
    let w = random(3, 4, rng);
    let mask = group_mask(&[0, 1, 2], &[0, 0, 1, 1, 2, 2])?;
    check_param_gradients(&store, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, s| {
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let out = temporal_mha(g, s, &layers, 2, xv, &e, mv, &mask)?;
        readout(g, out, &w)
    })
}

fn spatial_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (store, layers) = attention_setup(rng, 4);
    let x = random(5, 4, rng);
    let w = random(5, 4, rng);
    let param_err = check_param_gradients(&store, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, s| {
        let xv = g.constant(x.clone());
        let out = spatial_mha(g, s, &layers, 2, xv, &[0, 0, 1, 1, 1])?;
        readout(g, out, &w)
    })?;
    let input_err = check_input_gradient(&x, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, xv| {
        let out = spatial_mha(g, &store, &layers, 2, xv, &[0, 0, 1, 1, 1])?;
        readout(g, out, &w)
    })?;
    Ok(param_err.max(input_err))
}

fn selector_soft_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(2..6);
    let k = rng.random_range(1..5);
    let noise: Tensor<f64> = sample_gumbel_noise(k, n, rng);
    let z = random(n, 4, rng);
    let offsets: Vec<i64> = (0..n as i64).map(|i| i - 2).collect();
    let e = positional_encoding::<f64>(&offsets, 4)?;
    let x = random(1, 4, rng);
    let w = random(k, 4, rng);
    let tau = rng.random_range(0.5..1.5);
    let wrt_query = check_input_gradient(&x, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, xv| {
        let zv = g.constant(z.clone());
        let sel = select_with_noise(g, xv, zv, &e, &noise, tau, false)?;
        readout(g, sel.rows, &w)
    })?;
    let wrt_neighbors = check_input_gradient(&z, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, zv| {
        let xv = g.constant(x.clone());
        let sel = select_with_noise(g, xv, zv, &e, &noise, tau, false)?;
        readout(g, sel.rows, &w)
    })?;
    Ok(wrt_query.max(wrt_neighbors))
}

fn random_box(rng: &mut impl Rng) -> BBox<f64> {
    let (x, y) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    BBox::new(x, y, x + rng.random_range(0.1..1.0), y + rng.random_range(0.1..1.0)).expect("ordered box")
}

fn relation_head_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    const DIM: usize = 2;
    let mut store = ParamStore::new();
    let p = RelationHeadParams::register(&mut store, DIM, None, 3, 4, 1, 1, rng);
    let x = random(4, DIM, rng);
    let boxes: Vec<_> = (0..4).map(|_| random_box(rng)).collect();
    let subjects = vec![0, 1, 2, 3];
    let objects = vec![1, 0, 3, 2];
    let geom: Vec<f64> = subjects.iter().zip(&objects).flat_map(|(&s, &o)| pair_geometry(&boxes[s], &boxes[o])).collect();
    let batch = PairBatch {
        subjects,
        objects,
        frames: vec![0, 0, 1, 1],
        tracks: vec![0, 1, 0, 1],
        subject_classes: (0..4).map(|_| rng.random_range(0..3)).collect(),
        object_classes: (0..4).map(|_| rng.random_range(0..3)).collect(),
        union: UnionFeatures::Geometry(Tensor::matrix(4, GEOMETRY_DIM, geom)?),
    };
    let targets = random_targets(4, 4, rng);
    check_param_gradients(&store, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, s| {
        let xv = g.constant(x.clone());
        let scores = relation_head(g, s, &p, 1, xv, xv, &batch)?;
        bce_graph(g, scores, &targets)
    })
}

fn relation_loss(rng: &mut ChaCha8Rng, kind: LossKind) -> Result<f64> {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(2..7));
    let logits = random(rows, cols, rng).map(|v| 3.0 * v);
    let targets = random_targets(rows, cols, rng);
    let cfg = LossConfig {
        kind,
        gamma: rng.random_range(0.0..3.0),
        gamma_pos: rng.random_range(0.0..2.0),
        gamma_neg: rng.random_range(2.0..5.0),
        beta: rng.random_range(0.5..0.9999),
        margin: 0.5,
        class_counts: (0..cols).map(|_| rng.random_range(1..200)).collect(),
        ..LossConfig::default()
    };
    let weights = Tensor::row(cfg.class_weights::<f64>(cols)?);
    check_input_gradient(&logits, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, lv| {
        let scores = g.sigmoid(lv);
        match kind {
            LossKind::Bce => bce_graph(g, scores, &targets),
            LossKind::Focal => ar_graph(g, scores, &targets, &Tensor::ones(1, cols), cfg.gamma, cfg.gamma),
            LossKind::Ar => ar_graph(g, scores, &targets, &weights, cfg.gamma_pos, cfg.gamma_neg),
            LossKind::Mlm => mlm_graph(g, scores, &targets, cfg.margin),
        }
    })
}

fn object_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, cols) = (rng.random_range(1..6), rng.random_range(2..8));
    let logits = random(rows, cols, rng).map(|v| 4.0 * v);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    check_input_gradient(&logits, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, lv| object_cross_entropy(g, lv, &labels))
}

/// Whole SGCLS model without the selector, whose hard sampling has no
/// finite-difference counterpart.
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<f64> {
    let gen = GeneratorConfig {
        num_videos: 1,
        num_test_videos: 0,
        frames_per_video: 2,
        min_objects: 2,
        max_objects: 3,
        num_classes: 3,
        num_predicates: 3,
        feature_dim: 3,
        union_dim: 2,
        predicate_groups: 1,
        seed: rng.random(),
        ..GeneratorConfig::default()
    };
    let data = generate_dataset(&gen)?.train;
    let config = ModelConfig {
        use_dtrans: false,
        dtrans: DTransConfig {
            dim: 2,
            heads: 1,
            temporal_depth: 1,
            spatial_depth: 1,
            relation_depth: 1,
            top_k: 1,
            tau: 1.0,
            ffn_mult: 1,
        },
        ..ModelConfig::default()
    };
    let model: Model<f64> = Model::new(config, Task::SgCls, data.meta.clone(), rng.random())?;
    let video = model.prepare(&data.videos[0])?;
    let loss_cfg = LossConfig {
        kind: LossKind::Ar,
        class_counts: data.predicate_counts(),
        ..LossConfig::default()
    };
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    check_param_gradients(&model.params, DEFAULT_EPS, DEFAULT_ABS_FLOOR, |g, s| {
        let out = model.forward_with(g, s, &video, &mut unused)?;
        let objects = out.object_logits.map(|l| (l, video.labels.as_slice()));
        let relations = match (out.scores, &video.pairs) {
            (Some(sc), Some(p)) => Some((sc, &p.targets)),
            _ => None,
        };
        total_loss(g, objects, relations, &loss_cfg)
    })
}
