//! The full per-video network: input projection, tracklet-guided Top-K
//! selection, temporal and spatial attention, object classifier, and the
//! relation head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::dtrans::{
    group_mask, gumbel_topk_select, pair_geometry, positional_encoding, relation_head, spatial_mha, temporal_mha,
    AttentionParams, DTransConfig, PairBatch, RelationHeadParams, UnionFeatures, GEOMETRY_DIM,
};
use crate::error::{Error, Result};
use crate::eval::{EvalFrame, EvalVideo, FramePrediction, GroundTruthFrame, Task};
use crate::matching::{build_neighborhood, link_objects, BBox, ObjectProposal, ProposalRef, DEFAULT_LINK_THRESHOLD};
use crate::scalar::Scalar;
use crate::synthdata::{ordered_pairs, Dataset, DatasetMeta, VideoSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Run the Top-K selector and temporal attention; spatial attention and
    /// the relation head run either way.
    pub use_dtrans: bool,
    pub link_threshold: f64,
    /// Use precomputed union features when the dataset has them.
    pub use_precomputed_union: bool,
    pub dtrans: DTransConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_dtrans: true,
            link_threshold: DEFAULT_LINK_THRESHOLD,
            use_precomputed_union: true,
            dtrans: DTransConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dtrans.validate()?;
        if !self.link_threshold.is_finite() {
            return Err(Error::Config("link_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ModelIds {
    w_in: ParamId,
    b_in: ParamId,
    temporal: Vec<AttentionParams>,
    spatial: Vec<AttentionParams>,
    obj_w: ParamId,
    obj_b: ParamId,
    relation: RelationHeadParams,
}

/// Parameters plus the structural settings needed to run them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub task: Task,
    pub meta: DatasetMeta,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, task: Task, meta: DatasetMeta, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = &config.dtrans;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w_in = store.add_glorot("input.w", meta.feature_dim, d.dim, &mut rng);
        let b_in = store.add_filled("input.b", 1, d.dim, T::zero());
        let temporal = if config.use_dtrans {
            AttentionParams::register_stack(&mut store, "temporal", d.temporal_depth, d.dim, d.ffn_dim(), &mut rng)
        } else {
            Vec::new()
        };
        let spatial = AttentionParams::register_stack(&mut store, "spatial", d.spatial_depth, d.dim, d.ffn_dim(), &mut rng);
        let obj_w = store.add_glorot("object.w", d.dim, meta.num_classes, &mut rng);
        let obj_b = store.add_filled("object.b", 1, meta.num_classes, T::zero());
        let union_dim = if config.use_precomputed_union { meta.union_dim } else { None };
        let relation = RelationHeadParams::register(
            &mut store,
            d.dim,
            union_dim,
            meta.num_classes,
            meta.num_predicates,
            d.relation_depth,
            d.ffn_mult,
            &mut rng,
        );
        Ok(Self {
            config,
            task,
            meta,
            params: store,
            ids: ModelIds {
                w_in,
                b_in,
                temporal,
                spatial,
                obj_w,
                obj_b,
                relation,
            },
        })
    }

    fn uses_precomputed_union(&self) -> bool {
        self.config.use_precomputed_union && self.meta.union_dim.is_some()
    }

    /// Converts one video into the tensors and index tables the forward pass
    /// needs. Linking and neighborhoods depend only on the data, so this runs
    /// once per video.
    pub fn prepare(&self, video: &VideoSample) -> Result<PreparedVideo<T>> {
        prepare_video(self, video)
    }

    pub fn prepare_all(&self, dataset: &Dataset) -> Result<Vec<PreparedVideo<T>>> {
        if dataset.meta.feature_dim != self.meta.feature_dim
            || dataset.meta.num_classes != self.meta.num_classes
            || dataset.meta.num_predicates != self.meta.num_predicates
        {
            return Err(Error::contract("dataset dimensions do not match the model"));
        }
        dataset.videos.par_iter().map(|v| self.prepare(v)).collect()
    }

    /// Builds the forward graph of one video.
    pub fn forward(&self, g: &mut Graph<T>, video: &PreparedVideo<T>, rng: &mut impl Rng) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, video, rng)
    }

    /// [`Model::forward`] with parameter values taken from `store`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        video: &PreparedVideo<T>,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        if store.len() != self.params.len() {
            return Err(Error::contract("parameter store does not match the model layout"));
        }
        let d = &self.config.dtrans;
        let raw_in = g.constant(video.features.clone());
        let w_in = g.param(store, self.ids.w_in);
        let b_in = g.param(store, self.ids.b_in);
        let x = g.matmul(raw_in, w_in)?;
        let x = g.add(x, b_in)?;

        let stream = if self.config.use_dtrans {
            let tau = T::lit(d.tau);
            let mut selected = Vec::with_capacity(video.rows());
            for (r, nb) in video.neighborhoods.iter().enumerate() {
                let xi = g.gather_rows(x, &[r])?;
                let neighbors = match nb {
                    Some((rows, pe)) => Some((g.gather_rows(x, rows)?, pe)),
                    None => None,
                };
                selected.push(gumbel_topk_select(g, xi, neighbors, d.top_k, tau, rng)?.rows);
            }
            let memory = g.concat(&selected, 0)?;
            let origin = positional_encoding::<T>(&[0], d.dim)?;
            temporal_mha(g, store, &self.ids.temporal, d.heads, x, &origin, memory, &video.memory_mask)?
        } else {
            x
        };
        let refined = spatial_mha(g, store, &self.ids.spatial, d.heads, stream, &video.frame_of_row)?;

        let (object_logits, labels) = match self.task {
            Task::PredCls => (None, video.labels.clone()),
            Task::SgCls => {
                let w = g.param(store, self.ids.obj_w);
                let b = g.param(store, self.ids.obj_b);
                let l = g.matmul(refined, w)?;
                let l = g.add(l, b)?;
                let v = g.value(l);
                let predicted = (0..v.rows())
                    .map(|r| {
                        let row = v.row_slice(r);
                        (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
                    })
                    .collect();
                (Some(l), predicted)
            }
        };

        let scores = match &video.pairs {
            None => None,
            Some(p) => {
                let batch = PairBatch {
                    subjects: p.subjects.clone(),
                    objects: p.objects.clone(),
                    frames: p.frames.clone(),
                    tracks: p.tracks.clone(),
                    subject_classes: p.subjects.iter().map(|&s| labels[s]).collect(),
                    object_classes: p.objects.iter().map(|&o| labels[o]).collect(),
                    union: p.union.clone(),
                };
                Some(relation_head(g, store, &self.ids.relation, d.heads, refined, x, &batch)?)
            }
        };
        Ok(ForwardOutput {
            object_logits,
            scores,
            labels,
        })
    }

    /// Scores every frame of `video` and pairs the result with its ground truth.
    pub fn predict(&self, video: &PreparedVideo<T>, rng: &mut impl Rng) -> Result<EvalVideo> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, video, rng)?;
        let label_scores: Vec<f64> = match out.object_logits {
            None => vec![1.0; video.rows()],
            Some(l) => {
                let v = g.value(l);
                (0..v.rows())
                    .map(|r| {
                        let row = v.row_slice(r);
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&x| (x - max).exp()).sum();
                        (T::one() / z).as_f64()
                    })
                    .collect()
            }
        };
        let scores = out.scores.map(|s| g.value(s).clone());

        let mut frames = Vec::with_capacity(video.truth.len());
        for (f, truth) in video.truth.iter().enumerate() {
            let start = video.frame_starts[f];
            let n = truth.labels.len();
            let mut pairs = Vec::new();
            let mut predicate_scores = Vec::new();
            if let (Some(layout), Some(s)) = (&video.pairs, &scores) {
                for (k, &(pf, ls, lo)) in layout.local.iter().enumerate() {
                    if pf == f {
                        pairs.push((ls, lo));
                        predicate_scores.push(s.row_slice(k).iter().map(|v| v.as_f64()).collect());
                    }
                }
            }
            frames.push(EvalFrame {
                prediction: FramePrediction {
                    labels: out.labels[start..start + n].to_vec(),
                    label_scores: label_scores[start..start + n].to_vec(),
                    pairs,
                    predicate_scores,
                },
                truth: truth.clone(),
            });
        }
        Ok(EvalVideo { frames })
    }

    /// Predictions for every prepared video, in order. Each video samples
    /// from its own stream derived from `seed`.
    pub fn predict_all(&self, videos: &[PreparedVideo<T>], seed: u64) -> Result<Vec<EvalVideo>> {
        videos
            .par_iter()
            .enumerate()
            .map(|(i, v)| self.predict(v, &mut derived_rng(seed, RngPurpose::Eval, 0, i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum RngPurpose {
    Shuffle = 1,
    Train = 2,
    Eval = 3,
}

/// Independent ChaCha stream for `(seed, purpose, epoch, video)`.
pub fn derived_rng(seed: u64, purpose: RngPurpose, epoch: usize, video: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | ((epoch as u64) << 32) | video as u64);
    rng
}

pub struct ForwardOutput {
    /// `objects x classes` logits (SGCLS only).
    pub object_logits: Option<Var>,
    /// `pairs x P` predicate scores; `None` when no frame has two objects.
    pub scores: Option<Var>,
    /// Class used for each object row (ground truth or predicted).
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PairLayout<T> {
    pub subjects: Vec<usize>,
    pub objects: Vec<usize>,
    pub frames: Vec<usize>,
    pub tracks: Vec<usize>,
    /// `(frame, local subject, local object)` of each pair.
    pub local: Vec<(usize, usize, usize)>,
    pub union: UnionFeatures<T>,
    /// `pairs x P` multi-hot targets.
    pub targets: Tensor<T>,
}

/// One video converted for the model.
#[derive(Clone, Debug)]
pub struct PreparedVideo<T> {
    pub id: String,
    /// `objects x feature_dim`, frames stacked in order.
    pub features: Tensor<T>,
    pub frame_of_row: Vec<usize>,
    pub frame_starts: Vec<usize>,
    pub labels: Vec<usize>,
    /// Rows of aligned objects and their encodings, per object row.
    pub neighborhoods: Vec<Option<(Vec<usize>, Tensor<T>)>>,
    /// Restricts each object to its own `K` selected rows.
    pub memory_mask: Tensor<T>,
    pub pairs: Option<PairLayout<T>>,
    pub truth: Vec<GroundTruthFrame>,
}

impl<T> PreparedVideo<T> {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

fn bbox<T: Scalar>(b: &[f64; 4]) -> Result<BBox<T>> {
    BBox::new(T::lit(b[0]), T::lit(b[1]), T::lit(b[2]), T::lit(b[3]))
}

fn prepare_video<T: Scalar>(model: &Model<T>, video: &VideoSample) -> Result<PreparedVideo<T>> {
    let meta = &model.meta;
    let fd = meta.feature_dim;
    let dim = model.config.dtrans.dim;
    let k = model.config.dtrans.top_k;
    let ctx = |e: Error| Error::contract(format!("video {}: {e}", video.id));

    let non_empty: Vec<usize> = (0..video.frames.len()).filter(|&f| !video.frames[f].objects.is_empty()).collect();
    if non_empty.is_empty() {
        return Err(Error::contract(format!("video {} has no objects", video.id)));
    }

    let mut features = Vec::new();
    let mut frame_of_row = Vec::new();
    let mut frame_starts = Vec::with_capacity(video.frames.len());
    let mut labels = Vec::new();
    let mut proposals: Vec<Vec<ObjectProposal<T>>> = Vec::with_capacity(non_empty.len());
    let mut truth = Vec::with_capacity(video.frames.len());
    for (fi, frame) in video.frames.iter().enumerate() {
        frame_starts.push(labels.len());
        let mut props = Vec::with_capacity(frame.objects.len());
        for (i, obj) in frame.objects.iter().enumerate() {
            features.extend(frame.appearance_row(i, fd).iter().map(|&v| T::lit(v as f64)));
            frame_of_row.push(fi);
            labels.push(obj.label);
            let class_scores = match model.task {
                Task::PredCls => (0..meta.num_classes).map(|c| if c == obj.label { T::one() } else { T::zero() }).collect(),
                Task::SgCls => obj.class_scores.iter().map(|&s| T::lit(s)).collect(),
            };
            props.push(ObjectProposal {
                frame: fi,
                appearance: Vec::new(),
                bbox: bbox(&obj.bbox)?,
                class_scores,
                label: Some(obj.label),
            });
        }
        if !props.is_empty() {
            proposals.push(props);
        }
        truth.push(GroundTruthFrame {
            labels: frame.objects.iter().map(|o| o.label).collect(),
            relations: frame.relations.clone(),
        });
    }
    let rows = labels.len();
    let features = Tensor::matrix(rows, fd, features)?;

    // Proposal lists skip empty frames; map list positions back to rows.
    let row_of = |r: ProposalRef| frame_starts[non_empty[r.frame]] + r.index;
    let tracklets = link_objects(&proposals, T::lit(model.config.link_threshold)).map_err(ctx)?;
    let mut track_of_row = vec![0usize; rows];
    for (t, tr) in tracklets.iter().enumerate() {
        for &m in &tr.members {
            track_of_row[row_of(m)] = t;
        }
    }

    let mut neighborhoods = vec![None; rows];
    if model.config.use_dtrans {
        for (list_pos, frame) in proposals.iter().enumerate() {
            for index in 0..frame.len() {
                let target = ProposalRef { frame: list_pos, index };
                let nb = build_neighborhood(&tracklets, &proposals, target).map_err(ctx)?;
                if nb.is_empty() {
                    continue;
                }
                let aligned = nb.aligned.iter().map(|&r| row_of(r)).collect();
                neighborhoods[row_of(target)] = Some((aligned, positional_encoding(&nb.offsets, dim)?));
            }
        }
    }
    let owners: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, k)).collect();
    let memory_mask = group_mask(&(0..rows).collect::<Vec<_>>(), &owners)?;

    let pairs = prepare_pairs(model, video, &frame_starts, &track_of_row)?;
    Ok(PreparedVideo {
        id: video.id.clone(),
        features,
        frame_of_row,
        frame_starts,
        labels,
        neighborhoods,
        memory_mask,
        pairs,
        truth,
    })
}

fn prepare_pairs<T: Scalar>(
    model: &Model<T>,
    video: &VideoSample,
    frame_starts: &[usize],
    track_of_row: &[usize],
) -> Result<Option<PairLayout<T>>> {
    let meta = &model.meta;
    let precomputed = model.uses_precomputed_union();
    let (mut subjects, mut objects, mut frames, mut tracks, mut local) = (vec![], vec![], vec![], vec![], vec![]);
    let mut union = Vec::new();
    let mut targets = Vec::new();
    let mut track_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    for (fi, frame) in video.frames.iter().enumerate() {
        let n = frame.objects.len();
        let start = frame_starts[fi];
        for (pi, (s, o)) in ordered_pairs(n).into_iter().enumerate() {
            let (rs, ro) = (start + s, start + o);
            subjects.push(rs);
            objects.push(ro);
            frames.push(fi);
            let next = track_ids.len();
            tracks.push(*track_ids.entry((track_of_row[rs], track_of_row[ro])).or_insert(next));
            local.push((fi, s, o));
            if precomputed {
                let u = meta.union_dim.unwrap_or(0);
                let feats = frame.union.as_ref().ok_or_else(|| {
                    Error::contract(format!("video {} frame {fi} lacks union features", video.id))
                })?;
                union.extend(feats[pi * u..(pi + 1) * u].iter().map(|&v| T::lit(v as f64)));
            } else {
                let g = pair_geometry(&bbox::<T>(&frame.objects[s].bbox)?, &bbox::<T>(&frame.objects[o].bbox)?);
                union.extend(g);
            }
            let mut row = vec![T::zero(); meta.num_predicates];
            for &(rs_, p, ro_) in &frame.relations {
                if rs_ == s && ro_ == o {
                    row[p] = T::one();
                }
            }
            targets.extend(row);
        }
    }
    if subjects.is_empty() {
        return Ok(None);
    }
    let count = subjects.len();
    let union = if precomputed {
        UnionFeatures::Precomputed(Tensor::matrix(count, meta.union_dim.unwrap_or(0), union)?)
    } else {
        UnionFeatures::Geometry(Tensor::matrix(count, GEOMETRY_DIM, union)?)
    };
    Ok(Some(PairLayout {
        subjects,
        objects,
        frames,
        tracks,
        local,
        union,
        targets: Tensor::matrix(count, meta.num_predicates, targets)?,
    }))
}
