use rand::Rng;

use super::attention::{attention_block, group_mask, AttentionParams};
use super::encoding::positional_encoding;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{iou, BBox};
use crate::scalar::Scalar;

/// Length of the box-pair geometry vector from [`pair_geometry`].
pub const GEOMETRY_DIM: usize = 5;

/// IoU, subject-normalised center offset, and log width/height ratios.
pub fn pair_geometry<T: Scalar>(subject: &BBox<T>, object: &BBox<T>) -> [T; GEOMETRY_DIM] {
    let tiny = T::lit(1e-6);
    let (sw, sh) = (subject.width().max(tiny), subject.height().max(tiny));
    let (ow, oh) = (object.width().max(tiny), object.height().max(tiny));
    let (scx, scy) = subject.center();
    let (ocx, ocy) = object.center();
    [
        iou(subject, object),
        (ocx - scx) / sw,
        (ocy - scy) / sh,
        (ow / sw).ln(),
        (oh / sh).ln(),
    ]
}

/// Source of the union feature `x_ij` for each pair.
#[derive(Clone, Debug)]
pub enum UnionFeatures<T> {
    /// Precomputed `pairs x U` features supplied with the data.
    Precomputed(Tensor<T>),
    /// `pairs x 5` box geometry; combined with both object features and projected.
    Geometry(Tensor<T>),
}

/// Every candidate pair of one video, in a fixed order.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    /// Row of the subject in the object feature matrices.
    pub subjects: Vec<usize>,
    pub objects: Vec<usize>,
    /// Position of the pair's frame in the video.
    pub frames: Vec<usize>,
    /// Pairs sharing a value belong to the same tracklet pair.
    pub tracks: Vec<usize>,
    pub subject_classes: Vec<usize>,
    pub object_classes: Vec<usize>,
    pub union: UnionFeatures<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.objects.len(),
            self.frames.len(),
            self.tracks.len(),
            self.subject_classes.len(),
            self.object_classes.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::contract("pair batch fields disagree in length"));
        }
        let union_rows = match &self.union {
            UnionFeatures::Precomputed(t) | UnionFeatures::Geometry(t) => t.rows(),
        };
        if union_rows != n {
            return Err(Error::shape("pair_batch", &[n], &[union_rows]));
        }
        Ok(())
    }
}

/// Projections, class embeddings, pair-level attention, and the classifier.
#[derive(Clone, Debug)]
pub struct RelationHeadParams {
    pub w_s: ParamId,
    pub w_o: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub embedding: ParamId,
    pub temporal: Vec<AttentionParams>,
    pub spatial: Vec<AttentionParams>,
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
    /// Width of the concatenated pair feature (`4 D`).
    pub pair_dim: usize,
}

impl RelationHeadParams {
    /// `union_dim` is the width of precomputed union features, or `None` to
    /// derive them from object features and geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        dim: usize,
        union_dim: Option<usize>,
        num_classes: usize,
        num_predicates: usize,
        depth: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pair_dim = 4 * dim;
        let union_in = union_dim.unwrap_or(2 * dim + GEOMETRY_DIM);
        Self {
            w_s: store.add_glorot("rel.w_s", dim, dim, rng),
            w_o: store.add_glorot("rel.w_o", dim, dim, rng),
            w_u: store.add_glorot("rel.w_u", union_in, dim, rng),
            b_u: store.add_filled("rel.b_u", 1, dim, T::zero()),
            embedding: store.add_glorot("rel.class_embedding", num_classes, dim / 2, rng),
            temporal: AttentionParams::register_stack(store, "rel.temporal", depth, pair_dim, ffn_mult * pair_dim, rng),
            spatial: AttentionParams::register_stack(store, "rel.spatial", depth, pair_dim, ffn_mult * pair_dim, rng),
            classifier: store.add_glorot("rel.classifier", pair_dim, num_predicates, rng),
            classifier_bias: store.add_filled("rel.classifier_bias", 1, num_predicates, T::zero()),
            pair_dim,
        }
    }
}

/// Predicate scores (`pairs x P`, each in `(0, 1)`) for every pair in `batch`.
/// `refined` are the attention-refined object features and `raw` the
/// projected input features, both `objects x D`.
pub fn relation_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &RelationHeadParams,
    heads: usize,
    refined: Var,
    raw: Var,
    batch: &PairBatch<T>,
) -> Result<Var> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::contract("relation head called with no pairs"));
    }
    if g.shape(refined) != g.shape(raw) {
        return Err(Error::shape("relation_head", g.shape(refined), g.shape(raw)));
    }

    let (w_s, w_o) = (g.param(store, p.w_s), g.param(store, p.w_o));
    let xs = g.gather_rows(refined, &batch.subjects)?;
    let xo = g.gather_rows(refined, &batch.objects)?;
    let subj = g.matmul(xs, w_s)?;
    let obj = g.matmul(xo, w_o)?;

    let union_in = match &batch.union {
        UnionFeatures::Precomputed(t) => g.constant(t.clone()),
        UnionFeatures::Geometry(t) => {
            let rs = g.gather_rows(raw, &batch.subjects)?;
            let ro = g.gather_rows(raw, &batch.objects)?;
            let geo = g.constant(t.clone());
            g.concat(&[rs, ro, geo], 1)?
        }
    };
    let (w_u, b_u) = (g.param(store, p.w_u), g.param(store, p.b_u));
    let union = g.matmul(union_in, w_u)?;
    let union = g.add(union, b_u)?;

    let table = g.param(store, p.embedding);
    let cs = g.gather_rows(table, &batch.subject_classes)?;
    let co = g.gather_rows(table, &batch.object_classes)?;

    let mut stream = g.concat(&[subj, obj, union, cs, co], 1)?;
    if g.shape(stream)[1] != p.pair_dim {
        return Err(Error::shape("relation_head", g.shape(stream), &[batch.len(), p.pair_dim]));
    }

    let offsets: Vec<i64> = batch.frames.iter().map(|&f| f as i64).collect();
    let pe = g.constant(positional_encoding(&offsets, p.pair_dim)?);
    let temporal_mask = group_mask(&batch.tracks, &batch.tracks)?;
    let spatial_mask = group_mask(&batch.frames, &batch.frames)?;
    for (t, s) in p.temporal.iter().zip(&p.spatial) {
        let query = g.add(stream, pe)?;
        stream = attention_block(g, store, t, heads, stream, query, query, Some(&temporal_mask))?;
        stream = attention_block(g, store, s, heads, stream, stream, stream, Some(&spatial_mask))?;
    }

    let (wc, bc) = (g.param(store, p.classifier), g.param(store, p.classifier_bias));
    let logits = g.matmul(stream, wc)?;
    let logits = g.add(logits, bc)?;
    Ok(g.sigmoid(logits))
}
