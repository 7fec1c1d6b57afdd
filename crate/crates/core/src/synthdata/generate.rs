use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ordered_pairs, Dataset, DatasetMeta, FrameSample, ObjectAnnotation, VideoSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub frames_per_video: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    /// Width of precomputed union features; 0 omits them.
    pub union_dim: usize,
    /// Zipf exponent of the predicate distribution.
    pub zipf_alpha: f64,
    /// Probability that an ordered pair carries at least one predicate.
    pub positive_rate: f64,
    /// Probability that a positive pair carries a second, distinct predicate.
    pub second_predicate_rate: f64,
    /// Probability that an (object, frame) appearance is corrupted.
    pub noise_rate: f64,
    /// Norm of the corruption added to a corrupted appearance.
    pub noise_scale: f64,
    /// Expected norm of the clean appearance jitter.
    pub jitter: f64,
    /// Expected norm of the noise added to union features.
    pub union_noise: f64,
    /// Share of a predicate prototype common to its group, in `[0, 1)`.
    pub predicate_similarity: f64,
    pub predicate_groups: usize,
    /// Weight of the subject's predicates in its appearance.
    pub context_strength: f64,
    pub detector_strength: f64,
    pub detector_noise: f64,
    /// Per-frame standard deviation of box motion.
    pub box_speed: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            num_test_videos: 50,
            frames_per_video: 8,
            min_objects: 2,
            max_objects: 4,
            num_classes: 10,
            num_predicates: 20,
            feature_dim: 32,
            union_dim: 32,
            zipf_alpha: 1.2,
            positive_rate: 0.5,
            second_predicate_rate: 0.2,
            noise_rate: 0.0,
            noise_scale: 3.0,
            jitter: 0.1,
            union_noise: 1.0,
            predicate_similarity: 0.5,
            predicate_groups: 3,
            context_strength: 0.3,
            detector_strength: 3.0,
            detector_noise: 1.0,
            box_speed: 0.02,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::contract(format!("generator config: {m}")));
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return fail("num_videos and frames_per_video must be at least 1");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail("need 1 <= min_objects <= max_objects");
        }
        if self.num_classes == 0 || self.num_predicates == 0 || self.feature_dim == 0 {
            return fail("class, predicate and feature counts must be at least 1");
        }
        if self.predicate_groups == 0 {
            return fail("predicate_groups must be at least 1");
        }
        if !(self.zipf_alpha >= 0.0) {
            return fail("zipf_alpha must be non-negative");
        }
        for (name, r) in [
            ("positive_rate", self.positive_rate),
            ("second_predicate_rate", self.second_predicate_rate),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.predicate_similarity) {
            return fail("predicate_similarity must lie in [0, 1)");
        }
        let scales = [
            self.noise_scale,
            self.jitter,
            self.union_noise,
            self.context_strength,
            self.detector_strength,
            self.detector_noise,
            self.box_speed,
        ];
        if scales.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return fail("noise and strength parameters must be finite and non-negative");
        }
        Ok(())
    }
}

/// Probability of predicate `p` under a Zipf law: proportional to `(p + 1)^-alpha`.
pub fn zipf_probabilities(num_predicates: usize, alpha: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..num_predicates).map(|p| (p as f64 + 1.0).powf(-alpha)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Ground-truth quantities behind one generated video, for verification.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTrace {
    /// Noise-free appearance of each object (class prototype plus context).
    pub prototypes: Vec<Vec<f64>>,
    /// `corrupted[frame][object]`.
    pub corrupted: Vec<Vec<bool>>,
    /// Predicate sets of every ordered pair, `pair_predicates[s][o]`.
    pub pair_predicates: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub train: Vec<VideoTrace>,
    pub test: Vec<VideoTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
    pub trace: GenerationTrace,
}

struct Prototypes {
    classes: Vec<Vec<f64>>,
    predicate_context: Vec<Vec<f64>>,
    predicate_union: Vec<Vec<f64>>,
}

fn gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v = gaussian(dim, rng);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Group-correlated unit prototypes: `sqrt(s) * group + sqrt(1 - s) * own`.
fn grouped_prototypes(cfg: &GeneratorConfig, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let groups: Vec<Vec<f64>> = (0..cfg.predicate_groups).map(|_| unit(dim, rng)).collect();
    let (a, b) = (cfg.predicate_similarity.sqrt(), (1.0 - cfg.predicate_similarity).sqrt());
    (0..cfg.num_predicates)
        .map(|p| {
            let own = unit(dim, rng);
            let mut v: Vec<f64> = groups[p % cfg.predicate_groups]
                .iter()
                .zip(&own)
                .map(|(g, o)| a * g + b * o)
                .collect();
            normalize(&mut v);
            v
        })
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates train and test splits. Each video draws from its own RNG stream,
/// so the result does not depend on how videos are scheduled across threads.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let protos = Prototypes {
        classes: (0..cfg.num_classes).map(|_| unit(cfg.feature_dim, &mut rng)).collect(),
        predicate_context: grouped_prototypes(cfg, cfg.feature_dim, &mut rng),
        predicate_union: if cfg.union_dim > 0 {
            grouped_prototypes(cfg, cfg.union_dim, &mut rng)
        } else {
            Vec::new()
        },
    };
    let zipf = WeightedIndex::new(zipf_probabilities(cfg.num_predicates, cfg.zipf_alpha))
        .map_err(|e| Error::contract(format!("zipf weights: {e}")))?;

    let total = cfg.num_videos + cfg.num_test_videos;
    let videos: Vec<(VideoSample, VideoTrace)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64 + 1);
            generate_video(cfg, &protos, &zipf, format!("v{i:05}"), &mut rng)
        })
        .collect();

    let meta = DatasetMeta {
        num_classes: cfg.num_classes,
        num_predicates: cfg.num_predicates,
        feature_dim: cfg.feature_dim,
        union_dim: (cfg.union_dim > 0).then_some(cfg.union_dim),
        predicate_groups: (0..cfg.num_predicates).map(|p| p % cfg.predicate_groups).collect(),
    };
    let (train, test): (Vec<_>, Vec<_>) = videos.into_iter().enumerate().partition(|(i, _)| *i < cfg.num_videos);
    let split = |part: Vec<(usize, (VideoSample, VideoTrace))>| -> (Dataset, Vec<VideoTrace>) {
        let (videos, traces) = part.into_iter().map(|(_, vt)| vt).unzip();
        (
            Dataset {
                meta: meta.clone(),
                videos,
            },
            traces,
        )
    };
    let (train, train_trace) = split(train);
    let (test, test_trace) = split(test);
    train.validate()?;
    test.validate()?;
    Ok(GeneratedData {
        train,
        test,
        trace: GenerationTrace {
            train: train_trace,
            test: test_trace,
        },
    })
}

fn sample_predicates(cfg: &GeneratorConfig, zipf: &WeightedIndex<f64>, rng: &mut impl Rng) -> Vec<usize> {
    if !rng.random_bool(cfg.positive_rate) {
        return Vec::new();
    }
    let first = zipf.sample(rng);
    let mut preds = vec![first];
    if cfg.num_predicates > 1 && rng.random_bool(cfg.second_predicate_rate) {
        loop {
            let p = zipf.sample(rng);
            if p != first {
                preds.push(p);
                break;
            }
        }
    }
    preds
}

fn generate_video(
    cfg: &GeneratorConfig,
    protos: &Prototypes,
    zipf: &WeightedIndex<f64>,
    id: String,
    rng: &mut ChaCha8Rng,
) -> (VideoSample, VideoTrace) {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let pair_predicates: Vec<Vec<Vec<usize>>> = (0..n)
        .map(|s| {
            (0..n)
                .map(|o| if s == o { Vec::new() } else { sample_predicates(cfg, zipf, rng) })
                .collect()
        })
        .collect();

    let d = cfg.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let mut ctx = vec![0.0; d];
            for p in pair_predicates[s].iter().flatten() {
                for (c, v) in ctx.iter_mut().zip(&protos.predicate_context[*p]) {
                    *c += v;
                }
            }
            normalize(&mut ctx);
            protos.classes[labels[s]]
                .iter()
                .zip(&ctx)
                .map(|(c, x)| c + cfg.context_strength * x)
                .collect()
        })
        .collect();

    // Smooth random-walk boxes: (center x, center y, width, height).
    let mut state: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.15..0.35),
                rng.random_range(0.15..0.35),
            ]
        })
        .collect();

    let pairs = ordered_pairs(n);
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut corrupted = Vec::with_capacity(cfg.frames_per_video);
    for _ in 0..cfg.frames_per_video {
        let mut objects = Vec::with_capacity(n);
        let mut appearance = Vec::with_capacity(n * d);
        let mut flags = Vec::with_capacity(n);
        for i in 0..n {
            let s = &mut state[i];
            s[0] = (s[0] + cfg.box_speed * rng.sample::<f64, _>(StandardNormal)).clamp(s[2] / 2.0, 1.0 - s[2] / 2.0);
            s[1] = (s[1] + cfg.box_speed * rng.sample::<f64, _>(StandardNormal)).clamp(s[3] / 2.0, 1.0 - s[3] / 2.0);
            let bbox = [s[0] - s[2] / 2.0, s[1] - s[3] / 2.0, s[0] + s[2] / 2.0, s[1] + s[3] / 2.0];

            let bad = cfg.noise_rate > 0.0 && rng.random_bool(cfg.noise_rate);
            flags.push(bad);
            let jitter = gaussian(d, rng);
            let corruption = unit(d, rng);
            let scale = cfg.jitter / (d as f64).sqrt();
            for k in 0..d {
                let mut v = prototypes[i][k] + scale * jitter[k];
                if bad {
                    v += cfg.noise_scale * corruption[k];
                }
                appearance.push(v as f32);
            }

            let strength = if bad { cfg.detector_strength * 0.3 } else { cfg.detector_strength };
            let logits: Vec<f64> = (0..cfg.num_classes)
                .map(|c| {
                    let base = if c == labels[i] { strength } else { 0.0 };
                    base + cfg.detector_noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            objects.push(ObjectAnnotation {
                bbox,
                class_scores: exps.into_iter().map(|e| e / z).collect(),
                label: labels[i],
                identity: i,
            });
        }

        let union = (cfg.union_dim > 0 && n > 1).then(|| {
            let u = cfg.union_dim;
            let scale = cfg.union_noise / (u as f64).sqrt();
            let mut out = Vec::with_capacity(pairs.len() * u);
            for &(s, o) in &pairs {
                let noise = gaussian(u, rng);
                for k in 0..u {
                    let signal: f64 = pair_predicates[s][o].iter().map(|&p| protos.predicate_union[p][k]).sum();
                    out.push((signal + scale * noise[k]) as f32);
                }
            }
            out
        });

        let relations = pairs
            .iter()
            .flat_map(|&(s, o)| pair_predicates[s][o].iter().map(move |&p| (s, p, o)))
            .collect();
        frames.push(FrameSample {
            objects,
            appearance,
            union,
            relations,
        });
        corrupted.push(flags);
    }

    (
        VideoSample { id, frames },
        VideoTrace {
            prototypes,
            corrupted,
            pair_predicates,
        },
    )
}
