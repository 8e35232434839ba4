//! Siamese speaker encoder: two stacked 32-unit GRU layers over per-frame
//! features, mean-pooled into a 32-dim embedding, trained with a contrastive
//! binary cross-entropy over positive and negative utterance pairs.

use crate::dsp::features::FEATURE_DIM;
use crate::nn::checkpoint::{Checkpoint, KIND_EMBEDDER};
use crate::nn::init::init_gru;
use crate::nn::layers::softplus;
use crate::nn::tape::{gru_step_on_tape, GruNodeIds, NodeId, Tape};
use crate::nn::{adam_step, clip_gradients, gru_step, AdamConfig, AdamState, GruLayerParams, LayerSpec, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EMBED_DIM: usize = 32;
pub const MIN_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: [f64; EMBED_DIM],
}

impl SpeakerEmbedding {
    pub fn dot(&self, other: &SpeakerEmbedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EmbedderModel {
    pub gru1: GruLayerParams,
    pub gru2: GruLayerParams,
}

impl EmbedderModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gru1: init_gru(FEATURE_DIM, EMBED_DIM, &mut rng),
            gru2: init_gru(EMBED_DIM, EMBED_DIM, &mut rng),
        }
    }

    pub fn layer_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Gru { input: FEATURE_DIM, hidden: EMBED_DIM },
            LayerSpec::Gru { input: EMBED_DIM, hidden: EMBED_DIM },
        ]
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for g in [&self.gru1, &self.gru2] {
            out.extend_from_slice(&[
                g.w_z.clone(), g.w_r.clone(), g.w_h.clone(),
                g.u_z.clone(), g.u_r.clone(), g.u_h.clone(),
                g.b_z.clone(), g.b_r.clone(), g.b_h.clone(),
            ]);
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != 18 {
            return Err(Error::Checkpoint(format!("embedder expects 18 tensors, got {}", tensors.len())));
        }
        let build = |t: &[Tensor], input: usize| GruLayerParams {
            input_size: input,
            hidden_size: EMBED_DIM,
            w_z: t[0].clone(), w_r: t[1].clone(), w_h: t[2].clone(),
            u_z: t[3].clone(), u_r: t[4].clone(), u_h: t[5].clone(),
            b_z: t[6].clone(), b_r: t[7].clone(), b_h: t[8].clone(),
        };
        Ok(Self { gru1: build(&tensors[0..9], FEATURE_DIM), gru2: build(&tensors[9..18], EMBED_DIM) })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { kind: KIND_EMBEDDER, layers: Self::layer_specs(), tensors: self.to_tensors() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != KIND_EMBEDDER {
            return Err(Error::Checkpoint(format!("not an embedder checkpoint (kind {})", ck.kind)));
        }
        Self::from_tensors(&ck.tensors)
    }
}

/// Deterministic embedding of one utterance's frame features: run both GRUs,
/// mean-pool the second layer's hidden states.
pub fn encode_utterance(model: &EmbedderModel, features: &[[f64; FEATURE_DIM]]) -> Result<SpeakerEmbedding> {
    if features.len() < MIN_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "utterance too short: {} frames, need at least {}",
            features.len(),
            MIN_FRAMES
        )));
    }
    let mut h1 = vec![0.0; EMBED_DIM];
    let mut h2 = vec![0.0; EMBED_DIM];
    let mut pooled = [0.0; EMBED_DIM];
    for f in features {
        h1 = gru_step(f, &h1, &model.gru1)?;
        h2 = gru_step(&h1, &h2, &model.gru2)?;
        for (p, v) in pooled.iter_mut().zip(&h2) {
            *p += v;
        }
    }
    let n = features.len() as f64;
    for p in pooled.iter_mut() {
        *p /= n;
    }
    Ok(SpeakerEmbedding { values: pooled })
}

/// Same computation recorded on a tape.
fn encode_on_tape(
    tape: &mut Tape,
    g1: &GruNodeIds,
    g2: &GruNodeIds,
    features: &[[f64; FEATURE_DIM]],
) -> NodeId {
    let zeros = vec![0.0; EMBED_DIM];
    let mut h1 = tape.constant(&zeros);
    let mut h2 = tape.constant(&zeros);
    let mut sum: Option<NodeId> = None;
    for f in features {
        let x = tape.constant(f);
        h1 = gru_step_on_tape(tape, x, h1, g1);
        h2 = gru_step_on_tape(tape, h1, h2, g2);
        sum = Some(match sum {
            None => h2,
            Some(s) => tape.add(s, h2),
        });
    }
    let s = sum.expect("at least one frame");
    tape.scale(s, 1.0 / features.len() as f64)
}

/// A contrastive pair: indices into an utterance list plus the same-speaker
/// label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
}

/// Balanced batch: half positive pairs (two distinct utterances of one
/// speaker), half negative (utterances of two different speakers).
/// `speakers` lists each speaker's utterance indices.
pub fn sample_pairs<R: Rng>(speakers: &[Vec<usize>], rng: &mut R, batch_size: usize) -> Result<Vec<Pair>> {
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 speakers to sample negative pairs".into(),
        ));
    }
    let pos_candidates: Vec<usize> =
        (0..speakers.len()).filter(|s| speakers[*s].len() >= 2).collect();
    if pos_candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "need a speaker with at least 2 utterances for positive pairs".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    let half = batch_size / 2;
    for _ in 0..half {
        let s = pos_candidates[rng.gen_range(0..pos_candidates.len())];
        let utts = &speakers[s];
        let a = rng.gen_range(0..utts.len());
        let mut b = rng.gen_range(0..utts.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(Pair { i: utts[a], j: utts[b], positive: true });
    }
    for _ in 0..batch_size - half {
        let s1 = rng.gen_range(0..speakers.len());
        let mut s2 = rng.gen_range(0..speakers.len() - 1);
        if s2 >= s1 {
            s2 += 1;
        }
        let i = speakers[s1][rng.gen_range(0..speakers[s1].len())];
        let j = speakers[s2][rng.gen_range(0..speakers[s2].len())];
        pairs.push(Pair { i, j, positive: false });
    }
    Ok(pairs)
}

/// Contrastive binary cross-entropy over embedding pairs:
/// positives contribute -log sigmoid(z_i . z_j), negatives
/// -log(1 - sigmoid(z_i . z_j)). Evaluated in log-sigmoid form.
pub fn contrastive_loss(pairs: &[(&SpeakerEmbedding, &SpeakerEmbedding, bool)]) -> f64 {
    let mut total = 0.0;
    for (zi, zj, positive) in pairs {
        let d = zi.dot(zj);
        total += if *positive { softplus(-d) } else { softplus(d) };
    }
    total
}

#[derive(Debug, Clone)]
pub struct EmbedTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub clip_threshold: f64,
    pub seed: u64,
    /// Frames per utterance fed to the encoder (prefix truncation).
    pub max_frames: usize,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 200,
            adam: AdamConfig::default(),
            clip_threshold: 5e-2,
            seed: 1,
            max_frames: 100,
        }
    }
}

/// One training utterance: precomputed frame features plus its speaker slot.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub speaker: usize,
    pub frames: Vec<[f64; FEATURE_DIM]>,
}

#[derive(Debug, Clone)]
pub struct EmbedTrainOutcome {
    pub model: EmbedderModel,
    /// Mean per-pair loss per step.
    pub history: Vec<f64>,
    pub diverged: bool,
}

/// Trains the encoder on the given utterances. Deterministic per seed.
/// Divergence (non-finite loss) stops training and returns the last good
/// model with `diverged` set.
pub fn train_embedder(utterances: &[UtteranceFeatures], config: &EmbedTrainConfig) -> Result<EmbedTrainOutcome> {
    let n_speakers = utterances.iter().map(|u| u.speaker).max().map_or(0, |m| m + 1);
    if n_speakers < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 speakers".into()));
    }
    let mut speakers: Vec<Vec<usize>> = vec![Vec::new(); n_speakers];
    for (i, u) in utterances.iter().enumerate() {
        if u.frames.len() < MIN_FRAMES {
            return Err(Error::InvalidArgument(format!("utterance {} too short", i)));
        }
        speakers[u.speaker].push(i);
    }

    let mut model = EmbedderModel::init(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xA5A5));
    let mut params = model.to_tensors();
    let mut adam = AdamState::new(config.adam, &params);
    let mut history = Vec::with_capacity(config.steps);

    for _step in 0..config.steps {
        let pairs = sample_pairs(&speakers, &mut rng, config.batch_size)?;
        let mut tape = Tape::new();
        model = EmbedderModel::from_tensors(&params)?;
        let g1 = GruNodeIds::register(&mut tape, &model.gru1);
        let g2 = GruNodeIds::register(&mut tape, &model.gru2);
        let mut param_ids = g1.ids();
        param_ids.extend(g2.ids());

        // encode each distinct utterance in the batch once
        let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.i, p.j]).collect();
        needed.sort_unstable();
        needed.dedup();
        let mut embeddings: Vec<(usize, NodeId)> = Vec::with_capacity(needed.len());
        for idx in &needed {
            let frames = &utterances[*idx].frames;
            let take = frames.len().min(config.max_frames);
            let z = encode_on_tape(&mut tape, &g1, &g2, &frames[..take]);
            embeddings.push((*idx, z));
        }
        let find = |idx: usize, list: &[(usize, NodeId)]| -> NodeId {
            list.iter().find(|(i, _)| *i == idx).unwrap().1
        };

        let mut terms = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let d = {
                let (zi, zj) = (find(p.i, &embeddings), find(p.j, &embeddings));
                tape.dot(zi, zj)
            };
            let term = if p.positive {
                let nd = tape.neg(d);
                tape.softplus(nd)
            } else {
                tape.softplus(d)
            };
            terms.push(term);
        }
        let loss = tape.sum_scalars(&terms);
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Ok(EmbedTrainOutcome { model, history, diverged: true });
        }
        history.push(loss_value / pairs.len() as f64);

        let grads_raw = tape.backward(loss)?;
        let mut grads = tape.leaf_grads(&grads_raw, &param_ids, &params);
        clip_gradients(&mut grads, config.clip_threshold);
        adam_step(&mut params, &grads, &mut adam);
    }
    model = EmbedderModel::from_tensors(&params)?;
    Ok(EmbedTrainOutcome { model, history, diverged: false })
}

/// Arithmetic mean of a speaker's utterance embeddings.
pub fn mean_speaker_embedding(embeddings: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("mean of zero embeddings".into()));
    }
    let mut values = [0.0; EMBED_DIM];
    for e in embeddings {
        for (acc, v) in values.iter_mut().zip(&e.values) {
            *acc += v;
        }
    }
    for v in values.iter_mut() {
        *v /= embeddings.len() as f64;
    }
    Ok(SpeakerEmbedding { values })
}
