//! Episodic N-way-K-shot metric learning with negative segments.
//!
//! Each episode draws N classes; per class it samples K support and K query
//! segments from positive regions plus K negative support segments from the
//! same class's files. Query prototypes are pushed towards their own
//! positive support prototype and away from every other positive and
//! negative support prototype via cross-entropy over negated distances.
//! Negative queries are never optimized.

mod sampler;
mod train;

pub use sampler::{sample_episode, SegmentPick, SpecAugment};
pub use train::{rng_from_state, train, TrainOutcome, TrainState};

use ndarray::{Array1, Array2};

use crate::dataio::Polarity;
use crate::nn::{batch_from_segments, Embedder, Grads, Scalar, Tape, Var};
use crate::{Error, Result};

/// One N-way-K-shot training batch.
#[derive(Debug, Clone)]
pub struct Episode<F: Scalar> {
    pub n_way: usize,
    pub k_shot: usize,
    pub class_names: Vec<String>,
    /// `[n_way][k_shot]` positive support segments (frames x bins).
    pub support: Vec<Vec<Array2<F>>>,
    /// `[n_way][k_shot]` positive query segments.
    pub query: Vec<Vec<Array2<F>>>,
    /// `[n_way][k_shot]` negative support segments.
    pub neg_support: Vec<Vec<Array2<F>>>,
}

impl<F: Scalar> Episode<F> {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_way;
        let k = self.k_shot;
        if self.support.len() != n || self.query.len() != n || self.neg_support.len() != n {
            return Err(Error::Shape("episode class count mismatch".into()));
        }
        for group in [&self.support, &self.query, &self.neg_support] {
            if group.iter().any(|cls| cls.len() != k) {
                return Err(Error::Shape("episode shot count mismatch".into()));
            }
        }
        Ok(())
    }

    /// Total segment count: N * (2K positive + K negative).
    pub fn segment_count(&self) -> usize {
        self.n_way * 3 * self.k_shot
    }
}

/// A class prototype: the arithmetic mean of its member embeddings.
#[derive(Debug, Clone)]
pub struct Prototype<F: Scalar> {
    pub class_id: String,
    pub polarity: Polarity,
    pub embedding: Array1<F>,
}

impl<F: Scalar> Prototype<F> {
    pub fn from_members(
        class_id: impl Into<String>,
        polarity: Polarity,
        members: &[Array1<F>],
    ) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::EmptyInput("prototype needs at least one member".into()))?;
        let mut acc = Array1::<F>::zeros(first.len());
        for m in members {
            if m.len() != first.len() {
                return Err(Error::Shape("member embedding dims differ".into()));
            }
            acc += m;
        }
        let inv = F::from_f64(1.0 / members.len() as f64);
        Ok(Prototype { class_id: class_id.into(), polarity, embedding: acc.mapv(|v| v * inv) })
    }
}

/// Euclidean distance matrix between row sets: `D[i, j] = ||q_i - s_j||`.
pub fn distance_matrix<F: Scalar>(queries: &Array2<F>, supports: &Array2<F>) -> Result<Array2<F>> {
    if queries.ncols() != supports.ncols() {
        return Err(Error::Shape(format!(
            "queries have dim {}, supports {}",
            queries.ncols(),
            supports.ncols()
        )));
    }
    let mut out = Array2::<F>::zeros((queries.nrows(), supports.nrows()));
    for i in 0..queries.nrows() {
        for j in 0..supports.nrows() {
            let mut acc = F::zero();
            for (a, b) in queries.row(i).iter().zip(supports.row(j).iter()) {
                let d = *a - *b;
                acc += d * d;
            }
            out[[i, j]] = acc.sqrt();
        }
    }
    Ok(out)
}

/// The differentiable loss graph of one episode.
pub struct EpisodeLoss<F: Scalar> {
    pub tape: Tape<F>,
    pub loss: Var,
    pub param_vars: Vec<Var>,
    pub loss_value: f64,
}

impl<F: Scalar> EpisodeLoss<F> {
    pub fn backward(&self) -> Grads<F> {
        self.tape.backward(self.loss)
    }

    /// Gradients in the embedder's canonical trainable order.
    pub fn gradients(&self, embedder: &Embedder<F>) -> Vec<ndarray::ArrayD<F>> {
        let grads = self.backward();
        let mut out = Vec::with_capacity(self.param_vars.len());
        let mut i = 0;
        embedder.for_each_trainable(|p| {
            out.push(grads.get_or_zeros(self.param_vars[i], p.shape()));
            i += 1;
        });
        out
    }
}

/// Build the episode loss on a fresh tape (train-mode forward).
///
/// Distances are taken between N query prototypes and the 2N columns
/// [positive supports | negative supports]; the loss is the negative
/// log-softmax (over negated distances) summed along the diagonal. With
/// `use_negatives` off the matrix is N x N (ablation).
pub fn episode_loss<F: Scalar>(
    embedder: &mut Embedder<F>,
    episode: &Episode<F>,
    use_negatives: bool,
) -> Result<EpisodeLoss<F>> {
    episode.validate()?;
    let n = episode.n_way;
    let k = episode.k_shot;

    // batch rows: all supports, then all queries, then all negatives
    let mut segments: Vec<&Array2<F>> = Vec::with_capacity(episode.segment_count());
    for cls in &episode.support {
        segments.extend(cls.iter());
    }
    for cls in &episode.query {
        segments.extend(cls.iter());
    }
    for cls in &episode.neg_support {
        segments.extend(cls.iter());
    }
    let owned: Vec<Array2<F>> = segments.into_iter().cloned().collect();
    let batch = batch_from_segments(&owned)?;

    let mut tape = Tape::new();
    let (embeddings, param_vars) = embedder.forward_train(&mut tape, batch)?;

    let query_groups: Vec<Vec<usize>> =
        (0..n).map(|i| ((n * k + i * k)..(n * k + (i + 1) * k)).collect()).collect();
    let mut support_groups: Vec<Vec<usize>> =
        (0..n).map(|i| ((i * k)..((i + 1) * k)).collect()).collect();
    if use_negatives {
        support_groups
            .extend((0..n).map(|i| ((2 * n * k + i * k)..(2 * n * k + (i + 1) * k)).collect::<Vec<_>>()));
    }

    let loss = loss_head(&mut tape, embeddings, query_groups, support_groups);

    if !tape.scalar(loss).is_finite() {
        return Err(Error::TrainingAborted("episode loss is not finite".into()));
    }
    let loss_value = tape.scalar(loss).as_f64();
    Ok(EpisodeLoss { tape, loss, param_vars, loss_value })
}

/// The metric-learning head: prototypes from row groups, row-wise
/// log-softmax over negated query-to-support distances, cross-entropy along
/// the diagonal.
pub fn loss_head<F: Scalar>(
    tape: &mut Tape<F>,
    embeddings: Var,
    query_groups: Vec<Vec<usize>>,
    support_groups: Vec<Vec<usize>>,
) -> Var {
    let query_protos = tape.group_mean_rows(embeddings, query_groups);
    let support_protos = tape.group_mean_rows(embeddings, support_groups);
    let dist = tape.pairwise_dist(query_protos, support_protos);
    let neg_dist = tape.scale(dist, F::from_f64(-1.0));
    let log_probs = tape.log_softmax_rows(neg_dist);
    tape.neg_diag_sum(log_probs)
}

/// Validation accuracy: the fraction of query prototypes whose nearest
/// support prototype (among positives and negatives) is their own class.
pub fn episode_accuracy<F: Scalar>(embedder: &Embedder<F>, episode: &Episode<F>) -> Result<f64> {
    episode.validate()?;
    let n = episode.n_way;

    let embed_protos = |groups: &[Vec<Array2<F>>]| -> Result<Array2<F>> {
        let mut protos = Array2::<F>::zeros((groups.len(), embedder.cfg.embedding_dim()));
        for (i, cls) in groups.iter().enumerate() {
            let batch = batch_from_segments(cls)?;
            let emb = embedder.forward_eval(&batch)?;
            let inv = F::from_f64(1.0 / emb.nrows() as f64);
            let mut row = protos.row_mut(i);
            for r in emb.rows() {
                for (dst, &v) in row.iter_mut().zip(r.iter()) {
                    *dst += v * inv;
                }
            }
        }
        Ok(protos)
    };

    let query_protos = embed_protos(&episode.query)?;
    let pos_protos = embed_protos(&episode.support)?;
    let neg_protos = embed_protos(&episode.neg_support)?;
    let mut supports = Array2::<F>::zeros((2 * n, embedder.cfg.embedding_dim()));
    supports.slice_mut(ndarray::s![..n, ..]).assign(&pos_protos);
    supports.slice_mut(ndarray::s![n.., ..]).assign(&neg_protos);

    let dist = distance_matrix(&query_protos, &supports)?;
    let mut correct = 0;
    for i in 0..n {
        let row = dist.row(i);
        let argmin = (0..2 * n).min_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        if argmin == i {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}
