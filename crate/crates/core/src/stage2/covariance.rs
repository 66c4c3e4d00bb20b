use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Second moment of MLP keys over a preservation corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStats {
    pub layer: usize,
    /// `E[kkᵀ]` over every token position of every corpus prompt.
    pub second_moment: Matrix,
    pub count: usize,
    pub lambda: f64,
}

impl CovarianceStats {
    /// `C0 = λ·E[kkᵀ]`.
    pub fn c0(&self) -> Matrix {
        self.second_moment.scale(self.lambda)
    }
}

const SHARD: usize = 16;

fn accumulate(acc: &mut Matrix, keys: &Matrix) {
    let f = acc.cols();
    for r in 0..keys.rows() {
        let k = keys.row(r);
        for i in 0..f {
            let ki = k[i];
            let row = acc.row_mut(i);
            for j in 0..f {
                row[j] += ki * k[j];
            }
        }
    }
}

/// Streams the corpus once and returns one estimate per requested layer.
/// Shards of the corpus are summed in parallel and merged in corpus order,
/// so the result does not depend on the thread count.
pub fn estimate_covariances(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &[String],
    layers: &[usize],
    lambda: f64,
) -> Result<Vec<CovarianceStats>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = encoder.config();
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::InvalidHook(format!("layer {l} >= {}", cfg.n_layers)));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("covariance scale must be positive, got {lambda}")));
    }
    let f = cfg.d_ff;
    let shards: Vec<(Vec<Matrix>, usize)> = corpus
        .par_chunks(SHARD)
        .map(|chunk| -> Result<(Vec<Matrix>, usize)> {
            let mut sums = vec![Matrix::zeros(f, f); layers.len()];
            let mut n = 0;
            for p in chunk {
                let trace = encoder.trace(&vocab.tokenize(p)?, None)?;
                for (acc, &l) in sums.iter_mut().zip(layers) {
                    accumulate(acc, &trace.keys[l]);
                }
                n += trace.keys[0].rows();
            }
            Ok((sums, n))
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![Matrix::zeros(f, f); layers.len()];
    let mut count = 0;
    for (sums, n) in shards {
        for (t, s) in totals.iter_mut().zip(&sums) {
            t.add_assign(s);
        }
        count += n;
    }
    Ok(layers
        .iter()
        .zip(totals)
        .map(|(&layer, t)| CovarianceStats { layer, second_moment: t.scale(1.0 / count as f64), count, lambda })
        .collect())
}

/// Single-layer form of [`estimate_covariances`].
pub fn estimate_covariance(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &[String],
    layer: usize,
    lambda: f64,
) -> Result<CovarianceStats> {
    Ok(estimate_covariances(encoder, vocab, corpus, &[layer], lambda)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{prompts, tiny_pipeline};

    #[test]
    fn matches_batch_oracle() {
        let p = tiny_pipeline(1);
        let words = ["a", "photo", "of", "the", "red-square", "blue-ring", "picture", "green-bar"];
        let mut rng = crate::tensor::Rng::new(4);
        let corpus: Vec<String> = (0..200)
            .map(|_| {
                let n = 1 + rng.below(5);
                (0..n).map(|_| words[rng.below(words.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let stats = estimate_covariance(&p.encoder, &p.vocab, &corpus, 1, 1.0).unwrap();
        let mut rows = Vec::new();
        for c in &corpus {
            let t = p.encoder.trace(&p.vocab.tokenize(c).unwrap(), None).unwrap();
            for r in 0..t.keys[1].rows() {
                rows.push(t.keys[1].row(r).to_vec());
            }
        }
        let k = Matrix::from_rows(&rows).unwrap();
        let batch = k.t_matmul(&k).unwrap().scale(1.0 / rows.len() as f64);
        assert_eq!(stats.count, rows.len());
        assert!(stats.second_moment.sub(&batch).unwrap().max_abs() <= 1e-10);
        assert!(stats.second_moment.is_symmetric(0.0));
        let scaled = estimate_covariance(&p.encoder, &p.vocab, &corpus, 1, 3.0).unwrap();
        assert_eq!(scaled.c0(), stats.second_moment.scale(3.0));
    }

    #[test]
    fn single_prompt_gives_mean_of_outer_products() {
        let p = tiny_pipeline(2);
        let corpus = prompts(&["photo"]);
        let stats = estimate_covariance(&p.encoder, &p.vocab, &corpus, 0, 1.0).unwrap();
        let t = p.encoder.trace(&p.vocab.tokenize("photo").unwrap(), None).unwrap();
        let k = &t.keys[0];
        let expect = k.t_matmul(k).unwrap().scale(1.0 / 3.0);
        assert_eq!(stats.count, 3);
        assert!(stats.second_moment.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_corpus_and_unknown_words() {
        let p = tiny_pipeline(3);
        assert_eq!(estimate_covariance(&p.encoder, &p.vocab, &[], 0, 1.0).unwrap_err(), Error::EmptyCorpus);
        let bad = prompts(&["zebra"]);
        assert_eq!(
            estimate_covariance(&p.encoder, &p.vocab, &bad, 0, 1.0).unwrap_err(),
            Error::UnknownToken("zebra".into())
        );
    }
}
