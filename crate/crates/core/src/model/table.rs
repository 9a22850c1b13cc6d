use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Context, Matrix, ModelError, TransducerModel};

/// Transducer whose joiner output is looked up from a table indexed by frame
/// and decoder context. Small tables make decoders easy to trace by hand and
/// to check against exhaustive enumeration.
///
/// Features are a single column holding the frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab: usize,
    frames: usize,
    /// `frames x vocab^2 x vocab` log-probabilities.
    logprobs: Vec<f32>,
}

impl TableModel {
    pub fn new(vocab: usize, frames: usize, logprobs: Vec<f32>) -> Result<Self, ModelError> {
        if vocab < 2 {
            return Err(ModelError::InvalidArgument("vocab must be at least 2".into()));
        }
        if logprobs.len() != frames * vocab * vocab * vocab {
            return Err(ModelError::Dimension(format!(
                "table has {} entries, expected {}",
                logprobs.len(),
                frames * vocab.pow(3)
            )));
        }
        Ok(TableModel { vocab, frames, logprobs })
    }

    /// Table filled by `f(frame, context)`, which must return `vocab` values;
    /// each row is log-softmax normalized.
    pub fn from_fn(vocab: usize, frames: usize, mut f: impl FnMut(usize, Context) -> Vec<f32>) -> Result<Self, ModelError> {
        let mut logprobs = Vec::with_capacity(frames * vocab.pow(3));
        for t in 0..frames {
            for packed in 0..(vocab * vocab) as u32 {
                let mut row = f(t, Context::unpack(packed, vocab)?);
                if row.len() != vocab {
                    return Err(ModelError::Dimension(format!("row of {} values for vocab {vocab}", row.len())));
                }
                crate::logspace::log_softmax_f32(&mut row);
                logprobs.extend(row);
            }
        }
        Self::new(vocab, frames, logprobs)
    }

    /// Random logits in `[-spread, spread]`, with `blank_bias` added to blank.
    pub fn random(seed: u64, vocab: usize, frames: usize, spread: f32, blank_bias: f32) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(vocab, frames, |_, _| {
            (0..vocab)
                .map(|k| rng.random_range(-spread..=spread) + if k == 0 { blank_bias } else { 0.0 })
                .collect()
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Features selecting every frame of the table, in order.
    pub fn features(&self) -> Matrix {
        Matrix::from_vec(self.frames, 1, (0..self.frames).map(|t| t as f32).collect()).expect("one column")
    }

    pub fn row(&self, t: usize, ctx: Context) -> &[f32] {
        let v = self.vocab;
        let start = (t * v * v + ctx.pack(v) as usize) * v;
        &self.logprobs[start..start + v]
    }
}

impl TransducerModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode(&self, features: &Matrix) -> Matrix {
        assert_eq!(features.cols(), 1, "table features hold the frame index");
        assert!(features.data().iter().all(|&t| (t as usize) < self.frames));
        features.clone()
    }

    fn decode(&self, contexts: &[Context]) -> Matrix {
        Matrix::from_vec(
            contexts.len(),
            1,
            contexts.iter().map(|c| c.pack(self.vocab) as f32).collect(),
        )
        .expect("one column")
    }

    fn join(&self, enc: &Matrix, dec: &Matrix) -> Matrix {
        assert_eq!(enc.rows(), dec.rows(), "joiner operands");
        let mut data = Vec::with_capacity(enc.rows() * self.vocab);
        for i in 0..enc.rows() {
            let t = enc.row(i)[0] as usize;
            let ctx = Context::unpack(dec.row(i)[0] as u32, self.vocab).expect("packed context");
            data.extend_from_slice(self.row(t, ctx));
        }
        Matrix::from_vec(enc.rows(), self.vocab, data).expect("vocab columns")
    }
}
