use super::{Utterance, NUM_EMOTIONS};
use crate::tensor::Tensor;

/// Teacher row width: emotion one-hot, content one-hot, amplitude, rate.
pub fn teacher_dim(vocab: usize) -> usize {
    NUM_EMOTIONS + vocab + 2
}

/// Analytic factor features at twice the latent frame rate: each latent
/// frame contributes two identical rows
/// `[one-hot emotion | one-hot token | amplitude | tokens per frame]`.
pub fn teacher_features(utt: &Utterance, vocab: usize) -> Tensor<f32> {
    let dim = teacher_dim(vocab);
    let f = utt.factors;
    let rate = 1.0 / f.duration() as f32;
    let mut data = Vec::with_capacity(2 * utt.num_frames() * dim);
    for (tok, &dur) in utt.content.iter().zip(&utt.durations) {
        let mut row = vec![0.0f32; dim];
        row[f.emotion] = 1.0;
        row[NUM_EMOTIONS + tok] = 1.0;
        row[NUM_EMOTIONS + vocab] = f.amplitude() as f32;
        row[NUM_EMOTIONS + vocab + 1] = rate;
        for _ in 0..2 * dur {
            data.extend_from_slice(&row);
        }
    }
    Tensor::from_vec(2 * utt.num_frames(), dim, data).expect("consistent size")
}
