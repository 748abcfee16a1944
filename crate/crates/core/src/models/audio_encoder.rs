//! Recurrent audio encoder: per-segment conv feature extraction feeding a
//! stacked unidirectional LSTM. The embedding for frame t depends only on
//! segments 0..=t.

use ndarray::{Array1, Array3};
use rand_chacha::ChaCha20Rng;

use crate::audio::AudioSegment;
use crate::config::{AudioConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_grad, Conv2d, Gradients, Lstm, LstmState, ParamSet};

/// Per-frame audio embedding e_t.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    pub e: Array1<f64>,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    convs: Vec<Conv2d>,
    lstm: Lstm,
    input_rows: usize,
    input_cols: usize,
    flat_dim: usize,
    slope: f64,
}

/// Saved activations for one segment's conv stack.
pub struct SegmentCache {
    /// Input map plus each conv's input, and pre-activations per layer.
    inputs: Vec<Array3<f64>>,
    preacts: Vec<Array3<f64>>,
}

pub struct AudioEncoderCache {
    per_segment: Vec<SegmentCache>,
    lstm_caches: Vec<Vec<crate::nn::LstmCache>>,
}

impl AudioEncoder {
    pub fn new(rng: &mut ChaCha20Rng, audio: &AudioConfig, model: &ModelConfig) -> Self {
        let (rows, cols) = if audio.mfcc_transposed {
            (audio.segment_steps, audio.segment_rows())
        } else {
            (audio.segment_rows(), audio.segment_steps)
        };
        let mut convs = Vec::with_capacity(model.conv_channels.len());
        let mut in_ch = 1usize;
        let (mut h, mut w) = (rows, cols);
        for &out_ch in &model.conv_channels {
            let conv = Conv2d::new(rng, in_ch, out_ch, 3, 2, 1);
            let (oh, ow) = conv.out_spatial(h, w);
            convs.push(conv);
            in_ch = out_ch;
            h = oh;
            w = ow;
        }
        let flat_dim = in_ch * h * w;
        let lstm = Lstm::new(rng, flat_dim, model.lstm_hidden, model.lstm_layers);
        Self {
            convs,
            lstm,
            input_rows: rows,
            input_cols: cols,
            flat_dim,
            slope: model.leaky_slope,
        }
    }

    /// Embedding dimension d_e (the LSTM hidden size).
    pub fn embedding_dim(&self) -> usize {
        self.lstm.hidden()
    }

    /// Flattened conv-feature dimension feeding the LSTM.
    pub fn conv_feature_dim(&self) -> usize {
        self.flat_dim
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_rows, self.input_cols)
    }

    fn check_segment(&self, seg: &AudioSegment) -> Result<()> {
        if seg.mfcc.dim() != (self.input_rows, self.input_cols) {
            return Err(Error::dimension(format!(
                "segment {} has shape {:?}, encoder expects ({}, {})",
                seg.frame_index,
                seg.mfcc.dim(),
                self.input_rows,
                self.input_cols
            )));
        }
        Ok(())
    }

    fn conv_forward(&self, seg: &AudioSegment) -> (Array1<f64>, SegmentCache) {
        let mut x = seg
            .mfcc
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dimensionality::<ndarray::Ix3>()
            .expect("(1, rows, cols)");
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            inputs.push(x.clone());
            let pre = conv.forward(&x);
            preacts.push(pre.clone());
            x = pre.mapv(|v| leaky_relu(v, self.slope));
        }
        let flat = Array1::from_iter(x.iter().copied());
        (flat, SegmentCache { inputs, preacts })
    }

    fn conv_backward(
        &self,
        cache: &SegmentCache,
        d_flat: &Array1<f64>,
        grads: &mut Gradients,
        prefix: &str,
    ) {
        let last_pre = cache.preacts.last().expect("at least one conv");
        let mut dy = Array3::from_shape_vec(last_pre.dim(), d_flat.to_vec())
            .expect("flat length matches");
        for (l, conv) in self.convs.iter().enumerate().rev() {
            // Through the activation of layer l.
            let pre = &cache.preacts[l];
            ndarray::Zip::from(&mut dy).and(pre).for_each(|g, &p| {
                *g *= leaky_relu_grad(p, self.slope);
            });
            let dx = conv.backward(&cache.inputs[l], &dy, grads, &format!("{prefix}.conv{l}"));
            dy = dx;
        }
    }

    /// Whole-sequence forward with caches for training.
    pub fn forward(
        &self,
        segments: &[AudioSegment],
    ) -> Result<(Vec<Array1<f64>>, AudioEncoderCache)> {
        let mut flats = Vec::with_capacity(segments.len());
        let mut per_segment = Vec::with_capacity(segments.len());
        for seg in segments {
            self.check_segment(seg)?;
            let (flat, cache) = self.conv_forward(seg);
            flats.push(flat);
            per_segment.push(cache);
        }
        let (tops, lstm_caches) = self.lstm.forward_sequence(&flats);
        Ok((
            tops,
            AudioEncoderCache {
                per_segment,
                lstm_caches,
            },
        ))
    }

    /// Inference-only forward.
    pub fn embeddings(&self, segments: &[AudioSegment]) -> Result<Vec<AudioEmbedding>> {
        let (tops, _) = self.forward(segments)?;
        Ok(tops
            .into_iter()
            .zip(segments)
            .map(|(e, seg)| AudioEmbedding {
                e,
                frame_index: seg.frame_index,
            })
            .collect())
    }

    /// Backprop given gradients on the embeddings.
    pub fn backward(
        &self,
        cache: &AudioEncoderCache,
        d_embeddings: &[Array1<f64>],
        grads: &mut Gradients,
        prefix: &str,
    ) {
        let d_flats = self.lstm.backward_sequence(
            &cache.lstm_caches,
            d_embeddings,
            grads,
            &format!("{prefix}.lstm"),
        );
        for (seg_cache, d_flat) in cache.per_segment.iter().zip(&d_flats) {
            self.conv_backward(seg_cache, d_flat, grads, prefix);
        }
    }

    /// Streaming state for frame-by-frame inference.
    pub fn zero_state(&self) -> LstmState {
        self.lstm.zero_state()
    }

    /// One streaming step; bit-identical to the whole-sequence path.
    pub fn step(&self, segment: &AudioSegment, state: &mut LstmState) -> Result<Array1<f64>> {
        self.check_segment(segment)?;
        let (flat, _) = self.conv_forward(segment);
        Ok(self.lstm.step_state(&flat, state))
    }
}

impl ParamSet for AudioEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, conv) in self.convs.iter().enumerate() {
            conv.visit(&format!("{prefix}.conv{l}"), f);
        }
        self.lstm.visit(&format!("{prefix}.lstm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&format!("{prefix}.conv{l}"), f);
        }
        self.lstm.visit_mut(&format!("{prefix}.lstm"), f);
    }
}
