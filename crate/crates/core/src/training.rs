//! Two-stage training: trajectory learning over a frozen generator/encoder,
//! then per-subject generator tuning around fixed pivot latents.
//!
//! Stage one updates only the audio encoder and latent decoder; the total
//! loss is lambda_latent * sum_t ||w_t - w_bar_t|| plus lambda_lpips *
//! sum_t ||phi(x_bar_t) - phi(G(E_I(x_t)))||. Norms follow the written
//! formulas; `squared_l2` switches both to squared norms. Stage two clones
//! the generator and minimizes perceptual + L2 reconstruction of the clip at
//! pivots w_t = E_I(x_t) computed once before tuning.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{Stage1Config, Stage2Config};
use crate::data::{build_windows, LoadedClip, TrainingWindow};
use crate::error::{Error, Result};
use crate::latent::{compose, project, LatentCode, PcaBasis, SubspaceCoords};
use crate::models::{
    perceptual_distance, ImageEncoder, ImageGenerator, PerceptualExtractor,
    TrajectoryModel, VideoClip,
};
use crate::nn::{Adam, Gradients};

/// One line of the loss log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_latent: f64,
    pub l_lpips: f64,
    pub total: f64,
}

/// Sum over frames of the (optionally squared) L2 distance between target
/// and predicted latent codes.
pub fn latent_loss(targets: &[LatentCode], preds: &[LatentCode], squared: bool) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(Error::dimension(format!(
            "latent loss lengths differ: {} vs {}",
            targets.len(),
            preds.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Input("latent loss over empty sequences".into()));
    }
    let mut total = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        if t.shape() != p.shape() {
            return Err(Error::dimension("latent shapes differ"));
        }
        let n2 = (t - p).data.iter().map(|v| v * v).sum::<f64>();
        total += if squared { n2 } else { n2.sqrt() };
    }
    Ok(total)
}

/// Sum over frames of the perceptual distance between generated frames and
/// the re-synthesized inverted targets G(E_I(x_t)).
pub fn lpips_loss(
    generated: &VideoClip,
    target_inverted: &VideoClip,
    extractor: &PerceptualExtractor,
    squared: bool,
) -> Result<f64> {
    if generated.len() != target_inverted.len() {
        return Err(Error::dimension(format!(
            "clip lengths differ: {} vs {}",
            generated.len(),
            target_inverted.len()
        )));
    }
    let mut total = 0.0;
    for (g, t) in generated.frames.iter().zip(&target_inverted.frames) {
        let d = perceptual_distance(g, t, extractor)?;
        total += if squared { d * d } else { d };
    }
    Ok(total)
}

/// Norm-or-squared loss on a flat difference vector; returns the loss value
/// and the gradient with respect to the difference. Distances below 1e-9
/// count as being at the minimum: the norm's unit-magnitude gradient would
/// otherwise turn floating-point noise into full-size optimizer steps.
fn flat_norm_loss(diff: &Array1<f64>, squared: bool) -> (f64, Array1<f64>) {
    let n2: f64 = diff.iter().map(|v| v * v).sum();
    if squared {
        (n2, diff * 2.0)
    } else {
        let n = n2.sqrt();
        if n < 1e-9 {
            (n, Array1::zeros(diff.len()))
        } else {
            (n, diff / n)
        }
    }
}

/// Stage-one trainer: owns the trainable networks, borrows everything
/// frozen.
pub struct Stage1Trainer<'a> {
    pub model: TrajectoryModel,
    generator: &'a dyn ImageGenerator,
    phi: &'a PerceptualExtractor,
    basis: &'a PcaBasis,
    clips: &'a [LoadedClip],
    cfg: Stage1Config,
    windows: Vec<TrainingWindow>,
    /// phi(G(w_t)) per clip per frame, fixed while G and E_I are frozen.
    lpips_targets: Vec<Vec<Array1<f64>>>,
    /// Projection of every cached latent, reused as identity coordinates.
    identity_coords: Vec<Vec<SubspaceCoords>>,
    adam: Adam,
    rng: ChaCha20Rng,
    step: usize,
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(
        model: TrajectoryModel,
        generator: &'a dyn ImageGenerator,
        phi: &'a PerceptualExtractor,
        basis: &'a PcaBasis,
        clips: &'a [LoadedClip],
        cfg: Stage1Config,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.decoder.k() != basis.k() {
            return Err(Error::dimension(format!(
                "decoder k = {} does not match basis k = {}",
                model.decoder.k(),
                basis.k()
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut windows = Vec::new();
        for (i, clip) in clips.iter().enumerate() {
            windows.extend(build_windows(clip.record.n_frames, i, cfg.seq_len, &mut rng));
        }
        if windows.is_empty() {
            return Err(Error::Data(format!(
                "no training windows: every clip is shorter than seq_len = {}",
                cfg.seq_len
            )));
        }

        // Precompute frozen-path targets. Mathematically identical to
        // recomputing G(E_I(x_t)) per step since both networks are frozen.
        let mut lpips_targets = Vec::with_capacity(clips.len());
        let mut identity_coords = Vec::with_capacity(clips.len());
        for clip in clips {
            let mut feats = Vec::with_capacity(clip.latents.len());
            let mut coords = Vec::with_capacity(clip.latents.len());
            for w in &clip.latents {
                let resynth = generator.synthesize(w)?;
                feats.push(phi.features(&resynth));
                coords.push(project(w, basis)?);
            }
            lpips_targets.push(feats);
            identity_coords.push(coords);
        }

        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Self {
            model,
            generator,
            phi,
            basis,
            clips,
            cfg,
            windows,
            lpips_targets,
            identity_coords,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    /// Sample the next seeded batch of windows.
    fn sample_batch(&mut self) -> Vec<TrainingWindow> {
        let n = self.windows.len();
        (0..self.cfg.batch_size)
            .map(|_| self.windows[rand::Rng::gen_range(&mut self.rng, 0..n)])
            .collect()
    }

    /// Forward-only loss evaluation on an explicit batch (no update).
    pub fn evaluate_on(&self, batch: &[TrainingWindow]) -> Result<LossRecord> {
        let mut l_latent = 0.0;
        let mut l_lpips = 0.0;
        for window in batch {
            let clip = &self.clips[window.clip];
            let segs = &clip.segments[window.start..window.start + window.len];
            let w_identity = &clip.latents[window.identity_frame()];
            let h_identity = &self.identity_coords[window.clip][window.identity_frame()];
            let (embeddings, _) = self.model.audio_encoder.forward(segs)?;
            for (offset, e_t) in embeddings.iter().enumerate() {
                let frame_idx = window.start + offset;
                let target = &clip.latents[frame_idx];
                let (h_t, _) = self.model.decoder.forward(&h_identity.h, e_t)?;
                let w_bar = compose(w_identity, &SubspaceCoords::new(h_t), self.basis)?;
                let diff = Array1::from_iter(
                    w_bar
                        .flatten()
                        .iter()
                        .zip(target.flatten().iter())
                        .map(|(a, b)| a - b),
                );
                l_latent += flat_norm_loss(&diff, self.cfg.squared_l2).0;
                let generated = self.generator.synthesize(&w_bar)?;
                let feats = self.phi.features(&generated);
                let fdiff = &feats - &self.lpips_targets[window.clip][frame_idx];
                l_lpips += flat_norm_loss(&fdiff, self.cfg.squared_l2).0;
            }
        }
        let mut total = 0.0;
        if !self.cfg.disable_latent_loss {
            total += self.cfg.lambda_latent * l_latent;
        }
        if !self.cfg.disable_lpips_loss {
            total += self.cfg.lambda_lpips * l_lpips;
        }
        Ok(LossRecord {
            step: self.step,
            l_latent,
            l_lpips,
            total,
        })
    }

    /// One optimization step on a sampled batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let batch = self.sample_batch();
        self.step_on(&batch)
    }

    /// One optimization step on an explicit batch of windows.
    pub fn step_on(&mut self, batch: &[TrainingWindow]) -> Result<LossRecord> {
        let (grads, mut record) = self.batch_gradients(batch)?;
        if !record.l_latent.is_finite() {
            return Err(Error::Numerical(format!(
                "L_latent is not finite at step {}",
                self.step
            )));
        }
        if !record.l_lpips.is_finite() {
            return Err(Error::Numerical(format!(
                "L_LPIPS is not finite at step {}",
                self.step
            )));
        }
        self.adam.step(&mut self.model, &grads);
        self.step += 1;
        record.step = self.step;
        Ok(record)
    }

    /// Loss terms and parameter gradients of the weighted stage-one loss on
    /// a batch, without touching the parameters.
    pub fn batch_gradients(&self, batch: &[TrainingWindow]) -> Result<(Gradients, LossRecord)> {
        let mut grads = Gradients::new();
        let mut l_latent = 0.0;
        let mut l_lpips = 0.0;

        let use_latent = !self.cfg.disable_latent_loss;
        let use_lpips = !self.cfg.disable_lpips_loss;

        for window in batch {
            let clip = &self.clips[window.clip];
            let segs = &clip.segments[window.start..window.start + window.len];
            let w_identity = &clip.latents[window.identity_frame()];
            let h_identity = &self.identity_coords[window.clip][window.identity_frame()];

            let (embeddings, enc_cache) = self.model.audio_encoder.forward(segs)?;
            let mut d_embeddings: Vec<Array1<f64>> = Vec::with_capacity(window.len);
            let mut dec_caches = Vec::with_capacity(window.len);
            let mut d_coords: Vec<Array1<f64>> = Vec::with_capacity(window.len);

            for (offset, e_t) in embeddings.iter().enumerate() {
                let frame_idx = window.start + offset;
                let target = &clip.latents[frame_idx];

                let (h_t, dec_cache) = self.model.decoder.forward(&h_identity.h, e_t)?;
                let w_bar = compose(w_identity, &SubspaceCoords::new(h_t.clone()), self.basis)?;

                // Gradient on the composed latent, accumulated from both
                // loss terms with their weights.
                let mut d_wbar = Array1::<f64>::zeros(w_bar.flatten().len());

                let diff = Array1::from_iter(
                    w_bar
                        .flatten()
                        .iter()
                        .zip(target.flatten().iter())
                        .map(|(a, b)| a - b),
                );
                let (lat_term, lat_grad) = flat_norm_loss(&diff, self.cfg.squared_l2);
                l_latent += lat_term;
                if use_latent && self.cfg.lambda_latent != 0.0 {
                    d_wbar += &(lat_grad * self.cfg.lambda_latent);
                }

                let generated = self.generator.synthesize(&w_bar)?;
                let (feats, phi_cache) = self.phi.features_cached(&generated);
                let target_feats = &self.lpips_targets[window.clip][frame_idx];
                let fdiff = &feats - target_feats;
                let (lpips_term, lpips_grad) = flat_norm_loss(&fdiff, self.cfg.squared_l2);
                l_lpips += lpips_term;
                if use_lpips && self.cfg.lambda_lpips != 0.0 {
                    let d_frame = self.phi.input_vjp(&phi_cache, &lpips_grad);
                    let d_w = self.generator.latent_vjp(&w_bar, &d_frame)?;
                    d_wbar += &(d_w.flatten() * self.cfg.lambda_lpips);
                }

                // Through the lift: d = h V, so dL/dh = V dL/dd.
                let dh = self.basis.components.dot(&d_wbar);
                d_coords.push(dh);
                dec_caches.push(dec_cache);
            }

            for (offset, (cache, dh)) in dec_caches.iter().zip(&d_coords).enumerate() {
                let (_, d_e) = self.model.decoder.backward(cache, dh, &mut grads, "decoder");
                let _ = offset;
                d_embeddings.push(d_e);
            }
            self.model
                .audio_encoder
                .backward(&enc_cache, &d_embeddings, &mut grads, "audio_encoder");
        }

        let mut total = 0.0;
        if use_latent {
            total += self.cfg.lambda_latent * l_latent;
        }
        if use_lpips {
            total += self.cfg.lambda_lpips * l_lpips;
        }
        Ok((
            grads,
            LossRecord {
                step: self.step,
                l_latent,
                l_lpips,
                total,
            },
        ))
    }

    /// Run `steps` optimization steps, returning the loss log.
    pub fn run(&mut self, steps: usize) -> Result<Vec<LossRecord>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            log.push(self.step()?);
        }
        Ok(log)
    }
}

/// Loss terms and generator-parameter gradients of the stage-two objective
/// at fixed pivots, without touching the parameters.
pub fn stage2_gradients(
    clip: &VideoClip,
    generator: &crate::models::ToyGenerator,
    encoder: &dyn ImageEncoder,
    phi: &PerceptualExtractor,
    cfg: &Stage2Config,
) -> Result<(Gradients, LossRecord)> {
    if clip.is_empty() {
        return Err(Error::Input("stage-two loss needs at least one frame".into()));
    }
    let pivots: Vec<LatentCode> = clip
        .frames
        .iter()
        .map(|f| encoder.invert(f))
        .collect::<Result<_>>()?;
    let target_feats: Vec<Array1<f64>> = clip.frames.iter().map(|f| phi.features(f)).collect();
    let (grads, l_l2, l_lpips) =
        stage2_loss_and_grads(clip, &pivots, &target_feats, generator, phi, cfg.squared_l2)?;
    Ok((
        grads,
        LossRecord {
            step: 0,
            l_latent: l_l2,
            l_lpips,
            total: l_l2 + l_lpips,
        },
    ))
}

fn stage2_loss_and_grads(
    clip: &VideoClip,
    pivots: &[LatentCode],
    target_feats: &[Array1<f64>],
    generator: &crate::models::ToyGenerator,
    phi: &PerceptualExtractor,
    squared: bool,
) -> Result<(Gradients, f64, f64)> {
    let mut grads = Gradients::new();
    let mut l_l2 = 0.0;
    let mut l_lpips = 0.0;
    for (t, frame) in clip.frames.iter().enumerate() {
        let synth = generator.synthesize(&pivots[t])?;

        let diff = Array1::from_iter(
            synth
                .data
                .iter()
                .zip(frame.data.iter())
                .map(|(a, b)| a - b),
        );
        let (l2_term, l2_grad) = flat_norm_loss(&diff, squared);
        l_l2 += l2_term;

        let (feats, phi_cache) = phi.features_cached(&synth);
        let fdiff = &feats - &target_feats[t];
        let (lp_term, lp_grad) = flat_norm_loss(&fdiff, squared);
        l_lpips += lp_term;

        let mut d_frame = phi.input_vjp(&phi_cache, &lp_grad);
        let l2_grad3 = ndarray::Array3::from_shape_vec(frame.data.dim(), l2_grad.to_vec())
            .expect("shape matches");
        d_frame += &l2_grad3;
        generator.param_vjp(&pivots[t], &d_frame, &mut grads, "")?;
    }
    Ok((grads, l_l2, l_lpips))
}

/// Tune a clone of the generator on a clip around fixed pivot latents.
///
/// Returns the tuned generator and the loss log. Aborts on an empty clip or
/// when the loss exceeds 10x its initial value for 50 consecutive steps.
pub fn stage2_tune(
    clip: &VideoClip,
    generator: &crate::models::ToyGenerator,
    encoder: &dyn ImageEncoder,
    phi: &PerceptualExtractor,
    cfg: &Stage2Config,
) -> Result<(crate::models::ToyGenerator, Vec<LossRecord>)> {
    cfg.validate()?;
    if clip.is_empty() {
        return Err(Error::Input("stage-two tuning needs at least one frame".into()));
    }

    // Pivots: computed once before tuning and held fixed.
    let pivots: Vec<LatentCode> = clip
        .frames
        .iter()
        .map(|f| encoder.invert(f))
        .collect::<Result<_>>()?;
    let target_feats: Vec<Array1<f64>> = clip.frames.iter().map(|f| phi.features(f)).collect();

    let mut tuned = generator.clone();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut initial_total: Option<f64> = None;
    let mut high_steps = 0usize;

    // A clip reconstructed down to 16-bit quantization noise is converged;
    // pushing further only lets the optimizer walk in the noise.
    let (h, w) = clip.frames[0].shape();
    let frame_floor = ((h * w * 3) as f64).sqrt() * 3e-5;

    for step in 0..cfg.max_steps {
        let (grads, l_l2, l_lpips) =
            stage2_loss_and_grads(clip, &pivots, &target_feats, &tuned, phi, cfg.squared_l2)?;

        let total = l_l2 + l_lpips;
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "stage-two loss is not finite at step {step}"
            )));
        }
        let initial = *initial_total.get_or_insert(total);
        if total > 10.0 * initial && initial > 0.0 {
            high_steps += 1;
            if high_steps >= 50 {
                return Err(Error::Numerical(format!(
                    "stage-two diverged: loss {total} above 10x initial {initial} for 50 steps"
                )));
            }
        } else {
            high_steps = 0;
        }
        log.push(LossRecord {
            step: step + 1,
            l_latent: l_l2, // reused column: reconstruction L2 term
            l_lpips,
            total,
        });

        let mean_frame_err = if cfg.squared_l2 {
            (l_l2 / clip.len() as f64).sqrt()
        } else {
            l_l2 / clip.len() as f64
        };
        if mean_frame_err < frame_floor {
            break;
        }

        adam.step(&mut tuned, &grads);
    }
    Ok((tuned, log))
}

/// Mean reconstruction L2 of a clip under a generator at fixed pivots.
pub fn reconstruction_error(
    clip: &VideoClip,
    pivots: &[LatentCode],
    generator: &dyn ImageGenerator,
) -> Result<f64> {
    let mut total = 0.0;
    for (frame, w) in clip.frames.iter().zip(pivots) {
        let synth = generator.synthesize(w)?;
        let n2: f64 = synth
            .data
            .iter()
            .zip(frame.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += n2.sqrt();
    }
    Ok(total / clip.len() as f64)
}

/// Write loss records as line-delimited JSON.
pub fn write_loss_log(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
