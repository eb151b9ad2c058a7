//! Supervised training: anchor matching, the multi-task loss, hard negative
//! mining and a deterministic Adam loop with a two-stage learning rate.

mod loss;
mod matching;
mod optim;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_formats::GroundTruthSegment;
use crate::model::Dtpn;
use crate::sampling::{temporal_flip, PyramidFeature};

pub use loss::{multitask_loss, LossBreakdown, LossWeights};
pub use matching::{match_anchors, Assignment, MatchResult, PositiveTarget};
pub use optim::Adam;
pub use synthetic::{make_synthetic_corpus, SynthConfig, SyntheticData};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_hi: usize,
    pub epochs_lo: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub match_threshold: f64,
    pub neg_pos_ratio: usize,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_hi: 12,
            epochs_lo: 8,
            lr_hi: 1e-4,
            lr_lo: 1e-5,
            match_threshold: 0.5,
            neg_pos_ratio: 3,
            loss_weights: LossWeights::default(),
            batch_size: 1,
            seed: 0,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(self.lr_hi) && positive(self.lr_lo)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.neg_pos_ratio < 1 {
            return Err(Error::Config("neg_pos_ratio must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config("match_threshold must lie in [0, 1]".into()));
        }
        let w = self.loss_weights;
        if [w.cls, w.loc, w.act].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs_hi + self.epochs_lo
    }

    /// `lr_hi` for the first `epochs_hi` epochs (zero-based), `lr_lo` after.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_hi {
            self.lr_hi
        } else {
            self.lr_lo
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub pyramid: PyramidFeature,
    pub gts: Vec<GroundTruthSegment>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Loss and parameter gradients (accumulated into `model`) for one sample.
pub fn sample_gradient(
    model: &mut Dtpn<f32>,
    pyramid: &PyramidFeature,
    gts: &[GroundTruthSegment],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut pass = model.forward(pyramid)?;
    let matching = match_anchors(&model.config().anchors(), gts, cfg.match_threshold);
    let loss = multitask_loss(&mut pass.heads, &matching, &cfg.loss_weights, cfg.neg_pos_ratio);
    if loss.total.is_finite() {
        model.backward(&mut pass);
    }
    Ok(loss)
}

/// Train in place. Samples are reshuffled every epoch and flipped in time
/// with `flip_probability`; both draws come from one seeded stream, so a
/// fixed seed reproduces the run bit for bit.
pub fn train(
    samples: &[TrainingSample],
    model: &mut Dtpn<f32>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    for s in samples {
        model.check_pyramid(&s.pyramid)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch_id = 0usize;
    model.zero_grad();

    for epoch in 0..cfg.epochs() {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let sample = &samples[i];
                let flip = rng.random::<f64>() < cfg.flip_probability;
                let loss = if flip {
                    let (p, g) = temporal_flip(&sample.pyramid, &sample.gts);
                    sample_gradient(model, &p, &g, cfg)?
                } else {
                    sample_gradient(model, &sample.pyramid, &sample.gts, cfg)?
                };
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        batch: batch_id,
                        loss: loss.total,
                    });
                }
                epoch_loss += loss.total;
            }
            let scale = 1.0 / batch.len() as f32;
            let mut params = model.params_mut();
            if scale != 1.0 {
                for p in params.iter_mut() {
                    p.grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            adam.step(&mut params, lr);
            params.into_iter().for_each(|p| p.zero_grad());
            batch_id += 1;
        }
        let mean_loss = epoch_loss / samples.len().max(1) as f64;
        report.epoch_losses.push(mean_loss);
        on_epoch(&EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss,
        });
    }
    report.steps = adam.steps();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Branches, ModelConfig};
    use crate::sampling::{synthetic_backbone, SamplingConfig};

    #[test]
    fn schedule_switches_after_high_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs(), 20);
        assert_eq!(cfg.learning_rate(11), 1e-4);
        assert_eq!(cfg.learning_rate(12), 1e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = TrainConfig { lr_hi: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { neg_pos_ratio: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn tiny_setup() -> (Vec<TrainingSample>, ModelConfig) {
        let data = make_synthetic_corpus(&SynthConfig {
            num_videos: 3,
            frame_dim: 4,
            min_duration_s: 4.0,
            max_duration_s: 6.0,
            ..Default::default()
        });
        let sampling = SamplingConfig { scales: 3, base_segments: 4, window: 4 };
        let samples = data.samples(&sampling, &synthetic_backbone(0, 4, 6)).unwrap();
        let cfg = ModelConfig {
            scales: 3,
            base_segments: 4,
            feature_dim: 6,
            branch_filters: 4,
            head_kernel: 3,
            num_classes: 3,
            branches: Branches::Both,
        };
        (samples, cfg)
    }

    #[test]
    fn fixed_seed_reproduces_losses_and_weights() {
        let (samples, mcfg) = tiny_setup();
        let tcfg = TrainConfig { epochs_hi: 2, epochs_lo: 1, batch_size: 2, ..Default::default() };
        let run = || {
            let mut model = Dtpn::new(mcfg, 4).unwrap();
            let report = train(&samples, &mut model, &tcfg, |_| {}).unwrap();
            (report, model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.epoch_losses.len(), 3);
        assert_eq!(a.steps, 6);
    }

    #[test]
    fn non_finite_features_abort_with_batch_id() {
        let (mut samples, mcfg) = tiny_setup();
        let mut levels = samples[0].pyramid.levels().to_vec();
        levels[0][0] = f32::NAN;
        samples[0].pyramid = PyramidFeature::new(6, 4, levels).unwrap();
        let mut model = Dtpn::new(mcfg, 0).unwrap();
        let tcfg = TrainConfig { epochs_hi: 1, epochs_lo: 0, ..Default::default() };
        match train(&samples, &mut model, &tcfg, |_| {}) {
            Err(Error::Divergence { batch, .. }) => assert!(batch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
