//! Gradient verification suite: every kernel and the end-to-end training
//! loss checked against central differences in `f64`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io_formats::GroundTruthSegment;
use crate::model::{Branches, Dtpn, ModelConfig};
use crate::sampling::PyramidFeature;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{
    binary_cross_entropy, concat_channels, cross_entropy_row, relu_backward, relu_inplace, smooth_l1,
    upsample_backward, upsample_time, Conv1d, Grad2, MaxPool, Padding,
};
use crate::train::{match_anchors, multitask_loss, LossWeights};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
const RELU_MARGIN: f64 = 0.01;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SuiteSize {
    #[default]
    Tiny,
    Small,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SuiteOptions {
    pub size: SuiteSize,
    pub seed: u64,
    /// Test fixture: negate the weight gradient produced by conv backward.
    pub inject_conv_sign_error: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.all_passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(format!("failed: {}", self.failures().join(", "))))
        }
    }
}

fn outcome(name: &str, report: GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: report.passes(TOLERANCE),
        report,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Inputs in `[-1, 1]` with at least `gap` between any two values in the
/// same column, so finite differences never cross a max-pool tie.
fn tie_free(rng: &mut ChaCha8Rng, t: usize, c: usize, gap: f64) -> Vec<f64> {
    let mut data = vec![0.0; t * c];
    for ch in 0..c {
        let mut slots: Vec<f64> = (0..t).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / t as f64).collect();
        for i in (1..t).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        for (ti, v) in slots.into_iter().enumerate() {
            let jitter = rng.random_range(-0.25..0.25) * (2.0 / t as f64 - gap).max(0.0);
            data[ti * c + ch] = v + jitter;
        }
    }
    data
}

/// `Σ r ⊙ relu(conv(x))` with respect to weights, bias and input.
fn check_conv(
    name: &str,
    rng: &mut ChaCha8Rng,
    (t, cin, cout): (usize, usize, usize),
    (kernel, stride, padding): (usize, usize, Padding),
    inject: bool,
) -> Result<CheckOutcome> {
    let mut conv = Conv1d::<f64>::new(name, kernel, stride, cin, cout, padding);
    conv.weight.value = uniform(rng, conv.weight.len());
    conv.bias.value = uniform(rng, cout);
    let x = Grad2::from_values(t, cin, uniform(rng, t * cin))?;
    let t_out = conv.output_len(t)?;
    let r = uniform(rng, t_out * cout);
    let (nw, nb) = (conv.weight.len(), cout);

    let eval = |conv: &Conv1d<f64>, x: &Grad2<f64>| -> f64 {
        let mut y = conv.forward(x).expect("shapes fixed above");
        relu_inplace(&mut y);
        y.values().iter().zip(&r).map(|(a, b)| a * b).sum()
    };

    let mut xg = x.clone();
    let mut y = conv.forward(&xg)?;
    relu_inplace(&mut y);
    y.grad_mut().copy_from_slice(&r);
    relu_backward(&mut y);
    conv.backward(&mut xg, &y);
    if inject {
        conv.weight.grad.iter_mut().for_each(|g| *g = -*g);
    }
    let analytic: Vec<f64> = conv.weight.grad.iter().chain(&conv.bias.grad).chain(xg.grad()).copied().collect();
    let theta: Vec<f64> = conv.weight.value.iter().chain(&conv.bias.value).chain(x.values()).copied().collect();
    let report = grad_check(&theta, &analytic, EPSILON, 0..theta.len(), |th| {
        let mut c = conv.clone();
        c.weight.value.copy_from_slice(&th[..nw]);
        c.bias.value.copy_from_slice(&th[nw..nw + nb]);
        let xv = Grad2::from_values(t, cin, th[nw + nb..].to_vec()).expect("same shape");
        eval(&c, &xv)
    });
    Ok(outcome(name, report))
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (t, c) = (16, 3);
    let pool = MaxPool::non_overlapping(4);
    let x = Grad2::from_values(t, c, tie_free(rng, t, c, 0.05))?;
    let r = uniform(rng, pool.output_len(t) * c);
    let mut xg = x.clone();
    let mut pooled = pool.forward(&xg);
    pooled.out.grad_mut().copy_from_slice(&r);
    MaxPool::backward(&mut xg, &pooled);
    let report = grad_check(x.values(), xg.grad(), EPSILON, 0..t * c, |th| {
        let xv = Grad2::from_values(t, c, th.to_vec()).expect("same shape");
        pool.forward(&xv).out.values().iter().zip(&r).map(|(a, b)| a * b).sum()
    });
    Ok(outcome("maxpool window 4", report))
}

/// `Σ r ⊙ concat(a, upsample(b))`.
fn check_concat_upsample(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (ta, ca, tb, cb) = (8, 3, 2, 2);
    let a = Grad2::from_values(ta, ca, uniform(rng, ta * ca))?;
    let b = Grad2::from_values(tb, cb, uniform(rng, tb * cb))?;
    let r = uniform(rng, ta * (ca + cb));
    let eval = |a: &Grad2<f64>, b: &Grad2<f64>| -> f64 {
        let up = upsample_time(b, ta).expect("divisible");
        let cat = concat_channels(&[a, &up]).expect("same length");
        cat.values().iter().zip(&r).map(|(x, y)| x * y).sum()
    };
    let mut out = concat_channels(&[&a, &upsample_time(&b, ta)?])?;
    out.grad_mut().copy_from_slice(&r);
    let (mut ag, mut bg, mut upg) = (a.clone(), b.clone(), Grad2::zeros(ta, cb));
    crate::tensor::accumulate_channel_slice(&out, 0, &mut ag);
    crate::tensor::accumulate_channel_slice(&out, ca, &mut upg);
    upsample_backward(&mut bg, &upg);
    let analytic: Vec<f64> = ag.grad().iter().chain(bg.grad()).copied().collect();
    let theta: Vec<f64> = a.values().iter().chain(b.values()).copied().collect();
    let report = grad_check(&theta, &analytic, EPSILON, 0..theta.len(), |th| {
        let av = Grad2::from_values(ta, ca, th[..ta * ca].to_vec()).expect("shape");
        let bv = Grad2::from_values(tb, cb, th[ta * ca..].to_vec()).expect("shape");
        eval(&av, &bv)
    });
    Ok(outcome("concat + upsample", report))
}

fn check_losses(rng: &mut ChaCha8Rng) -> Vec<CheckOutcome> {
    let logits: Vec<f64> = uniform(rng, 5).iter().map(|v| 3.0 * v).collect();
    let (_, g) = cross_entropy_row(&logits, 2);
    let ce = grad_check(&logits, &g, EPSILON, 0..5, |th| cross_entropy_row(th, 2).0);

    // away from the |u| = 1 kink
    let pred = [0.3, -2.0, 1.7, -0.2];
    let target = [0.1, 0.4, -0.5, 0.5];
    let (_, g) = smooth_l1(&pred, &target);
    let sl1 = grad_check(&pred, &g, EPSILON, 0..4, |th| smooth_l1(th, &target).0);

    let z = [rng.random_range(-4.0..4.0)];
    let mut bce_err = grad_check(&z, &[binary_cross_entropy(z[0], 1.0).1], EPSILON, 0..1, |th| {
        binary_cross_entropy(th[0], 1.0).0
    });
    let neg = grad_check(&z, &[binary_cross_entropy(z[0], 0.0).1], EPSILON, 0..1, |th| {
        binary_cross_entropy(th[0], 0.0).0
    });
    if neg.max_rel_error > bce_err.max_rel_error {
        bce_err = neg;
    }
    bce_err.checked = 2;
    vec![
        outcome("softmax cross-entropy", ce),
        outcome("smooth L1", sl1),
        outcome("binary cross-entropy", bce_err),
    ]
}

pub fn suite_model_config(size: SuiteSize) -> ModelConfig {
    match size {
        SuiteSize::Tiny => ModelConfig {
            scales: 3,
            base_segments: 4,
            feature_dim: 6,
            branch_filters: 4,
            head_kernel: 3,
            num_classes: 2,
            branches: Branches::Both,
        },
        SuiteSize::Small => ModelConfig {
            scales: 4,
            base_segments: 8,
            feature_dim: 8,
            branch_filters: 4,
            head_kernel: 3,
            num_classes: 3,
            branches: Branches::Both,
        },
    }
}

fn flatten(model: &Dtpn<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut theta = Vec::new();
    let mut grad = Vec::new();
    for p in model.params() {
        theta.extend_from_slice(&p.value);
        grad.extend_from_slice(&p.grad);
    }
    (theta, grad)
}

fn load(model: &mut Dtpn<f64>, theta: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.len();
        p.value.copy_from_slice(&theta[off..off + n]);
        off += n;
    }
}

/// Full multi-task loss of one video, differentiated through heads, context,
/// fusion and the conv branch.
fn check_end_to_end(config: ModelConfig, rng: &mut ChaCha8Rng, inject: bool) -> Result<CheckOutcome> {
    let d = config.feature_dim;
    let levels = (0..config.scales)
        .map(|s| {
            (0..(config.base_segments << s) * d)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect()
        })
        .collect();
    let pyramid = PyramidFeature::new(d, config.base_segments, levels)?;
    let gts: Vec<GroundTruthSegment> = (0..config.num_classes)
        .map(|c| {
            let start = (c as f64 + rng.random_range(0.0..0.3)) / config.num_classes as f64;
            let end = start + rng.random_range(0.2..0.6) / config.num_classes as f64;
            GroundTruthSegment { label_index: c, start, end }
        })
        .collect();
    let matching = match_anchors(&config.anchors(), &gts, 0.5);
    let weights = LossWeights::default();

    // Draw initializations until no ReLU input sits near its kink, so that
    // ±ε steps stay on one linear piece.
    let mut model = None;
    for _ in 0..MAX_DRAWS {
        let mut candidate: Dtpn<f64> = Dtpn::<f32>::new(config, rng.random())?.cast();
        for p in candidate.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        if candidate.relu_margin(&pyramid)? >= RELU_MARGIN {
            model = Some(candidate);
            break;
        }
    }
    let mut model = model.ok_or_else(|| Error::GradCheck("no kink-free evaluation point found".into()))?;
    let mut pass = model.forward(&pyramid)?;
    multitask_loss(&mut pass.heads, &matching, &weights, 3);
    model.zero_grad();
    model.backward(&mut pass);
    if inject {
        for p in model.params_mut() {
            if p.name.ends_with(".weight") {
                p.grad.iter_mut().for_each(|g| *g = -*g);
            }
        }
    }
    let (theta, analytic) = flatten(&model);
    let mut probe = model.clone();
    let report = grad_check(&theta, &analytic, EPSILON, 0..theta.len(), |th| {
        load(&mut probe, th);
        let mut pass = probe.forward(&pyramid).expect("shapes fixed");
        multitask_loss(&mut pass.heads, &matching, &weights, 3).total
    });
    Ok(outcome("end-to-end loss", report))
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inject = opts.inject_conv_sign_error;
    let mut outcomes = vec![
        check_conv("conv1d k3 s2 same", &mut rng, (16, 5, 4), (3, 2, Padding::Same), inject)?,
        check_conv("conv1d k2 s1 same", &mut rng, (8, 3, 4), (2, 1, Padding::Same), inject)?,
        check_conv("conv1d k5 s4 same", &mut rng, (32, 3, 2), (5, 4, Padding::Same), inject)?,
        check_conv("conv1d k3 s1 valid", &mut rng, (9, 2, 3), (3, 1, Padding::Valid), inject)?,
        check_maxpool(&mut rng)?,
        check_concat_upsample(&mut rng)?,
    ];
    outcomes.extend(check_losses(&mut rng));
    outcomes.push(check_end_to_end(suite_model_config(opts.size), &mut rng, inject)?);
    Ok(SuiteReport {
        outcomes,
        elapsed: started.elapsed(),
    })
}
