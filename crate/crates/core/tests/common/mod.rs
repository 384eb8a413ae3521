//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use makd::annotate::endpoint::{ChatEndpoint, ChatRequest, ChatResponse, EndpointError, ImageRef};
use makd::annotate::{annotate_dataset, AnnotationStore, EndpointConfig, RetryPolicy};
use makd::aspects::{AspectQuestion, Provenance, QuestionSet};
use makd::data::{DatasetManifest, ImageEntry, Split};
use makd::losses::{
    class_cross_entropy, kd_kl, kd_kl_grad, kl_aspect_loss, makd_bce, total_loss, total_loss_grad, yes_no_probability,
    AspectLoss, AspectTargets, BatchTargets, ExpandedOutput, ObjectiveWeights,
};
use makd::model::{Activation, Model, ModelConfig};
use makd::numerics::{grad_check, Tensor};
use makd::train::batch_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Logistic function written out independently of the crate's.
pub fn reference_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest `|yes_no_probability(a, b) - sigmoid(a - b)|` over `n` pairs, and
/// whether every extreme pair gave a finite probability in [0, 1].
pub fn eq1_identity(n: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let span = [1.0, 10.0, 50.0, 700.0][i % 4];
        let (a, b) = (rng.gen_range(-span..span), rng.gen_range(-span..span));
        let p = yes_no_probability(a, b).unwrap();
        worst = worst.max((p - reference_sigmoid(a - b)).abs());
    }
    let extremes = [
        (1000.0, -1000.0),
        (-1000.0, 1000.0),
        (1000.0, 1000.0),
        (-1000.0, -1000.0),
        (1000.0, 0.0),
    ];
    let sane = extremes
        .iter()
        .all(|&(a, b)| yes_no_probability(a, b).is_ok_and(|p| p.is_finite() && (0.0..=1.0).contains(&p)));
    (worst, sane)
}

/// A random small model with one batch of inputs and targets.
pub struct GradCase {
    pub model: Model,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub aspects: Vec<f64>,
    pub teacher: Vec<f64>,
    pub temperature: f64,
    pub alpha: f64,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    let q = rng.gen_range(1..4);
    let b = rng.gen_range(1..5);
    let hidden = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(2..6)).collect();
    let mut model = Model::build(ModelConfig {
        hidden_dims: hidden,
        activation: if seed.is_multiple_of(2) {
            Activation::Sigmoid
        } else {
            Activation::Relu
        },
        ..ModelConfig::new(d, c, q, seed)
    })
    .unwrap();
    // nonzero biases keep relu pre-activations off the kink at exactly 0
    for layer in model.layers_mut() {
        for b in layer.bias.values_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    GradCase {
        model,
        x: Tensor::matrix(b, d, (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
        labels: (0..b).map(|_| rng.gen_range(0..c)).collect(),
        aspects: (0..b * q)
            .map(|i| {
                if i % 5 == 0 {
                    (i % 2) as f64
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect(),
        teacher: (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        temperature: rng.gen_range(0.5..5.0),
        alpha: rng.gen_range(0.0..3.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    ClassCrossEntropy,
    MakdBce,
    KlAspect,
    KdKl,
    Total,
}

pub const LOSSES: [Loss; 5] = [
    Loss::ClassCrossEntropy,
    Loss::MakdBce,
    Loss::KlAspect,
    Loss::KdKl,
    Loss::Total,
];

fn with_params(model: &Model, flat: &[f64]) -> Model {
    let mut m = model.clone();
    let mut offset = 0;
    for p in m.parameters_mut() {
        let n = p.len();
        p.values_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    m
}

/// Batch mean of the scalar loss, evaluated with the per-example functions.
fn scalar_loss(case: &GradCase, model: &Model, loss: Loss) -> f64 {
    let outs = model.predict(&case.x).unwrap();
    let (c, q) = (model.num_classes(), model.num_aspects());
    let sum: f64 = outs
        .iter()
        .enumerate()
        .map(|(r, o)| {
            let t = AspectTargets::new(case.aspects[r * q..(r + 1) * q].to_vec()).unwrap();
            match loss {
                Loss::ClassCrossEntropy => class_cross_entropy(o, case.labels[r]).unwrap(),
                Loss::MakdBce => makd_bce(o, &t).unwrap(),
                Loss::KlAspect => kl_aspect_loss(o, &t).unwrap(),
                Loss::KdKl => kd_kl(o.class_logits(), &case.teacher[r * c..(r + 1) * c], case.temperature).unwrap(),
                Loss::Total => total_loss(o, case.labels[r], &t, case.alpha).unwrap().total,
            }
        })
        .sum();
    sum / outs.len() as f64
}

fn graph_grads(case: &GradCase, model: &Model, weights: ObjectiveWeights) -> Vec<f64> {
    let targets = BatchTargets {
        labels: &case.labels,
        aspects: Some(&case.aspects),
        teacher: Some(&case.teacher),
    };
    batch_loss(model, &case.x, targets, weights)
        .unwrap()
        .grads
        .into_iter()
        .flat_map(Tensor::into_values)
        .collect()
}

/// Parameter gradient of one loss term, read off the training graph. Terms
/// that only appear next to the cross-entropy are isolated by subtracting
/// the cross-entropy-only gradient.
fn analytic(case: &GradCase, model: &Model, loss: Loss) -> Vec<f64> {
    let ce_only = ObjectiveWeights {
        alpha: 0.0,
        variant: AspectLoss::Bce,
        kd: None,
    };
    let ce = graph_grads(case, model, ce_only);
    let minus_ce = |w: ObjectiveWeights| -> Vec<f64> {
        graph_grads(case, model, w)
            .iter()
            .zip(&ce)
            .map(|(a, b)| a - b)
            .collect()
    };
    match loss {
        Loss::ClassCrossEntropy => ce,
        Loss::MakdBce => minus_ce(ObjectiveWeights { alpha: 1.0, ..ce_only }),
        Loss::KlAspect => minus_ce(ObjectiveWeights {
            alpha: 1.0,
            variant: AspectLoss::Kl,
            kd: None,
        }),
        Loss::KdKl => minus_ce(ObjectiveWeights {
            kd: Some((case.temperature, 1.0)),
            ..ce_only
        }),
        Loss::Total => graph_grads(
            case,
            model,
            ObjectiveWeights {
                alpha: case.alpha,
                ..ce_only
            },
        ),
    }
}

/// Worst relative disagreement between analytic and central-difference
/// gradients (step 1e-5) for `loss` on the case drawn from `seed`. For the
/// two losses with closed-form logit gradients, those are checked as well.
pub fn gradient_error(loss: Loss, seed: u64) -> f64 {
    let case = grad_case(seed);
    let point: Vec<f64> = case.model.parameters().flat_map(|p| p.values().to_vec()).collect();
    let f = |flat: &[f64]| {
        let m = with_params(&case.model, flat);
        (scalar_loss(&case, &m, loss), analytic(&case, &m, loss))
    };
    let mut worst = grad_check(f, &point, 1e-5).unwrap();

    let (c, q) = (case.model.num_classes(), case.model.num_aspects());
    let logits = case.model.logits(&case.x).unwrap();
    for r in 0..case.labels.len() {
        let row = logits.row(r).to_vec();
        let targets = AspectTargets::new(case.aspects[r * q..(r + 1) * q].to_vec()).unwrap();
        let teacher = &case.teacher[r * c..(r + 1) * c];
        let err = match loss {
            Loss::Total => grad_check(
                |z: &[f64]| {
                    let o = ExpandedOutput::new(z.to_vec(), c).unwrap();
                    (
                        total_loss(&o, case.labels[r], &targets, case.alpha).unwrap().total,
                        total_loss_grad(&o, case.labels[r], &targets, case.alpha).unwrap(),
                    )
                },
                &row,
                1e-5,
            )
            .unwrap(),
            Loss::KdKl => grad_check(
                |z: &[f64]| {
                    (
                        kd_kl(z, teacher, case.temperature).unwrap(),
                        kd_kl_grad(z, teacher, case.temperature).unwrap(),
                    )
                },
                &row[..c],
                1e-5,
            )
            .unwrap(),
            _ => 0.0,
        };
        worst = worst.max(err);
    }
    worst
}

/// Worst change over `probes` random outputs: class loss and argmax under
/// aspect-slice edits, aspect loss under class-slice edits.
pub fn slice_isolation(probes: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut argmax_kept = true;
    for _ in 0..probes {
        let c = rng.gen_range(1..8);
        let q = rng.gen_range(1..8);
        let logits: Vec<f64> = (0..c + q).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let label = rng.gen_range(0..c);
        let t = AspectTargets::new((0..q).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let base = ExpandedOutput::new(logits.clone(), c).unwrap();

        let mut aspect_edit = base.clone();
        for z in aspect_edit.aspect_logits_mut() {
            *z = rng.gen_range(-1e3..1e3);
        }
        worst = worst.max(
            (class_cross_entropy(&aspect_edit, label).unwrap() - class_cross_entropy(&base, label).unwrap()).abs(),
        );
        argmax_kept &= aspect_edit.predicted_class() == base.predicted_class();

        let mut class_edit = base.clone();
        for z in &mut class_edit.logits_mut()[..c] {
            *z = rng.gen_range(-1e3..1e3);
        }
        worst = worst.max((makd_bce(&class_edit, &t).unwrap() - makd_bce(&base, &t).unwrap()).abs());
    }
    (worst, argmax_kept)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Returns fixed candidates per (image, question), counting calls.
#[derive(Default)]
pub struct FixedStub {
    pub calls: AtomicUsize,
}

impl FixedStub {
    /// Candidate log-probabilities served for a request.
    pub fn logits_for(request: &ChatRequest) -> (f64, f64) {
        let h = fnv1a(&request.user_text());
        (-((h % 997) as f64) / 123.0, -(((h >> 17) % 991) as f64) / 117.0)
    }
}

impl ChatEndpoint for FixedStub {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (y, n) = Self::logits_for(request);
        Ok(ChatResponse::from_candidates(&[("Yes", y), ("No", n)]))
    }
}

pub fn toy_manifest(m: usize) -> DatasetManifest {
    DatasetManifest {
        dataset_id: "stubbed".into(),
        class_names: vec!["a".into(), "b".into()],
        attribute_names: None,
        images: (0..m)
            .map(|i| ImageEntry {
                id: format!("img-{i:03}"),
                split: if i % 3 == 0 { Split::Test } else { Split::Train },
                label: i % 2,
                path: Some(format!("https://example.invalid/{i}.png")),
            })
            .collect(),
        latents: None,
        feature_file: "features.bin".into(),
    }
}

pub fn toy_questions(q: usize) -> QuestionSet {
    let qs = (0..q)
        .map(|i| AspectQuestion::new(i as u32, format!("Is part {i} visible?"), Provenance::unknown()).unwrap())
        .collect();
    QuestionSet::new("stubbed", vec!["a".into(), "b".into()], qs).unwrap()
}

/// Annotates a toy dataset through the stub, reloads the store, and checks
/// bit equality against the stub's values; then re-runs annotate. Returns
/// `(mismatches, calls on the first run, calls on the second run)`.
pub fn pipeline_exactness(dir: &Path) -> (usize, usize, usize) {
    let manifest = toy_manifest(12);
    let questions = toy_questions(4);
    let images: Vec<Option<ImageRef>> = manifest
        .images
        .iter()
        .map(|i| i.path.clone().map(ImageRef::Url))
        .collect();
    let config = EndpointConfig {
        max_concurrent: 3,
        retry: RetryPolicy {
            max_attempts: 1,
            initial_backoff_ms: 0,
        },
        ..EndpointConfig::default()
    };
    let path = dir.join("store.json");
    let stub = FixedStub::default();
    annotate_dataset(&manifest, &images, &questions, &stub, &config, &path).unwrap();
    let first = stub.calls.swap(0, Ordering::SeqCst);

    let store = AnnotationStore::load(&path).unwrap();
    let mut mismatches = 0;
    for (r, img) in images.iter().enumerate() {
        for (c, q) in questions.selected_questions().iter().enumerate() {
            let request = makd::annotate::endpoint::build_aspect_query(
                &config.model,
                img.as_ref().unwrap(),
                &q.text,
                config.top_logprobs,
            )
            .unwrap();
            let (y, n) = FixedStub::logits_for(&request);
            let expected = yes_no_probability(y, n).unwrap();
            if store.get(r, c).map(f64::to_bits) != Some(expected.to_bits()) {
                mismatches += 1;
            }
        }
    }
    annotate_dataset(&manifest, &images, &questions, &stub, &config, &path).unwrap();
    (mismatches, first, stub.calls.load(Ordering::SeqCst))
}
