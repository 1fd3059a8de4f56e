#![allow(dead_code)]

use std::path::PathBuf;

use fpcil_core::extractor::{assign_parameters, flatten_parameters, init_extractor, loss_and_grads, LinearHeadWeights};
use fpcil_core::rng::{derive_seed, SplitMix64};
use fpcil_core::{ClassId, EmbeddingSample, Origin, Split};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn normal_vec(rng: &mut SplitMix64, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim).map(|_| sd * rng.normal()).collect()
}

/// Plain nearest-mean rule written out longhand.
pub fn nearest_mean(means: &[(ClassId, Vec<f64>)], x: &[f64]) -> ClassId {
    let mut best = (f64::INFINITY, ClassId::MAX);
    for (c, m) in means {
        let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 || (d == best.0 && *c < best.1) {
            best = (d, *c);
        }
    }
    best.1
}

#[derive(Debug)]
pub struct GradCheck {
    pub instances: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
}

/// Smallest |pre-activation| over every hidden unit and batch row.
fn min_abs_preactivation(layers: &[fpcil_core::extractor::DenseLayer], batch: &[EmbeddingSample]) -> f64 {
    let mut min = f64::INFINITY;
    for s in batch {
        let mut h = s.features.clone();
        for l in layers {
            let mut next = Vec::with_capacity(l.bias.len());
            for r in 0..l.weights.nrows() {
                let z: f64 = (0..l.weights.ncols()).map(|c| l.weights[(r, c)] * h[c]).sum::<f64>() + l.bias[r];
                min = min.min(z.abs());
                next.push(z.max(0.0));
            }
            h = next;
        }
    }
    min
}

/// Analytic gradients against central differences on random nets and
/// batches. Draws that put a rectifier input within `1e-3` of its kink are
/// redrawn, since the finite difference is meaningless there.
pub fn gradient_check(instances: usize, seed: u64) -> GradCheck {
    const H: f64 = 1e-5;
    // Entries are compared relative to max(|analytic|, |numeric|, FLOOR) so
    // that vanishing gradients are judged on an absolute scale.
    const FLOOR: f64 = 1e-6;
    let mut rng = SplitMix64::new(seed);
    let mut out = GradCheck {
        instances: 0,
        rejected: 0,
        max_rel_error: 0.0,
    };
    let mut draw = 0u64;
    while out.instances < instances {
        draw += 1;
        let input = 2 + rng.below(5) as usize;
        let depth = 1 + rng.below(2) as usize;
        let mut dims = vec![input];
        for _ in 0..depth {
            dims.push(2 + rng.below(7) as usize);
        }
        let classes = 2 + rng.below(4) as usize;
        let batch_size = 1 + rng.below(8) as usize;
        let weight_decay = if rng.next_f64() < 0.5 { 0.0 } else { 1e-2 };

        let mut extractor = init_extractor(&dims, derive_seed(seed, draw)).unwrap();
        {
            let layers = extractor.layers_mut().unwrap();
            for l in layers.iter_mut() {
                l.bias.apply(|b| *b = 0.1 * rng.normal());
            }
        }
        let ids: Vec<ClassId> = (0..classes as ClassId).collect();
        let mut head = LinearHeadWeights::init(&ids, *dims.last().unwrap(), derive_seed(seed, draw + 1_000_000)).unwrap();
        let batch: Vec<EmbeddingSample> = (0..batch_size)
            .map(|_| {
                EmbeddingSample::new(
                    normal_vec(&mut rng, input, 1.0),
                    rng.below(classes as u64) as ClassId,
                    Origin::Real,
                    Split::Train,
                )
            })
            .collect();
        if min_abs_preactivation(extractor.layers(), &batch) < 1e-3 {
            out.rejected += 1;
            continue;
        }

        let (_, grads) = loss_and_grads(&extractor, &head, &batch, weight_decay).unwrap();
        let analytic = grads.flatten();
        let params = flatten_parameters(&extractor, &head);
        let mut probe = params.clone();
        for (i, a) in analytic.iter().enumerate() {
            probe[i] = params[i] + H;
            assign_parameters(&mut extractor, &mut head, &probe).unwrap();
            let up = loss_and_grads(&extractor, &head, &batch, weight_decay).unwrap().0;
            probe[i] = params[i] - H;
            assign_parameters(&mut extractor, &mut head, &probe).unwrap();
            let down = loss_and_grads(&extractor, &head, &batch, weight_decay).unwrap().0;
            probe[i] = params[i];
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            out.max_rel_error = out.max_rel_error.max(rel);
        }
        out.instances += 1;
    }
    out
}

/// Ten classes in dimension 8, B4 Inc2, NCM head, two seeds.
pub fn tiny_config() -> fpcil_core::runner::ScenarioConfig {
    use fpcil_core::heads::{HeadConfig, HeadKind};
    let mut c = fpcil_core::runner::ScenarioConfig::reference();
    c.name = "tiny".into();
    c.world.num_classes = 10;
    c.world.dim = 8;
    c.world.num_distractors = 10;
    c.data.train_per_class = 20;
    c.data.test_per_class = 10;
    c.schedule.base_size = 4;
    c.schedule.inc_size = 2;
    c.auxiliary.n_per_class = 20;
    c.extractor.layer_dims = Some(vec![8, 16, 8]);
    c.extractor.train.epochs = 2;
    c.extractor.train.batch_size = 32;
    c.head = HeadConfig::new(HeadKind::Ncm);
    c.eval_seeds = vec![0, 1];
    c
}
