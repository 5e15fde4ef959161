//! Finite-difference gradient checking and small model fixtures.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialmoe::smoe::{random_batch, Batch, GateMode, Modality, ModelConfig, Noise, SMoEModel};
use trialmoe::training::{backward, total_loss};

pub const FD_STEP: f64 = 1e-4;

pub fn small_config(gate_mode: GateMode) -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        shared_dim: 5,
        experts: 4,
        top_k: 2,
        hidden_dim: 7,
        expert_out: 4,
        gate_mode,
        modalities: Modality::ALL.to_vec(),
        ..Default::default()
    }
}

/// Model with every parameter drawn at unit-ish scale (including the noise
/// projection, which starts at zero after normal initialization).
pub fn random_model(config: ModelConfig, seed: u64) -> SMoEModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SMoEModel::new(config, &mut rng).unwrap();
    for p in &mut model.params {
        let scale = 1.0 / (p.nrows() as f64).sqrt();
        p.mapv_inplace(|_| rng.random_range(-1.0..1.0) * scale * 1.5);
    }
    model
}

pub struct Problem {
    pub batch: Batch,
    pub labels: Array1<f64>,
    pub eps: Option<Array2<f64>>,
}

pub fn problem(model: &SMoEModel, n: usize, seed: u64, with_noise: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = random_batch(&model.config, n, &mut rng);
    for x in &mut batch.inputs {
        x.mapv_inplace(|v| v * 2.0);
    }
    let labels = (0..n).map(|_| rng.random_range(0..2u8) as f64).collect();
    let eps = with_noise.then(|| {
        Array2::from_shape_simple_fn((n, model.config.experts), || rng.random_range(-1.5..1.5))
    });
    Problem { batch, labels, eps }
}

fn noise(p: &Problem) -> Noise<'_> {
    match &p.eps {
        Some(e) => Noise::Fixed(e.view()),
        None => Noise::Off,
    }
}

pub fn loss(model: &SMoEModel, p: &Problem, lambda: f64) -> f64 {
    total_loss(model, &p.batch, &p.labels, lambda, noise(p))
        .unwrap()
        .0
        .total
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub struct Check {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Picks `per_tensor` entries from every parameter tensor and compares the
/// analytic gradient with a central difference.
pub fn gradient_check(
    model: &SMoEModel,
    p: &Problem,
    lambda: f64,
    per_tensor: usize,
    seed: u64,
) -> Vec<Check> {
    let (_, grads, _) = backward(model, &p.batch, &p.labels, lambda, noise(p)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let (rows, cols) = g.dim();
        for _ in 0..per_tensor.min(rows * cols) {
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = probe.params[t][[r, c]];
            probe.params[t][[r, c]] = orig + FD_STEP;
            let up = loss(&probe, p, lambda);
            probe.params[t][[r, c]] = orig - FD_STEP;
            let down = loss(&probe, p, lambda);
            probe.params[t][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g[[r, c]];
            out.push(Check {
                name: format!("{}[{r},{c}]", model.layout.names[t]),
                analytic,
                numeric,
                rel: relative_error(analytic, numeric),
            });
        }
    }
    out
}

/// Independent top-k: sort by logit descending, stable (lower index first).
fn oracle_gate(logits: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|a, b| logits[*b].partial_cmp(&logits[*a]).unwrap());
    let keep = &idx[..k];
    let z: f64 = keep.iter().map(|&j| logits[j].exp()).sum();
    (0..logits.len())
        .map(|j| {
            if keep.contains(&j) {
                logits[j].exp() / z
            } else {
                0.0
            }
        })
        .collect()
}

/// Largest relative gap between the sparse fusion output and a dense
/// reference that runs every expert and masks by the oracle gate.
/// Routing statistics are asserted along the way.
pub fn dense_routing_error(n_experts: usize, k: usize, train: bool, samples: usize) -> f64 {
    let cfg = ModelConfig {
        experts: n_experts,
        top_k: k,
        ..small_config(GateMode::DrugDisease)
    };
    let model = random_model(cfg, (n_experts * 10 + k) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
    let h = Array2::from_shape_simple_fn((samples, model.config.fused_dim()), || {
        rng.random_range(-2.0..2.0)
    });
    let gin = Array2::from_shape_simple_fn((samples, model.config.gate_input_dim()), || {
        rng.random_range(-2.0..2.0)
    });
    let eps = Array2::from_shape_simple_fn((samples, n_experts), || rng.random_range(-1.0..1.0));
    let noise = if train {
        Noise::Fixed(eps.view())
    } else {
        Noise::Off
    };
    let (y, stats, _) = model.fuse(&h, &gin, noise);

    let mut logits = gin.dot(&model.params[model.layout.wg]);
    if train {
        let pre = gin.dot(&model.params[model.layout.wnoise]);
        logits = logits + &eps * &pre.mapv(|x| (1.0 + x.exp()).ln());
    }
    let outs: Vec<Array2<f64>> = (0..n_experts)
        .map(|j| model.expert_forward(j, h.view()))
        .collect();
    let mut worst = 0.0f64;
    for i in 0..samples {
        let probs = oracle_gate(logits.row(i).as_slice().unwrap(), k);
        let mut dense = Array1::<f64>::zeros(model.config.expert_out);
        for j in 0..n_experts {
            dense.scaled_add(probs[j], &outs[j].row(i));
        }
        for (a, b) in y.row(i).iter().zip(&dense) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    assert_eq!(stats.counts.iter().sum::<usize>(), samples * k);
    assert!((stats.f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((stats.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    worst
}
