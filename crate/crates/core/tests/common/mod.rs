//! Reference implementations shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use cludi_core::denoiser::{backprop, DenoiserParams, Dense, Gradients, TargetRouting};
use cludi_core::losses::{class_loss, Temperatures, PROB_FLOOR};
use cludi_core::metrics::{accuracy_hungarian, ari, nmi};
use cludi_core::trainer::{assemble_batch, CludiModel, TrainConfig, TrainingBatch};
use cludi_core::{rng, Labeling, LossConfig, LossWeights};
use ndarray::Array2;
use rand::Rng;

fn row_softmax(x: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let z: f64 = row.iter().map(|v| (v / tau).exp()).sum();
            row.iter().map(|v| (v / tau).exp() / z).collect()
        })
        .collect()
}

/// Column softmax over the batch, then each row renormalized over classes.
fn teacher_side(x: &[Vec<f64>], tau_col: f64) -> Vec<Vec<f64>> {
    let (m, k) = (x.len(), x[0].len());
    let mut cond = vec![vec![0.0; k]; m];
    for j in 0..k {
        let z: f64 = (0..m).map(|i| (x[i][j] / tau_col).exp()).sum();
        for i in 0..m {
            cond[i][j] = (x[i][j] / tau_col).exp() / z;
        }
    }
    cond.into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// `(M/K) p / column sum`.
fn student_side(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k) = (p.len(), p[0].len());
    let col: Vec<f64> = (0..k).map(|j| p.iter().map(|r| r[j]).sum()).collect();
    p.iter()
        .map(|r| (0..k).map(|j| m as f64 / k as f64 * r[j] / col[j]).collect())
        .collect()
}

fn cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    -target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

pub fn oracle(teacher: &[Vec<f64>], student: &[Vec<f64>], tau: f64, tau_col: f64, naive: bool) -> Vec<f64> {
    let p_student = row_softmax(student, tau);
    let p_teacher = row_softmax(teacher, tau);
    if naive {
        return (0..teacher.len())
            .map(|m| cross_entropy(&p_teacher[m], &p_student[m]))
            .collect();
    }
    let q = teacher_side(teacher, tau_col);
    let s_hat = student_side(&p_student);
    let r = teacher_side(student, tau_col);
    let q_prime = student_side(&p_teacher);
    (0..teacher.len())
        .map(|m| 0.5 * (cross_entropy(&q[m], &s_hat[m]) + cross_entropy(&r[m], &q_prime[m])))
        .collect()
}

pub fn to_array(x: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), x[0].len()), |(i, j)| x[i][j])
}

/// All set partitions of `n` items as restricted-growth strings.
pub fn partitions(n: usize, max_blocks: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, used: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for b in 0..=used.min(max - 1) {
            prefix.push(b);
            go(prefix, n, used.max(b + 1), max, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), n, 0, max_blocks, &mut out);
    out
}

/// Best number of matches over every injective map between the cluster sets.
pub fn brute_force_matches(pred: &[usize], truth: &[usize]) -> usize {
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    // map the smaller side injectively into the larger side
    let (small, large, flip) = if kp <= kt { (kp, kt, false) } else { (kt, kp, true) };
    let mut best = 0;
    let mut assign = Vec::with_capacity(small);
    let mut used = vec![false; large];
    fn walk(
        i: usize,
        small: usize,
        large: usize,
        flip: bool,
        table: &[Vec<usize>],
        assign: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut usize,
    ) {
        if i == small {
            let score = assign
                .iter()
                .enumerate()
                .map(|(a, &b)| if flip { table[b][a] } else { table[a][b] })
                .sum();
            *best = (*best).max(score);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                assign.push(j);
                walk(i + 1, small, large, flip, table, assign, used, best);
                assign.pop();
                used[j] = false;
            }
        }
    }
    walk(0, small, large, flip, &table, &mut assign, &mut used, &mut best);
    best
}

pub fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (n00 * n11 - n01 * n10) / denom
    }
}

pub fn entropy_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let h = |l: &[usize]| -> f64 {
        let k = l.iter().max().unwrap() + 1;
        (0..k)
            .map(|c| l.iter().filter(|&&v| v == c).count() as f64 / n)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    };
    let (hp, ht) = (h(pred), h(truth));
    if hp == 0.0 || ht == 0.0 {
        return if hp == 0.0 && ht == 0.0 { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    for a in 0..kp {
        for b in 0..kt {
            let joint = pred.iter().zip(truth).filter(|(&p, &t)| p == a && t == b).count() as f64 / n;
            if joint > 0.0 {
                let pa = pred.iter().filter(|&&p| p == a).count() as f64 / n;
                let pb = truth.iter().filter(|&&t| t == b).count() as f64 / n;
                mi += joint * (joint / (pa * pb)).ln();
            }
        }
    }
    mi / (0.5 * (hp + ht))
}

pub fn check_pair(pred: &[usize], truth: &[usize]) {
    let (p, t) = (Labeling::new(pred.to_vec()).unwrap(), Labeling::new(truth.to_vec()).unwrap());
    let n = pred.len();
    let acc = accuracy_hungarian(&p, &t).unwrap();
    assert_eq!(acc * n as f64, brute_force_matches(pred, truth) as f64, "{pred:?} {truth:?}");
    if n >= 2 {
        let a = ari(&p, &t).unwrap();
        assert!((a - pair_counting_ari(pred, truth)).abs() < 1e-12, "{pred:?} {truth:?}");
    }
    let v = nmi(&p, &t).unwrap();
    assert!((v - entropy_nmi(pred, truth)).abs() < 1e-12, "{pred:?} {truth:?}");
    assert!((0.0..=1.0).contains(&v));
}

pub fn tiny_model(seed: u64, lambda: f64, naive: bool) -> CludiModel {
    let config = TrainConfig {
        k: 3,
        d: 4,
        views: 2,
        batch_n: 3,
        steps: 1000,
        teacher_steps: 25,
        hidden_width: 8,
        hidden_layers: 2,
        time_dim: 8,
        seed,
        loss: LossConfig {
            lambda,
            naive_ce_ablation: naive,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    CludiModel::init(config, 6).unwrap()
}

pub fn batch_for(model: &CludiModel, seed: u64) -> TrainingBatch {
    let mut r = rng::stream(seed ^ 0xfeed);
    let x = Array2::from_shape_simple_fn((3, 6), || r.random_range(-2.0..2.0));
    // batch of 3 items × 2 views = 6 rows
    assemble_batch(model, x.view(), &mut r).unwrap()
}

pub fn loss(model: &CludiModel, batch: &TrainingBatch, routing: TargetRouting) -> f64 {
    let weights = LossWeights::from_timesteps(&model.schedule, &batch.t, &model.config.loss).unwrap();
    backprop(&model.denoiser, &model.heads, batch, &weights, &model.config.loss, routing)
        .unwrap()
        .0
        .total
}

pub fn grads(model: &CludiModel, batch: &TrainingBatch, routing: TargetRouting) -> Gradients {
    let weights = LossWeights::from_timesteps(&model.schedule, &batch.t, &model.config.loss).unwrap();
    backprop(&model.denoiser, &model.heads, batch, &weights, &model.config.loss, routing)
        .unwrap()
        .1
}

/// Number of scalar parameters in each tensor, in gradient order.
pub fn tensor_sizes(model: &CludiModel) -> Vec<usize> {
    let mut sizes: Vec<usize> = model
        .denoiser
        .layers()
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    sizes.push(model.heads.logits.len());
    sizes.push(model.heads.embedding.len());
    sizes
}

/// Copy of `model` with scalar `index` of tensor `tensor` shifted by `delta`.
pub fn perturbed(model: &CludiModel, tensor: usize, index: usize, delta: f64) -> CludiModel {
    let mut out = model.clone();
    let n_layers = model.denoiser.layers().len();
    if tensor < 2 * n_layers {
        let mut layers: Vec<Dense> = model.denoiser.layers().to_vec();
        let layer = &mut layers[tensor / 2];
        if tensor % 2 == 0 {
            layer.weight.as_slice_mut().unwrap()[index] += delta;
        } else {
            layer.bias.as_slice_mut().unwrap()[index] += delta;
        }
        let net = &model.denoiser;
        out.denoiser = DenoiserParams::from_layers(
            model.config.d,
            model.feature_dim(),
            net.time_dim(),
            net.steps(),
            net.activation(),
            layers,
        )
        .unwrap();
    } else if tensor == 2 * n_layers {
        out.heads.logits.as_slice_mut().unwrap()[index] += delta;
    } else {
        out.heads.embedding.as_slice_mut().unwrap()[index] += delta;
    }
    out
}

/// Asserts agreement for every scalar parameter; returns the worst relative error.
pub fn check(model: &CludiModel, batch: &TrainingBatch, routing: TargetRouting) -> f64 {
    let analytic = grads(model, batch, routing);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (tensor, (size, g)) in tensor_sizes(model).into_iter().zip(analytic.slices()).enumerate() {
        assert_eq!(size, g.len());
        for index in 0..size {
            let up = loss(&perturbed(model, tensor, index, h), batch, routing);
            let down = loss(&perturbed(model, tensor, index, -h), batch, routing);
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(g[index].abs());
            let err = (numeric - g[index]).abs();
            let rel = if scale > 1e-7 { err / scale } else { 0.0 };
            assert!(
                rel < 1e-4 && err < 1e-6_f64.max(1e-4 * scale),
                "tensor {tensor} index {index}: analytic {} numeric {numeric} (rel {rel:e})",
                g[index]
            );
            worst = worst.max(rel);
        }
    }
    worst
}


/// Largest deviation between `class_loss` and the oracle over `count` random
/// instances with `M <= 5`, `K <= 3`.
pub fn loss_oracle_sweep(count: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..count {
        let m = r.random_range(1..=5);
        let k = r.random_range(1..=3);
        let spread = r.random_range(0.05..2.0);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..m)
                .map(|_| (0..k).map(|_| r.random_range(-spread..spread)).collect())
                .collect()
        };
        let (teacher, student) = (draw(), draw());
        let tau = r.random_range(0.05..1.0);
        let tau_col = r.random_range(0.03..1.0);
        let naive = instance % 5 == 0;
        let config = LossConfig {
            naive_ce_ablation: naive,
            ..LossConfig::default()
        };
        let got = class_loss(
            to_array(&teacher).view(),
            to_array(&student).view(),
            Temperatures { tau, tau_col },
            &config,
        )
        .unwrap();
        let want = oracle(&teacher, &student, tau, tau_col, naive);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}
