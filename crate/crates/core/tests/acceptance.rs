//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test -p gclgcn --test acceptance` runs everything; a trailing
//! argument restricts the run to criteria whose name contains it, e.g.
//! `cargo test -p gclgcn --test acceptance -- metrics`.
//!
//! The end-to-end recovery criterion trains at full width for 200 epochs and
//! takes a few minutes on one core.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gclgcn::autodiff::{finite_difference_check, Tape};
use gclgcn::centrality::{betweenness_centrality, closeness_centrality, degree_centrality};
use gclgcn::cluster::{accuracy, ari, f1_macro, nmi, MetricRow};
use gclgcn::config::{DataSource, ExperimentConfig, SbmConfig};
use gclgcn::graph::{normalize_adjacency, Graph};
use gclgcn::harness::{ablation_study, encoding_study, sweep_loss_weights, ENCODING_VARIANTS, LOSS_WEIGHT_VALUES};
use gclgcn::layers::{
    ae_forward, attention_rows, augment_features, combined_similarity, contrastive_encoder, contrastive_loss,
    gcn_layer, graphormer_layer, AeParams, AttentionProjections, ContrastiveParams, GraphormerParams, Ladder,
    SpatialSign,
};
use gclgcn::training::{
    centroid_gradient, forward, kl_div, loss_total, predict, pretrain, soft_assign, soft_assign_values,
    target_distribution, train, train_from, EpochView, ModelState, Prepared, TrainOptions,
};
use gclgcn::Matrix;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, elapsed: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-scale..scale))
}

fn erdos_renyi(r: &mut ChaCha8Rng, n: usize, p: f64, features: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::new(uniform(r, n, features, 1.0), edges, None).expect("valid graph")
}

// ---------------------------------------------------------------------------
// centrality

/// Hop distances and shortest-path counts by Floyd–Warshall.
fn floyd_warshall_counts(g: &Graph) -> (Vec<Vec<u64>>, Vec<Vec<f64>>) {
    const INF: u64 = u64::MAX / 4;
    let n = g.num_nodes();
    let mut d = vec![vec![INF; n]; n];
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        c[i][i] = 1.0;
    }
    for &(u, v) in g.edges() {
        d[u][v] = 1;
        d[v][u] = 1;
        c[u][v] = 1.0;
        c[v][u] = 1.0;
    }
    for k in 0..n {
        for i in 0..n {
            if i == k || d[i][k] >= INF {
                continue;
            }
            for j in 0..n {
                if j == k || j == i || d[k][j] >= INF {
                    continue;
                }
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                    c[i][j] = c[i][k] * c[k][j];
                } else if via == d[i][j] {
                    c[i][j] += c[i][k] * c[k][j];
                }
            }
        }
    }
    (d, c)
}

fn centrality_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst_bc = 0.0f64;
    let mut exact_failures = 0;
    for case in 0..100 {
        let n = r.random_range(2..=50);
        let p = [0.1, 0.3, 0.6][case % 3];
        let g = erdos_renyi(&mut r, n, p, 1);
        let (d, c) = floyd_warshall_counts(&g);

        let bc = betweenness_centrality(&g);
        for v in 0..n {
            let mut expected = 0.0;
            for s in 0..n {
                for t in s + 1..n {
                    if s == v || t == v || c[s][t] == 0.0 {
                        continue;
                    }
                    if d[s][v] + d[v][t] == d[s][t] {
                        expected += c[s][v] * c[v][t] / c[s][t];
                    }
                }
            }
            worst_bc = worst_bc.max((bc[v] - expected).abs());
        }

        let max_deg = (0..n).map(|v| g.degree(v)).max().unwrap_or(0);
        let dc = degree_centrality(&g);
        let cc = closeness_centrality(&g);
        for v in 0..n {
            let want_dc = if max_deg == 0 { 0.0 } else { g.degree(v) as f64 / max_deg as f64 };
            let total: u64 = (0..n).filter(|&u| c[v][u] > 0.0).map(|u| d[v][u]).sum();
            let want_cc = if total == 0 { 0.0 } else { 1.0 / total as f64 };
            if dc[v] != want_dc || cc[v] != want_cc {
                exact_failures += 1;
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(30), start.elapsed());
    outcome(
        worst_bc <= 1e-9 && exact_failures == 0 && fast,
        format!("100 graphs, max |BC - oracle| = {worst_bc:.2e}, degree/closeness mismatches = {exact_failures}, {time}"),
    )
}

// ---------------------------------------------------------------------------
// gradients

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;

fn grad_ae(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ladder = Ladder::from_parts(7, &[6, 5, 8], 3).unwrap();
    let mut params = AeParams::init(&ladder, &mut r);
    for layer in params.encoder.iter_mut().chain(&mut params.decoder) {
        let c = layer.bias.ncols();
        layer.bias = uniform(&mut r, 1, c, 0.5);
    }
    let x = uniform(&mut r, 6, 7, 1.0);
    let flat: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
    finite_difference_check(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(|_| it.next().unwrap());
            let xv = tape.constant(x.clone());
            ae_forward(&bound, xv)?.reconstruction.mse(xv)
        },
        &flat,
        FD_STEP,
    )
    .unwrap()
}

fn grad_gcn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let g = erdos_renyi(&mut r, 7, 0.4, 4);
    let adj = normalize_adjacency(&g).matrix;
    let target = uniform(&mut r, 7, 3, 1.0);
    let w = uniform(&mut r, 4, 3, 1.0);
    finite_difference_check(
        |tape, v| gcn_layer(tape.constant(adj.clone()), v[0], v[1], true)?.mse(tape.constant(target.clone())),
        &[g.features().clone(), w],
        FD_STEP,
    )
    .unwrap()
}

fn grad_graphormer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let g = erdos_renyi(&mut r, 6, 0.5, 3);
    let c = gclgcn::centrality::composite_centrality(&g, &gclgcn::centrality::Measure::ALL)
        .unwrap()
        .values()
        .clone();
    let rows = attention_rows(
        &gclgcn::centrality::spatial_bias(&g, gclgcn::centrality::SpatialMode::Euclidean),
        SpatialSign::Plus,
    );
    let heads = 2;
    let params = GraphormerParams::init(&Ladder::new(vec![3, 2]).unwrap(), 3, heads, &mut r);
    let target = uniform(&mut r, 6, 2, 1.0);
    let mut flat = vec![g.features().clone()];
    flat.extend(params.encoder[0].refs().into_iter().cloned());
    finite_difference_check(
        |tape, v| {
            let proj = AttentionProjections {
                key: v[1],
                query: v[2],
                value: v[3],
                centrality_key: v[4],
                centrality_query: v[5],
                centrality_value: v[6],
            };
            graphormer_layer(v[0], tape.constant(c.clone()), &rows, &proj, heads, true)?
                .mse(tape.constant(target.clone()))
        },
        &flat,
        FD_STEP,
    )
    .unwrap()
}

fn grad_contrastive(seed: u64) -> f64 {
    let mut r = rng(seed);
    let g = erdos_renyi(&mut r, 6, 0.4, 3);
    let adj = normalize_adjacency(&g).matrix;
    let x = g.features().clone();
    let aug = augment_features(&x, 0.2, &mut r).unwrap();
    let params = ContrastiveParams::init(3, 4, &mut r);
    let beta_sim = [1.0, 2.0][seed as usize % 2];
    finite_difference_check(
        |tape, v| {
            let p = ContrastiveParams { w0: v[0], w1: v[1] };
            let a = tape.constant(adj.clone());
            let c1 = contrastive_encoder(a, tape.constant(x.clone()), &p)?;
            let c2 = contrastive_encoder(a, tape.constant(aug.clone()), &p)?;
            contrastive_loss(combined_similarity(c1, c2, beta_sim)?, 0.5)
        },
        &[params.w0.clone(), params.w1.clone()],
        FD_STEP,
    )
    .unwrap()
}

fn tiny_model_cfg(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Sbm(SbmConfig {
            blocks: vec![3, 3],
            p_in: 0.8,
            p_out: 0.2,
            features: 4,
            seed,
            ..SbmConfig::default()
        }),
        k: 2,
        n_z: 3,
        widths: [4, 4, 5],
        seed,
        ..ExperimentConfig::preset("cora").unwrap()
    }
}

fn grad_composite(seed: u64) -> f64 {
    let cfg = tiny_model_cfg(seed);
    let g = cfg.load_graph().unwrap();
    let prep = Prepared::new(&g, &cfg).unwrap();
    let mut r = rng(seed + 1000);
    let mut ae = AeParams::init(&prep.ladder, &mut r);
    for b in ae.encoder.iter_mut().chain(&mut ae.decoder) {
        b.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    let x_c = uniform(&mut r, 6, 4, 0.5);
    let mu = uniform(&mut r, 2, 3, 1.0);
    let state = ModelState::init(&prep, &cfg, ae, x_c, mu);
    let p = target_distribution(&predict(&state, &prep, &cfg).unwrap());
    let params: Vec<Matrix> = state.trainable().into_iter().cloned().collect();
    finite_difference_check(
        |tape, vars| {
            let mv = state.vars_from(vars);
            let fw = forward(tape, &mv, &prep, &state.x_c, &cfg)?;
            Ok(loss_total(&fw, &p, &prep, &cfg)?.0)
        },
        &params,
        FD_STEP,
    )
    .unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("ae", grad_ae),
        ("gcn", grad_gcn),
        ("graphormer", grad_graphormer),
        ("contrastive", grad_contrastive),
        ("composite", grad_composite),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, check) in checks {
        let worst = (0..GRAD_SEEDS).map(check).fold(0.0f64, f64::max);
        pass &= worst <= FD_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let (fast, time) = within(Duration::from_secs(120), start.elapsed());
    outcome(
        pass && fast,
        format!("max rel. error over {GRAD_SEEDS} seeds: {}; {time}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// centroid gradient

fn centroid_gradient_check() -> Outcome {
    let (n, k, n_z, t) = (30, 4, 5, 1.0);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(500 + seed);
        let z = uniform(&mut r, n, n_z, 2.0);
        let mu = uniform(&mut r, k, n_z, 2.0);
        let q = soft_assign_values(&z, &mu, t).unwrap();
        let p = target_distribution(&q);
        let analytic = centroid_gradient(&z, &mu, &p, &q, t);

        let tape = Tape::new();
        let mu_v = tape.leaf(mu.clone());
        let q_v = soft_assign(tape.constant(z.clone()), mu_v, t).unwrap();
        let loss = kl_div(tape.constant(p.clone()), q_v).unwrap();
        tape.backward(loss).unwrap();
        let taped = tape.grad_or_zeros(mu_v);
        for (a, b) in analytic.iter().zip(&taped) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-6, format!("20 instances (n=30, k=4, n_z=5), max |analytic - tape| = {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// distribution invariants

fn row_sum_error(m: &Matrix) -> f64 {
    m.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Rows come in blocks of `k` cyclic shifts, so every column sums to the same value.
fn equalized_q(r: &mut ChaCha8Rng, blocks: usize, k: usize) -> Matrix {
    let mut q = Matrix::zeros((blocks * k, k));
    for b in 0..blocks {
        let base: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = base.iter().sum();
        for shift in 0..k {
            for j in 0..k {
                q[[b * k + shift, (j + shift) % k]] = base[j] / s;
            }
        }
    }
    q
}

fn distribution_invariants() -> Outcome {
    let mut cfg = ExperimentConfig {
        data: DataSource::Sbm(SbmConfig {
            blocks: vec![20, 20, 20],
            ..SbmConfig::default()
        }),
        k: 3,
        widths: [64, 64, 128],
        epochs: 50,
        ..ExperimentConfig::preset("cora").unwrap()
    };
    cfg.pretrain_epochs = 30;
    let g = cfg.load_graph().unwrap();
    let pre = pretrain(&g, &cfg).unwrap();
    let mut worst_sum = 0.0f64;
    let mut negative = 0;
    let mut epochs = 0;
    let mut observer = |v: &EpochView<'_>| {
        epochs += 1;
        worst_sum = worst_sum.max(row_sum_error(v.q)).max(row_sum_error(v.q_prime)).max(row_sum_error(v.p));
        if v.loss.clu < 0.0 || v.loss.con < 0.0 {
            negative += 1;
        }
    };
    let opts = TrainOptions {
        observer: Some(&mut observer),
        ..TrainOptions::default()
    };
    train_from(&g, &cfg, pre, opts).unwrap();

    let mut r = rng(77);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = r.random_range(2..=6);
        let blocks = r.random_range(1..=5);
        let q = equalized_q(&mut r, blocks, k);
        let p = target_distribution(&q);
        mismatches += q
            .rows()
            .into_iter()
            .zip(p.rows())
            .filter(|(qr, pr)| argmax(qr.view()) != argmax(pr.view()))
            .count();
    }
    outcome(
        epochs == 50 && worst_sum <= 1e-9 && negative == 0 && mismatches == 0,
        format!(
            "{epochs} epochs, max |row sum - 1| = {worst_sum:.1e}, negative KL epochs = {negative}, \
             argmax(P) != argmax(Q) on equalized Q: {mismatches}"
        ),
    )
}

// ---------------------------------------------------------------------------
// end-to-end

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        dataset: "sbm".into(),
        data: DataSource::Sbm(SbmConfig {
            blocks: vec![50, 50, 50],
            ..SbmConfig::default()
        }),
        epochs: 200,
        k: 3,
        ..ExperimentConfig::preset("cora").unwrap()
    };
    let g = cfg.load_graph().unwrap();
    let m = train(&g, &cfg).unwrap().metrics.unwrap();
    let (fast, time) = within(Duration::from_secs(300), start.elapsed());
    outcome(
        m.acc >= 0.95 && m.nmi >= 0.85 && m.ari >= 0.85 && fast,
        format!("ACC {:.4} NMI {:.4} ARI {:.4} (need 0.95/0.85/0.85), {time}", m.acc, m.nmi, m.ari),
    )
}

// ---------------------------------------------------------------------------
// metrics

fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    loop {
        let hits = pred.iter().zip(truth).filter(|&(&p, &t)| perm[p] == t).count();
        best = best.max(hits);
        // next lexicographic permutation
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..k).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best as f64 / pred.len() as f64
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(31);
    let mut acc_mismatch = 0;
    for _ in 0..1000 {
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=40);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        if (accuracy(&pred, &truth).unwrap() - brute_force_accuracy(&pred, &truth, k)).abs() > 1e-12 {
            acc_mismatch += 1;
        }
    }

    let mut abs_sum = 0.0;
    for _ in 0..1000 {
        let pred: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
        let truth: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
        abs_sum += ari(&pred, &truth).unwrap().abs();
    }
    let mean_abs_ari = abs_sum / 1000.0;

    let mut identical_ok = true;
    for _ in 0..100 {
        let k = r.random_range(1..=6);
        let mut labels: Vec<usize> = (0..40).map(|_| r.random_range(0..k)).collect();
        labels.shuffle(&mut r);
        let m = MetricRow::evaluate(&labels, &labels).unwrap();
        identical_ok &= [m.acc, m.nmi, m.ari, m.f1].iter().all(|&v| v == 1.0);
        identical_ok &= nmi(&labels, &labels).unwrap() == 1.0 && f1_macro(&labels, &labels).unwrap() == 1.0;
    }
    outcome(
        acc_mismatch == 0 && mean_abs_ari <= 0.05 && identical_ok,
        format!(
            "Hungarian vs brute force mismatches = {acc_mismatch}/1000, mean |ARI| = {mean_abs_ari:.4}, \
             identical partitions score 1: {identical_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// harness schemas

fn schema_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: "sbm".into(),
        data: DataSource::Sbm(SbmConfig {
            blocks: vec![6, 6],
            p_in: 0.6,
            p_out: 0.05,
            features: 5,
            ..SbmConfig::default()
        }),
        k: 2,
        n_z: 3,
        widths: [8, 8, 12],
        epochs: 3,
        lr: 1e-3,
        kmeans_restarts: 2,
        pretrain_epochs: 3,
        seed: 5,
        ..ExperimentConfig::default()
    };
    cfg.contrastive.hidden = 8;
    cfg.contrastive.epochs = 3;
    cfg
}

fn variants(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let rest = l.split_once(',').unwrap().1;
            match rest.strip_prefix('"') {
                Some(q) => q.split_once('"').unwrap().0.to_string(),
                None => rest.split(',').next().unwrap().to_string(),
            }
        })
        .collect()
}

fn harness_schemas() -> Outcome {
    let cfg = schema_cfg();
    let g = cfg.load_graph().unwrap();
    let run = || {
        (
            ablation_study(&g, &cfg).unwrap().to_csv(),
            encoding_study(&g, &cfg).unwrap().to_csv(),
            sweep_loss_weights(&g, &cfg, &LOSS_WEIGHT_VALUES, &LOSS_WEIGHT_VALUES).unwrap().to_csv(),
        )
    };
    let first = run();
    let second = run();
    let (ablate, enc, sweep) = &first;
    let ablate_ok = variants(ablate) == ["norm", "-GCN", "-Graphormer", "-ContrastiveLearning"];
    let enc_ok = variants(enc) == ENCODING_VARIANTS;
    let sweep_rows = sweep.lines().count() - 1;
    let pairs: BTreeSet<String> = variants(sweep).into_iter().collect();
    let repro = first == second;
    outcome(
        ablate_ok && enc_ok && sweep_rows == 49 && pairs.len() == 49 && repro,
        format!(
            "ablate layout {ablate_ok}, encoding layout {enc_ok}, loss sweep rows {sweep_rows}, \
             byte-identical rerun {repro}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("centrality-oracle", centrality_oracle),
        ("gradient-suite", gradient_suite),
        ("centroid-gradient", centroid_gradient_check),
        ("distribution-invariants", distribution_invariants),
        ("end-to-end-sbm", end_to_end),
        ("metrics-oracle", metrics_oracle),
        ("harness-schemas", harness_schemas),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if filter.is_none() {
        println!("SKIP cora-sanity: stretch run, needs the Cora dataset files and 1-3 h of CPU; not a gate");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
