//! Brute-force scalar oracles for the distillation math and top-k, run over
//! random instances. Shared with the acceptance suite.

use mmdl_core::distill::{self, DistillConfig, ProbabilityVector};
use mmdl_core::metrics::topk_accuracy;
use mmdl_core::rng;
use mmdl_core::{Graph, Tensor};
use rand::Rng;

pub const INSTANCES: usize = 1000;
pub const TOLERANCE: f64 = 1e-9;

pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs_error: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= TOLERANCE
    }
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += -p[i] * q[i].max(1e-12).ln() + p[i] * p[i].max(1e-12).ln();
    }
    acc
}

fn random_logits(r: &mut impl Rng, c: usize, spread: f64) -> Vec<f64> {
    (0..c).map(|_| r.gen_range(-spread..spread)).collect()
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax(n: usize) -> OracleResult {
    let mut r = rng::stream(11, &[]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(2..=16);
        let z = random_logits(&mut r, c, 8.0);
        let want = oracle_softmax(&z);
        worst = worst.max(max_err(ProbabilityVector::from_logits(&z).unwrap().as_slice(), &want));
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(&[1, c], z.clone()).unwrap());
        let y = g.softmax(x).unwrap();
        worst = worst.max(max_err(g.value(y).data(), &want));
    }
    OracleResult { name: "softmax", instances: n, max_abs_error: worst }
}

pub fn temperature_scale(n: usize) -> OracleResult {
    let mut r = rng::stream(12, &[]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(2..=16);
        let p = oracle_softmax(&random_logits(&mut r, c, 6.0));
        let tau = r.gen_range(0.25..25.0);
        let powered: Vec<f64> = p.iter().map(|v| v.powf(1.0 / tau)).collect();
        let s: f64 = powered.iter().sum();
        let want: Vec<f64> = powered.iter().map(|v| v / s).collect();
        let got = distill::temperature_scale(&ProbabilityVector::new(p).unwrap(), tau).unwrap();
        worst = worst.max(max_err(got.as_slice(), &want));
    }
    OracleResult { name: "temperature_scale", instances: n, max_abs_error: worst }
}

/// `kd_loss` on probability vectors, and the taped batch loss on logits.
pub fn kd_loss(n: usize) -> OracleResult {
    let mut r = rng::stream(13, &[]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(2..=16);
        let tau = r.gen_range(0.5..12.0);
        let cfg = DistillConfig { tau, ..DistillConfig::default() };
        let zt = random_logits(&mut r, c, 6.0);
        let zs = random_logits(&mut r, c, 6.0);
        let scaled = |z: &[f64]| oracle_softmax(&z.iter().map(|v| v / tau).collect::<Vec<_>>());
        let (pt, ps) = (scaled(&zt), scaled(&zs));
        let want = tau * tau * oracle_kl(&pt, &ps);

        let got = distill::kd_loss(
            &ProbabilityVector::new(pt.clone()).unwrap(),
            &ProbabilityVector::new(ps).unwrap(),
            &cfg,
        )
        .unwrap();
        worst = worst.max((got - want).abs());

        let mut g = Graph::inference();
        let s = g.constant(Tensor::new(&[1, c], zs).unwrap());
        let loss = distill::kd_loss_graph(&mut g, s, &Tensor::new(&[1, c], pt).unwrap(), &[0], &cfg).unwrap();
        worst = worst.max((g.value(loss).item() - want).abs());
    }
    OracleResult { name: "kd_loss", instances: n, max_abs_error: worst }
}

pub fn ensemble_logits(n: usize) -> OracleResult {
    let mut r = rng::stream(14, &[]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(1..=16);
        let m = r.gen_range(1..=4);
        let members: Vec<Vec<f64>> = (0..m).map(|_| random_logits(&mut r, c, 10.0)).collect();
        let want: Vec<f64> = (0..c).map(|i| members.iter().map(|z| z[i]).sum::<f64>() / m as f64).collect();
        let refs: Vec<&[f64]> = members.iter().map(|v| v.as_slice()).collect();
        worst = worst.max(max_err(&distill::ensemble_logits(&refs).unwrap(), &want));
    }
    OracleResult { name: "ensemble_logits", instances: n, max_abs_error: worst }
}

/// Exact agreement with a sort-based ranking: the error is the largest
/// accuracy difference in percentage points.
pub fn topk(n: usize) -> OracleResult {
    let mut r = rng::stream(15, &[]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(2..=12);
        let rows = r.gen_range(1..=8);
        let k = r.gen_range(1..=c);
        // Small integer scores so ties are common.
        let z: Vec<f64> = (0..rows * c).map(|_| r.gen_range(0..4) as f64).collect();
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..c)).collect();
        let mut hits = 0;
        for (row, &l) in z.chunks(c).zip(&labels) {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if order[..k].contains(&l) {
                hits += 1;
            }
        }
        let want = 100.0 * hits as f64 / rows as f64;
        let got = topk_accuracy(&Tensor::new(&[rows, c], z).unwrap(), &labels, k).unwrap();
        worst = worst.max((got - want).abs());
    }
    OracleResult { name: "topk_accuracy", instances: n, max_abs_error: worst }
}

pub fn all(n: usize) -> Vec<OracleResult> {
    vec![softmax(n), temperature_scale(n), kd_loss(n), ensemble_logits(n), topk(n)]
}
