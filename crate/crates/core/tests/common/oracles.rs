//! Brute-force loss references written with plain loops over `Vec<f64>`.

use rand::Rng;

pub fn d(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

pub fn l_star(p: &[Vec<f64>], z: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for pi in p {
        let mut best = f64::INFINITY;
        for zj in z {
            best = best.min(d(pi, zj));
        }
        total += best;
    }
    total / p.len() as f64
}

pub fn local_ref(p1: &[Vec<f64>], z2: &[Vec<f64>], p2: &[Vec<f64>], z1: &[Vec<f64>]) -> f64 {
    0.5 * (l_star(p1, z2) + l_star(p2, z1))
}

pub fn sim_rows(z: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let o = z.len();
    (0..o)
        .map(|i| {
            let logits: Vec<f64> = (0..o).map(|j| if i == j { f64::NEG_INFINITY } else { -d(&z[i], &z[j]) / tau }).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn selfsim_ref(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let (s1, s2) = (sim_rows(z1, tau), sim_rows(z2, tau));
    let o = z1.len();
    let mut total = 0.0;
    for i in 0..o {
        for j in 0..o {
            if i != j {
                total -= s1[i][j] * s2[i][j].ln();
            }
        }
    }
    total / o as f64
}

pub fn link_ref(r1: &[Vec<f64>], r2: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in r1.iter().zip(r2) {
        for (x, y) in a.iter().zip(b) {
            total -= x * (y + 1e-12).ln();
        }
    }
    total / r1.len() as f64
}

pub fn ce_ref(logits: &[f64], answer: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[answer]
}

pub fn rows<R: Rng>(r: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn dist<R: Rng>(r: &mut R, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect()
}
