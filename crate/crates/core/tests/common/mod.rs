#![allow(dead_code)]

use ctsdg::data::{DomainDataset, Label, SequenceSample};
use ctsdg::nn::ParamSet;
use ctsdg::objective::MatchAssignment;
use ctsdg::tensor::{Array2, Tape, Var};
use ctsdg::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_x<R: Rng>(rng: &mut R, steps: usize) -> Array2 {
    let data = (0..steps * 4)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            2.0 * v
        })
        .collect();
    Array2::new(steps, 4, data).unwrap()
}

/// `n` random samples cycling through `domains` and both labels.
pub fn random_samples<R: Rng>(rng: &mut R, n: usize, domains: &[&str]) -> Vec<SequenceSample> {
    (0..n)
        .map(|i| SequenceSample {
            sample_id: format!("s{i:04}"),
            domain_id: domains[i % domains.len()].to_string(),
            y: if (i / domains.len()).is_multiple_of(2) { Label::Pass } else { Label::Yield },
            x: random_x(rng, 10),
        })
        .collect()
}

/// Pairs each sample with the next same-class sample from a different domain, cyclically.
pub fn cyclic_match(samples: &[SequenceSample]) -> MatchAssignment {
    let mut om = MatchAssignment::default();
    for (j, s) in samples.iter().enumerate() {
        let n = samples.len();
        for k in 1..n {
            let m = &samples[(j + k) % n];
            if m.y == s.y && m.domain_id != s.domain_id {
                om.partners.insert(s.sample_id.clone(), m.sample_id.clone());
                break;
            }
        }
    }
    om
}

pub fn domain(id: &str, samples: Vec<SequenceSample>) -> DomainDataset {
    DomainDataset::new(id, samples)
}

#[derive(Debug, Clone, Copy)]
pub struct GradStats {
    pub coords: usize,
    /// Fraction of coordinates within the strict tolerance.
    pub frac_within: f64,
    pub worst: f64,
}

/// Relative error with a floor on the denominator so that near-zero gradients
/// are compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares tape gradients of `loss` with central finite differences over
/// every scalar of `params`.
///
/// Each coordinate uses Richardson-extrapolated central differences, halving
/// the step until two successive estimates agree. A ReLU kink inside the
/// interval shows up as disagreement and forces a smaller step.
pub fn gradcheck<F>(params: &ParamSet, loss: F, tol: f64) -> GradStats
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let root = loss(&tape, &bound).unwrap();
    let scale = tape.scalar(root).abs().max(1.0);
    let g = tape.backward(root).unwrap();
    let analytic: Vec<Array2> = bound.iter().map(|&v| g.get(v)).collect();

    let eval = |p: &ParamSet| -> f64 {
        let t = Tape::new();
        let b = p.bind(&t);
        let r = loss(&t, &b).unwrap();
        t.scalar(r)
    };
    let mut work = params.clone();
    let mut coords = 0usize;
    let mut within = 0usize;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for k in 0..params.get(i).data().len() {
            let orig = params.get(i).data()[k];
            let mut central = |h: f64| {
                work.values_mut()[i].data_mut()[k] = orig + h;
                let up = eval(&work);
                work.values_mut()[i].data_mut()[k] = orig - h;
                let down = eval(&work);
                work.values_mut()[i].data_mut()[k] = orig;
                (up - down) / (2.0 * h)
            };
            let mut h = 4e-3;
            let mut c1 = central(h / 2.0);
            let mut r1 = (4.0 * c1 - central(h)) / 3.0;
            let mut numeric = r1;
            for _ in 0..14 {
                h /= 2.0;
                let c2 = central(h / 2.0);
                let r2 = (4.0 * c2 - c1) / 3.0;
                numeric = r2;
                let noise = 8.0 * f64::EPSILON * scale / h;
                if (r2 - r1).abs() <= 1e-6 * r2.abs() + noise {
                    break;
                }
                c1 = c2;
                r1 = r2;
            }
            let e = rel_err(analytic[i].data()[k], numeric);
            coords += 1;
            if e <= tol {
                within += 1;
            }
            worst = worst.max(e);
        }
    }
    GradStats {
        coords,
        frac_within: within as f64 / coords as f64,
        worst,
    }
}
