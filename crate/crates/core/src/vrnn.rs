//! Variational recurrent network: a per-step VAE conditioned on a GRU state.
//!
//! For each step `t`:
//!
//! ```text
//! q_t = enc(φx(x_t), h_{t-1})        posterior over z_t
//! p_t = prior(h_{t-1})               prior over z_t
//! z_t = μ_q + σ_q ⊙ ε_t
//! r_t = dec(φz(z_t), h_{t-1})        likelihood of x_t
//! h_t = cell([φx(x_t), φz(z_t)], h_{t-1})
//! ```
//!
//! The sequence representation is `h_T`; the hypothesis head maps it to two
//! values used both as causal-feature embedding and as class logits.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Encoded, SequenceClassifier};
use crate::nn::{GruCell, Mlp, ParamSet};
use crate::tensor::{Array2, Tape, Var};

pub const X_DIM: usize = 4;
pub const Z_DIM: usize = 2;
pub const HIDDEN_DIM: usize = 16;
pub const FEATURE_DIM: usize = 16;
pub const LOGIT_DIM: usize = 2;
pub const LOG_STD_BOUND: f64 = 10.0;

/// Factorized Gaussian given by mean and log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Clamps `log_std` into `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Dimension {
                op: "DiagGaussian::new",
                lhs: (1, mean.len()),
                rhs: (1, log_std.len()),
            });
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(-LOG_STD_BOUND, LOG_STD_BOUND))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(x; mean, diag(exp(log_std))²)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, ls), xi)| {
                let u = (xi - m) / ls.exp();
                -0.5 * (2.0 * PI).ln() - ls - 0.5 * u * u
            })
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension {
            op: "kl_diag",
            lhs: (1, q.dim()),
            rhs: (1, p.dim()),
        });
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.log_std[i], p.mean[i], p.log_std[i]);
            let vq = (2.0 * lq).exp();
            let vp = (2.0 * lp).exp();
            lp - lq + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5
        })
        .sum())
}

/// `mean + exp(log_std) ⊙ noise`.
pub fn reparameterize(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Dimension {
            op: "reparameterize",
            lhs: (1, g.dim()),
            rhs: (1, noise.len()),
        });
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_std)
        .zip(noise)
        .map(|((m, ls), n)| m + ls.exp() * n)
        .collect())
}

/// One `batch×Z_DIM` standard-normal block per step.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, batch: usize, steps: usize) -> Vec<Array2> {
    (0..steps)
        .map(|_| {
            let data = (0..batch * Z_DIM).map(|_| StandardNormal.sample(rng)).collect();
            Array2::new(batch, Z_DIM, data).expect("finite normals")
        })
        .collect()
}

pub fn zero_noise(batch: usize, steps: usize) -> Vec<Array2> {
    (0..steps).map(|_| Array2::zeros(batch, Z_DIM)).collect()
}

/// Mean / log-std nodes of a batch of Gaussians.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

/// Tape nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct TapePass {
    pub inputs: Vec<Var>,
    pub posteriors: Vec<GaussianVars>,
    pub priors: Vec<GaussianVars>,
    pub reconstructions: Vec<GaussianVars>,
    pub z: Vec<Var>,
    /// `h_0..h_T`
    pub hidden: Vec<Var>,
}

impl TapePass {
    pub fn representation(&self) -> Var {
        self.hidden[self.hidden.len() - 1]
    }
}

/// Concrete values of a single-sequence pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VrnnPass {
    pub posteriors: Vec<DiagGaussian>,
    pub priors: Vec<DiagGaussian>,
    pub reconstructions: Vec<DiagGaussian>,
    pub z: Vec<Vec<f64>>,
    /// `h_0..h_T`
    pub hidden: Vec<Vec<f64>>,
}

impl VrnnPass {
    pub fn steps(&self) -> usize {
        self.z.len()
    }
}

/// `h_T` of a pass.
pub fn representation(pass: &VrnnPass) -> Vec<f64> {
    pass.hidden[pass.hidden.len() - 1].clone()
}

/// Single-sample ELBO: `Σ_t [ log N(x_t; r_t) − KL(q_t ‖ p_t) ]`.
pub fn elbo(pass: &VrnnPass, x: &Array2) -> Result<f64> {
    if x.rows() != pass.steps() {
        return Err(Error::Dimension {
            op: "elbo",
            lhs: x.shape(),
            rhs: (pass.steps(), X_DIM),
        });
    }
    let mut total = 0.0;
    for t in 0..pass.steps() {
        total += pass.reconstructions[t].log_density(x.row(t));
        total -= kl_diag(&pass.posteriors[t], &pass.priors[t])?;
    }
    Ok(total)
}

/// Layer layout of the VRNN.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VrnnArch {
    pub phi_x: Mlp,
    pub phi_z: Mlp,
    pub enc: Mlp,
    pub prior: Mlp,
    pub dec: Mlp,
    pub cell: GruCell,
    pub hyp: Mlp,
}

/// VRNN architecture plus its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct VrnnParams {
    pub arch: VrnnArch,
    pub params: ParamSet,
}

fn build_arch<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R, scale: f64) -> VrnnArch {
    let two_layer = [HIDDEN_DIM, HIDDEN_DIM];
    let dims = |input: usize, out: Option<usize>| {
        let mut d = vec![input];
        d.extend_from_slice(&two_layer);
        d.extend(out);
        d
    };
    VrnnArch {
        phi_x: Mlp::new(params, rng, "phi_x", &dims(X_DIM, None), true, scale),
        phi_z: Mlp::new(params, rng, "phi_z", &dims(Z_DIM, None), true, scale),
        enc: Mlp::new(params, rng, "enc", &dims(FEATURE_DIM + HIDDEN_DIM, Some(2 * Z_DIM)), false, scale),
        prior: Mlp::new(params, rng, "prior", &dims(HIDDEN_DIM, Some(2 * Z_DIM)), false, scale),
        dec: Mlp::new(params, rng, "dec", &dims(FEATURE_DIM + HIDDEN_DIM, Some(2 * X_DIM)), false, scale),
        cell: GruCell::new(params, rng, "cell", 2 * FEATURE_DIM, HIDDEN_DIM, scale),
        hyp: Mlp::new(params, rng, "hyp", &[HIDDEN_DIM, HIDDEN_DIM, LOGIT_DIM], false, scale),
    }
}

/// Checks that `loaded` has exactly the names and shapes of `template`.
pub(crate) fn check_layout(template: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if template.len() != loaded.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} arrays, model expects {}",
            loaded.len(),
            template.len()
        )));
    }
    for ((n1, a1), (n2, a2)) in template.iter().zip(loaded.iter()) {
        if n1 != n2 || a1.shape() != a2.shape() {
            return Err(Error::Data(format!(
                "checkpoint array {n2} {:?} does not match expected {n1} {:?}",
                a2.shape(),
                a1.shape()
            )));
        }
    }
    Ok(())
}

impl VrnnParams {
    /// Weights uniform in `±scale/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("init scale must be positive, got {scale}")));
        }
        Ok(Self::init_unchecked(rng, scale))
    }

    fn init_unchecked<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Self {
        let mut params = ParamSet::new();
        let arch = build_arch(&mut params, rng, scale);
        Self { arch, params }
    }

    /// Same layout with every weight zero.
    pub fn zeros() -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self::init_unchecked(&mut rng, 0.0)
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let template = Self::zeros();
        check_layout(&template.params, &params)?;
        Ok(Self {
            arch: template.arch,
            params,
        })
    }

    fn gaussian(&self, tape: &Tape, out: Var, dim: usize) -> Result<GaussianVars> {
        let mean = tape.slice_cols(out, 0, dim)?;
        let raw = tape.slice_cols(out, dim, 2 * dim)?;
        Ok(GaussianVars {
            mean,
            log_std: tape.clamp(raw, -LOG_STD_BOUND, LOG_STD_BOUND),
        })
    }

    /// Batched forward pass. `xs` holds `batch` sequences of equal length;
    /// `noise` holds one `batch×2` block per step.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        bound: &[Var],
        xs: &[&Array2],
        noise: &[Array2],
    ) -> Result<TapePass> {
        let batch = xs.len();
        let steps = xs.first().map_or(0, |x| x.rows());
        if batch == 0 || steps == 0 {
            return Err(Error::Usage("forward pass needs at least one step of one sequence".into()));
        }
        if let Some(bad) = xs.iter().find(|x| x.shape() != (steps, X_DIM)) {
            return Err(Error::Dimension {
                op: "forward_sequence",
                lhs: (steps, X_DIM),
                rhs: bad.shape(),
            });
        }
        if noise.len() != steps || noise.iter().any(|n| n.shape() != (batch, Z_DIM)) {
            return Err(Error::Usage(format!(
                "noise must be {steps} blocks of shape ({batch}, {Z_DIM})"
            )));
        }
        let a = &self.arch;
        let mut pass = TapePass {
            inputs: Vec::with_capacity(steps),
            posteriors: Vec::with_capacity(steps),
            priors: Vec::with_capacity(steps),
            reconstructions: Vec::with_capacity(steps),
            z: Vec::with_capacity(steps),
            hidden: Vec::with_capacity(steps + 1),
        };
        let mut h = tape.leaf(Array2::zeros(batch, HIDDEN_DIM));
        pass.hidden.push(h);
        for t in 0..steps {
            let mut rows = Vec::with_capacity(batch * X_DIM);
            for x in xs {
                rows.extend_from_slice(x.row(t));
            }
            let x_t = tape.leaf(Array2::new(batch, X_DIM, rows)?);
            let fx = a.phi_x.forward(tape, bound, x_t)?;
            let enc_in = tape.concat_cols(&[fx, h])?;
            let q = self.gaussian(tape, a.enc.forward(tape, bound, enc_in)?, Z_DIM)?;
            let p = self.gaussian(tape, a.prior.forward(tape, bound, h)?, Z_DIM)?;
            let eps = tape.leaf(noise[t].clone());
            let sigma = tape.exp(q.log_std)?;
            let z = tape.add(q.mean, tape.mul(sigma, eps)?)?;
            let fz = a.phi_z.forward(tape, bound, z)?;
            let dec_in = tape.concat_cols(&[fz, h])?;
            let r = self.gaussian(tape, a.dec.forward(tape, bound, dec_in)?, X_DIM)?;
            let cell_in = tape.concat_cols(&[fx, fz])?;
            h = a.cell.forward(tape, bound, cell_in, h)?;
            for v in [q.mean, p.mean, r.mean, h] {
                if !tape.value(v).is_finite() {
                    return Err(Error::Numeric(format!("non-finite activation at step {}", t + 1)));
                }
            }
            pass.inputs.push(x_t);
            pass.posteriors.push(q);
            pass.priors.push(p);
            pass.reconstructions.push(r);
            pass.z.push(z);
            pass.hidden.push(h);
        }
        Ok(pass)
    }

    /// Per-sequence ELBO, `batch×1`.
    pub fn elbo_tape(&self, tape: &Tape, pass: &TapePass) -> Result<Var> {
        let mut total: Option<Var> = None;
        for t in 0..pass.z.len() {
            let ll = gaussian_log_density(tape, pass.inputs[t], pass.reconstructions[t])?;
            let kl = kl_tape(tape, pass.posteriors[t], pass.priors[t])?;
            let step = tape.sub(ll, kl)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, step)?,
                None => step,
            });
        }
        total.ok_or_else(|| Error::Usage("empty pass".into()))
    }

    pub fn hypothesis_tape(&self, tape: &Tape, bound: &[Var], rep: Var) -> Result<Var> {
        self.arch.hyp.forward(tape, bound, rep)
    }

    /// Runs one sequence and returns concrete values.
    pub fn forward_sequence(&self, x: &Array2, noise: &[Array2]) -> Result<VrnnPass> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let tp = self.forward_tape(&tape, &bound, &[x], noise)?;
        let row = |v: Var| tape.value(v).into_data();
        let gauss = |g: &GaussianVars| DiagGaussian {
            mean: row(g.mean),
            log_std: row(g.log_std),
        };
        Ok(VrnnPass {
            posteriors: tp.posteriors.iter().map(gauss).collect(),
            priors: tp.priors.iter().map(gauss).collect(),
            reconstructions: tp.reconstructions.iter().map(gauss).collect(),
            z: tp.z.iter().map(|&v| row(v)).collect(),
            hidden: tp.hidden.iter().map(|&v| row(v)).collect(),
        })
    }

    /// Applies the hypothesis head to one representation vector.
    pub fn hypothesis(&self, rep: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let r = tape.leaf(Array2::row_vector(rep));
        Ok(tape.value(self.hypothesis_tape(&tape, &bound, r)?).into_data())
    }
}

/// `KL(q ‖ p)` per row, `batch×1`.
pub fn kl_tape(tape: &Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let var_q = tape.exp(tape.scale(q.log_std, 2.0))?;
    let var_p = tape.exp(tape.scale(p.log_std, 2.0))?;
    let diff = tape.square(tape.sub(q.mean, p.mean)?);
    let ratio = tape.div(tape.add(var_q, diff)?, tape.scale(var_p, 2.0))?;
    let log_term = tape.sub(p.log_std, q.log_std)?;
    let per_dim = tape.offset(tape.add(log_term, ratio)?, -0.5);
    Ok(tape.sum_rows(per_dim))
}

/// `log N(x; mean, diag σ²)` per row, `batch×1`.
pub fn gaussian_log_density(tape: &Tape, x: Var, g: GaussianVars) -> Result<Var> {
    let sigma = tape.exp(g.log_std)?;
    let u = tape.div(tape.sub(x, g.mean)?, sigma)?;
    let quad = tape.scale(tape.square(u), -0.5);
    let per_dim = tape.offset(tape.sub(quad, g.log_std)?, -0.5 * (2.0 * PI).ln());
    Ok(tape.sum_rows(per_dim))
}

impl SequenceClassifier for VrnnParams {
    fn kind(&self) -> &'static str {
        "vrnn"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn uses_noise(&self) -> bool {
        true
    }

    fn encode(
        &self,
        tape: &Tape,
        bound: &[Var],
        xs: &[&Array2],
        noise: Option<&[Array2]>,
    ) -> Result<Encoded> {
        let steps = xs.first().map_or(0, |x| x.rows());
        let zeros;
        let noise = match noise {
            Some(n) => n,
            None => {
                zeros = zero_noise(xs.len(), steps);
                &zeros
            }
        };
        let pass = self.forward_tape(tape, bound, xs, noise)?;
        let rep = pass.representation();
        let logits = self.hypothesis_tape(tape, bound, rep)?;
        let elbo = self.elbo_tape(tape, &pass)?;
        Ok(Encoded {
            rep,
            logits,
            neg_elbo: Some(tape.neg(elbo)),
        })
    }
}
