//! Synthetic two-vehicle interactions drawn from a structural causal model.
//!
//! Generating order: a domain `D` (road geometry, speed limit, traffic rule)
//! and two drivers `O` (optionally correlated with `D`), then an event `E`
//! (initial gaps and speeds, negotiation onset). Causal features `x_c` depend
//! on `(E, O)` only and fully determine the label; non-causal features `x_nc`
//! depend on `(D, E)` and only shape the trajectories.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Label, SequenceSample, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::frenet::{build_sequence, Point, Polyline};
use crate::tensor::Array2;

/// Simulation step (10 Hz).
pub const DT: f64 = 0.1;
/// Deceleration cap, m/s².
pub const MAX_DECEL: f64 = 4.0;
const MAX_ACCEL: f64 = 2.5;
const COMFORT_DECEL: f64 = 3.0;
const STOP_MARGIN: f64 = 3.0;
const CLEARANCE: f64 = 2.0;
const MPH: f64 = 0.44704;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficRule {
    YieldSign,
    StopSign,
    Zipper,
}

impl TrafficRule {
    /// Braking intensity multiplier for a yielding driver with `compliance ∈ [0,1]`.
    fn brake_gain(self, compliance: f64) -> f64 {
        match self {
            TrafficRule::StopSign => 0.8 + 0.5 * compliance,
            TrafficRule::YieldSign => 0.6 + 0.4 * compliance,
            TrafficRule::Zipper => 0.5 + 0.3 * compliance,
        }
    }
}

/// Road topology, speed limit and traffic rule of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Angle between the two reference paths, degrees.
    pub intersect_angle: f64,
    /// Length of each approach leg, meters.
    pub approach_length: f64,
    /// m/s
    pub speed_limit: f64,
    pub rule: TrafficRule,
    /// Shift applied to the yielder's braking onset, seconds.
    #[serde(default)]
    pub onset_offset: f64,
    /// Shift of the mean driver aggressiveness in this domain.
    #[serde(default)]
    pub aggr_offset: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.intersect_angle > 0.0 && self.intersect_angle < 180.0) {
            return Err(Error::Config(format!(
                "{}: intersect angle {} outside (0, 180)",
                self.domain_id, self.intersect_angle
            )));
        }
        if !(self.approach_length > 0.0) || !(self.speed_limit > 0.0) {
            return Err(Error::Config(format!(
                "{}: approach length and speed limit must be positive",
                self.domain_id
            )));
        }
        if !self.onset_offset.is_finite() || !(self.aggr_offset.abs() < 0.5) {
            return Err(Error::Config(format!(
                "{}: onset offset must be finite and |aggr offset| < 0.5",
                self.domain_id
            )));
        }
        Ok(())
    }

    /// Built-in domain by name: `FT-1`, `FT-2`, `FT-3` or `ZS`.
    pub fn named(name: &str) -> Option<Self> {
        let spec = |id: &str, angle, length, mph, rule, onset| DomainSpec {
            domain_id: id.to_string(),
            intersect_angle: angle,
            approach_length: length,
            speed_limit: mph * MPH,
            rule,
            onset_offset: onset,
            aggr_offset: 0.0,
        };
        match name {
            "FT-1" => Some(spec("FT-1", 45.0, 70.0, 25.0, TrafficRule::YieldSign, 0.0)),
            "FT-2" => Some(spec("FT-2", 90.0, 70.0, 25.0, TrafficRule::StopSign, -0.4)),
            "FT-3" => Some(spec("FT-3", 120.0, 45.0, 25.0, TrafficRule::StopSign, -0.4)),
            "ZS" => Some(spec("ZS", 10.0, 150.0, 50.0, TrafficRule::Zipper, 0.8)),
            _ => None,
        }
    }

    pub fn library() -> Vec<Self> {
        ["FT-1", "FT-2", "FT-3", "ZS"]
            .iter()
            .map(|n| Self::named(n).expect("built-in domain"))
            .collect()
    }
}

/// Node `O`: one driver's style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverLatent {
    pub aggressiveness: f64,
    pub compliance: f64,
}

/// Node `E`: initial interaction state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLatent {
    /// Distance of A to the conflict point, meters.
    pub init_gap_a: f64,
    pub init_gap_b: f64,
    pub init_speed_a: f64,
    pub init_speed_b: f64,
    /// Maximum simulated steps.
    pub horizon: usize,
    /// Seconds after start at which the yielder begins to negotiate, before the domain shift.
    pub onset_base: f64,
    /// Steps between the end of the observed window and the first crossing.
    pub lead_steps: usize,
}

/// Ground-truth causal and non-causal features of one interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalRecord {
    pub x_c: Vec<f64>,
    pub x_nc: Vec<f64>,
}

/// One line of the causal sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarLine {
    pub sample_id: String,
    pub x_c: Vec<f64>,
    pub x_nc: Vec<f64>,
}

impl SidecarLine {
    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("bad sidecar line: {e}")))
    }
}

impl CausalRecord {
    pub fn sidecar_line(&self, sample_id: &str) -> String {
        serde_json::to_string(&SidecarLine {
            sample_id: sample_id.to_string(),
            x_c: self.x_c.clone(),
            x_nc: self.x_nc.clone(),
        })
        .expect("record serializes")
    }
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    /// Weights of the three causal features in the intention score.
    pub label_weights: [f64; 3],
    /// Beta concentration `a+b` for aggressiveness; infinite gives a point mass.
    pub aggr_concentration: f64,
    pub aggr_mean: f64,
    /// Std of per-step acceleration noise, m/s².
    pub accel_noise: f64,
    /// Std of Cartesian position noise, meters.
    pub obs_noise: f64,
    pub window: usize,
    /// Attempts at redrawing noise before a sample is abandoned.
    pub max_noise_retries: usize,
    pub max_label_attempts: usize,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            label_weights: [1.0, 1.0, 0.5],
            aggr_concentration: 4.0,
            aggr_mean: 0.5,
            accel_noise: 0.2,
            obs_noise: 0.05,
            window: DEFAULT_WINDOW,
            max_noise_retries: 100,
            max_label_attempts: 100_000,
        }
    }
}

/// Draws one domain uniformly from `library`, optionally jittering its angle by up to ±5°.
pub fn sample_domain<R: Rng + ?Sized>(library: &[DomainSpec], jitter: bool, rng: &mut R) -> Result<DomainSpec> {
    let mut spec = library
        .choose(rng)
        .ok_or_else(|| Error::Config("empty domain library".into()))?
        .clone();
    if jitter {
        spec.intersect_angle = (spec.intersect_angle + rng.gen_range(-5.0..=5.0)).clamp(0.5, 179.5);
    }
    Ok(spec)
}

fn sample_unit_beta<R: Rng + ?Sized>(mean: f64, concentration: f64, rng: &mut R) -> f64 {
    let mean = mean.clamp(1e-3, 1.0 - 1e-3);
    if concentration.is_infinite() {
        return mean;
    }
    Beta::new(mean * concentration, (1.0 - mean) * concentration)
        .expect("positive beta parameters")
        .sample(rng)
}

/// Draws two independent drivers given the domain.
pub fn sample_drivers<R: Rng + ?Sized>(
    domain: &DomainSpec,
    cfg: &ScmConfig,
    rng: &mut R,
) -> (DriverLatent, DriverLatent) {
    let mut one = || DriverLatent {
        aggressiveness: sample_unit_beta(cfg.aggr_mean + domain.aggr_offset, cfg.aggr_concentration, rng),
        compliance: sample_unit_beta(0.5, 4.0, rng),
    };
    let a = one();
    let b = one();
    (a, b)
}

/// Draws the interaction event; gaps scale with the approach length and speeds with the limit.
pub fn sample_event<R: Rng + ?Sized>(domain: &DomainSpec, rng: &mut R) -> EventLatent {
    let l = domain.approach_length;
    let v = domain.speed_limit;
    EventLatent {
        init_gap_a: rng.gen_range(0.4 * l..=0.95 * l),
        init_gap_b: rng.gen_range(0.4 * l..=0.95 * l),
        init_speed_a: rng.gen_range(0.6 * v..=1.0 * v),
        init_speed_b: rng.gen_range(0.6 * v..=1.0 * v),
        horizon: 400,
        onset_base: rng.gen_range(0.3..=1.2),
        lead_steps: rng.gen_range(3..=8),
    }
}

/// Ground-truth causal features: aggressiveness difference, normalized gap
/// advantage of A, normalized speed advantage of A.
pub fn causal_features(e: &EventLatent, o_a: &DriverLatent, o_b: &DriverLatent) -> Vec<f64> {
    let max_gap = e.init_gap_a.max(e.init_gap_b);
    let max_speed = e.init_speed_a.max(e.init_speed_b).max(0.1);
    vec![
        o_a.aggressiveness - o_b.aggressiveness,
        (e.init_gap_b - e.init_gap_a) / max_gap,
        (e.init_speed_a - e.init_speed_b) / max_speed,
    ]
}

/// Domain-styled features: angle, path-length scale, negotiation onset time.
pub fn non_causal_features(d: &DomainSpec, e: &EventLatent) -> Vec<f64> {
    vec![
        d.intersect_angle,
        d.approach_length / 100.0,
        onset_time(d, e),
    ]
}

fn onset_time(d: &DomainSpec, e: &EventLatent) -> f64 {
    (e.onset_base + d.onset_offset).max(0.0)
}

/// Intention score from causal features; positive means A passes.
pub fn intention_score(x_c: &[f64], weights: &[f64; 3]) -> f64 {
    x_c.iter().zip(weights).map(|(x, w)| x * w).sum()
}

pub fn label_from_causal(x_c: &[f64], weights: &[f64; 3]) -> Label {
    if intention_score(x_c, weights) > 0.0 {
        Label::Pass
    } else {
        Label::Yield
    }
}

/// A passes iff the weighted causal score is strictly positive; a zero score yields.
pub fn label_intention(e: &EventLatent, o_a: &DriverLatent, o_b: &DriverLatent, weights: &[f64; 3]) -> Label {
    label_from_causal(&causal_features(e, o_a, o_b), weights)
}

/// The two straight reference paths of a domain, crossing at the origin.
pub fn reference_paths(d: &DomainSpec) -> Result<(Polyline, Polyline)> {
    let l = d.approach_length;
    let theta = d.intersect_angle * PI / 180.0;
    let (ux, uy) = (theta.cos(), theta.sin());
    let a = Polyline::new(vec![(-2.0 * l, 0.0), (l, 0.0)])?;
    let b = Polyline::new(vec![(-2.0 * l * ux, -2.0 * l * uy), (l * ux, l * uy)])?;
    Ok((a, b))
}

/// Lateral style offsets `(d_A, d_B)` in meters; purely geometric.
fn lateral_offsets(d: &DomainSpec) -> (f64, f64) {
    let c = (d.intersect_angle * PI / 180.0).cos();
    (0.25 * c, -0.6 * c)
}

/// Output of one simulated interaction.
#[derive(Clone, Debug)]
pub struct Interaction {
    /// Model-facing window ending `lead_steps` before the first crossing.
    pub sample: SequenceSample,
    pub record: CausalRecord,
    /// Whole observed trajectory in Frenét coordinates, `n×4`.
    pub trajectory: Array2,
    /// Index of the first row at which a vehicle has `s ≥ 0`.
    pub first_cross_step: usize,
}

/// Which vehicle first reaches `s ≥ 0`; `None` when neither does or both do on the same row.
pub fn first_crossing(traj: &Array2) -> Option<(Label, usize)> {
    let first = |col: usize| (0..traj.rows()).find(|&r| traj.get(r, col) >= 0.0);
    match (first(0), first(2)) {
        (Some(a), Some(b)) if a < b => Some((Label::Pass, a)),
        (Some(a), Some(b)) if b < a => Some((Label::Yield, b)),
        (Some(a), None) => Some((Label::Pass, a)),
        (None, Some(b)) => Some((Label::Yield, b)),
        _ => None,
    }
}

#[derive(Clone, Copy)]
struct Vehicle {
    s: f64,
    v: f64,
    target: f64,
}

/// Longitudinal positions of both vehicles over time (noise-free in `s` apart from acceleration jitter).
fn integrate<R: Rng + ?Sized>(
    d: &DomainSpec,
    e: &EventLatent,
    o_a: &DriverLatent,
    o_b: &DriverLatent,
    label: Label,
    accel_noise: f64,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let target = |o: &DriverLatent| d.speed_limit.min(d.speed_limit * (0.85 + 0.3 * o.aggressiveness));
    let mut a = Vehicle {
        s: -e.init_gap_a,
        v: e.init_speed_a,
        target: target(o_a),
    };
    let mut b = Vehicle {
        s: -e.init_gap_b,
        v: e.init_speed_b,
        target: target(o_b),
    };
    let (yielder_driver, a_yields) = match label {
        Label::Pass => (o_b, false),
        Label::Yield => (o_a, true),
    };
    let onset = onset_time(d, e);
    let brake_gain = d.rule.brake_gain(yielder_driver.compliance);
    let noise = Normal::new(0.0, accel_noise.max(0.0)).expect("finite noise std");

    let mut out = Vec::with_capacity(e.horizon);
    out.push((a.s, b.s));
    for step in 1..e.horizon {
        let t = step as f64 * DT;
        let (passer, yielder) = if a_yields { (&b, &a) } else { (&a, &b) };
        let passer_cleared = passer.s >= CLEARANCE;
        let cruise = |veh: &Vehicle| ((veh.target - veh.v) * 1.0).clamp(-MAX_DECEL, MAX_ACCEL);
        let passer_acc = cruise(passer);
        let yielder_acc = if t >= onset && !passer_cleared && yielder.s < 0.0 {
            let to_stop = -yielder.s - STOP_MARGIN;
            let needed = if to_stop > 0.5 {
                yielder.v * yielder.v / (2.0 * to_stop)
            } else {
                MAX_DECEL
            };
            let style = COMFORT_DECEL * (1.0 - yielder_driver.aggressiveness) * brake_gain;
            -(style.max(needed)).min(MAX_DECEL)
        } else {
            cruise(yielder)
        };
        let (acc_a, acc_b) = if a_yields {
            (yielder_acc, passer_acc)
        } else {
            (passer_acc, yielder_acc)
        };
        for (veh, acc) in [(&mut a, acc_a), (&mut b, acc_b)] {
            let jitter = if accel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let acc = (acc + jitter).clamp(-MAX_DECEL, MAX_ACCEL);
            let v_next = (veh.v + acc * DT).max(0.0);
            veh.s += 0.5 * (veh.v + v_next) * DT;
            veh.v = v_next;
        }
        out.push((a.s, b.s));
        if a.s > 5.0 && b.s > 5.0 {
            break;
        }
    }
    out
}

/// Simulates one interaction and converts it to a labeled Frenét window.
///
/// The emitted label always matches which vehicle crosses the conflict
/// point first in the emitted (noisy) trajectory; noise is redrawn up to
/// `cfg.max_noise_retries` times before giving up.
#[allow(clippy::too_many_arguments)]
pub fn simulate_interaction<R: Rng + ?Sized>(
    d: &DomainSpec,
    e: &EventLatent,
    o_a: &DriverLatent,
    o_b: &DriverLatent,
    cfg: &ScmConfig,
    sample_id: &str,
    rng: &mut R,
) -> Result<Interaction> {
    d.validate()?;
    if e.horizon < cfg.window {
        return Err(Error::Config(format!(
            "event horizon {} shorter than window {}",
            e.horizon, cfg.window
        )));
    }
    let x_c = causal_features(e, o_a, o_b);
    let x_nc = non_causal_features(d, e);
    let label = label_from_causal(&x_c, &cfg.label_weights);
    let (path_a, path_b) = reference_paths(d)?;
    let origin = 2.0 * d.approach_length;
    let (lat_a, lat_b) = lateral_offsets(d);
    let obs = Normal::new(0.0, cfg.obs_noise.max(0.0)).expect("finite noise std");

    let place = |path: &Polyline, s: f64, lat: f64, rng: &mut R| -> Point {
        let (px, py) = path.point_at(origin + s);
        let (_, (nx, ny)) = path.frame_at(origin + s);
        let (ex, ey) = if cfg.obs_noise > 0.0 {
            (obs.sample(rng), obs.sample(rng))
        } else {
            (0.0, 0.0)
        };
        (px + lat * nx + ex, py + lat * ny + ey)
    };

    let mut last_issue = String::new();
    for _ in 0..cfg.max_noise_retries.max(1) {
        let positions = integrate(d, e, o_a, o_b, label, cfg.accel_noise, rng);
        let mut track_a = Vec::with_capacity(positions.len());
        let mut track_b = Vec::with_capacity(positions.len());
        for &(sa, sb) in &positions {
            track_a.push(place(&path_a, sa, lat_a, rng));
            track_b.push(place(&path_b, sb, lat_b, rng));
        }
        let trajectory = build_sequence(&track_a, &track_b, &path_a, &path_b, track_a.len())?;
        let Some((crossed, step)) = first_crossing(&trajectory) else {
            last_issue = "no unambiguous first crossing".into();
            continue;
        };
        if crossed != label {
            last_issue = format!("first crossing gives {crossed:?}, causal label is {label:?}");
            continue;
        }
        let Some(end) = step.checked_sub(e.lead_steps) else {
            last_issue = "crossing too early for the lead".into();
            continue;
        };
        if end + 1 < cfg.window {
            last_issue = format!("only {} steps observed before the lead window", end + 1);
            continue;
        }
        let start = end + 1 - cfg.window;
        let window = build_sequence(
            &track_a[start..=end],
            &track_b[start..=end],
            &path_a,
            &path_b,
            cfg.window,
        )?;
        return Ok(Interaction {
            sample: SequenceSample {
                sample_id: sample_id.to_string(),
                domain_id: d.domain_id.clone(),
                y: label,
                x: window,
            },
            record: CausalRecord { x_c, x_nc },
            trajectory,
            first_cross_step: step,
        });
    }
    Err(Error::Generation(format!(
        "{sample_id}: gave up after {} noise draws ({last_issue})",
        cfg.max_noise_retries
    )))
}

/// Samples with their ground-truth causal records, for tests and the sidecar file.
#[derive(Clone, Debug)]
pub struct GeneratedDomain {
    pub dataset: DomainDataset,
    pub records: Vec<CausalRecord>,
    /// Samples abandoned after exhausting noise redraws.
    pub skipped: usize,
}

impl GeneratedDomain {
    pub fn sidecar_jsonl(&self) -> String {
        let mut out = String::new();
        for (s, r) in self.dataset.samples.iter().zip(&self.records) {
            out.push_str(&r.sidecar_line(&s.sample_id));
            out.push('\n');
        }
        out
    }
}

/// Generates exactly `n_per_class` samples of each label for one domain.
pub fn gen_domain_dataset<R: Rng + ?Sized>(
    d: &DomainSpec,
    n_per_class: usize,
    cfg: &ScmConfig,
    rng: &mut R,
) -> Result<GeneratedDomain> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    d.validate()?;
    let mut counts = [0usize; 2];
    let mut samples = Vec::with_capacity(2 * n_per_class);
    let mut records = Vec::with_capacity(2 * n_per_class);
    let mut attempts = 0usize;
    let mut skipped = 0usize;
    while counts[0] < n_per_class || counts[1] < n_per_class {
        attempts += 1;
        if attempts > cfg.max_label_attempts {
            return Err(Error::Config(format!(
                "{}: could not fill classes {counts:?} of {n_per_class} within {} attempts; check the label weights",
                d.domain_id, cfg.max_label_attempts
            )));
        }
        let (o_a, o_b) = sample_drivers(d, cfg, rng);
        let e = sample_event(d, rng);
        let label = label_intention(&e, &o_a, &o_b, &cfg.label_weights);
        if counts[label.index()] >= n_per_class {
            continue;
        }
        let id = format!("{}-{:06}", d.domain_id, samples.len());
        match simulate_interaction(d, &e, &o_a, &o_b, cfg, &id, rng) {
            Ok(it) => {
                counts[label.index()] += 1;
                samples.push(it.sample);
                records.push(it.record);
            }
            Err(Error::Generation(msg)) => {
                log::debug!("skipping sample: {msg}");
                skipped += 1;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(GeneratedDomain {
        dataset: DomainDataset::new(d.domain_id.clone(), samples),
        records,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn driver(aggr: f64) -> DriverLatent {
        DriverLatent {
            aggressiveness: aggr,
            compliance: 0.5,
        }
    }

    fn symmetric_event() -> EventLatent {
        EventLatent {
            init_gap_a: 40.0,
            init_gap_b: 40.0,
            init_speed_a: 9.0,
            init_speed_b: 9.0,
            horizon: 400,
            onset_base: 0.5,
            lead_steps: 4,
        }
    }

    #[test]
    fn ft2_speed_limit_is_25_mph() {
        let lib = vec![DomainSpec::named("FT-2").unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sample_domain(&lib, false, &mut rng).unwrap();
        assert_eq!(d, lib[0]);
        assert!((d.intersect_angle - 90.0).abs() < 1e-12);
        assert!((d.speed_limit - 11.18).abs() < 0.01);
        assert_eq!(d.rule, TrafficRule::StopSign);
    }

    #[test]
    fn jitter_stays_within_five_degrees() {
        let lib = DomainSpec::library();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d = sample_domain(&lib, true, &mut rng).unwrap();
            let base = DomainSpec::named(&d.domain_id).unwrap();
            assert!((d.intersect_angle - base.intersect_angle).abs() <= 5.0);
        }
        assert!(sample_domain(&[], false, &mut rng).is_err());
    }

    #[test]
    fn tie_score_yields_and_dominant_aggression_passes() {
        let e = symmetric_event();
        let w = [1.0, 1.0, 0.5];
        assert_eq!(label_intention(&e, &driver(0.4), &driver(0.4), &w), Label::Yield);
        assert_eq!(label_intention(&e, &driver(1.0), &driver(0.0), &w), Label::Pass);
    }

    #[test]
    fn degenerate_beta_is_constant() {
        let cfg = ScmConfig {
            aggr_concentration: f64::INFINITY,
            aggr_mean: 0.3,
            ..ScmConfig::default()
        };
        let d = DomainSpec::named("FT-1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b) = sample_drivers(&d, &cfg, &mut rng);
            assert_eq!(a.aggressiveness, 0.3);
            assert_eq!(b.aggressiveness, 0.3);
        }
    }

    #[test]
    fn aggressive_a_crosses_first_without_noise() {
        let cfg = ScmConfig {
            accel_noise: 0.0,
            obs_noise: 0.0,
            ..ScmConfig::default()
        };
        let d = DomainSpec::named("FT-2").unwrap();
        let e = symmetric_event();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let it = simulate_interaction(&d, &e, &driver(0.9), &driver(0.1), &cfg, "t", &mut rng).unwrap();
        assert_eq!(it.sample.y, Label::Pass);
        let t = &it.trajectory;
        let step = it.first_cross_step;
        assert!(t.get(step, 0) >= 0.0 && t.get(step, 2) < 0.0);
        assert_eq!(it.sample.x.shape(), (10, 4));
        // window ends before anyone has crossed
        for r in 0..10 {
            assert!(it.sample.x.get(r, 0) < 0.0 && it.sample.x.get(r, 2) < 0.0);
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let d = DomainSpec::named("FT-1").unwrap();
        let cfg = ScmConfig::default();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gen_domain_dataset(&d, 50, &cfg, &mut rng).unwrap()
        };
        let a = gen(9);
        assert_eq!(a.dataset.len(), 100);
        assert_eq!(a.dataset.class_counts(), [50, 50]);
        let b = gen(9);
        assert_eq!(
            crate::data::to_jsonl(&a.dataset.samples),
            crate::data::to_jsonl(&b.dataset.samples)
        );
        assert_eq!(a.sidecar_jsonl(), b.sidecar_jsonl());
    }

    #[test]
    fn degenerate_weights_are_a_config_error() {
        let cfg = ScmConfig {
            label_weights: [0.0, 0.0, 0.0],
            max_label_attempts: 500,
            ..ScmConfig::default()
        };
        let d = DomainSpec::named("FT-1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_domain_dataset(&d, 3, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_domain_rejected() {
        let mut d = DomainSpec::named("FT-1").unwrap();
        d.intersect_angle = 180.0;
        assert!(d.validate().is_err());
    }
}
