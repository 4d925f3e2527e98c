//! Synthetic LFP-like cell populations with known knee and end of life.
//!
//! Each cell repeats one cycling template (CC charge, voltage hold, rest,
//! discharge, rest) for its whole life. The fraction of time spent above a
//! stress voltage sets the early fade rate and the life; the charge rate sets
//! where the knee falls. True capacity is bilinear in time with a short
//! quadratic blend at the knee.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CellRecord, CycleCapacity, RawSample, SampleSeries, SECONDS_PER_DAY, SECONDS_PER_HOUR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageTemplate {
    pub name: String,
    /// Multiples of nominal capacity per hour.
    pub charge_rate_c: f64,
    pub discharge_rate_c: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Rest after charge and after discharge, seconds.
    pub rest_s: f64,
}

impl UsageTemplate {
    fn standard(charge_rate_c: f64) -> Self {
        UsageTemplate {
            name: format!("cc{charge_rate_c}c"),
            charge_rate_c,
            discharge_rate_c: 4.0,
            v_min: 2.0,
            v_max: 3.6,
            rest_s: 600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cells: usize,
    /// Capacity grid spacing used for the reported true curve, seconds.
    pub dt: f64,
    pub life_range_days: [f64; 2],
    pub knee_fraction_range: [f64; 2],
    /// Ah/day.
    pub early_slope_range: [f64; 2],
    /// Ah/day. The late slope is solved from life and knee; a value outside
    /// this range is an infeasible spec.
    pub late_slope_range: [f64; 2],
    pub usage_profiles: Vec<UsageTemplate>,
    /// Top-of-charge hold, drawn per cell, seconds.
    pub hold_range_s: [f64; 2],
    pub noise_sd: f64,
    pub seed: u64,
    pub nominal_capacity: f64,
    pub initial_capacity: f64,
    pub stress_voltage: f64,
    pub sample_interval_s: f64,
    /// Simulation runs this fraction past end of life.
    pub overrun_fraction: f64,
    pub horizon_days: f64,
    pub internal_resistance: f64,
    pub ambient_c: f64,
    /// Steady-state temperature rise per A^2.
    pub heating_c_per_a2: f64,
    pub thermal_time_constant_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cells: 40,
            dt: 12.0 * SECONDS_PER_HOUR,
            life_range_days: [15.0, 40.0],
            knee_fraction_range: [0.4, 0.8],
            early_slope_range: [0.001, 0.004],
            late_slope_range: [0.005, 0.06],
            usage_profiles: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
                .into_iter()
                .map(UsageTemplate::standard)
                .collect(),
            hold_range_s: [0.0, 3600.0],
            noise_sd: 0.002,
            seed: 7,
            nominal_capacity: 1.1,
            initial_capacity: 1.07,
            stress_voltage: 3.4,
            sample_interval_s: 120.0,
            overrun_fraction: 0.2,
            horizon_days: 60.0,
            internal_resistance: 0.03,
            ambient_c: 30.0,
            heating_c_per_a2: 0.25,
            thermal_time_constant_s: 600.0,
        }
    }
}

/// Ground truth for one generated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub cell_id: String,
    pub template: String,
    pub hold_s: f64,
    pub early_slope: f64,
    pub late_slope: f64,
    pub true_knee_time: f64,
    pub true_eol_time: f64,
    /// Grid from 0 in steps of `dt`, seconds.
    pub times: Vec<f64>,
    pub true_capacity: Vec<f64>,
}

/// Bilinear fade with a quadratic blend of width `blend` around the knee.
/// Times in days, slopes in Ah/day (positive = fade).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FadeCurve {
    pub q0: f64,
    pub early_slope: f64,
    pub late_slope: f64,
    pub knee_day: f64,
    pub blend_days: f64,
}

impl FadeCurve {
    pub fn at(&self, day: f64) -> f64 {
        let a = self.knee_day - 0.5 * self.blend_days;
        let b = self.knee_day + 0.5 * self.blend_days;
        if day <= a || self.blend_days <= 0.0 && day <= self.knee_day {
            self.q0 - self.early_slope * day
        } else if day >= b {
            self.q0 - self.early_slope * self.knee_day - self.late_slope * (day - self.knee_day)
        } else {
            let z = day - a;
            self.q0 - self.early_slope * day - (self.late_slope - self.early_slope) * z * z / (2.0 * self.blend_days)
        }
    }
}

// Open-circuit voltage against state of charge, LFP-like plateau.
const OCV_TABLE: [(f64, f64); 6] = [
    (0.0, 2.2),
    (0.05, 3.2),
    (0.15, 3.3),
    (0.85, 3.35),
    (0.95, 3.42),
    (1.0, 3.5),
];

fn ocv(soc: f64) -> f64 {
    let s = soc.clamp(0.0, 1.0);
    for w in OCV_TABLE.windows(2) {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        if s <= s1 {
            return v0 + (v1 - v0) * (s - s0) / (s1 - s0);
        }
    }
    OCV_TABLE[OCV_TABLE.len() - 1].1
}

/// State of charge at which the OCV reaches `v`, clamped to [0, 1].
fn ocv_inverse(v: f64) -> f64 {
    if v <= OCV_TABLE[0].1 {
        return 0.0;
    }
    for w in OCV_TABLE.windows(2) {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        if v <= v1 {
            return s0 + (s1 - s0) * (v - v0) / (v1 - v0);
        }
    }
    1.0
}

#[derive(Clone, Copy, Debug)]
enum PhaseKind {
    Charge { current: f64 },
    Hold { current0: f64, tau: f64 },
    Rest,
    Discharge { current: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Phase {
    kind: PhaseKind,
    start: f64,
    duration: f64,
    soc0: f64,
    /// Ampere-seconds per unit state of charge during this cycle.
    charge_as: f64,
}

impl Phase {
    fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// (current, voltage, soc) at time `t` within the phase.
    fn state(&self, t: f64, template: &UsageTemplate, r: f64) -> (f64, f64, f64) {
        let tau = (t - self.start).clamp(0.0, self.duration);
        match self.kind {
            PhaseKind::Charge { current } => {
                let soc = self.soc0 + current * tau / self.charge_as;
                (current, (ocv(soc) + current * r).min(template.v_max), soc)
            }
            PhaseKind::Hold { current0, tau: tc } => {
                let decay = (-tau / tc).exp();
                let soc = (self.soc0 + current0 * tc * (1.0 - decay) / self.charge_as).min(1.0);
                (current0 * decay, template.v_max, soc)
            }
            PhaseKind::Rest => (0.0, ocv(self.soc0), self.soc0),
            PhaseKind::Discharge { current } => {
                let soc = (self.soc0 + current * tau / self.charge_as).max(0.0);
                (current, (ocv(soc) + current * r).max(template.v_min), soc)
            }
        }
    }

    fn end_soc(&self, template: &UsageTemplate, r: f64) -> f64 {
        self.state(self.end(), template, r).2
    }
}

/// Phases of one cycle starting at `start` from `soc0`, for a cell whose
/// present capacity is `q_ah`.
fn cycle_phases(template: &UsageTemplate, hold_s: f64, nominal: f64, q_ah: f64, r: f64, start: f64, soc0: f64) -> Vec<Phase> {
    let charge_as = q_ah * SECONDS_PER_HOUR;
    let ic = template.charge_rate_c * nominal;
    let id = -template.discharge_rate_c * nominal;
    let soc_switch = ocv_inverse(template.v_max - ic * r).max(soc0);
    let mut phases = Vec::with_capacity(5);
    let mut t = start;
    let mut push = |kind, duration: f64, soc0: f64, phases: &mut Vec<Phase>| {
        let p = Phase {
            kind,
            start: t,
            duration,
            soc0,
            charge_as,
        };
        t += duration;
        phases.push(p);
        p
    };
    let ch = push(
        PhaseKind::Charge { current: ic },
        (soc_switch - soc0) * charge_as / ic,
        soc0,
        &mut phases,
    );
    let mut soc = ch.end_soc(template, r);
    if hold_s > 0.0 {
        let tau = ((1.0 - soc) * charge_as / ic).max(60.0);
        let h = push(PhaseKind::Hold { current0: ic, tau }, hold_s, soc, &mut phases);
        soc = h.end_soc(template, r);
    }
    push(PhaseKind::Rest, template.rest_s, soc, &mut phases);
    let soc_floor = ocv_inverse(template.v_min - id * r);
    let dis = push(
        PhaseKind::Discharge { current: id },
        (soc - soc_floor).max(0.0) * charge_as / -id,
        soc,
        &mut phases,
    );
    soc = dis.end_soc(template, r);
    push(PhaseKind::Rest, template.rest_s, soc, &mut phases);
    phases
}

/// Fraction of one fresh cycle spent above `stress_voltage`.
fn stress_fraction(spec: &SynthSpec, template: &UsageTemplate, hold_s: f64) -> f64 {
    let r = spec.internal_resistance;
    let phases = cycle_phases(template, hold_s, spec.nominal_capacity, spec.initial_capacity, r, 0.0, 0.0);
    let total = phases.last().map(Phase::end).unwrap_or(0.0);
    if total <= 0.0 {
        return 0.0;
    }
    let step = 1.0;
    let n = (total / step).ceil() as usize;
    let mut above = 0.0;
    let mut p = 0;
    for k in 0..n {
        let t = (k as f64 + 0.5) * step;
        while p + 1 < phases.len() && t >= phases[p].end() {
            p += 1;
        }
        if phases[p].state(t, template, r).1 > spec.stress_voltage {
            above += step;
        }
    }
    (above / total).min(1.0)
}

fn lerp(range: [f64; 2], u: f64) -> f64 {
    range[0] + (range[1] - range[0]) * u.clamp(0.0, 1.0)
}

fn ordered(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || positive && r[0] <= 0.0 {
        return Err(Error::Spec(format!("{name} range {r:?} must be finite and ordered")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(Error::Spec("n_cells must be at least 1".into()));
        }
        ordered("life_range_days", self.life_range_days, true)?;
        ordered("knee_fraction_range", self.knee_fraction_range, true)?;
        ordered("early_slope_range", self.early_slope_range, true)?;
        ordered("late_slope_range", self.late_slope_range, true)?;
        ordered("hold_range_s", self.hold_range_s, false)?;
        if self.hold_range_s[0] < 0.0 {
            return Err(Error::Spec("hold durations must be non-negative".into()));
        }
        if self.knee_fraction_range[1] >= 1.0 {
            return Err(Error::Spec("knee fraction must lie strictly inside (0, 1)".into()));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("nominal_capacity", self.nominal_capacity),
            ("initial_capacity", self.initial_capacity),
            ("sample_interval_s", self.sample_interval_s),
            ("horizon_days", self.horizon_days),
            ("internal_resistance", self.internal_resistance),
            ("thermal_time_constant_s", self.thermal_time_constant_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Spec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sd >= 0.0 && self.overrun_fraction >= 0.0 && self.heating_c_per_a2 >= 0.0) {
            return Err(Error::Spec("noise_sd, overrun_fraction and heating must be non-negative".into()));
        }
        if self.initial_capacity <= self.eol_threshold() {
            return Err(Error::Spec("initial capacity is already below end of life".into()));
        }
        if self.life_range_days[1] > self.horizon_days {
            return Err(Error::Spec(format!(
                "life up to {} days exceeds the simulated horizon of {} days",
                self.life_range_days[1], self.horizon_days
            )));
        }
        if self.usage_profiles.is_empty() {
            return Err(Error::Spec("at least one usage profile is required".into()));
        }
        for t in &self.usage_profiles {
            if !(t.charge_rate_c > 0.0 && t.discharge_rate_c > 0.0 && t.rest_s >= 0.0 && t.v_min < t.v_max) {
                return Err(Error::Spec(format!("invalid usage profile {t:?}")));
            }
        }
        Ok(())
    }

    pub fn eol_threshold(&self) -> f64 {
        crate::ingest::EOL_FRACTION * self.nominal_capacity
    }
}

/// Per-cell draws and the degradation parameters they imply.
#[derive(Clone, Debug)]
struct CellPlan {
    template: usize,
    hold_s: f64,
    curve: FadeCurve,
    life_days: f64,
}

fn plan_cells(spec: &SynthSpec) -> Result<Vec<CellPlan>> {
    let rates: Vec<f64> = spec.usage_profiles.iter().map(|t| t.charge_rate_c).collect();
    let (r_lo, r_hi) = rates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    let mut h_lo = f64::INFINITY;
    let mut h_hi = f64::NEG_INFINITY;
    for t in &spec.usage_profiles {
        for hold in spec.hold_range_s {
            let h = stress_fraction(spec, t, hold);
            h_lo = h_lo.min(h);
            h_hi = h_hi.max(h);
        }
    }
    let span = |lo: f64, hi: f64, v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let budget = spec.initial_capacity - spec.eol_threshold();

    (0..spec.n_cells)
        .map(|i| {
            let mut rng = cell_rng(spec.seed, i);
            let template = rng.random_range(0..spec.usage_profiles.len());
            let [h0, h1] = spec.hold_range_s;
            let hold_s = if h1 > h0 { rng.random_range(h0..=h1) } else { h0 };
            let t = &spec.usage_profiles[template];
            let u_a = span(h_lo, h_hi, stress_fraction(spec, t, hold_s));
            let u_b = span(r_lo, r_hi, t.charge_rate_c);
            let life_days = lerp(spec.life_range_days, 1.0 - u_a);
            let early = lerp(spec.early_slope_range, u_a);
            let f = lerp(spec.knee_fraction_range, u_b);
            let knee_day = f * life_days;
            let late = (budget - early * knee_day) / (life_days - knee_day);
            if !(late > early) || late < spec.late_slope_range[0] || late > spec.late_slope_range[1] {
                return Err(Error::Spec(format!(
                    "cell {i}: life {life_days:.2} d, knee {knee_day:.2} d and early slope {early} need late slope {late}, outside {:?} or not steeper than early",
                    spec.late_slope_range
                )));
            }
            Ok(CellPlan {
                template,
                hold_s,
                curve: FadeCurve {
                    q0: spec.initial_capacity,
                    early_slope: early,
                    late_slope: late,
                    knee_day,
                    blend_days: 0.05 * life_days,
                },
                life_days,
            })
        })
        .collect()
}

fn cell_rng(seed: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64 + 1);
    rng
}

pub fn cell_id(index: usize) -> String {
    format!("synth_{index:03}")
}

fn simulate_cell(spec: &SynthSpec, index: usize, plan: &CellPlan) -> Result<(CellRecord, SynthTruth)> {
    let template = &spec.usage_profiles[plan.template];
    let r = spec.internal_resistance;
    let end = (plan.life_days * (1.0 + spec.overrun_fraction)).min(spec.horizon_days) * SECONDS_PER_DAY;
    // noise draws continue the cell's stream after the plan draws
    let mut rng = cell_rng(spec.seed, index);
    let _: usize = rng.random_range(0..spec.usage_profiles.len());
    if spec.hold_range_s[1] > spec.hold_range_s[0] {
        let _: f64 = rng.random_range(spec.hold_range_s[0]..=spec.hold_range_s[1]);
    }
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Spec(e.to_string()))?;

    let n_samples = (end / spec.sample_interval_s).floor() as usize + 1;
    let mut samples = SampleSeries::with_capacity(n_samples);
    let mut cycles = Vec::new();
    let mut temperature = spec.ambient_c;
    let decay = (-spec.sample_interval_s / spec.thermal_time_constant_s).exp();
    let mut k = 0usize;
    let mut t_cycle = 0.0;
    let mut soc = 0.0;
    let mut cycle_index = 0u32;
    while t_cycle <= end {
        let q_now = plan.curve.at(t_cycle / SECONDS_PER_DAY);
        let phases = cycle_phases(template, plan.hold_s, spec.nominal_capacity, q_now, r, t_cycle, soc);
        let cycle_end = phases.last().map(Phase::end).unwrap_or(t_cycle);
        if cycle_end <= t_cycle {
            return Err(Error::Spec(format!("usage profile {} has an empty cycle", template.name)));
        }
        let mut p = 0;
        loop {
            let t = k as f64 * spec.sample_interval_s;
            if t >= cycle_end || t > end {
                break;
            }
            while p + 1 < phases.len() && t >= phases[p].end() {
                p += 1;
            }
            let (current, voltage, _) = phases[p].state(t, template, r);
            samples.push_unchecked(RawSample {
                t,
                current,
                voltage,
                temperature,
            });
            let target = spec.ambient_c + spec.heating_c_per_a2 * current * current;
            temperature = target + (temperature - target) * decay;
            k += 1;
        }
        let discharge = phases.iter().find(|ph| matches!(ph.kind, PhaseKind::Discharge { .. }));
        if let Some(d) = discharge {
            if d.end() <= end {
                let q_true = plan.curve.at(d.end() / SECONDS_PER_DAY);
                let q = if spec.noise_sd > 0.0 { q_true + noise.sample(&mut rng) } else { q_true };
                cycles.push(CycleCapacity {
                    cycle_index,
                    end_time: d.end(),
                    discharge_capacity: q,
                });
            }
            soc = d.end_soc(template, r);
        }
        cycle_index += 1;
        t_cycle = cycle_end;
    }

    let id = cell_id(index);
    let mut record = CellRecord::new(id.clone(), spec.nominal_capacity, samples);
    record.batch = template.name.clone();
    record.cycles = cycles;

    let n_grid = (end / spec.dt).floor() as usize + 1;
    let times: Vec<f64> = (0..n_grid).map(|j| j as f64 * spec.dt).collect();
    let true_capacity = times.iter().map(|t| plan.curve.at(t / SECONDS_PER_DAY)).collect();
    let truth = SynthTruth {
        cell_id: id,
        template: template.name.clone(),
        hold_s: plan.hold_s,
        early_slope: plan.curve.early_slope,
        late_slope: plan.curve.late_slope,
        true_knee_time: plan.curve.knee_day * SECONDS_PER_DAY,
        true_eol_time: plan.life_days * SECONDS_PER_DAY,
        times,
        true_capacity,
    };
    Ok((record, truth))
}

/// Generates the population described by `spec`; deterministic in the seed.
pub fn generate_population(spec: &SynthSpec) -> Result<(Vec<CellRecord>, Vec<SynthTruth>)> {
    spec.validate()?;
    let plans = plan_cells(spec)?;
    let out: Vec<(CellRecord, SynthTruth)> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| simulate_cell(spec, i, plan))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

/// Writes truth as CSV: one row per cell.
pub fn write_truth_csv(path: &std::path::Path, truth: &[SynthTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell_id",
        "template",
        "hold_s",
        "early_slope_ah_per_day",
        "late_slope_ah_per_day",
        "true_knee_s",
        "true_eol_s",
    ])?;
    for t in truth {
        w.write_record([
            t.cell_id.clone(),
            t.template.clone(),
            t.hold_s.to_string(),
            t.early_slope.to_string(),
            t.late_slope.to_string(),
            t.true_knee_time.to_string(),
            t.true_eol_time.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
