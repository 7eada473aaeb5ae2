//! Free-radical solution polymerization CSTR with a cooling jacket.
//!
//! Seven differential states (initiator, monomer, reactor and jacket
//! temperatures, and the first three moments of the dead-polymer distribution)
//! plus five explicit algebraic outputs. The algebraic relations are
//! substituted into the balances, so the DAE is integrated as an ODE.
//!
//! Time is in hours throughout. The heat-transfer group `hA / (rho_cp * V)` is
//! used as a lumped coefficient in 1/h, i.e. `hA` is taken in J/(K h).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::InputSchedule;
use crate::io;
use crate::ode::{Dopri5, OdeOptions};

pub const N_PARAMS: usize = 18;
pub const STATE_DIM: usize = 7;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "Ad", "Ed", "Ap", "Ep", "At", "Et", "fi", "dHr", "hA", "rhoCp", "rhocCpc", "Mm", "V", "Vc", "If", "Mf", "Tf",
    "Tcf",
];

pub const STATE_NAMES: [&str; STATE_DIM] = ["I", "M", "T", "Tc", "D0", "D1", "D2"];
pub const INPUT_NAMES: [&str; 4] = ["Qi", "Qs", "Qm", "Qc"];

/// Kinetic, physical and feed constants of the reactor.
///
/// `neg_dhr` holds the heat of polymerization as a positive number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactorParameters {
    pub ad: f64,
    pub ed: f64,
    pub ap: f64,
    pub ep: f64,
    pub at: f64,
    pub et: f64,
    pub fi: f64,
    pub neg_dhr: f64,
    pub ha: f64,
    pub rho_cp: f64,
    pub rhoc_cpc: f64,
    pub mm: f64,
    pub v: f64,
    pub vc: f64,
    pub i_feed: f64,
    pub m_feed: f64,
    pub t_feed: f64,
    pub tc_feed: f64,
}

impl Default for ReactorParameters {
    fn default() -> Self {
        Self::nominal()
    }
}

impl ReactorParameters {
    /// Literature nominal values.
    pub fn nominal() -> Self {
        Self {
            ad: 2.142e17,
            ed: 14897.0,
            ap: 3.81e10,
            ep: 3557.0,
            at: 4.50e12,
            et: 843.0,
            fi: 0.6,
            neg_dhr: 6.99e4,
            ha: 1.05e6,
            rho_cp: 1506.0,
            rhoc_cpc: 4043.0,
            mm: 104.14,
            v: 3000.0,
            vc: 3312.4,
            i_feed: 0.5888,
            m_feed: 8.6981,
            t_feed: 330.0,
            tc_feed: 295.0,
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.ad, self.ed, self.ap, self.ep, self.at, self.et, self.fi, self.neg_dhr, self.ha, self.rho_cp,
            self.rhoc_cpc, self.mm, self.v, self.vc, self.i_feed, self.m_feed, self.t_feed, self.tc_feed,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != N_PARAMS {
            return Err(Error::InvalidArgument(format!("expected {N_PARAMS} parameters, got {}", x.len())));
        }
        Ok(Self {
            ad: x[0],
            ed: x[1],
            ap: x[2],
            ep: x[3],
            at: x[4],
            et: x[5],
            fi: x[6],
            neg_dhr: x[7],
            ha: x[8],
            rho_cp: x[9],
            rhoc_cpc: x[10],
            mm: x[11],
            v: x[12],
            vc: x[13],
            i_feed: x[14],
            m_feed: x[15],
            t_feed: x[16],
            tc_feed: x[17],
        })
    }

    /// Physical parameters from values normalized by `self` (element-wise product).
    pub fn denormalize(&self, normalized: &[f64]) -> Result<Self> {
        if normalized.len() != N_PARAMS {
            return Err(Error::InvalidArgument(format!("expected {N_PARAMS} normalized values, got {}", normalized.len())));
        }
        let base = self.to_array();
        let x: Vec<f64> = base.iter().zip(normalized).map(|(b, n)| b * n).collect();
        Self::from_slice(&x)
    }

    /// Values of `other` relative to `self`.
    pub fn normalize(&self, other: &Self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        for ((o, a), b) in out.iter_mut().zip(other.to_array()).zip(self.to_array()) {
            *o = a / b;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("parameter {name} must be positive and finite, got {v}")));
            }
        }
        if self.fi > 1.0 {
            return Err(Error::Domain(format!("initiator efficiency must be <= 1, got {}", self.fi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReactorState {
    /// Initiator, mol/L.
    pub i: f64,
    /// Monomer, mol/L.
    pub m: f64,
    /// Reactor temperature, K.
    pub t: f64,
    /// Jacket temperature, K.
    pub tc: f64,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
}

impl ReactorState {
    /// Starting point for steady-state searches near the nominal operating point.
    pub fn nominal_guess() -> Self {
        Self { i: 0.067, m: 3.3, t: 323.0, tc: 305.0, d0: 2.7e-4, d1: 16.0, d2: 4600.0 }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.i, self.m, self.t, self.tc, self.d0, self.d1, self.d2]
    }

    pub fn from_array(x: [f64; STATE_DIM]) -> Self {
        Self { i: x[0], m: x[1], t: x[2], tc: x[3], d0: x[4], d1: x[5], d2: x[6] }
    }

    pub fn validate(&self) -> Result<()> {
        let x = self.to_array();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite state {x:?}")));
        }
        if self.i < 0.0 || self.m < 0.0 || self.d0 < 0.0 || self.d1 < 0.0 || self.d2 < 0.0 {
            return Err(Error::Domain(format!("negative concentration in state {x:?}")));
        }
        if self.t <= 0.0 || self.tc <= 0.0 {
            return Err(Error::Domain(format!("non-positive temperature in state {x:?}")));
        }
        Ok(())
    }
}

/// Flow rates, L/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactorInputs {
    pub qi: f64,
    pub qs: f64,
    pub qm: f64,
    pub qc: f64,
}

impl ReactorInputs {
    /// Flow set that reproduces the reference steady-state temperatures.
    pub fn steady_default() -> Self {
        Self { qi: 108.0, qs: 459.0, qm: 378.0, qc: 471.6 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.qi, self.qs, self.qm, self.qc]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self { qi: x[0], qs: x[1], qm: x[2], qc: x[3] }
    }

    pub fn total_flow(&self) -> f64 {
        self.qi + self.qs + self.qm
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in INPUT_NAMES.iter().zip(self.to_array()) {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("input {n} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConstants {
    pub kd: f64,
    pub kp: f64,
    pub kt: f64,
}

/// Algebraic outputs. Quantities that need `D1 > 0` are `None` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgebraicOutputs {
    pub p: f64,
    pub qt: f64,
    pub mw: Option<f64>,
    pub pd: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyBalanceFlow {
    /// Feed-temperature term driven by the initiator flow only.
    #[default]
    AsPrintedQi,
    TotalFlowQt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacketCapacity {
    /// Jacket exchange term divided by the reactor heat capacity.
    #[default]
    AsPrintedRhoCpV,
    PhysicalRhocCpcVc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMmFactor {
    #[default]
    AsPrintedWithMm,
    WithoutMm,
}

/// Switches for three terms whose printed form is suspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariant {
    pub energy_balance_flow: EnergyBalanceFlow,
    pub jacket_capacity: JacketCapacity,
    pub pd_mm_factor: PdMmFactor,
}

impl ModelVariant {
    pub fn as_printed() -> Self {
        Self::default()
    }

    /// Dimensionally consistent reading of all three terms.
    pub fn physical() -> Self {
        Self {
            energy_balance_flow: EnergyBalanceFlow::TotalFlowQt,
            jacket_capacity: JacketCapacity::PhysicalRhocCpcVc,
            pd_mm_factor: PdMmFactor::WithoutMm,
        }
    }
}

/// Arrhenius rate constants `k = A exp(-E / T)`.
pub fn rate_constants(t: f64, params: &ReactorParameters) -> Result<RateConstants> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    Ok(arrhenius(t, params))
}

#[inline]
fn arrhenius(t: f64, p: &ReactorParameters) -> RateConstants {
    RateConstants { kd: p.ad * (-p.ed / t).exp(), kp: p.ap * (-p.ep / t).exp(), kt: p.at * (-p.et / t).exp() }
}

#[inline]
fn live_radicals(i: f64, k: &RateConstants, p: &ReactorParameters) -> f64 {
    (2.0 * p.fi * k.kd * i.max(0.0) / k.kt).sqrt()
}

/// Unchecked right-hand side used inside the integrator.
#[inline]
pub(crate) fn rhs_array(
    x: &[f64; STATE_DIM],
    u: &ReactorInputs,
    p: &ReactorParameters,
    variant: &ModelVariant,
) -> [f64; STATE_DIM] {
    let [i, m, t, tc, d0, d1, d2] = *x;
    let k = arrhenius(t, p);
    let pr = live_radicals(i, &k, p);
    let qt = u.total_flow();
    let dil = qt / p.v;
    let prop = k.kp * m * pr;
    let q_energy = match variant.energy_balance_flow {
        EnergyBalanceFlow::AsPrintedQi => u.qi,
        EnergyBalanceFlow::TotalFlowQt => qt,
    };
    let exchange = p.ha * (t - tc);
    let jacket_cap = match variant.jacket_capacity {
        JacketCapacity::AsPrintedRhoCpV => p.rho_cp * p.v,
        JacketCapacity::PhysicalRhocCpcVc => p.rhoc_cpc * p.vc,
    };
    [
        (u.qi * p.i_feed - qt * i) / p.v - k.kd * i,
        (u.qm * p.m_feed - qt * m) / p.v - prop,
        q_energy * (p.t_feed - t) / p.v + p.neg_dhr / p.rho_cp * prop - exchange / (p.rho_cp * p.v),
        u.qc * (p.tc_feed - tc) / p.vc + exchange / jacket_cap,
        0.5 * k.kt * pr * pr - dil * d0,
        p.mm * prop - dil * d1,
        5.0 * p.mm * prop + p.mm * k.kp * k.kp / k.kt * m * m - dil * d2,
    ]
}

/// Time derivatives of the seven states, ordered as [`STATE_NAMES`].
pub fn reactor_rhs(
    _t: f64,
    state: &ReactorState,
    inputs: &ReactorInputs,
    params: &ReactorParameters,
    variant: &ModelVariant,
) -> Result<[f64; STATE_DIM]> {
    let x = state.to_array();
    if x.iter().chain(inputs.to_array().iter()).chain(params.to_array().iter()).any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in reactor state, inputs or parameters".into()));
    }
    if !(state.t > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", state.t)));
    }
    Ok(rhs_array(&x, inputs, params, variant))
}

pub fn algebraic_outputs(
    state: &ReactorState,
    inputs: &ReactorInputs,
    params: &ReactorParameters,
    variant: &ModelVariant,
) -> Result<AlgebraicOutputs> {
    let k = rate_constants(state.t, params)?;
    Ok(outputs_unchecked(state, inputs, params, variant, &k))
}

fn outputs_unchecked(
    s: &ReactorState,
    u: &ReactorInputs,
    p: &ReactorParameters,
    variant: &ModelVariant,
    k: &RateConstants,
) -> AlgebraicOutputs {
    let pr = live_radicals(s.i, k, p);
    let (mw, pd) = if s.d1 > 0.0 {
        let mw = p.mm * s.d2 / s.d1;
        let pd_base = s.d2 * s.d0 / (s.d1 * s.d1);
        let pd = match variant.pd_mm_factor {
            PdMmFactor::AsPrintedWithMm => p.mm * pd_base,
            PdMmFactor::WithoutMm => pd_base,
        };
        (Some(mw), Some(pd))
    } else {
        (None, None)
    };
    let eta = mw.filter(|m| *m >= 0.0).map(viscosity);
    AlgebraicOutputs { p: pr, qt: u.total_flow(), mw, pd, eta }
}

/// Viscosity correlation in the weight-average molecular weight.
pub fn viscosity(mw: f64) -> f64 {
    0.0012 * mw.powf(0.71)
}

/// Every series that a trajectory can report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    I,
    M,
    T,
    Tc,
    D0,
    D1,
    D2,
    P,
    Qt,
    Mw,
    PD,
    #[serde(rename = "eta")]
    Eta,
}

impl Channel {
    pub const ALL: [Channel; 12] = [
        Channel::I,
        Channel::M,
        Channel::T,
        Channel::Tc,
        Channel::D0,
        Channel::D1,
        Channel::D2,
        Channel::P,
        Channel::Qt,
        Channel::Mw,
        Channel::PD,
        Channel::Eta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Channel::I => "I",
            Channel::M => "M",
            Channel::T => "T",
            Channel::Tc => "Tc",
            Channel::D0 => "D0",
            Channel::D1 => "D1",
            Channel::D2 => "D2",
            Channel::P => "P",
            Channel::Qt => "Qt",
            Channel::Mw => "Mw",
            Channel::PD => "PD",
            Channel::Eta => "eta",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown output channel {s:?}")))
    }
}

/// Sampled record of one simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub inputs: Vec<ReactorInputs>,
    pub states: Vec<ReactorState>,
    pub outputs: Vec<AlgebraicOutputs>,
}

pub const TRAJECTORY_HEADER: [&str; 17] =
    ["time", "Qi", "Qs", "Qm", "Qc", "I", "M", "T", "Tc", "D0", "D1", "D2", "P", "Qt", "Mw", "PD", "eta"];

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 || self.inputs.len() != n || self.states.len() != n || self.outputs.len() != n {
            return Err(Error::InvalidArgument("trajectory series must share one length >= 2".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("trajectory times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// One output series; undefined algebraic values come back as NaN.
    pub fn series(&self, channel: Channel) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.outputs)
            .map(|(s, o)| match channel {
                Channel::I => s.i,
                Channel::M => s.m,
                Channel::T => s.t,
                Channel::Tc => s.tc,
                Channel::D0 => s.d0,
                Channel::D1 => s.d1,
                Channel::D2 => s.d2,
                Channel::P => o.p,
                Channel::Qt => o.qt,
                Channel::Mw => o.mw.unwrap_or(f64::NAN),
                Channel::PD => o.pd.unwrap_or(f64::NAN),
                Channel::Eta => o.eta.unwrap_or(f64::NAN),
            })
            .collect()
    }

    /// Overwrite one series in place (used for measurement noise).
    pub fn set_series(&mut self, channel: Channel, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidArgument("series length mismatch".into()));
        }
        for ((s, o), &v) in self.states.iter_mut().zip(self.outputs.iter_mut()).zip(values) {
            match channel {
                Channel::I => s.i = v,
                Channel::M => s.m = v,
                Channel::T => s.t = v,
                Channel::Tc => s.tc = v,
                Channel::D0 => s.d0 = v,
                Channel::D1 => s.d1 = v,
                Channel::D2 => s.d2 = v,
                Channel::P => o.p = v,
                Channel::Qt => return Err(Error::InvalidArgument("Qt is fixed by the inputs".into())),
                Channel::Mw => o.mw = Some(v),
                Channel::PD => o.pd = Some(v),
                Channel::Eta => o.eta = Some(v),
            }
        }
        Ok(())
    }

    /// Input matrix, one row of `[Qi, Qs, Qm, Qc]` per sample.
    pub fn input_rows(&self) -> Vec<[f64; 4]> {
        self.inputs.iter().map(|u| u.to_array()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|k| {
                let u = self.inputs[k];
                let s = self.states[k];
                let o = self.outputs[k];
                vec![
                    self.times[k], u.qi, u.qs, u.qm, u.qc, s.i, s.m, s.t, s.tc, s.d0, s.d1, s.d2, o.p, o.qt,
                    opt(o.mw), opt(o.pd), opt(o.eta),
                ]
            })
            .collect();
        io::write_matrix(path, &TRAJECTORY_HEADER, &rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = io::read_matrix(path)?;
        if header != TRAJECTORY_HEADER {
            return Err(Error::Parse(format!("{}: unexpected trajectory header", path.display())));
        }
        let some = |v: f64| if v.is_nan() { None } else { Some(v) };
        let mut t = Trajectory { times: vec![], inputs: vec![], states: vec![], outputs: vec![] };
        for r in rows {
            t.times.push(r[0]);
            t.inputs.push(ReactorInputs { qi: r[1], qs: r[2], qm: r[3], qc: r[4] });
            t.states.push(ReactorState { i: r[5], m: r[6], t: r[7], tc: r[8], d0: r[9], d1: r[10], d2: r[11] });
            t.outputs.push(AlgebraicOutputs { p: r[12], qt: r[13], mw: some(r[14]), pd: some(r[15]), eta: some(r[16]) });
        }
        t.validate()?;
        Ok(t)
    }
}

/// Integrate from `y0` over `grid` under a piecewise-constant input schedule.
///
/// The solver lands exactly on every grid point and restarts at every input
/// switch, so no step straddles a discontinuity.
pub fn integrate(
    y0: &ReactorState,
    schedule: &InputSchedule,
    params: &ReactorParameters,
    variant: &ModelVariant,
    grid: &[f64],
    opts: OdeOptions,
) -> Result<Trajectory> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    let (g0, g1) = (grid[0], grid[grid.len() - 1]);
    if g0 < schedule.start() || g1 > schedule.end() + 1e-9 * schedule.end().abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule [{}, {}] does not cover grid [{g0}, {g1}]",
            schedule.start(),
            schedule.end()
        )));
    }
    params.validate()?;
    y0.validate()?;

    let mut solver = Dopri5::<STATE_DIM>::new(opts);
    let mut x = y0.to_array();
    let mut t = g0;
    let mut out = Trajectory {
        times: Vec::with_capacity(grid.len()),
        inputs: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        outputs: Vec::with_capacity(grid.len()),
    };
    let record = |t: f64, x: &[f64; STATE_DIM], out: &mut Trajectory| -> Result<()> {
        let u = schedule.level_at(t);
        let s = ReactorState::from_array(*x);
        let k = rate_constants(s.t, params).map_err(|e| Error::Integration { time: t, reason: e.to_string() })?;
        out.times.push(t);
        out.inputs.push(u);
        out.states.push(s);
        out.outputs.push(outputs_unchecked(&s, &u, params, variant, &k));
        Ok(())
    };
    record(t, &x, &mut out)?;
    let mut segment = schedule.segment_index(t);
    for &target in &grid[1..] {
        while t < target {
            let seg_end = schedule.segment_end(segment);
            let eps = 1e-9 * seg_end.abs().max(1.0);
            let stop = if seg_end < target - eps { seg_end } else { target };
            let u = schedule.level(segment);
            let mut f = |_t: f64, y: &[f64; STATE_DIM]| rhs_array(y, &u, params, variant);
            x = solver.integrate(&mut f, t, x, stop)?;
            t = stop;
            if t >= seg_end - eps && segment + 1 < schedule.steps() {
                segment += 1;
                solver.restart();
            }
        }
        record(t, &x, &mut out)?;
    }
    Ok(out)
}

/// Largest component of the state derivative, each divided by `max(|x_i|, 1)`.
pub fn normalized_residual(
    state: &ReactorState,
    inputs: &ReactorInputs,
    params: &ReactorParameters,
    variant: &ModelVariant,
) -> f64 {
    let x = state.to_array();
    let f = rhs_array(&x, inputs, params, variant);
    f.iter().zip(&x).map(|(fi, xi)| (fi / xi.abs().max(1.0)).abs()).fold(0.0, f64::max)
}

const STEADY_TOL: f64 = 1e-11;

fn newton_steady(
    params: &ReactorParameters,
    inputs: &ReactorInputs,
    variant: &ModelVariant,
    guess: [f64; STATE_DIM],
) -> ([f64; STATE_DIM], f64) {
    let resid = |x: &[f64; STATE_DIM]| -> f64 {
        if x[2] <= 0.0 || x[3] <= 0.0 {
            return f64::INFINITY;
        }
        let r = normalized_residual(&ReactorState::from_array(*x), inputs, params, variant);
        if r.is_finite() {
            r
        } else {
            f64::INFINITY
        }
    };
    let mut x = guess;
    let mut r = resid(&x);
    let mut best = (x, r);
    for _ in 0..100 {
        if r < STEADY_TOL {
            break;
        }
        let f0 = rhs_array(&x, inputs, params, variant);
        let mut jac = DMatrix::<f64>::zeros(STATE_DIM, STATE_DIM);
        for j in 0..STATE_DIM {
            let h = 1e-6 * x[j].abs().max(1e-8);
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = rhs_array(&xp, inputs, params, variant);
            let fm = rhs_array(&xm, inputs, params, variant);
            for i in 0..STATE_DIM {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rhs = DVector::from_iterator(STATE_DIM, f0.iter().map(|v| -v));
        let Some(dx) = jac.lu().solve(&rhs) else { break };
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut xn = x;
            for i in 0..STATE_DIM {
                xn[i] += lambda * dx[i];
            }
            let nonneg = [0usize, 1, 4, 5, 6].iter().all(|&i| xn[i] >= 0.0);
            let rn = if nonneg { resid(&xn) } else { f64::INFINITY };
            if rn < r {
                x = xn;
                r = rn;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if r < best.1 {
            best = (x, r);
        }
        if !improved {
            break;
        }
    }
    best
}

/// Locate the equilibrium for constant `inputs`, starting from `guess`.
///
/// Damped Newton with a central-difference Jacobian; if that stalls, the guess
/// is relaxed by a long constant-input integration and Newton is retried.
pub fn find_steady_state(
    params: &ReactorParameters,
    inputs: &ReactorInputs,
    variant: &ModelVariant,
    guess: &ReactorState,
) -> Result<ReactorState> {
    params.validate()?;
    inputs.validate()?;
    guess.validate()?;
    let (x, r) = newton_steady(params, inputs, variant, guess.to_array());
    if r < STEADY_TOL {
        return Ok(ReactorState::from_array(x));
    }
    let mut best = r;
    let schedule = InputSchedule::constant(*inputs, 2000.0);
    if let Ok(traj) = integrate(guess, &schedule, params, variant, &[0.0, 2000.0], OdeOptions::default()) {
        let relaxed = traj.states[1].to_array();
        let (x2, r2) = newton_steady(params, inputs, variant, relaxed);
        if r2 < STEADY_TOL {
            return Ok(ReactorState::from_array(x2));
        }
        best = best.min(r2);
    }
    Err(Error::NoConvergence { best_residual: best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steady_guess() -> ReactorState {
        ReactorState { i: 0.067, m: 3.3, t: 323.0, tc: 305.0, d0: 2.7e-4, d1: 16.0, d2: 4600.0 }
    }

    #[test]
    fn rate_constants_at_330_kelvin() {
        let p = ReactorParameters::nominal();
        let k = rate_constants(330.0, &p).unwrap();
        let kd = 2.142e17 * (-14897.0f64 / 330.0).exp();
        let kp = 3.81e10 * (-3557.0f64 / 330.0).exp();
        assert!(((k.kd - kd) / kd).abs() < 1e-12);
        assert!(((k.kp - kp) / kp).abs() < 1e-12);
        assert!((k.kd - 5.31e-3).abs() < 0.01e-3, "kd = {}", k.kd);
        assert!((k.kp - 7.94e5).abs() < 0.01e5, "kp = {}", k.kp);
    }

    #[test]
    fn zero_activation_energy_gives_unit_rates() {
        let p = ReactorParameters { ad: 1.0, ap: 1.0, at: 1.0, ed: 0.0, ep: 0.0, et: 0.0, ..ReactorParameters::nominal() };
        for t in [1.0, 300.0, 1e4] {
            let k = rate_constants(t, &p).unwrap();
            assert_eq!((k.kd, k.kp, k.kt), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn non_positive_temperature_is_a_domain_error() {
        let p = ReactorParameters::nominal();
        assert!(matches!(rate_constants(0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(rate_constants(-5.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_reactor_derivatives() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let s = ReactorState { i: 0.0, m: 0.0, t: 320.0, tc: 300.0, d0: 0.0, d1: 0.0, d2: 0.0 };
        let f = reactor_rhs(0.0, &s, &u, &p, &ModelVariant::default()).unwrap();
        assert!((f[0] - u.qi * p.i_feed / p.v).abs() < 1e-15);
        assert_eq!(f[5], 0.0);
    }

    #[test]
    fn nan_state_is_rejected() {
        let s = ReactorState { t: f64::NAN, ..steady_guess() };
        let r = reactor_rhs(0.0, &s, &ReactorInputs::steady_default(), &ReactorParameters::nominal(), &ModelVariant::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn algebraic_outputs_spot_values() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs { qi: 108.0, qs: 459.0, qm: 378.0, qc: 471.6 };
        let s = ReactorState { i: 0.0, ..steady_guess() };
        let o = algebraic_outputs(&s, &u, &p, &ModelVariant::default()).unwrap();
        assert_eq!(o.p, 0.0);
        assert_eq!(o.qt, 945.0);
        let eta = viscosity(104.14);
        assert!((eta - 0.0012 * 104.14f64.powf(0.71)).abs() < 1e-15);
        assert!(((eta - 3.24e-2) / 3.24e-2).abs() < 5e-3);
    }

    #[test]
    fn zero_first_moment_leaves_molecular_weight_undefined() {
        let s = ReactorState { d1: 0.0, ..steady_guess() };
        let o = algebraic_outputs(&s, &ReactorInputs::steady_default(), &ReactorParameters::nominal(), &ModelVariant::default())
            .unwrap();
        assert!(o.mw.is_none() && o.pd.is_none() && o.eta.is_none());
    }

    #[test]
    fn pd_variant_drops_monomer_weight() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let s = steady_guess();
        let a = algebraic_outputs(&s, &u, &p, &ModelVariant::as_printed()).unwrap();
        let b = algebraic_outputs(&s, &u, &p, &ModelVariant::physical()).unwrap();
        assert!((a.pd.unwrap() / b.pd.unwrap() - p.mm).abs() < 1e-9);
        assert_eq!(a.mw, b.mw);
    }

    #[test]
    fn physical_variant_reproduces_reference_temperatures() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let v = ModelVariant::physical();
        let s = find_steady_state(&p, &u, &v, &steady_guess()).unwrap();
        assert!(normalized_residual(&s, &u, &p, &v) < 1e-9);
        assert!(((s.t - 323.56) / 323.56).abs() < 0.01, "T = {}", s.t);
        assert!(((s.tc - 305.17) / 305.17).abs() < 0.01, "Tc = {}", s.tc);
    }

    #[test]
    fn as_printed_variant_has_a_steady_state_too() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let v = ModelVariant::as_printed();
        let s = find_steady_state(&p, &u, &v, &steady_guess()).unwrap();
        assert!(normalized_residual(&s, &u, &p, &v) < 1e-9);
        s.validate().unwrap();
    }

    #[test]
    fn steady_state_is_invariant_under_integration() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let v = ModelVariant::physical();
        let s = find_steady_state(&p, &u, &v, &steady_guess()).unwrap();
        let grid: Vec<f64> = (0..=50).map(|k| k as f64 * 2.0).collect();
        let traj = integrate(&s, &InputSchedule::constant(u, 100.0), &p, &v, &grid, OdeOptions::default()).unwrap();
        for st in &traj.states {
            for (a, b) in st.to_array().iter().zip(s.to_array()) {
                assert!(((a - b) / b.abs().max(1e-300)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn integrate_rejects_bad_grids() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let sched = InputSchedule::constant(u, 10.0);
        let v = ModelVariant::default();
        let s = steady_guess();
        assert!(integrate(&s, &sched, &p, &v, &[0.0], OdeOptions::default()).is_err());
        assert!(integrate(&s, &sched, &p, &v, &[0.0, 2.0, 1.0], OdeOptions::default()).is_err());
        assert!(integrate(&s, &sched, &p, &v, &[0.0, 20.0], OdeOptions::default()).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let p = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let v = ModelVariant::physical();
        let traj = integrate(&steady_guess(), &InputSchedule::constant(u, 5.0), &p, &v, &[0.0, 1.0, 2.5, 5.0], OdeOptions::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        traj.write_csv(&path).unwrap();
        let back = Trajectory::read_csv(&path).unwrap();
        assert_eq!(back, traj);
    }
}
