//! Generalized Persidskii systems
//! `ẋ = A x − Σ bᵢ φᵢ(cᵢᵀ x(t−τ)) + D w` with sector-bounded `φᵢ`, and their
//! fixed-step simulation.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};

/// Absolute tolerance of the sector inequality.
pub const SECTOR_TOL: f64 = 1e-9;
/// State norm treated as divergence.
pub const BLOWUP_GUARD: f64 = 1e9;

#[allow(unpredictable_function_pointer_comparisons)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinearityKind {
    /// `clamp(s, -limit, limit)`.
    Saturation { limit: f64 },
    /// `tanh(scale · s)`.
    Tanh { scale: f64 },
    /// Zero on `|s| ≤ width`, unit slope outside.
    DeadZone { width: f64 },
    /// `level · sign(s)`. Leaves every finite sector at the origin.
    Relay { level: f64 },
    Linear { slope: f64 },
    /// `gain · (clamp(x[companion], lower, upper) − lower) · s`: a product term
    /// whose companion factor is read from the same (delayed) state, clamped to
    /// the operating box and shifted so that the sector is `[0, gain·(upper − lower)]`.
    Scheduled { companion: usize, gain: f64, lower: f64, upper: f64 },
    Custom(fn(f64) -> f64),
}

/// A scalar nonlinearity with its sector slope bound `σ`:
/// `φ(s)·[s − φ(s)/σ] ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorNonlinearity {
    pub kind: NonlinearityKind,
    pub sigma: f64,
}

impl SectorNonlinearity {
    pub fn new(kind: NonlinearityKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sector bound must be positive and finite, got {sigma}")));
        }
        Ok(SectorNonlinearity { kind, sigma })
    }

    pub fn saturation(limit: f64) -> Self {
        SectorNonlinearity { kind: NonlinearityKind::Saturation { limit }, sigma: 1.0 }
    }

    pub fn tanh(scale: f64) -> Self {
        SectorNonlinearity { kind: NonlinearityKind::Tanh { scale }, sigma: scale }
    }

    pub fn linear(slope: f64) -> Self {
        SectorNonlinearity { kind: NonlinearityKind::Linear { slope }, sigma: slope.abs().max(f64::MIN_POSITIVE) }
    }

    /// Evaluates `φ(s)`; `state` supplies the companion of scheduled kinds.
    pub fn eval(&self, s: f64, state: &[f64]) -> Result<f64> {
        if !s.is_finite() {
            return Err(Error::Numeric("nonlinearity argument".into()));
        }
        let v = match self.kind {
            NonlinearityKind::Saturation { limit } => s.clamp(-limit, limit),
            NonlinearityKind::Tanh { scale } => libm::tanh(scale * s),
            NonlinearityKind::DeadZone { width } => {
                if s > width {
                    s - width
                } else if s < -width {
                    s + width
                } else {
                    0.0
                }
            }
            NonlinearityKind::Relay { level } => {
                if s > 0.0 {
                    level
                } else if s < 0.0 {
                    -level
                } else {
                    0.0
                }
            }
            NonlinearityKind::Linear { slope } => slope * s,
            NonlinearityKind::Scheduled { companion, gain, lower, upper } => {
                let c = *state
                    .get(companion)
                    .ok_or_else(|| dim_err(format!("scheduled nonlinearity needs state index {companion}")))?;
                gain * (c.clamp(lower, upper) - lower) * s
            }
            NonlinearityKind::Custom(f) => f(s),
        };
        if !v.is_finite() {
            return Err(Error::Numeric("nonlinearity value".into()));
        }
        Ok(v)
    }

    /// `∂φ/∂s` at fixed state context (one-sided choices at kinks).
    pub fn derivative(&self, s: f64, state: &[f64]) -> Result<f64> {
        Ok(match self.kind {
            NonlinearityKind::Saturation { limit } => f64::from(u8::from(s.abs() < limit)),
            NonlinearityKind::Tanh { scale } => {
                let t = libm::tanh(scale * s);
                scale * (1.0 - t * t)
            }
            NonlinearityKind::DeadZone { width } => f64::from(u8::from(s.abs() > width)),
            NonlinearityKind::Relay { .. } => 0.0,
            NonlinearityKind::Linear { slope } => slope,
            NonlinearityKind::Scheduled { companion, gain, lower, upper } => {
                let c = *state.get(companion).ok_or_else(|| dim_err("scheduled companion index"))?;
                gain * (c.clamp(lower, upper) - lower)
            }
            NonlinearityKind::Custom(f) => {
                let h = 1e-6 * (1.0 + s.abs());
                (f(s + h) - f(s - h)) / (2.0 * h)
            }
        })
    }

    /// `(index, ∂φ/∂x[index])` for the companion factor of scheduled kinds.
    pub fn companion_partial(&self, s: f64, state: &[f64]) -> Option<(usize, f64)> {
        match self.kind {
            NonlinearityKind::Scheduled { companion, gain, lower, upper } => {
                let c = *state.get(companion)?;
                Some((companion, if c > lower && c < upper { gain * s } else { 0.0 }))
            }
            _ => None,
        }
    }

    /// The sector product `φ(s)·[s − φ(s)/σ]`.
    pub fn sector_product(&self, s: f64, state: &[f64]) -> Result<f64> {
        let p = self.eval(s, state)?;
        Ok(p * (s - p / self.sigma))
    }

    /// Whether `φ(a) − φ(b)` obeys the same sector (monotone, σ-Lipschitz kinds).
    pub fn is_incrementally_sector_bounded(&self) -> bool {
        !matches!(self.kind, NonlinearityKind::Relay { .. } | NonlinearityKind::Custom(_))
    }
}

/// `φ(s)` for kinds that need no state context.
pub fn eval_nonlinearity(nl: &SectorNonlinearity, s: f64) -> Result<f64> {
    nl.eval(s, &[])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorCheck {
    pub pass: bool,
    /// Minimum of the sector product over the grid.
    pub worst: f64,
    pub worst_at: f64,
}

/// Grid check of the sector inequality on `[lo, hi]`.
pub fn verify_sector(nl: &SectorNonlinearity, s_range: (f64, f64), n_samples: usize) -> Result<SectorCheck> {
    verify_sector_in(nl, s_range, n_samples, &[])
}

/// As [`verify_sector`] with a fixed state context for scheduled kinds.
pub fn verify_sector_in(nl: &SectorNonlinearity, s_range: (f64, f64), n_samples: usize, state: &[f64]) -> Result<SectorCheck> {
    if n_samples < 2 {
        return Err(Error::Config("verify_sector needs at least two samples".into()));
    }
    let (lo, hi) = s_range;
    let mut worst = f64::INFINITY;
    let mut worst_at = lo;
    for i in 0..n_samples {
        let s = lo + (hi - lo) * (i as f64) / ((n_samples - 1) as f64);
        let v = nl.sector_product(s, state)?;
        if v < worst {
            worst = v;
            worst_at = s;
        }
    }
    Ok(SectorCheck { pass: worst >= -SECTOR_TOL, worst, worst_at })
}

/// `ẋ = A x − B φ(C x(t−τ)) + D w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersidskiiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub tau: f64,
    pub nonlinearities: Vec<SectorNonlinearity>,
}

impl PersidskiiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        tau: f64,
        nonlinearities: Vec<SectorNonlinearity>,
    ) -> Result<Self> {
        let n = a.nrows();
        let k = nonlinearities.len();
        if a.ncols() != n || n == 0 {
            return Err(dim_err(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() != k {
            return Err(dim_err(format!("B must be {n}x{k}, got {}x{}", b.nrows(), b.ncols())));
        }
        if c.nrows() != k || c.ncols() != n {
            return Err(dim_err(format!("C must be {k}x{n}, got {}x{}", c.nrows(), c.ncols())));
        }
        if d.nrows() != n {
            return Err(dim_err(format!("D must have {n} rows, got {}", d.nrows())));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("delay must be finite and non-negative, got {tau}")));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&a) && finite(&b) && finite(&c) && finite(&d)) {
            return Err(Error::Numeric("system matrices".into()));
        }
        Ok(PersidskiiSystem { a, b, c, d, tau, nonlinearities })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn k(&self) -> usize {
        self.nonlinearities.len()
    }

    pub fn m(&self) -> usize {
        self.d.ncols()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.nonlinearities.iter().map(|nl| nl.sigma).collect()
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.tau = tau;
        s
    }

    pub fn with_a(&self, a: DMatrix<f64>) -> Self {
        let mut s = self.clone();
        s.a = a;
        s
    }

    pub fn with_d(&self, d: DMatrix<f64>) -> Self {
        let mut s = self.clone();
        s.d = d;
        s
    }

    /// `∂φ(Cx; x)/∂x`, a k×n matrix.
    pub fn phi_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let s = &self.c * x;
        let mut j = DMatrix::zeros(self.k(), self.n());
        for (i, nl) in self.nonlinearities.iter().enumerate() {
            let d = nl.derivative(s[i], x.as_slice())?;
            for col in 0..self.n() {
                j[(i, col)] = d * self.c[(i, col)];
            }
            if let Some((c, p)) = nl.companion_partial(s[i], x.as_slice()) {
                j[(i, c)] += p;
            }
        }
        Ok(j)
    }

    /// `φ(C x)` with the scheduled companions read from `x`.
    pub fn phi(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let s = &self.c * x;
        let mut out = DVector::zeros(self.k());
        for (i, nl) in self.nonlinearities.iter().enumerate() {
            out[i] = nl.eval(s[i], x.as_slice())?;
        }
        Ok(out)
    }
}

/// Right-hand side of the delayed dynamics.
pub fn rhs(sys: &PersidskiiSystem, x_now: &DVector<f64>, x_delayed: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.n();
    if x_now.len() != n || x_delayed.len() != n || w.len() != sys.m() {
        return Err(dim_err(format!(
            "rhs expects states of length {n} and disturbance of length {}, got {}/{}/{}",
            sys.m(),
            x_now.len(),
            x_delayed.len(),
            w.len()
        )));
    }
    let mut dx = &sys.a * x_now;
    if sys.k() > 0 {
        dx -= &sys.b * sys.phi(x_delayed)?;
    }
    if sys.m() > 0 {
        dx += &sys.d * w;
    }
    Ok(dx)
}

pub type HistoryFn = Box<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Uniformly sampled state history with stored derivatives so that delayed
/// states are interpolated by cubic Hermite polynomials. Times at or before
/// the start are served by the initial function.
pub struct HistoryBuffer {
    initial: HistoryFn,
    t_start: f64,
    dt: f64,
    /// Index of the oldest retained sample relative to `t_start`.
    offset: usize,
    states: VecDeque<DVector<f64>>,
    derivs: VecDeque<Option<DVector<f64>>>,
    window: f64,
}

impl HistoryBuffer {
    /// `window` is the span that must stay available behind the newest sample.
    pub fn new(initial: HistoryFn, t_start: f64, dt: f64, window: f64) -> Self {
        let x0 = initial(t_start);
        let mut states = VecDeque::new();
        states.push_back(x0);
        let mut derivs = VecDeque::new();
        derivs.push_back(None);
        HistoryBuffer { initial, t_start, dt, offset: 0, states, derivs, window }
    }

    pub fn constant(x0: DVector<f64>, t_start: f64, dt: f64, window: f64) -> Self {
        Self::new(Box::new(move |_| x0.clone()), t_start, dt, window)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_now(&self) -> f64 {
        self.t_start + ((self.offset + self.states.len() - 1) as f64) * self.dt
    }

    pub fn latest(&self) -> &DVector<f64> {
        self.states.back().expect("history is never empty")
    }

    /// Earliest time served from stored samples.
    pub fn t_oldest(&self) -> f64 {
        self.t_start + (self.offset as f64) * self.dt
    }

    pub fn set_latest_derivative(&mut self, d: DVector<f64>) {
        *self.derivs.back_mut().expect("history is never empty") = Some(d);
    }

    pub fn push(&mut self, x: DVector<f64>) {
        self.states.push_back(x);
        self.derivs.push_back(None);
        let keep = (libm::ceil(self.window / self.dt) as usize) + 3;
        while self.states.len() > keep {
            self.states.pop_front();
            self.derivs.pop_front();
            self.offset += 1;
        }
    }

    /// State at time `s ≤ t_now`.
    pub fn at(&self, s: f64) -> Result<DVector<f64>> {
        if s <= self.t_start {
            return Ok((self.initial)(s));
        }
        let t_now = self.t_now();
        if s > t_now + 1e-12 * (1.0 + t_now.abs()) {
            return Err(Error::Coverage(format!("requested t = {s} beyond newest sample {t_now}")));
        }
        let rel = (s - self.t_start) / self.dt;
        let mut i = libm::floor(rel) as usize;
        if i < self.offset {
            return Err(Error::Coverage(format!("requested t = {s} older than retained window")));
        }
        let last = self.offset + self.states.len() - 1;
        if i >= last {
            i = last.saturating_sub(1).max(self.offset);
            if last == self.offset {
                return Ok(self.latest().clone());
            }
        }
        let th = (rel - i as f64).clamp(0.0, 1.0);
        let j = i - self.offset;
        let x0 = &self.states[j];
        let x1 = &self.states[j + 1];
        match (&self.derivs[j], &self.derivs[j + 1]) {
            (Some(f0), Some(f1)) => {
                let h = self.dt;
                let t2 = th * th;
                let t3 = t2 * th;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + th;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                Ok(x0 * h00 + f0 * (h10 * h) + x1 * h01 + f1 * (h11 * h))
            }
            _ => Ok(x0 * (1.0 - th) + x1 * th),
        }
    }
}

/// Uniformly sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(dim_err("times and states differ in length"));
        }
        if let Some(u) = &self.inputs {
            if u.len() != self.times.len() {
                return Err(dim_err("inputs and times differ in length"));
            }
        }
        if self.times.len() >= 2 {
            let h = self.times[1] - self.times[0];
            for w in self.times.windows(2) {
                let d = w[1] - w[0];
                if d <= 0.0 {
                    return Err(Error::Structure("times must be strictly increasing".into()));
                }
                // absolute slack covers the rounding of i·dt sample times
                if (d - h).abs() > 1e-12 * h.abs().max(1.0) + 1e-9 * h.abs() {
                    return Err(Error::Structure("sampling step is not uniform".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }
}

/// One RK4 step from the newest sample of `hist`. `f(c, x, x_delayed)` is
/// evaluated at stage offsets `c ∈ {0, ½, 1}` (in units of `dt`); with
/// `tau = 0` the delayed argument is the stage state itself. Stores the first
/// stage as the derivative of the newest sample; the caller pushes the
/// returned state.
pub fn rk4_step(
    hist: &mut HistoryBuffer,
    tau: f64,
    dt: f64,
    f: &dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DVector<f64>> {
    let t = hist.t_now();
    let delayed = |hist: &HistoryBuffer, c: f64, x_stage: &DVector<f64>| -> Result<DVector<f64>> {
        if tau == 0.0 {
            Ok(x_stage.clone())
        } else {
            hist.at(t + c * dt - tau)
        }
    };
    let x = hist.latest().clone();
    let k1 = f(0.0, &x, &delayed(hist, 0.0, &x)?)?;
    hist.set_latest_derivative(k1.clone());
    let x2 = &x + &k1 * (0.5 * dt);
    let k2 = f(0.5, &x2, &delayed(hist, 0.5, &x2)?)?;
    let x3 = &x + &k2 * (0.5 * dt);
    let k3 = f(0.5, &x3, &delayed(hist, 0.5, &x3)?)?;
    let x4 = &x + &k3 * dt;
    let k4 = f(1.0, &x4, &delayed(hist, 1.0, &x4)?)?;
    Ok(&x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0))
}

/// Fixed-step RK4 integration of the delayed dynamics with Hermite-interpolated
/// history. `tau` must be zero or at least one step.
pub fn simulate(
    sys: &PersidskiiSystem,
    history: HistoryFn,
    w: &dyn Fn(f64) -> DVector<f64>,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::Config(format!("simulate needs dt > 0 and t_end > 0, got dt={dt}, t_end={t_end}")));
    }
    let tau = sys.tau;
    if tau > 0.0 && tau < dt * (1.0 - 1e-9) {
        return Err(Error::Config(format!("delay {tau} shorter than the step {dt}; use tau = 0 or a smaller step")));
    }
    let steps = libm::round(t_end / dt) as usize;
    let mut buf = HistoryBuffer::new(history, 0.0, dt, tau + dt);
    let x0 = buf.latest().clone();
    if x0.len() != sys.n() {
        return Err(dim_err("history dimension differs from the system"));
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0);
    inputs.push(w(0.0));
    for i in 0..steps {
        let t = (i as f64) * dt;
        let xn = rk4_step(&mut buf, tau, dt, &|c, x, xd| rhs(sys, x, xd, &w(t + c * dt)))?;
        if !(xn.norm() <= BLOWUP_GUARD) {
            return Err(Error::Divergence { last_valid_time: t, guard: BLOWUP_GUARD });
        }
        let tn = ((i + 1) as f64) * dt;
        buf.push(xn.clone());
        times.push(tn);
        states.push(xn);
        inputs.push(w(tn));
    }
    Ok(Trajectory { times, states, inputs: Some(inputs) })
}
