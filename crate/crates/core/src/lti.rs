//! Linear time-invariant latent dynamics `ẋ = A x + B u`, `y = C x`.
//!
//! Time is measured in microseconds everywhere; `A` therefore carries units of
//! 1/µs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix_exponential;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixSlot {
    A,
    B,
    C,
}

/// Binds one free parameter to one entry of `A`, `B` or `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiBinding {
    pub name: String,
    pub matrix: MatrixSlot,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    bindings: Vec<PhiBinding>,
    phi: Vec<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "LtiSystem A",
                "square",
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        let n = a.nrows();
        if b.nrows() != n {
            return Err(Error::dims("LtiSystem B rows", n, b.nrows()));
        }
        if c.ncols() != n {
            return Err(Error::dims("LtiSystem C cols", n, c.ncols()));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "system matrices must be finite".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            c,
            bindings: Vec::new(),
            phi: Vec::new(),
        })
    }

    /// Attaches free parameters; their current values are read from the matrices.
    pub fn with_bindings(mut self, bindings: Vec<PhiBinding>) -> Result<Self> {
        let mut phi = Vec::with_capacity(bindings.len());
        for binding in &bindings {
            let m = self.slot(binding.matrix);
            if binding.row >= m.nrows() || binding.col >= m.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "binding {} points outside {:?} ({}x{})",
                    binding.name,
                    binding.matrix,
                    m.nrows(),
                    m.ncols()
                )));
            }
            phi.push(m[(binding.row, binding.col)]);
        }
        self.bindings = bindings;
        self.phi = phi;
        Ok(self)
    }

    fn slot(&self, slot: MatrixSlot) -> &DMatrix<f64> {
        match slot {
            MatrixSlot::A => &self.a,
            MatrixSlot::B => &self.b,
            MatrixSlot::C => &self.c,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn bindings(&self) -> &[PhiBinding] {
        &self.bindings
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Writes `values` into the bound matrix entries.
    pub fn set_phi(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.bindings.len() {
            return Err(Error::dims("phi", self.bindings.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("phi must be finite".into()));
        }
        for (binding, &v) in self.bindings.iter().zip(values) {
            let m = match binding.matrix {
                MatrixSlot::A => &mut self.a,
                MatrixSlot::B => &mut self.b,
                MatrixSlot::C => &mut self.c,
            };
            m[(binding.row, binding.col)] = v;
        }
        self.phi = values.to_vec();
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SystemFile::from(self)).expect("system serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemFile =
            serde_json::from_str(text).map_err(|e| Error::format("system file", e))?;
        file.try_into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    #[serde(default)]
    phi: Vec<PhiEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhiEntry {
    name: String,
    matrix: MatrixSlot,
    row: usize,
    col: usize,
    value: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::format("system file", format!("ragged rows in {name}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl From<&LtiSystem> for SystemFile {
    fn from(sys: &LtiSystem) -> Self {
        Self {
            a: rows_of(&sys.a),
            b: rows_of(&sys.b),
            c: rows_of(&sys.c),
            phi: sys
                .bindings
                .iter()
                .zip(&sys.phi)
                .map(|(b, &value)| PhiEntry {
                    name: b.name.clone(),
                    matrix: b.matrix,
                    row: b.row,
                    col: b.col,
                    value,
                })
                .collect(),
        }
    }
}

impl TryFrom<SystemFile> for LtiSystem {
    type Error = Error;

    fn try_from(file: SystemFile) -> Result<Self> {
        let sys = LtiSystem::new(
            matrix_from_rows("a", &file.a)?,
            matrix_from_rows("b", &file.b)?,
            matrix_from_rows("c", &file.c)?,
        )?;
        let values: Vec<f64> = file.phi.iter().map(|p| p.value).collect();
        let bindings = file
            .phi
            .into_iter()
            .map(|p| PhiBinding {
                name: p.name,
                matrix: p.matrix,
                row: p.row,
                col: p.col,
            })
            .collect();
        let mut sys = sys.with_bindings(bindings)?;
        sys.set_phi(&values)?;
        Ok(sys)
    }
}

/// `G(t, t') = C e^{A (t - t')} B`, a `p x m` matrix.
pub fn greens_function(sys: &LtiSystem, t: f64, t_prime: f64) -> Result<DMatrix<f64>> {
    if t < t_prime {
        return Err(Error::Causality { t, t_prime });
    }
    greens_lag(sys, t - t_prime)
}

pub(crate) fn greens_lag(sys: &LtiSystem, lag: f64) -> Result<DMatrix<f64>> {
    Ok(&sys.c * matrix_exponential(&sys.a, lag)? * &sys.b)
}

/// Zero-order-hold discretization over a step `h`: `(e^{A h}, ∫₀ʰ e^{A s} ds B)`.
pub fn zoh_discretize(sys: &LtiSystem, h: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    aug.view_mut((0, n), (n, m)).copy_from(&sys.b);
    let e = matrix_exponential(&aug, h)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Piecewise-constant input: column `k` holds `u` on `[start + k·step, start + (k+1)·step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInput {
    pub start: f64,
    pub step: f64,
    pub values: DMatrix<f64>,
}

impl SampledInput {
    pub fn new(start: f64, step: f64, values: DMatrix<f64>) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() || !start.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "input grid needs finite start and positive step, got {start}, {step}"
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidGrid("input has no samples".into()));
        }
        Ok(Self {
            start,
            step,
            values,
        })
    }

    pub fn constant(start: f64, step: f64, samples: usize, u: &[f64]) -> Result<Self> {
        let col = DVector::from_column_slice(u);
        let values = DMatrix::from_fn(u.len(), samples, |i, _| col[i]);
        Self::new(start, step, values)
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn end(&self) -> f64 {
        self.start + self.step * self.samples() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + self.step * k as f64
    }

    /// The same input restricted to samples `k..`.
    pub fn tail(&self, k: usize) -> Result<Self> {
        if k >= self.samples() {
            return Err(Error::InvalidGrid(format!(
                "cannot split input of {} samples at {k}",
                self.samples()
            )));
        }
        Self::new(
            self.time(k),
            self.step,
            self.values.columns(k, self.samples() - k).into_owned(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.values.shape() != other.values.shape()
            || self.start != other.start
            || self.step != other.step
        {
            return Err(Error::InvalidGrid("inputs live on different grids".into()));
        }
        Self::new(self.start, self.step, &self.values + &other.values)
    }
}

/// States and outputs of an LTI system on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    /// `n x T`, one column per time.
    pub states: DMatrix<f64>,
    /// `p x T`, `outputs = C states`.
    pub outputs: DMatrix<f64>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_at(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }
}

fn check_state(sys: &LtiSystem, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != sys.state_dim() {
        return Err(Error::dims("initial state", sys.state_dim(), x0.len()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state must be finite".into()));
    }
    Ok(())
}

fn check_input(sys: &LtiSystem, input: &SampledInput) -> Result<()> {
    if input.values.nrows() != sys.input_dim() {
        return Err(Error::dims("input rows", sys.input_dim(), input.values.nrows()));
    }
    Ok(())
}

/// State at every fine-grid point `start + k·step`, `k = 0..=samples`.
pub fn simulate_fine(
    sys: &LtiSystem,
    input: &SampledInput,
    x0: &DVector<f64>,
) -> Result<LatentTrajectory> {
    check_state(sys, x0)?;
    check_input(sys, input)?;
    let (phi, gamma) = zoh_discretize(sys, input.step)?;
    let k = input.samples();
    let mut states = DMatrix::zeros(sys.state_dim(), k + 1);
    states.set_column(0, x0);
    let mut x = x0.clone();
    for j in 0..k {
        x = &phi * &x + &gamma * input.values.column(j);
        states.set_column(j + 1, &x);
    }
    let outputs = &sys.c * &states;
    Ok(LatentTrajectory {
        times: (0..=k).map(|j| input.time(j)).collect(),
        states,
        outputs,
    })
}

/// Exact zero-order-hold response sampled at `times`.
///
/// The input grid must be at least ten times finer than the output grid.
pub fn simulate(
    sys: &LtiSystem,
    input: &SampledInput,
    x0: &DVector<f64>,
    times: &[f64],
) -> Result<LatentTrajectory> {
    check_state(sys, x0)?;
    check_input(sys, input)?;
    if times.is_empty() {
        return Err(Error::InvalidGrid("empty output grid".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("output times must be finite".into()));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!(
            "output times not strictly increasing at {} -> {}",
            w[0], w[1]
        )));
    }
    let slack = 1e-9 * input.step;
    let min_spacing = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if min_spacing.is_finite() && min_spacing < 10.0 * input.step - slack {
        return Err(Error::InvalidGrid(format!(
            "input step {} is not 10x finer than output spacing {min_spacing}",
            input.step
        )));
    }
    if times[0] < input.start - slack || times[times.len() - 1] > input.end() + slack {
        return Err(Error::InvalidGrid(format!(
            "output grid [{}, {}] leaves input span [{}, {}]",
            times[0],
            times[times.len() - 1],
            input.start,
            input.end()
        )));
    }

    let (phi, gamma) = zoh_discretize(sys, input.step)?;
    let mut states = DMatrix::zeros(sys.state_dim(), times.len());
    let mut x = x0.clone();
    let mut k = 0usize;
    for (col, &t) in times.iter().enumerate() {
        // Advance whole steps while the next grid point is not past t.
        while k < input.samples() && input.time(k + 1) <= t + slack {
            x = &phi * &x + &gamma * input.values.column(k);
            k += 1;
        }
        let rem = t - input.time(k);
        let out = if rem > slack && k < input.samples() {
            let (phi_r, gamma_r) = zoh_discretize(sys, rem)?;
            &phi_r * &x + &gamma_r * input.values.column(k)
        } else {
            x.clone()
        };
        states.set_column(col, &out);
    }
    let outputs = &sys.c * &states;
    Ok(LatentTrajectory {
        times: times.to_vec(),
        states,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrator() -> LtiSystem {
        LtiSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn oscillator() -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.09, -0.012]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn integrator_greens_function_is_one() {
        let sys = integrator();
        for (t, tp) in [(0.0, 0.0), (3.0, 1.0), (50.0, 0.5)] {
            assert_eq!(greens_function(&sys, t, tp).unwrap()[(0, 0)], 1.0);
        }
    }

    #[test]
    fn greens_at_zero_lag_is_cb() {
        let sys = oscillator();
        let g = greens_function(&sys, 4.2, 4.2).unwrap();
        assert_eq!(g, sys.c() * sys.b());
    }

    #[test]
    fn greens_rejects_acausal_pairs() {
        let sys = oscillator();
        assert!(matches!(
            greens_function(&sys, 1.0, 1.5),
            Err(Error::Causality { .. })
        ));
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let err = LtiSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(1, 2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn unforced_zero_state_stays_zero() {
        let sys = oscillator();
        let u = SampledInput::constant(0.0, 0.1, 300, &[0.0]).unwrap();
        let times: Vec<f64> = (1..=30).map(f64::from).collect();
        let traj = simulate(&sys, &u, &DVector::zeros(2), &times).unwrap();
        assert!(traj.outputs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrator_ramp() {
        let sys = integrator();
        let u = SampledInput::constant(0.0, 0.1, 300, &[1.0]).unwrap();
        let times: Vec<f64> = (0..=30).map(f64::from).collect();
        let traj = simulate(&sys, &u, &DVector::zeros(1), &times).unwrap();
        for (k, &t) in times.iter().enumerate() {
            assert!((traj.outputs[(0, k)] - t).abs() < 1e-9);
        }
    }

    #[test]
    fn off_grid_output_times() {
        let sys = integrator();
        let u = SampledInput::constant(0.0, 0.1, 100, &[2.0]).unwrap();
        let traj = simulate(&sys, &u, &DVector::zeros(1), &[1.234, 5.0]).unwrap();
        assert!((traj.outputs[(0, 0)] - 2.468).abs() < 1e-12);
        assert!((traj.outputs[(0, 1)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn grid_errors() {
        let sys = integrator();
        let u = SampledInput::constant(0.0, 0.1, 100, &[1.0]).unwrap();
        let x0 = DVector::zeros(1);
        assert!(matches!(
            simulate(&sys, &u, &x0, &[2.0, 1.0]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(matches!(
            simulate(&sys, &u, &x0, &[1.0, 1.5]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(matches!(
            simulate(&sys, &u, &x0, &[5.0, 20.0]),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn phi_binding_round_trip() {
        let sys = oscillator()
            .with_bindings(vec![PhiBinding {
                name: "stiffness".into(),
                matrix: MatrixSlot::A,
                row: 1,
                col: 0,
            }])
            .unwrap();
        assert_eq!(sys.phi(), &[-0.09]);
        let mut sys2 = sys.clone();
        sys2.set_phi(&[-0.25]).unwrap();
        assert_eq!(sys2.a()[(1, 0)], -0.25);
        let once = sys2.clone();
        sys2.set_phi(&[-0.25]).unwrap();
        assert_eq!(once, sys2);

        let parsed = LtiSystem::from_json(&sys2.to_json()).unwrap();
        assert_eq!(parsed, sys2);
    }

    #[test]
    fn system_file_rejects_unknown_keys() {
        let text = r#"{"a": [[0.0]], "b": [[1.0]], "c": [[1.0]], "d": 3}"#;
        assert!(matches!(LtiSystem::from_json(text), Err(Error::Format { .. })));
    }
}
