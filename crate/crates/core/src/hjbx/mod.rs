//! The extended HJB system: residual checks for a candidate quadruple
//! `(ū, V, f, g)` and an explicit policy-iteration solver.
//!
//! In the general case (running payoff or time-dependent `F`, `G`) the
//! auxiliary function `f^{s,y}(t, x)` carries a reference time `s`. It is
//! stored as one family per time node `s = t_j`, each tabulated on the full
//! `(t, x, y)` lattice; slices with `t < s` are never read by the residuals
//! and hold copies of the `s` slice.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grids::{FeedbackControl, GridFunction, GridSpec};
use crate::model::ProblemSpec;

mod residual;
mod solver;
mod standard;

pub use residual::{
    hamiltonian, hjb_step_residual, kolmogorov_residual, reduced_hamiltonian, residual_report,
    ArgmaxViolation, BoundaryResiduals, CheckLine, HjbStep, KolmogorovResiduals, NormSummary,
    ResidualReport, ResidualThresholds, BOUNDARY_BAND, TIE_TOLERANCE,
};
pub use solver::{
    solve_extended_hjb, solve_kolmogorov, solve_standard_hjb, stable_dt, ConvergenceLog, Solution,
    SolverOptions, SweepLog, TimeScheme,
};
pub use standard::{standard_hjb_residual, StandardHjbReport};

/// Tabulated auxiliary function `f`.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxTable {
    /// `f(t, x, y)` without a reference time.
    Shared(GridFunction),
    /// `f^{t_j, y}(t, x)` for every time node `t_j`.
    PerReference(Vec<GridFunction>),
}

impl AuxTable {
    /// Family for the reference time node `j`.
    pub fn family(&self, j: usize) -> &GridFunction {
        match self {
            AuxTable::Shared(f) => f,
            AuxTable::PerReference(fs) => &fs[j],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.family(0).grid()
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, AuxTable::Shared(_))
    }

    /// `f(t_k, x_i, t_k, x_i)` on the `(t, x)` lattice.
    pub fn diagonal(&self) -> Result<GridFunction> {
        let grid = self.grid();
        if !grid.has_diagonal_y() {
            return Err(Error::domain(
                "f needs a y lattice identical to the x lattice",
            ));
        }
        let nx = grid.x.size();
        let mut values = Vec::with_capacity(grid.t.len() * nx);
        for k in 0..grid.t.len() {
            let fam = self.family(k);
            for i in 0..nx {
                values.push(fam.at(k, i, i, 0));
            }
        }
        GridFunction::from_values(grid.space_time(), 1, values)
    }

    /// Families together with the first time node each one is read at.
    pub fn families(&self) -> Vec<(usize, &GridFunction)> {
        match self {
            AuxTable::Shared(f) => vec![(0, f)],
            AuxTable::PerReference(fs) => fs.iter().enumerate().collect(),
        }
    }
}

/// Candidate `(ū, V, f, g)` tabulated on a common lattice.
#[derive(Debug, Clone)]
pub struct CandidateQuadruple {
    pub control: FeedbackControl,
    pub v: GridFunction,
    pub f: AuxTable,
    pub g: GridFunction,
}

impl CandidateQuadruple {
    /// Checks that `V`, `f` and `g` live on compatible lattices for `spec`.
    pub fn check(&self, spec: &ProblemSpec) -> Result<()> {
        let n = spec.dim_state();
        let fg = self.f.grid();
        if !fg.has_diagonal_y() {
            return Err(Error::domain(
                "f needs a y lattice identical to the x lattice",
            ));
        }
        let st = fg.space_time();
        if *self.v.grid() != st || *self.g.grid() != st {
            return Err(Error::domain("V, f and g live on different lattices"));
        }
        if self.v.arity() != 1 || self.g.arity() != n || self.f.family(0).arity() != 1 {
            return Err(Error::domain(
                "V and f must be scalar and g must have arity n",
            ));
        }
        if fg.dim() != n {
            return Err(Error::domain(
                "lattice dimension differs from the state dimension",
            ));
        }
        if self.control.dim() != spec.dim_control() {
            return Err(Error::domain("control dimension differs from dim U"));
        }
        match &self.f {
            AuxTable::Shared(_) if spec.is_general() => Err(Error::domain(
                "the problem has a reference time; f must be tabulated per reference",
            )),
            AuxTable::PerReference(fs) => {
                if fs.len() != fg.t.len() || fs.iter().any(|f| f.grid() != fg || f.arity() != 1) {
                    return Err(Error::domain(
                        "f needs one family per time node on a common lattice",
                    ));
                }
                Ok(())
            }
            AuxTable::Shared(_) => Ok(()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.f.grid()
    }

    /// Writes `V.csv`, `g.csv`, `control.csv` and `f.csv` (or `f_s<j>.csv`
    /// per reference time node) into `dir`.
    pub fn write_csv_dir(&self, dir: &Path, control_table: Option<&GridFunction>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.v
            .write_csv(std::fs::File::create(dir.join("V.csv"))?)?;
        self.g
            .write_csv(std::fs::File::create(dir.join("g.csv"))?)?;
        match &self.f {
            AuxTable::Shared(f) => f.write_csv(std::fs::File::create(dir.join("f.csv"))?)?,
            AuxTable::PerReference(fs) => {
                for (j, f) in fs.iter().enumerate() {
                    f.write_csv(std::fs::File::create(dir.join(format!("f_s{j}.csv")))?)?;
                }
            }
        }
        if let Some(c) = control_table {
            c.write_csv(std::fs::File::create(dir.join("control.csv"))?)?;
        }
        Ok(())
    }

    /// Reads the files written by [`write_csv_dir`](Self::write_csv_dir).
    /// Without `control.csv` the control is taken from `fallback`.
    pub fn read_csv_dir(
        dir: &Path,
        spec: &ProblemSpec,
        fallback: Option<FeedbackControl>,
    ) -> Result<Self> {
        let open = |name: &str| -> Result<std::fs::File> {
            std::fs::File::open(dir.join(name)).map_err(|e| {
                Error::Format(format!("cannot open {}: {e}", dir.join(name).display()))
            })
        };
        let v = GridFunction::read_csv(open("V.csv")?)?;
        let g = GridFunction::read_csv(open("g.csv")?)?;
        let f = if dir.join("f.csv").exists() {
            AuxTable::Shared(GridFunction::read_csv(open("f.csv")?)?)
        } else {
            let mut fs = Vec::new();
            while dir.join(format!("f_s{}.csv", fs.len())).exists() {
                fs.push(GridFunction::read_csv(open(&format!(
                    "f_s{}.csv",
                    fs.len()
                ))?)?);
            }
            if fs.is_empty() {
                return Err(Error::Format(format!("no f.csv in {}", dir.display())));
            }
            AuxTable::PerReference(fs)
        };
        let control = if dir.join("control.csv").exists() {
            FeedbackControl::tabulated(
                GridFunction::read_csv(open("control.csv")?)?,
                &spec.controls,
            )?
        } else {
            fallback.ok_or_else(|| Error::Format(format!("no control.csv in {}", dir.display())))?
        };
        let cand = CandidateQuadruple { control, v, f, g };
        cand.check(spec)?;
        Ok(cand)
    }
}

type ValueFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type AuxFn = dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync;
type VectorFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Candidate given by closed-form expressions: `V(t, x)`, `f(t, x, s, y)`
/// and `g(t, x)`.
#[derive(Clone)]
pub struct ClosedFormQuadruple {
    pub control: FeedbackControl,
    pub v: Arc<ValueFn>,
    pub f: Arc<AuxFn>,
    pub g: Arc<VectorFn>,
}

impl ClosedFormQuadruple {
    pub fn new<V, F, G>(control: FeedbackControl, v: V, f: F, g: G) -> Self
    where
        V: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        F: Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ClosedFormQuadruple {
            control,
            v: Arc::new(v),
            f: Arc::new(f),
            g: Arc::new(g),
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.v)(t, x)
    }

    pub fn aux(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> f64 {
        (self.f)(t, x, s, y)
    }

    pub fn mean(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        (self.g)(t, x, &mut out);
        out
    }

    /// Tabulates the closed form on `grid` (with `y` set to the `x`
    /// lattice). General problems get one `f` family per time node.
    pub fn tabulate(&self, spec: &ProblemSpec, grid: &GridSpec) -> Result<CandidateQuadruple> {
        let grid = grid.with_diagonal_y();
        let st = grid.space_time();
        let n = grid.dim();
        let v = GridFunction::from_fn(st.clone(), 1, |t, x, _, o| {
            o[0] = (self.v)(t, x);
            Ok(())
        })?;
        let g = GridFunction::from_fn(st, n, |t, x, _, o| {
            (self.g)(t, x, o);
            Ok(())
        })?;
        let f = if spec.is_general() {
            let fams = (0..grid.t.len())
                .map(|j| {
                    let s = grid.t.node(j);
                    GridFunction::from_fn(grid.clone(), 1, |t, x, y, o| {
                        o[0] = (self.f)(t.max(s), x, s, y.expect("y lattice"));
                        Ok(())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            AuxTable::PerReference(fams)
        } else {
            AuxTable::Shared(GridFunction::from_fn(grid.clone(), 1, |t, x, y, o| {
                o[0] = (self.f)(t, x, t, y.expect("y lattice"));
                Ok(())
            })?)
        };
        let cand = CandidateQuadruple {
            control: self.control.clone(),
            v,
            f,
            g,
        };
        cand.check(spec)?;
        Ok(cand)
    }
}
