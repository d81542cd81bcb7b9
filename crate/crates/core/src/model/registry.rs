//! Name → constructor tables used when loading problems from configs.
//!
//! Built-ins are registered by [`Registry::with_builtins`]; callers can add
//! their own evaluators under new names before loading a config.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};

use super::builtins::{
    ControlSquaredDrift, ControlledDrift, ControlledVolatility, CosineDistance,
    DiscountedControlCost, QuadraticForm, Zero,
};
use super::{Aggregator, Dynamics, RunningPayoff, TerminalPayoff};

pub type Params = Map<String, Value>;

type DynamicsBuilder = dyn Fn(&Params) -> Result<Arc<dyn Dynamics>, String> + Send + Sync;
type TerminalBuilder =
    dyn Fn(&Params, usize) -> Result<Arc<dyn TerminalPayoff>, String> + Send + Sync;
type AggregatorBuilder =
    dyn Fn(&Params, usize) -> Result<Arc<dyn Aggregator>, String> + Send + Sync;
type RunningBuilder =
    dyn Fn(&Params, usize) -> Result<Arc<dyn RunningPayoff>, String> + Send + Sync;

#[derive(Default, Clone)]
pub struct Registry {
    dynamics: BTreeMap<String, Arc<DynamicsBuilder>>,
    terminal: BTreeMap<String, Arc<TerminalBuilder>>,
    aggregator: BTreeMap<String, Arc<AggregatorBuilder>>,
    running: BTreeMap<String, Arc<RunningBuilder>>,
}

/// Deserializes a parameter map into a typed parameter struct.
pub fn parse_params<T: DeserializeOwned>(params: &Params) -> Result<T, String> {
    serde_json::from_value(Value::Object(params.clone())).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SigmaParams {
    sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlledDriftParams {
    gain: Vec<Vec<f64>>,
    #[serde(default)]
    offset: Option<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VolatilityParams {
    drift_gain: f64,
    base_sigma: f64,
    vol_gain: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightParams {
    #[serde(default = "one")]
    weight: f64,
    #[serde(default)]
    rate: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticParams {
    #[serde(default)]
    xx: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    xy: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    yy: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    x: Option<Vec<f64>>,
    #[serde(default)]
    y: Option<Vec<f64>>,
    #[serde(default)]
    constant: f64,
    #[serde(default)]
    rate: f64,
}

impl QuadraticParams {
    fn build(self, n: usize) -> Result<QuadraticForm, String> {
        let zeros = || vec![vec![0.0; n]; n];
        QuadraticForm::new(
            self.xx.unwrap_or_else(zeros),
            self.xy.unwrap_or_else(zeros),
            self.yy.unwrap_or_else(zeros),
            self.x.unwrap_or_else(|| vec![0.0; n]),
            self.y.unwrap_or_else(|| vec![0.0; n]),
            self.constant,
        )
        .map(|q| q.discounted(self.rate))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CosineParams {
    #[serde(default = "one")]
    amplitude: f64,
    #[serde(default = "one")]
    frequency: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Registry::empty();
        r.register_dynamics("regulator", |p| {
            let SigmaParams { sigma } = parse_params(p)?;
            Ok(Arc::new(ControlSquaredDrift { sigma }))
        });
        r.register_dynamics("controlled_drift", |p| {
            let q: ControlledDriftParams = parse_params(p)?;
            let n = q.gain.len();
            let m =
                ControlledDrift::new(q.gain, q.offset.unwrap_or_else(|| vec![0.0; n]), q.sigma)?;
            Ok(Arc::new(m))
        });
        r.register_dynamics("controlled_volatility", |p| {
            let q: VolatilityParams = parse_params(p)?;
            Ok(Arc::new(ControlledVolatility {
                drift_gain: q.drift_gain,
                base_sigma: q.base_sigma,
                vol_gain: q.vol_gain,
            }))
        });

        r.register_terminal("zero", |p, _| {
            let Empty {} = parse_params(p)?;
            Ok(Arc::new(Zero))
        });
        r.register_terminal("squared_distance", |p, n| {
            let w: WeightParams = parse_params(p)?;
            Ok(Arc::new(
                QuadraticForm::squared_distance(n, w.weight).discounted(w.rate),
            ))
        });
        r.register_terminal("quadratic", |p, n| {
            let q: QuadraticParams = parse_params(p)?;
            Ok(Arc::new(q.build(n)?))
        });
        r.register_terminal("cosine", |p, _| {
            let c: CosineParams = parse_params(p)?;
            Ok(Arc::new(CosineDistance {
                amplitude: c.amplitude,
                frequency: c.frequency,
            }))
        });

        r.register_aggregator("zero", |p, _| {
            let Empty {} = parse_params(p)?;
            Ok(Arc::new(Zero))
        });
        r.register_aggregator("quadratic", |p, n| {
            let q: QuadraticParams = parse_params(p)?;
            Ok(Arc::new(q.build(n)?))
        });

        r.register_running("zero", |p, _| {
            let Empty {} = parse_params(p)?;
            Ok(Arc::new(Zero))
        });
        r.register_running("discounted_control_cost", |p, _| {
            let w: WeightParams = parse_params(p)?;
            Ok(Arc::new(DiscountedControlCost {
                weight: w.weight,
                rate: w.rate,
            }))
        });
        r
    }

    pub fn register_dynamics<F>(&mut self, name: &str, build: F)
    where
        F: Fn(&Params) -> Result<Arc<dyn Dynamics>, String> + Send + Sync + 'static,
    {
        self.dynamics.insert(name.to_owned(), Arc::new(build));
    }

    pub fn register_terminal<F>(&mut self, name: &str, build: F)
    where
        F: Fn(&Params, usize) -> Result<Arc<dyn TerminalPayoff>, String> + Send + Sync + 'static,
    {
        self.terminal.insert(name.to_owned(), Arc::new(build));
    }

    pub fn register_aggregator<F>(&mut self, name: &str, build: F)
    where
        F: Fn(&Params, usize) -> Result<Arc<dyn Aggregator>, String> + Send + Sync + 'static,
    {
        self.aggregator.insert(name.to_owned(), Arc::new(build));
    }

    pub fn register_running<F>(&mut self, name: &str, build: F)
    where
        F: Fn(&Params, usize) -> Result<Arc<dyn RunningPayoff>, String> + Send + Sync + 'static,
    {
        self.running.insert(name.to_owned(), Arc::new(build));
    }

    pub fn dynamics(&self, name: &str, params: &Params) -> Result<Arc<dyn Dynamics>, String> {
        let b = self
            .dynamics
            .get(name)
            .ok_or_else(|| format!("unknown dynamics '{name}'"))?;
        b(params).map_err(|e| format!("dynamics '{name}': {e}"))
    }

    pub fn terminal(
        &self,
        name: &str,
        params: &Params,
        n: usize,
    ) -> Result<Arc<dyn TerminalPayoff>, String> {
        let b = self
            .terminal
            .get(name)
            .ok_or_else(|| format!("unknown terminal payoff '{name}'"))?;
        b(params, n).map_err(|e| format!("terminal payoff '{name}': {e}"))
    }

    pub fn aggregator(
        &self,
        name: &str,
        params: &Params,
        n: usize,
    ) -> Result<Arc<dyn Aggregator>, String> {
        let b = self
            .aggregator
            .get(name)
            .ok_or_else(|| format!("unknown aggregator '{name}'"))?;
        b(params, n).map_err(|e| format!("aggregator '{name}': {e}"))
    }

    pub fn running(
        &self,
        name: &str,
        params: &Params,
        n: usize,
    ) -> Result<Arc<dyn RunningPayoff>, String> {
        let b = self
            .running
            .get(name)
            .ok_or_else(|| format!("unknown running payoff '{name}'"))?;
        b(params, n).map_err(|e| format!("running payoff '{name}': {e}"))
    }

    pub fn dynamics_names(&self) -> impl Iterator<Item = &str> {
        self.dynamics.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn params(v: Value) -> Params {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn builtin_regulator_dynamics() {
        let r = Registry::with_builtins();
        let d = r
            .dynamics("regulator", &params(json!({"sigma": 0.5})))
            .unwrap();
        let mut mu = [0.0];
        d.drift(0.0, &[0.0], &[0.5], &mut mu).unwrap();
        assert_eq!(mu, [-0.25]);
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        let r = Registry::with_builtins();
        assert!(r.dynamics("nope", &Params::new()).is_err());
        assert!(r
            .dynamics("regulator", &params(json!({"sigma": 0.5, "extra": 1})))
            .is_err());
    }

    #[test]
    fn custom_registration() {
        let mut r = Registry::with_builtins();
        r.register_terminal("constant_one", |_, _| {
            Ok(Arc::new(super::super::builtins::FnTerminal::new(
                |_, _, _| Ok(1.0),
            )))
        });
        let f = r.terminal("constant_one", &Params::new(), 1).unwrap();
        assert_eq!(f.eval(0.0, &[3.0], &[2.0]).unwrap(), 1.0);
    }
}
