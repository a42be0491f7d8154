//! Observable dictionaries.
//!
//! Every lift keeps the raw state in its first six entries so the state can
//! be read back from a lifted vector by a fixed linear projection.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::plant::State;
use crate::{COMMAND_DIM, STATE_DIM};

/// Number of distinct monomials of degree 2 and 3 over the six state entries.
const POLY_DEG2: usize = 21;
const POLY_DEG3: usize = 56;
pub const POLY3_DIM: usize = STATE_DIM + POLY_DEG2 + POLY_DEG3 + 1;

/// Which model family, and for the Koopman families which dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LiftSpec {
    /// Raw state (the unified linear model).
    Identity,
    /// Monomials of degree 1 to 3 plus a constant.
    Poly3,
    /// Current state followed by the `n - 1` previous states.
    TimeDelay(usize),
    /// Three decoupled per-axis linear models.
    Componentwise,
    /// Closed-form velocity integrator; nothing is fitted.
    Integrator,
}

impl LiftSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LiftSpec::TimeDelay(0) => Err(Error::Config("time-delay lift needs n >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Whether the family is fitted as a full Koopman operator.
    pub fn is_koopman(&self) -> bool {
        matches!(self, LiftSpec::Identity | LiftSpec::Poly3 | LiftSpec::TimeDelay(_))
    }

    /// Dimension `p` of `phi(x)`.
    pub fn lifted_dim(&self) -> usize {
        match self {
            LiftSpec::Poly3 => POLY3_DIM,
            LiftSpec::TimeDelay(n) => STATE_DIM * n,
            _ => STATE_DIM,
        }
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn command_dim(&self) -> usize {
        COMMAND_DIM
    }

    /// Number of states the lift consumes (current state included).
    pub fn history_len(&self) -> usize {
        match self {
            LiftSpec::TimeDelay(n) => *n,
            _ => 1,
        }
    }

    /// Human-readable family name used in reports.
    pub fn family_name(&self) -> String {
        match self {
            LiftSpec::Identity => "UnifiedLinear".into(),
            LiftSpec::Poly3 => "Koopman(P)".into(),
            LiftSpec::TimeDelay(n) => format!("Koopman(TD({n}))"),
            LiftSpec::Componentwise => "Componentwise".into(),
            LiftSpec::Integrator => "Integrator".into(),
        }
    }
}

impl fmt::Display for LiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LiftSpec::Identity => write!(f, "identity"),
            LiftSpec::Poly3 => write!(f, "poly3"),
            LiftSpec::TimeDelay(n) => write!(f, "td:{n}"),
            LiftSpec::Componentwise => write!(f, "componentwise"),
            LiftSpec::Integrator => write!(f, "integrator"),
        }
    }
}

impl FromStr for LiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "unified" => LiftSpec::Identity,
            "poly3" => LiftSpec::Poly3,
            "componentwise" => LiftSpec::Componentwise,
            "integrator" => LiftSpec::Integrator,
            other => {
                let n = other
                    .strip_prefix("td:")
                    .or_else(|| other.strip_prefix("timedelay:"))
                    .ok_or_else(|| Error::Config(format!("unknown lift '{s}'")))?;
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad time-delay length in '{s}'")))?;
                LiftSpec::TimeDelay(n)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for LiftSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LiftSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Writes the degree 1-3 monomials and the trailing constant into `out`.
fn poly3_into(x: &[f64; STATE_DIM], out: &mut [f64]) {
    out[..STATE_DIM].copy_from_slice(x);
    let mut k = STATE_DIM;
    for i in 0..STATE_DIM {
        for j in i..STATE_DIM {
            out[k] = x[i] * x[j];
            k += 1;
        }
    }
    for i in 0..STATE_DIM {
        for j in i..STATE_DIM {
            let xij = x[i] * x[j];
            for l in j..STATE_DIM {
                out[k] = xij * x[l];
                k += 1;
            }
        }
    }
    out[k] = 1.0;
}

/// Lifts the state at index `t` of `states` into `out`, padding history
/// before index 0 with `states[0]`.
pub(crate) fn lift_at(spec: &LiftSpec, states: &[State], t: usize, out: &mut [f64]) {
    match spec {
        LiftSpec::Poly3 => poly3_into(&states[t].to_array(), out),
        LiftSpec::TimeDelay(n) => {
            for lag in 0..*n {
                let s = &states[t.saturating_sub(lag)];
                out[lag * STATE_DIM..(lag + 1) * STATE_DIM].copy_from_slice(&s.to_array());
            }
        }
        _ => out[..STATE_DIM].copy_from_slice(&states[t].to_array()),
    }
}

/// `phi` of the last state of a chronological history (oldest first).
///
/// Missing history for a time-delay lift is padded by repeating the oldest
/// state provided.
pub fn lift(spec: &LiftSpec, history: &[State]) -> Result<DVector<f64>> {
    spec.validate()?;
    if history.is_empty() {
        return Err(Error::Argument("lift needs at least one state".into()));
    }
    let mut out = DVector::zeros(spec.lifted_dim());
    lift_at(spec, history, history.len() - 1, out.as_mut_slice());
    Ok(out)
}

/// `psi = [phi(x); u]`.
pub fn lift_with_command(spec: &LiftSpec, history: &[State], u: &crate::plant::Command) -> Result<DVector<f64>> {
    let phi = lift(spec, history)?;
    let p = phi.len();
    let mut psi = DVector::zeros(p + COMMAND_DIM);
    psi.rows_mut(0, p).copy_from(&phi);
    psi.rows_mut(p, COMMAND_DIM).copy_from_slice(&u.to_array());
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(v: [f64; 6]) -> State {
        State::from_array(&v)
    }

    #[test]
    fn dimensions() {
        assert_eq!(LiftSpec::Identity.lifted_dim(), 6);
        assert_eq!(LiftSpec::Poly3.lifted_dim(), 84);
        assert_eq!(LiftSpec::TimeDelay(5).lifted_dim(), 30);
        assert_eq!(LiftSpec::TimeDelay(30).lifted_dim(), 180);
    }

    #[test]
    fn identity_and_zero_poly() {
        let x = st([1.0, -2.0, 0.5, 0.1, 0.2, -0.3]);
        assert_eq!(lift(&LiftSpec::Identity, &[x]).unwrap().as_slice(), &x.to_array());
        let z = lift(&LiftSpec::Poly3, &[State::default()]).unwrap();
        assert!(z.rows(0, 83).iter().all(|v| *v == 0.0));
        assert_eq!(z[83], 1.0);
    }

    #[test]
    fn poly3_graded_lex_order() {
        let x = st([2.0, 3.0, 5.0, 7.0, 11.0, 13.0]);
        let z = lift(&LiftSpec::Poly3, &[x]).unwrap();
        // Independent enumeration of exponent vectors in graded-lex order.
        let mut expected = Vec::new();
        for deg in 1..=3u32 {
            let mut exps = Vec::new();
            for a in 0..=deg {
                for b in 0..=deg - a {
                    for c in 0..=deg - a - b {
                        for d in 0..=deg - a - b - c {
                            for e in 0..=deg - a - b - c - d {
                                let f = deg - a - b - c - d - e;
                                exps.push([a, b, c, d, e, f]);
                            }
                        }
                    }
                }
            }
            exps.sort_by(|l, r| r.cmp(l));
            for ex in exps {
                let vals = x.to_array();
                expected.push(ex.iter().zip(vals).map(|(k, v)| v.powi(*k as i32)).product::<f64>());
            }
        }
        expected.push(1.0);
        assert_eq!(expected.len(), 84);
        assert_eq!(z.as_slice(), expected.as_slice());
    }

    #[test]
    fn time_delay_order_and_padding() {
        let h: Vec<State> = (0..3).map(|k| st([k as f64; 6])).collect();
        let z = lift(&LiftSpec::TimeDelay(5), &h).unwrap();
        let blocks: Vec<f64> = z.as_slice().chunks(6).map(|c| c[0]).collect();
        assert_eq!(blocks, vec![2.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn parse_and_errors() {
        assert_eq!("td:30".parse::<LiftSpec>().unwrap(), LiftSpec::TimeDelay(30));
        assert_eq!("poly3".parse::<LiftSpec>().unwrap(), LiftSpec::Poly3);
        assert!("td:0".parse::<LiftSpec>().is_err());
        assert!("cubic".parse::<LiftSpec>().is_err());
        assert!(lift(&LiftSpec::Identity, &[]).is_err());
        let json = serde_json::to_string(&LiftSpec::TimeDelay(7)).unwrap();
        assert_eq!(json, "\"td:7\"");
        assert_eq!(serde_json::from_str::<LiftSpec>(&json).unwrap(), LiftSpec::TimeDelay(7));
    }

    proptest! {
        #[test]
        fn prefix_is_current_state(
            v in prop::array::uniform6(-5.0f64..5.0),
            w in prop::array::uniform6(-5.0f64..5.0),
            n in 1usize..8,
        ) {
            let hist = [st(w), st(v)];
            for spec in [LiftSpec::Identity, LiftSpec::Poly3, LiftSpec::TimeDelay(n)] {
                let z = lift(&spec, &hist).unwrap();
                prop_assert_eq!(z.len(), spec.lifted_dim());
                prop_assert_eq!(&z.as_slice()[..6], &v[..]);
            }
        }
    }
}
