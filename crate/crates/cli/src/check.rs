//! `--assert` expressions such as `exact_match>=0.95`.

use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use narem::EvalReport;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Ge,
    Le,
    Gt,
    Lt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    metric: String,
    op: Op,
    value: f64,
}

impl FromStr for Assertion {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        for (tok, op) in [(">=", Op::Ge), ("<=", Op::Le), (">", Op::Gt), ("<", Op::Lt)] {
            if let Some(i) = s.find(tok) {
                let metric = s[..i].trim().to_string();
                let value: f64 = s[i + tok.len()..]
                    .trim()
                    .parse()
                    .map_err(|_| anyhow!("bad number in assertion {s:?}"))?;
                if !["exact_match", "token_nll", "ncm", "bleu"].contains(&metric.as_str()) {
                    bail!("unknown metric {metric:?} in assertion {s:?}");
                }
                return Ok(Assertion { metric, op, value });
            }
        }
        bail!("assertion {s:?} must look like METRIC>=VALUE (operators >=, <=, >, <)")
    }
}

impl std::fmt::Display for Assertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = match self.op {
            Op::Ge => ">=",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Lt => "<",
        };
        write!(f, "{}{}{}", self.metric, op, self.value)
    }
}

impl Assertion {
    /// `Ok(true)` when the report satisfies the assertion.
    pub fn holds(&self, r: &EvalReport) -> Result<bool> {
        let v = match self.metric.as_str() {
            "exact_match" => Some(r.exact_match),
            "token_nll" => Some(r.token_nll),
            "ncm" => r.ncm,
            "bleu" => r.bleu,
            _ => None,
        }
        .ok_or_else(|| anyhow!("metric {} is not available for this model", self.metric))?;
        Ok(match self.op {
            Op::Ge => v >= self.value,
            Op::Le => v <= self.value,
            Op::Gt => v > self.value,
            Op::Lt => v < self.value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            exact_match: 0.9,
            token_nll: 0.2,
            ncm: None,
            bleu: Some(80.0),
            count: 10,
        }
    }

    #[test]
    fn parses_and_checks() {
        let a: Assertion = "exact_match>=0.9".parse().unwrap();
        assert!(a.holds(&report()).unwrap());
        let a: Assertion = " bleu < 80 ".parse().unwrap();
        assert!(!a.holds(&report()).unwrap());
        assert_eq!(a.to_string(), "bleu<80");
        let a: Assertion = "ncm<=1".parse().unwrap();
        assert!(a.holds(&report()).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!("exact_match".parse::<Assertion>().is_err());
        assert!("speed>=1".parse::<Assertion>().is_err());
        assert!("bleu>=x".parse::<Assertion>().is_err());
    }
}
