use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::spd::Matrix;
use crate::stats::{chain_ess, mean, quantile_sorted, sorted, split_rhat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub level: f64,
    pub bonferroni: bool,
    /// Tail probabilities used for the loading (`gamma_*`) intervals.
    pub loading_tails: (f64, f64),
    pub p: usize,
    pub d: usize,
    pub n: usize,
    pub q: usize,
    pub draws: usize,
    /// `V^(k)` in reported component order.
    pub component_variance: Vec<f64>,
    pub parameters: Vec<ParameterSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|s| s.name == name)
    }

    fn matrix_of(&self, rows: usize, cols: usize, name: impl Fn(usize, usize) -> String) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| {
            self.get(&name(r, c)).map(|s| s.mean).unwrap_or(f64::NAN)
        })
    }

    /// Posterior mean of `Γ` (`p × d`).
    pub fn gamma_mean(&self) -> Matrix {
        self.matrix_of(self.p, self.d, |j, k| gamma_name(j, k))
    }

    /// Posterior mean of `B` (`d × q`).
    pub fn b_mean(&self) -> Matrix {
        self.matrix_of(self.d, self.q, |k, j| b_name(k, j))
    }

    pub fn sigma(&self) -> &ParameterSummary {
        self.get("sigma").expect("sigma is always summarized")
    }
}

pub fn gamma_name(j: usize, k: usize) -> String {
    format!("gamma_{}_{}", j + 1, k + 1)
}

pub fn b_name(k: usize, j: usize) -> String {
    format!("B_{}_{}", k + 1, j + 1)
}

pub fn lambda_name(i: usize, k: usize) -> String {
    format!("lambda_{}_{}", i + 1, k + 1)
}

fn summarize_scalar(name: String, chains: Vec<Vec<f64>>, tails: (f64, f64)) -> ParameterSummary {
    let all: Vec<f64> = chains.concat();
    let s = sorted(&all);
    let m = mean(&all);
    let sd = if all.len() > 1 {
        (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (all.len() as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    ParameterSummary {
        name,
        mean: m,
        median: quantile_sorted(&s, 0.5),
        sd,
        lower: quantile_sorted(&s, tails.0),
        upper: quantile_sorted(&s, tails.1),
        ess: chain_ess(&chains),
        rhat: split_rhat(&chains),
    }
}

/// Per-parameter posterior summaries of `Γ`, `B`, `σ`, and the subject
/// log-variances `λ`. Intervals are equal-tailed at `level`; with
/// `bonferroni`, loading intervals use tails `(1 - level) / (2p)`.
pub fn summarize(draws: &PosteriorDraws, level: f64, bonferroni: bool) -> PosteriorSummary {
    assert!(!draws.is_empty(), "summarize needs at least one draw");
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let dims = draws.dims;
    let alpha = (1.0 - level) / 2.0;
    let tails = (alpha, 1.0 - alpha);
    let loading_tails = if bonferroni {
        (alpha / dims.p as f64, 1.0 - alpha / dims.p as f64)
    } else {
        tails
    };
    let collect = |f: &dyn Fn(&super::Draw) -> f64| -> Vec<Vec<f64>> {
        draws
            .chains
            .iter()
            .map(|chain| chain.iter().map(f).collect())
            .collect()
    };

    let mut parameters = Vec::new();
    for k in 0..dims.d {
        for j in 0..dims.p {
            parameters.push(summarize_scalar(
                gamma_name(j, k),
                collect(&|d| d.gamma.matrix()[(j, k)]),
                loading_tails,
            ));
        }
    }
    for k in 0..dims.d {
        for j in 0..dims.q {
            parameters.push(summarize_scalar(
                b_name(k, j),
                collect(&|d| d.state.b[(k, j)]),
                tails,
            ));
        }
    }
    parameters.push(summarize_scalar(
        "sigma".into(),
        collect(&|d| d.sigma()),
        tails,
    ));
    for i in 0..dims.n {
        for k in 0..dims.d {
            parameters.push(summarize_scalar(
                lambda_name(i, k),
                collect(&|d| d.state.lambda[(i, k)]),
                tails,
            ));
        }
    }

    PosteriorSummary {
        level,
        bonferroni,
        loading_tails,
        p: dims.p,
        d: dims.d,
        n: dims.n,
        q: dims.q,
        draws: draws.len(),
        component_variance: draws
            .component_variance
            .clone()
            .unwrap_or_else(|| super::align::component_variances(draws)),
        parameters,
    }
}
