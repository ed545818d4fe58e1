use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::stats::{ranks, spearman};
use crate::{Error, Result};

/// Method ranks per configuration and the pairwise rank correlation between
/// configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub configs: Vec<String>,
    pub methods: Vec<String>,
    /// `ranks[c][m]`: rank of `methods[m]` under `configs[c]`, 1 = highest accuracy, ties averaged.
    pub ranks: Vec<Vec<f64>>,
    /// `rho[a][b]`: Spearman correlation between configurations `a` and `b`.
    pub rho: Vec<Vec<f64>>,
}

/// Ranks methods by mean accuracy within each configuration. Every
/// configuration must report the same method set.
pub fn rank_methods(results: &IndexMap<String, IndexMap<String, f64>>) -> Result<RankTable> {
    let configs: Vec<String> = results.keys().cloned().collect();
    let Some(first) = results.values().next() else {
        return Ok(RankTable { configs, methods: Vec::new(), ranks: Vec::new(), rho: Vec::new() });
    };
    let mut methods: Vec<String> = first.keys().cloned().collect();
    methods.sort();
    let mut problems = Vec::new();
    for (config, accs) in results {
        let mut set: Vec<&String> = accs.keys().collect();
        set.sort();
        if set.len() != methods.len() || set.iter().zip(&methods).any(|(a, b)| *a != b) {
            problems.push(format!("`{config}` reports {set:?}, expected {methods:?}"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::MethodSet(problems.join("; ")));
    }
    let table: Vec<Vec<f64>> = results
        .values()
        .map(|accs| ranks(&methods.iter().map(|m| -accs[m]).collect::<Vec<_>>()))
        .collect();
    let mut rho = vec![vec![f64::NAN; configs.len()]; configs.len()];
    for a in 0..configs.len() {
        for b in 0..configs.len() {
            rho[a][b] = if a == b { 1.0 } else { spearman(&table[a], &table[b]).unwrap_or(f64::NAN) };
        }
    }
    Ok(RankTable { configs, methods, ranks: table, rho })
}
