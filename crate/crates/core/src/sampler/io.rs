//! Per-chain draw CSVs: one header row naming every scalar of the expanded
//! state (`U_r_c`, `lambda_i_k`, `B_k_j`, `tau`), one row per draw.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Draw, PosteriorDraws};
use crate::error::{CapError, Result};
use crate::ingest::format_float;
use crate::model::{ExpandedState, StateDims};

pub fn write_chain_csv(path: &Path, dims: StateDims, chain: &[Draw]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", dims.names().join(","))?;
    for draw in chain {
        let row: Vec<String> = draw.state.to_vec().into_iter().map(format_float).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a chain written by [`write_chain_csv`]. Log-posterior values are
/// not stored and come back as NaN.
pub fn read_chain_csv(path: &Path, dims: StateDims) -> Result<Vec<Draw>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let expected = dims.names();
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(CapError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "header does not match the state layout (p={}, d={}, n={}, q={})",
                dims.p, dims.d, dims.n, dims.q
            ),
        });
    }
    let mut draws = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let values = record
            .iter()
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| CapError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-numeric cell `{cell}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let state = ExpandedState::from_slice(dims, &values).map_err(|e| CapError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        draws.push(Draw::from_state(state, f64::NAN)?);
    }
    Ok(draws)
}

/// Writes `chain_<c>.csv` for every chain into `dir`.
pub fn write_draws(dir: &Path, draws: &PosteriorDraws) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    draws
        .chains
        .iter()
        .enumerate()
        .map(|(c, chain)| {
            let path = dir.join(format!("chain_{}.csv", c + 1));
            write_chain_csv(&path, draws.dims, chain)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::standard_normal_matrix;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn chain_csv_round_trip_is_exact() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let dims = StateDims {
            p: 3,
            d: 2,
            n: 2,
            q: 2,
        };
        let chain: Vec<Draw> = (0..5)
            .map(|_| {
                let state = ExpandedState {
                    u: standard_normal_matrix(3, 2, &mut rng),
                    lambda: standard_normal_matrix(2, 2, &mut rng),
                    b: standard_normal_matrix(2, 2, &mut rng) * 1e-7,
                    tau: -0.123456789012345678,
                };
                Draw::from_state(state, 1.0).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_chain_csv(&path, dims, &chain).unwrap();
        let back = read_chain_csv(&path, dims).unwrap();
        for (a, b) in chain.iter().zip(&back) {
            assert_eq!(a.state, b.state);
        }
        let wrong = StateDims { n: 3, ..dims };
        assert!(matches!(
            read_chain_csv(&path, wrong),
            Err(CapError::Parse { line: 1, .. })
        ));
    }
}
