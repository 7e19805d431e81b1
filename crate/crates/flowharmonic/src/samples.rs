//! Posterior sample storage: chains of draws with their log-likelihood and
//! log-prior values, plus a plain-text persistence format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// One chain of posterior draws: a `steps x dim` block of positions together
/// with per-sample `ln L` and `ln pi` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub positions: Array2<f64>,
    pub ln_likelihood: Vec<f64>,
    pub ln_prior: Vec<f64>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Posterior draws organized as chains x steps x dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    chains: Vec<Chain>,
}

/// Metadata carried by the sample file header.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub problem: String,
    pub seed: u64,
    /// Samples dropped at ingestion because `ln L + ln pi` was not finite
    /// (e.g. draws outside the prior support).
    pub rejected: usize,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        SampleSet { dim, chains: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.chains.iter().map(Chain::len).sum()
    }

    pub fn chains(&self) -> &[Chain] {
        &self.chains
    }

    pub fn push_chain(&mut self, chain: Chain) -> Result<()> {
        if chain.positions.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: chain.positions.ncols(),
            });
        }
        let n = chain.positions.nrows();
        if chain.ln_likelihood.len() != n || chain.ln_prior.len() != n {
            return Err(Error::InvalidArgument(format!(
                "chain has {} positions but {} lnL / {} lnPrior values",
                n,
                chain.ln_likelihood.len(),
                chain.ln_prior.len()
            )));
        }
        self.chains.push(chain);
        Ok(())
    }

    /// All positions stacked into one `n_samples x dim` matrix, chain-major.
    pub fn stacked_positions(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n_samples(), self.dim));
        let mut row = 0;
        for chain in &self.chains {
            for i in 0..chain.len() {
                out.row_mut(row).assign(&chain.positions.row(i));
                row += 1;
            }
        }
        out
    }

    /// Drop samples whose `ln L + ln pi` is not finite, returning how many
    /// were removed. Chains that become empty are removed entirely.
    pub fn prune_invalid(&mut self) -> usize {
        let dim = self.dim;
        let mut removed = 0;
        for chain in &mut self.chains {
            let keep: Vec<usize> = (0..chain.len())
                .filter(|&i| (chain.ln_likelihood[i] + chain.ln_prior[i]).is_finite())
                .collect();
            if keep.len() == chain.len() {
                continue;
            }
            removed += chain.len() - keep.len();
            let mut positions = Array2::<f64>::zeros((keep.len(), dim));
            for (row, &i) in keep.iter().enumerate() {
                positions.row_mut(row).assign(&chain.positions.row(i));
            }
            chain.ln_likelihood = keep.iter().map(|&i| chain.ln_likelihood[i]).collect();
            chain.ln_prior = keep.iter().map(|&i| chain.ln_prior[i]).collect();
            chain.positions = positions;
        }
        self.chains.retain(|c| !c.is_empty());
        removed
    }

    /// Write the set as a CSV file with a `#`-prefixed metadata header.
    /// Floats are printed with Rust's shortest round-trip representation, so
    /// reading the file back reproduces every value exactly.
    pub fn write_csv(&self, path: &Path, problem: &str, seed: u64) -> Result<()> {
        let steps = self.chains.first().map_or(0, Chain::len);
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# flowharmonic-samples v1")?;
        writeln!(
            w,
            "# dim={} n_chains={} steps={} problem={} seed={}",
            self.dim,
            self.n_chains(),
            steps,
            problem,
            seed
        )?;
        let mut header = String::from("chain,step");
        for j in 0..self.dim {
            write!(header, ",theta_{}", j + 1).unwrap();
        }
        header.push_str(",lnL,lnPrior");
        writeln!(w, "{header}")?;
        let mut line = String::new();
        for (c, chain) in self.chains.iter().enumerate() {
            for i in 0..chain.len() {
                line.clear();
                write!(line, "{c},{i}").unwrap();
                for j in 0..self.dim {
                    write!(line, ",{}", chain.positions[[i, j]]).unwrap();
                }
                write!(line, ",{},{}", chain.ln_likelihood[i], chain.ln_prior[i]).unwrap();
                writeln!(w, "{line}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a sample file written by [`SampleSet::write_csv`]. Samples with a
    /// non-finite `ln L + ln pi` are rejected; the count is reported in the
    /// returned metadata.
    pub fn read_csv(path: &Path) -> Result<(SampleSet, SampleMeta)> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut dim = None;
        let mut problem = String::new();
        let mut seed = 0u64;
        // rows grouped by chain index in file order
        let mut raw: Vec<(usize, Vec<f64>, f64, f64)> = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for field in meta.split_whitespace() {
                    if let Some((key, value)) = field.split_once('=') {
                        match key {
                            "dim" => {
                                dim = Some(value.parse::<usize>().map_err(|e| {
                                    Error::Format(format!("bad dim: {e}"))
                                })?)
                            }
                            "problem" => problem = value.to_string(),
                            "seed" => {
                                seed = value
                                    .parse::<u64>()
                                    .map_err(|e| Error::Format(format!("bad seed: {e}")))?
                            }
                            _ => {}
                        }
                    }
                }
                continue;
            }
            if line.starts_with("chain,") {
                continue; // column header
            }
            let dim = dim.ok_or_else(|| {
                Error::Format("data row before dim metadata".to_string())
            })?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 4 {
                return Err(Error::Format(format!(
                    "expected {} fields, got {}",
                    dim + 4,
                    fields.len()
                )));
            }
            let chain: usize = fields[0]
                .parse()
                .map_err(|e| Error::Format(format!("bad chain index: {e}")))?;
            let mut theta = Vec::with_capacity(dim);
            for f in &fields[2..2 + dim] {
                theta.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad value: {e}")))?,
                );
            }
            let ln_l: f64 = fields[2 + dim]
                .parse()
                .map_err(|e| Error::Format(format!("bad lnL: {e}")))?;
            let ln_p: f64 = fields[3 + dim]
                .parse()
                .map_err(|e| Error::Format(format!("bad lnPrior: {e}")))?;
            raw.push((chain, theta, ln_l, ln_p));
        }
        let dim = dim.ok_or_else(|| Error::Format("missing dim metadata".to_string()))?;

        let n_chains = raw.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let mut set = SampleSet::new(dim);
        let mut rejected = 0;
        for c in 0..n_chains {
            let rows: Vec<&(usize, Vec<f64>, f64, f64)> =
                raw.iter().filter(|r| r.0 == c).collect();
            let valid: Vec<&&(usize, Vec<f64>, f64, f64)> = rows
                .iter()
                .filter(|r| (r.2 + r.3).is_finite())
                .collect();
            rejected += rows.len() - valid.len();
            if valid.is_empty() {
                continue;
            }
            let mut positions = Array2::<f64>::zeros((valid.len(), dim));
            let mut ln_likelihood = Vec::with_capacity(valid.len());
            let mut ln_prior = Vec::with_capacity(valid.len());
            for (i, row) in valid.iter().enumerate() {
                for j in 0..dim {
                    positions[[i, j]] = row.1[j];
                }
                ln_likelihood.push(row.2);
                ln_prior.push(row.3);
            }
            set.push_chain(Chain { positions, ln_likelihood, ln_prior })?;
        }
        Ok((set, SampleMeta { problem, seed, rejected }))
    }
}
