//! Synthetic dataset generation (equicorrelated Gaussian designs with
//! sparse group/variable effects) and dataset file I/O.
//!
//! File format: one CSV with header `y,x_1..x_p,u_1..u_q,z_1..z_r` plus a
//! JSON sidecar `{"p":..,"q":..,"r":..,"group_map":[..]}` (1-based groups)
//! next to it with the extension replaced by `.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::Link;
use crate::model::{CoefVector, Dataset, Theta};

/// Rule for the individual-variable coefficients `beta^x`.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivePattern {
    /// All zero except the last variable of each active group, set to 1.
    LastOfActiveGroups,
    /// Explicit coefficients, length `p`.
    Custom(Vec<f64>),
}

/// Simulation design: dimensions, equicorrelation, block coefficients, link.
#[derive(Debug, Clone)]
pub struct SimSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// Common off-diagonal correlation of the design columns.
    pub rho: f64,
    pub beta_z: Vec<f64>,
    pub beta_u: Vec<f64>,
    pub active_pattern: ActivePattern,
    pub link: Link,
    pub seed: u64,
}

impl SimSpec {
    /// The canonical benchmark design: 5 groups, 5 always-included columns,
    /// `rho = 0.5`, `beta^z = beta^u = (0,0,1,1,1)`, probit link, and the
    /// last variable of each active group carrying coefficient 1.
    pub fn canonical(n: usize, p: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            q: 5,
            r: 5,
            rho: 0.5,
            beta_z: vec![0.0, 0.0, 1.0, 1.0, 1.0],
            beta_u: vec![0.0, 0.0, 1.0, 1.0, 1.0],
            active_pattern: ActivePattern::LastOfActiveGroups,
            link: Link::Probit,
            seed,
        }
    }

    /// Like [`SimSpec::canonical`] but for arbitrary `q`/`r`: roughly the
    /// last three fifths of the groups (and of the fixed columns) get
    /// coefficient 1, the rest 0; at least one group stays active.
    pub fn scaled(n: usize, p: usize, q: usize, r: usize, seed: u64) -> Self {
        let tail_ones = |len: usize| -> Vec<f64> {
            let k = ((3 * len + 2) / 5).clamp(usize::from(len > 0), len);
            (0..len).map(|i| if i >= len - k { 1.0 } else { 0.0 }).collect()
        };
        Self {
            n,
            p,
            q,
            r,
            rho: 0.5,
            beta_z: tail_ones(r),
            beta_u: tail_ones(q),
            active_pattern: ActivePattern::LastOfActiveGroups,
            link: Link::Probit,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q == 0 {
            return Err(Error::InvalidInput("n, p, q must be at least 1".into()));
        }
        if self.p < self.q {
            return Err(Error::InvalidInput(format!(
                "p ({}) must be at least q ({}) so every group is nonempty",
                self.p, self.q
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidInput(format!(
                "rho must lie in [0,1), got {}",
                self.rho
            )));
        }
        if self.beta_z.len() != self.r || self.beta_u.len() != self.q {
            return Err(Error::Dim(format!(
                "beta_z has length {} (r = {}), beta_u has length {} (q = {})",
                self.beta_z.len(),
                self.r,
                self.beta_u.len(),
                self.q
            )));
        }
        if let ActivePattern::Custom(v) = &self.active_pattern {
            if v.len() != self.p {
                return Err(Error::Dim(format!(
                    "custom beta_x has length {} but p = {}",
                    v.len(),
                    self.p
                )));
            }
        }
        Ok(())
    }
}

/// Contiguous group blocks of size `p/q`, remainder to the last group.
pub fn block_group_map(p: usize, q: usize) -> Vec<usize> {
    let block = p / q;
    (0..p).map(|j| (j / block).min(q - 1)).collect()
}

/// Simulates a dataset, returning it with the generating indicators
/// (`gamma_k = 1` iff `beta^u_k != 0`, `eta_j = 1` iff `beta^x_j != 0`) and
/// coefficients.
///
/// Design rows are iid `N(0, Sigma)` with `Sigma = (1-rho) I + rho 11'`
/// across all `r + q + p` columns, drawn by the one-factor construction
/// `sqrt(rho) * shared + sqrt(1-rho) * idiosyncratic`.
pub fn simulate(spec: &SimSpec) -> Result<(Dataset, Theta, CoefVector)> {
    spec.validate()?;
    let group_map = block_group_map(spec.p, spec.q);

    let beta_x: Vec<f64> = match &spec.active_pattern {
        ActivePattern::Custom(v) => v.clone(),
        ActivePattern::LastOfActiveGroups => {
            let mut bx = vec![0.0; spec.p];
            for (k, &bu) in spec.beta_u.iter().enumerate() {
                if bu != 0.0 {
                    let last = (0..spec.p).rev().find(|&j| group_map[j] == k);
                    if let Some(j) = last {
                        bx[j] = 1.0;
                    }
                }
            }
            bx
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.r + spec.q + spec.p;
    let sqrt_rho = spec.rho.sqrt();
    let sqrt_com = (1.0 - spec.rho).sqrt();
    // Columns drawn in canonical order [Z | U | X].
    let mut design = Array2::zeros((spec.n, m));
    for i in 0..spec.n {
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..m {
            let idio: f64 = rng.sample(StandardNormal);
            design[(i, j)] = sqrt_rho * shared + sqrt_com * idio;
        }
    }

    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut s = 0.0;
        for (l, &b) in spec.beta_z.iter().enumerate() {
            s += b * design[(i, l)];
        }
        for (k, &b) in spec.beta_u.iter().enumerate() {
            s += b * design[(i, spec.r + k)];
        }
        for (j, &b) in beta_x.iter().enumerate() {
            s += b * design[(i, spec.r + spec.q + j)];
        }
        y.push(u8::from(rng.random_bool(spec.link.cdf(s))));
    }

    let z = design.slice(ndarray::s![.., 0..spec.r]).to_owned();
    let u = design.slice(ndarray::s![.., spec.r..spec.r + spec.q]).to_owned();
    let x = design.slice(ndarray::s![.., spec.r + spec.q..]).to_owned();
    let data = Dataset::new(y, x, u, z, group_map.clone())?;

    let gamma: Vec<bool> = spec.beta_u.iter().map(|&b| b != 0.0).collect();
    let eta: Vec<bool> = beta_x.iter().map(|&b| b != 0.0).collect();
    let truth = Theta::new(gamma, eta, &group_map)?;
    let beta = CoefVector {
        beta_x,
        beta_u: spec.beta_u.clone(),
        beta_z: spec.beta_z.clone(),
    };
    Ok((data, truth, beta))
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    p: usize,
    q: usize,
    r: usize,
    /// 1-based group of each variable.
    group_map: Vec<usize>,
}

/// The JSON sidecar path belonging to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn fmt17(v: f64) -> String {
    // 17 significant digits round-trip any finite f64 bit-exactly.
    format!("{v:.16e}")
}

/// Writes the CSV and its JSON sidecar.
pub fn write_dataset(data: &Dataset, csv_path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(csv_path)?);
    let mut header = String::from("y");
    for j in 1..=data.p() {
        header.push_str(&format!(",x_{j}"));
    }
    for k in 1..=data.q() {
        header.push_str(&format!(",u_{k}"));
    }
    for l in 1..=data.r() {
        header.push_str(&format!(",z_{l}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..data.n() {
        let row = data.design().row(i);
        let mut line = String::from(if data.y()[i] { "1" } else { "0" });
        for j in 0..data.p() {
            line.push(',');
            line.push_str(&fmt17(row[data.x_col(j)]));
        }
        for k in 0..data.q() {
            line.push(',');
            line.push_str(&fmt17(row[data.u_col(k)]));
        }
        for l in 0..data.r() {
            line.push(',');
            line.push_str(&fmt17(row[data.z_col(l)]));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;

    let sidecar = Sidecar {
        p: data.p(),
        q: data.q(),
        r: data.r(),
        group_map: data.group_map().iter().map(|&g| g + 1).collect(),
    };
    let file = File::create(sidecar_path(csv_path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
    Ok(())
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Reads a dataset CSV plus sidecar; `read(write(d))` reproduces `d`
/// bit-exactly for finite values.
pub fn read_dataset(csv_path: &Path) -> Result<Dataset> {
    let side = sidecar_path(csv_path);
    if !side.exists() {
        return Err(Error::InvalidInput(format!(
            "missing sidecar {} next to {}",
            side.display(),
            csv_path.display()
        )));
    }
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(&side)?))?;
    let (p, q, r) = (sidecar.p, sidecar.q, sidecar.r);
    if sidecar.group_map.len() != p {
        return Err(Error::InvalidInput(format!(
            "sidecar group_map has length {} but p = {p}",
            sidecar.group_map.len()
        )));
    }
    let mut group_map = Vec::with_capacity(p);
    for (j, &g) in sidecar.group_map.iter().enumerate() {
        if g == 0 {
            return Err(Error::InvalidInput(format!(
                "sidecar group_map[{j}] is 0 but groups are 1-based"
            )));
        }
        if g > q {
            return Err(Error::InvalidInput(format!(
                "sidecar group_map[{j}] = {g} exceeds q = {q}"
            )));
        }
        group_map.push(g - 1);
    }

    let reader = BufReader::new(File::open(csv_path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, 1, "empty file; expected a header"))??;
    let mut expected = vec!["y".to_string()];
    expected.extend((1..=p).map(|j| format!("x_{j}")));
    expected.extend((1..=q).map(|k| format!("u_{k}")));
    expected.extend((1..=r).map(|l| format!("z_{l}")));
    let got: Vec<&str> = header.split(',').collect();
    if got.len() != expected.len() {
        return Err(parse_err(
            1,
            got.len(),
            format!("header has {} columns, expected {}", got.len(), expected.len()),
        ));
    }
    for (c, (g, e)) in got.iter().zip(&expected).enumerate() {
        if g.trim() != e {
            return Err(parse_err(1, c + 1, format!("header column '{g}', expected '{e}'")));
        }
    }

    let width = expected.len();
    let mut y = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(
                line_no,
                fields.len(),
                format!("row has {} fields, expected {width}", fields.len()),
            ));
        }
        let yv: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, 1, format!("response '{}': {e}", fields[0])))?;
        if yv != 0.0 && yv != 1.0 {
            return Err(parse_err(
                line_no,
                1,
                format!("response must be 0 or 1, got '{}'", fields[0]),
            ));
        }
        y.push(yv as u8);
        let mut row = Vec::with_capacity(width - 1);
        for (c, field) in fields.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(line_no, c + 1, format!("value '{field}': {e}")))?;
            row.push(v);
        }
        rows.push(row);
    }

    let n = rows.len();
    let mut x = Array2::zeros((n, p));
    let mut u = Array2::zeros((n, q));
    let mut z = Array2::zeros((n, r));
    for (i, row) in rows.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] = row[j];
        }
        for k in 0..q {
            u[(i, k)] = row[p + k];
        }
        for l in 0..r {
            z[(i, l)] = row[p + q + l];
        }
    }
    Dataset::new(y, x, u, z, group_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn group_blocks_put_remainder_in_last_group() {
        assert_eq!(block_group_map(7, 3), vec![0, 0, 1, 1, 2, 2, 2]);
        assert_eq!(block_group_map(50, 5)[9], 0);
        assert_eq!(block_group_map(50, 5)[10], 1);
        assert_eq!(block_group_map(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn simulation_is_deterministic_and_truth_matches_coefficients() {
        let spec = SimSpec::canonical(50, 20, 9);
        let (d1, t1, b1) = simulate(&spec).unwrap();
        let (d2, t2, b2) = simulate(&spec).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(b1, b2);
        assert_eq!(d1.y(), d2.y());
        assert_eq!(d1.design(), d2.design());

        assert_eq!(t1.gamma, vec![false, false, true, true, true]);
        // Last variable of each active group (blocks of 4).
        let expected_eta: Vec<bool> = (0..20).map(|j| j == 11 || j == 15 || j == 19).collect();
        assert_eq!(t1.eta, expected_eta);
        assert!(t1.satisfies_constraint(d1.group_map()));
    }

    #[test]
    fn equicorrelated_design_moments() {
        for rho in [0.0, 0.5] {
            let spec = SimSpec {
                rho,
                ..SimSpec::canonical(60_000, 5, 4)
            };
            let (data, _, _) = simulate(&spec).unwrap();
            let n = data.n() as f64;
            let m = data.total_cols();
            let design = data.design();
            let se = 3.0 / n.sqrt();
            for a in 0..m {
                let mean_a: f64 = design.column(a).sum() / n;
                assert_abs_diff_eq!(mean_a, 0.0, epsilon = 2.0 * se);
                for b in a..m {
                    let cov: f64 = (0..data.n())
                        .map(|i| design[(i, a)] * design[(i, b)])
                        .sum::<f64>()
                        / n;
                    let expected = if a == b { 1.0 } else { rho };
                    assert_abs_diff_eq!(cov, expected, epsilon = 2.5 * se);
                }
            }
        }
    }

    #[test]
    fn response_rate_matches_design_expectation() {
        let spec = SimSpec::canonical(40_000, 10, 1);
        let (data, _, beta) = simulate(&spec).unwrap();
        let empirical = data.y().iter().filter(|&&b| b).count() as f64 / data.n() as f64;

        // Independent Monte Carlo estimate of E[F(d' beta)] over the design
        // distribution.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        let m = data.total_cols();
        let coefs: Vec<f64> = beta
            .beta_z
            .iter()
            .chain(beta.beta_u.iter())
            .chain(beta.beta_x.iter())
            .copied()
            .collect();
        let draws = 40_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let shared: f64 = rng.sample(StandardNormal);
            let mut s = 0.0;
            for coef in coefs.iter().take(m) {
                let idio: f64 = rng.sample(StandardNormal);
                let v = spec.rho.sqrt() * shared + (1.0 - spec.rho).sqrt() * idio;
                s += coef * v;
            }
            acc += spec.link.cdf(s);
        }
        let expected = acc / draws as f64;
        assert_abs_diff_eq!(empirical, expected, epsilon = 3.0 * 0.5 / (draws as f64).sqrt() * 2.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let (data, _, _) = simulate(&SimSpec::canonical(100, 10, 77)).unwrap();
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data.y(), back.y());
        assert_eq!(data.group_map(), back.group_map());
        assert_eq!(data.design(), back.design());
    }

    #[test]
    fn missing_sidecar_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let (data, _, _) = simulate(&SimSpec::canonical(5, 5, 1)).unwrap();
        write_dataset(&data, &path).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("sidecar"), "{err}");
    }

    #[test]
    fn zero_based_sidecar_group_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let (data, _, _) = simulate(&SimSpec::canonical(5, 5, 1)).unwrap();
        write_dataset(&data, &path).unwrap();
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap();
        std::fs::write(&side, text.replacen("1", "0", 1)).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("1-based"), "{err}");
    }

    #[test]
    fn malformed_rows_name_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let (data, _, _) = simulate(&SimSpec::canonical(5, 5, 1)).unwrap();
        write_dataset(&data, &path).unwrap();

        let original = std::fs::read_to_string(&path).unwrap();

        // Ragged row: drop the last field of data row 3 (file line 4).
        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        let truncated = lines[3].rsplit_once(',').unwrap().0.to_string();
        lines[3] = truncated;
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }

        // Non-binary response on data row 1 (file line 2).
        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        let rest = lines[1].split_once(',').unwrap().1.to_string();
        lines[1] = format!("2,{rest}");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!((line, column), (2, 1));
            }
            other => panic!("expected parse error, got {other}"),
        }

        // Corrupted header.
        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        lines[0] = lines[0].replace("x_1", "w_1");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }

        // Unparseable value in data row 2 (file line 3), column 3.
        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        let fields: Vec<&str> = lines[2].split(',').collect();
        let mut fields: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
        fields[2] = "abc".into();
        lines[2] = fields.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (3, 3)),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut spec = SimSpec::canonical(10, 10, 0);
        spec.rho = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = SimSpec::canonical(10, 10, 0);
        spec.rho = -0.1;
        assert!(spec.validate().is_err());
        let spec = SimSpec::canonical(10, 3, 0); // p < q
        assert!(spec.validate().is_err());
        let mut spec = SimSpec::canonical(10, 10, 0);
        spec.active_pattern = ActivePattern::Custom(vec![0.0; 3]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn scaled_spec_generalizes_the_tail_pattern() {
        let spec = SimSpec::scaled(10, 10, 5, 5, 0);
        assert_eq!(spec.beta_u, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(spec.beta_z, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        let spec = SimSpec::scaled(10, 10, 2, 0, 0);
        assert_eq!(spec.beta_u, vec![0.0, 1.0]);
        assert_eq!(spec.beta_z, Vec::<f64>::new());
    }
}
