//! Reproducible sample sets under common random numbers.
//!
//! Sample `j` of a draw depends only on `(seed, j)`, so a set can be generated
//! in any partition across workers, and drawing the same seed at perturbed
//! weights reuses the same factor realizations.

use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss_models::LossModel;
use crate::numeric::{moments, Moments};
use crate::rng::CounterRng;

/// Identifies a stored pathwise-derivative column `∂ⁿL/∂x_iⁿ`; `axis` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DerivKey {
    pub axis: usize,
    pub order: u32,
}

impl DerivKey {
    pub fn new(axis: usize, order: u32) -> Self {
        Self { axis, order }
    }

    /// CSV column name `d{i}_{n}` with a one-based axis.
    pub fn column_name(&self) -> String {
        format!("d{}_{}", self.axis + 1, self.order)
    }

    fn parse_column(name: &str) -> Option<Self> {
        let rest = name.strip_prefix('d')?;
        let (i, n) = rest.split_once('_')?;
        let axis: usize = i.parse().ok()?;
        let order: u32 = n.parse().ok()?;
        (axis >= 1 && order >= 1).then(|| Self::new(axis - 1, order))
    }
}

/// Empirical law of `L(x)` plus optional pathwise-derivative columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub model_id: String,
    pub x: Vec<f64>,
    pub seed: u64,
    pub count: usize,
    pub losses: Vec<f64>,
    pub derivs: BTreeMap<DerivKey, Vec<f64>>,
    /// Permutation of `0..count` ordering `losses` ascending (ties by index).
    pub sorted_index: Vec<usize>,
}

const CHUNK: usize = 4096;

pub fn draw(model: &LossModel, x: &[f64], count: usize, seed: u64) -> Result<SampleSet> {
    draw_with_derivs(model, x, count, seed, &[])
}

pub fn draw_with_derivs(model: &LossModel, x: &[f64], count: usize, seed: u64, keys: &[DerivKey]) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    if x.len() != model.dim {
        return Err(Error::arg(format!("weight vector has length {}, model dim is {}", x.len(), model.dim)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite weight".into()));
    }
    let mut keys = keys.to_vec();
    keys.sort();
    keys.dedup();
    for k in &keys {
        model.check_derivative(k.axis, k.order)?;
    }

    let rng = CounterRng::new(seed);
    let width = 1 + keys.len();
    let mut rows = vec![0.0; count * width];
    rows.par_chunks_mut(width * CHUNK)
        .enumerate()
        .try_for_each(|(c, chunk)| -> Result<()> {
            for (r, row) in chunk.chunks_mut(width).enumerate() {
                let j = (c * CHUNK + r) as u64;
                let s = model.draw_factors(&rng, j);
                row[0] = model.loss_unchecked(x, &s.values);
                for (slot, k) in row[1..].iter_mut().zip(&keys) {
                    *slot = model.pathwise_unchecked(x, &s.values, k.axis, k.order)?;
                }
            }
            Ok(())
        })?;

    let losses: Vec<f64> = rows.iter().step_by(width).copied().collect();
    let derivs = keys
        .iter()
        .enumerate()
        .map(|(k, key)| (*key, rows.iter().skip(1 + k).step_by(width).copied().collect()))
        .collect();
    let mut set = SampleSet::from_losses(model.id.clone(), losses)?;
    set.x = x.to_vec();
    set.seed = seed;
    set.derivs = derivs;
    Ok(set)
}

/// Runs `f` on a dedicated pool of `workers` threads (`None` uses the global pool).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::arg(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn sort_permutation(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.par_sort_unstable_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx
}

impl SampleSet {
    /// Wraps raw loss values (no model, seed 0, empty weight vector).
    pub fn from_losses(model_id: impl Into<String>, losses: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::arg("sample set needs at least one loss"));
        }
        if losses.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN loss".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            x: Vec::new(),
            seed: 0,
            count: losses.len(),
            sorted_index: sort_permutation(&losses),
            losses,
            derivs: BTreeMap::new(),
        })
    }

    pub fn with_derivative(mut self, key: DerivKey, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.count {
            return Err(Error::arg(format!("derivative column has {} values for {} samples", values.len(), self.count)));
        }
        self.derivs.insert(key, values);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn deriv(&self, axis: usize, order: u32) -> Option<&[f64]> {
        self.derivs.get(&DerivKey::new(axis, order)).map(Vec::as_slice)
    }

    /// Losses in ascending order.
    pub fn sorted_losses(&self) -> Vec<f64> {
        self.sorted_index.iter().map(|&j| self.losses[j]).collect()
    }

    /// Order statistic of one-based `rank`.
    pub fn order_statistic(&self, rank: usize) -> f64 {
        self.losses[self.sorted_index[rank - 1]]
    }

    pub fn summary(&self) -> Moments {
        moments(&self.losses)
    }

    /// Writes `index,loss,d{i}_{n}...` rows with 17 significant digits,
    /// preceded by `#` comment lines holding the model id, seed and weights.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "# model_id={}", self.model_id);
        let _ = writeln!(out, "# seed={}", self.seed);
        let xs: Vec<String> = self.x.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "# x={}", xs.join(";"));
        out.push_str("index,loss");
        for k in self.derivs.keys() {
            out.push(',');
            out.push_str(&k.column_name());
        }
        out.push('\n');
        let cols: Vec<&Vec<f64>> = self.derivs.values().collect();
        for j in 0..self.count {
            let _ = write!(out, "{j},{:.16e}", self.losses[j]);
            for c in &cols {
                let _ = write!(out, ",{:.16e}", c[j]);
            }
            out.push('\n');
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(out.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut model_id = String::from("unknown");
        let mut seed = 0u64;
        let mut x = Vec::new();
        for (n, line) in text.lines().enumerate().take_while(|(_, l)| l.starts_with('#')) {
            let meta = line.trim_start_matches('#').trim();
            let bad = |m: String| Error::Parse { line: Some(n as u64 + 1), message: m };
            if let Some(v) = meta.strip_prefix("model_id=") {
                model_id = v.to_string();
            } else if let Some(v) = meta.strip_prefix("seed=") {
                seed = v.parse().map_err(|e| bad(format!("seed: {e}")))?;
            } else if let Some(v) = meta.strip_prefix("x=") {
                x = v
                    .split(';')
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("x: {e}"))))
                    .collect::<Result<_>>()?;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .flexible(false)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_error)?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::Parse { line: None, message: "no records".into() });
        }
        if header.len() < 2 || &header[0] != "index" || &header[1] != "loss" {
            return Err(Error::Parse {
                line: header.position().map(|p| p.line()),
                message: format!("header must start with index,loss; found '{}'", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let keys = header
            .iter()
            .skip(2)
            .map(|name| {
                DerivKey::parse_column(name).ok_or_else(|| Error::Parse {
                    line: header.position().map(|p| p.line()),
                    message: format!("unrecognised column '{name}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut losses = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); keys.len()];
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map(|p| p.line());
            let field = |k: usize| -> Result<f64> {
                record[k].trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("column {}: {e}", header[k].to_string()),
                })
            };
            let index: usize = record[0].trim().parse().map_err(|e| Error::Parse {
                line,
                message: format!("index: {e}"),
            })?;
            if index != losses.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("index {index} out of sequence (expected {})", losses.len()),
                });
            }
            losses.push(field(1)?);
            for (k, col) in cols.iter_mut().enumerate() {
                col.push(field(2 + k)?);
            }
        }
        if losses.is_empty() {
            return Err(Error::Parse { line: None, message: "no records".into() });
        }
        let mut set = SampleSet::from_losses(model_id, losses)?;
        set.seed = seed;
        set.x = x;
        set.derivs = keys.into_iter().zip(cols).collect();
        Ok(set)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("wrong column count: expected {expected_len}, found {len}")
        }
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_models::LossModel;
    use proptest::prelude::*;

    fn gauss2() -> LossModel {
        LossModel::standard_gaussian_linear(2).unwrap()
    }

    #[test]
    fn draw_is_deterministic() {
        let a = draw(&gauss2(), &[1.0, 0.0], 20_000, 42).unwrap();
        let b = draw(&gauss2(), &[1.0, 0.0], 20_000, 42).unwrap();
        assert!(a.losses.iter().zip(&b.losses).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_ne!(a.losses, draw(&gauss2(), &[1.0, 0.0], 20_000, 43).unwrap().losses);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let keys = [DerivKey::new(0, 1), DerivKey::new(1, 1)];
        let one = with_workers(Some(1), || draw_with_derivs(&gauss2(), &[3.0, 4.0], 50_000, 5, &keys)).unwrap().unwrap();
        let four = with_workers(Some(4), || draw_with_derivs(&gauss2(), &[3.0, 4.0], 50_000, 5, &keys)).unwrap().unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn perturbed_weights_reuse_factor_draws() {
        let m = gauss2();
        let keys = [DerivKey::new(1, 1)];
        let a = draw_with_derivs(&m, &[1.0, 0.0], 10_000, 42, &keys).unwrap();
        let b = draw_with_derivs(&m, &[1.0, 0.001], 10_000, 42, &keys).unwrap();
        assert_eq!(a.deriv(1, 1), b.deriv(1, 1), "Y₂ draws identical");
        let y2 = a.deriv(1, 1).unwrap();
        for j in 0..a.count {
            assert!((b.losses[j] - a.losses[j] - 0.001 * y2[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn discrete_frequencies() {
        let m = LossModel::discrete_table(1, vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        let set = draw(&m, &[0.0], 500_000, 11).unwrap();
        for outcome in 1..=5 {
            let f = set.losses.iter().filter(|&&l| l == outcome as f64).count() as f64 / set.count as f64;
            assert!((f - 0.2).abs() <= 0.002, "outcome {outcome}: {f}");
        }
    }

    #[test]
    fn count_zero_is_rejected() {
        assert!(matches!(draw(&gauss2(), &[1.0, 0.0], 0, 1), Err(Error::Argument(_))));
        assert!(matches!(draw(&gauss2(), &[1.0], 10, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn sorted_index_is_a_sorting_permutation() {
        let set = draw(&gauss2(), &[0.3, -0.7], 10_000, 3).unwrap();
        let mut seen = vec![false; set.count];
        for &j in &set.sorted_index {
            assert!(!seen[j]);
            seen[j] = true;
        }
        assert!(set.sorted_losses().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let set = draw_with_derivs(&gauss2(), &[3.0, 4.0], 1000, 9, &[DerivKey::new(0, 1), DerivKey::new(1, 2)]).unwrap();
        set.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().find(|l| !l.starts_with('#')).unwrap() == "index,loss,d1_1,d2_2");
        assert_eq!(SampleSet::load(&path).unwrap(), set);
    }

    #[test]
    fn load_errors() {
        let e = SampleSet::parse_csv("index,loss\n0,1.0\n1,2.0,3.0\n").unwrap_err();
        match e {
            Error::Parse { line, message } => {
                assert_eq!(line, Some(3), "{message}");
                assert!(message.contains("column count"));
            }
            other => panic!("{other:?}"),
        }
        for empty in ["", "index,loss\n", "# model_id=x\n"] {
            let e = SampleSet::parse_csv(empty).unwrap_err();
            assert!(e.to_string().contains("no records"), "{e}");
        }
        let e = SampleSet::parse_csv("index,loss\n0,abc\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: Some(2), .. }), "{e:?}");
    }

    #[test]
    fn gaussian_moments_match_closed_form() {
        let mu = vec![0.5, -0.25];
        let sigma = vec![vec![2.0, 0.6], vec![0.6, 1.0]];
        let m = LossModel::gaussian_linear(mu.clone(), sigma.clone()).unwrap();
        let x = [3.0, 4.0];
        let set = draw(&m, &x, 1_000_000, 2).unwrap();
        let s = set.summary();
        let mean = x[0] * mu[0] + x[1] * mu[1];
        let var = 9.0 * 2.0 + 2.0 * 12.0 * 0.6 + 16.0 * 1.0;
        assert!((s.mean - mean).abs() <= 4.0 * s.standard_error, "{s:?}");
        // Var of the sample variance for a normal is 2σ⁴/(N−1).
        let var_se = (2.0 * var * var / (set.count as f64 - 1.0)).sqrt();
        assert!((s.variance - var).abs() <= 4.0 * var_se, "{s:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn csv_round_trip(losses in proptest::collection::vec(-1e300f64..1e300, 1..50)) {
            let n = losses.len();
            let set = SampleSet::from_losses("p", losses).unwrap()
                .with_derivative(DerivKey::new(2, 3), (0..n).map(|j| j as f64 * 1e-300).collect()).unwrap();
            let back = SampleSet::parse_csv(&{
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("x.csv");
                set.save(&p).unwrap();
                std::fs::read_to_string(&p).unwrap()
            }).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
