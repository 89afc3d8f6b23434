use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, RngKey};
use crate::{Error, Result};

/// Class index for "refuse"; harmful prompts should land here.
pub const REFUSE: u8 = 0;
/// Class index for "comply".
pub const COMPLY: u8 = 1;

/// Row-major `n × k` inputs with binary labels and a harmful-prompt flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<u8>,
    harmful: Vec<bool>,
    features: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<u8>, harmful: Vec<bool>) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one row".into()));
        }
        if labels.len() != n || harmful.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: labels.len().min(harmful.len()),
            });
        }
        let features = inputs[0].len();
        if features == 0 || inputs.iter().any(|r| r.len() != features) {
            return Err(Error::ShapeMismatch("ragged or empty input rows".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
        }
        Ok(Self {
            inputs: inputs.concat(),
            labels,
            harmful,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn is_harmful(&self, i: usize) -> bool {
        self.harmful[i]
    }

    pub fn harmful_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.harmful[i]).collect()
    }

    /// One row per sample: `x0..x{k-1},label,harmful_flag`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.features).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        header.push("harmful_flag".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.input(i).iter().map(|x| x.to_string()).collect();
            row.push(self.labels[i].to_string());
            row.push(u8::from(self.harmful[i]).to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    /// Inverse of [`Dataset::write_csv`]: every column but the last two is a
    /// feature.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let width = reader.headers()?.len();
        if width < 3 {
            return Err(Error::InvalidConfig(format!("{}: expected features, label, harmful_flag", path.display())));
        }
        let bad = |row: usize| Error::InvalidConfig(format!("{}: malformed row {row}", path.display()));
        let (mut inputs, mut labels, mut harmful) = (Vec::new(), Vec::new(), Vec::new());
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = (0..width - 2)
                .map(|j| record[j].trim().parse::<f64>().map_err(|_| bad(i)))
                .collect::<Result<Vec<f64>>>()?;
            inputs.push(row);
            labels.push(record[width - 2].trim().parse::<u8>().map_err(|_| bad(i))?);
            harmful.push(match record[width - 1].trim() {
                "1" => true,
                "0" => false,
                _ => return Err(bad(i)),
            });
        }
        Self::new(inputs, labels, harmful)
    }
}

/// Two Gaussian clusters in `k` dimensions. The harmful cluster (first half
/// of the rows, rounded up) is centred at `+c·u` and labelled refuse; the
/// benign cluster sits at `-c·u` and is labelled comply, with `u` the unit
/// diagonal, `c = 2` and unit noise. Draws that fall within `0.5` of the
/// separating hyperplane `u·x = 0` (or on its wrong side) are redrawn, so the
/// classes are linearly separable with margin `0.5`.
pub fn make_refusal_dataset(seed: u64, n: usize, k: usize) -> Result<Dataset> {
    if n < 20 || k < 2 {
        return Err(Error::InvalidConfig(format!(
            "refusal dataset needs n >= 20 and k >= 2 (got n = {n}, k = {k})"
        )));
    }
    const CENTER: f64 = 2.0;
    const MARGIN: f64 = 0.5;
    let offset = CENTER / (k as f64).sqrt();
    let harmful_count = n.div_ceil(2);
    let mut rng = RngKey::new(seed, Purpose::Dataset).rng();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut harmful = Vec::with_capacity(n);
    for i in 0..n {
        let is_harmful = i < harmful_count;
        let sign = if is_harmful { 1.0 } else { -1.0 };
        let row = loop {
            let row: Vec<f64> = (0..k)
                .map(|_| sign * offset + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let along = row.iter().sum::<f64>() / (k as f64).sqrt();
            if sign * along >= MARGIN {
                break row;
            }
        };
        inputs.push(row);
        labels.push(if is_harmful { REFUSE } else { COMPLY });
        harmful.push(is_harmful);
    }
    Dataset::new(inputs, labels, harmful)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let d = make_refusal_dataset(9, 24, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        d.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), d);
    }

    #[test]
    fn deterministic_and_sized() {
        let a = make_refusal_dataset(3, 200, 8).unwrap();
        let b = make_refusal_dataset(3, 200, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(a.harmful_indices().len(), 100);
        assert!(a.harmful_indices().iter().all(|&i| a.label(i) == REFUSE));
        assert_ne!(a, make_refusal_dataset(4, 200, 8).unwrap());
    }

    #[test]
    fn separable_with_margin() {
        let d = make_refusal_dataset(11, 400, 5).unwrap();
        for i in 0..d.len() {
            let along = d.input(i).iter().sum::<f64>() / 5f64.sqrt();
            let sign = if d.label(i) == REFUSE { 1.0 } else { -1.0 };
            assert!(sign * along >= 0.5, "row {i}");
        }
    }

    #[test]
    fn rejects_tiny() {
        assert!(make_refusal_dataset(0, 10, 8).is_err());
        assert!(make_refusal_dataset(0, 40, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let d = make_refusal_dataset(1, 20, 2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1,label,harmful_flag"));
        assert_eq!(lines.count(), 20);
        assert!(text.lines().nth(1).unwrap().ends_with(",0,1"));
    }
}
