//! Layer-wise robustness sensitivity.
//!
//! `S(ℓ) = S_noise(ℓ) + λ·S_quant(ℓ)`, where `S_noise` is the mean loss
//! increase from Gaussian noise on layer ℓ alone and `S_quant` the loss
//! change from quantizing layer ℓ alone. The `m` highest-scoring layers form
//! the refinement mask. SNIP- and WANDA-style layer scores are provided for
//! comparison.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::{Batch, MlpObjective, Objective};
use crate::params::{LayerId, LayerMask, LayeredParams};
use crate::perturb::{quantize_block, PerturbSpec};
use crate::rng::RngKey;
use crate::zo::MonteCarlo;
use crate::{Error, Result};

fn finite(value: f64, layer: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            value,
            context: format!("sensitivity of layer {layer}"),
        })
    }
}

/// Per-trial loss increases from `θ_ℓ ← θ_ℓ + ρ·v_ℓ`. Trial `t` of layer `ℓ`
/// draws from `key.at_step(ℓ).at_index(t)`.
pub fn noise_sensitivity_mc(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    layer: usize,
    rho: f64,
    n_trials: usize,
    key: RngKey,
) -> Result<MonteCarlo> {
    if n_trials == 0 || !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise sensitivity needs n_trials >= 1 and rho > 0 (got {n_trials}, {rho})"
        )));
    }
    let block = &params.layer(layer)?.values;
    let base = finite(obj.loss(params, batch), layer)?;
    let deltas = (0..n_trials as u64)
        .map(|t| {
            let mut rng = key.at_step(layer as u64).at_index(t).rng();
            let noisy = crate::perturb::add_weight_noise(
                &LayeredParams::single(block.clone())?,
                rho,
                &mut rng,
            );
            let perturbed = params.with_layer(layer, noisy.flatten())?;
            Ok(finite(obj.loss(&perturbed, batch), layer)? - base)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MonteCarlo::from_samples(&deltas))
}

pub fn noise_sensitivity(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    layer: usize,
    rho: f64,
    n_trials: usize,
    key: RngKey,
) -> Result<f64> {
    Ok(noise_sensitivity_mc(obj, params, batch, layer, rho, n_trials, key)?.mean)
}

pub fn quant_sensitivity(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    layer: usize,
    bits: u32,
) -> Result<f64> {
    PerturbSpec::quant(bits, None)?;
    let quantized = quantize_block(&params.layer(layer)?.values, bits);
    let perturbed = params.with_layer(layer, quantized)?;
    let base = finite(obj.loss(params, batch), layer)?;
    Ok(finite(obj.loss(&perturbed, batch), layer)? - base)
}

pub fn combined_score(s_noise: f64, s_quant: f64, lambda: f64) -> f64 {
    s_noise + lambda * s_quant
}

/// Indices of the `m` largest scores; ties go to the lower index.
pub fn top_m_indices(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::BadM {
            m,
            layers: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order.sort_unstable();
    Ok(order)
}

pub fn top_m_layers(template: &LayeredParams, scores: &[f64], m: usize) -> Result<LayerMask> {
    if scores.len() != template.num_layers() {
        return Err(Error::LengthMismatch {
            expected: template.num_layers(),
            got: scores.len(),
        });
    }
    LayerMask::new(template, top_m_indices(scores, m)?)
}

/// `(s − min)/(max − min)`; all-equal input maps to zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

/// SNIP-style saliency per layer: `Σ |gᵢ·wᵢ|` over the block.
pub fn snip_layer_scores(obj: &dyn Objective, params: &LayeredParams, batch: &Batch) -> Result<Vec<f64>> {
    let grad = obj
        .gradient(params, batch)
        .ok_or_else(|| Error::GradUnavailable(obj.name().to_string()))?;
    Ok(params
        .layers()
        .iter()
        .zip(grad.layers())
        .map(|(w, g)| w.values.iter().zip(&g.values).map(|(a, b)| (a * b).abs()).sum())
        .collect())
}

/// WANDA-style saliency per layer: `Σ_{o,j} |W_oj|·‖X_j‖₂`, with `X_j` the
/// j-th input feature of the layer across the probe batch. Biases carry no
/// input activation and are left out.
pub fn wanda_layer_scores(mlp: &MlpObjective, params: &LayeredParams, probe: &Batch) -> Vec<f64> {
    let widths = &mlp.spec().widths;
    mlp.layer_inputs(params, probe)
        .iter()
        .enumerate()
        .map(|(i, inputs)| {
            let (n_in, n_out) = (widths[i], widths[i + 1]);
            let col_norms: Vec<f64> = (0..n_in)
                .map(|j| inputs.iter().map(|x| x[j] * x[j]).sum::<f64>().sqrt())
                .collect();
            let w = &params.layers()[i].values[..n_in * n_out];
            (0..n_out)
                .flat_map(|o| (0..n_in).map(move |j| (o, j)))
                .map(|(o, j)| w[o * n_in + j].abs() * col_norms[j])
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub rho: f64,
    pub lambda: f64,
    pub n_trials: usize,
    pub m: usize,
    pub quant_bits: u32,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda: 1.0,
            n_trials: 8,
            m: 4,
            quant_bits: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: LayerId,
    pub s_noise: f64,
    pub s_quant: f64,
    pub s_combined: f64,
    pub normalized: Option<f64>,
    pub selected: bool,
    pub snip: Option<f64>,
    pub wanda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    pub lambda: f64,
    pub rho: f64,
    pub n_trials: usize,
    pub quant_bits: u32,
    pub selected: LayerMask,
}

impl SensitivityReport {
    pub fn combined(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.s_combined).collect()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.indices().collect()
    }

    /// Attach baseline saliency columns.
    pub fn with_baselines(mut self, snip: Option<Vec<f64>>, wanda: Option<Vec<f64>>) -> Self {
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.snip = snip.as_ref().map(|s| s[i]);
            row.wanda = wanda.as_ref().map(|s| s[i]);
        }
        self
    }

    /// Replace the selection (for layers picked by a baseline strategy).
    pub fn with_selection(mut self, mask: LayerMask) -> Self {
        for row in &mut self.rows {
            row.selected = mask.contains(row.layer.index);
        }
        self.selected = mask;
        self
    }

    /// Columns: `layer_index,layer_name,s_noise,s_quant,s_combined,normalized,selected,snip,wanda`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer_index",
            "layer_name",
            "s_noise",
            "s_quant",
            "s_combined",
            "normalized",
            "selected",
            "snip",
            "wanda",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.layer.index.to_string(),
                r.layer.name.clone(),
                r.s_noise.to_string(),
                r.s_quant.to_string(),
                r.s_combined.to_string(),
                opt(r.normalized),
                u8::from(r.selected).to_string(),
                opt(r.snip),
                opt(r.wanda),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Layer indices whose `selected` column is 1 in a sensitivity CSV.
pub fn read_selection_csv(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidConfig(format!("{}: missing column `{name}`", path.display())))
    };
    let (idx_col, sel_col) = (col("layer_index")?, col("selected")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse_err = || Error::InvalidConfig(format!("{}: malformed row {record:?}", path.display()));
        let index: usize = record[idx_col].trim().parse().map_err(|_| parse_err())?;
        match record[sel_col].trim() {
            "1" => out.push(index),
            "0" => {}
            _ => return Err(parse_err()),
        }
    }
    Ok(out)
}

/// Score every layer (in parallel, assembled in layer order) and select the
/// top `m` by combined score.
pub fn compute_sensitivity(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    cfg: &SensitivityConfig,
    key: RngKey,
) -> Result<SensitivityReport> {
    if cfg.lambda < 0.0 {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let scores: Vec<(f64, f64)> = (0..params.num_layers())
        .into_par_iter()
        .map(|l| {
            let s_noise = noise_sensitivity(obj, params, batch, l, cfg.rho, cfg.n_trials, key)?;
            let s_quant = quant_sensitivity(obj, params, batch, l, cfg.quant_bits)?;
            Ok((s_noise, s_quant))
        })
        .collect::<Result<_>>()?;
    let combined: Vec<f64> = scores
        .iter()
        .map(|&(n, q)| combined_score(n, q, cfg.lambda))
        .collect();
    let selected = top_m_layers(params, &combined, cfg.m)?;
    let normalized = minmax_normalize(&combined);
    let rows = params
        .layer_ids()
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (layer, (s_noise, s_quant)))| SensitivityRow {
            layer,
            s_noise,
            s_quant,
            s_combined: combined[i],
            normalized: Some(normalized[i]),
            selected: selected.contains(i),
            snip: None,
            wanda: None,
        })
        .collect();
    Ok(SensitivityReport {
        rows,
        lambda: cfg.lambda,
        rho: cfg.rho,
        n_trials: cfg.n_trials,
        quant_bits: cfg.quant_bits,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{linear_objective, QuadraticObjective};
    use crate::rng::Purpose;

    #[test]
    fn combined_arithmetic() {
        assert!((combined_score(0.3, 0.2, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(combined_score(0.3, 0.2, 0.0), 0.3);
        assert_eq!(combined_score(1.0, -0.5, 2.0), 0.0);
    }

    #[test]
    fn top_m_examples() {
        assert_eq!(top_m_indices(&[0.1, 0.9, 0.5, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_m_indices(&[1.0; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_m_indices(&[0.3, 0.1, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(top_m_indices(&[1.0, 2.0], 0), Err(Error::BadM { .. })));
        assert!(matches!(top_m_indices(&[1.0, 2.0], 3), Err(Error::BadM { .. })));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0]), vec![0.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn snip_hand_example() {
        let q = QuadraticObjective::diagonal(&[4.0, 1.0], &[2]).unwrap();
        let p = LayeredParams::single(vec![1.0, 1.0]).unwrap();
        assert_eq!(snip_layer_scores(&q, &p, &Batch::full()).unwrap(), vec![5.0]);
        let zero_grad = linear_objective(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(snip_layer_scores(&zero_grad, &p, &Batch::full()).unwrap(), vec![0.0]);
    }

    #[test]
    fn noise_sensitivity_matches_block_trace() {
        // E[S_noise(ℓ)] = ρ²/2 · tr(A_ℓℓ) for block-diagonal A
        let q = QuadraticObjective::diagonal(&[4.0, 1.0, 0.5, 2.0], &[1, 3]).unwrap();
        let p = LayeredParams::new(vec![("a", vec![0.3]), ("b", vec![1.0, -0.5, 0.2])]).unwrap();
        let rho = 0.2;
        for layer in 0..2 {
            let mc = noise_sensitivity_mc(&q, &p, &Batch::full(), layer, rho, 10_000, RngKey::new(1, Purpose::Test))
                .unwrap();
            let expected = rho * rho / 2.0 * q.block_trace(layer).unwrap();
            assert!((mc.mean - expected).abs() <= 3.0 * mc.std_err, "layer {layer}: {mc:?} vs {expected}");
        }
    }

    #[test]
    fn flat_layer_scores_zero_and_small_rho_vanishes() {
        let q = QuadraticObjective::diagonal(&[0.0, 3.0], &[1, 1]).unwrap();
        let p = LayeredParams::new(vec![("a", vec![0.7]), ("b", vec![0.0])]).unwrap();
        let key = RngKey::new(2, Purpose::Test);
        assert_eq!(noise_sensitivity(&q, &p, &Batch::full(), 0, 0.5, 8, key).unwrap(), 0.0);
        let tiny = noise_sensitivity(&q, &p, &Batch::full(), 1, 1e-6, 8, key).unwrap();
        assert!(tiny.abs() <= 1e-6 * 3.0);
    }

    #[test]
    fn quant_sensitivity_fixed_point_and_composition() {
        let q = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], &[1, 2]).unwrap();
        let on_grid = LayeredParams::new(vec![("a", vec![1.0]), ("b", vec![-1.0, 3.0 / 7.0])]).unwrap();
        assert_eq!(quant_sensitivity(&q, &on_grid, &Batch::full(), 1, 4).unwrap(), 0.0);

        let p = LayeredParams::new(vec![("a", vec![0.37]), ("b", vec![-0.81, 0.29])]).unwrap();
        let spec: PerturbSpec = "quant:w4a16@1".parse().unwrap();
        let direct = q.loss(&crate::perturb::quantize_model(&p, &spec).unwrap(), &Batch::full())
            - q.loss(&p, &Batch::full());
        assert_eq!(quant_sensitivity(&q, &p, &Batch::full(), 1, 4).unwrap(), direct);
    }

    #[test]
    fn report_selects_and_serializes() {
        let q = QuadraticObjective::diagonal(&[1.0, 5.0, 0.1, 3.0], &[1, 1, 1, 1]).unwrap();
        let p = LayeredParams::new(vec![("a", vec![0.5]), ("b", vec![0.5]), ("c", vec![0.5]), ("d", vec![0.5])])
            .unwrap();
        let cfg = SensitivityConfig {
            rho: 0.3,
            n_trials: 2000,
            m: 2,
            ..SensitivityConfig::default()
        };
        let report = compute_sensitivity(&q, &p, &Batch::full(), &cfg, RngKey::new(4, Purpose::Test)).unwrap();
        assert_eq!(report.selected_indices(), vec![1, 3]);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer_index,layer_name,s_noise,s_quant,s_combined,normalized,selected,snip,wanda\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
