//! Evaluation: size-weighted validation loss across groups, SNR, and the
//! bank-versus-generic comparison report.

use crate::plpcnet::{teacher_forced_ce, DecoderBank, DecoderModel, DecoderTrainItem};
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Group losses averaged with per-group speaker counts as weights:
/// sum_c n_c L_c / sum_c n_c.
pub fn weighted_validation_loss(losses: &[f64], sizes: &[usize]) -> Result<f64> {
    if losses.len() != sizes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} losses vs {} sizes",
            losses.len(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all groups are empty".into()));
    }
    let weighted: f64 = losses.iter().zip(sizes).map(|(l, n)| l * *n as f64).sum();
    Ok(weighted / total as f64)
}

/// Reported when the reconstruction is bit-exact and the ratio is infinite.
pub const SNR_EXACT_DB: f64 = 99.9;

/// 10 log10(sum s^2 / sum (s - s_hat)^2), in dB.
pub fn snr(reference: &[f64], degraded: &[f64]) -> Result<f64> {
    if reference.len() != degraded.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, degraded {}",
            reference.len(),
            degraded.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty signals".into()));
    }
    let signal: f64 = reference.iter().map(|s| s * s).sum();
    let noise: f64 = reference.iter().zip(degraded).map(|(s, d)| (s - d) * (s - d)).sum();
    if signal == 0.0 {
        return Err(Error::InvalidArgument("reference is silent".into()));
    }
    if noise == 0.0 {
        return Ok(SNR_EXACT_DB);
    }
    Ok(10.0 * (signal / noise).log10())
}

#[derive(Debug, Clone)]
pub struct GroupEval {
    pub group: usize,
    /// Speakers in the group (the validation weight).
    pub size: usize,
    pub bank_ce: f64,
    pub generic_ce: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_group: Vec<GroupEval>,
    pub weighted_bank: f64,
    pub weighted_generic: f64,
    /// (generic - bank) / generic; positive when the bank wins.
    pub relative_improvement: f64,
}

/// Teacher-forced CE of the bank's per-group decoders against one generic
/// decoder, on held-out items grouped the same way, weighted by group size.
pub fn evaluate(
    bank: &DecoderBank,
    generic: &DecoderModel,
    groups: &[Vec<DecoderTrainItem>],
    group_sizes: &[usize],
) -> Result<EvalReport> {
    if groups.len() != bank.num_groups() {
        return Err(Error::InvalidArgument(format!(
            "{} validation groups for a {}-group bank",
            groups.len(),
            bank.num_groups()
        )));
    }
    if groups.len() != group_sizes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} groups vs {} sizes",
            groups.len(),
            group_sizes.len()
        )));
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for (g, items) in groups.iter().enumerate() {
        let bank_ce = teacher_forced_ce(&bank.models[g], items)?;
        let generic_ce = teacher_forced_ce(generic, items)?;
        per_group.push(GroupEval { group: g, size: group_sizes[g], bank_ce, generic_ce });
    }
    let bank_losses: Vec<f64> = per_group.iter().map(|e| e.bank_ce).collect();
    let generic_losses: Vec<f64> = per_group.iter().map(|e| e.generic_ce).collect();
    let weighted_bank = weighted_validation_loss(&bank_losses, group_sizes)?;
    let weighted_generic = weighted_validation_loss(&generic_losses, group_sizes)?;
    Ok(EvalReport {
        per_group,
        weighted_bank,
        weighted_generic,
        relative_improvement: (weighted_generic - weighted_bank) / weighted_generic,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,size,bank_ce,generic_ce\n");
        for e in &self.per_group {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", e.group, e.size, e.bank_ce, e.generic_ce));
        }
        out.push_str(&format!(
            "weighted,{},{:.6},{:.6}\n",
            self.per_group.iter().map(|e| e.size).sum::<usize>(),
            self.weighted_bank,
            self.weighted_generic
        ));
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_loss_spot_value() {
        // (1*4 + 2*4 + 3*7 + 4*5) / 20 = 53/20
        let v = weighted_validation_loss(&[1.0, 2.0, 3.0, 4.0], &[4, 4, 7, 5]).unwrap();
        assert_eq!(v, 2.65);
    }

    #[test]
    fn weighted_loss_uniform_sizes_is_plain_mean() {
        let v = weighted_validation_loss(&[1.0, 3.0], &[5, 5]).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn weighted_loss_rejects_bad_input() {
        assert!(weighted_validation_loss(&[1.0], &[1, 2]).is_err());
        assert!(weighted_validation_loss(&[1.0, 2.0], &[0, 0]).is_err());
    }

    #[test]
    fn snr_exact_match_sentinel() {
        let s = vec![0.5, -0.25, 0.125];
        assert_eq!(snr(&s, &s).unwrap(), SNR_EXACT_DB);
    }

    #[test]
    fn snr_of_calibrated_noise() {
        // noise scaled to exactly 1/100 of the signal energy -> 20 dB
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let signal: Vec<f64> = (0..4000)
            .map(|t| (2.0 * std::f64::consts::PI * 220.0 * t as f64 / 16_000.0).sin())
            .collect();
        let raw_noise: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let es: f64 = signal.iter().map(|v| v * v).sum();
        let en: f64 = raw_noise.iter().map(|v| v * v).sum();
        let k = (es / (100.0 * en)).sqrt();
        let degraded: Vec<f64> = signal.iter().zip(&raw_noise).map(|(s, n)| s + k * n).collect();
        let db = snr(&signal, &degraded).unwrap();
        assert!((db - 20.0).abs() < 0.1, "snr {}", db);
    }

    #[test]
    fn snr_shape_errors() {
        assert!(snr(&[1.0], &[1.0, 2.0]).is_err());
        assert!(snr(&[], &[]).is_err());
        assert!(snr(&[0.0, 0.0], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let report = EvalReport {
            per_group: vec![
                GroupEval { group: 0, size: 2, bank_ce: 1.0, generic_ce: 1.5 },
                GroupEval { group: 1, size: 3, bank_ce: 2.0, generic_ce: 2.5 },
            ],
            weighted_bank: 1.6,
            weighted_generic: 2.1,
            relative_improvement: (2.1 - 1.6) / 2.1,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "group,size,bank_ce,generic_ce");
        assert!(lines[3].starts_with("weighted,5,"));
    }
}
