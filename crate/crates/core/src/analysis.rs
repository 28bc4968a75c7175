//! Depth-attention statistics: global per-layer profiles and per-class
//! profiles split by prediction correctness.
//!
//! Layers are numbered from 1 in every exported file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::report::{fmt_f64, parse_csv, parse_field, write_json, write_text};
use crate::training::stats::{mean, sample_std};

pub const GLOBAL_CSV: &str = "attn_global.csv";
pub const CLASSWISE_CSV: &str = "attn_classwise.csv";
pub const SAMPLES_CSV: &str = "attn_samples.csv";
pub const MANIFEST_JSON: &str = "attn_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (`n − 1`); 0 when `n == 1`.
    pub std: Vec<f64>,
}

pub fn global_stats(alpha: &Tensor) -> Result<AttentionStats> {
    if alpha.shape().len() != 2 || alpha.rows() == 0 {
        return Err(Error::Parameter(
            "attention statistics need at least one sample".into(),
        ));
    }
    let (n, l) = (alpha.rows(), alpha.last_dim());
    let cols: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..n).map(|r| alpha.row(r)[i]).collect())
        .collect();
    Ok(AttentionStats {
        n,
        mean: cols.iter().map(|c| mean(c)).collect(),
        std: cols.iter().map(|c| sample_std(c)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Correct,
    Incorrect,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::Correct, Stratum::Incorrect];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Correct => "correct",
            Stratum::Incorrect => "incorrect",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Mean attention per true class within one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumProfile {
    pub stratum: Stratum,
    pub counts: Vec<usize>,
    /// `None` for classes with no samples in this stratum.
    pub means: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseProfile {
    pub num_classes: usize,
    pub num_layers: usize,
    /// In the order all, correct, incorrect.
    pub strata: Vec<StratumProfile>,
}

impl ClasswiseProfile {
    pub fn stratum(&self, s: Stratum) -> &StratumProfile {
        self.strata
            .iter()
            .find(|p| p.stratum == s)
            .expect("every stratum is present")
    }
}

pub fn classwise_profiles(
    alpha: &Tensor,
    labels: &[usize],
    preds: &[usize],
    num_classes: usize,
) -> Result<ClasswiseProfile> {
    let n = alpha.rows();
    if labels.len() != n || preds.len() != n {
        return Err(Error::Contract(format!(
            "{n} attention rows, {} labels, {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if let Some((y, p)) = labels
        .iter()
        .zip(preds)
        .find(|(&y, &p)| y >= num_classes || p >= num_classes)
    {
        return Err(Error::Contract(format!(
            "class pair ({y}, {p}) outside [0, {num_classes})"
        )));
    }
    let l = alpha.last_dim();
    let strata = Stratum::ALL
        .into_iter()
        .map(|s| {
            let mut counts = vec![0usize; num_classes];
            let mut sums = vec![vec![0.0; l]; num_classes];
            for r in 0..n {
                let keep = match s {
                    Stratum::All => true,
                    Stratum::Correct => labels[r] == preds[r],
                    Stratum::Incorrect => labels[r] != preds[r],
                };
                if keep {
                    counts[labels[r]] += 1;
                    for (acc, a) in sums[labels[r]].iter_mut().zip(alpha.row(r)) {
                        *acc += a;
                    }
                }
            }
            let means = sums
                .into_iter()
                .zip(&counts)
                .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
                .collect();
            StratumProfile {
                stratum: s,
                counts,
                means,
            }
        })
        .collect();
    Ok(ClasswiseProfile {
        num_classes,
        num_layers: l,
        strata,
    })
}

pub fn global_csv(stats: &AttentionStats) -> String {
    let mut s = String::from("layer,mean,std\n");
    for (i, (m, sd)) in stats.mean.iter().zip(&stats.std).enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, fmt_f64(*m), fmt_f64(*sd));
    }
    s
}

/// Inverse of [`global_csv`]; the sample count is not part of the file.
pub fn parse_global_csv(text: &str, n: usize) -> Result<AttentionStats> {
    const WHAT: &str = "global attention CSV";
    let (header, rows) = parse_csv(text, WHAT)?;
    if header != ["layer", "mean", "std"] {
        return Err(Error::format(WHAT, format!("unexpected header {header:?}")));
    }
    let mut stats = AttentionStats {
        n,
        mean: Vec::new(),
        std: Vec::new(),
    };
    for (i, row) in rows.iter().enumerate() {
        let layer: usize = parse_field(&row[0], WHAT, "layer")?;
        if layer != i + 1 {
            return Err(Error::format(WHAT, format!("layer {layer} out of order")));
        }
        stats.mean.push(parse_field(&row[1], WHAT, "mean")?);
        stats.std.push(parse_field(&row[2], WHAT, "std")?);
    }
    Ok(stats)
}

/// One row per (stratum, class, layer); empty `mean` where the count is 0.
pub fn classwise_csv(p: &ClasswiseProfile) -> String {
    let mut s = String::from("stratum,class,layer,mean,count\n");
    for sp in &p.strata {
        for c in 0..p.num_classes {
            for i in 0..p.num_layers {
                let m = sp.means[c]
                    .as_ref()
                    .map(|m| fmt_f64(m[i]))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{c},{},{m},{}",
                    sp.stratum.name(),
                    i + 1,
                    sp.counts[c]
                );
            }
        }
    }
    s
}

pub fn parse_classwise_csv(text: &str) -> Result<ClasswiseProfile> {
    const WHAT: &str = "class-wise attention CSV";
    let (header, rows) = parse_csv(text, WHAT)?;
    if header != ["stratum", "class", "layer", "mean", "count"] {
        return Err(Error::format(WHAT, format!("unexpected header {header:?}")));
    }
    let mut c_max = 0;
    let mut l_max = 0;
    let mut parsed = Vec::with_capacity(rows.len());
    for row in &rows {
        let s = Stratum::parse(&row[0])
            .ok_or_else(|| Error::format(WHAT, format!("field `stratum`: unknown {:?}", row[0])))?;
        let c: usize = parse_field(&row[1], WHAT, "class")?;
        let l: usize = parse_field(&row[2], WHAT, "layer")?;
        if l == 0 {
            return Err(Error::format(
                WHAT,
                "field `layer`: layers are numbered from 1",
            ));
        }
        let m: Option<f64> = if row[3].is_empty() {
            None
        } else {
            Some(parse_field(&row[3], WHAT, "mean")?)
        };
        let count: usize = parse_field(&row[4], WHAT, "count")?;
        c_max = c_max.max(c + 1);
        l_max = l_max.max(l);
        parsed.push((s, c, l - 1, m, count));
    }
    let mut strata: Vec<StratumProfile> = Stratum::ALL
        .into_iter()
        .map(|s| StratumProfile {
            stratum: s,
            counts: vec![0; c_max],
            means: vec![None; c_max],
        })
        .collect();
    for (s, c, i, m, count) in parsed {
        let sp = &mut strata[Stratum::ALL.iter().position(|&x| x == s).unwrap()];
        sp.counts[c] = count;
        if let Some(m) = m {
            sp.means[c].get_or_insert_with(|| vec![0.0; l_max])[i] = m;
        }
    }
    Ok(ClasswiseProfile {
        num_classes: c_max,
        num_layers: l_max,
        strata,
    })
}

/// Per-sample attention rows, tagged with the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAttention<'a> {
    pub seed: u64,
    pub alpha: &'a Tensor,
    pub labels: &'a [usize],
    pub preds: &'a [usize],
}

pub fn samples_csv(parts: &[SampleAttention<'_>]) -> String {
    let l = parts.first().map_or(0, |p| p.alpha.last_dim());
    let mut s = String::from("seed,sample,label,prediction");
    for i in 1..=l {
        let _ = write!(s, ",alpha_{i}");
    }
    s.push('\n');
    for p in parts {
        for r in 0..p.alpha.rows() {
            let _ = write!(s, "{},{r},{},{}", p.seed, p.labels[r], p.preds[r]);
            for a in p.alpha.row(r) {
                let _ = write!(s, ",{}", fmt_f64(*a));
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub num_samples: usize,
    pub num_layers: usize,
    pub global_csv: String,
    pub classwise_csv: String,
    pub samples_csv: Option<String>,
}

/// Writes the global and class-wise CSVs, optionally the per-sample dump,
/// and a manifest tying them to `config_hash`.
pub fn export_report(
    dir: &Path,
    stats: &AttentionStats,
    profile: &ClasswiseProfile,
    samples: Option<&[SampleAttention<'_>]>,
    config_hash: &str,
    seeds: &[u64],
) -> Result<AttentionManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(GLOBAL_CSV), &global_csv(stats))?;
    write_text(&dir.join(CLASSWISE_CSV), &classwise_csv(profile))?;
    if let Some(parts) = samples {
        write_text(&dir.join(SAMPLES_CSV), &samples_csv(parts))?;
    }
    let manifest = AttentionManifest {
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        num_samples: stats.n,
        num_layers: stats.mean.len(),
        global_csv: GLOBAL_CSV.into(),
        classwise_csv: CLASSWISE_CSV.into(),
        samples_csv: samples.map(|_| SAMPLES_CSV.to_string()),
    };
    write_json(&dir.join(MANIFEST_JSON), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_rows() {
        let s = global_stats(&t(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]])).unwrap();
        assert_eq!(s.mean, vec![0.25; 4]);
        assert_eq!(s.std, vec![0.0; 4]);
    }

    #[test]
    fn opposite_one_hot_rows() {
        let s = global_stats(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s.mean, vec![0.5, 0.5]);
        for sd in s.std {
            assert!((sd - 0.5f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_input_is_parameter_error() {
        let empty = Tensor::new(vec![0, 2], vec![]);
        if let Ok(e) = empty {
            assert!(matches!(global_stats(&e), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn hand_computed_strata() {
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let p = classwise_profiles(&a, &[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(p.stratum(Stratum::All).means[0], Some(vec![0.5, 0.5]));
        assert_eq!(p.stratum(Stratum::Correct).means[0], Some(vec![1.0, 0.0]));
        assert_eq!(p.stratum(Stratum::Incorrect).means[0], Some(vec![0.0, 1.0]));
        assert_eq!(p.stratum(Stratum::All).means[1], Some(vec![0.5, 0.5]));
        assert_eq!(p.stratum(Stratum::Incorrect).counts[1], 0);
        assert_eq!(p.stratum(Stratum::Incorrect).means[1], None);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let a = t(&[&[1.0]]);
        assert!(matches!(
            classwise_profiles(&a, &[0, 0], &[0], 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn csv_round_trips_and_empty_strata_have_blank_means() {
        let a = t(&[&[0.1, 0.9], &[0.3, 0.7], &[2.0 / 3.0, 1.0 / 3.0]]);
        let stats = global_stats(&a).unwrap();
        assert_eq!(parse_global_csv(&global_csv(&stats), 3).unwrap(), stats);

        let p = classwise_profiles(&a, &[0, 1, 1], &[0, 1, 1], 3).unwrap();
        let text = classwise_csv(&p);
        assert!(text.contains("incorrect,0,1,,0\n"));
        assert!(text.contains("all,2,2,,0\n"));
        assert_eq!(parse_classwise_csv(&text).unwrap(), p);
    }
}
