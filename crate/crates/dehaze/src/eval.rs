//! Checkpoint evaluation over dataset manifests: per-record luminance
//! PSNR/SSIM against the clear reference, coarse-vs-fine comparison tables,
//! and the padded inference path used for arbitrary-size inputs.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{DehazeError, Result};
use crate::haze::{DatasetManifest, Split};
use crate::image::Image;
use crate::metrics::{psnr, ssim, MetricReport};
use crate::model::{generator_forward, ModelConfig, ParameterSet};
use crate::train::load_checkpoint;
use crate::{Real, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Coarse,
    Fine,
    Both,
}

impl Which {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "coarse" => Some(Which::Coarse),
            "fine" => Some(Which::Fine),
            "both" => Some(Which::Both),
            _ => None,
        }
    }

    fn wants_coarse(self) -> bool {
        matches!(self, Which::Coarse | Which::Both)
    }

    fn wants_fine(self) -> bool {
        matches!(self, Which::Fine | Which::Both)
    }
}

/// The restoration function under evaluation: a trained generator, or the
/// identity pass-through used to validate the metric wiring.
pub enum Restorer {
    Generator {
        params: ParameterSet<Real>,
        model: ModelConfig,
    },
    Identity,
}

impl Restorer {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let state = load_checkpoint(path)?;
        Ok(Restorer::Generator {
            params: state.gen,
            model: state.model,
        })
    }

    /// Coarse and fine restorations of a `[3, H, W]` input of arbitrary
    /// size: replicate-pads to a multiple of 8, runs the generator, crops
    /// back to the original dimensions.
    pub fn restore(&self, hazy: &ArrayD<Real>) -> Result<(ArrayD<Real>, ArrayD<Real>)> {
        match self {
            Restorer::Identity => Ok((hazy.clone(), hazy.clone())),
            Restorer::Generator { params, model } => {
                let sh = hazy.shape().to_vec();
                if sh.len() != 3 || sh[0] != 3 {
                    return Err(DehazeError::invalid("restore expects a [3, H, W] array"));
                }
                let (h, w) = (sh[1], sh[2]);
                let padded = pad_to_multiple(hazy, 8);
                let tape = Tape::new();
                let x = tape.leaf(padded);
                let out = generator_forward(&x, &params.bind(&tape), model)?;
                let crop = |v: &crate::Var| {
                    let vsh = v.shape();
                    v.crop2d(0, vsh[1] - h, 0, vsh[2] - w).val().as_ref().clone()
                };
                let result = (crop(&out.coarse), crop(&out.fine));
                tape.clear();
                Ok(result)
            }
        }
    }

    pub fn restore_image(&self, hazy: &Image) -> Result<(Image, Image)> {
        let (coarse, fine) = self.restore(&hazy.to_chw())?;
        Ok((Image::from_chw(&coarse)?, Image::from_chw(&fine)?))
    }
}

/// Edge-replicate padding on the bottom/right up to a multiple of `mult`.
fn pad_to_multiple(x: &ArrayD<Real>, mult: usize) -> ArrayD<Real> {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let round = |n: usize| n.div_ceil(mult) * mult;
    let (hp, wp) = (round(h), round(w));
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    ArrayD::from_shape_fn(IxDyn(&[c, hp, wp]), |ix| {
        x[IxDyn(&[ix[0], ix[1].min(h - 1), ix[2].min(w - 1)])]
    })
}

/// Labelled per-output reports, in `coarse`, `fine` order when both are
/// requested.
pub fn evaluate(
    restorer: &Restorer,
    manifest: &DatasetManifest,
    split: Split,
    which: Which,
) -> Result<Vec<(String, MetricReport)>> {
    let mut coarse_report = MetricReport::default();
    let mut fine_report = MetricReport::default();
    let mut any = false;
    for record in manifest.split_records(split) {
        any = true;
        let id = record
            .hazy_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| record.source_id.clone());
        let attempt = (|| -> Result<(Image, Image, Image)> {
            let hazy = Image::load(&record.hazy_path)?;
            let clear = Image::load(&record.clear_path)?;
            let (coarse, fine) = restorer.restore_image(&hazy)?;
            Ok((coarse, fine, clear))
        })();
        match attempt {
            Ok((coarse, fine, clear)) => {
                if which.wants_coarse() {
                    coarse_report.push(id.clone(), psnr(&coarse, &clear)?, ssim(&coarse, &clear)?);
                }
                if which.wants_fine() {
                    fine_report.push(id, psnr(&fine, &clear)?, ssim(&fine, &clear)?);
                }
            }
            Err(e) => {
                let reason = e.to_string();
                if which.wants_coarse() {
                    coarse_report.push_failure(id.clone(), reason.clone());
                }
                if which.wants_fine() {
                    fine_report.push_failure(id, reason);
                }
            }
        }
    }
    if !any {
        return Err(DehazeError::invalid(format!(
            "manifest has no {} records",
            split.as_str()
        )));
    }
    let mut out = Vec::new();
    if which.wants_coarse() {
        out.push(("coarse".to_string(), coarse_report));
    }
    if which.wants_fine() {
        out.push(("fine".to_string(), fine_report));
    }
    Ok(out)
}

/// Aligned comparison table, one row per report; the same lines parse back
/// with [`parse_compare_table`].
pub fn compare_table(reports: &[(String, MetricReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(DehazeError::invalid("compare_table needs at least one report"));
    }
    let mut s = String::new();
    s.push_str(&format!(
        "{:<12} {:>12} {:>10} {:>7} {:>10}\n",
        "output", "psnr_db", "ssim", "count", "failures"
    ));
    for (label, r) in reports {
        s.push_str(&format!(
            "{:<12} {:>12.4} {:>10.6} {:>7} {:>2} failures\n",
            label,
            r.mean_psnr(),
            r.mean_ssim(),
            r.per_image.len(),
            r.failures.len()
        ));
    }
    Ok(s)
}

/// Rows of `(label, mean psnr, mean ssim, count, failures)`.
pub fn parse_compare_table(text: &str) -> Result<Vec<(String, f64, f64, usize, usize)>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 || fields[5] != "failures" {
            continue;
        }
        let bad = || DehazeError::invalid(format!("unparseable table row: {line}"));
        rows.push((
            fields[0].to_string(),
            fields[1].parse().map_err(|_| bad())?,
            fields[2].parse().map_err(|_| bad())?,
            fields[3].parse().map_err(|_| bad())?,
            fields[4].parse().map_err(|_| bad())?,
        ));
    }
    if rows.is_empty() {
        return Err(DehazeError::invalid("no rows found in comparison table"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::ManifestRecord;
    use crate::metrics::PSNR_CAP_DB;
    use crate::train::TrainState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::path::PathBuf;

    fn write_pair(dir: &Path, idx: usize, identical: bool) -> ManifestRecord {
        let mut rng = ChaCha20Rng::seed_from_u64(idx as u64);
        let clear = Image::from_fn(24, 24, 3, |_, _, _| rng.gen_range(0.1..0.9)).unwrap();
        let hazy = if identical {
            clear.clone()
        } else {
            Image::from_fn(24, 24, 3, |i, j, c| {
                (clear.data()[[i, j, c]] * 0.6 + 0.35).min(1.0)
            })
            .unwrap()
        };
        let clear_path = dir.join(format!("r{idx}_clear.png"));
        let hazy_path = dir.join(format!("r{idx}_hazy.png"));
        clear.save_png(&clear_path).unwrap();
        hazy.save_png(&hazy_path).unwrap();
        ManifestRecord {
            split: Split::Test,
            clear_path,
            hazy_path,
            atmospheric_light: 0.9,
            beta: 1.2,
            seed: idx as u64,
            source_id: format!("r{idx}"),
        }
    }

    #[test]
    fn identity_hook_hits_metric_ceilings() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            records: (0..3).map(|i| write_pair(dir.path(), i, true)).collect(),
            failures: vec![],
        };
        let reports = evaluate(&Restorer::Identity, &manifest, Split::Test, Which::Both).unwrap();
        assert_eq!(reports.len(), 2);
        for (_, r) in &reports {
            assert_eq!(r.per_image.len(), 3);
            for (_, p, s) in &r.per_image {
                assert_eq!(*p, PSNR_CAP_DB);
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generator_eval_deterministic_and_permutation_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = DatasetManifest {
            records: (0..3).map(|i| write_pair(dir.path(), i, false)).collect(),
            failures: vec![],
        };
        let state = TrainState::init(ModelConfig::tiny(), 4);
        let restorer = Restorer::Generator {
            params: state.gen,
            model: state.model,
        };
        let r1 = evaluate(&restorer, &manifest, Split::Test, Which::Fine).unwrap();
        let r2 = evaluate(&restorer, &manifest, Split::Test, Which::Fine).unwrap();
        assert_eq!(r1, r2);

        manifest.records.reverse();
        let r3 = evaluate(&restorer, &manifest, Split::Test, Which::Fine).unwrap();
        assert!((r1[0].1.mean_psnr() - r3[0].1.mean_psnr()).abs() < 1e-12);
        assert!((r1[0].1.mean_ssim() - r3[0].1.mean_ssim()).abs() < 1e-12);
    }

    #[test]
    fn undecodable_record_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![write_pair(dir.path(), 0, true)];
        let mut broken = write_pair(dir.path(), 1, true);
        broken.hazy_path = PathBuf::from(dir.path().join("missing.png"));
        records.push(broken);
        let manifest = DatasetManifest {
            records,
            failures: vec![],
        };
        let reports = evaluate(&Restorer::Identity, &manifest, Split::Test, Which::Fine).unwrap();
        let r = &reports[0].1;
        assert_eq!(r.per_image.len(), 1);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.mean_psnr(), PSNR_CAP_DB); // failure excluded from the mean
    }

    #[test]
    fn restore_preserves_arbitrary_sizes() {
        let state = TrainState::init(ModelConfig::tiny(), 7);
        let restorer = Restorer::Generator {
            params: state.gen,
            model: state.model,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let img = Image::from_fn(21, 13, 3, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let (coarse, fine) = restorer.restore_image(&img).unwrap();
        for out in [&coarse, &fine] {
            assert_eq!((out.height(), out.width()), (21, 13));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn compare_table_round_trip_and_zero_failures() {
        let mut a = MetricReport::default();
        a.push("x", 20.5, 0.91);
        a.push("y", 22.5, 0.93);
        let mut b = MetricReport::default();
        b.push("x", 18.0, 0.85);
        b.push_failure("y", "undecodable");
        let reports = vec![("coarse".to_string(), a), ("fine".to_string(), b)];
        let table = compare_table(&reports).unwrap();
        assert!(table.contains("0 failures"));
        assert!(table.contains("1 failures"));

        let rows = parse_compare_table(&table).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "coarse");
        assert!((rows[0].1 - 21.5).abs() < 1e-3);
        assert!((rows[0].2 - 0.92).abs() < 1e-6);
        assert_eq!(rows[1].3, 1);
        assert_eq!(rows[1].4, 1);
    }
}
