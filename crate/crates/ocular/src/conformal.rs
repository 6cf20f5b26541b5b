//! Split-conformal calibration of the dynamics model.
//!
//! The nonconformity score of a transition (s, a, s') is the squared
//! Mahalanobis distance of s' under the model's one-step prediction from the
//! known start state, N(As + Ba, Q). Split conformal prediction turns a bag
//! of calibration scores into a quantile q-hat that upper-bounds a fresh
//! score with probability 1 - alpha; dividing by the chi-squared quantile
//! chi2(4, alpha) converts it into a dimensionless covariance scaling
//! xi = q_hat / chi2(4, alpha), so the (1 - alpha) ellipsoid of
//! N(mu, xi * Sigma) is exactly the score
//! region {r <= q_hat}. Local variants first route an input vector through a
//! regression tree fitted on (input, score) pairs and keep one quantile per
//! leaf; a leaf whose calibration bag is too small for the conservative rank
//! gets q-hat = +inf and is treated as "cannot certify anything here".

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::CalRecord;
use crate::dynamics::{predict_point, step_model, DynamicsParams};
use crate::encoder::{EncoderModel, LATENT_DIM};
use crate::error::{Error, Result};
use crate::math::{
    chi2_quantile, mahalanobis_sq, ActionVec, Gaussian4, PredictionRegion, RngStream,
};
use crate::sensor::SemanticFootprint;
use crate::tree::{fit_tree, RegressionTree, TreeConfig};

/// Fraction of the calibration set used to fit the partitioning tree; the
/// remainder feeds the per-leaf quantiles.
pub const PART_FRACTION: f64 = 0.7;
/// Default seed for the partition/quantile split.
pub const DEFAULT_SPLIT_SEED: u64 = 7013;

/// Which calibration scheme a pipeline runs.
///
/// * `NoCp`: trust the model; xi = 1 everywhere.
/// * `SplitCp`: one global quantile, no partitioning.
/// * `PoseLocal`: tree on (p, v, a) — local calibration keyed by pose.
/// * `Ocular`: tree on (v, a, phi) with phi the encoded footprint.
/// * `OcularNoEncode`: tree on (v, a) only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NoCp,
    SplitCp,
    PoseLocal,
    Ocular,
    OcularNoEncode,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoCp => "nocp",
            Variant::SplitCp => "splitcp",
            Variant::PoseLocal => "poselocal",
            Variant::Ocular => "ocular",
            Variant::OcularNoEncode => "ocular-noencode",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "nocp" => Ok(Variant::NoCp),
            "splitcp" => Ok(Variant::SplitCp),
            "poselocal" => Ok(Variant::PoseLocal),
            "ocular" => Ok(Variant::Ocular),
            "ocular-noencode" => Ok(Variant::OcularNoEncode),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected nocp, splitcp, poselocal, ocular, or ocular-noencode)"
            ))),
        }
    }

    /// Length of the tree-input vector; zero for variants that never route.
    pub fn input_dim(self) -> usize {
        match self {
            Variant::NoCp | Variant::SplitCp => 0,
            Variant::PoseLocal => 6,
            Variant::Ocular => 4 + LATENT_DIM,
            Variant::OcularNoEncode => 4,
        }
    }

    pub fn needs_encoder(self) -> bool {
        matches!(self, Variant::Ocular)
    }

    pub fn fits_tree(self) -> bool {
        self.input_dim() > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSpec {
    pub variant: Variant,
    pub alpha: f64,
}

impl PipelineSpec {
    pub fn new(variant: Variant) -> Self {
        PipelineSpec {
            variant,
            alpha: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A calibrated pipeline: the spec, an optional footprint encoder, and a
/// routing tree whose leaves carry (n, q-hat, xi). The trivial variants use a
/// single-leaf tree so prediction never branches on the variant.
#[derive(Debug, Clone)]
pub struct CalibratedPipeline {
    pub spec: PipelineSpec,
    pub encoder: Option<EncoderModel>,
    pub tree: RegressionTree,
    pub chi2_ref: f64,
    /// Seed recorded by the split helper for provenance; zero when the caller
    /// split the data itself.
    pub split_seed: u64,
}

/// Conservative split-conformal quantile: the ceil((n+1)(1-alpha))-th order
/// statistic, or +inf when the rank exceeds n (small bags cannot certify
/// anything at this alpha).
pub fn split_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let t = (n as f64 + 1.0) * (1.0 - alpha);
    // Products like 10 * 0.9 land a few ulps above the exact integer; pull t
    // down relatively before ceil so the rank stays the mathematical one.
    let k = (t - t * 1e-12).ceil() as usize;
    if k == 0 || k > n {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted[k - 1]
}

/// Squared Mahalanobis score of a recorded transition under the model's
/// prediction from the (known) start state.
pub fn record_score(rec: &CalRecord, params: &DynamicsParams) -> Result<f64> {
    let pred = predict_point(&rec.state(), &rec.action(), params);
    mahalanobis_sq(&pred, &rec.s_next)
}

/// Assemble the tree-input vector for a variant.
pub fn process_input(
    variant: Variant,
    p: &[f64; 2],
    v: &[f64; 2],
    a: &[f64; 2],
    fp: Option<&SemanticFootprint>,
    encoder: Option<&EncoderModel>,
) -> Result<Vec<f64>> {
    match variant {
        Variant::NoCp | Variant::SplitCp => Ok(Vec::new()),
        Variant::PoseLocal => Ok(vec![p[0], p[1], v[0], v[1], a[0], a[1]]),
        Variant::OcularNoEncode => Ok(vec![v[0], v[1], a[0], a[1]]),
        Variant::Ocular => {
            let fp = fp.ok_or_else(|| {
                Error::Config("the ocular variant needs a footprint to encode".to_string())
            })?;
            let enc = encoder.ok_or_else(|| {
                Error::Config("the ocular variant needs a trained encoder".to_string())
            })?;
            let phi = enc.encode(fp)?;
            let mut x = Vec::with_capacity(4 + phi.len());
            x.extend_from_slice(&[v[0], v[1], a[0], a[1]]);
            x.extend_from_slice(&phi);
            Ok(x)
        }
    }
}

fn record_input(
    variant: Variant,
    rec: &CalRecord,
    encoder: Option<&EncoderModel>,
) -> Result<Vec<f64>> {
    process_input(
        variant,
        &rec.p,
        &rec.v,
        &rec.a,
        Some(&rec.footprint),
        encoder,
    )
}

/// Split a calibration set into (partition, quantile) halves uniformly at
/// random, keeping record order within each half.
pub fn split_calibration(
    records: &[CalRecord],
    frac_part: f64,
    seed: u64,
) -> (Vec<CalRecord>, Vec<CalRecord>) {
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut idx);
    let n_part = ((n as f64) * frac_part).round() as usize;
    let mut part_idx = idx[..n_part.min(n)].to_vec();
    let mut cp_idx = idx[n_part.min(n)..].to_vec();
    part_idx.sort_unstable();
    cp_idx.sort_unstable();
    let pick = |ids: &[usize]| ids.iter().map(|&i| records[i].clone()).collect();
    (pick(&part_idx), pick(&cp_idx))
}

/// Fit the partitioning tree on `d_part` and the per-leaf quantiles on
/// `d_cp`. The two halves must be disjoint draws from the same distribution;
/// [`split_calibration`] produces such a pair.
pub fn calibrate(
    spec: &PipelineSpec,
    d_part: &[CalRecord],
    d_cp: &[CalRecord],
    encoder: Option<EncoderModel>,
    tree_cfg: &TreeConfig,
    dyn_params: &DynamicsParams,
) -> Result<CalibratedPipeline> {
    spec.validate()?;
    tree_cfg.validate()?;
    let chi2_ref = chi2_quantile(4, spec.alpha)?;
    if spec.variant.needs_encoder() && encoder.is_none() {
        return Err(Error::Config(
            "the ocular variant needs a trained encoder".to_string(),
        ));
    }

    let tree = match spec.variant {
        Variant::NoCp => RegressionTree::single_leaf(0, chi2_ref, 1.0),
        Variant::SplitCp => {
            let scores = d_cp
                .par_iter()
                .map(|r| record_score(r, dyn_params))
                .collect::<Result<Vec<_>>>()?;
            let q_hat = split_quantile(&scores, spec.alpha);
            RegressionTree::single_leaf(d_cp.len(), q_hat, q_hat / chi2_ref)
        }
        _ => {
            if d_part.is_empty() {
                return Err(Error::Config(
                    "partition half of the calibration set is empty".to_string(),
                ));
            }
            let xs: Vec<Vec<f64>> = d_part
                .par_iter()
                .map(|r| record_input(spec.variant, r, encoder.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let rs: Vec<f64> = d_part
                .par_iter()
                .map(|r| record_score(r, dyn_params))
                .collect::<Result<Vec<_>>>()?;
            let mut tree = fit_tree(&xs, &rs, tree_cfg)?;
            let routed: Vec<(usize, f64)> = d_cp
                .par_iter()
                .map(|r| {
                    let x = record_input(spec.variant, r, encoder.as_ref())?;
                    Ok((tree.leaf_of(&x), record_score(r, dyn_params)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); tree.n_leaves()];
            for (leaf, score) in routed {
                buckets[leaf].push(score);
            }
            for (leaf, bucket) in buckets.iter().enumerate() {
                let q_hat = split_quantile(bucket, spec.alpha);
                tree.set_leaf_values(leaf, bucket.len(), q_hat, q_hat / chi2_ref);
            }
            tree
        }
    };

    Ok(CalibratedPipeline {
        spec: *spec,
        encoder,
        tree,
        chi2_ref,
        split_seed: 0,
    })
}

/// Split `records` 70/30 and calibrate, stamping the split seed into the
/// pipeline for provenance.
pub fn fit_pipeline(
    spec: &PipelineSpec,
    records: &[CalRecord],
    encoder: Option<EncoderModel>,
    tree_cfg: &TreeConfig,
    dyn_params: &DynamicsParams,
    split_seed: u64,
) -> Result<CalibratedPipeline> {
    let (d_part, d_cp) = split_calibration(records, PART_FRACTION, split_seed);
    let mut pipe = calibrate(spec, &d_part, &d_cp, encoder, tree_cfg, dyn_params)?;
    pipe.split_seed = split_seed;
    Ok(pipe)
}

/// One calibrated one-step prediction.
#[derive(Debug, Clone)]
pub struct CalibratedPrediction {
    /// Model prediction before scaling.
    pub uncalibrated: Gaussian4,
    /// Covariance scaled by xi; equal to `uncalibrated` when xi is infinite
    /// (an infinite blow-up has no Gaussian form, and downstream consumers
    /// treat the step as uncertifiable via the region instead).
    pub calibrated: Gaussian4,
    /// (1 - alpha) region of the calibrated Gaussian; unbounded when
    /// xi = +inf.
    pub region: PredictionRegion,
    pub leaf_id: usize,
    pub xi: f64,
}

/// Step the model from belief `g` under `action`, route the pipeline input,
/// and scale the predicted covariance by the routed leaf's xi.
pub fn calibrated_predict(
    pipe: &CalibratedPipeline,
    g: &Gaussian4,
    action: &ActionVec,
    fp: Option<&SemanticFootprint>,
    dyn_params: &DynamicsParams,
) -> Result<CalibratedPrediction> {
    let x = process_input(
        pipe.spec.variant,
        &g.mean.position(),
        &g.mean.velocity(),
        &action.to_array(),
        fp,
        pipe.encoder.as_ref(),
    )?;
    Ok(calibrated_predict_with_input(pipe, g, action, &x, dyn_params))
}

/// [`calibrated_predict`] with the tree input already assembled — the
/// planner's fast path, which reuses memoized footprint encodings.
pub fn calibrated_predict_with_input(
    pipe: &CalibratedPipeline,
    g: &Gaussian4,
    action: &ActionVec,
    x: &[f64],
    dyn_params: &DynamicsParams,
) -> CalibratedPrediction {
    let uncal = step_model(g, action, dyn_params);
    let leaf_id = pipe.tree.leaf_of(x);
    let (_, _, xi) = pipe.tree.leaf_values(leaf_id);
    let (calibrated, threshold) = if xi.is_finite() {
        (uncal.scale_cov(xi), pipe.chi2_ref)
    } else {
        (uncal.clone(), f64::INFINITY)
    };
    let region = PredictionRegion {
        center: calibrated.clone(),
        threshold,
    };
    CalibratedPrediction {
        uncalibrated: uncal,
        calibrated,
        region,
        leaf_id,
        xi,
    }
}

fn spec_cfg_text(pipe: &CalibratedPipeline) -> String {
    format!(
        "variant={}\nalpha={}\nlayout={}\nsplit_seed={}\n",
        pipe.spec.variant.as_str(),
        pipe.spec.alpha,
        pipe.spec.variant.input_dim(),
        pipe.split_seed
    )
}

/// Write a pipeline bundle directory: `spec.cfg`, `tree.txt`, and
/// `encoder.bin` when the pipeline carries one.
pub fn save_pipeline(dir: &Path, pipe: &CalibratedPipeline) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.cfg"), spec_cfg_text(pipe))?;
    pipe.tree.save(&dir.join("tree.txt"))?;
    if let Some(enc) = &pipe.encoder {
        enc.save(&dir.join("encoder.bin"))?;
    }
    Ok(())
}

pub fn load_pipeline(dir: &Path) -> Result<CalibratedPipeline> {
    let cfg_path = dir.join("spec.cfg");
    let text = fs::read_to_string(&cfg_path)?;
    let mut variant = None;
    let mut alpha = None;
    let mut layout = None;
    let mut split_seed = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected key=value",
                cfg_path.display(),
                lineno + 1
            ))
        })?;
        match key {
            "variant" => variant = Some(Variant::from_str(value)?),
            "alpha" => {
                alpha = Some(value.parse::<f64>().map_err(|_| {
                    Error::Format(format!("bad alpha value '{value}'"))
                })?)
            }
            "layout" => {
                layout = Some(value.parse::<usize>().map_err(|_| {
                    Error::Format(format!("bad layout value '{value}'"))
                })?)
            }
            "split_seed" => {
                split_seed = value.parse::<u64>().map_err(|_| {
                    Error::Format(format!("bad split_seed value '{value}'"))
                })?
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown key '{other}' in {}",
                    cfg_path.display()
                )))
            }
        }
    }
    let variant =
        variant.ok_or_else(|| Error::Format("spec.cfg is missing 'variant'".to_string()))?;
    let alpha = alpha.ok_or_else(|| Error::Format("spec.cfg is missing 'alpha'".to_string()))?;
    let layout =
        layout.ok_or_else(|| Error::Format("spec.cfg is missing 'layout'".to_string()))?;
    if layout != variant.input_dim() {
        return Err(Error::Format(format!(
            "layout {} does not match variant '{}' (expects {})",
            layout,
            variant.as_str(),
            variant.input_dim()
        )));
    }
    let spec = PipelineSpec { variant, alpha };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let tree = RegressionTree::load(&dir.join("tree.txt"))?;
    let encoder_path = dir.join("encoder.bin");
    let encoder = if encoder_path.exists() {
        Some(EncoderModel::load(&encoder_path)?)
    } else if variant.needs_encoder() {
        return Err(Error::Format(format!(
            "bundle {} has no encoder.bin but variant '{}' needs one",
            dir.display(),
            variant.as_str()
        )));
    } else {
        None
    };
    Ok(CalibratedPipeline {
        spec,
        encoder,
        tree,
        chi2_ref: chi2_quantile(4, alpha)?,
        split_seed,
    })
}
