//! Monte-Carlo validation of calibrated prediction regions.
//!
//! For each held-out test transition the harness builds the method's region
//! from the point-state model prediction and the pipeline's routed xi, then
//! scores it two ways against particles drawn from the *true* one-step law:
//!
//! * empirical coverage — the fraction of particles inside the region;
//! * volume against an oracle — the smallest isotropic scaling xi* of the
//!   uncalibrated covariance whose region reaches 1-alpha coverage on those
//!   same particles. In four dimensions an ellipsoid's volume scales as
//!   xi^{d/2}, so the reported ratio is (xi/xi*)^2.
//!
//! Results aggregate per (method, terrain type of the start state): mean
//! coverage and median volume ratio, the summary the planning stack's claims
//! rest on.

use rayon::prelude::*;

use crate::conformal::{calibrated_predict, CalibratedPipeline};
use crate::dataset::TestCase;
use crate::dynamics::{DynamicsParams, RegionType};
use crate::error::Result;
use crate::math::{chi2_quantile, mahalanobis_sq, Gaussian4, PredictionRegion, StateVec};
use crate::planner::{Episode, Outcome};

/// Fraction of particles inside the region; an unbounded region covers
/// everything by definition.
pub fn empirical_coverage(region: &PredictionRegion, particles: &[StateVec]) -> Result<f64> {
    assert!(!particles.is_empty(), "coverage needs at least one particle");
    if region.is_unbounded() {
        return Ok(1.0);
    }
    let mut inside = 0usize;
    for p in particles {
        if region.contains(p)? {
            inside += 1;
        }
    }
    Ok(inside as f64 / particles.len() as f64)
}

/// Smallest isotropic covariance scaling achieving 1-alpha empirical
/// coverage: the rank-ceil(n(1-alpha)) order statistic of the particles'
/// squared Mahalanobis scores under the uncalibrated Gaussian, divided by
/// the chi-squared quantile that a correctly-specified model would need.
pub fn oracle_xi(uncal: &Gaussian4, particles: &[StateVec], alpha: f64) -> Result<f64> {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let n = particles.len();
    assert!(
        n as f64 >= 1.0 / alpha,
        "oracle needs at least 1/alpha particles, got {n}"
    );
    let mut scores = Vec::with_capacity(n);
    for p in particles {
        scores.push(mahalanobis_sq(uncal, p)?);
    }
    scores.sort_unstable_by(f64::total_cmp);
    // Nudge against FP artifacts like 10 * 0.9 = 9.000000000000002 before
    // taking the ceiling.
    let t = n as f64 * (1.0 - alpha);
    let k = ((t - t * 1e-12).ceil() as usize).max(1);
    Ok(scores[k - 1] / chi2_quantile(4, alpha)?)
}

/// Volume of the method's region relative to the oracle's, in 4-d state
/// space: (xi_used/xi_star)^2. Exactly 1 when they agree; +inf for an
/// uncertifiable (infinite) xi.
pub fn volume_ratio(xi_used: f64, xi_star: f64) -> f64 {
    assert!(
        xi_star > 0.0 && xi_star.is_finite(),
        "oracle scaling must be positive and finite, got {xi_star}"
    );
    if xi_used.is_infinite() {
        return f64::INFINITY;
    }
    let r = xi_used / xi_star;
    r * r
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub method: String,
    pub region: RegionType,
    pub n_cases: usize,
    pub mean_coverage: f64,
    pub median_volume_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

pub fn region_name(r: RegionType) -> &'static str {
    match r {
        RegionType::Nominal => "nominal",
        RegionType::Slippery => "slippery",
    }
}

impl CoverageReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,region_type,n_cases,mean_coverage,median_volume_ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method,
                region_name(r.region),
                r.n_cases,
                r.mean_coverage,
                r.median_volume_ratio
            ));
        }
        out
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Score a calibrated pipeline on held-out test cases: per case, coverage of
/// the routed region and its volume against the per-case oracle, aggregated
/// by the terrain type the case starts on.
pub fn evaluate_pipeline(
    pipe: &CalibratedPipeline,
    cases: &[TestCase],
    dyn_params: &DynamicsParams,
) -> Result<CoverageReport> {
    let alpha = pipe.spec.alpha;
    let per_case: Vec<(RegionType, f64, f64)> = cases
        .par_iter()
        .map(|case| {
            let rec = &case.record;
            let g0 = Gaussian4::point(rec.state());
            let pred = calibrated_predict(
                pipe,
                &g0,
                &rec.action(),
                Some(&rec.footprint),
                dyn_params,
            )?;
            let cov = empirical_coverage(&pred.region, &case.particles)?;
            let xi_star = oracle_xi(&pred.uncalibrated, &case.particles, alpha)?;
            Ok((rec.region, cov, volume_ratio(pred.xi, xi_star)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for region in [RegionType::Nominal, RegionType::Slippery] {
        let mut coverages = Vec::new();
        let mut ratios = Vec::new();
        for (r, cov, ratio) in &per_case {
            if *r == region {
                coverages.push(*cov);
                ratios.push(*ratio);
            }
        }
        if coverages.is_empty() {
            continue;
        }
        ratios.sort_unstable_by(f64::total_cmp);
        rows.push(CoverageRow {
            method: pipe.spec.variant.as_str().to_string(),
            region,
            n_cases: coverages.len(),
            mean_coverage: coverages.iter().sum::<f64>() / coverages.len() as f64,
            median_volume_ratio: median(&ratios),
        });
    }
    Ok(CoverageReport { rows })
}

/// Success rate and step statistics of a batch of episodes. Step statistics
/// are over the successful runs only; a method with no successes has none.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub n_episodes: usize,
    pub n_success: usize,
    pub n_collision: usize,
    pub n_timeout: usize,
    /// (mean, sample standard deviation) of steps over successes.
    pub steps: Option<(f64, f64)>,
}

impl EpisodeSummary {
    pub fn success_percent(&self) -> f64 {
        100.0 * self.n_success as f64 / self.n_episodes as f64
    }
}

pub fn summarize_episodes(episodes: &[Episode]) -> EpisodeSummary {
    assert!(!episodes.is_empty(), "summary needs at least one episode");
    let mut steps = Vec::new();
    let mut n_collision = 0;
    let mut n_timeout = 0;
    for ep in episodes {
        match ep.outcome {
            Outcome::Success => steps.push(ep.steps as f64),
            Outcome::Collision => n_collision += 1,
            Outcome::Timeout => n_timeout += 1,
        }
    }
    let stats = if steps.is_empty() {
        None
    } else {
        let n = steps.len() as f64;
        let mean = steps.iter().sum::<f64>() / n;
        let std = if steps.len() > 1 {
            (steps.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some((mean, std))
    };
    EpisodeSummary {
        n_episodes: episodes.len(),
        n_success: steps.len(),
        n_collision,
        n_timeout,
        steps: stats,
    }
}

/// Episode summaries as CSV, one row per method. Methods without a single
/// success print `--` for the step columns.
pub fn episode_summary_csv(rows: &[(String, EpisodeSummary)]) -> String {
    let mut out = String::from("method,n_episodes,success_percent,steps_mean,steps_std\n");
    for (method, s) in rows {
        match s.steps {
            Some((mean, std)) => out.push_str(&format!(
                "{},{},{},{},{}\n",
                method,
                s.n_episodes,
                s.success_percent(),
                mean,
                std
            )),
            None => out.push_str(&format!(
                "{},{},{},--,--\n",
                method,
                s.n_episodes,
                s.success_percent()
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate, PipelineSpec, Variant};
    use crate::dataset::CalRecord;
    use crate::dynamics::exact_onestep_distribution;
    use crate::math::{region_of, sample_gaussian, RngStream};
    use crate::planner::TraceStep;
    use crate::sensor::SemanticFootprint;
    use crate::tree::{RegressionTree, TreeConfig};
    use crate::world::SemanticClass;

    fn diag_gaussian(mean: [f64; 4], var: f64) -> Gaussian4 {
        let mut cov = [[0.0; 4]; 4];
        for k in 0..4 {
            cov[k][k] = var;
        }
        Gaussian4::new(StateVec::from_array(mean), cov)
    }

    fn draw(g: &Gaussian4, n: usize, seed: u64) -> Vec<StateVec> {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| sample_gaussian(g, &mut rng).unwrap()).collect()
    }

    fn nocp_pipe() -> CalibratedPipeline {
        calibrate(
            &PipelineSpec::new(Variant::NoCp),
            &[],
            &[],
            None,
            &TreeConfig::default(),
            &DynamicsParams::default(),
        )
        .unwrap()
    }

    fn tiny_footprint() -> SemanticFootprint {
        SemanticFootprint {
            n_angles: 1,
            n_depths: 1,
            classes: vec![SemanticClass::FreeNominal],
        }
    }

    #[test]
    fn coverage_counts_particles_inside() {
        let g = diag_gaussian([0.0; 4], 1.0);
        let region = region_of(&g, 0.1).unwrap();
        let at_mean = vec![StateVec::new(0.0, 0.0, 0.0, 0.0); 7];
        assert_eq!(empirical_coverage(&region, &at_mean).unwrap(), 1.0);

        let zero_region = PredictionRegion {
            center: g.clone(),
            threshold: 0.0,
        };
        let scattered = draw(&g, 500, 9);
        assert_eq!(empirical_coverage(&zero_region, &scattered).unwrap(), 0.0);

        let unbounded = PredictionRegion {
            center: g,
            threshold: f64::INFINITY,
        };
        assert_eq!(empirical_coverage(&unbounded, &scattered).unwrap(), 1.0);
    }

    #[test]
    fn coverage_of_the_exact_region_hits_the_nominal_level() {
        let g = diag_gaussian([0.5, -1.0, 0.2, 0.0], 0.37);
        let region = region_of(&g, 0.1).unwrap();
        let mut total = 0.0;
        let trials = 200;
        let per = 100;
        for t in 0..trials {
            let mut rng = RngStream::substream(71, t);
            let particles: Vec<StateVec> = (0..per)
                .map(|_| sample_gaussian(&g, &mut rng).unwrap())
                .collect();
            total += empirical_coverage(&region, &particles).unwrap();
        }
        let mean = total / trials as f64;
        // 3 sigma of a binomial mean over 20_000 draws at p = 0.9.
        let band = 3.0 * (0.9 * 0.1 / (trials * per) as f64).sqrt();
        assert!(
            (mean - 0.9).abs() < band,
            "mean {mean} outside 0.9 +- {band}"
        );
    }

    #[test]
    fn oracle_is_near_one_when_particles_match_the_gaussian() {
        let g = diag_gaussian([1.0, 2.0, -0.5, 0.3], 0.8);
        let particles = draw(&g, 10_000, 17);
        let xi = oracle_xi(&g, &particles, 0.1).unwrap();
        assert!((xi - 1.0).abs() < 0.05, "xi {xi}");
    }

    #[test]
    fn oracle_recovers_an_inflated_covariance() {
        let g = diag_gaussian([0.0; 4], 0.5);
        let wide = g.scale_cov(4.0);
        let particles = draw(&wide, 10_000, 23);
        let xi = oracle_xi(&g, &particles, 0.1).unwrap();
        assert!((xi - 4.0).abs() < 0.2, "xi {xi}");
    }

    #[test]
    fn oracle_two_particle_arithmetic() {
        let g = diag_gaussian([0.0; 4], 1.0);
        // Scores are the squared norms: 4*(0.5)^2 = 1.0 and 4*1.0 = 4.0;
        // alpha = 0.5 with n = 2 takes rank ceil(1.0) = 1, the smaller.
        let particles = vec![
            StateVec::new(0.5, 0.5, 0.5, 0.5),
            StateVec::new(1.0, 1.0, 1.0, 1.0),
        ];
        let xi = oracle_xi(&g, &particles, 0.5).unwrap();
        let expect = 1.0 / chi2_quantile(4, 0.5).unwrap();
        assert_eq!(xi.to_bits(), expect.to_bits());
    }

    #[test]
    fn volume_ratio_scaling_laws() {
        assert_eq!(volume_ratio(1.25, 1.25), 1.0);
        assert_eq!(volume_ratio(2.0, 1.0), 4.0);
        assert_eq!(volume_ratio(1.0, 2.0), 0.25);
        assert!(volume_ratio(f64::INFINITY, 3.0).is_infinite());
        let mut prev = 0.0;
        for xi in [0.1, 0.5, 1.0, 2.0, 7.0] {
            let r = volume_ratio(xi, 1.3);
            assert!(r > prev);
            prev = r;
        }
    }

    /// Test cases whose particles come from the exact one-step law, starting
    /// on the requested terrain.
    fn synthetic_cases(
        region: RegionType,
        n_cases: usize,
        n_particles: usize,
        master: u64,
        params: &DynamicsParams,
    ) -> Vec<TestCase> {
        (0..n_cases)
            .map(|i| {
                let mut rng = RngStream::substream(master, i as u64);
                let p = [rng.next_f64(), rng.next_f64()];
                let v = [rng.next_f64() - 0.5, rng.next_f64() - 0.5];
                let a = [rng.next_f64() - 0.5, rng.next_f64() - 0.5];
                let rec = CalRecord {
                    p,
                    v,
                    a,
                    s_next: StateVec::new(0.0, 0.0, 0.0, 0.0),
                    region,
                    footprint: tiny_footprint(),
                };
                let law = exact_onestep_distribution(&rec.state(), &rec.action(), region, params);
                let particles = (0..n_particles)
                    .map(|_| sample_gaussian(&law, &mut rng).unwrap())
                    .collect();
                TestCase { record: rec, particles }
            })
            .collect()
    }

    #[test]
    fn matched_model_covers_at_the_nominal_rate_and_oracle_ratio_is_one() {
        let params = DynamicsParams::default();
        let pipe = nocp_pipe();
        let cases = synthetic_cases(RegionType::Nominal, 40, 500, 31, &params);
        let report = evaluate_pipeline(&pipe, &cases, &params).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.method, "nocp");
        assert_eq!(row.region, RegionType::Nominal);
        assert_eq!(row.n_cases, 40);
        assert!(
            (row.mean_coverage - 0.9).abs() < 0.02,
            "coverage {}",
            row.mean_coverage
        );
        // On matched terrain the model's xi = 1 IS the oracle, up to MC noise
        // in the per-case quantile.
        assert!(
            (row.median_volume_ratio - 1.0).abs() < 0.25,
            "ratio {}",
            row.median_volume_ratio
        );
    }

    #[test]
    fn shifted_terrain_breaks_coverage_and_the_report_groups_by_region() {
        let params = DynamicsParams::default();
        let pipe = nocp_pipe();
        let mut cases = synthetic_cases(RegionType::Nominal, 25, 400, 43, &params);
        cases.extend(synthetic_cases(RegionType::Slippery, 25, 400, 44, &params));
        let report = evaluate_pipeline(&pipe, &cases, &params).unwrap();
        assert_eq!(report.rows.len(), 2);
        let nom = &report.rows[0];
        let slip = &report.rows[1];
        assert_eq!(nom.region, RegionType::Nominal);
        assert_eq!(slip.region, RegionType::Slippery);
        assert_eq!((nom.n_cases, slip.n_cases), (25, 25));
        assert!((nom.mean_coverage - 0.9).abs() < 0.03);
        // The model ignores the 1.3x dynamics shift; with fast starts its
        // region misses badly, and the oracle needs a larger blow-up than
        // xi = 1, so the ratio drops below one.
        assert!(
            slip.mean_coverage < nom.mean_coverage,
            "slippery {} vs nominal {}",
            slip.mean_coverage,
            nom.mean_coverage
        );
        assert!(slip.median_volume_ratio < 1.0);
    }

    #[test]
    fn injected_oracle_scalings_restore_coverage_on_shifted_terrain() {
        // Replace the pipeline's global xi with the per-case oracle value:
        // coverage must come back to ~0.9 on the terrain the model misstates.
        let params = DynamicsParams::default();
        let cases = synthetic_cases(RegionType::Slippery, 30, 500, 47, &params);
        let mut total = 0.0;
        for case in &cases {
            let rec = &case.record;
            let pred_uncal = crate::dynamics::predict_point(&rec.state(), &rec.action(), &params);
            let xi_star = oracle_xi(&pred_uncal, &case.particles, 0.1).unwrap();
            let mut pipe = nocp_pipe();
            pipe.tree =
                RegressionTree::single_leaf(1, xi_star * pipe.chi2_ref, xi_star);
            let report = evaluate_pipeline(&pipe, std::slice::from_ref(case), &params).unwrap();
            total += report.rows[0].mean_coverage;
            assert!((report.rows[0].median_volume_ratio - 1.0).abs() < 1e-9);
        }
        let mean = total / cases.len() as f64;
        // The oracle is fit on the same particles it is scored against, so
        // the empirical quantile construction pins each case near 0.9 by
        // construction; the band only absorbs the rank-vs-fraction offset.
        assert!((mean - 0.9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn report_csv_is_pinned() {
        let report = CoverageReport {
            rows: vec![
                CoverageRow {
                    method: "splitcp".into(),
                    region: RegionType::Nominal,
                    n_cases: 12,
                    mean_coverage: 0.925,
                    median_volume_ratio: 6.5,
                },
                CoverageRow {
                    method: "splitcp".into(),
                    region: RegionType::Slippery,
                    n_cases: 4,
                    mean_coverage: 0.85,
                    median_volume_ratio: f64::INFINITY,
                },
            ],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec![
                "method,region_type,n_cases,mean_coverage,median_volume_ratio",
                "splitcp,nominal,12,0.925,6.5",
                "splitcp,slippery,4,0.85,inf",
            ]
        );
    }

    fn episode(outcome: Outcome, steps: usize) -> Episode {
        Episode {
            outcome,
            steps,
            trace: Vec::<TraceStep>::new(),
        }
    }

    #[test]
    fn episode_summary_hand_arithmetic() {
        let eps = vec![episode(Outcome::Success, 10), episode(Outcome::Success, 12)];
        let s = summarize_episodes(&eps);
        assert_eq!(s.success_percent(), 100.0);
        let (mean, std) = s.steps.unwrap();
        assert!((mean - 11.0).abs() < 1e-12);
        assert!((std - 2.0_f64.sqrt()).abs() < 1e-12);

        let eps = vec![episode(Outcome::Collision, 5); 3];
        let s = summarize_episodes(&eps);
        assert_eq!(s.success_percent(), 0.0);
        assert_eq!(s.n_collision, 3);
        assert!(s.steps.is_none());

        let eps = vec![
            episode(Outcome::Success, 20),
            episode(Outcome::Timeout, 700),
            episode(Outcome::Collision, 3),
            episode(Outcome::Success, 30),
        ];
        let s = summarize_episodes(&eps);
        assert_eq!(s.n_success, 2);
        assert_eq!(s.n_timeout, 1);
        assert_eq!(s.success_percent(), 50.0);
        assert_eq!(s.steps.unwrap().0, 25.0);
    }

    #[test]
    fn episode_summary_csv_prints_dashes_without_successes() {
        let ok = summarize_episodes(&[episode(Outcome::Success, 10), episode(Outcome::Success, 12)]);
        let none = summarize_episodes(&[episode(Outcome::Collision, 2), episode(Outcome::Timeout, 700)]);
        let csv = episode_summary_csv(&[("ocular".into(), ok), ("nocp".into(), none)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec![
                "method,n_episodes,success_percent,steps_mean,steps_std",
                "ocular,2,100,11,1.4142135623730951",
                "nocp,2,0,--,--",
            ]
        );
    }
}
