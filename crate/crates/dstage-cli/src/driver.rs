//! Runs cells: scheme resolution (including threshold calibration), single
//! runs, and experiment matrices.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dstage_core::policy::{SchemeKind, SchemeSpec};
use dstage_core::record::RunOutput;

use crate::config::{build_scenario, parse_duration_us, FileConfig, ScenarioKind};
use crate::stats::{classify_run, percentile, summarize, StabilityVerdict, SummaryRow};

/// Seed of calibration runs; fixed so thresholds do not depend on the cell
/// seed.
const CALIBRATION_SEED: u64 = 0xca11b;
/// Load used to calibrate the low-load hedging presets.
const LOW_CAL_LOAD: f64 = 0.1;
/// Load used to calibrate the high-load hedging presets.
const HIGH_CAL_LOAD: f64 = 0.7;

/// A parsed scheme request from the CLI: the base scheme plus how to obtain
/// its threshold, when one is needed.
#[derive(Clone, Debug, PartialEq)]
pub enum SchemeRequest {
    Fixed(SchemeKind),
    /// Threshold from a p95 calibration run: at the cell's own load (None)
    /// or at a preset load with or without the noise model.
    Hedged(Calibration),
    AppTo(Calibration),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Calibration {
    Explicit(u64),
    AtOwnLoad,
    /// Clean low-load p95: the aggressive tuning that cuts the noise tail.
    LowPreset,
    /// Noisy high-load p95: the conservative tuning.
    HighPreset,
}

impl SchemeRequest {
    /// Parses a scheme token: `single | cloning | cloning-prio | das |
    /// hedged | appto | tied`, with `hedged:480ms`-style parameters and the
    /// `hedged-low`/`hedged-high` calibration presets.
    pub fn parse(token: &str, file: &FileConfig) -> Result<SchemeRequest> {
        let (name, param) = match token.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (token, None),
        };
        let explicit = |p: Option<&str>, from_file: Option<&String>| -> Result<Calibration> {
            if let Some(p) = p {
                return Ok(Calibration::Explicit(parse_duration_us(p)?));
            }
            if let Some(p) = from_file {
                return Ok(Calibration::Explicit(parse_duration_us(p)?));
            }
            Ok(Calibration::AtOwnLoad)
        };
        Ok(match name {
            "single" => SchemeRequest::Fixed(SchemeKind::SingleCopy),
            "cloning" => SchemeRequest::Fixed(SchemeKind::Cloning),
            "cloning-prio" => SchemeRequest::Fixed(SchemeKind::CloningPrio),
            "das" => SchemeRequest::Fixed(SchemeKind::Das),
            "tied" => SchemeRequest::Fixed(SchemeKind::Tied),
            "hedged" => SchemeRequest::Hedged(explicit(param, file.scheme.threshold.as_ref())?),
            "hedged-low" => SchemeRequest::Hedged(Calibration::LowPreset),
            "hedged-high" => SchemeRequest::Hedged(Calibration::HighPreset),
            "appto" => SchemeRequest::AppTo(explicit(param, file.scheme.timeout.as_ref())?),
            "appto-low" => SchemeRequest::AppTo(Calibration::LowPreset),
            "appto-high" => SchemeRequest::AppTo(Calibration::HighPreset),
            other => bail!(
                "unknown scheme {other:?} (single | cloning | cloning-prio | das | hedged | appto | tied)"
            ),
        })
    }

    pub fn label(&self, token: &str) -> String {
        token.to_string()
    }
}

/// Calibration cache keyed by (scenario, load-in-millis, clean).
pub struct Calibrator {
    cache: BTreeMap<(ScenarioKind, u64, bool), u64>,
}

impl Calibrator {
    pub fn new() -> Self {
        Calibrator {
            cache: BTreeMap::new(),
        }
    }

    /// p95 RCT of a single-copy run of this scenario at `load`; `clean`
    /// disables the noise model (the aggressive tuning baseline).
    pub fn p95(
        &mut self,
        kind: ScenarioKind,
        file: &FileConfig,
        base: &Path,
        load: f64,
        clean: bool,
        requests: Option<usize>,
    ) -> Result<u64> {
        let key = (kind, (load * 1_000.0) as u64, clean);
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let mut scenario = build_scenario(kind, file, base, load, CALIBRATION_SEED, requests)?;
        scenario.set_scheme(SchemeSpec::new(SchemeKind::SingleCopy));
        if clean {
            scenario.set_noise_fraction(0.0);
        }
        let out = scenario.run();
        let rcts: Vec<u64> = out.records.iter().map(|r| r.rct_us).collect();
        let p95 = percentile(&rcts, 95.0).context("calibration run produced no records")?;
        self.cache.insert(key, p95);
        Ok(p95)
    }

    pub fn resolve(
        &mut self,
        request: &SchemeRequest,
        kind: ScenarioKind,
        file: &FileConfig,
        base: &Path,
        load: f64,
        requests: Option<usize>,
    ) -> Result<SchemeSpec> {
        let threshold = |cal: &Calibration, me: &mut Self| -> Result<u64> {
            Ok(match cal {
                Calibration::Explicit(us) => *us,
                Calibration::AtOwnLoad => me.p95(kind, file, base, load, false, requests)?,
                Calibration::LowPreset => me.p95(kind, file, base, LOW_CAL_LOAD, true, requests)?,
                Calibration::HighPreset => {
                    me.p95(kind, file, base, HIGH_CAL_LOAD, false, requests)?
                }
            })
        };
        Ok(match request {
            SchemeRequest::Fixed(kind) => SchemeSpec::new(*kind),
            SchemeRequest::Hedged(cal) => SchemeSpec::new(SchemeKind::Hedged {
                threshold_us: threshold(cal, self)?,
            }),
            SchemeRequest::AppTo(cal) => SchemeSpec::new(SchemeKind::AppTo {
                timeout_us: threshold(cal, self)?,
            }),
        })
    }
}

impl Default for Calibrator {
    fn default() -> Self {
        Self::new()
    }
}

/// One executed cell.
pub struct CellResult {
    pub output: RunOutput,
    pub verdict: StabilityVerdict,
    pub summary: SummaryRow,
}

pub fn run_cell(
    kind: ScenarioKind,
    scheme_token: &str,
    file: &FileConfig,
    base: &Path,
    load: f64,
    seed: u64,
    requests: Option<usize>,
    calibrator: &mut Calibrator,
) -> Result<CellResult> {
    let request = SchemeRequest::parse(scheme_token, file)?;
    let scheme = calibrator.resolve(&request, kind, file, base, load, requests)?;
    let mut scenario = build_scenario(kind, file, base, load, seed, requests)?;
    scenario.set_scheme(scheme);
    let output = scenario.run();
    let verdict = classify_run(&output);
    let summary = summarize(scheme_token, load, seed, &output.records, &verdict);
    Ok(CellResult {
        output,
        verdict,
        summary,
    })
}

/// Runs the cartesian product of schemes x loads x seeds, propagating
/// per-cell failures without aborting the rest. Rows come back in
/// deterministic (scheme, load, seed) order.
pub fn run_matrix(
    kind: ScenarioKind,
    schemes: &[String],
    loads: &[f64],
    seeds: &[u64],
    file: &FileConfig,
    base: &Path,
    requests: Option<usize>,
) -> (Vec<SummaryRow>, Vec<(String, anyhow::Error)>) {
    let mut calibrator = Calibrator::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for scheme in schemes {
        for &load in loads {
            for &seed in seeds {
                match run_cell(
                    kind,
                    scheme,
                    file,
                    base,
                    load,
                    seed,
                    requests,
                    &mut calibrator,
                ) {
                    Ok(cell) => rows.push(cell.summary),
                    Err(e) => failures.push((format!("{scheme}@{load} seed {seed}"), e)),
                }
            }
        }
    }
    (rows, failures)
}
