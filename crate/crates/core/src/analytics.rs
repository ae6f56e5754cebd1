//! Closed-form time and cost calculators for ideal-parallel community proving.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Jobs in the reference batch (aggregation round 0).
pub const REFERENCE_BATCH_JOBS: u64 = 17_188;
/// Time the centralized deployment needs for the reference batch.
pub const REFERENCE_BASELINE_MINUTES: f64 = 38.70;
pub const TABLE_PROVER_COUNTS: [u64; 5] = [10, 100, 1_000, 2_000, 3_000];

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareClass {
    pub name: String,
    pub per_job_seconds: f64,
}

impl HardwareClass {
    pub fn new(name: impl Into<String>, per_job_seconds: f64) -> Self {
        assert!(per_job_seconds > 0.0, "per_job_seconds must be positive");
        Self {
            name: name.into(),
            per_job_seconds,
        }
    }

    /// Measured per-job proving times of the four reference machines.
    pub fn presets() -> Vec<HardwareClass> {
        vec![
            HardwareClass::new("8-core-cpu", 97.6),
            HardwareClass::new("16-core-cpu", 67.7),
            HardwareClass::new("macbook", 48.5),
            HardwareClass::new("gpu", 14.4),
        ]
    }

    pub fn preset(name: &str) -> Option<HardwareClass> {
        Self::presets().into_iter().find(|hw| hw.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub rate_microusd_per_job: u64,
}

impl CostModel {
    pub fn usd_per_job(&self) -> f64 {
        self.rate_microusd_per_job as f64 / 1e6
    }
}

/// Minutes to prove `jobs` with `provers` identical machines and perfect
/// load balance.
pub fn total_time_minutes(jobs: u64, hw: &HardwareClass, provers: u64) -> f64 {
    assert!(jobs >= 1 && provers >= 1);
    jobs as f64 * hw.per_job_seconds / provers as f64 / 60.0
}

/// Smallest prover count whose ideal batch time does not exceed the baseline.
pub fn breakeven_provers(jobs: u64, hw: &HardwareClass, baseline_minutes: f64) -> u64 {
    assert!(baseline_minutes > 0.0);
    let exact = jobs as f64 * hw.per_job_seconds / (baseline_minutes * 60.0);
    let mut provers = exact.ceil().max(1.0) as u64;
    // Guard the ceiling against representation error in either direction.
    while provers > 1 && total_time_minutes(jobs, hw, provers - 1) <= baseline_minutes {
        provers -= 1;
    }
    while total_time_minutes(jobs, hw, provers) > baseline_minutes {
        provers += 1;
    }
    provers
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DailyEconomics {
    pub jobs_per_day: f64,
    pub usd_per_day: f64,
}

/// Jobs one always-on prover finishes per day and what it earns for them.
pub fn daily_economics(hw: &HardwareClass, rate: CostModel) -> DailyEconomics {
    let jobs_per_day = SECONDS_PER_DAY / hw.per_job_seconds;
    DailyEconomics {
        jobs_per_day,
        usd_per_day: jobs_per_day * rate.usd_per_job(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRequest {
    pub jobs: u64,
    pub baseline_minutes: f64,
    pub hardware: Vec<HardwareClass>,
    pub prover_counts: Vec<u64>,
}

impl Default for TableRequest {
    fn default() -> Self {
        Self {
            jobs: REFERENCE_BATCH_JOBS,
            baseline_minutes: REFERENCE_BASELINE_MINUTES,
            hardware: HardwareClass::presets(),
            prover_counts: TABLE_PROVER_COUNTS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeCell {
    pub hardware: String,
    pub provers: u64,
    pub minutes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakevenCell {
    pub hardware: String,
    pub breakeven: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub times: Vec<TimeCell>,
    pub breakeven: Vec<BreakevenCell>,
}

impl Tables {
    /// `hardware,provers,minutes`, minutes rounded to two decimals.
    pub fn times_csv(&self) -> String {
        let mut out = String::from("hardware,provers,minutes\n");
        for cell in &self.times {
            writeln!(out, "{},{},{:.2}", cell.hardware, cell.provers, cell.minutes).unwrap();
        }
        out
    }

    /// `hardware,breakeven`.
    pub fn breakeven_csv(&self) -> String {
        let mut out = String::from("hardware,breakeven\n");
        for cell in &self.breakeven {
            writeln!(out, "{},{}", cell.hardware, cell.breakeven).unwrap();
        }
        out
    }
}

/// Full time grid (prover counts by hardware class) plus the breakeven row.
pub fn emit_tables(request: &TableRequest) -> Tables {
    let times = request
        .prover_counts
        .iter()
        .flat_map(|&provers| {
            request.hardware.iter().map(move |hw| TimeCell {
                hardware: hw.name.clone(),
                provers,
                minutes: total_time_minutes(request.jobs, hw, provers),
            })
        })
        .collect();
    let breakeven = request
        .hardware
        .iter()
        .map(|hw| BreakevenCell {
            hardware: hw.name.clone(),
            breakeven: breakeven_provers(request.jobs, hw, request.baseline_minutes),
        })
        .collect();
    Tables { times, breakeven }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hw(secs: f64) -> HardwareClass {
        HardwareClass::new("x", secs)
    }

    #[test]
    fn reference_cells() {
        assert!((total_time_minutes(17_188, &hw(97.6), 10) - 2795.91).abs() <= 0.01);
        assert!((total_time_minutes(17_188, &hw(14.4), 3_000) - 1.37).abs() <= 0.01);
        assert_eq!(total_time_minutes(90, &hw(2.0), 1), 3.0);
    }

    #[test]
    fn breakeven_uses_ceiling() {
        assert_eq!(breakeven_provers(17_188, &hw(97.6), 38.70), 723);
        assert_eq!(breakeven_provers(17_188, &hw(67.7), 38.70), 502);
        assert_eq!(breakeven_provers(17_188, &hw(48.5), 38.70), 360);
        assert_eq!(breakeven_provers(17_188, &hw(14.4), 38.70), 107);
        assert_eq!(breakeven_provers(10, &hw(1.0), 100.0), 1);
        // Exact division needs no extra prover.
        assert_eq!(breakeven_provers(120, &hw(60.0), 10.0), 12);
    }

    #[test]
    fn economics() {
        let e = daily_economics(&hw(48.5), CostModel { rate_microusd_per_job: 600 });
        assert!((e.jobs_per_day - 1781.44).abs() < 0.01);
        assert!((e.usd_per_day - 1.0689).abs() < 1e-4);
        let e = daily_economics(&hw(86_400.0), CostModel { rate_microusd_per_job: 1_200 });
        assert_eq!(e.jobs_per_day, 1.0);
        assert!((e.usd_per_day - 0.0012).abs() < 1e-12);
        let e = daily_economics(&hw(14.4), CostModel { rate_microusd_per_job: 1_200 });
        assert!((e.jobs_per_day - 6000.0).abs() < 1e-9);
        assert!((e.usd_per_day - 7.20).abs() < 1e-9);
    }

    #[test]
    fn table_layout() {
        let tables = emit_tables(&TableRequest::default());
        assert_eq!(tables.times.len(), 20);
        assert_eq!(tables.breakeven.len(), 4);
        let csv = tables.times_csv();
        assert!(csv.lines().any(|l| l == "8-core-cpu,10,2795.91"));
        assert!(csv.lines().any(|l| l == "gpu,3000,1.38" || l == "gpu,3000,1.37"));
        assert!(tables.breakeven_csv().contains("macbook,360\n"));
    }

    proptest! {
        #[test]
        fn scaling_identity(jobs in 1u64..100_000, secs in 0.1f64..500.0, n in 1u64..500, k in 1u64..20) {
            let h = hw(secs);
            let lhs = total_time_minutes(jobs, &h, k * n);
            let rhs = total_time_minutes(jobs, &h, n) / k as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn breakeven_is_tight(jobs in 1u64..50_000, secs in 0.1f64..500.0, baseline in 0.5f64..500.0) {
            let h = hw(secs);
            let b = breakeven_provers(jobs, &h, baseline);
            prop_assert!(total_time_minutes(jobs, &h, b) <= baseline);
            if b > 1 {
                prop_assert!(total_time_minutes(jobs, &h, b - 1) > baseline);
            }
        }

        #[test]
        fn breakeven_monotone(jobs in 1u64..50_000, secs in 0.1f64..500.0, baseline in 0.5f64..500.0, grow in 1.0f64..3.0) {
            let b = breakeven_provers(jobs, &hw(secs), baseline);
            prop_assert!(breakeven_provers(jobs, &hw(secs), baseline * grow) <= b);
            prop_assert!(breakeven_provers(jobs, &hw(secs * grow), baseline) >= b);
        }
    }
}
