//! Replicates the calibration batch over consecutive seeds and prints the
//! condition means, p-values and how often each target is met.
//!
//! cargo run --release -p statebridge --example calibrate -- configs/paper_cal.toml 10

use statebridge::{run_batch, BatchOptions, ExperimentConfig};
use statebridge_core::metrics::Metric;

const TARGETS: [(Metric, f64, f64); 3] = [
    (Metric::Initiation, 33.47, 49.93),
    (Metric::Execution, 162.63, 137.33),
    (Metric::Total, 196.10, 187.26),
];

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "configs/paper_cal.toml".into());
    let reps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let config = ExperimentConfig::load(path.as_ref())?;

    let mut within = [0usize; 3];
    let (mut init_sig, mut total_ns, mut all) = (0, 0, 0);
    let (mut grasp, mut success, mut exec_sd) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    for seed in 1..=reps {
        let result = run_batch(
            &config,
            &BatchOptions {
                seed: Some(seed),
                parallel: 4,
                ..Default::default()
            },
        )
        .await?;
        let report = result.report.expect("paired report");
        let mut line = format!("seed {seed:>3}");
        let mut ok = true;
        for (i, (metric, a, b)) in TARGETS.iter().enumerate() {
            let row = report.row(*metric);
            let hit = (row.hidden_mean - a).abs() <= 0.1 * a && (row.external_mean - b).abs() <= 0.1 * b;
            within[i] += hit as usize;
            ok &= hit;
            line += &format!(
                "  {} {:>6.1}/{:>6.1} p={:.3}{}",
                metric.label(),
                row.hidden_mean,
                row.external_mean,
                row.test.p_two_sided,
                if hit { " " } else { "!" }
            );
        }
        let init_p = report.row(Metric::Initiation).test.p_two_sided;
        let total_p = report.row(Metric::Total).test.p_two_sided;
        init_sig += (init_p < 0.001) as usize;
        total_ns += (total_p > 0.05) as usize;
        all += (ok && init_p < 0.001 && total_p > 0.05) as usize;
        let g = report.row(Metric::GraspAttempts);
        grasp[0] += g.hidden_mean;
        grasp[1] += g.external_mean;
        let e = report.row(Metric::Execution);
        exec_sd[0] += e.hidden_sd;
        exec_sd[1] += e.external_sd;
        success[0] += report.success.hidden_rate;
        success[1] += report.success.external_rate;
        println!("{line}");
    }
    let r = reps as f64;
    println!(
        "within 10%: init {}/{reps} exec {}/{reps} total {}/{reps}; init p<.001 {init_sig}/{reps}; total p>.05 {total_ns}/{reps}; all {all}/{reps}",
        within[0], within[1], within[2]
    );
    println!(
        "grasp {:.2}/{:.2}  success {:.3}/{:.3}  exec sd {:.1}/{:.1}",
        grasp[0] / r,
        grasp[1] / r,
        success[0] / r,
        success[1] / r,
        exec_sd[0] / r,
        exec_sd[1] / r
    );
    Ok(())
}
