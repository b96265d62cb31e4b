//! CSV tables and gnuplot scripts.

use std::io::Write;

use super::{AffinityMatrix, StudyRow, SweepResult};
use crate::error::Result;
use crate::train::EpochMetrics;

/// `gamma,accuracy,m,model_id,seed`.
pub fn write_sweep_csv<W: Write>(mut w: W, results: &[SweepResult]) -> Result<()> {
    writeln!(w, "gamma,accuracy,m,model_id,seed")?;
    for r in results {
        for (g, a) in r.gamma_grid.iter().zip(&r.accuracy) {
            writeln!(w, "{g},{a},{},{},{}", r.m, r.model_id, r.seed)?;
        }
    }
    Ok(())
}

/// `source,target,acc_b,acc_b_given_a,rho`; undefined `rho` is left empty.
pub fn write_affinity_csv<W: Write>(mut w: W, mat: &AffinityMatrix) -> Result<()> {
    writeln!(w, "source,target,acc_b,acc_b_given_a,rho")?;
    for (a, src) in mat.model_ids.iter().enumerate() {
        for (b, dst) in mat.model_ids.iter().enumerate() {
            let rho = mat.rho[a][b].map(|r| r.to_string()).unwrap_or_default();
            writeln!(w, "{src},{dst},{},{},{rho}", mat.acc[b], mat.acc_given[a][b])?;
        }
    }
    Ok(())
}

/// `param,gamma,accuracy`.
pub fn write_study_csv<W: Write>(mut w: W, rows: &[StudyRow]) -> Result<()> {
    writeln!(w, "param,gamma,accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.param, r.gamma, r.accuracy)?;
    }
    Ok(())
}

/// `epoch,clean_acc,ce,kl,total`.
pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "epoch,clean_acc,ce,kl,total")?;
    for m in metrics {
        writeln!(w, "{},{},{},{},{}", m.epoch, m.clean_acc, m.ce, m.kl, m.total)?;
    }
    Ok(())
}

const PREAMBLE: &str = "set datafile separator ','\nset key autotitle columnhead\nset grid\n";

/// Accuracy against γ, one curve per `model_id`.
pub fn sweep_plot_script(csv: &str, png: &str) -> String {
    format!(
        "{PREAMBLE}set terminal pngcairo size 800,600\nset output '{png}'\n\
         set xlabel 'gamma'\nset ylabel 'accuracy'\nset yrange [0:1]\n\
         models = system(\"tail -n +2 '{csv}' | cut -d, -f4 | sort -u\")\n\
         plot for [id in models] '{csv}' using 1:(strcol(4) eq id ? $2 : 1/0) with linespoints title id\n"
    )
}

/// Heat map of `rho`; sources on the y axis.
pub fn affinity_plot_script(csv: &str, png: &str, model_ids: &[String]) -> String {
    let n = model_ids.len();
    let tics = |axis: &str| {
        let labels: Vec<String> = model_ids.iter().enumerate().map(|(i, id)| format!("'{id}' {i}")).collect();
        format!("set {axis}tics ({})\n", labels.join(", "))
    };
    format!(
        "{PREAMBLE}set terminal pngcairo size 700,600\nset output '{png}'\n\
         set xlabel 'target'\nset ylabel 'source'\nset cbrange [0:1]\n\
         set xrange [-0.5:{hi}]\nset yrange [-0.5:{hi}]\n{}{}\
         plot '{csv}' using (int($0) % {n}):(int($0) / {n}):5 with image notitle\n",
        tics("x"),
        tics("y"),
        hi = n as f64 - 0.5,
    )
}

/// Accuracy against the study parameter, one curve per γ.
pub fn study_plot_script(csv: &str, png: &str, xlabel: &str) -> String {
    format!(
        "{PREAMBLE}set terminal pngcairo size 800,600\nset output '{png}'\n\
         set xlabel '{xlabel}'\nset ylabel 'accuracy'\nset yrange [0:1]\n\
         gammas = system(\"tail -n +2 '{csv}' | cut -d, -f2 | sort -u\")\n\
         plot for [g in gammas] '{csv}' using 1:(strcol(2) eq g ? $3 : 1/0) with linespoints title 'gamma='.g\n"
    )
}
