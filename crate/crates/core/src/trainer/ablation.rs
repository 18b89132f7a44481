//! Depth and distillation ablation grids, several seeds per configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_generator, train_student_distill, train_teacher, Mode, TrainConfig, CHECKPOINT_DIR};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_dataset, mean};
use crate::synthgen::SampleRecord;

/// Which comparison a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTable {
    Depth,
    Distill,
}

/// Row label, table and mode of each ablation configuration.
pub const ROWS: [(&str, AblationTable, Mode); 7] = [
    ("rec", AblationTable::Depth, Mode::TeacherRecOnly),
    ("rec+depth-gt", AblationTable::Depth, Mode::TeacherDepthGt),
    ("rec+depth-net+dep", AblationTable::Depth, Mode::TeacherRecDep),
    ("rec", AblationTable::Distill, Mode::StudentPlain),
    ("rec+kd", AblationTable::Distill, Mode::StudentKd),
    ("rec+ad", AblationTable::Distill, Mode::StudentAd),
    ("rec+kd+ad", AblationTable::Distill, Mode::StudentDistill),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: AblationTable,
    pub label: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Directory of one run inside an ablation output tree.
pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.name()).join(format!("seed{seed}"))
}

/// Trains and evaluates every mode in `modes` for every seed; held-out
/// samples come from each config's split. Students distil the
/// `teacher-rec-dep` run of the same seed, which is trained if it is not
/// itself in `modes`. Rows come back in [`ROWS`] order.
pub fn run_ablation(
    template: impl Fn(Mode, u64) -> TrainConfig,
    modes: &[Mode],
    seeds: &[u64],
    data: &[SampleRecord],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut order: Vec<Mode> = ROWS.iter().map(|r| r.2).filter(|m| modes.contains(m)).collect();
    if order.iter().any(|m| m.is_student()) && !order.contains(&Mode::TeacherRecDep) {
        order.insert(0, Mode::TeacherRecDep);
    }
    let mut rows = Vec::new();
    for &mode in &order {
        let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let cfg = template(mode, seed);
            if cfg.mode != mode || cfg.seed != seed {
                return Err(Error::Config("ablation template must honour mode and seed".into()));
            }
            let dir = run_dir(out, mode, seed);
            let outcome = if mode.is_student() {
                let teacher = run_dir(out, Mode::TeacherRecDep, seed).join(CHECKPOINT_DIR);
                train_student_distill(&cfg, &teacher, data, &dir)?
            } else {
                train_teacher(&cfg, data, &dir)?
            };
            let (net, store, cfg) = load_generator(&outcome.checkpoint)?;
            let (_, held) = cfg.split(data)?;
            let held = if held.is_empty() { data } else { held };
            let cfg_json = serde_json::to_value(&cfg)?;
            let report = evaluate_dataset(&mode.name(), &net, &store, mode.depth_source(), held, cfg_json, seed)?;
            report.write(&dir)?;
            psnr.push(report.mean.sr_psnr.0);
            ssim.push(report.mean.sr_ssim);
        }
        if let Some(&(label, table, _)) = ROWS.iter().find(|r| r.2 == mode && modes.contains(&mode)) {
            rows.push(AblationRow {
                table,
                label: label.to_string(),
                mode,
                seeds: seeds.to_vec(),
                mean_psnr: mean(&psnr),
                mean_ssim: mean(&ssim),
                psnr,
                ssim,
            });
        }
    }
    rows.sort_by_key(|r| ROWS.iter().position(|x| x.2 == r.mode));
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("table,configuration,mode,seeds,PSNR,SSIM\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(|v| v.to_string()).collect();
        let table = serde_json::to_value(r.table).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{table},{},{},{},{:.4},{:.4}",
            r.label,
            r.mode.name(),
            seeds.join(" "),
            r.mean_psnr,
            r.mean_ssim
        );
    }
    s
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

pub fn write_rows(rows: &[AblationRow], out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let j = out.join(ABLATION_JSON);
    fs::write(&j, serde_json::to_vec_pretty(rows)?).map_err(|e| Error::io(&j, e))?;
    let c = out.join(ABLATION_CSV);
    fs::write(&c, rows_to_csv(rows)).map_err(|e| Error::io(&c, e))
}
