//! Consolidated markdown and CSV tables over a directory of runs.
//!
//! A run is a directory holding `summary.json`; attack reports sit in its
//! `attacks/` subdirectory. Runs are visited in name order, so reports are
//! byte-identical across reruns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nnwm_core::{AttackKind, PruneOrder, Situation};

use crate::commands::{AttackFile, RunSummary, ATTACK_DIR, SUMMARY_FILE};
use crate::error::{CliError, Result};
use crate::files::{read_json, write_text};

#[derive(Clone, Debug)]
struct Run {
    name: String,
    summary: RunSummary,
    attacks: Vec<AttackFile>,
}

/// A table rendered to both markdown and CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub slug: &'static str,
    pub title: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    /// Notes and provenance lines printed under the markdown table.
    pub notes: Vec<String>,
}

impl Table {
    pub fn csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    fn markdown(&self, out: &mut String) {
        let _ = writeln!(out, "## {}\n", self.title);
        if self.rows.is_empty() {
            out.push_str("_No matching runs._\n\n");
            return;
        }
        let _ = writeln!(out, "| {} |", self.header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.header.len()));
        for row in &self.rows {
            let _ = writeln!(out, "| {} |", row.join(" | "));
        }
        out.push('\n');
        for note in &self.notes {
            let _ = writeln!(out, "{note}  ");
        }
        out.push('\n');
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub tables: Vec<Table>,
    /// Subdirectories without a readable summary, with the reason.
    pub missing: Missing,
    pub warnings: Vec<String>,
}

impl Report {
    /// Writes `report.md` and one CSV per table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("report.md"), &self.markdown)?;
        for t in &self.tables {
            write_text(&dir.join(format!("{}.csv", t.slug)), &t.csv())?;
        }
        Ok(())
    }
}

fn e(v: f64) -> String {
    format!("{v:.4e}")
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>, fmt: fn(f64) -> String) -> String {
    v.map(fmt).unwrap_or_else(|| "-".into())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn provenance<'a>(runs: impl IntoIterator<Item = &'a Run>) -> Vec<String> {
    let mut seeds = Vec::new();
    let mut hashes = Vec::new();
    for r in runs {
        if !seeds.contains(&r.summary.seed) {
            seeds.push(r.summary.seed);
        }
        hashes.push(format!("{}={}", r.name, short(&r.summary.config_hash)));
    }
    seeds.sort_unstable();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    vec![
        format!("Seeds: {}.", seeds.join(", ")),
        format!("Config hashes: {}.", hashes.join(", ")),
    ]
}

/// Run name and the reason it could not be read.
type Missing = Vec<(String, String)>;

fn list_runs(dir: &Path) -> Result<(Vec<Run>, Missing)> {
    let mut candidates: Vec<(String, PathBuf)> = Vec::new();
    if dir.join(SUMMARY_FILE).is_file() {
        candidates.push((".".into(), dir.to_path_buf()));
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() && entry.file_name() != ATTACK_DIR {
            candidates.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    candidates.sort();

    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for (name, path) in candidates {
        let summary_path = path.join(SUMMARY_FILE);
        if !summary_path.is_file() {
            missing.push((name, format!("no {SUMMARY_FILE}")));
            continue;
        }
        let summary = match read_json::<RunSummary>(&summary_path) {
            Ok(s) => s,
            Err(err) => {
                missing.push((name, err.to_string()));
                continue;
            }
        };
        let mut attacks = Vec::new();
        let attack_dir = path.join(ATTACK_DIR);
        if attack_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&attack_dir)
                .map_err(|e| CliError::io(&attack_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for file in files {
                match read_json::<AttackFile>(&file) {
                    Ok(a) => attacks.push(a),
                    Err(err) => missing.push((format!("{name}/{ATTACK_DIR}"), err.to_string())),
                }
            }
        }
        runs.push(Run {
            name,
            summary,
            attacks,
        });
    }
    Ok((runs, missing))
}

fn fidelity(runs: &[Run]) -> Table {
    let rows = runs
        .iter()
        .map(|r| {
            let s = &r.summary;
            let key = s.key.as_ref();
            vec![
                r.name.clone(),
                s.host.name().into(),
                situation_name(s.situation).into(),
                key.map(|k| k.kind.name().to_string())
                    .unwrap_or_else(|| "-".into()),
                key.map(|k| k.bits.to_string())
                    .unwrap_or_else(|| "-".into()),
                s.lambda.to_string(),
                s.seed.to_string(),
                opt(s.test_error, f),
                opt(s.embedding_loss, e),
                opt(s.ber, f),
            ]
        })
        .collect();
    let mut notes = Vec::new();
    let err = |embedded: bool| -> Vec<f64> {
        runs.iter()
            .filter(|r| (r.summary.embedding_loss.is_some()) == embedded)
            .filter_map(|r| r.summary.test_error)
            .collect()
    };
    let (with, without) = (err(true), err(false));
    if !with.is_empty() && !without.is_empty() {
        notes.push(format!(
            "Mean test error: embedded {} ({} runs), not embedded {} ({} runs), gap {}.",
            f(mean(&with)),
            with.len(),
            f(mean(&without)),
            without.len(),
            f(mean(&with) - mean(&without))
        ));
    }
    notes.extend(provenance(runs));
    Table {
        slug: "fidelity",
        title: "Fidelity",
        header: vec![
            "run",
            "host",
            "situation",
            "key",
            "T",
            "lambda",
            "seed",
            "test_error",
            "E_R",
            "BER",
        ],
        rows,
        notes,
    }
}

fn situation_name(s: Situation) -> &'static str {
    match s {
        Situation::None => "none",
        Situation::TrainToEmbed => "train-to-embed",
        Situation::FineTuneToEmbed => "fine-tune-to-embed",
        Situation::DistillToEmbed => "distill-to-embed",
    }
}

fn grouped<K: Ord + Clone>(
    runs: &[Run],
    key: impl Fn(&Run) -> Option<K>,
) -> BTreeMap<K, Vec<&Run>> {
    let mut groups: BTreeMap<K, Vec<&Run>> = BTreeMap::new();
    for r in runs {
        if let Some(k) = key(r) {
            groups.entry(k).or_default().push(r);
        }
    }
    groups
}

fn embedded(r: &Run) -> bool {
    r.summary.embedding_loss.is_some()
}

fn capacity(runs: &[Run]) -> Table {
    let groups = grouped(runs, |r| {
        let k = r.summary.key.as_ref().filter(|_| embedded(r))?;
        Some((k.target_len, k.bits, k.kind.name()))
    });
    let mut members = Vec::new();
    let rows = groups
        .iter()
        .map(|(&(m, t, kind), rs)| {
            members.extend(rs.iter().copied());
            let losses: Vec<f64> = rs.iter().filter_map(|r| r.summary.embedding_loss).collect();
            let bers: Vec<f64> = rs.iter().filter_map(|r| r.summary.ber).collect();
            vec![
                m.to_string(),
                t.to_string(),
                kind.into(),
                rs.len().to_string(),
                e(mean(&losses)),
                f(mean(&bers)),
                f(bers.iter().copied().fold(0.0, f64::max)),
            ]
        })
        .collect();
    Table {
        slug: "capacity",
        title: "Capacity",
        header: vec!["M", "T", "key", "runs", "mean_E_R", "mean_BER", "max_BER"],
        rows,
        notes: provenance(members),
    }
}

fn key_kinds(runs: &[Run]) -> Table {
    let groups = grouped(runs, |r| {
        let k = r.summary.key.as_ref().filter(|_| embedded(r))?;
        Some(k.kind.name())
    });
    let mut members = Vec::new();
    let rows = groups
        .iter()
        .map(|(&kind, rs)| {
            members.extend(rs.iter().copied());
            let losses: Vec<f64> = rs.iter().filter_map(|r| r.summary.embedding_loss).collect();
            let errors: Vec<f64> = rs.iter().filter_map(|r| r.summary.test_error).collect();
            let bers: Vec<f64> = rs.iter().filter_map(|r| r.summary.ber).collect();
            vec![
                kind.into(),
                rs.len().to_string(),
                f(mean(&errors)),
                e(mean(&losses)),
                f(mean(&bers)),
            ]
        })
        .collect();
    Table {
        slug: "key_kinds",
        title: "Key kinds",
        header: vec!["key", "runs", "mean_test_error", "mean_E_R", "mean_BER"],
        rows,
        notes: provenance(members),
    }
}

fn attacks_of(runs: &[Run], kind: AttackKind) -> Vec<(&Run, &AttackFile)> {
    runs.iter()
        .flat_map(|r| {
            r.attacks
                .iter()
                .filter(move |a| a.report.attack == kind)
                .map(move |a| (r, a))
        })
        .collect()
}

fn dedup_runs<'a>(items: &[(&'a Run, &AttackFile)]) -> Vec<&'a Run> {
    let mut out: Vec<&Run> = Vec::new();
    for (r, _) in items {
        if !out.iter().any(|o| o.name == r.name) {
            out.push(r);
        }
    }
    out
}

fn lambda_sweep(runs: &[Run]) -> Table {
    let mut items = attacks_of(runs, AttackKind::PostHoc);
    items.sort_by(|a, b| {
        let la = a.1.report.lambda.unwrap_or(0.0);
        let lb = b.1.report.lambda.unwrap_or(0.0);
        la.total_cmp(&lb)
            .then_with(|| a.0.name.cmp(&b.0.name))
            .then_with(|| a.1.name.cmp(&b.1.name))
    });
    let rows = items
        .iter()
        .map(|(r, a)| {
            let rep = &a.report;
            vec![
                r.name.clone(),
                opt(rep.lambda, |v| v.to_string()),
                opt(rep.distance, e),
                e(rep.embedding_loss_after),
                f(rep.ber_after),
                opt(rep.test_error_after, f),
            ]
        })
        .collect();
    Table {
        slug: "lambda_sweep",
        title: "Post-hoc lambda sweep",
        header: vec![
            "run",
            "lambda",
            "half_sq_distance",
            "E_R",
            "BER",
            "test_error",
        ],
        rows,
        notes: provenance(dedup_runs(&items)),
    }
}

fn pruning(runs: &[Run]) -> Table {
    let items = attacks_of(runs, AttackKind::Prune);
    // (alpha, order, losses, bers) per grid cell
    type Cell = (f64, PruneOrder, Vec<f64>, Vec<f64>);
    let mut cells: BTreeMap<(u64, usize), Cell> = BTreeMap::new();
    for (_, a) in &items {
        for p in &a.report.curve {
            let rank = PruneOrder::ALL
                .iter()
                .position(|&o| o == p.order)
                .unwrap_or(0);
            let cell = cells.entry((p.alpha.to_bits(), rank)).or_insert((
                p.alpha,
                p.order,
                Vec::new(),
                Vec::new(),
            ));
            cell.2.push(p.embedding_loss);
            cell.3.push(p.ber);
        }
    }
    let mut rows: Vec<(f64, usize, Vec<String>)> = cells
        .into_iter()
        .map(|((_, rank), (alpha, order, losses, bers))| {
            let row = vec![
                alpha.to_string(),
                order.name().into(),
                losses.len().to_string(),
                e(mean(&losses)),
                f(mean(&bers)),
            ];
            (alpha, rank, row)
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Table {
        slug: "pruning",
        title: "Pruning",
        header: vec!["alpha", "order", "runs", "mean_E_R", "mean_BER"],
        rows: rows.into_iter().map(|r| r.2).collect(),
        notes: provenance(dedup_runs(&items)),
    }
}

fn finetune(runs: &[Run]) -> Table {
    let items = attacks_of(runs, AttackKind::FineTune);
    let rows = items
        .iter()
        .map(|(r, a)| {
            let rep = &a.report;
            vec![
                r.name.clone(),
                e(rep.embedding_loss_before),
                e(rep.embedding_loss_after),
                f(rep.ber_before),
                f(rep.ber_after),
                opt(rep.test_error_after, f),
            ]
        })
        .collect();
    Table {
        slug: "finetune",
        title: "Fine-tuning",
        header: vec![
            "run",
            "E_R",
            "E'_R",
            "BER_before",
            "BER_after",
            "test_error",
        ],
        rows,
        notes: provenance(dedup_runs(&items)),
    }
}

fn overwrite(runs: &[Run]) -> Table {
    let items = attacks_of(runs, AttackKind::Overwrite);
    let rows = items
        .iter()
        .map(|(r, a)| {
            let rep = &a.report;
            vec![
                r.name.clone(),
                f(rep.ber_before),
                f(rep.ber_after),
                opt(rep.new_watermark_ber, f),
                e(rep.embedding_loss_after),
                opt(rep.test_error_after, f),
            ]
        })
        .collect();
    Table {
        slug: "overwrite",
        title: "Overwrite",
        header: vec![
            "run",
            "original_BER_before",
            "original_BER_after",
            "new_BER",
            "original_E_R_after",
            "test_error",
        ],
        rows,
        notes: provenance(dedup_runs(&items)),
    }
}

/// Builds the report. Never fails on missing or unreadable runs; those are
/// listed instead.
pub fn build_report(dir: &Path) -> Result<Report> {
    let (runs, missing) = list_runs(dir)?;
    let mut warnings = Vec::new();
    if runs.is_empty() {
        warnings.push(format!("no runs found under {}", dir.display()));
    }
    let tables = if runs.is_empty() {
        Vec::new()
    } else {
        vec![
            fidelity(&runs),
            capacity(&runs),
            key_kinds(&runs),
            lambda_sweep(&runs),
            pruning(&runs),
            finetune(&runs),
            overwrite(&runs),
        ]
    };

    let mut md = String::from("# Watermark experiment report\n\n");
    let _ = writeln!(md, "Runs: {}.\n", runs.len());
    if runs.is_empty() {
        md.push_str("_No runs found._\n\n");
    }
    for t in &tables {
        t.markdown(&mut md);
    }
    if !missing.is_empty() {
        md.push_str("## Missing or incomplete runs\n\n");
        for (name, reason) in &missing {
            let _ = writeln!(md, "- `{name}`: {reason}");
        }
        md.push('\n');
    }
    Ok(Report {
        markdown: md,
        tables,
        missing,
        warnings,
    })
}
