// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use secscale::adversary::{attack_trial, AttackKind};
use secscale::sim::{self, ModelKind, Report, SimConfig, StorageReport, Variant};
use secscale::workload::{write_trace_file, SyntheticSpec};

use crate::config::{default_workload, parse_pattern, parse_size, RunConfig};

/// What a command observed; maps onto the process exit code.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Benign,
    SecurityEvent,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))?;
    Ok(p)
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
}

pub fn run(a: RunArgs) -> Result<Status> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let seed = cfg.seed(a.seed);
    let model = a.model.or(cfg.model).unwrap_or(ModelKind::SecScale);
    let out = cfg.out(a.out.as_deref());
    let trace = cfg.trace(default_workload(seed))?;
    let mut sc = SimConfig::new(model, cfg.system.clone(), seed);
    sc.attacks = cfg.attacks.clone();
    let report = sim::run(&sc, &trace)?;
    write(&out, "report.json", &format!("{}\n", report.to_json()))?;
    write(&out, "summary.csv", &sim::to_csv(std::slice::from_ref(&report)))?;
    println!(
        "{}: {} cycles, IPC {:.4}, {} EPC faults, {} DRAM accesses",
        report.label, report.total_cycles, report.performance, report.epc_faults, report.dram.total
    );
    Ok(match &report.security_event {
        Some(v) => {
            println!("security event: {v}");
            Status::SecurityEvent
        }
        None => Status::Benign,
    })
}

pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub models: Vec<ModelKind>,
    pub preset: Option<String>,
}

#[derive(Clone, Copy, Serialize)]
struct Checks {
    /// sec-scale > penglai-mmt > dfp >= sgx-client, all below baseline.
    ordering: Option<bool>,
    /// Degradation never drops as the variants are listed.
    monotone_degradation: Option<bool>,
}

#[derive(Serialize)]
struct Comparison<'a> {
    preset: Option<&'a str>,
    seed: u64,
    checks: Checks,
    reports: &'a [Report],
}

fn checks(variants: &[Variant], reports: &[Report], baseline: &Report) -> Checks {
    let perf = |m: ModelKind| reports.iter().find(|r| r.model == Some(m)).map(|r| r.performance);
    let ordering = match (
        perf(ModelKind::SecScale),
        perf(ModelKind::PenglaiMmt),
        perf(ModelKind::Dfp),
        perf(ModelKind::SgxClient),
    ) {
        (Some(s), Some(p), Some(d), Some(g)) => {
            Some(s > p && p > d && d >= g && s < baseline.performance && p < baseline.performance)
        }
        _ => None,
    };
    let sweep = variants.len() > 1
        && variants.iter().all(|v| v.model == ModelKind::SgxClient)
        && variants
            .windows(2)
            .all(|w| w[0].system.latency.sgx_fault_penalty < w[1].system.latency.sgx_fault_penalty);
    let monotone_degradation = sweep.then(|| {
        reports
            .windows(2)
            .all(|w| w[1].normalized_performance.unwrap_or(0.0) <= w[0].normalized_performance.unwrap_or(0.0))
    });
    Checks {
        ordering,
        monotone_degradation,
    }
}

pub fn compare(a: CompareArgs) -> Result<Status> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let seed = cfg.seed(a.seed);
    let out = cfg.out(a.out.as_deref());
    let preset_name = a.preset.or(cfg.preset.clone());
    let models = if a.models.is_empty() { cfg.models.clone() } else { a.models };
    let (variants, fallback) = if !models.is_empty() {
        let v: Vec<Variant> = models.iter().map(|&m| Variant::new(m, &cfg.system)).collect();
        (v, default_workload(seed))
    } else if let Some(name) = &preset_name {
        let p = sim::preset(name, &cfg.system, seed)?;
        (p.variants, p.workload)
    } else {
        bail!("compare needs --model (at least twice), `models` in the config, or --preset");
    };
    if variants.len() < 2 {
        bail!("compare needs at least two models");
    }
    let trace = cfg.trace(fallback)?;
    let baseline_cfg = SimConfig::new(ModelKind::Baseline, variants[0].system.clone(), seed);
    let mut reports = variants
        .par_iter()
        .map(|v| {
            let mut r = sim::run(&SimConfig::new(v.model, v.system.clone(), seed), &trace)?;
            r.label = v.label.clone();
            Ok(r)
        })
        .collect::<Result<Vec<Report>>>()?;
    let baseline = sim::run(&baseline_cfg, &trace)?;
    sim::normalize(&mut reports, &baseline);
    let checks = checks(&variants, &reports, &baseline);

    write(&out, "compare.csv", &sim::to_csv(&reports))?;
    write(
        &out,
        "compare.json",
        &json(&Comparison {
            preset: preset_name.as_deref(),
            seed,
            checks,
            reports: &reports,
        }),
    )?;
    let mut table = format!("{:<28} {:>14} {:>10} {:>10} {:>12}\n", "variant", "cycles", "norm.perf", "faults", "dram");
    for r in &reports {
        let _ = writeln!(
            table,
            "{:<28} {:>14} {:>10.4} {:>10} {:>12}",
            r.label,
            r.total_cycles,
            r.normalized_performance.unwrap_or(0.0),
            r.epc_faults,
            r.dram.total
        );
    }
    print!("{table}");
    for (name, v) in [("ordering", checks.ordering), ("monotone degradation", checks.monotone_degradation)] {
        if let Some(v) = v {
            println!("check {name}: {}", if v { "holds" } else { "violated" });
        }
    }
    Ok(if reports.iter().any(|r| r.security_event.is_some()) {
        Status::SecurityEvent
    } else {
        Status::Benign
    })
}

pub struct StorageArgs {
    pub config: Option<PathBuf>,
    pub total: String,
    pub epc_protected: String,
    pub curve: bool,
    pub out: Option<PathBuf>,
}

fn mb(b: u64) -> f64 {
    b as f64 / (1u64 << 20) as f64
}

pub fn storage(a: StorageArgs) -> Result<Status> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let total = parse_size(&a.total)?;
    let protected = parse_size(&a.epc_protected)?;
    let r = sim::storage_report(total, protected, &cfg.system.forest, &cfg.system.merkle)?;
    println!("memory                  {:>12.2} MB", mb(r.total_bytes));
    println!("MAC forest              {:>12.2} MB", mb(r.forest_bytes));
    println!("  top level (in EPC)    {:>12.2} MB  ({} MACs)", mb(r.forest_top_bytes), r.forest_top_bytes / 8);
    println!("EPC counter tree        {:>12.2} MB", mb(r.epc_merkle_bytes));
    println!("combined                {:>12.2} MB", mb(r.combined_bytes));
    println!("key table               {:>12.2} MB", mb(r.key_table_bytes));
    let mut curve: Vec<StorageReport> = Vec::new();
    if a.curve {
        println!("counter tree over all of memory:");
        for gib in [64u64, 128, 256, 512] {
            let c = sim::storage_report(gib << 30, protected, &cfg.system.forest, &cfg.system.merkle)?;
            println!("  {gib:>4} GiB              {:>12.2} MB", mb(c.full_counter_tree_bytes));
            curve.push(c);
        }
    }
    if let Some(out) = a.out.or(cfg.out.clone()) {
        #[derive(Serialize)]
        struct Out<'a> {
            report: &'a StorageReport,
            curve: &'a [StorageReport],
        }
        write(&out, "storage.json", &json(&Out { report: &r, curve: &curve }))?;
    }
    Ok(Status::Benign)
}

pub struct AttackArgs {
    pub kinds: Vec<AttackKind>,
    pub seed: Option<u64>,
    pub seeds: u64,
    pub background: usize,
    pub out: Option<PathBuf>,
}

pub fn attack(a: AttackArgs) -> Result<Status> {
    let kinds = if a.kinds.is_empty() { AttackKind::ALL.to_vec() } else { a.kinds };
    let first = a.seed.unwrap_or(0);
    let jobs: Vec<(AttackKind, u64)> = kinds
        .iter()
        .flat_map(|&k| (first..first + a.seeds).map(move |s| (k, s)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(k, s)| attack_trial(k, s, a.background))
        .collect::<secscale::Result<Vec<_>>>()?;
    let mut csv = String::from("kind,seed,enclave,vpage,detected,violation,speculative_instructions\n");
    for o in &outcomes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            o.kind,
            o.seed,
            o.record.enclave,
            o.record.vpage,
            o.detected(),
            o.violation.as_ref().map(|v| format!("{:?}", v.kind)).unwrap_or_default(),
            o.violation.as_ref().map(|v| v.speculative_instructions).unwrap_or(0)
        );
    }
    let mut missed = 0;
    for k in &kinds {
        let of_kind: Vec<_> = outcomes.iter().filter(|o| o.kind == *k).collect();
        let hit = of_kind.iter().filter(|o| o.detected()).count();
        missed += of_kind.len() - hit;
        println!("{:<24} {hit}/{} detected", k.name(), of_kind.len());
    }
    if let Some(out) = a.out {
        write(&out, "attacks.csv", &csv)?;
    }
    if missed > 0 {
        eprintln!("{missed} attacks went undetected");
    }
    Ok(if outcomes.iter().any(|o| o.detected()) {
        Status::SecurityEvent
    } else {
        Status::Benign
    })
}

pub struct GenTraceArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub pattern: Option<String>,
    pub footprint: Option<String>,
    pub accesses: Option<u64>,
    pub read_fraction: Option<f64>,
    pub accesses_per_instruction: Option<f64>,
    pub enclave: Option<u32>,
}

pub fn gen_trace(a: GenTraceArgs) -> Result<Status> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let seed = cfg.seed(a.seed);
    let mut spec: SyntheticSpec = cfg.workload.synthetic.clone().unwrap_or_else(|| default_workload(seed));
    if a.seed.is_some() || cfg.workload.synthetic.is_none() {
        spec.seed = seed;
    }
    if let Some(p) = &a.pattern {
        spec.pattern = parse_pattern(p)?;
    }
    if let Some(f) = &a.footprint {
        spec.footprint = parse_size(f)?;
    }
    if let Some(n) = a.accesses {
        spec.accesses = n;
    }
    if let Some(r) = a.read_fraction {
        spec.read_fraction = r;
    }
    if let Some(r) = a.accesses_per_instruction {
        spec.accesses_per_instruction = r;
    }
    if let Some(e) = a.enclave {
        spec.enclave = e;
    }
    let trace = secscale::workload::generate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_trace_file(&a.out, &trace)?;
    println!("wrote {} records to {}", trace.len(), a.out.display());
    Ok(Status::Benign)
}
