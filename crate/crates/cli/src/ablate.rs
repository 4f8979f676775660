//! Ablation matrix runner: one pre-train + evaluate cell per configuration,
//! averaged over shared seeds and written as one CSV row per configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use boottod_core::data::PMode;
use boottod_core::Error;
use log::info;
use serde::{Deserialize, Serialize};

use crate::commands::{evaluate_task, load_config, apply_train_args, pretrain_in_memory, require_corpus, require_out, stamp};
use crate::config::RunConfig;
use crate::corpus::{write_json, Corpus};
use crate::{AblateArgs, Axis, CliError, Task};

pub const COMPONENT_ROWS: [&str; 5] = ["full", "w/o-mask-align", "w/o-cls-align", "w/o-stop-gradient", "w/o-mlp-head"];

#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub cfg: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<BTreeMap<String, f64>>,
}

impl CellResult {
    /// Mean over seeds of every metric reported by all seeds.
    pub fn mean(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(first) = self.per_seed.first() {
            for key in first.keys() {
                let vals: Vec<f64> = self.per_seed.iter().filter_map(|m| m.get(key).copied()).collect();
                if vals.len() == self.per_seed.len() {
                    out.insert(key.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
        out
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Components => "components",
        Axis::P => "p",
        Axis::K => "k",
    }
}

/// Parses `a..b` (inclusive; `L` stands for the layer count) or a comma list.
pub fn parse_k_values(spec: &str, num_layers: usize) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("invalid k values {spec:?}"));
    let num = |s: &str| -> Result<usize, CliError> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("l") {
            Ok(num_layers)
        } else {
            s.parse().map_err(|_| bad())
        }
    };
    let vals: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if vals.is_empty() || vals.iter().any(|&k| k == 0 || k > num_layers) {
        return Err(CliError::Usage(format!("k values must lie in 1..={num_layers}, got {spec:?}")));
    }
    Ok(vals)
}

pub fn build_cells(axis: Axis, values: Option<&str>, base: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let cell = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Cell { label, cfg }
    };
    match axis {
        Axis::Components => {
            if values.is_some() {
                return Err(CliError::Usage("--values does not apply to --axis components".into()));
            }
            Ok(vec![
                cell(COMPONENT_ROWS[0].into(), &|_| {}),
                cell(COMPONENT_ROWS[1].into(), &|c| c.alignment.use_mask_align = false),
                cell(COMPONENT_ROWS[2].into(), &|c| c.alignment.use_cls_align = false),
                cell(COMPONENT_ROWS[3].into(), &|c| c.alignment.use_stop_gradient = false),
                cell(COMPONENT_ROWS[4].into(), &|c| c.alignment.use_predictor = false),
            ])
        }
        Axis::P => {
            let spec = values.unwrap_or("0,3,all,fix");
            spec.split(',')
                .map(|v| {
                    let p: PMode = v.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
                    Ok(cell(p.to_string(), &|c| c.sampler.p_mode = p))
                })
                .collect()
        }
        Axis::K => {
            let l = base.encoder.num_layers;
            let ks = parse_k_values(values.unwrap_or("1..L"), l)?;
            Ok(ks.into_iter().map(|k| cell(k.to_string(), &|c| c.alignment.k = k)).collect())
        }
    }
}

fn metric_prefix(task: Task) -> &'static str {
    match task {
        Task::Intent => "intent",
        Task::Act => "act",
        Task::ResponseSelection => "rs",
    }
}

pub fn run_cell(cell: &Cell, corpus: &Corpus, seeds: &[u64], tasks: &[Task]) -> Result<CellResult, Error> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cell.cfg.clone() };
        let (vocab, outcome) = pretrain_in_memory(&cfg, corpus)?;
        let mut m = BTreeMap::from([("dev_ppl".to_string(), outcome.best_dev_ppl)]);
        for &t in tasks {
            let r = evaluate_task(&cfg, corpus, &outcome.model, &vocab, t, "test")?;
            for (k, v) in r.metrics {
                m.insert(format!("{}_{}", metric_prefix(t), k.replace('-', "_")), v);
            }
        }
        info!("cell {} seed {seed} done", cell.label);
        per_seed.push(m);
    }
    Ok(CellResult {
        label: cell.label.clone(),
        seeds: seeds.to_vec(),
        per_seed,
    })
}

fn cell_path(dir: &Path, index: usize, label: &str) -> std::path::PathBuf {
    let slug: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    dir.join(format!("{index:02}-{slug}.json"))
}

fn load_cell(path: &Path, label: &str, seeds: &[u64]) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    let r: CellResult = serde_json::from_str(&text).ok()?;
    (r.label == label && r.seeds == seeds).then_some(r)
}

pub fn to_csv(axis: Axis, results: &[CellResult]) -> Result<String, Error> {
    let means: Vec<BTreeMap<String, f64>> = results.iter().map(CellResult::mean).collect();
    let mut columns: Vec<String> = Vec::new();
    for r in results {
        for m in &r.per_seed {
            for k in m.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    columns.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["axis".to_string(), "config".to_string(), "seeds".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for (r, m) in results.iter().zip(&means) {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let mut row = vec![axis_name(axis).to_string(), r.label.clone(), seeds.join(";")];
        row.extend(columns.iter().map(|c| m.get(c).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn run(args: AblateArgs) -> Result<(), CliError> {
    let mut base = load_config(&args.common)?;
    apply_train_args(&mut base, &args.train);
    let out = require_out(&base)?;
    let corpus = Corpus::load(&require_corpus(&base)?)?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    let tasks = if args.tasks.is_empty() {
        vec![Task::Intent, Task::Act, Task::ResponseSelection]
    } else {
        args.tasks.clone()
    };
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let cells = build_cells(args.axis, args.values.as_deref(), &base)?;
    for c in &cells {
        for w in c.cfg.train_config().validate(c.cfg.encoder.num_layers)? {
            eprintln!("warning [{}]: {w}", c.label);
        }
    }
    stamp(&out, &base, "ablate")?;
    let cell_dir = out.join(format!("cells-{}", axis_name(args.axis)));
    fs::create_dir_all(&cell_dir).map_err(|e| Error::Data(format!("{}: {e}", cell_dir.display())))?;

    let slots: Mutex<Vec<Option<Result<CellResult, Error>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cells.len() {
            break;
        }
        let cell = &cells[i];
        let path = cell_path(&cell_dir, i, &cell.label);
        let res = match args.resume.then(|| load_cell(&path, &cell.label, &seeds)).flatten() {
            Some(r) => {
                info!("reusing persisted cell {}", cell.label);
                Ok(r)
            }
            None => run_cell(cell, &corpus, &seeds, &tasks).and_then(|r| {
                write_json(&path, &r)?;
                Ok(r)
            }),
        };
        let failed = res.is_err();
        slots.lock().expect("cell results lock")[i] = Some(res);
        if failed {
            break;
        }
    };
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(cells.len()) {
            s.spawn(worker);
        }
    });
    let mut results = Vec::with_capacity(cells.len());
    for slot in slots.into_inner().expect("cell results lock") {
        match slot {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => return Err(e.into()),
            None => {}
        }
    }
    let csv = to_csv(args.axis, &results)?;
    let p = out.join(format!("ablation-{}.csv", axis_name(args.axis)));
    fs::write(&p, &csv).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_value_ranges() {
        assert_eq!(parse_k_values("1..L", 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_k_values("2", 3).unwrap(), vec![2]);
        assert_eq!(parse_k_values("1,3", 3).unwrap(), vec![1, 3]);
        assert!(parse_k_values("0..2", 3).is_err());
        assert!(parse_k_values("1..4", 3).is_err());
    }

    #[test]
    fn component_rows() {
        let cells = build_cells(Axis::Components, None, &RunConfig::default()).unwrap();
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, COMPONENT_ROWS);
        assert!(!cells[3].cfg.alignment.use_stop_gradient);
        assert!(cells[0].cfg.alignment.use_stop_gradient);
    }

    #[test]
    fn p_rows() {
        let cells = build_cells(Axis::P, None, &RunConfig::default()).unwrap();
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["0", "3", "all", "fix"]);
        assert_eq!(cells[1].cfg.sampler.p_mode, PMode::Cap(3));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let r = |label: &str, v: f64| CellResult {
            label: label.into(),
            seeds: vec![1, 2],
            per_seed: vec![
                BTreeMap::from([("dev_ppl".to_string(), v)]),
                BTreeMap::from([("dev_ppl".to_string(), v + 2.0)]),
            ],
        };
        let csv = to_csv(Axis::K, &[r("1", 1.0), r("2", 3.0)]).unwrap();
        assert_eq!(csv, "axis,config,seeds,dev_ppl\nk,1,1;2,2\nk,2,1;2,4\n");
    }
}
