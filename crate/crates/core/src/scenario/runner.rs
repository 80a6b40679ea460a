//! Runs one experiment and writes its files.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind, ToyControllerKind};
use super::output::{av_diagnostics_table, av_trace_table, num, toy_trace_table, Table};
use super::ScenarioError;
use crate::av::{run_av, AvError, AvMode, AvRunConfig, AvTrace};
use crate::toy::{crossover_probability, run_closed_loop, scenario_costs, ToyController, ToyTrace};

/// A run whose trace contains solver-failure flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedRun {
    pub run: String,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Written files, relative to `dir`.
    pub files: Vec<String>,
    pub flagged: Vec<FlaggedRun>,
}

/// SHA-256 of the canonical config text, with the output directory left out
/// so moving the results does not change it.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    hex::encode(Sha256::digest(c.to_toml().as_bytes()))
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn table(&mut self, name: &str, t: &Table) -> Result<(), ScenarioError> {
        t.write(&self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), ScenarioError> {
        let p = self.dir.join(name);
        std::fs::write(&p, text).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn pc_label(pc: f64) -> String {
    format!("pc{pc}")
}

fn toy_controller(kind: ToyControllerKind, pc: f64) -> ToyController {
    match kind {
        ToyControllerKind::Rmpc => ToyController::Rmpc,
        ToyControllerKind::Cmpc => ToyController::Cmpc(pc),
        ToyControllerKind::Oracle => ToyController::ExplicitOracle(pc),
    }
}

fn toy_flags(label: &str, trace: &ToyTrace, flagged: &mut Vec<FlaggedRun>) {
    if let Some((step, _)) = trace.failure {
        flagged.push(FlaggedRun {
            run: label.to_string(),
            steps: vec![step],
        });
    }
}

fn av_flags(label: &str, trace: &AvTrace, flagged: &mut Vec<FlaggedRun>) {
    let steps = trace.flagged_steps();
    if !steps.is_empty() {
        flagged.push(FlaggedRun {
            run: label.to_string(),
            steps,
        });
    }
}

/// Runs `cfg` and writes its files under `cfg.out`. Solver-failure flags are
/// reported in the outcome, not as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ScenarioError> {
    let dir = cfg.out.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", dir.display())))?;
    let mut w = Writer {
        dir: dir.clone(),
        files: Vec::new(),
    };
    let mut flagged = Vec::new();
    match cfg.kind {
        ExperimentKind::Toy => run_toy(cfg, &mut w, &mut flagged)?,
        ExperimentKind::ToySweep => run_toy_sweep(cfg, &mut w, &mut flagged)?,
        ExperimentKind::ToyExpectedCost => run_toy_expected_cost(cfg, &mut w)?,
        ExperimentKind::Av => run_av_single(cfg, &mut w, &mut flagged)?,
        ExperimentKind::AvSweep => run_av_sweep(cfg, &mut w, &mut flagged)?,
    }
    w.text("config.toml", &cfg.to_toml())?;
    let meta = format!(
        "kind = \"{}\"\nversion = \"{}\"\nconfig_hash = \"{}\"\nfiles = [{}]\n",
        cfg.kind.as_str(),
        env!("CARGO_PKG_VERSION"),
        config_hash(cfg),
        w.files
            .iter()
            .map(|f| format!("\"{f}\""))
            .collect::<Vec<_>>()
            .join(", "),
    );
    w.text("metadata.toml", &meta)?;
    Ok(RunOutcome {
        dir,
        files: w.files,
        flagged,
    })
}

fn run_toy(
    cfg: &ExperimentConfig,
    w: &mut Writer,
    flagged: &mut Vec<FlaggedRun>,
) -> Result<(), ScenarioError> {
    let t = &cfg.toy;
    let trace = run_closed_loop(
        &t.model,
        toy_controller(t.controller, t.pc),
        t.pop.as_option(),
    )?;
    toy_flags("toy", &trace, flagged);
    w.table("trace.csv", &toy_trace_table(&trace))
}

fn run_toy_sweep(
    cfg: &ExperimentConfig,
    w: &mut Writer,
    flagged: &mut Vec<FlaggedRun>,
) -> Result<(), ScenarioError> {
    let t = &cfg.toy;
    let pop = t.pop.as_option();
    let mut summary = Table::new(&[
        "pc",
        "u0_first",
        "u0_closed_form",
        "total_cost",
        "y_final",
        "pre_pop_deviation",
        "cleared",
    ]);
    for &pc in &t.pcs {
        let trace = run_closed_loop(&t.model, ToyController::Cmpc(pc), pop)?;
        let oracle = run_closed_loop(&t.model, ToyController::ExplicitOracle(pc), pop)?;
        let label = pc_label(pc);
        toy_flags(&label, &trace, flagged);
        w.table(&format!("trace_{label}.csv"), &toy_trace_table(&trace))?;
        let pre = trace
            .steps
            .iter()
            .filter(|s| !s.pop_observed)
            .map(|s| s.state.y.abs())
            .fold(0.0, f64::max);
        summary.push(vec![
            num(pc),
            num(trace.steps.first().map_or(f64::NAN, |s| s.u0)),
            num(oracle.steps.first().map_or(f64::NAN, |s| s.u0)),
            num(trace.total_cost()),
            num(trace.final_state().y),
            num(pre),
            (trace.cleared() as u8).to_string(),
        ]);
    }
    let rmpc = run_closed_loop(&t.model, ToyController::Rmpc, pop)?;
    toy_flags("rmpc", &rmpc, flagged);
    w.table("trace_rmpc.csv", &toy_trace_table(&rmpc))?;
    w.table("summary.csv", &summary)
}

fn run_toy_expected_cost(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(), ScenarioError> {
    let t = &cfg.toy;
    let p = t.probability;
    let rmpc = scenario_costs(&t.model, ToyController::Rmpc)?.expected(p)?;
    let costs: Vec<f64> = t
        .pcs
        .iter()
        .map(|&pc| scenario_costs(&t.model, ToyController::Cmpc(pc))?.expected(p))
        .collect::<Result<_, _>>()?;
    let best = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let mut summary = Table::new(&["pc", "expected_cost", "rmpc_expected_cost", "argmin"]);
    for (i, (&pc, &c)) in t.pcs.iter().zip(&costs).enumerate() {
        summary.push(vec![
            num(pc),
            num(c),
            num(rmpc),
            ((Some(i) == best) as u8).to_string(),
        ]);
    }
    w.table("summary.csv", &summary)?;
    let crossover = crossover_probability(&t.model, t.crossover_tolerance)?;
    let mut c = Table::new(&["probability", "tolerance", "crossover"]);
    c.push(vec![
        num(p),
        num(t.crossover_tolerance),
        crossover.map_or("none".into(), num),
    ]);
    w.table("crossover.csv", &c)
}

fn timing_row(label: &str, trace: &AvTrace, budget: f64) -> Vec<String> {
    let ms: Vec<f64> = trace
        .rows
        .iter()
        .map(|r| r.solve_time.as_secs_f64() * 1e3)
        .collect();
    let n = ms.len().max(1) as f64;
    let over = ms.iter().filter(|&&m| m > budget * 1e3).count() as f64;
    vec![
        label.to_string(),
        ms.len().to_string(),
        num(ms.iter().sum::<f64>() / n),
        num(ms.iter().copied().fold(0.0, f64::max)),
        num(over / n),
    ]
}

const TIMING_COLUMNS: [&str; 5] = [
    "run",
    "steps",
    "mean_solve_ms",
    "max_solve_ms",
    "over_budget_fraction",
];

fn run_av_single(
    cfg: &ExperimentConfig,
    w: &mut Writer,
    flagged: &mut Vec<FlaggedRun>,
) -> Result<(), ScenarioError> {
    let a = &cfg.av;
    let run = a.run_config(a.controller.pc, a.controller.mode);
    let trace = run_av(&run, a.trigger.as_option())?;
    av_flags("av", &trace, flagged);
    w.table("trace.csv", &av_trace_table(&trace))?;
    w.table("diagnostics.csv", &av_diagnostics_table(&trace))?;
    let mut timing = Table::new(&TIMING_COLUMNS);
    timing.push(timing_row("av", &trace, a.controller.control_period));
    w.table("timing.csv", &timing)
}

/// Independent runs on at most one worker per core, so recorded solve times
/// are not inflated by oversubscription. Results keep the order of `runs`.
fn run_parallel(
    runs: &[AvRunConfig],
    trigger: Option<f64>,
    workers: usize,
) -> Result<Vec<AvTrace>, AvError> {
    let workers = workers.min(runs.len());
    if workers <= 1 {
        return runs.iter().map(|r| run_av(r, trigger)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AvTrace, AvError>>>> = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = runs.get(i) else { break };
                let out = run_av(run, trigger);
                results.lock().expect("sweep worker panicked")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("sweep worker panicked")
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect()
}

fn run_av_sweep(
    cfg: &ExperimentConfig,
    w: &mut Writer,
    flagged: &mut Vec<FlaggedRun>,
) -> Result<(), ScenarioError> {
    let a = &cfg.av;
    let trigger = a.trigger.as_option();
    let mut jobs: Vec<(String, f64, AvMode)> = a
        .pcs
        .iter()
        .map(|&pc| (pc_label(pc), pc, AvMode::Contingency))
        .collect();
    if a.robust_reference {
        jobs.push(("robust".into(), 1.0, AvMode::Robust));
    }
    let runs: Vec<AvRunConfig> = jobs
        .iter()
        .map(|(_, pc, mode)| a.run_config(*pc, *mode))
        .collect();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let traces = run_parallel(&runs, trigger, cores)?;

    let robust = a
        .robust_reference
        .then(|| traces.last().expect("robust run"));
    let mut summary = Table::new(&[
        "pc",
        "e_at_door",
        "pre_trigger_max_abs_e",
        "sigma_max",
        "flagged_steps",
        "door_clearance",
        "max_slew",
        "slew_saturated_steps",
        "max_dev_vs_robust",
    ]);
    let mut timing = Table::new(&TIMING_COLUMNS);
    for ((label, pc, mode), trace) in jobs.iter().zip(&traces) {
        av_flags(label, trace, flagged);
        w.table(&format!("trace_{label}.csv"), &av_trace_table(trace))?;
        w.table(
            &format!("diagnostics_{label}.csv"),
            &av_diagnostics_table(trace),
        )?;
        timing.push(timing_row(label, trace, a.controller.control_period));
        if *mode == AvMode::Robust {
            continue;
        }
        let dev = robust.map_or(f64::NAN, |r| {
            trace
                .rows
                .iter()
                .zip(&r.rows)
                .map(|(x, y)| (x.state.e - y.state.e).abs())
                .fold(0.0, f64::max)
        });
        summary.push(vec![
            num(*pc),
            num(trace.e_at_station(a.scenario.s_door).unwrap_or(f64::NAN)),
            num(trace.pre_trigger_max_abs_e()),
            num(trace.sigma_max()),
            trace.flagged_steps().len().to_string(),
            num(trace.door_clearance(&a.scenario).unwrap_or(f64::NAN)),
            num(trace.max_slew()),
            trace
                .slew_saturated_steps(a.controller.params.max_steer_slew, 1e-6)
                .to_string(),
            num(dev),
        ]);
    }
    w.table("summary.csv", &summary)?;
    w.table("timing.csv", &timing)
}

/// Files of an outcome that must be identical across repeated runs into
/// different directories. Timing varies, and config.toml records `out`.
pub fn deterministic_files(outcome: &RunOutcome) -> Vec<&str> {
    outcome
        .files
        .iter()
        .map(String::as_str)
        .filter(|f| {
            !f.starts_with("diagnostics") && !f.starts_with("timing") && *f != "config.toml"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::config::Trigger;
    use std::path::Path;

    fn cfg(text: &str, out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::parse(text)
            .unwrap()
            .validate(Path::new("."))
            .unwrap();
        c.out = out.to_path_buf();
        c
    }

    fn read(dir: &Path, name: &str) -> String {
        std::fs::read_to_string(dir.join(name)).unwrap()
    }

    #[test]
    fn toy_zero_weight_without_pop_never_steers() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("kind = \"toy\"\n[toy]\npc = 0.0\n", dir.path());
        let out = run_experiment(&c).unwrap();
        assert!(out.flagged.is_empty());
        let text = read(dir.path(), "trace.csv");
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,x,y,u0,cost_step,cost_cum");
        for l in lines {
            assert_eq!(l.split(',').nth(3).unwrap(), "0", "{l}");
        }
    }

    #[test]
    fn expected_cost_table_marks_one_minimum() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("kind = \"toy-expected-cost\"", dir.path());
        run_experiment(&c).unwrap();
        let text = read(dir.path(), "summary.csv");
        let marked: Vec<f64> = text
            .lines()
            .skip(1)
            .filter(|l| l.ends_with(",1"))
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(marked.len(), 1);
        assert!((0.15..=0.35).contains(&marked[0]), "{marked:?}");
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let text = "kind = \"toy-sweep\"\n[toy]\npcs = [0.0, 0.5, 1.0]\npop = 4\n";
        let oa = run_experiment(&cfg(text, a.path())).unwrap();
        run_experiment(&cfg(text, b.path())).unwrap();
        for f in deterministic_files(&oa) {
            assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = cfg("kind = \"toy\"", Path::new("x"));
        let b = cfg("kind = \"toy\"", Path::new("y"));
        assert_eq!(config_hash(&a), config_hash(&b));
        let mut c = a.clone();
        c.toy.pop = Trigger::At(2);
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn short_av_run_writes_trace_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("kind = \"av\"\n[av]\nduration = 0.1\n", dir.path());
        let out = run_experiment(&c).unwrap();
        assert!(out.flagged.is_empty());
        let text = read(dir.path(), "trace.csv");
        assert_eq!(
            text.lines().next().unwrap(),
            "t,s,e,dpsi,Uy,r,delta,u0,sigma_max,obj,J_nom,J_con,status"
        );
        assert_eq!(text.lines().count(), 6);
        assert!(out.files.iter().any(|f| f == "diagnostics.csv"));
    }

    #[test]
    fn parallel_sweep_matches_sequential_runs() {
        let runs: Vec<AvRunConfig> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&pc| {
                let mut r = AvRunConfig {
                    duration: 0.1,
                    ..AvRunConfig::default()
                };
                r.controller.pc = pc;
                r
            })
            .collect();
        let strip = |t: &AvTrace| -> Vec<(f64, f64, f64)> {
            t.rows.iter().map(|r| (r.t, r.state.e, r.delta)).collect()
        };
        let seq = run_parallel(&runs, Some(0.04), 1).unwrap();
        let par = run_parallel(&runs, Some(0.04), 3).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.pc, b.pc);
            assert_eq!(strip(a), strip(b));
        }
    }
}
