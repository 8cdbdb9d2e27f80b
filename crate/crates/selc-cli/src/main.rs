//! The `selc` command line: check, run, giant-step evaluate, cross-check the
//! two semantics, and fuzz.
//!
//! Exit codes: 0 success, 1 type error, 2 fuel exhausted, 3 semantics
//! mismatch or fuzz failure, 4 parse error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selc::conform::{
    check_eval_soundness, check_giant_adequacy, check_step_soundness, render_tree, ConformParams,
    FuzzConfig, FuzzStage, ProbeSet,
};
use selc::denote::{denote_expr, denote_losscont, Env};
use selc::eval::{big_eval, giant_eval, trace, EvalError, GiantValue, Terminal};
use selc::parser::{parse_program, print_expr, SourceProgram};
use selc::syntax::{LossCont, LossVec};
use selc::types::check_wellfounded;

#[derive(Parser)]
#[command(name = "selc", about = "A calculus of handlers with choice continuations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Program file.
    path: PathBuf,
    /// Step budget before giving up.
    #[arg(long, default_value_t = 10_000_000)]
    fuel: u64,
    /// Emit machine-readable JSON.
    #[arg(long)]
    json: bool,
    /// Tolerate a signature without a well-founded ordering (run only).
    #[arg(long)]
    allow_nonwf: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and type-check a program.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate main under the zero loss continuation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Print the step sequence.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate to an effect value, expanding resumptions at probe values.
    Giant {
        #[command(flatten)]
        common: Common,
        /// Probe parameters as seed,N,L.
        #[arg(long, default_value = "0,3,2")]
        probes: String,
        /// Resumption expansion depth.
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Cross-check the operational run against the denotational semantics.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Comparison tolerance per loss component.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Probe parameters as seed,N,L.
        #[arg(long, default_value = "0,3,2")]
        probes: String,
        /// Resumption comparison depth.
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Generate well-typed programs and differentially test the semantics.
    Fuzz {
        /// Number of cases.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Term size budget.
        #[arg(long, default_value_t = 25)]
        size: usize,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Step budget per case.
        #[arg(long, default_value_t = 1_000_000)]
        fuel: u64,
        /// Comparison tolerance.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory for failing cases.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Re-run the seeds recorded in a corpus manifest.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

fn parse_probes(s: &str) -> ProbeSet {
    let parts: Vec<u64> = s.split(',').filter_map(|p| p.trim().parse().ok()).collect();
    let mut probes = ProbeSet::default();
    if let Some(seed) = parts.first() {
        probes.seed = *seed;
    }
    if let Some(n) = parts.get(1) {
        probes.max_nat = *n;
    }
    if let Some(l) = parts.get(2) {
        probes.max_list = *l as usize;
    }
    probes
}

fn load(common: &Common) -> Result<SourceProgram, ExitCode> {
    let src = match std::fs::read_to_string(&common.path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", common.path.display());
            return Err(ExitCode::from(4));
        }
    };
    match parse_program(&src) {
        Ok(p) => Ok(p),
        Err(e) => {
            let code = if e.is_type_error { 1 } else { 4 };
            if common.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "error": { "line": e.line, "column": e.column, "message": e.message,
                                   "kind": if e.is_type_error { "type" } else { "parse" } }
                    })
                );
            } else {
                eprintln!("{}:{e}", common.path.display());
            }
            Err(ExitCode::from(code))
        }
    }
}

fn well_founded(p: &SourceProgram, path: &std::path::Path) -> bool {
    match check_wellfounded(&p.globals.signature) {
        Ok(_) => true,
        Err(cycle) => {
            eprintln!("{}: warning: signature not well-founded: {cycle}", path.display());
            false
        }
    }
}

fn zero_gamma(p: &SourceProgram) -> LossCont {
    LossCont::zero(p.main_eff.clone(), p.main_ty.clone())
}

fn render_loss(loss: &LossVec) -> Vec<f64> {
    loss.0.to_vec()
}

fn cmd_check(common: &Common) -> ExitCode {
    let p = match load(common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let wf = well_founded(&p, &common.path);
    if common.json {
        println!(
            "{}",
            serde_json::json!({
                "type": p.main_ty.to_string(),
                "effect": p.main_eff.to_string(),
                "loss_dim": p.loss_dim,
                "well_founded": wf,
            })
        );
    } else {
        println!("main : {} ! {}", p.main_ty, p.main_eff);
    }
    ExitCode::SUCCESS
}

fn eval_error(common: &Common, e: EvalError) -> ExitCode {
    if common.json {
        println!("{}", serde_json::json!({ "error": e.to_string() }));
    } else {
        eprintln!("error: {e}");
    }
    match e {
        EvalError::FuelExhausted(_) => ExitCode::from(2),
        EvalError::IllFormed(_) => ExitCode::from(1),
    }
}

fn report_result(common: &Common, loss: &LossVec, terminal: &Terminal, steps: u64) -> ExitCode {
    if common.json {
        let mut obj = serde_json::json!({
            "loss": render_loss(loss),
            "steps": steps,
        });
        match terminal {
            Terminal::Val(v) => {
                obj["value"] = serde_json::Value::String(print_expr(v));
            }
            Terminal::StuckOp(_, op, arg) => {
                obj["stuck"] =
                    serde_json::json!({ "op": op.to_string(), "arg": print_expr(arg) });
            }
        }
        println!("{obj}");
    } else {
        println!("loss:  {loss}");
        println!("steps: {steps}");
        match terminal {
            Terminal::Val(v) => println!("value: {}", print_expr(v)),
            Terminal::StuckOp(_, op, arg) => println!("stuck: {op}({})", print_expr(arg)),
        }
    }
    ExitCode::SUCCESS
}

fn cmd_run(common: &Common, want_trace: bool) -> ExitCode {
    let p = match load(common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    if !well_founded(&p, &common.path) && !common.allow_nonwf {
        eprintln!("refusing to run; pass --allow-nonwf to execute under the fuel bound");
        return ExitCode::from(1);
    }
    let gamma = zero_gamma(&p);
    if want_trace {
        match trace(&gamma, &p.main_eff, &p.main, common.fuel, &p.globals) {
            Ok((steps, res)) => {
                if common.json {
                    let lines: Vec<_> = steps
                        .iter()
                        .map(|t| {
                            serde_json::json!({
                                "rule": t.rule,
                                "loss": render_loss(&t.loss),
                                "expr": print_expr(&t.expr),
                            })
                        })
                        .collect();
                    println!("{}", serde_json::json!({ "trace": lines }));
                } else {
                    for t in &steps {
                        println!("[{}] loss={} \u{22a2} {}", t.rule, t.loss, print_expr(&t.expr));
                    }
                }
                report_result(common, &res.loss, &res.terminal, res.steps)
            }
            Err(e) => eval_error(common, e),
        }
    } else {
        match big_eval(&gamma, &p.main_eff, &p.main, common.fuel, &p.globals) {
            Ok(res) => report_result(common, &res.loss, &res.terminal, res.steps),
            Err(e) => eval_error(common, e),
        }
    }
}

fn render_giant(
    gv: &GiantValue,
    probes: &ProbeSet,
    depth: usize,
    p: &SourceProgram,
) -> serde_json::Value {
    match gv {
        GiantValue::Done(r, v) => serde_json::json!({
            "done": { "loss": render_loss(r), "value": print_expr(v) }
        }),
        GiantValue::OpNode { label, op, arg, resume } => {
            let mut children = serde_json::Map::new();
            if depth > 0 {
                if let Some(op_sig) = p.globals.signature.lookup_op(op) {
                    if let Some(vals) = probes.values(&op_sig.in_ty, p.globals.loss_dim) {
                        for v in vals.iter().take(6) {
                            if let Some(w) = v.to_expr(&op_sig.in_ty) {
                                let entry = match resume(&w) {
                                    Ok(child) => render_giant(&child, probes, depth - 1, p),
                                    Err(e) => serde_json::json!({ "error": e.to_string() }),
                                };
                                children.insert(format!("{v:?}"), entry);
                            }
                        }
                    }
                }
            }
            serde_json::json!({
                "op": { "label": label.as_str(), "name": op.to_string(),
                        "arg": print_expr(arg), "resume": children }
            })
        }
    }
}

fn cmd_giant(common: &Common, probes: ProbeSet, depth: usize) -> ExitCode {
    let p = match load(common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    if !well_founded(&p, &common.path) {
        eprintln!("giant-step evaluation needs a well-founded signature");
        return ExitCode::from(1);
    }
    let gamma = zero_gamma(&p);
    match giant_eval(&gamma, &p.main_eff, &p.main, common.fuel, &p.globals) {
        Ok(gv) => {
            let rendered = render_giant(&gv, &probes, depth, &p);
            if common.json {
                println!("{rendered}");
            } else {
                println!("{}", serde_json::to_string_pretty(&rendered).unwrap());
            }
            ExitCode::SUCCESS
        }
        Err(e) => eval_error(common, e),
    }
}

fn cmd_oracle(common: &Common, params: ConformParams) -> ExitCode {
    let p = match load(common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    if !well_founded(&p, &common.path) {
        eprintln!("the denotational semantics needs a well-founded signature");
        return ExitCode::from(1);
    }
    let gamma = zero_gamma(&p);
    let mut results: Vec<(&str, Option<String>)> = Vec::new();
    results.push((
        "step-soundness",
        check_step_soundness(&p.main, &gamma, &p.main_eff, &params, &p.globals)
            .map(|_| ())
            .err()
            .map(|m| m.to_string()),
    ));
    results.push((
        "eval-soundness",
        check_eval_soundness(&p.main, &gamma, &p.main_eff, &params, &p.globals)
            .err()
            .map(|m| m.to_string()),
    ));
    results.push((
        "giant-adequacy",
        check_giant_adequacy(&p.main, &gamma, &p.main_eff, &params, &p.globals)
            .err()
            .map(|m| m.to_string()),
    ));
    let failed = results.iter().any(|(_, m)| m.is_some());
    if common.json {
        let mut obj: serde_json::Map<String, serde_json::Value> = results
            .iter()
            .map(|(l, m)| {
                (
                    l.to_string(),
                    serde_json::Value::String(m.clone().unwrap_or_else(|| "ok".into())),
                )
            })
            .collect();
        let gamma_sem = denote_losscont(&Env::empty(), &gamma, &p.globals);
        let t = denote_expr(&Env::empty(), &p.main, &p.main_eff, &p.globals).run(&gamma_sem);
        obj.insert(
            "tree".into(),
            selc::conform::tree_to_json(&t, &params.probes, 2, &p.globals),
        );
        println!("{}", serde_json::Value::Object(obj));
    } else {
        for (l, m) in &results {
            match m {
                None => println!("{l}: ok"),
                Some(m) => println!("{l}: MISMATCH {m}"),
            }
        }
        let gamma_sem = denote_losscont(&Env::empty(), &gamma, &p.globals);
        let t = denote_expr(&Env::empty(), &p.main, &p.main_eff, &p.globals).run(&gamma_sem);
        println!("tree: {}", render_tree(&t, &params.probes, 2, &p.globals));
    }
    if failed {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CorpusEntry {
    seed: u64,
    size: usize,
    stage: String,
    tolerance: f64,
    file: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuzz(
    count: usize,
    size: usize,
    seed: u64,
    fuel: u64,
    tol: f64,
    jobs: Option<usize>,
    corpus: Option<PathBuf>,
    replay: Option<PathBuf>,
) -> ExitCode {
    if let Some(jobs) = jobs {
        // rayon reads this when it builds its pool.
        std::env::set_var("RAYON_NUM_THREADS", jobs.to_string());
    }
    let mut cfg = FuzzConfig {
        seed0: seed,
        count,
        size,
        parallel: jobs != Some(1),
        ..FuzzConfig::default()
    };
    cfg.params.fuel = fuel;
    cfg.params.tol = tol;
    cfg.stages = vec![FuzzStage::Machine, FuzzStage::StepSoundness, FuzzStage::EvalAndGiant];

    if let Some(manifest) = replay {
        let text = match std::fs::read_to_string(&manifest) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{}: {e}", manifest.display());
                return ExitCode::from(4);
            }
        };
        let entries: Vec<CorpusEntry> = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("bad corpus manifest: {e}");
                return ExitCode::from(4);
            }
        };
        let mut failed = 0;
        for entry in &entries {
            let mut one = cfg.clone();
            one.seed0 = entry.seed;
            one.count = 1;
            one.size = entry.size;
            let report = selc::conform::run_fuzz(&one);
            if report.failures.is_empty() {
                println!("seed {}: ok", entry.seed);
            } else {
                failed += 1;
                for f in &report.failures {
                    println!("seed {} [{}]: {}", f.seed, f.stage, f.message);
                }
            }
        }
        return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(3) };
    }

    let report = selc::conform::run_fuzz(&cfg);
    println!(
        "cases: {}  stuck terminals: {}  failures: {}",
        report.cases,
        report.stuck_terminals,
        report.failures.len()
    );
    if report.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    let mut entries = Vec::new();
    for f in &report.failures {
        println!("seed {} [{}]: {}", f.seed, f.stage, f.message);
        if let Some(dir) = &corpus {
            let _ = std::fs::create_dir_all(dir);
            let shrunk = selc::conform::shrink_failure(f.seed, &cfg);
            let file = format!("case_{}.selc", f.seed);
            let contents = match &shrunk {
                Some((_, rendered)) => rendered.clone(),
                None => f.program.clone(),
            };
            let _ = std::fs::write(dir.join(&file), contents);
            entries.push(CorpusEntry {
                seed: f.seed,
                size: cfg.size,
                stage: f.stage.clone(),
                tolerance: tol,
                file,
            });
        }
    }
    if let Some(dir) = &corpus {
        let _ = std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&entries).unwrap(),
        );
        println!("corpus written to {}", dir.display());
    }
    ExitCode::from(3)
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Check { common } => cmd_check(&common),
        Cmd::Run { common, trace } => cmd_run(&common, trace),
        Cmd::Giant { common, probes, depth } => {
            let probes = parse_probes(&probes);
            cmd_giant(&common, probes, depth)
        }
        Cmd::Oracle { common, tol, probes, depth } => {
            let params = ConformParams {
                probes: parse_probes(&probes),
                tol,
                fuel: common.fuel,
                depth,
            };
            cmd_oracle(&common, params)
        }
        Cmd::Fuzz { count, size, seed, fuel, tol, jobs, corpus, replay } => {
            cmd_fuzz(count, size, seed, fuel, tol, jobs, corpus, replay)
        }
    }
}
