//! The acceptance suite: one test per criterion, each printing a pass line.
//! Criteria pin exact values and tolerances; the property criteria run the
//! generated-term suites at their stated sizes and budgets.
//!
//! Run with `cargo test --test acceptance` (the workspace test profile is
//! optimized; the timing bounds assume an optimized build).

use std::sync::OnceLock;
use std::time::Instant;

use selc::conform::{run_fuzz, ConformParams, FuzzConfig, FuzzReport, FuzzStage};
use selc::eval::{big_eval, trace, Terminal};
use selc::fixtures::{check_fixture, fixture_suite, load_fixture, run_fixture, sgd_oracle};
use selc::parser::print_expr;
use selc::syntax::LossCont;
use selc::types::check_wellfounded;

fn fixture(name: &str) -> selc::parser::SourceProgram {
    let f = fixture_suite()
        .into_iter()
        .find(|f| f.name == name)
        .unwrap_or_else(|| panic!("fixture {name} not in the manifest"));
    load_fixture(&f).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn pass(criterion: &str) {
    println!("acceptance {criterion}: PASS");
}

#[test]
fn criterion_01_overview_worked_example() {
    let t0 = Instant::now();
    let p = fixture("overview");
    let gamma = LossCont::zero(p.main_eff.clone(), p.main_ty.clone());
    let (steps, res) = trace(&gamma, &p.main_eff, &p.main, 100_000, &p.globals).unwrap();
    // Loss exactly 2.0, value exactly 'a'.
    assert_eq!(&*res.loss.0, &[2.0]);
    match &res.terminal {
        Terminal::Val(v) => assert_eq!(print_expr(v), "'a'"),
        t => panic!("unexpected terminal {t:?}"),
    }
    // Every intermediate loss in the worked example is integral.
    for s in &steps {
        assert!(s.loss.0.iter().all(|x| x.fract() == 0.0), "non-integral loss {:?}", s.loss);
    }
    assert!(t0.elapsed().as_secs_f64() < 0.1, "took {:?}", t0.elapsed());
    pass("01 worked-example equality (loss 2.0, value 'a')");
}

#[test]
fn criterion_02_collecting_handlers() {
    let p = fixture("decide-collect");
    let out = run_fixture(&p, 100_000).unwrap();
    assert_eq!(
        out.value.as_deref(),
        Some("cons(true, cons(false, cons(false, cons(false, nil[bool]))))")
    );
    let p = fixture("decide-collect-not");
    let out = run_fixture(&p, 100_000).unwrap();
    assert_eq!(out.value.as_deref(), Some("cons(false, cons(true, nil[bool]))"));
    pass("02 collecting handlers ([true,false,false,false] and [false,true])");
}

#[test]
fn criterion_03_password() {
    let p = fixture("password");
    let gamma = LossCont::zero(p.main_eff.clone(), p.main_ty.clone());
    let (steps, res) = trace(&gamma, &p.main_eff, &p.main, 100_000, &p.globals).unwrap();
    match &res.terminal {
        Terminal::Val(v) => assert_eq!(print_expr(v), "\"password is abc\""),
        t => panic!("unexpected terminal {t:?}"),
    }
    // The selected string's reward, 3 + 3² = 12, is re-incurred by the
    // resumed continuation: the trace records the length and distinctness
    // losses separately and they sum to 12.
    assert_eq!(&*res.loss.0, &[12.0]);
    let recorded: Vec<f64> =
        steps.iter().filter(|s| !s.loss.is_zero()).map(|s| s.loss.0[0]).collect();
    assert_eq!(recorded, vec![3.0, 9.0]);
    pass("03 password (\"password is abc\", reward 12 = 3 + 3²)");
}

#[test]
fn criterion_04_minimax() {
    let p = fixture("minimax");
    let out = run_fixture(&p, 1_000_000).unwrap();
    assert_eq!(out.loss, vec![3.0]);
    // Left is encoded true, Right false: (Left, Right).
    assert_eq!(out.value.as_deref(), Some("(true, false)"));
    pass("04 minimax ((Left, Right) with loss 3.0)");
}

#[test]
fn criterion_05_nash() {
    let p = fixture("nash");
    let out = run_fixture(&p, 1_000_000).unwrap();
    // (Stay Left, Stay Left) after exactly 2 adjusting rounds; round losses
    // stay local to their reset.
    assert_eq!(
        out.value.as_deref(),
        Some("((inr[bool, bool](true), inr[bool, bool](true)), 2)")
    );
    assert_eq!(out.loss, vec![0.0, 0.0]);
    pass("05 nash ((Stay Left, Stay Left) in exactly 2 rounds)");
}

#[test]
fn criterion_06_sgd() {
    let t0 = Instant::now();
    let p = fixture("sgd");
    let out = run_fixture(&p, 10_000_000).unwrap();
    let v = out.value.expect("sgd terminated with a value");
    // cons(w, cons(b, nil[loss]))
    let nums: Vec<f64> = v
        .split(['(', ')', ','])
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let (w, b) = (nums[0], nums[1]);
    assert!((w - 2.0).abs() < 0.1, "w = {w}");
    assert!((b - 1.0).abs() < 0.1, "b = {b}");
    // The independent plain-loop oracle agrees far below the per-update
    // tolerance of 1e-6.
    let (ow, ob) = sgd_oracle();
    assert!((w - ow).abs() < 1e-6 && (b - ob).abs() < 1e-6, "({w},{b}) vs ({ow},{ob})");
    assert!(t0.elapsed().as_secs_f64() < 10.0, "took {:?}", t0.elapsed());
    pass("06 sgd (|w-2| < 0.1, |b-1| < 0.1, matches the host oracle)");
}

#[test]
fn criterion_07_grid_search() {
    let p = fixture("grid-search");
    let out = run_fixture(&p, 100_000).unwrap();
    assert_eq!(out.value.as_deref(), Some("0.25"));
    let p = fixture("grid-search-tie");
    let out = run_fixture(&p, 100_000).unwrap();
    assert_eq!(out.value.as_deref(), Some("0.1"));
    pass("07 grid search (smaller probed error wins, ties take the first)");
}

// Criteria 8 and 9 run over the same 10,000 generated terms; the batch is
// shared between the two tests.
static BIG_BATCH: OnceLock<(FuzzReport, f64)> = OnceLock::new();

fn big_batch() -> &'static (FuzzReport, f64) {
    BIG_BATCH.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = FuzzConfig {
            seed0: 0,
            count: 10_000,
            size: 25,
            params: ConformParams { fuel: 1_000_000, tol: 1e-9, ..ConformParams::default() },
            stages: vec![FuzzStage::Machine, FuzzStage::StepSoundness],
            parallel: cfg!(feature = "parallel"),
        };
        (run_fuzz(&cfg), t0.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_08_metatheorem_properties() {
    let (report, elapsed) = big_batch();
    assert_eq!(report.cases, 10_000);
    let machine_failures: Vec<_> = report
        .failures
        .iter()
        .filter(|f| f.stage != "step")
        .collect();
    assert!(
        machine_failures.is_empty(),
        "{} failures, first: {:?}",
        machine_failures.len(),
        machine_failures.first()
    );
    assert!(*elapsed < 300.0, "suite took {elapsed}s");
    pass("08 determinism/progress/preservation/termination on 10,000 terms");
}

#[test]
fn criterion_09_per_step_soundness() {
    let (report, elapsed) = big_batch();
    let step_failures: Vec<_> =
        report.failures.iter().filter(|f| f.stage == "step").collect();
    assert!(
        step_failures.is_empty(),
        "{} failures, first: {:?}",
        step_failures.len(),
        step_failures.first()
    );
    assert!(*elapsed < 300.0, "suite took {elapsed}s");
    pass("09 per-step denotational soundness on the same 10,000 terms");
}

#[test]
fn criterion_10_eval_soundness_and_giant_adequacy() {
    let cfg = FuzzConfig {
        seed0: 0,
        count: 2_000,
        size: 25,
        params: ConformParams { fuel: 1_000_000, tol: 1e-9, depth: 3, ..Default::default() },
        stages: vec![FuzzStage::EvalAndGiant, FuzzStage::Machine],
        parallel: cfg!(feature = "parallel"),
    };
    let report = run_fuzz(&cfg);
    assert_eq!(report.cases, 2_000);
    assert!(
        report.failures.is_empty(),
        "{} failures, first: {:?}",
        report.failures.len(),
        report.failures.first()
    );
    assert!(
        report.stuck_terminals >= 500,
        "only {} cases ended with residual effects",
        report.stuck_terminals
    );
    pass("10 evaluation soundness and giant adequacy on 2,000 terms");
}

#[test]
fn criterion_11_non_wellfounded_rejection() {
    let p = fixture("cow");
    let cycle = check_wellfounded(&p.globals.signature)
        .expect_err("cow's signature must not be well-founded");
    assert_eq!(cycle.0.len(), 1);
    assert_eq!(cycle.0[0].as_str(), "cow");
    let gamma = LossCont::zero(p.main_eff.clone(), p.main_ty.clone());
    let err = big_eval(&gamma, &p.main_eff, &p.main, 100_000, &p.globals)
        .expect_err("the cow program diverges");
    assert!(err.to_string().contains("fuel exhausted"), "{err}");
    // The manifest-driven check exercises the same path end to end.
    let f = fixture_suite().into_iter().find(|f| f.name == "cow").unwrap();
    check_fixture(&f, 100_000).unwrap();
    pass("11 non-well-founded rejection (cycle reported, divergence fuelled out)");
}
