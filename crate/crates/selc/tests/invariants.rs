//! Property tests for the structural invariants: unique decomposition and
//! re-plugging, printer/parser round trips, context composition, action
//! laws, loss additivity, and machine/step agreement, over generated
//! well-typed terms and raw data.

use proptest::prelude::*;

use selc::conform::{gen_gamma, gen_term, tree_equal, ProbeSet};
use selc::denote::{denote_expr, denote_losscont, w_action, Env, SemValue, Tree};
use selc::eval::{step, trace};
use selc::parser::{parse_expr_with, print_expr};
use selc::syntax::{analyze, ContContext, Expr, ExprForm, ExprKind, LossVec};
use selc::types::{check, TypeEnv};

fn replug(form: &ExprForm, sig: &selc::syntax::Signature) -> Option<Expr> {
    match form {
        ExprForm::IsValue(v) => Some(v.clone()),
        ExprForm::IsStuck(k, op, v) => {
            Some(k.plug(Expr::new(ExprKind::OpCall(op.clone(), v.clone()))))
        }
        ExprForm::IsRedex(_) => None,
        ExprForm::InRegularFrame(f, e) => Some(f.plug(e.clone())),
        ExprForm::InSpecialFrame(s, e) => Some(s.plug(e.clone())),
    }
    .map(|e| {
        let _ = sig;
        e
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Decomposition is unique and re-plugging restores the expression, at
    /// every step of the evaluation.
    #[test]
    fn analysis_replug_restores_the_term(seed in 0u64..5000) {
        let (e, ty, eff, globals) = gen_term(seed, 18);
        prop_assert!(check(&TypeEnv::empty(), &e, &ty, &eff, &globals).is_ok());
        let gamma = gen_gamma(seed, &ty, &eff);
        let mut cur = e;
        let mut steps = 0;
        loop {
            let form = analyze(&cur, &globals.signature);
            if let Some(replugged) = replug(&form, &globals.signature) {
                prop_assert_eq!(&replugged, &cur);
            }
            match step(&gamma, &eff, &cur, &globals).unwrap() {
                Some(out) => cur = out.next,
                None => break,
            }
            steps += 1;
            prop_assert!(steps < 100_000);
        }
    }

    /// Printing and re-parsing a generated well-typed term is the identity.
    #[test]
    fn print_parse_round_trip(seed in 0u64..5000) {
        let (e, _ty, eff, globals) = gen_term(seed, 20);
        let printed = print_expr(&e);
        let reparsed = parse_expr_with(&printed, &globals, &eff)
            .map_err(|err| TestCaseError::fail(format!("{err}\n{printed}")))?;
        prop_assert_eq!(reparsed, e, "printed: {}", printed);
    }

    /// Big-step loss equals the sum of the trace losses, and the machine's
    /// per-step losses and expressions match iterated single steps.
    #[test]
    fn machine_agrees_with_iterated_step(seed in 0u64..2000) {
        let (e, ty, eff, globals) = gen_term(seed, 18);
        let gamma = gen_gamma(seed, &ty, &eff);
        let (tr, res) = trace(&gamma, &eff, &e, 1_000_000, &globals).unwrap();
        let mut total = LossVec::zero(globals.loss_dim);
        let mut cur = e;
        for (i, t) in tr.iter().enumerate() {
            let out = step(&gamma, &eff, &cur, &globals).unwrap()
                .unwrap_or_else(|| panic!("step {i} missing"));
            prop_assert_eq!(&t.loss, &out.loss, "loss at step {}", i);
            prop_assert_eq!(&t.expr, &out.next, "expression at step {}", i);
            total = total.add(&t.loss);
            cur = out.next;
        }
        prop_assert!(step(&gamma, &eff, &cur, &globals).unwrap().is_none());
        prop_assert_eq!(total, res.loss);
        prop_assert_eq!(tr.len() as u64, res.steps);
    }

    /// `handled_ops` composes over contexts: regular frames add nothing,
    /// handle frames add their label's operations.
    #[test]
    fn handled_ops_composes(seed in 0u64..2000) {
        let (e, _ty, _eff, globals) = gen_term(seed, 18);
        if let ExprForm::IsStuck(k, _, _) = analyze(&e, &globals.signature) {
            let mut expected = selc::syntax::Effect::empty();
            for f in &k.frames {
                if let selc::syntax::Frame::Spec(selc::syntax::SpecFrame::HandleBody(h, _)) = f {
                    expected.add(&h.label, 1);
                }
            }
            prop_assert_eq!(k.handled_eff(), expected);
            let hole = ContContext::hole();
            prop_assert!(hole.handled_ops(&globals.signature).is_empty());
        }
    }

    /// The writer action is a monoid action within tolerance.
    #[test]
    fn action_laws(r in proptest::collection::vec(-1e3f64..1e3, 1..3),
                   s in proptest::collection::vec(-1e3f64..1e3, 1..3),
                   x in -1e3f64..1e3) {
        let dim = r.len().min(s.len());
        let r = LossVec::from_vec(r[..dim].to_vec());
        let s = LossVec::from_vec(s[..dim].to_vec());
        let t = Tree::Leaf((LossVec::scalar(x, dim), SemValue::unit()));
        // 0 · u = u
        let zero = LossVec::zero(dim);
        match (w_action(&zero, &t), &t) {
            (Tree::Leaf((a, _)), Tree::Leaf((b, _))) => prop_assert!(a.approx_eq(b, 1e-12)),
            _ => prop_assert!(false),
        }
        // r · (s · u) = (r + s) · u
        let lhs = w_action(&r, &w_action(&s, &t));
        let rhs = w_action(&r.add(&s), &t);
        match (lhs, rhs) {
            (Tree::Leaf((a, _)), Tree::Leaf((b, _))) => prop_assert!(a.approx_eq(&b, 1e-9)),
            _ => prop_assert!(false),
        }
    }

    /// Probe-based tree equality is reflexive, symmetric, and monotone in
    /// the tolerance.
    #[test]
    fn tree_equal_laws(seed in 0u64..500) {
        let (e, ty, eff, globals) = gen_term(seed, 12);
        let gamma = gen_gamma(seed, &ty, &eff);
        let gamma_sem = denote_losscont(&Env::empty(), &gamma, &globals);
        let t = denote_expr(&Env::empty(), &e, &eff, &globals).run(&gamma_sem);
        let probes = ProbeSet::default();
        prop_assert!(tree_equal(&t, &t, &probes, 1e-9, &globals).is_ok());
        // Symmetry against a shifted copy, both directions.
        let shifted = w_action(&LossVec::scalar(1e-12, globals.loss_dim), &t);
        let ab = tree_equal(&t, &shifted, &probes, 1e-9, &globals).is_ok();
        let ba = tree_equal(&shifted, &t, &probes, 1e-9, &globals).is_ok();
        prop_assert_eq!(ab, ba);
        // Tolerance-monotone: anything passing at 1e-9 passes at 1e-3.
        if ab {
            prop_assert!(tree_equal(&t, &shifted, &probes, 1e-3, &globals).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Closed values denote unit computations: `⟦v⟧ γ = Leaf((0, V⟦v⟧))`.
    #[test]
    fn value_lemma(seed in 0u64..3000) {
        let (e, ty, eff, globals) = gen_term(seed, 14);
        let gamma = gen_gamma(seed, &ty, &eff);
        if let Ok(res) = selc::eval::big_eval(&gamma, &eff, &e, 200_000, &globals) {
            if let selc::eval::Terminal::Val(v) = res.terminal {
                let gamma_sem = denote_losscont(&Env::empty(), &gamma, &globals);
                let t = denote_expr(&Env::empty(), &v, &eff, &globals).run(&gamma_sem);
                match t {
                    Tree::Leaf((r, sem)) => {
                        prop_assert!(r.is_zero());
                        let direct = selc::denote::denote_value(&Env::empty(), &v, &globals);
                        if let Some(eq) = sem.approx_eq(&direct, 1e-9) {
                            prop_assert!(eq);
                        }
                    }
                    Tree::Node { .. } => prop_assert!(false, "value denoted a node"),
                }
            }
        }
    }
}

#[test]
fn bind_is_associative_on_probed_loss_functions() {
    use selc::conform::gen_globals;
    use selc::denote::{sel_bind, sel_unit, FnSem};
    use selc::syntax::Effect;
    use std::sync::Arc;

    let globals = gen_globals();
    let eff = Effect::singleton(selc::syntax::EffectLabel::new("ndet"));
    // F performs an operation so associativity is exercised across a node.
    let f_comp = denote_expr(
        &Env::empty(),
        &Expr::new(ExprKind::OpCall(selc::syntax::name("decide"), Expr::unit())),
        &eff,
        &globals,
    );
    let f: FnSem = Arc::new(|v: &SemValue| {
        sel_unit(SemValue::TupleV(vec![v.clone(), SemValue::unit()]), 1)
    });
    let g: FnSem = Arc::new(|v: &SemValue| match v {
        SemValue::TupleV(vs) => sel_unit(vs[0].clone(), 1),
        _ => sel_unit(v.clone(), 1),
    });
    let lhs = sel_bind(sel_bind(f_comp.clone(), f.clone()), g.clone());
    let rhs = sel_bind(
        f_comp,
        Arc::new(move |x: &SemValue| sel_bind(f(x), g.clone())),
    );
    let gamma: selc::denote::LossFn = Arc::new(|_| Tree::Leaf(LossVec::scalar(0.5, 1)));
    let probes = ProbeSet::default();
    tree_equal(&lhs.run(&gamma), &rhs.run(&gamma), &probes, 1e-9, &globals).unwrap();
}
