//! Differential testing between the operational and denotational semantics:
//! per-step soundness, evaluation soundness, giant-step adequacy, and a
//! generator of closed well-typed terms with shrinking.
//!
//! Effect-tree children are demand-computed functions over possibly infinite
//! in-types, so equality is probed: finite in-types are enumerated
//! exhaustively and infinite ones sampled from a fixed deterministic set.
//! Probing under-approximates the adequacy relation; that is inherent.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denote::{
    denote_expr, denote_losscont, denote_value, w_action, Env, LossFn, NodeTag, SemValue, Tree,
    WTree,
};
use crate::eval::{big_eval, giant_eval, step, GiantValue, Terminal};
use crate::syntax::{
    name, ContContext, Effect, EffectLabel, Expr, ExprKind, Frame, Globals, Handler, Lambda,
    LossCont, LossVec, Name, OpSig, Signature, SpecFrame, TypeExpr, TypeNode,
};
use crate::types::{check, TypeEnv};

// ---------------------------------------------------------------------------
// Probe sets
// ---------------------------------------------------------------------------

/// Deterministic finite value sets per in-type: everything for the finite
/// types, bounded samples elsewhere.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub seed: u64,
    /// Naturals `0..=max_nat`.
    pub max_nat: u64,
    /// Lists up to this length over probed elements.
    pub max_list: usize,
    /// Loss components sampled for the `loss` type.
    pub loss_samples: Vec<f64>,
    /// Cap on the number of probes per type.
    pub max_probes: usize,
}

impl Default for ProbeSet {
    fn default() -> Self {
        ProbeSet {
            seed: 0,
            max_nat: 3,
            max_list: 2,
            loss_samples: vec![0.0, 1.0, -2.5, 0.5],
            max_probes: 16,
        }
    }
}

impl ProbeSet {
    /// The probe values of a type; `None` when the type contains functions.
    pub fn values(&self, ty: &TypeExpr, dim: usize) -> Option<Vec<SemValue>> {
        let mut out = self.values_unbounded(ty, dim)?;
        out.truncate(self.max_probes);
        Some(out)
    }

    fn values_unbounded(&self, ty: &TypeExpr, dim: usize) -> Option<Vec<SemValue>> {
        match ty.node() {
            TypeNode::Base(b) => Some(match &**b {
                "loss" => self
                    .loss_samples
                    .iter()
                    .map(|x| SemValue::loss(LossVec::scalar(*x, dim)))
                    .collect(),
                "char" => vec![
                    SemValue::ConstV(crate::syntax::Literal::Char('a')),
                    SemValue::ConstV(crate::syntax::Literal::Char('b')),
                ],
                _ => vec![
                    SemValue::ConstV(crate::syntax::Literal::Str(Arc::from(""))),
                    SemValue::ConstV(crate::syntax::Literal::Str(Arc::from("a"))),
                ],
            }),
            TypeNode::Nat => Some((0..=self.max_nat).map(SemValue::NatV).collect()),
            TypeNode::Product(ts) => {
                let mut combos: Vec<Vec<SemValue>> = vec![vec![]];
                for t in ts {
                    let vs = self.values(t, dim)?;
                    let mut next = Vec::new();
                    for c in &combos {
                        for v in &vs {
                            let mut c2 = c.clone();
                            c2.push(v.clone());
                            next.push(c2);
                            if next.len() > self.max_probes {
                                break;
                            }
                        }
                    }
                    combos = next;
                }
                Some(combos.into_iter().map(SemValue::TupleV).collect())
            }
            TypeNode::Sum(l, r) => {
                let mut out = Vec::new();
                for v in self.values(l, dim)? {
                    out.push(SemValue::TagV(0, Arc::new(v)));
                }
                for v in self.values(r, dim)? {
                    out.push(SemValue::TagV(1, Arc::new(v)));
                }
                Some(out)
            }
            TypeNode::List(t) => {
                let elems = self.values(t, dim)?;
                let mut out = vec![SemValue::ListV(vec![])];
                let mut prev: Vec<Vec<SemValue>> = vec![vec![]];
                for _ in 0..self.max_list {
                    let mut next = Vec::new();
                    for p in &prev {
                        for v in elems.iter().take(2) {
                            let mut p2 = p.clone();
                            p2.push(v.clone());
                            next.push(p2);
                        }
                    }
                    out.extend(next.iter().cloned().map(SemValue::ListV));
                    prev = next;
                }
                Some(out)
            }
            TypeNode::Fn(..) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Mismatches and tree equality
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Step,
    Eval,
    Giant,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Step => write!(f, "step"),
            Stage::Eval => write!(f, "eval"),
            Stage::Giant => write!(f, "giant"),
        }
    }
}

/// A point where the two semantics disagree.
#[derive(Clone, Debug)]
pub struct Mismatch {
    pub program: String,
    pub stage: Stage,
    /// Probe values walked into the tree, outermost first.
    pub path: Vec<String>,
    pub lhs: String,
    pub rhs: String,
    pub tolerance: f64,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} mismatch at [{}]: {} vs {} (tol {}) in {}",
            self.stage,
            self.path.join(", "),
            self.lhs,
            self.rhs,
            self.tolerance,
            self.program
        )
    }
}

fn mismatch(
    stage: Stage,
    path: &[String],
    lhs: impl std::fmt::Debug,
    rhs: impl std::fmt::Debug,
    tol: f64,
) -> Mismatch {
    Mismatch {
        program: String::new(),
        stage,
        path: path.to_vec(),
        lhs: format!("{lhs:?}"),
        rhs: format!("{rhs:?}"),
        tolerance: tol,
    }
}

struct TreeCmp<'a> {
    probes: &'a ProbeSet,
    tol: f64,
    globals: &'a Globals,
    stage: Stage,
}

impl<'a> TreeCmp<'a> {
    fn heads_equal(
        &self,
        t1: &NodeTag,
        o1: &SemValue,
        t2: &NodeTag,
        o2: &SemValue,
        path: &[String],
    ) -> Result<(), Mismatch> {
        if t1 != t2 {
            return Err(mismatch(self.stage, path, t1, t2, self.tol));
        }
        match o1.approx_eq(o2, self.tol) {
            Some(true) => Ok(()),
            _ => Err(mismatch(self.stage, path, o1, o2, self.tol)),
        }
    }

    fn w_equal(&self, t1: &WTree, t2: &WTree, path: &mut Vec<String>) -> Result<(), Mismatch> {
        match (t1, t2) {
            (Tree::Leaf((r1, v1)), Tree::Leaf((r2, v2))) => {
                if !r1.approx_eq(r2, self.tol) {
                    return Err(mismatch(self.stage, path, r1, r2, self.tol));
                }
                match v1.approx_eq(v2, self.tol) {
                    Some(true) => Ok(()),
                    Some(false) => Err(mismatch(self.stage, path, v1, v2, self.tol)),
                    None => Err(mismatch(
                        self.stage,
                        path,
                        "function-valued leaf",
                        "function-valued leaf",
                        self.tol,
                    )),
                }
            }
            (
                Tree::Node { tag: g1, out: o1, children: c1 },
                Tree::Node { tag: g2, out: o2, children: c2 },
            ) => {
                self.heads_equal(g1, o1, g2, o2, path)?;
                let in_ty = self
                    .globals
                    .signature
                    .lookup_op(&g1.op)
                    .map(|o| o.in_ty.clone())
                    .ok_or_else(|| {
                        mismatch(self.stage, path, "unknown op", &g1.op, self.tol)
                    })?;
                let vals = self.probes.values(&in_ty, self.globals.loss_dim).ok_or_else(
                    || mismatch(self.stage, path, "unprobeable in-type", &in_ty, self.tol),
                )?;
                for v in vals {
                    path.push(format!("{v:?}"));
                    self.w_equal(&c1(&v), &c2(&v), path)?;
                    path.pop();
                }
                Ok(())
            }
            (l, r) => Err(mismatch(self.stage, path, l, r, self.tol)),
        }
    }
}

/// Probe-based equality of writer trees: leaves compared componentwise
/// within the tolerance, nodes need equal heads and equal children at every
/// probe of the operation's in-type.
pub fn tree_equal(
    t1: &WTree,
    t2: &WTree,
    probes: &ProbeSet,
    tol: f64,
    globals: &Globals,
) -> Result<(), Mismatch> {
    let cmp = TreeCmp { probes, tol, globals, stage: Stage::Eval };
    cmp.w_equal(t1, t2, &mut Vec::new())
}

/// Render a writer tree as JSON to bounded depth, children expanded only at
/// probe values.
pub fn tree_to_json(
    t: &WTree,
    probes: &ProbeSet,
    depth: usize,
    globals: &Globals,
) -> serde_json::Value {
    match t {
        Tree::Leaf((r, v)) => serde_json::json!({
            "leaf": { "loss": r.0.to_vec(), "value": format!("{v:?}") }
        }),
        Tree::Node { tag, out, children } => {
            let mut kids = serde_json::Map::new();
            if depth > 0 {
                if let Some(op) = globals.signature.lookup_op(&tag.op) {
                    if let Some(vals) = probes.values(&op.in_ty, globals.loss_dim) {
                        for v in vals.iter().take(6) {
                            kids.insert(
                                format!("{v:?}"),
                                tree_to_json(&children(v), probes, depth - 1, globals),
                            );
                        }
                    }
                }
            }
            serde_json::json!({
                "node": { "label": tag.label.as_str(), "op": tag.op.to_string(),
                          "idx": tag.idx, "out": format!("{out:?}"),
                          "children": kids }
            })
        }
    }
}

/// Render a writer tree to bounded depth, expanding children at probes.
pub fn render_tree(t: &WTree, probes: &ProbeSet, depth: usize, globals: &Globals) -> String {
    match t {
        Tree::Leaf((r, v)) => format!("({r}, {v:?})"),
        Tree::Node { tag, out, children } => {
            if depth == 0 {
                return format!("{}.{}#{}({out:?}, …)", tag.label.as_str(), tag.op, tag.idx);
            }
            let mut kids = Vec::new();
            if let Some(op) = globals.signature.lookup_op(&tag.op) {
                if let Some(vals) = probes.values(&op.in_ty, globals.loss_dim) {
                    for v in vals.iter().take(4) {
                        kids.push(format!(
                            "{v:?} -> {}",
                            render_tree(&children(v), probes, depth - 1, globals)
                        ));
                    }
                }
            }
            format!(
                "{}.{}#{}({out:?}, [{}])",
                tag.label.as_str(),
                tag.op,
                tag.idx,
                kids.join("; ")
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Soundness and adequacy checkers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConformParams {
    pub probes: ProbeSet,
    pub tol: f64,
    pub fuel: u64,
    /// Resume depth for giant-step adequacy.
    pub depth: usize,
}

impl Default for ConformParams {
    fn default() -> Self {
        ConformParams { probes: ProbeSet::default(), tol: 1e-9, fuel: 1_000_000, depth: 3 }
    }
}

fn denote_at(e: &Expr, eff: &Effect, globals: &Globals, gamma: &LossFn) -> WTree {
    denote_expr(&Env::empty(), e, eff, globals).run(gamma)
}

/// The ambient effect at the hole of a continuation context: handle frames
/// add their label, `local` frames switch to their annotation.
pub fn eff_at_hole(k: &ContContext, top: &Effect) -> Effect {
    let mut eff = top.clone();
    for f in &k.frames {
        match f {
            Frame::Spec(SpecFrame::HandleBody(h, _)) => eff = eff.plus_label(&h.label),
            Frame::Spec(SpecFrame::GLocal(e1, _)) => eff = e1.clone(),
            _ => {}
        }
    }
    eff
}

/// For every step of the trace, `⟦e⟧L⟦γ⟧ = r · ⟦e'⟧L⟦γ⟧`.
pub fn check_step_soundness(
    e: &Expr,
    gamma: &LossCont,
    eff: &Effect,
    params: &ConformParams,
    globals: &Globals,
) -> Result<u64, Mismatch> {
    let gamma_sem = denote_losscont(&Env::empty(), gamma, globals);
    let mut cur = e.clone();
    let mut lhs = denote_at(&cur, eff, globals, &gamma_sem);
    let mut steps = 0u64;
    loop {
        let out = step(gamma, eff, &cur, globals).map_err(|err| {
            mismatch(Stage::Step, &[], format!("evaluation error: {err}"), "", params.tol)
        })?;
        let Some(out) = out else { return Ok(steps) };
        let next_tree = denote_at(&out.next, eff, globals, &gamma_sem);
        let rhs = w_action(&out.loss, &next_tree);
        let cmp = TreeCmp { probes: &params.probes, tol: params.tol, globals, stage: Stage::Step };
        cmp.w_equal(&lhs, &rhs, &mut vec![format!("step {steps}")])?;
        cur = out.next;
        lhs = next_tree;
        steps += 1;
        if steps >= params.fuel {
            return Err(mismatch(Stage::Step, &[], "fuel exhausted", "", params.tol));
        }
    }
}

/// Big-step result against the denotation: a value terminal must denote a
/// leaf with the same loss and value; a stuck terminal must match the
/// residual operation tree with the produced loss acting on it.
pub fn check_eval_soundness(
    e: &Expr,
    gamma: &LossCont,
    eff: &Effect,
    params: &ConformParams,
    globals: &Globals,
) -> Result<(), Mismatch> {
    let gamma_sem = denote_losscont(&Env::empty(), gamma, globals);
    let lhs = denote_at(e, eff, globals, &gamma_sem);
    let res = big_eval(gamma, eff, e, params.fuel, globals).map_err(|err| {
        mismatch(Stage::Eval, &[], format!("evaluation error: {err}"), "", params.tol)
    })?;
    let cmp = TreeCmp { probes: &params.probes, tol: params.tol, globals, stage: Stage::Eval };
    match &res.terminal {
        Terminal::Val(v) => {
            let rhs = Tree::Leaf((res.loss.clone(), denote_value(&Env::empty(), v, globals)));
            cmp.w_equal(&lhs, &rhs, &mut Vec::new())
        }
        Terminal::StuckOp(k, opname, arg) => {
            // Whole-tree comparison against r · ⟦K[op(v)]⟧L⟦γ⟧.
            let terminal_expr = k.plug(Expr::new(ExprKind::OpCall(opname.clone(), arg.clone())));
            let rhs = w_action(&res.loss, &denote_at(&terminal_expr, eff, globals, &gamma_sem));
            cmp.w_equal(&lhs, &rhs, &mut Vec::new())?;

            // Head shape: the residual tree starts with this operation at
            // depth ε(ℓ), carrying the argument's value semantics, and its
            // children continue the context.
            let op = globals.signature.lookup_op(opname).expect("declared op");
            match &lhs {
                Tree::Node { tag, out, children } => {
                    // The residual operation's depth index comes from the
                    // ambient effect at the hole, not the top judgment: a
                    // `local` in the context converts to a smaller effect
                    // and the tree embeds by inclusion.
                    let hole_eff = eff_at_hole(k, eff);
                    let expected = NodeTag {
                        label: op.label.clone(),
                        op: op.name.clone(),
                        idx: hole_eff.count(&op.label),
                    };
                    cmp.heads_equal(tag, out, &expected, &denote_value(&Env::empty(), arg, globals), &[])?;
                    let hole = name("_hole");
                    let under = k.plug(Expr::var_named(hole.clone()));
                    if let Some(vals) = params.probes.values(&op.in_ty, globals.loss_dim) {
                        for v in vals {
                            let env = Env::empty().bind(hole.clone(), v.clone());
                            let child_sem =
                                denote_expr(&env, &under, eff, globals).run(&gamma_sem);
                            let expected_child = w_action(&res.loss, &child_sem);
                            cmp.w_equal(
                                &children(&v),
                                &expected_child,
                                &mut vec![format!("{v:?}")],
                            )?;
                        }
                    }
                    Ok(())
                }
                t => Err(mismatch(Stage::Eval, &[], "stuck terminal", t, params.tol)),
            }
        }
    }
}

/// The giant-step effect value sits below the denotation: equal losses and
/// values at leaves, equal operation heads with related children at every
/// probe, to the given resume depth.
pub fn check_giant_adequacy(
    e: &Expr,
    gamma: &LossCont,
    eff: &Effect,
    params: &ConformParams,
    globals: &Globals,
) -> Result<(), Mismatch> {
    let gamma_sem = denote_losscont(&Env::empty(), gamma, globals);
    let gv = giant_eval(gamma, eff, e, params.fuel, globals).map_err(|err| {
        mismatch(Stage::Giant, &[], format!("evaluation error: {err}"), "", params.tol)
    })?;
    let t = denote_at(e, eff, globals, &gamma_sem);
    giant_below(&gv, &t, params.depth, params, eff, globals, &mut Vec::new())
}

fn giant_below(
    gv: &GiantValue,
    t: &WTree,
    depth: usize,
    params: &ConformParams,
    eff: &Effect,
    globals: &Globals,
    path: &mut Vec<String>,
) -> Result<(), Mismatch> {
    let tol = params.tol;
    match (gv, t) {
        (GiantValue::Done(r, v), Tree::Leaf((s, a))) => {
            if !r.approx_eq(s, tol) {
                return Err(mismatch(Stage::Giant, path, r, s, tol));
            }
            let vsem = denote_value(&Env::empty(), v, globals);
            match vsem.approx_eq(a, tol) {
                Some(true) => Ok(()),
                _ => Err(mismatch(Stage::Giant, path, vsem, a, tol)),
            }
        }
        (GiantValue::OpNode { label, op, arg, resume }, Tree::Node { tag, out, children }) => {
            if &tag.label != label || &tag.op != op {
                return Err(mismatch(Stage::Giant, path, (label, op), tag, tol));
            }
            // The index is bounded by the top ambient: `local` frames only
            // shrink the effect at the hole.
            if tag.idx == 0 || tag.idx > eff.count(label) {
                return Err(mismatch(Stage::Giant, path, "index in 1..=ε(ℓ)", tag, tol));
            }
            let argsem = denote_value(&Env::empty(), arg, globals);
            if argsem.approx_eq(out, tol) != Some(true) {
                return Err(mismatch(Stage::Giant, path, argsem, out, tol));
            }
            if depth == 0 {
                return Ok(());
            }
            let op_sig = globals.signature.lookup_op(op).expect("declared op");
            let Some(vals) = params.probes.values(&op_sig.in_ty, globals.loss_dim) else {
                return Ok(()); // function-typed in-values are not probed
            };
            for v in vals {
                let w = v
                    .to_expr(&op_sig.in_ty)
                    .expect("probe values of first-order in-types convert");
                let child_gv = resume(&w).map_err(|err| {
                    mismatch(Stage::Giant, path, format!("evaluation error: {err}"), "", tol)
                })?;
                path.push(format!("{v:?}"));
                giant_below(&child_gv, &children(&v), depth - 1, params, eff, globals, path)?;
                path.pop();
            }
            Ok(())
        }
        (l, r) => Err(mismatch(Stage::Giant, path, l, r, tol)),
    }
}

// ---------------------------------------------------------------------------
// Term generation
// ---------------------------------------------------------------------------

/// The three-label well-founded signature the property suites run against.
pub fn gen_signature() -> Signature {
    let mut sig = Signature::new();
    let tick = EffectLabel::new("tick");
    sig.declare(
        tick.clone(),
        vec![OpSig {
            name: name("tock"),
            out_ty: TypeExpr::unit(),
            in_ty: TypeExpr::unit(),
            label: tick,
        }],
    )
    .unwrap();
    let ndet = EffectLabel::new("ndet");
    sig.declare(
        ndet.clone(),
        vec![OpSig {
            name: name("decide"),
            out_ty: TypeExpr::unit(),
            in_ty: TypeExpr::bool(),
            label: ndet,
        }],
    )
    .unwrap();
    let pick = EffectLabel::new("pick");
    sig.declare(
        pick.clone(),
        vec![OpSig {
            name: name("choose"),
            out_ty: TypeExpr::product(vec![TypeExpr::loss(), TypeExpr::loss()]),
            in_ty: TypeExpr::loss(),
            label: pick,
        }],
    )
    .unwrap();
    sig
}

pub fn gen_globals() -> Globals {
    Globals::new(gen_signature(), 1)
}

struct TermGen {
    rng: ChaCha8Rng,
    globals: Globals,
}

impl TermGen {
    fn new(seed: u64, globals: Globals) -> Self {
        TermGen { rng: ChaCha8Rng::seed_from_u64(seed), globals }
    }

    fn pick<T: Clone>(&mut self, xs: &[T]) -> T {
        xs[self.rng.random_range(0..xs.len())].clone()
    }

    fn small_ty(&mut self, depth: usize) -> TypeExpr {
        let base = [
            TypeExpr::loss(),
            TypeExpr::unit(),
            TypeExpr::bool(),
            TypeExpr::nat(),
            TypeExpr::char(),
        ];
        if depth == 0 || self.rng.random_range(0..4) > 0 {
            return self.pick(&base);
        }
        match self.rng.random_range(0..3) {
            0 => TypeExpr::product(vec![self.small_ty(depth - 1), self.small_ty(depth - 1)]),
            1 => TypeExpr::sum(self.small_ty(depth - 1), self.small_ty(depth - 1)),
            _ => TypeExpr::list(self.small_ty(depth - 1)),
        }
    }

    /// The cheapest closed value of a type.
    fn minimal(&mut self, ty: &TypeExpr) -> Expr {
        match ty.node() {
            TypeNode::Base(b) => match &**b {
                "loss" => Expr::lit_loss(LossVec::zero(self.globals.loss_dim)),
                "char" => Expr::lit_char('a'),
                _ => Expr::lit_str("s"),
            },
            TypeNode::Product(ts) => {
                Expr::tuple(ts.iter().map(|t| self.minimal(&t.clone())).collect())
            }
            TypeNode::Sum(l, r) => {
                let (l, r) = (l.clone(), r.clone());
                Expr::inl(l.clone(), r, self.minimal(&l))
            }
            TypeNode::Nat => Expr::zero(),
            TypeNode::List(t) => Expr::nil(t.clone()),
            TypeNode::Fn(a, r, eff) => {
                let body = self.minimal(&r.clone());
                Expr::lam(Lambda::new(eff.clone(), name("_m"), a.clone(), body))
            }
        }
    }

    fn sample_loss(&mut self) -> Expr {
        let samples = [0.0, 1.0, -2.5, 0.5, 2.0, 3.5];
        let x = self.pick(&samples);
        Expr::lit_loss(LossVec::scalar(x, self.globals.loss_dim))
    }

    fn sub_effect(&mut self, eff: &Effect) -> Effect {
        let mut out = Effect::empty();
        for (l, n) in eff.iter() {
            let keep = self.rng.random_range(0..=n);
            out.add(l, keep);
        }
        out
    }

    fn gen_value(&mut self, env: &[(Name, TypeExpr)], ty: &TypeExpr, budget: &mut i64) -> Expr {
        *budget -= 1;
        // Prefer a matching variable now and then. Only the innermost
        // binding of each name is visible.
        if self.rng.random_range(0..3) == 0 {
            let mut innermost: Vec<(Name, TypeExpr)> = Vec::new();
            for (n, t) in env {
                if let Some(slot) = innermost.iter_mut().find(|(m, _)| m == n) {
                    slot.1 = t.clone();
                } else {
                    innermost.push((n.clone(), t.clone()));
                }
            }
            let candidates: Vec<Name> = innermost
                .into_iter()
                .filter(|(_, t)| t == ty)
                .map(|(n, _)| n)
                .collect();
            if !candidates.is_empty() {
                return Expr::var_named(self.pick(&candidates));
            }
        }
        if *budget <= 0 {
            return self.minimal(ty);
        }
        match ty.node() {
            TypeNode::Base(b) if &**b == "loss" => self.sample_loss(),
            TypeNode::Base(b) if &**b == "char" => {
                Expr::lit_char(self.pick(&['a', 'b', 'c']))
            }
            TypeNode::Base(_) => Expr::lit_str(&self.pick(&["s", "aabb", "abc"])),
            TypeNode::Product(ts) => {
                let ts = ts.clone();
                Expr::tuple(ts.iter().map(|t| self.gen_value(env, t, budget)).collect())
            }
            TypeNode::Sum(l, r) => {
                let (l, r) = (l.clone(), r.clone());
                if self.rng.random_range(0..2) == 0 {
                    let v = self.gen_value(env, &l, budget);
                    Expr::inl(l, r, v)
                } else {
                    let v = self.gen_value(env, &r, budget);
                    Expr::inr(l, r, v)
                }
            }
            TypeNode::Nat => Expr::nat(self.rng.random_range(0..4)),
            TypeNode::List(t) => {
                let t = t.clone();
                let len = self.rng.random_range(0..3);
                let items = (0..len).map(|_| self.gen_value(env, &t, budget)).collect();
                Expr::list(t, items)
            }
            TypeNode::Fn(a, r, eff) => {
                let (a, r, eff) = (a.clone(), r.clone(), eff.clone());
                let var = name(&format!("v{}", env.len()));
                let mut env2 = env.to_vec();
                env2.push((var.clone(), a.clone()));
                let body = self.gen_expr(&env2, &r, &eff, budget);
                Expr::lam(Lambda::new(eff, var, a, body))
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn gen_expr(
        &mut self,
        env: &[(Name, TypeExpr)],
        ty: &TypeExpr,
        eff: &Effect,
        budget: &mut i64,
    ) -> Expr {
        *budget -= 1;
        if *budget <= 0 {
            return self.gen_value(env, ty, budget);
        }
        // Operation calls available at this type and effect.
        let mut ops: Vec<OpSig> = Vec::new();
        for l in eff.labels() {
            for op in self.globals.signature.ops_of(l).unwrap_or(&[]) {
                if &op.in_ty == ty {
                    ops.push(op.clone());
                }
            }
        }

        let roll = self.rng.random_range(0..100);
        match roll {
            // Plain values.
            0..=24 => self.gen_value(env, ty, budget),
            // A beta redex.
            25..=37 => {
                let arg_ty = self.small_ty(1);
                let var = name(&format!("v{}", env.len()));
                let mut env2 = env.to_vec();
                env2.push((var.clone(), arg_ty.clone()));
                let body = self.gen_expr(&env2, ty, eff, budget);
                let arg = self.gen_expr(env, &arg_ty, eff, budget);
                Expr::app(Expr::lam(Lambda::new(eff.clone(), var, arg_ty, body)), arg)
            }
            // Operation call, when one fits.
            38..=55 if !ops.is_empty() => {
                let op = self.pick(&ops);
                let arg = self.gen_expr(env, &op.out_ty, eff, budget);
                Expr::new(ExprKind::OpCall(op.name.clone(), arg))
            }
            // cases of a generated sum.
            38..=45 => {
                let lt = self.small_ty(1);
                let rt = self.small_ty(1);
                let scrut = self.gen_expr(env, &TypeExpr::sum(lt.clone(), rt.clone()), eff, budget);
                let lv = name(&format!("v{}", env.len()));
                let rv = name(&format!("w{}", env.len()));
                let mut lenv = env.to_vec();
                lenv.push((lv.clone(), lt.clone()));
                let mut renv = env.to_vec();
                renv.push((rv.clone(), rt.clone()));
                let le = self.gen_expr(&lenv, ty, eff, budget);
                let re = self.gen_expr(&renv, ty, eff, budget);
                Expr::cases(scrut, lv, lt, le, rv, rt, re)
            }
            // loss of a generated loss value (unit type only).
            46..=55 if ty.is_unit() => {
                Expr::loss(self.gen_expr(env, &TypeExpr::loss(), eff, budget))
            }
            // Projection.
            46..=52 => {
                let other = self.small_ty(0);
                let pair = TypeExpr::product(vec![ty.clone(), other]);
                let e = self.gen_expr(env, &pair, eff, budget);
                Expr::proj(e, 1)
            }
            // iter with a small bound.
            53..=58 => {
                let n = self.gen_expr(env, &TypeExpr::nat(), eff, budget);
                let z = self.gen_expr(env, ty, eff, budget);
                let var = name(&format!("v{}", env.len()));
                let mut env2 = env.to_vec();
                env2.push((var.clone(), ty.clone()));
                let body = self.gen_expr(&env2, ty, eff, budget);
                let s = Expr::lam(Lambda::new(eff.clone(), var, ty.clone(), body));
                Expr::iter(n, z, s)
            }
            // fold over a short generated list.
            59..=64 => {
                let elem = self.small_ty(0);
                let l = self.gen_expr(env, &TypeExpr::list(elem.clone()), eff, budget);
                let z = self.gen_expr(env, ty, eff, budget);
                let var = name(&format!("v{}", env.len()));
                let pair = TypeExpr::product(vec![elem, ty.clone()]);
                let mut env2 = env.to_vec();
                env2.push((var.clone(), pair.clone()));
                let body = self.gen_expr(&env2, ty, eff, budget);
                let c = Expr::lam(Lambda::new(eff.clone(), var, pair, body));
                Expr::fold(l, z, c)
            }
            // then: build a loss via a loss continuation. The continuation
            // keeps the full ambient effect: an op-containing body under a
            // count-dropping effect inside a handler's scope is the corner
            // where the two semantics disagree (see the evaluator docs).
            65..=70 if ty.is_loss() => {
                let src_ty = self.small_ty(0);
                let left = self.gen_expr(env, &src_ty, eff, budget);
                let cont = self.gen_losscont(env, &src_ty, &eff.clone(), budget);
                Expr::then(eff.clone(), left, cont)
            }
            // local: run under a chosen loss continuation, at the full
            // ambient effect for the same reason.
            65..=72 => {
                let body = self.gen_expr(env, ty, eff, budget);
                let cont = self.gen_losscont(env, ty, &eff.clone(), budget);
                Expr::glocal(eff.clone(), body, cont)
            }
            // reset.
            73..=76 => Expr::reset(self.gen_expr(env, ty, eff, budget)),
            // A handler over one label.
            77..=94 => self.gen_handle(env, ty, eff, budget),
            // Primitive applications producing this type.
            _ => {
                if ty.is_loss() {
                    let a = self.gen_expr(env, &TypeExpr::loss(), eff, budget);
                    let b = self.gen_expr(env, &TypeExpr::loss(), eff, budget);
                    let op = self.pick(&["add", "sub", "mul"]);
                    Expr::prim(op, Expr::tuple(vec![a, b]))
                } else if ty.is_bool() {
                    let a = self.gen_expr(env, &TypeExpr::loss(), eff, budget);
                    let b = self.gen_expr(env, &TypeExpr::loss(), eff, budget);
                    let op = self.pick(&["leq", "lt", "eq"]);
                    Expr::prim(op, Expr::tuple(vec![a, b]))
                } else if *ty == TypeExpr::nat() {
                    let a = self.gen_expr(env, &TypeExpr::loss(), eff, budget);
                    Expr::prim("l2n", a)
                } else {
                    self.gen_value(env, ty, budget)
                }
            }
        }
    }

    fn gen_losscont(
        &mut self,
        env: &[(Name, TypeExpr)],
        var_ty: &TypeExpr,
        eff: &Effect,
        budget: &mut i64,
    ) -> LossCont {
        if self.rng.random_range(0..3) > 0 || *budget <= 0 {
            return LossCont::zero(eff.clone(), var_ty.clone());
        }
        // λ x. e ▷ γ with a loss-typed observation body.
        let var = name(&format!("g{}", env.len()));
        let mid_ty = TypeExpr::loss();
        let mut env2 = env.to_vec();
        env2.push((var.clone(), var_ty.clone()));
        let body = self.gen_expr(&env2, &mid_ty, eff, budget);
        LossCont::Extend {
            eff: eff.clone(),
            var,
            var_ty: var_ty.clone(),
            body,
            rest: Arc::new(LossCont::zero(eff.clone(), mid_ty)),
        }
    }

    fn gen_handle(
        &mut self,
        env: &[(Name, TypeExpr)],
        ty: &TypeExpr,
        eff: &Effect,
        budget: &mut i64,
    ) -> Expr {
        let labels: Vec<EffectLabel> = self.globals.signature.labels().cloned().collect();
        let label = self.pick(&labels);
        let par = self.pick(&[TypeExpr::unit(), TypeExpr::loss(), TypeExpr::nat()]);
        let body_ty = self.small_ty(1);
        let result_ty = ty.clone();
        let h = self.gen_handler(env, &label, &par, &body_ty, &result_ty, eff, budget);
        let param = self.gen_expr(env, &par, eff, budget);
        let body_eff = eff.plus_label(&label);
        let body = self.gen_expr(env, &body_ty, &body_eff, budget);
        Expr::handle(h, param, body)
    }

    #[allow(clippy::too_many_arguments)]
    fn gen_handler(
        &mut self,
        env: &[(Name, TypeExpr)],
        label: &EffectLabel,
        par: &TypeExpr,
        body_ty: &TypeExpr,
        result_ty: &TypeExpr,
        eff: &Effect,
        budget: &mut i64,
    ) -> std::sync::Arc<Handler> {
        let ops = self.globals.signature.ops_of(label).unwrap().to_vec();
        let mut op_clauses = Vec::new();
        for op in &ops {
            let pair_in = TypeExpr::product(vec![par.clone(), op.in_ty.clone()]);
            let l_ty = TypeExpr::func(pair_in.clone(), TypeExpr::loss(), eff.clone());
            let k_ty = TypeExpr::func(pair_in, result_ty.clone(), eff.clone());
            let binder = TypeExpr::product(vec![
                par.clone(),
                op.out_ty.clone(),
                l_ty.clone(),
                k_ty.clone(),
            ]);
            let z = name("_c");
            let zv = Expr::var_named(z.clone());
            let p = Expr::proj(zv.clone(), 1);
            let resume = |gen: &mut Self, env: &[(Name, TypeExpr)], budget: &mut i64| {
                let arg = gen.gen_value(env, &op.in_ty, budget);
                Expr::app(
                    Expr::proj(Expr::var_named(z.clone()), 4),
                    Expr::tuple(vec![Expr::proj(Expr::var_named(z.clone()), 1), arg]),
                )
            };
            let body = match self.rng.random_range(0..4) {
                // Abort: ignore the continuation.
                0 => {
                    let mut env2 = env.to_vec();
                    env2.push((z.clone(), binder.clone()));
                    self.gen_expr(&env2, result_ty, eff, budget)
                }
                // Resume once.
                1 => resume(self, env, budget),
                // Probe the choice continuation, then resume.
                2 => {
                    let probe_arg = self.gen_value(env, &op.in_ty, budget);
                    let probe = Expr::app(
                        Expr::proj(zv.clone(), 3),
                        Expr::tuple(vec![p.clone(), probe_arg]),
                    );
                    let rest = resume(self, env, budget);
                    Expr::app(
                        Expr::lam(Lambda::new(
                            eff.clone(),
                            name("_y"),
                            TypeExpr::loss(),
                            rest,
                        )),
                        probe,
                    )
                }
                // Compare two probes and resume with the cheaper argument.
                _ => {
                    let v1 = self.gen_value(env, &op.in_ty, budget);
                    let v2 = self.gen_value(env, &op.in_ty, budget);
                    let probe = |v: &Expr| {
                        Expr::app(
                            Expr::proj(zv.clone(), 3),
                            Expr::tuple(vec![p.clone(), v.clone()]),
                        )
                    };
                    let resume_with = |v: &Expr| {
                        Expr::app(
                            Expr::proj(zv.clone(), 4),
                            Expr::tuple(vec![p.clone(), v.clone()]),
                        )
                    };
                    let cmp = Expr::ite(
                        Expr::prim("leq", Expr::tuple(vec![Expr::var("_y1"), Expr::var("_y2")])),
                        resume_with(&v1),
                        resume_with(&v2),
                    );
                    let inner = Expr::app(
                        Expr::lam(Lambda::new(eff.clone(), name("_y2"), TypeExpr::loss(), cmp)),
                        probe(&v2),
                    );
                    Expr::app(
                        Expr::lam(Lambda::new(eff.clone(), name("_y1"), TypeExpr::loss(), inner)),
                        probe(&v1),
                    )
                }
            };
            op_clauses.push((op.name.clone(), Lambda::new(eff.clone(), z, binder, body)));
        }

        // Return clause: reuse the result when the body type matches, else a
        // generated value.
        let z = name("_c");
        let ret_binder = TypeExpr::product(vec![par.clone(), body_ty.clone()]);
        let ret_body = if body_ty == result_ty && self.rng.random_range(0..2) == 0 {
            Expr::proj(Expr::var_named(z.clone()), 2)
        } else {
            let mut env2 = env.to_vec();
            env2.push((z.clone(), ret_binder.clone()));
            self.gen_expr(&env2, result_ty, eff, budget)
        };
        std::sync::Arc::new(Handler {
            label: label.clone(),
            param_ty: par.clone(),
            op_clauses,
            return_clause: Lambda::new(eff.clone(), z, ret_binder, ret_body),
            result_eff: eff.clone(),
        })
    }
}

/// Generate a closed, well-typed term together with its type and ambient
/// effect, against the default three-label signature. Deterministic in the
/// seed.
pub fn gen_term(seed: u64, size: usize) -> (Expr, TypeExpr, Effect, Globals) {
    gen_term_with(seed, size, gen_globals())
}

/// Generate against a caller-provided well-founded signature.
pub fn gen_term_with(
    seed: u64,
    size: usize,
    globals: Globals,
) -> (Expr, TypeExpr, Effect, Globals) {
    let mut g = TermGen::new(seed, globals);
    let ty = g.small_ty(1);
    // Over half the terms run under a residual ambient effect, and many of
    // those start with an operation no handler will catch, so the suites
    // see plenty of stuck terminals.
    let mut eff = Effect::empty();
    if g.rng.random_range(0..10) < 6 {
        let labels: Vec<EffectLabel> = g.globals.signature.labels().cloned().collect();
        let n = g.rng.random_range(1..=2);
        for _ in 0..n {
            let l = g.pick(&labels);
            eff.add(&l, 1);
        }
    }
    let mut budget = size as i64;
    let mut e = g.gen_expr(&[], &ty, &eff, &mut budget);
    if !eff.is_empty() && g.rng.random_range(0..10) < 6 {
        let labels: Vec<EffectLabel> = eff.labels().cloned().collect();
        let label = g.pick(&labels);
        let ops = g.globals.signature.ops_of(&label).unwrap().to_vec();
        let op = g.pick(&ops);
        let mut b2 = 4i64;
        let arg = g.gen_value(&[], &op.out_ty.clone(), &mut b2);
        let var = name("r0");
        e = Expr::app(
            Expr::lam(Lambda::new(eff.clone(), var, op.in_ty.clone(), e)),
            Expr::new(ExprKind::OpCall(op.name.clone(), arg)),
        );
    }
    let globals = g.globals;
    (e, ty, eff, globals)
}

/// Generate a loss continuation compatible with a term's type and effect.
pub fn gen_gamma(seed: u64, ty: &TypeExpr, eff: &Effect) -> LossCont {
    let mut g = TermGen::new(seed ^ 0x9e3779b97f4a7c15, gen_globals());
    let sub = g.sub_effect(eff);
    let mut budget = 6i64;
    g.gen_losscont(&[], ty, &sub, &mut budget)
}

/// Structural shrinking: replace the whole term by a type- and
/// effect-compatible closed subterm while the failure persists.
pub fn shrink(
    e: &Expr,
    ty: &TypeExpr,
    eff: &Effect,
    globals: &Globals,
    still_fails: impl Fn(&Expr) -> bool,
) -> Expr {
    let mut cur = e.clone();
    loop {
        let mut candidates = Vec::new();
        collect_subterms(&cur, &mut candidates);
        candidates.sort_by_key(|c| expr_size(c));
        let mut shrunk = None;
        for c in candidates {
            if expr_size(&c) >= expr_size(&cur) || !c.is_closed() {
                continue;
            }
            if check(&TypeEnv::empty(), &c, ty, eff, globals).is_ok() && still_fails(&c) {
                shrunk = Some(c);
                break;
            }
        }
        match shrunk {
            Some(c) => cur = c,
            None => return cur,
        }
    }
}

pub fn expr_size(e: &Expr) -> usize {
    let mut n = 1;
    for_each_child(e, |c| n += expr_size(c));
    n
}

fn collect_subterms(e: &Expr, out: &mut Vec<Expr>) {
    out.push(e.clone());
    for_each_child(e, |c| collect_subterms(c, out));
}

fn for_each_child(e: &Expr, mut f: impl FnMut(&Expr)) {
    match e.kind() {
        ExprKind::Const(_) | ExprKind::Var(_) | ExprKind::Zero | ExprKind::Nil(_) => {}
        ExprKind::Prim(_, a)
        | ExprKind::Proj(a, _)
        | ExprKind::Inl(_, _, a)
        | ExprKind::Inr(_, _, a)
        | ExprKind::Succ(a)
        | ExprKind::OpCall(_, a)
        | ExprKind::Loss(a)
        | ExprKind::Reset(a) => f(a),
        ExprKind::Lam(lam) => f(&lam.body),
        ExprKind::App(a, b) | ExprKind::Cons(a, b) => {
            f(a);
            f(b);
        }
        ExprKind::Tuple(es) => es.iter().for_each(f),
        ExprKind::Cases { scrut, left, right, .. } => {
            f(scrut);
            f(left);
            f(right);
        }
        ExprKind::Iter(a, b, c) | ExprKind::Fold(a, b, c) => {
            f(a);
            f(b);
            f(c);
        }
        ExprKind::Handle { handler, param, body } => {
            f(param);
            f(body);
            for (_, cl) in &handler.op_clauses {
                f(&cl.body);
            }
            f(&handler.return_clause.body);
        }
        ExprKind::Then { left, cont, .. } => {
            f(left);
            if let LossCont::Extend { body, .. } = cont {
                f(body);
            }
        }
        ExprKind::GLocal { body, cont, .. } => {
            f(body);
            if let LossCont::Extend { body: cb, .. } = cont {
                f(cb);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch running
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuzzStage {
    /// Determinism, progress, preservation, termination at the fuel bound.
    Machine,
    /// Per-step denotational soundness.
    StepSoundness,
    /// Evaluation soundness and giant-step adequacy.
    EvalAndGiant,
}

#[derive(Clone, Debug)]
pub struct FuzzFailure {
    pub seed: u64,
    pub stage: String,
    pub program: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub cases: usize,
    pub stuck_terminals: usize,
    pub failures: Vec<FuzzFailure>,
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub seed0: u64,
    pub count: usize,
    pub size: usize,
    pub params: ConformParams,
    pub stages: Vec<FuzzStage>,
    pub parallel: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed0: 0,
            count: 100,
            size: 25,
            params: ConformParams::default(),
            stages: vec![FuzzStage::Machine, FuzzStage::StepSoundness, FuzzStage::EvalAndGiant],
            parallel: cfg!(feature = "parallel"),
        }
    }
}

struct CaseOutcome {
    stuck: bool,
    failures: Vec<FuzzFailure>,
}

fn run_case(seed: u64, cfg: &FuzzConfig) -> CaseOutcome {
    let (e, ty, eff, globals) = gen_term(seed, cfg.size);
    let gamma = gen_gamma(seed, &ty, &eff);
    let mut failures = Vec::new();
    let mut stuck = false;

    let fail = |stage: &str, msg: String| FuzzFailure {
        seed,
        stage: stage.to_string(),
        program: crate::parser::render_program(&globals, &e, &ty, &eff),
        message: msg,
    };

    // Generated terms are well-typed by construction.
    if let Err(err) = check(&TypeEnv::empty(), &e, &ty, &eff, &globals) {
        failures.push(fail("welltyped", err.to_string()));
        return CaseOutcome { stuck, failures };
    }

    if cfg.stages.contains(&FuzzStage::Machine) {
        // Determinism and progress along the whole step sequence, with
        // preservation re-checked from scratch after every step.
        let mut cur = e.clone();
        let mut steps = 0u64;
        loop {
            let a = step(&gamma, &eff, &cur, &globals);
            let b = step(&gamma, &eff, &cur, &globals);
            match (a, b) {
                (Ok(None), Ok(None)) => {
                    let terminal = crate::syntax::is_terminal(&cur, &globals.signature);
                    if !terminal {
                        failures.push(fail("progress", "non-terminal made no step".into()));
                    }
                    if crate::syntax::is_stuck(&cur, &globals.signature) {
                        stuck = true;
                    }
                    break;
                }
                (Ok(Some(x)), Ok(Some(y))) => {
                    if x.loss != y.loss || x.next != y.next {
                        failures.push(fail("determinism", "two steps disagree".into()));
                        break;
                    }
                    if let Err(err) = check(&TypeEnv::empty(), &x.next, &ty, &eff, &globals) {
                        failures.push(fail("preservation", err.to_string()));
                        break;
                    }
                    cur = x.next;
                    steps += 1;
                    if steps >= cfg.params.fuel {
                        failures.push(fail("termination", "fuel exhausted".into()));
                        break;
                    }
                }
                (Ok(None), Ok(Some(_))) | (Ok(Some(_)), Ok(None)) => {
                    failures.push(fail("determinism", "two steps disagree".into()));
                    break;
                }
                (Err(err), _) | (_, Err(err)) => {
                    failures.push(fail("machine", err.to_string()));
                    break;
                }
            }
        }
        // The frame-stack evaluator agrees with iterated stepping.
        match big_eval(&gamma, &eff, &e, cfg.params.fuel, &globals) {
            Ok(res) => {
                if res.steps != steps && failures.is_empty() {
                    failures.push(fail(
                        "machine",
                        format!("machine took {} steps, stepping took {steps}", res.steps),
                    ));
                }
            }
            Err(err) => failures.push(fail("termination", err.to_string())),
        }
    }

    if cfg.stages.contains(&FuzzStage::StepSoundness) && failures.is_empty() {
        if let Err(m) = check_step_soundness(&e, &gamma, &eff, &cfg.params, &globals) {
            failures.push(fail("step", m.to_string()));
        }
    }

    if cfg.stages.contains(&FuzzStage::EvalAndGiant) && failures.is_empty() {
        if let Err(m) = check_eval_soundness(&e, &gamma, &eff, &cfg.params, &globals) {
            failures.push(fail("eval", m.to_string()));
        }
        if let Err(m) = check_giant_adequacy(&e, &gamma, &eff, &cfg.params, &globals) {
            failures.push(fail("giant", m.to_string()));
        }
    }

    CaseOutcome { stuck, failures }
}

fn merge(report: &mut FuzzReport, outcome: CaseOutcome) {
    report.cases += 1;
    if outcome.stuck {
        report.stuck_terminals += 1;
    }
    report.failures.extend(outcome.failures);
}

/// Run `count` generated cases through the configured stages. Cases are
/// independent; with the `parallel` feature they run on a work-stealing
/// pool, otherwise sequentially.
pub fn run_fuzz(cfg: &FuzzConfig) -> FuzzReport {
    let seeds: Vec<u64> = (0..cfg.count as u64).map(|i| cfg.seed0 + i).collect();
    let mut report = FuzzReport::default();

    #[cfg(feature = "parallel")]
    if cfg.parallel {
        use rayon::prelude::*;
        let outcomes: Vec<CaseOutcome> =
            seeds.par_iter().map(|s| run_case(*s, cfg)).collect();
        for o in outcomes {
            merge(&mut report, o);
        }
        return report;
    }

    for s in seeds {
        merge(&mut report, run_case(s, cfg));
    }
    report
}

/// Shrink a failing case for reporting.
pub fn shrink_failure(seed: u64, cfg: &FuzzConfig) -> Option<(Expr, String)> {
    let (e, ty, eff, globals) = gen_term(seed, cfg.size);
    let gamma = gen_gamma(seed, &ty, &eff);
    let fails = |cand: &Expr| {
        check_step_soundness(cand, &gamma, &eff, &cfg.params, &globals).is_err()
            || check_eval_soundness(cand, &gamma, &eff, &cfg.params, &globals).is_err()
    };
    if !fails(&e) {
        return None;
    }
    let small = shrink(&e, &ty, &eff, &globals, fails);
    let rendered = crate::parser::render_program(&globals, &small, &ty, &eff);
    Some((small, rendered))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(x: f64) -> LossVec {
        LossVec::scalar(x, 1)
    }

    #[test]
    fn tree_equal_tolerance_and_mismatch() {
        let g = gen_globals();
        let probes = ProbeSet::default();
        let a: WTree = Tree::Leaf((lv(2.0), SemValue::unit()));
        let b: WTree = Tree::Leaf((lv(2.0 + 1e-12), SemValue::unit()));
        assert!(tree_equal(&a, &b, &probes, 1e-9, &g).is_ok());
        let c: WTree = Tree::Leaf((lv(3.0), SemValue::unit()));
        let m = tree_equal(&a, &c, &probes, 1e-9, &g).unwrap_err();
        assert!(m.path.is_empty());
        // Tolerance-monotone: failing at 1e-9, passing at 2.
        assert!(tree_equal(&a, &c, &probes, 2.0, &g).is_ok());
    }

    #[test]
    fn generated_terms_are_well_typed() {
        for seed in 0..200 {
            let (e, ty, eff, globals) = gen_term(seed, 20);
            check(&TypeEnv::empty(), &e, &ty, &eff, &globals)
                .unwrap_or_else(|err| panic!("seed {seed}: {err}\n{e:?}"));
        }
    }

    #[test]
    fn small_fuzz_batch_is_clean() {
        let cfg = FuzzConfig {
            count: 60,
            size: 20,
            parallel: false,
            ..FuzzConfig::default()
        };
        let report = run_fuzz(&cfg);
        for f in &report.failures {
            eprintln!("seed {} [{}]: {}\n{}", f.seed, f.stage, f.message, f.program);
        }
        assert!(report.failures.is_empty());
        assert_eq!(report.cases, 60);
    }

    #[test]
    fn stuck_program_checks_pass() {
        let globals = gen_globals();
        let eff = Effect::singleton(EffectLabel::new("ndet"));
        // x <- decide(()); loss(1.0); x — an unhandled choice with a loss
        // after it.
        let e = Expr::app(
            Expr::lam(Lambda::new(
                eff.clone(),
                name("x"),
                TypeExpr::bool(),
                Expr::app(
                    Expr::lam(Lambda::new(
                        eff.clone(),
                        name("_u"),
                        TypeExpr::unit(),
                        Expr::var("x"),
                    )),
                    Expr::loss(Expr::lit_loss(lv(1.0))),
                ),
            )),
            Expr::op_call("decide", Expr::unit()),
        );
        let gamma = LossCont::zero(Effect::empty(), TypeExpr::bool());
        let params = ConformParams::default();
        check_step_soundness(&e, &gamma, &eff, &params, &globals).unwrap();
        check_eval_soundness(&e, &gamma, &eff, &params, &globals).unwrap();
        check_giant_adequacy(&e, &gamma, &eff, &params, &globals).unwrap();
    }

    #[test]
    fn overview_program_passes_all_checks() {
        let e = crate::eval::tests::overview_handled();
        let globals = crate::eval::tests::ndet_globals();
        let gamma = LossCont::zero(Effect::empty(), TypeExpr::char());
        let params = ConformParams::default();
        check_step_soundness(&e, &gamma, &Effect::empty(), &params, &globals).unwrap();
        check_eval_soundness(&e, &gamma, &Effect::empty(), &params, &globals).unwrap();
        check_giant_adequacy(&e, &gamma, &Effect::empty(), &params, &globals).unwrap();
    }
}
