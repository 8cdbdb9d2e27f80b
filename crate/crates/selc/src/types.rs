//! The type-and-effect judgment `Γ ⊢ e : σ ! ε`.
//!
//! Types are fully determined by annotations, so checking synthesizes the
//! type bottom-up together with an *effect requirement*: values place no
//! constraint on the ambient effect, operation calls and the sub-effecting
//! constructs demand a lower bound, and applications pin the ambient effect
//! exactly to the function annotation (there is no sub-effecting at `app`).

use std::fmt;

use crate::prims::prim_sig;
use crate::syntax::{
    Effect, EffectLabel, Expr, ExprKind, Globals, Handler, Lambda, Literal, LossCont, Name,
    Signature, TypeExpr, TypeNode,
};

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Typing environment. Lookup takes the innermost binding, which is the
/// variable-convention reading of "no variable bound twice".
#[derive(Clone, Debug, Default)]
pub struct TypeEnv {
    bindings: Vec<(Name, TypeExpr)>,
}

impl TypeEnv {
    pub fn empty() -> Self {
        TypeEnv::default()
    }

    pub fn bind(&self, x: Name, ty: TypeExpr) -> TypeEnv {
        let mut out = self.clone();
        out.bindings.push((x, ty));
        out
    }

    pub fn lookup(&self, x: &str) -> Option<&TypeExpr> {
        self.bindings.iter().rev().find(|(n, _)| &**n == x).map(|(_, t)| t)
    }
}

// ---------------------------------------------------------------------------
// Errors and effect requirements
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, thiserror::Error, PartialEq)]
#[error("{rule}: expected {expected}, found {found}")]
pub struct TypeError {
    /// The violated typing rule (or "prim" for table lookups).
    pub rule: &'static str,
    pub expected: String,
    pub found: String,
    pub position: Option<(usize, usize)>,
}

impl TypeError {
    pub fn new(rule: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> Self {
        TypeError {
            rule,
            expected: expected.to_string(),
            found: found.to_string(),
            position: None,
        }
    }

    pub fn at(mut self, position: Option<(usize, usize)>) -> Self {
        if self.position.is_none() {
            self.position = position;
        }
        self
    }
}

/// The constraint an expression places on the ambient effect.
#[derive(Clone, Debug, PartialEq)]
pub enum EffReq {
    /// Any effect containing this lower bound will do (values, op calls,
    /// `then`/`local` sub-effecting).
    AtLeast(Effect),
    /// The ambient effect is pinned, by a function annotation or a handler.
    Exact(Effect),
}

impl EffReq {
    pub fn any() -> Self {
        EffReq::AtLeast(Effect::empty())
    }

    pub fn satisfied_by(&self, eff: &Effect) -> bool {
        match self {
            EffReq::AtLeast(lo) => lo.sub(eff),
            EffReq::Exact(e) => e == eff,
        }
    }

    pub fn join(self, other: EffReq, rule: &'static str) -> Result<EffReq, TypeError> {
        match (self, other) {
            (EffReq::AtLeast(a), EffReq::AtLeast(b)) => {
                Ok(EffReq::AtLeast(a.pointwise_max(&b)))
            }
            (EffReq::Exact(e), EffReq::AtLeast(lo)) | (EffReq::AtLeast(lo), EffReq::Exact(e)) => {
                if lo.sub(&e) {
                    Ok(EffReq::Exact(e))
                } else {
                    Err(TypeError::new(rule, format!("effect at least {lo}"), format!("{e}")))
                }
            }
            (EffReq::Exact(a), EffReq::Exact(b)) => {
                if a == b {
                    Ok(EffReq::Exact(a))
                } else {
                    Err(TypeError::new(rule, format!("effect {a}"), format!("{b}")))
                }
            }
        }
    }

    /// The smallest effect satisfying the requirement, used to pick the
    /// ambient effect a closed program runs at.
    pub fn minimal(&self) -> Effect {
        match self {
            EffReq::AtLeast(lo) => lo.clone(),
            EffReq::Exact(e) => e.clone(),
        }
    }
}

/// `Γ ⊢ h : par, σ ! εℓ ⇒ σ' ! ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct HandlerType {
    pub label: EffectLabel,
    pub param_ty: TypeExpr,
    pub body_ty: TypeExpr,
    pub body_eff: Effect,
    pub result_ty: TypeExpr,
    pub result_eff: Effect,
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

fn literal_ty(lit: &Literal, globals: &Globals) -> Result<TypeExpr, TypeError> {
    match lit {
        Literal::Loss(v) => {
            if v.dim() != globals.loss_dim {
                return Err(TypeError::new(
                    "const",
                    format!("loss vector of dimension {}", globals.loss_dim),
                    format!("dimension {}", v.dim()),
                ));
            }
            Ok(TypeExpr::loss())
        }
        Literal::Char(_) => Ok(TypeExpr::char()),
        Literal::Str(_) => Ok(TypeExpr::str()),
    }
}

fn expect_ty(
    rule: &'static str,
    expected: &TypeExpr,
    found: &TypeExpr,
) -> Result<(), TypeError> {
    if expected == found {
        Ok(())
    } else {
        Err(TypeError::new(rule, expected, found))
    }
}

/// Infer the type of `e` and the constraint it places on the ambient effect.
pub fn infer(env: &TypeEnv, e: &Expr, globals: &Globals) -> Result<(TypeExpr, EffReq), TypeError> {
    let sig = &globals.signature;
    match e.kind() {
        ExprKind::Const(lit) => Ok((literal_ty(lit, globals)?, EffReq::any())),
        ExprKind::Var(x) => match env.lookup(x) {
            Some(t) => Ok((t.clone(), EffReq::any())),
            None => Err(TypeError::new("var", "a bound variable", x)),
        },
        ExprKind::Prim(f, a) => {
            let (arg_ty, res_ty) = prim_sig(f)
                .ok_or_else(|| TypeError::new("prim", "a primitive function", f))?;
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("prim", &arg_ty, &ta)?;
            Ok((res_ty, req))
        }
        ExprKind::Lam(lam) => {
            let res = check_lambda(env, lam, globals)?;
            Ok((lam.fn_ty(res), EffReq::any()))
        }
        ExprKind::App(f, a) => {
            let (tf, req_f) = infer(env, f, globals)?;
            let (arg_ty, res_ty, eff) = match tf.node() {
                TypeNode::Fn(a, r, e) => (a.clone(), r.clone(), e.clone()),
                _ => return Err(TypeError::new("app", "a function type", &tf)),
            };
            let (ta, req_a) = infer(env, a, globals)?;
            expect_ty("app", &arg_ty, &ta)?;
            // No sub-effecting at application: the ambient effect must equal
            // the function annotation.
            let req = req_f.join(req_a, "app")?.join(EffReq::Exact(eff), "app")?;
            Ok((res_ty, req))
        }
        ExprKind::Tuple(es) => {
            let mut tys = Vec::with_capacity(es.len());
            let mut req = EffReq::any();
            for item in es {
                let (t, r) = infer(env, item, globals)?;
                tys.push(t);
                req = req.join(r, "prd")?;
            }
            Ok((TypeExpr::product(tys), req))
        }
        ExprKind::Proj(a, i) => {
            let (ta, req) = infer(env, a, globals)?;
            match ta.node() {
                TypeNode::Product(ts) if *i >= 1 && *i <= ts.len() => {
                    Ok((ts[*i - 1].clone(), req))
                }
                _ => Err(TypeError::new(
                    "prj",
                    format!("a product with at least {i} components"),
                    &ta,
                )),
            }
        }
        ExprKind::Inl(l, r, a) => {
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("inl", l, &ta)?;
            Ok((TypeExpr::sum(l.clone(), r.clone()), req))
        }
        ExprKind::Inr(l, r, a) => {
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("inr", r, &ta)?;
            Ok((TypeExpr::sum(l.clone(), r.clone()), req))
        }
        ExprKind::Cases { scrut, left_var, left_ty, left, right_var, right_ty, right } => {
            let (ts, req_s) = infer(env, scrut, globals)?;
            match ts.node() {
                TypeNode::Sum(l, r) => {
                    expect_ty("cases", l, left_ty)?;
                    expect_ty("cases", r, right_ty)?;
                }
                _ => return Err(TypeError::new("cases", "a sum type", &ts)),
            }
            let (tl, req_l) = infer(&env.bind(left_var.clone(), left_ty.clone()), left, globals)?;
            let (tr, req_r) =
                infer(&env.bind(right_var.clone(), right_ty.clone()), right, globals)?;
            expect_ty("cases", &tl, &tr)?;
            let req = req_s.join(req_l, "cases")?.join(req_r, "cases")?;
            Ok((tl, req))
        }
        ExprKind::Zero => Ok((TypeExpr::nat(), EffReq::any())),
        ExprKind::Succ(a) => {
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("succ", &TypeExpr::nat(), &ta)?;
            Ok((TypeExpr::nat(), req))
        }
        ExprKind::Iter(n, z, s) => {
            let (tn, req_n) = infer(env, n, globals)?;
            expect_ty("iter", &TypeExpr::nat(), &tn)?;
            let (tz, req_z) = infer(env, z, globals)?;
            let (ts, req_s) = infer(env, s, globals)?;
            let eff = match ts.node() {
                TypeNode::Fn(a, r, eff) if a == &tz && r == &tz => eff.clone(),
                _ => {
                    return Err(TypeError::new(
                        "iter",
                        format!("({tz} -> {tz} ! _)"),
                        &ts,
                    ))
                }
            };
            let req = req_n
                .join(req_z, "iter")?
                .join(req_s, "iter")?
                .join(EffReq::Exact(eff), "iter")?;
            Ok((tz, req))
        }
        ExprKind::Nil(t) => Ok((TypeExpr::list(t.clone()), EffReq::any())),
        ExprKind::Cons(h, t) => {
            let (th, req_h) = infer(env, h, globals)?;
            let (tt, req_t) = infer(env, t, globals)?;
            expect_ty("cons", &TypeExpr::list(th.clone()), &tt)?;
            Ok((tt, req_h.join(req_t, "cons")?))
        }
        ExprKind::Fold(l, z, c) => {
            let (tl, req_l) = infer(env, l, globals)?;
            let elem = match tl.node() {
                TypeNode::List(t) => t.clone(),
                _ => return Err(TypeError::new("fold", "a list type", &tl)),
            };
            let (tz, req_z) = infer(env, z, globals)?;
            let (tc, req_c) = infer(env, c, globals)?;
            let expected = TypeExpr::product(vec![elem, tz.clone()]);
            let eff = match tc.node() {
                TypeNode::Fn(a, r, eff) if a == &expected && r == &tz => eff.clone(),
                _ => {
                    return Err(TypeError::new(
                        "fold",
                        format!("({expected} -> {tz} ! _)"),
                        &tc,
                    ))
                }
            };
            let req = req_l
                .join(req_z, "fold")?
                .join(req_c, "fold")?
                .join(EffReq::Exact(eff), "fold")?;
            Ok((tz, req))
        }
        ExprKind::OpCall(op, a) => {
            let op_sig = sig
                .lookup_op(op)
                .ok_or_else(|| TypeError::new("op", "a declared operation", op))?;
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("op", &op_sig.out_ty, &ta)?;
            // The ambient effect must include the operation's label.
            let req = req.join(
                EffReq::AtLeast(Effect::singleton(op_sig.label.clone())),
                "op",
            )?;
            Ok((op_sig.in_ty.clone(), req))
        }
        ExprKind::Loss(a) => {
            let (ta, req) = infer(env, a, globals)?;
            expect_ty("loss", &TypeExpr::loss(), &ta)?;
            Ok((TypeExpr::unit(), req))
        }
        ExprKind::Handle { handler, param, body } => {
            let ht = check_handler(env, handler, globals)?;
            let (tp, req_p) = infer(env, param, globals)?;
            expect_ty("handle", &ht.param_ty, &tp)?;
            let (tb, req_b) = infer(env, body, globals)?;
            expect_ty("handle", &ht.body_ty, &tb)?;
            if !req_b.satisfied_by(&ht.body_eff) {
                return Err(TypeError::new(
                    "handle",
                    format!("body checking at {}", ht.body_eff),
                    format!("{req_b:?}"),
                ));
            }
            let req = req_p.join(EffReq::Exact(ht.result_eff.clone()), "handle")?;
            Ok((ht.result_ty, req))
        }
        ExprKind::Then { eff, left, cont } => {
            // Both stored effects must agree; the continuation may use fewer
            // effects than the expression it observes.
            if eff != cont.eff() {
                return Err(TypeError::new("then", format!("effect {}", cont.eff()), eff));
            }
            let (tl, req_l) = infer(env, left, globals)?;
            expect_ty("then", cont.var_ty(), &tl)?;
            check_losscont(env, cont, globals)?;
            let req = req_l.join(EffReq::AtLeast(eff.clone()), "then")?;
            Ok((TypeExpr::loss(), req))
        }
        ExprKind::GLocal { eff, body, cont } => {
            let (tb, req_b) = infer(env, body, globals)?;
            if !req_b.satisfied_by(eff) {
                return Err(TypeError::new(
                    "glocal",
                    format!("body checking at {eff}"),
                    format!("{req_b:?}"),
                ));
            }
            expect_ty("glocal", &tb, cont.var_ty())?;
            if !cont.eff().sub(eff) {
                return Err(TypeError::new(
                    "glocal",
                    format!("continuation effect within {eff}"),
                    cont.eff(),
                ));
            }
            check_losscont(env, cont, globals)?;
            // Effect conversion: the whole expression may sit at any ambient
            // effect containing the body's.
            Ok((tb, EffReq::AtLeast(eff.clone())))
        }
        ExprKind::Reset(a) => infer(env, a, globals),
    }
}

/// Check a lambda body against its annotation; returns the body type.
fn check_lambda(env: &TypeEnv, lam: &Lambda, globals: &Globals) -> Result<TypeExpr, TypeError> {
    let inner = env.bind(lam.var.clone(), lam.var_ty.clone());
    let (ty, req) = infer(&inner, &lam.body, globals)?;
    if !req.satisfied_by(&lam.eff) {
        return Err(TypeError::new(
            "abs",
            format!("body checking at annotation {}", lam.eff),
            format!("{req:?}"),
        ));
    }
    Ok(ty)
}

fn check_losscont(env: &TypeEnv, cont: &LossCont, globals: &Globals) -> Result<(), TypeError> {
    match cont {
        LossCont::Zero { .. } => Ok(()),
        LossCont::Extend { eff, var, var_ty, body, rest } => {
            let inner = env.bind(var.clone(), var_ty.clone());
            let (tb, req) = infer(&inner, body, globals)?;
            expect_ty("then", rest.var_ty(), &tb)?;
            if !rest.eff().sub(eff) {
                return Err(TypeError::new(
                    "then",
                    format!("continuation effect within {eff}"),
                    rest.eff(),
                ));
            }
            if !req.satisfied_by(eff) {
                return Err(TypeError::new(
                    "then",
                    format!("body checking at {eff}"),
                    format!("{req:?}"),
                ));
            }
            check_losscont(env, rest, globals)
        }
    }
}

/// Validate `Γ ⊢ e : σ ! ε` for a specific effect.
pub fn check(
    env: &TypeEnv,
    e: &Expr,
    ty: &TypeExpr,
    eff: &Effect,
    globals: &Globals,
) -> Result<(), TypeError> {
    let (t, req) = infer(env, e, globals)?;
    expect_ty("check", ty, &t)?;
    if !req.satisfied_by(eff) {
        return Err(TypeError::new(
            "check",
            format!("an expression valid at {eff}"),
            format!("{req:?}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Handler typing
// ---------------------------------------------------------------------------

pub fn check_handler(
    env: &TypeEnv,
    h: &Handler,
    globals: &Globals,
) -> Result<HandlerType, TypeError> {
    let sig = &globals.signature;
    let ops = sig
        .ops_of(&h.label)
        .ok_or_else(|| TypeError::new("handler", "a declared effect label", h.label.as_str()))?;

    // The clause list must enumerate Op(ℓ) exactly.
    for op in ops {
        if h.clause(&op.name).is_none() {
            return Err(TypeError::new(
                "MissingClause",
                format!("a clause for `{}`", op.name),
                "no clause",
            ));
        }
    }
    for (n, _) in &h.op_clauses {
        if !ops.iter().any(|o| &o.name == n) {
            return Err(TypeError::new(
                "ExtraClause",
                format!("only operations of `{}`", h.label.as_str()),
                n,
            ));
        }
    }
    if h.op_clauses.len() != ops.len() {
        return Err(TypeError::new(
            "ExtraClause",
            format!("{} clauses", ops.len()),
            format!("{} clauses", h.op_clauses.len()),
        ));
    }

    let eff = &h.result_eff;

    // Return clause: λ^ε z:(par, σ). e with body typing σ' ! ε.
    let ret = &h.return_clause;
    if &ret.eff != eff {
        return Err(TypeError::new("ClauseType", format!("effect {eff}"), &ret.eff));
    }
    let body_ty = match ret.var_ty.node() {
        TypeNode::Product(ts) if ts.len() == 2 && ts[0] == h.param_ty => ts[1].clone(),
        _ => {
            return Err(TypeError::new(
                "ClauseType",
                format!("return binder of type ({}, _)", h.param_ty),
                &ret.var_ty,
            ))
        }
    };
    let result_ty = check_lambda(env, ret, globals)
        .map_err(|e| TypeError::new("ClauseType", e.expected, e.found))?;

    // Operation clauses: λ^ε z:(par, out, (par,in)→loss!ε, (par,in)→σ'!ε). e.
    for op in ops {
        let clause = h.clause(&op.name).expect("checked above");
        if &clause.eff != eff {
            return Err(TypeError::new("ClauseType", format!("effect {eff}"), &clause.eff));
        }
        let pair_in = TypeExpr::product(vec![h.param_ty.clone(), op.in_ty.clone()]);
        let expected_binder = TypeExpr::product(vec![
            h.param_ty.clone(),
            op.out_ty.clone(),
            TypeExpr::func(pair_in.clone(), TypeExpr::loss(), eff.clone()),
            TypeExpr::func(pair_in, result_ty.clone(), eff.clone()),
        ]);
        if clause.var_ty != expected_binder {
            return Err(TypeError::new("ClauseType", &expected_binder, &clause.var_ty));
        }
        let clause_res = check_lambda(env, clause, globals)
            .map_err(|e| TypeError::new("ClauseType", e.expected, e.found))?;
        expect_ty("ClauseType", &result_ty, &clause_res)?;
    }

    Ok(HandlerType {
        label: h.label.clone(),
        param_ty: h.param_ty.clone(),
        body_ty,
        body_eff: eff.plus_label(&h.label),
        result_ty,
        result_eff: eff.clone(),
    })
}

// ---------------------------------------------------------------------------
// Type synthesis for the evaluator
// ---------------------------------------------------------------------------

/// Annotation-driven type synthesis without constraint checking, used by the
/// machine on terms that already passed `check`. Types of closed subterms
/// are cached on the nodes.
pub fn synth_ty(env: &TypeEnv, e: &Expr, globals: &Globals) -> Option<TypeExpr> {
    if e.is_closed() {
        if let Some(t) = e.cached_ty() {
            return Some(t.clone());
        }
    }
    let ty = synth_ty_uncached(env, e, globals)?;
    if e.is_closed() {
        e.cache_ty(ty.clone());
    }
    Some(ty)
}

fn synth_ty_uncached(env: &TypeEnv, e: &Expr, globals: &Globals) -> Option<TypeExpr> {
    match e.kind() {
        ExprKind::Const(lit) => match lit {
            Literal::Loss(_) => Some(TypeExpr::loss()),
            Literal::Char(_) => Some(TypeExpr::char()),
            Literal::Str(_) => Some(TypeExpr::str()),
        },
        ExprKind::Var(x) => env.lookup(x).cloned(),
        ExprKind::Prim(f, _) => prim_sig(f).map(|(_, r)| r),
        ExprKind::Lam(lam) => {
            let body = synth_ty(&env.bind(lam.var.clone(), lam.var_ty.clone()), &lam.body, globals)?;
            Some(lam.fn_ty(body))
        }
        ExprKind::App(f, _) => match synth_ty(env, f, globals)?.node() {
            TypeNode::Fn(_, r, _) => Some(r.clone()),
            _ => None,
        },
        ExprKind::Tuple(es) => {
            let tys = es
                .iter()
                .map(|e| synth_ty(env, e, globals))
                .collect::<Option<Vec<_>>>()?;
            Some(TypeExpr::product(tys))
        }
        ExprKind::Proj(a, i) => match synth_ty(env, a, globals)?.node() {
            TypeNode::Product(ts) if *i >= 1 && *i <= ts.len() => Some(ts[*i - 1].clone()),
            _ => None,
        },
        ExprKind::Inl(l, r, _) | ExprKind::Inr(l, r, _) => {
            Some(TypeExpr::sum(l.clone(), r.clone()))
        }
        ExprKind::Cases { left_var, left_ty, left, .. } => {
            synth_ty(&env.bind(left_var.clone(), left_ty.clone()), left, globals)
        }
        ExprKind::Zero | ExprKind::Succ(_) => Some(TypeExpr::nat()),
        ExprKind::Iter(_, z, _) => synth_ty(env, z, globals),
        ExprKind::Nil(t) => Some(TypeExpr::list(t.clone())),
        ExprKind::Cons(h, _) => Some(TypeExpr::list(synth_ty(env, h, globals)?)),
        ExprKind::Fold(_, z, _) => synth_ty(env, z, globals),
        ExprKind::OpCall(op, _) => globals.signature.lookup_op(op).map(|o| o.in_ty.clone()),
        ExprKind::Loss(_) => Some(TypeExpr::unit()),
        ExprKind::Handle { handler, .. } => {
            let ret = &handler.return_clause;
            synth_ty(&env.bind(ret.var.clone(), ret.var_ty.clone()), &ret.body, globals)
        }
        ExprKind::Then { .. } => Some(TypeExpr::loss()),
        ExprKind::GLocal { body, .. } => synth_ty(env, body, globals),
        ExprKind::Reset(a) => synth_ty(env, a, globals),
    }
}

// ---------------------------------------------------------------------------
// Well-foundedness
// ---------------------------------------------------------------------------

/// An ordering `ℓ1, …, ℓn` such that every operation of `ℓj` mentions only
/// labels `ℓi` with `i < j` in its in/out types.
#[derive(Clone, Debug, PartialEq)]
pub struct WfOrdering {
    pub order: Vec<EffectLabel>,
}

impl WfOrdering {
    /// 1-based position of a label in the ordering.
    pub fn index(&self, l: &EffectLabel) -> Option<usize> {
        self.order.iter().position(|x| x == l).map(|i| i + 1)
    }
}

/// A dependency cycle among effect labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleWitness(pub Vec<EffectLabel>);

impl fmt::Display for CycleWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|l| l.as_str()).collect();
        write!(f, "{}", names.join(" -> "))
    }
}

/// Find an ordering witnessing well-foundedness, or a dependency cycle.
pub fn check_wellfounded(sig: &Signature) -> Result<WfOrdering, CycleWitness> {
    let labels: Vec<EffectLabel> = sig.labels().cloned().collect();
    // deps[j] = labels that must come strictly before label j.
    let mut deps: Vec<Vec<EffectLabel>> = Vec::with_capacity(labels.len());
    for l in &labels {
        let mut mentioned = Vec::new();
        for op in sig.ops_of(l).unwrap_or(&[]) {
            op.out_ty.effect_labels(&mut mentioned);
            op.in_ty.effect_labels(&mut mentioned);
        }
        mentioned.retain(|m| sig.has_label(m));
        mentioned.sort();
        mentioned.dedup();
        deps.push(mentioned);
    }

    let mut order = Vec::new();
    let mut placed = vec![false; labels.len()];
    loop {
        let mut progressed = false;
        for (i, l) in labels.iter().enumerate() {
            if placed[i] {
                continue;
            }
            // A self-dependency can never be satisfied.
            if deps[i].contains(l) {
                continue;
            }
            let ready = deps[i].iter().all(|d| {
                labels.iter().position(|x| x == d).map(|j| placed[j]).unwrap_or(true)
            });
            if ready {
                order.push(l.clone());
                placed[i] = true;
                progressed = true;
            }
        }
        if order.len() == labels.len() {
            return Ok(WfOrdering { order });
        }
        if !progressed {
            break;
        }
    }

    // Walk the unplaced dependency graph until a node repeats.
    let start = labels
        .iter()
        .enumerate()
        .find(|(i, _)| !placed[*i])
        .map(|(_, l)| l.clone())
        .expect("some label is unplaced");
    let mut path = vec![start.clone()];
    let mut cur = start;
    loop {
        let i = labels.iter().position(|x| x == &cur).unwrap();
        let next = deps[i]
            .iter()
            .find(|d| {
                labels
                    .iter()
                    .position(|x| x == *d)
                    .map(|j| !placed[j])
                    .unwrap_or(false)
            })
            .expect("unplaced label has an unplaced dependency")
            .clone();
        if let Some(pos) = path.iter().position(|x| x == &next) {
            return Err(CycleWitness(path[pos..].to_vec()));
        }
        path.push(next.clone());
        cur = next;
    }
}

/// `l(ε)`: the maximal ordering index among the labels of `ε` (0 if empty).
pub fn effect_level(eff: &Effect, ord: &WfOrdering) -> usize {
    eff.labels().filter_map(|l| ord.index(l)).max().unwrap_or(0)
}

/// `l(σ)`: the maximal ordering index among the labels appearing in `σ`.
pub fn type_level(ty: &TypeExpr, ord: &WfOrdering) -> usize {
    let mut labels = Vec::new();
    ty.effect_labels(&mut labels);
    labels.iter().filter_map(|l| ord.index(l)).max().unwrap_or(0)
}

/// `|σ|` with `|σ → τ ! ε| = 1 + |σ| + |τ| + |ε|`, base types sized 1.
pub fn type_size(ty: &TypeExpr) -> usize {
    match ty.node() {
        TypeNode::Base(_) | TypeNode::Nat => 1,
        TypeNode::Product(ts) => 1 + ts.iter().map(type_size).sum::<usize>(),
        TypeNode::Sum(l, r) => 1 + type_size(l) + type_size(r),
        TypeNode::List(t) => 1 + type_size(t),
        TypeNode::Fn(a, r, e) => 1 + type_size(a) + type_size(r) + e.total() as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::{name, Expr, Lambda, LossVec, OpSig};

    fn ndet_globals() -> Globals {
        let mut sig = Signature::new();
        sig.declare(
            EffectLabel::new("ndet"),
            vec![OpSig {
                name: name("decide"),
                out_ty: TypeExpr::unit(),
                in_ty: TypeExpr::bool(),
                label: EffectLabel::new("ndet"),
            }],
        )
        .unwrap();
        Globals::new(sig, 1)
    }

    fn lv(x: f64) -> Expr {
        Expr::lit_loss(LossVec::scalar(x, 1))
    }

    #[test]
    fn loss_checks_at_any_effect() {
        let g = ndet_globals();
        let e = Expr::loss(lv(2.0));
        let (ty, req) = infer(&TypeEnv::empty(), &e, &g).unwrap();
        assert!(ty.is_unit());
        assert!(req.satisfied_by(&Effect::empty()));
        assert!(req.satisfied_by(&Effect::singleton(EffectLabel::new("ndet"))));
    }

    #[test]
    fn op_calls_demand_their_label() {
        let g = ndet_globals();
        let e = Expr::op_call("decide", Expr::unit());
        let (ty, req) = infer(&TypeEnv::empty(), &e, &g).unwrap();
        assert!(ty.is_bool());
        assert!(!req.satisfied_by(&Effect::empty()));
        assert!(req.satisfied_by(&Effect::singleton(EffectLabel::new("ndet"))));
    }

    #[test]
    fn application_argument_mismatch_names_the_rule() {
        let g = ndet_globals();
        let id = Expr::lam(Lambda::new(
            Effect::empty(),
            name("x"),
            TypeExpr::loss(),
            Expr::var("x"),
        ));
        let err = infer(&TypeEnv::empty(), &Expr::app(id, Expr::bool(true)), &g).unwrap_err();
        assert_eq!(err.rule, "app");
    }

    #[test]
    fn application_has_no_sub_effecting() {
        let g = ndet_globals();
        // A function annotated {} applied in an ambient {ndet} pins the
        // ambient to {} exactly, so the requirement rejects {ndet}.
        let id = Expr::lam(Lambda::new(
            Effect::empty(),
            name("x"),
            TypeExpr::loss(),
            Expr::var("x"),
        ));
        let (_, req) = infer(&TypeEnv::empty(), &Expr::app(id, lv(1.0)), &g).unwrap();
        assert!(req.satisfied_by(&Effect::empty()));
        assert!(!req.satisfied_by(&Effect::singleton(EffectLabel::new("ndet"))));
    }

    #[test]
    fn handler_typing_matches_the_minimising_handler() {
        let g = crate::eval::tests::ndet_globals();
        let h = crate::eval::tests::hmin();
        let ht = check_handler(&TypeEnv::empty(), &h, &g).unwrap();
        assert_eq!(ht.param_ty, TypeExpr::unit());
        assert_eq!(ht.body_ty, TypeExpr::char());
        assert_eq!(ht.result_ty, TypeExpr::char());
        assert!(ht.result_eff.is_empty());
        assert_eq!(ht.body_eff, Effect::singleton(EffectLabel::new("ndet")));
    }

    #[test]
    fn handlers_must_enumerate_their_label() {
        let g = ndet_globals();
        let h = crate::eval::tests::hmin();
        let mut missing = (*h).clone();
        missing.op_clauses.clear();
        let err = check_handler(&TypeEnv::empty(), &missing, &g).unwrap_err();
        assert_eq!(err.rule, "MissingClause");

        let mut wrong_ret = (*h).clone();
        wrong_ret.return_clause = Lambda::new(
            Effect::empty(),
            name("_c"),
            TypeExpr::product(vec![TypeExpr::unit(), TypeExpr::char()]),
            lv(0.0), // loss, not char
        );
        let err = check_handler(&TypeEnv::empty(), &wrong_ret, &g).unwrap_err();
        assert_eq!(err.rule, "ClauseType");
    }

    #[test]
    fn wellfoundedness_orders_and_rejects() {
        // A single independent label orders trivially.
        let g = ndet_globals();
        let ord = check_wellfounded(&g.signature).unwrap();
        assert_eq!(ord.order, vec![EffectLabel::new("ndet")]);

        // The self-referential operation type is a one-label cycle.
        let mut sig = Signature::new();
        let cow = EffectLabel::new("cow");
        sig.declare(
            cow.clone(),
            vec![OpSig {
                name: name("moo"),
                out_ty: TypeExpr::unit(),
                in_ty: TypeExpr::func(
                    TypeExpr::unit(),
                    TypeExpr::unit(),
                    Effect::singleton(cow.clone()),
                ),
                label: cow.clone(),
            }],
        )
        .unwrap();
        let cycle = check_wellfounded(&sig).unwrap_err();
        assert_eq!(cycle.0, vec![cow]);

        // One label mentioning another orders the mentioned one first.
        let mut sig = Signature::new();
        let l1 = EffectLabel::new("l1");
        let l2 = EffectLabel::new("l2");
        sig.declare(
            l2.clone(),
            vec![OpSig {
                name: name("opA"),
                out_ty: TypeExpr::unit(),
                in_ty: TypeExpr::func(
                    TypeExpr::unit(),
                    TypeExpr::unit(),
                    Effect::singleton(l1.clone()),
                ),
                label: l2.clone(),
            }],
        )
        .unwrap();
        sig.declare(
            l1.clone(),
            vec![OpSig {
                name: name("opB"),
                out_ty: TypeExpr::unit(),
                in_ty: TypeExpr::unit(),
                label: l1.clone(),
            }],
        )
        .unwrap();
        let ord = check_wellfounded(&sig).unwrap();
        assert_eq!(ord.order, vec![l1, l2]);
    }

    #[test]
    fn levels_and_sizes() {
        let l1 = EffectLabel::new("l1");
        let l2 = EffectLabel::new("l2");
        let ord = WfOrdering { order: vec![l1.clone(), l2.clone()] };
        assert_eq!(effect_level(&Effect::empty(), &ord), 0);
        assert_eq!(effect_level(&Effect::singleton(l1.clone()), &ord), 1);
        assert_eq!(type_size(&TypeExpr::loss()), 1);
        // ()→()!{l2} has level 2 and size 1+1+1+1.
        let f = TypeExpr::func(TypeExpr::unit(), TypeExpr::unit(), Effect::singleton(l2));
        assert_eq!(type_level(&f, &ord), 2);
        assert_eq!(type_size(&f), 4);
        let _ = l1;
    }

    #[test]
    fn adding_a_label_free_op_preserves_orderings() {
        let mut sig = crate::conform::gen_signature();
        let ord1 = check_wellfounded(&sig).unwrap();
        sig.declare(
            EffectLabel::new("extra"),
            vec![OpSig {
                name: name("noop"),
                out_ty: TypeExpr::unit(),
                in_ty: TypeExpr::unit(),
                label: EffectLabel::new("extra"),
            }],
        )
        .unwrap();
        let ord2 = check_wellfounded(&sig).unwrap();
        for l in &ord1.order {
            assert!(ord2.order.contains(l));
        }
    }
}
