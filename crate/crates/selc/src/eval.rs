//! The loss-continuation operational semantics: the single-step judgment
//! `γ ⊢_ε e →^r e'`, big-step evaluation, giant-step evaluation to effect
//! values, and a diagnostic trace.
//!
//! [`step`] is a literal transcription of the reduction rules. [`big_eval`]
//! runs the same rules on a frame-stack machine so that one step costs O(1)
//! amortized instead of a descent from the root; a property test pins the
//! machine's trace to iterated [`step`].
//!
//! Trace rule names: `R1` primitive reductions, `R2` the datatype
//! eliminators (projection, cases, iter, fold), `R3` beta, `R4` loss,
//! `R5`/`R6` handler operation/return, `R7`–`R9` then/local/reset on values,
//! `F` for steps inside a regular frame and `S1`–`S4` inside special frames.

use std::sync::Arc;

use crate::prims::prim_eval;
use crate::syntax::{
    analyze, name, subst, ContContext, Effect, Expr, ExprForm, ExprKind, Frame, Globals, Handler,
    LossCont, LossVec, Name, RedexTag, RegFrame, SpecFrame, TypeExpr,
};
use crate::types::{synth_ty, TypeEnv};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ill-formed expression: {0}")]
    IllFormed(String),
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
}

/// One transition: the produced loss and the successor expression.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: LossVec,
    pub next: Expr,
}

/// Terminal expressions: values and unhandled operation calls.
#[derive(Clone, Debug)]
pub enum Terminal {
    Val(Expr),
    StuckOp(ContContext, Name, Expr),
}

impl Terminal {
    pub fn as_value(&self) -> Option<&Expr> {
        match self {
            Terminal::Val(v) => Some(v),
            Terminal::StuckOp(..) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BigEvalResult {
    pub loss: LossVec,
    pub terminal: Terminal,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub rule: &'static str,
    pub loss: LossVec,
    pub expr: Expr,
}

fn ill(msg: impl Into<String>) -> EvalError {
    EvalError::IllFormed(msg.into())
}

fn hole_ty(e: &Expr, globals: &Globals) -> Result<TypeExpr, EvalError> {
    synth_ty(&TypeEnv::empty(), e, globals)
        .ok_or_else(|| ill("cannot synthesize the type of a frame hole"))
}

// The fixed binder names for machine-built abstractions. Frames never bind
// into their hole, so a fixed name cannot capture.
fn frame_var() -> Name {
    name("_x")
}

fn pair_var() -> Name {
    name("_z")
}

/// Extend a loss continuation with a regular frame, rule (F):
/// `λ^ε x:τ. F[x] ▷ γ`.
fn extend_reg(
    gamma: &LossCont,
    eff: &Effect,
    frame: &RegFrame,
    inner: &Expr,
    globals: &Globals,
) -> Result<LossCont, EvalError> {
    let var = frame_var();
    let ty = hole_ty(inner, globals)?;
    Ok(LossCont::Extend {
        eff: eff.clone(),
        var: var.clone(),
        var_ty: ty,
        body: frame.plug(Expr::var_named(var)),
        rest: Arc::new(gamma.clone()),
    })
}

/// Extend a loss continuation through a handle body, rule (S1):
/// `λ^ε x:σ. v_r(v, x) ▷ γ`.
fn extend_handle(
    gamma: &LossCont,
    eff: &Effect,
    handler: &Handler,
    param: &Expr,
) -> Result<LossCont, EvalError> {
    let var = frame_var();
    let body_ty = handler.body_ty().ok_or_else(|| ill("handler return clause binder"))?;
    let call = Expr::app(
        handler.return_clause.to_expr(),
        Expr::tuple(vec![param.clone(), Expr::var_named(var.clone())]),
    );
    Ok(LossCont::Extend {
        eff: eff.clone(),
        var,
        var_ty: body_ty,
        body: call,
        rest: Arc::new(gamma.clone()),
    })
}

/// Build the handler clause call of rule (R5):
/// `v_o(v1, v2, f_l, f_k)` with
/// `f_k = λ^ε (p,y). local^ε(handle h ⟨p⟩ K[y], γ)` and
/// `f_l = λ^ε (p,y). handle h ⟨p⟩ K[y] ▷ γ`.
fn build_handler_call(
    handler: &Arc<Handler>,
    param: &Expr,
    k_ctx: &ContContext,
    op: &Name,
    op_arg: &Expr,
    gamma: &LossCont,
    globals: &Globals,
) -> Result<Expr, EvalError> {
    let sig = &globals.signature;
    let op_sig = sig.lookup_op(op).ok_or_else(|| ill(format!("unknown operation {op}")))?;
    let clause = handler
        .clause(op)
        .ok_or_else(|| ill(format!("handler lacks a clause for {op}")))?;
    let eff = handler.result_eff.clone();
    let pair_ty = TypeExpr::product(vec![handler.param_ty.clone(), op_sig.in_ty.clone()]);

    let z = pair_var();
    let resumed = Expr::handle(
        handler.clone(),
        Expr::proj(Expr::var_named(z.clone()), 1),
        k_ctx.plug(Expr::proj(Expr::var_named(z.clone()), 2)),
    );
    let f_k = Expr::lam(crate::syntax::Lambda::new(
        eff.clone(),
        z.clone(),
        pair_ty.clone(),
        Expr::glocal(eff.clone(), resumed.clone(), gamma.clone()),
    ));
    let f_l = Expr::lam(crate::syntax::Lambda::new(
        eff.clone(),
        z,
        pair_ty,
        Expr::then(gamma.eff().clone(), resumed, gamma.clone()),
    ));
    Ok(Expr::app(
        clause.to_expr(),
        Expr::tuple(vec![param.clone(), op_arg.clone(), f_l, f_k]),
    ))
}

/// Fire a redex. `gamma` and `eff` are the judgment's loss continuation and
/// decorative effect at the redex.
fn fire_redex(
    tag: RedexTag,
    e: &Expr,
    gamma: &LossCont,
    globals: &Globals,
) -> Result<(LossVec, Expr), EvalError> {
    let zero = LossVec::zero(globals.loss_dim);
    match (tag, e.kind()) {
        (RedexTag::Prim, ExprKind::Prim(f, a)) => {
            let v = prim_eval(f, a, globals)
                .ok_or_else(|| ill(format!("primitive {f} applied to a bad argument")))?;
            Ok((zero, v))
        }
        (RedexTag::Proj, ExprKind::Proj(a, i)) => match a.kind() {
            ExprKind::Tuple(es) if *i >= 1 && *i <= es.len() => Ok((zero, es[*i - 1].clone())),
            _ => Err(ill("projection from a non-tuple")),
        },
        (RedexTag::CasesInl, ExprKind::Cases { scrut, left_var, left, .. }) => match scrut.kind()
        {
            ExprKind::Inl(_, _, v) => Ok((zero, subst(left, v, left_var))),
            _ => Err(ill("cases scrutinee is not an injection")),
        },
        (RedexTag::CasesInr, ExprKind::Cases { scrut, right_var, right, .. }) => {
            match scrut.kind() {
                ExprKind::Inr(_, _, v) => Ok((zero, subst(right, v, right_var))),
                _ => Err(ill("cases scrutinee is not an injection")),
            }
        }
        (RedexTag::IterZero, ExprKind::Iter(_, z, _)) => Ok((zero, z.clone())),
        (RedexTag::IterSucc, ExprKind::Iter(n, z, s)) => match n.kind() {
            ExprKind::Succ(m) => Ok((
                zero,
                Expr::app(s.clone(), Expr::iter(m.clone(), z.clone(), s.clone())),
            )),
            _ => Err(ill("iter scrutinee is not a numeral")),
        },
        (RedexTag::FoldNil, ExprKind::Fold(_, z, _)) => Ok((zero, z.clone())),
        (RedexTag::FoldCons, ExprKind::Fold(l, z, c)) => match l.kind() {
            ExprKind::Cons(h, t) => Ok((
                zero,
                Expr::app(
                    c.clone(),
                    Expr::tuple(vec![h.clone(), Expr::fold(t.clone(), z.clone(), c.clone())]),
                ),
            )),
            _ => Err(ill("fold scrutinee is not a list")),
        },
        (RedexTag::Beta, ExprKind::App(f, a)) => match f.kind() {
            ExprKind::Lam(lam) => Ok((zero, subst(&lam.body, a, &lam.var))),
            _ => Err(ill("application of a non-function value")),
        },
        (RedexTag::Loss, ExprKind::Loss(a)) => {
            let v = a.as_loss().ok_or_else(|| ill("loss of a non-loss value"))?;
            if v.dim() != globals.loss_dim {
                return Err(ill("loss literal dimension mismatch"));
            }
            Ok((v.clone(), Expr::unit()))
        }
        (RedexTag::HandleOp, ExprKind::Handle { handler, param, body }) => {
            match analyze(body, &globals.signature) {
                ExprForm::IsStuck(k, op, v) => {
                    let call =
                        build_handler_call(handler, param, &k, &op, &v, gamma, globals)?;
                    Ok((zero, call))
                }
                _ => Err(ill("handle body is not stuck")),
            }
        }
        (RedexTag::HandleReturn, ExprKind::Handle { handler, param, body }) => Ok((
            zero,
            Expr::app(
                handler.return_clause.to_expr(),
                Expr::tuple(vec![param.clone(), body.clone()]),
            ),
        )),
        (RedexTag::ThenValue, ExprKind::Then { left, cont, .. }) => {
            // (R7): substitute into the continuation body and localise it to
            // the zero continuation.
            let lam = cont.to_lambda(globals.loss_dim);
            let body = subst(&lam.body, left, &lam.var);
            Ok((
                zero,
                Expr::glocal(
                    lam.eff.clone(),
                    body,
                    LossCont::zero(lam.eff.clone(), TypeExpr::loss()),
                ),
            ))
        }
        (RedexTag::GLocalValue, ExprKind::GLocal { body, .. }) => Ok((zero, body.clone())),
        (RedexTag::ResetValue, ExprKind::Reset(a)) => Ok((zero, a.clone())),
        _ => Err(ill("redex tag does not match the expression")),
    }
}

fn redex_rule_name(tag: RedexTag) -> &'static str {
    match tag {
        RedexTag::Prim => "R1",
        RedexTag::Proj
        | RedexTag::CasesInl
        | RedexTag::CasesInr
        | RedexTag::IterZero
        | RedexTag::IterSucc
        | RedexTag::FoldNil
        | RedexTag::FoldCons => "R2",
        RedexTag::Beta => "R3",
        RedexTag::Loss => "R4",
        RedexTag::HandleOp => "R5",
        RedexTag::HandleReturn => "R6",
        RedexTag::ThenValue => "R7",
        RedexTag::GLocalValue => "R8",
        RedexTag::ResetValue => "R9",
    }
}

// ---------------------------------------------------------------------------
// Single step, by direct recursion on the derivation
// ---------------------------------------------------------------------------

/// `γ ⊢_ε e →^r e'`. Returns `None` exactly on terminal expressions.
pub fn step(
    gamma: &LossCont,
    eff: &Effect,
    e: &Expr,
    globals: &Globals,
) -> Result<Option<StepOutcome>, EvalError> {
    match analyze(e, &globals.signature) {
        ExprForm::IsValue(_) | ExprForm::IsStuck(..) => Ok(None),
        ExprForm::IsRedex(tag) => {
            let (loss, next) = fire_redex(tag, e, gamma, globals)?;
            Ok(Some(StepOutcome { loss, next }))
        }
        ExprForm::InRegularFrame(frame, inner) => {
            // (F): evaluate inside under the frame-extended continuation.
            let gamma2 = extend_reg(gamma, eff, &frame, &inner, globals)?;
            let out = step(&gamma2, eff, &inner, globals)?
                .ok_or_else(|| ill("active frame contents made no transition"))?;
            Ok(Some(StepOutcome { loss: out.loss, next: frame.plug(out.next) }))
        }
        ExprForm::InSpecialFrame(frame, inner) => match &frame {
            SpecFrame::HandleBody(handler, param) => {
                // (S1): continue under the return-clause continuation at εℓ.
                let gamma2 = extend_handle(gamma, eff, handler, param)?;
                let inner_eff = eff.plus_label(&handler.label);
                let out = step(&gamma2, &inner_eff, &inner, globals)?
                    .ok_or_else(|| ill("active handle body made no transition"))?;
                Ok(Some(StepOutcome { loss: out.loss, next: frame.plug(out.next) }))
            }
            SpecFrame::ThenLeft(teff, cont) => {
                // (S2): evaluate relative to the stored continuation and
                // reify the produced loss into the result.
                let out = step(cont, eff, &inner, globals)?
                    .ok_or_else(|| ill("active then contents made no transition"))?;
                let wrapped = Expr::prim(
                    "add",
                    Expr::tuple(vec![
                        Expr::lit_loss(out.loss),
                        Expr::then(teff.clone(), out.next, cont.clone()),
                    ]),
                );
                Ok(Some(StepOutcome { loss: LossVec::zero(globals.loss_dim), next: wrapped }))
            }
            SpecFrame::GLocal(leff, cont) => {
                // (S3): switch to the localised continuation; the loss is
                // exported.
                let out = step(cont, leff, &inner, globals)?
                    .ok_or_else(|| ill("active local contents made no transition"))?;
                Ok(Some(StepOutcome { loss: out.loss, next: frame.plug(out.next) }))
            }
            SpecFrame::Reset => {
                // (S4): same continuation, but the loss is not exported.
                let out = step(gamma, eff, &inner, globals)?
                    .ok_or_else(|| ill("active reset contents made no transition"))?;
                Ok(Some(StepOutcome {
                    loss: LossVec::zero(globals.loss_dim),
                    next: Expr::reset(out.next),
                }))
            }
        },
    }
}

// ---------------------------------------------------------------------------
// The frame-stack machine
// ---------------------------------------------------------------------------

enum MFrame {
    Reg(RegFrame),
    Handle(Arc<Handler>, Expr),
    /// A then frame together with the reified losses of the steps taken
    /// under it (rule (S2) wraps the expression in `r + ·` per step; the
    /// machine keeps those constants here, outermost first).
    Then(Effect, LossCont, Vec<LossVec>),
    Local(Effect, LossCont),
    Reset,
}

struct MState {
    frame: MFrame,
    /// Loss continuation in effect for the focus inside this frame.
    gamma: LossCont,
    /// Decorative effect inside this frame.
    eff: Effect,
}

struct Machine<'g> {
    globals: &'g Globals,
    base_gamma: LossCont,
    base_eff: Effect,
    stack: Vec<MState>,
    focus: Expr,
    total: LossVec,
    steps: u64,
    fuel: u64,
    trace: Option<Vec<TraceStep>>,
}

impl<'g> Machine<'g> {
    fn new(
        gamma: &LossCont,
        eff: &Effect,
        e: &Expr,
        fuel: u64,
        globals: &'g Globals,
        want_trace: bool,
    ) -> Self {
        Machine {
            globals,
            base_gamma: gamma.clone(),
            base_eff: eff.clone(),
            stack: Vec::new(),
            focus: e.clone(),
            total: LossVec::zero(globals.loss_dim),
            steps: 0,
            fuel,
            trace: want_trace.then(Vec::new),
        }
    }

    fn cur_gamma(&self) -> &LossCont {
        self.stack.last().map(|s| &s.gamma).unwrap_or(&self.base_gamma)
    }

    fn cur_eff(&self) -> &Effect {
        self.stack.last().map(|s| &s.eff).unwrap_or(&self.base_eff)
    }

    fn gamma_outside(&self, i: usize) -> &LossCont {
        if i == 0 {
            &self.base_gamma
        } else {
            &self.stack[i - 1].gamma
        }
    }

    fn push(&mut self, frame: MFrame, gamma: LossCont, eff: Effect) {
        self.stack.push(MState { frame, gamma, eff });
    }

    fn push_reg(&mut self, frame: RegFrame, inner: &Expr) -> Result<(), EvalError> {
        let gamma = extend_reg(self.cur_gamma(), self.cur_eff(), &frame, inner, self.globals)?;
        let eff = self.cur_eff().clone();
        self.push(MFrame::Reg(frame), gamma, eff);
        Ok(())
    }

    /// Reify stack frames (outermost-first slice) into a continuation
    /// context. Pending then-losses become explicit `add((r, □))` frames.
    fn reify(&self, from: usize) -> ContContext {
        let mut ctx = ContContext::hole();
        for st in &self.stack[from..] {
            match &st.frame {
                MFrame::Reg(f) => ctx.frames.push(Frame::Reg(f.clone())),
                MFrame::Handle(h, v) => {
                    ctx.frames.push(Frame::Spec(SpecFrame::HandleBody(h.clone(), v.clone())))
                }
                MFrame::Then(eff, cont, pending) => {
                    for r in pending {
                        ctx.frames.push(Frame::Reg(RegFrame::Prim(name("add"))));
                        ctx.frames.push(Frame::Reg(RegFrame::Tuple(
                            vec![Expr::lit_loss(r.clone())],
                            vec![],
                        )));
                    }
                    ctx.frames
                        .push(Frame::Spec(SpecFrame::ThenLeft(eff.clone(), cont.clone())));
                }
                MFrame::Local(eff, cont) => {
                    ctx.frames.push(Frame::Spec(SpecFrame::GLocal(eff.clone(), cont.clone())))
                }
                MFrame::Reset => ctx.frames.push(Frame::Spec(SpecFrame::Reset)),
            }
        }
        ctx
    }

    /// The outermost derivation rule for a step taken at the current focus.
    fn outer_rule(&self, redex_rule: &'static str) -> &'static str {
        match self.stack.first().map(|s| &s.frame) {
            None => redex_rule,
            Some(MFrame::Reg(_)) => "F",
            Some(MFrame::Handle(..)) => "S1",
            Some(MFrame::Then(..)) => "S2",
            Some(MFrame::Local(..)) => "S3",
            Some(MFrame::Reset) => "S4",
        }
    }

    /// Propagate a redex loss outward: then frames absorb it into a pending
    /// reified addition, reset frames hide it, everything else passes it on.
    fn bubble(&mut self, mut loss: LossVec) -> LossVec {
        for st in self.stack.iter_mut().rev() {
            match &mut st.frame {
                MFrame::Then(_, _, pending) => {
                    pending.push(loss);
                    loss = LossVec::zero(self.globals.loss_dim);
                }
                MFrame::Reset => {
                    loss = LossVec::zero(self.globals.loss_dim);
                }
                _ => {}
            }
        }
        loss
    }

    fn emit(&mut self, rule: &'static str, loss: LossVec) {
        self.total = self.total.add(&loss);
        self.steps += 1;
        if self.trace.is_some() {
            let expr = self.reify(0).plug(self.focus.clone());
            self.trace.as_mut().unwrap().push(TraceStep { rule, loss, expr });
        }
    }

    /// Exhausted only when another step is needed.
    fn check_fuel(&self) -> Result<(), EvalError> {
        if self.steps >= self.fuel {
            Err(EvalError::FuelExhausted(self.steps))
        } else {
            Ok(())
        }
    }

    /// Pop the innermost frame around a value focus, re-plugging it so the
    /// enclosing redex can fire on the next iteration.
    fn pop_value(&mut self) -> Result<(), EvalError> {
        let st = self.stack.pop().expect("pop on empty stack");
        let v = self.focus.clone();
        match st.frame {
            MFrame::Reg(f) => self.focus = f.plug(v),
            MFrame::Handle(h, p) => self.focus = Expr::handle(h, p, v),
            MFrame::Then(eff, cont, pending) => {
                // The pending additions live outside the then expression;
                // they become real frames again.
                let then_expr = Expr::then(eff, v, cont);
                self.focus = then_expr;
                for r in pending {
                    let fr = RegFrame::Prim(name("add"));
                    let inner = Expr::tuple(vec![
                        Expr::lit_loss(r.clone()),
                        self.focus.clone(),
                    ]);
                    self.push_reg(fr, &inner)?;
                    let tup = RegFrame::Tuple(vec![Expr::lit_loss(r)], vec![]);
                    let hole = self.focus.clone();
                    self.push_reg(tup, &hole)?;
                }
            }
            MFrame::Local(eff, cont) => self.focus = Expr::glocal(eff, v, cont),
            MFrame::Reset => self.focus = Expr::reset(v),
        }
        Ok(())
    }

    fn run(mut self) -> Result<(LossVec, Terminal, u64, Option<Vec<TraceStep>>), EvalError> {
        loop {
            if self.focus.is_value() {
                if self.stack.is_empty() {
                    return Ok((self.total, Terminal::Val(self.focus), self.steps, self.trace));
                }
                self.pop_value()?;
                continue;
            }
            match analyze(&self.focus, &self.globals.signature) {
                ExprForm::IsValue(_) => unreachable!("handled above"),
                ExprForm::IsStuck(k, op, v) => {
                    // Find the innermost handle frame for this operation.
                    let found = self.stack.iter().rposition(|st| match &st.frame {
                        MFrame::Handle(h, _) => h.handles(&self.globals.signature, &op),
                        _ => false,
                    });
                    match found {
                        None => {
                            let mut ctx = self.reify(0);
                            ctx.frames.extend(k.frames);
                            return Ok((
                                self.total,
                                Terminal::StuckOp(ctx, op, v),
                                self.steps,
                                self.trace,
                            ));
                        }
                        Some(i) => {
                            // (R5) at frame i.
                            self.check_fuel()?;
                            let (handler, param) = match &self.stack[i].frame {
                                MFrame::Handle(h, p) => (h.clone(), p.clone()),
                                _ => unreachable!(),
                            };
                            let mut k_inner = self.reify(i + 1);
                            k_inner.frames.extend(k.frames);
                            let gamma = self.gamma_outside(i).clone();
                            let call = build_handler_call(
                                &handler,
                                &param,
                                &k_inner,
                                &op,
                                &v,
                                &gamma,
                                self.globals,
                            )?;
                            self.stack.truncate(i);
                            self.focus = call;
                            let rule = self.outer_rule("R5");
                            let loss = self.bubble(LossVec::zero(self.globals.loss_dim));
                            self.emit(rule, loss);
                        }
                    }
                }
                ExprForm::IsRedex(tag) => {
                    self.check_fuel()?;
                    let (loss, next) =
                        fire_redex(tag, &self.focus, self.cur_gamma(), self.globals)?;
                    self.focus = next;
                    let rule = self.outer_rule(redex_rule_name(tag));
                    let loss = self.bubble(loss);
                    self.emit(rule, loss);
                }
                ExprForm::InRegularFrame(frame, inner) => {
                    self.push_reg(frame, &inner)?;
                    self.focus = inner;
                }
                ExprForm::InSpecialFrame(frame, inner) => {
                    match frame {
                        SpecFrame::HandleBody(h, p) => {
                            let gamma =
                                extend_handle(self.cur_gamma(), self.cur_eff(), &h, &p)?;
                            let eff = self.cur_eff().plus_label(&h.label);
                            self.push(MFrame::Handle(h, p), gamma, eff);
                        }
                        SpecFrame::ThenLeft(teff, cont) => {
                            let eff = self.cur_eff().clone();
                            let gamma = cont.clone();
                            self.push(MFrame::Then(teff, cont, Vec::new()), gamma, eff);
                        }
                        SpecFrame::GLocal(leff, cont) => {
                            let gamma = cont.clone();
                            self.push(MFrame::Local(leff.clone(), cont), gamma, leff);
                        }
                        SpecFrame::Reset => {
                            let gamma = self.cur_gamma().clone();
                            let eff = self.cur_eff().clone();
                            self.push(MFrame::Reset, gamma, eff);
                        }
                    }
                    self.focus = inner;
                }
            }
        }
    }
}

/// Iterate the small-step rules to a terminal expression, summing losses.
pub fn big_eval(
    gamma: &LossCont,
    eff: &Effect,
    e: &Expr,
    fuel: u64,
    globals: &Globals,
) -> Result<BigEvalResult, EvalError> {
    let m = Machine::new(gamma, eff, e, fuel, globals, false);
    let (loss, terminal, steps, _) = m.run()?;
    Ok(BigEvalResult { loss, terminal, steps })
}

/// The step sequence with rule names, as produced by the machine.
pub fn trace(
    gamma: &LossCont,
    eff: &Effect,
    e: &Expr,
    fuel: u64,
    globals: &Globals,
) -> Result<(Vec<TraceStep>, BigEvalResult), EvalError> {
    let m = Machine::new(gamma, eff, e, fuel, globals, true);
    let (loss, terminal, steps, tr) = m.run()?;
    Ok((tr.unwrap_or_default(), BigEvalResult { loss, terminal, steps }))
}

// ---------------------------------------------------------------------------
// Giant-step evaluation
// ---------------------------------------------------------------------------

/// Evaluation all the way to an effect value: a final loss/value pair, or an
/// unhandled operation with a demand-computed resumption.
#[derive(Clone)]
pub enum GiantValue {
    Done(LossVec, Expr),
    OpNode {
        label: crate::syntax::EffectLabel,
        op: Name,
        arg: Expr,
        resume: Arc<dyn Fn(&Expr) -> Result<GiantValue, EvalError> + Send + Sync>,
    },
}

impl std::fmt::Debug for GiantValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GiantValue::Done(r, v) => write!(f, "Done({r}, {v:?})"),
            GiantValue::OpNode { label, op, arg, .. } => {
                write!(f, "OpNode({label:?}, {op}, {arg:?}, <resume>)")
            }
        }
    }
}

impl GiantValue {
    /// The loss action on effect values: add at the leaves, pass through
    /// operation nodes.
    pub fn add_loss(self, r: LossVec) -> GiantValue {
        if r.is_zero() {
            return self;
        }
        match self {
            GiantValue::Done(s, v) => GiantValue::Done(r.add(&s), v),
            GiantValue::OpNode { label, op, arg, resume } => {
                let resume2 = Arc::new(move |w: &Expr| {
                    resume(w).map(|gv| gv.add_loss(r.clone()))
                });
                GiantValue::OpNode { label, op, arg, resume: resume2 }
            }
        }
    }
}

/// Big-step evaluate; on an unhandled operation, expose it as a node whose
/// resumption plugs a result value back into the stuck context and keeps
/// evaluating, with the already-produced loss acting on the child.
pub fn giant_eval(
    gamma: &LossCont,
    eff: &Effect,
    e: &Expr,
    fuel: u64,
    globals: &Globals,
) -> Result<GiantValue, EvalError> {
    let res = big_eval(gamma, eff, e, fuel, globals)?;
    match res.terminal {
        Terminal::Val(v) => Ok(GiantValue::Done(res.loss, v)),
        Terminal::StuckOp(k, op, arg) => {
            let op_sig = globals
                .signature
                .lookup_op(&op)
                .ok_or_else(|| ill(format!("unknown operation {op}")))?;
            let label = op_sig.label.clone();
            let loss = res.loss;
            let resume = {
                let gamma = gamma.clone();
                let eff = eff.clone();
                let globals = globals.clone();
                let loss = loss.clone();
                Arc::new(move |w: &Expr| {
                    giant_eval(&gamma, &eff, &k.plug(w.clone()), fuel, &globals)
                        .map(|gv| gv.add_loss(loss.clone()))
                })
            };
            Ok(GiantValue::OpNode { label, op, arg, resume })
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::syntax::{EffectLabel, Lambda, OpSig, Signature};

    fn lv(x: f64) -> LossVec {
        LossVec::scalar(x, 1)
    }

    pub(crate) fn ndet_globals() -> Globals {
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

    fn seq(eff: &Effect, var: &str, var_ty: TypeExpr, bound: Expr, body: Expr) -> Expr {
        Expr::app(
            Expr::lam(Lambda::new(eff.clone(), name(var), var_ty, body)),
            bound,
        )
    }

    /// The overview program: decide a boolean, record a loss of 2 or 4
    /// accordingly, return 'a' or 'b'.
    pub(crate) fn overview_pgm() -> Expr {
        let ndet = Effect::singleton(EffectLabel::new("ndet"));
        let tail = Expr::ite(Expr::var("b"), Expr::lit_char('a'), Expr::lit_char('b'));
        let record = seq(
            &ndet,
            "_u",
            TypeExpr::unit(),
            Expr::loss(Expr::prim(
                "mul",
                Expr::tuple(vec![Expr::lit_loss(lv(2.0)), Expr::var("i")]),
            )),
            tail,
        );
        let pick = seq(
            &ndet,
            "i",
            TypeExpr::loss(),
            Expr::ite(Expr::var("b"), Expr::lit_loss(lv(1.0)), Expr::lit_loss(lv(2.0))),
            record,
        );
        seq(&ndet, "b", TypeExpr::bool(), Expr::op_call("decide", Expr::unit()), pick)
    }

    /// The loss-minimising decide handler: probe both branches through the
    /// choice continuation and resume with the cheaper one.
    pub(crate) fn hmin() -> Arc<Handler> {
        let empty = Effect::empty();
        let par = TypeExpr::unit();
        let pair_in = TypeExpr::product(vec![par.clone(), TypeExpr::bool()]);
        let l_ty = TypeExpr::func(pair_in.clone(), TypeExpr::loss(), empty.clone());
        let k_ty = TypeExpr::func(pair_in, TypeExpr::char(), empty.clone());
        let binder = TypeExpr::product(vec![par.clone(), TypeExpr::unit(), l_ty.clone(), k_ty.clone()]);

        let probe = |b: bool| {
            Expr::app(
                Expr::var("l"),
                Expr::tuple(vec![Expr::var("p"), Expr::bool(b)]),
            )
        };
        let resume = |b: bool| {
            Expr::app(
                Expr::var("k"),
                Expr::tuple(vec![Expr::var("p"), Expr::bool(b)]),
            )
        };
        let compare = Expr::ite(
            Expr::prim("leq", Expr::tuple(vec![Expr::var("y"), Expr::var("z")])),
            resume(true),
            resume(false),
        );
        let body = seq(
            &empty,
            "y",
            TypeExpr::loss(),
            probe(true),
            seq(&empty, "z", TypeExpr::loss(), probe(false), compare),
        );
        // Bind (p, x, l, k) from the clause tuple.
        let with_binders = Expr::app(
            Expr::lam(Lambda::new(
                empty.clone(),
                name("p"),
                par.clone(),
                Expr::app(
                    Expr::lam(Lambda::new(
                        empty.clone(),
                        name("x"),
                        TypeExpr::unit(),
                        Expr::app(
                            Expr::lam(Lambda::new(
                                empty.clone(),
                                name("l"),
                                l_ty,
                                Expr::app(
                                    Expr::lam(Lambda::new(empty.clone(), name("k"), k_ty, body)),
                                    Expr::proj(Expr::var("_c"), 4),
                                ),
                            )),
                            Expr::proj(Expr::var("_c"), 3),
                        ),
                    )),
                    Expr::proj(Expr::var("_c"), 2),
                ),
            )),
            Expr::proj(Expr::var("_c"), 1),
        );
        let binder_ty = binder;
        let clause = Lambda::new(empty.clone(), name("_c"), binder_ty, with_binders);
        let ret = Lambda::new(
            empty.clone(),
            name("_c"),
            TypeExpr::product(vec![par.clone(), TypeExpr::char()]),
            Expr::proj(Expr::var("_c"), 2),
        );
        Arc::new(Handler {
            label: EffectLabel::new("ndet"),
            param_ty: par,
            op_clauses: vec![(name("decide"), clause)],
            return_clause: ret,
            result_eff: Effect::empty(),
        })
    }

    pub(crate) fn overview_handled() -> Expr {
        Expr::handle(hmin(), Expr::unit(), overview_pgm())
    }

    fn zero_cont(ty: TypeExpr) -> LossCont {
        LossCont::zero(Effect::empty(), ty)
    }

    #[test]
    fn loss_steps_with_its_value() {
        let g = Globals::new(Signature::new(), 1);
        let gamma = zero_cont(TypeExpr::unit());
        let out = step(&gamma, &Effect::empty(), &Expr::loss(Expr::lit_loss(lv(2.0))), &g)
            .unwrap()
            .unwrap();
        assert_eq!(out.loss, lv(2.0));
        assert_eq!(out.next, Expr::unit());
    }

    #[test]
    fn values_make_no_transition() {
        let g = Globals::new(Signature::new(), 1);
        let gamma = zero_cont(TypeExpr::char());
        let r = step(&gamma, &Effect::empty(), &Expr::lit_char('a'), &g).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn unhandled_op_is_terminal() {
        let g = ndet_globals();
        let ndet = Effect::singleton(EffectLabel::new("ndet"));
        let e = Expr::op_call("decide", Expr::unit());
        let gamma = LossCont::zero(Effect::empty(), TypeExpr::bool());
        assert!(step(&gamma, &ndet, &e, &g).unwrap().is_none());
        let res = big_eval(&gamma, &ndet, &e, 1000, &g).unwrap();
        assert!(res.loss.is_zero());
        match res.terminal {
            Terminal::StuckOp(k, op, arg) => {
                assert!(k.is_hole());
                assert_eq!(&*op, "decide");
                assert_eq!(arg, Expr::unit());
            }
            Terminal::Val(_) => panic!("expected a stuck operation"),
        }
    }

    #[test]
    fn overview_program_runs_to_a_with_loss_two() {
        let g = ndet_globals();
        let gamma = zero_cont(TypeExpr::char());
        let res = big_eval(&gamma, &Effect::empty(), &overview_handled(), 100_000, &g).unwrap();
        assert_eq!(res.loss, lv(2.0));
        match res.terminal {
            Terminal::Val(v) => assert_eq!(v, Expr::lit_char('a')),
            Terminal::StuckOp(..) => panic!("expected a value"),
        }
    }

    #[test]
    fn overview_trace_starts_with_r5_and_losses_sum() {
        let g = ndet_globals();
        let gamma = zero_cont(TypeExpr::char());
        let (tr, res) =
            trace(&gamma, &Effect::empty(), &overview_handled(), 100_000, &g).unwrap();
        assert_eq!(tr[0].rule, "R5");
        assert_eq!(tr.len() as u64, res.steps);
        let mut total = LossVec::zero(1);
        for t in &tr {
            total = total.add(&t.loss);
        }
        assert_eq!(total, res.loss);
        // All intermediate losses in the worked example are integral.
        for t in &tr {
            assert!(t.loss.0.iter().all(|x| x.fract() == 0.0));
        }
    }

    #[test]
    fn simple_traces_match_the_rules() {
        let g = Globals::new(Signature::new(), 1);
        let gamma = zero_cont(TypeExpr::unit());
        let (tr, _) =
            trace(&gamma, &Effect::empty(), &Expr::loss(Expr::lit_loss(lv(2.0))), 10, &g)
                .unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].rule, "R4");
        assert_eq!(tr[0].loss, lv(2.0));
        assert_eq!(tr[0].expr, Expr::unit());

        let id = Expr::lam(Lambda::new(
            Effect::empty(),
            name("x"),
            TypeExpr::loss(),
            Expr::var("x"),
        ));
        let gamma = zero_cont(TypeExpr::loss());
        let (tr, _) = trace(
            &gamma,
            &Effect::empty(),
            &Expr::app(id, Expr::lit_loss(lv(3.0))),
            10,
            &g,
        )
        .unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].rule, "R3");
        assert!(tr[0].loss.is_zero());
        assert_eq!(tr[0].expr, Expr::lit_loss(lv(3.0)));
    }

    #[test]
    fn machine_trace_equals_iterated_step() {
        let g = ndet_globals();
        let gamma = zero_cont(TypeExpr::char());
        let eff = Effect::empty();
        let (tr, res) =
            trace(&gamma, &eff, &overview_handled(), 100_000, &g).unwrap();

        let mut e = overview_handled();
        let mut losses = Vec::new();
        let mut exprs = Vec::new();
        while let Some(out) = step(&gamma, &eff, &e, &g).unwrap() {
            losses.push(out.loss.clone());
            exprs.push(out.next.clone());
            e = out.next;
        }
        assert_eq!(losses.len(), tr.len());
        let mut total = LossVec::zero(1);
        for (i, t) in tr.iter().enumerate() {
            assert_eq!(t.loss, losses[i], "loss at step {i}");
            assert_eq!(t.expr, exprs[i], "expression at step {i}");
            total = total.add(&t.loss);
        }
        assert_eq!(total, res.loss);
    }

    #[test]
    fn giant_eval_exposes_unhandled_ops() {
        let g = ndet_globals();
        let ndet = Effect::singleton(EffectLabel::new("ndet"));
        // x <- decide(()); loss(1); x
        let pgm = seq(
            &ndet,
            "x",
            TypeExpr::bool(),
            Expr::op_call("decide", Expr::unit()),
            seq(
                &ndet,
                "_u",
                TypeExpr::unit(),
                Expr::loss(Expr::lit_loss(lv(1.0))),
                Expr::var("x"),
            ),
        );
        let gamma = LossCont::zero(Effect::empty(), TypeExpr::bool());
        let gv = giant_eval(&gamma, &ndet, &pgm, 10_000, &g).unwrap();
        match gv {
            GiantValue::OpNode { label, op, arg, resume } => {
                assert_eq!(label, EffectLabel::new("ndet"));
                assert_eq!(&*op, "decide");
                assert_eq!(arg, Expr::unit());
                match resume(&Expr::bool(true)).unwrap() {
                    GiantValue::Done(r, v) => {
                        assert_eq!(r, lv(1.0));
                        assert_eq!(v, Expr::bool(true));
                    }
                    _ => panic!("resume(true) should finish"),
                }
            }
            GiantValue::Done(..) => panic!("expected an op node"),
        }
    }

    #[test]
    fn giant_eval_of_handled_overview_is_done() {
        let g = ndet_globals();
        let gamma = zero_cont(TypeExpr::char());
        let gv = giant_eval(&gamma, &Effect::empty(), &overview_handled(), 100_000, &g).unwrap();
        match gv {
            GiantValue::Done(r, v) => {
                assert_eq!(r, lv(2.0));
                assert_eq!(v, Expr::lit_char('a'));
            }
            _ => panic!("expected Done"),
        }
    }
}
