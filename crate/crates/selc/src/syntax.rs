//! Abstract syntax for the calculus: types and effect multisets, signatures,
//! expressions, handlers, loss continuations, and the frame/context classes
//! the evaluator decomposes expressions into.
//!
//! Expressions are immutable trees behind [`Arc`], so sharing a subterm is a
//! pointer copy. Every node caches its free-variable set (substitution skips
//! subtrees that cannot contain the variable) and lazily caches its type once
//! the checker has computed it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

pub type Name = Arc<str>;

pub fn name(s: &str) -> Name {
    Arc::from(s)
}

// ---------------------------------------------------------------------------
// Effects
// ---------------------------------------------------------------------------

/// An effect label such as `ndet`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EffectLabel(pub Name);

impl EffectLabel {
    pub fn new(s: &str) -> Self {
        EffectLabel(name(s))
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for EffectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A finite multiset of effect labels. Union adds multiplicities and the
/// sub-effect order compares counts pointwise.
#[derive(Clone, PartialEq, Eq, Default, Hash)]
pub struct Effect {
    counts: BTreeMap<EffectLabel, u32>,
}

impl Effect {
    pub fn empty() -> Self {
        Effect::default()
    }

    pub fn singleton(label: EffectLabel) -> Self {
        let mut counts = BTreeMap::new();
        counts.insert(label, 1);
        Effect { counts }
    }

    pub fn from_labels<I: IntoIterator<Item = EffectLabel>>(labels: I) -> Self {
        let mut eff = Effect::empty();
        for l in labels {
            eff.add(&l, 1);
        }
        eff
    }

    pub fn add(&mut self, label: &EffectLabel, n: u32) {
        if n == 0 {
            return;
        }
        *self.counts.entry(label.clone()).or_insert(0) += n;
    }

    /// Multiset union: `εε'` in the judgment notation.
    pub fn union(&self, other: &Effect) -> Effect {
        let mut out = self.clone();
        for (l, n) in &other.counts {
            out.add(l, *n);
        }
        out
    }

    /// `self` extended with one more occurrence of `label` (written `εℓ`).
    pub fn plus_label(&self, label: &EffectLabel) -> Effect {
        let mut out = self.clone();
        out.add(label, 1);
        out
    }

    /// Sub-multiset order: every count in `self` is at most its count in `other`.
    pub fn sub(&self, other: &Effect) -> bool {
        self.counts
            .iter()
            .all(|(l, n)| other.counts.get(l).copied().unwrap_or(0) >= *n)
    }

    pub fn count(&self, label: &EffectLabel) -> u32 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn contains(&self, label: &EffectLabel) -> bool {
        self.count(label) > 0
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Total multiplicity, the `|ε|` entering type sizes.
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = &EffectLabel> {
        self.counts.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EffectLabel, u32)> {
        self.counts.iter().map(|(l, n)| (l, *n))
    }

    /// Pointwise max, used when joining lower-bound effect requirements.
    pub fn pointwise_max(&self, other: &Effect) -> Effect {
        let mut out = self.clone();
        for (l, n) in &other.counts {
            let e = out.counts.entry(l.clone()).or_insert(0);
            *e = (*e).max(*n);
        }
        out
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        let mut first = true;
        for (l, n) in &self.counts {
            for _ in 0..*n {
                if !first {
                    write!(f, ", ")?;
                }
                write!(f, "{}", l.0)?;
                first = false;
            }
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

// ---------------------------------------------------------------------------
// Signatures
// ---------------------------------------------------------------------------

/// An operation typing `op : out →ℓ in`: `out` is sent to start the effect
/// and the operation returns an `in` to continue the computation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpSig {
    pub name: Name,
    pub out_ty: TypeExpr,
    pub in_ty: TypeExpr,
    pub label: EffectLabel,
}

/// Effect label typings: each label owns a non-empty set of operations, and
/// operation names are disjoint across labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Signature {
    effects: BTreeMap<EffectLabel, Vec<OpSig>>,
    by_op: BTreeMap<Name, OpSig>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SignatureError {
    #[error("effect label `{0}` declared twice")]
    DuplicateLabel(String),
    #[error("operation `{0}` declared twice")]
    DuplicateOp(String),
    #[error("effect label `{0}` has no operations")]
    EmptyLabel(String),
}

impl Signature {
    pub fn new() -> Self {
        Signature::default()
    }

    pub fn declare(&mut self, label: EffectLabel, ops: Vec<OpSig>) -> Result<(), SignatureError> {
        if self.effects.contains_key(&label) {
            return Err(SignatureError::DuplicateLabel(label.as_str().to_owned()));
        }
        if ops.is_empty() {
            return Err(SignatureError::EmptyLabel(label.as_str().to_owned()));
        }
        for op in &ops {
            if self.by_op.contains_key(&op.name) {
                return Err(SignatureError::DuplicateOp(op.name.to_string()));
            }
            self.by_op.insert(op.name.clone(), op.clone());
        }
        self.effects.insert(label, ops);
        Ok(())
    }

    pub fn lookup_op(&self, op: &str) -> Option<&OpSig> {
        self.by_op.get(op)
    }

    pub fn ops_of(&self, label: &EffectLabel) -> Option<&[OpSig]> {
        self.effects.get(label).map(|v| v.as_slice())
    }

    pub fn labels(&self) -> impl Iterator<Item = &EffectLabel> {
        self.effects.keys()
    }

    pub fn has_label(&self, label: &EffectLabel) -> bool {
        self.effects.contains_key(label)
    }
}

/// Program-wide context: the signature plus the dimension of the loss monoid
/// `R = ℝ^d` and any extra declared base types.
#[derive(Clone, Debug)]
pub struct Globals {
    pub signature: Signature,
    pub loss_dim: usize,
    pub extra_base_types: Vec<Name>,
}

impl Globals {
    pub fn new(signature: Signature, loss_dim: usize) -> Self {
        Globals { signature, loss_dim, extra_base_types: Vec::new() }
    }

    pub fn is_base_type(&self, n: &str) -> bool {
        matches!(n, "loss" | "char" | "str") || self.extra_base_types.iter().any(|b| &**b == n)
    }
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TypeExpr(Arc<TypeNode>);

#[derive(PartialEq, Eq, Hash)]
pub enum TypeNode {
    /// A base type: `loss`, `char`, `str`, or a declared extra.
    Base(Name),
    /// `(σ1, …, σn)` with `n ≥ 0`; the empty product is the unit type.
    Product(Vec<TypeExpr>),
    Sum(TypeExpr, TypeExpr),
    Nat,
    List(TypeExpr),
    /// `(σ → τ ! ε)`: the function's result effect is part of the type.
    Fn(TypeExpr, TypeExpr, Effect),
}

impl TypeExpr {
    pub fn base(n: &str) -> Self {
        TypeExpr(Arc::new(TypeNode::Base(name(n))))
    }
    pub fn loss() -> Self {
        Self::base("loss")
    }
    pub fn char() -> Self {
        Self::base("char")
    }
    pub fn str() -> Self {
        Self::base("str")
    }
    pub fn unit() -> Self {
        TypeExpr(Arc::new(TypeNode::Product(vec![])))
    }
    pub fn product(tys: Vec<TypeExpr>) -> Self {
        TypeExpr(Arc::new(TypeNode::Product(tys)))
    }
    pub fn sum(l: TypeExpr, r: TypeExpr) -> Self {
        TypeExpr(Arc::new(TypeNode::Sum(l, r)))
    }
    /// The boolean encoding `() + ()`, with `true = inl(())`.
    pub fn bool() -> Self {
        Self::sum(Self::unit(), Self::unit())
    }
    pub fn nat() -> Self {
        TypeExpr(Arc::new(TypeNode::Nat))
    }
    pub fn list(t: TypeExpr) -> Self {
        TypeExpr(Arc::new(TypeNode::List(t)))
    }
    pub fn func(arg: TypeExpr, res: TypeExpr, eff: Effect) -> Self {
        TypeExpr(Arc::new(TypeNode::Fn(arg, res, eff)))
    }

    pub fn node(&self) -> &TypeNode {
        &self.0
    }

    pub fn is_unit(&self) -> bool {
        matches!(self.node(), TypeNode::Product(ts) if ts.is_empty())
    }

    pub fn is_bool(&self) -> bool {
        matches!(self.node(), TypeNode::Sum(l, r) if l.is_unit() && r.is_unit())
    }

    pub fn is_loss(&self) -> bool {
        matches!(self.node(), TypeNode::Base(b) if &**b == "loss")
    }

    /// First-order types contain no function type.
    pub fn is_first_order(&self) -> bool {
        match self.node() {
            TypeNode::Base(_) | TypeNode::Nat => true,
            TypeNode::Product(ts) => ts.iter().all(|t| t.is_first_order()),
            TypeNode::Sum(l, r) => l.is_first_order() && r.is_first_order(),
            TypeNode::List(t) => t.is_first_order(),
            TypeNode::Fn(..) => false,
        }
    }

    /// Collect the effect labels appearing anywhere in the type.
    pub fn effect_labels(&self, out: &mut Vec<EffectLabel>) {
        match self.node() {
            TypeNode::Base(_) | TypeNode::Nat => {}
            TypeNode::Product(ts) => ts.iter().for_each(|t| t.effect_labels(out)),
            TypeNode::Sum(l, r) => {
                l.effect_labels(out);
                r.effect_labels(out);
            }
            TypeNode::List(t) => t.effect_labels(out),
            TypeNode::Fn(a, r, eff) => {
                a.effect_labels(out);
                r.effect_labels(out);
                for l in eff.labels() {
                    out.push(l.clone());
                }
            }
        }
    }
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            TypeNode::Base(b) => write!(f, "{b}"),
            TypeNode::Product(ts) => {
                write!(f, "(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            TypeNode::Sum(..) if self.is_bool() => write!(f, "bool"),
            TypeNode::Sum(l, r) => write!(f, "({l} + {r})"),
            TypeNode::Nat => write!(f, "nat"),
            TypeNode::List(t) => write!(f, "list({t})"),
            TypeNode::Fn(a, r, e) => write!(f, "({a} -> {r} ! {e})"),
        }
    }
}

impl fmt::Debug for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

// ---------------------------------------------------------------------------
// Loss vectors
// ---------------------------------------------------------------------------

/// An element of the loss monoid `R = ℝ^d`: componentwise addition with the
/// zero vector as unit.
#[derive(Clone, PartialEq)]
pub struct LossVec(pub Arc<[f64]>);

impl LossVec {
    pub fn zero(dim: usize) -> Self {
        LossVec(vec![0.0; dim].into())
    }

    pub fn scalar(x: f64, dim: usize) -> Self {
        LossVec(vec![x; dim].into())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        LossVec(v.into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn add(&self, other: &LossVec) -> LossVec {
        debug_assert_eq!(self.dim(), other.dim());
        LossVec(self.0.iter().zip(other.0.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }

    pub fn approx_eq(&self, other: &LossVec, tol: f64) -> bool {
        self.dim() == other.dim()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|(a, b)| (a - b).abs() <= tol || (a.is_nan() && b.is_nan()))
    }
}

/// Shortest decimal that round-trips: `Display` for `f64` already does this,
/// we only force a trailing `.0` so loss literals stay distinct from nats.
pub fn render_f64(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

impl fmt::Display for LossVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dim() == 1 {
            write!(f, "{}", render_f64(self.0[0]))
        } else {
            write!(f, "<")?;
            for (i, x) in self.0.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", render_f64(*x))?;
            }
            write!(f, ">")
        }
    }
}

impl fmt::Debug for LossVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Loss(LossVec),
    Char(char),
    Str(Arc<str>),
}

/// A typed, effect-annotated abstraction `λ^ε x:σ. e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lambda {
    pub eff: Effect,
    pub var: Name,
    pub var_ty: TypeExpr,
    pub body: Expr,
}

impl Lambda {
    pub fn new(eff: Effect, var: Name, var_ty: TypeExpr, body: Expr) -> Self {
        Lambda { eff, var, var_ty, body }
    }

    pub fn to_expr(&self) -> Expr {
        Expr::lam(self.clone())
    }

    pub fn fn_ty(&self, res: TypeExpr) -> TypeExpr {
        TypeExpr::func(self.var_ty.clone(), res, self.eff.clone())
    }
}

/// Loss continuation expressions: the zero continuation `λ^ε x:σ. 0` extended
/// by `λ^ε x:σ. e ▷ γ`. A strict sub-grammar of lambdas, kept as its own type
/// because `local` stores one structurally.
#[derive(Clone, Debug, PartialEq)]
pub enum LossCont {
    Zero {
        eff: Effect,
        var_ty: TypeExpr,
    },
    Extend {
        eff: Effect,
        var: Name,
        var_ty: TypeExpr,
        body: Expr,
        rest: Arc<LossCont>,
    },
}

impl LossCont {
    pub fn zero(eff: Effect, var_ty: TypeExpr) -> Self {
        LossCont::Zero { eff, var_ty }
    }

    pub fn eff(&self) -> &Effect {
        match self {
            LossCont::Zero { eff, .. } | LossCont::Extend { eff, .. } => eff,
        }
    }

    pub fn var_ty(&self) -> &TypeExpr {
        match self {
            LossCont::Zero { var_ty, .. } | LossCont::Extend { var_ty, .. } => var_ty,
        }
    }

    /// The continuation as the lambda it denotes. `loss_dim` fixes the zero
    /// literal's dimension.
    pub fn to_lambda(&self, loss_dim: usize) -> Lambda {
        match self {
            LossCont::Zero { eff, var_ty } => Lambda::new(
                eff.clone(),
                name("_z"),
                var_ty.clone(),
                Expr::lit_loss(LossVec::zero(loss_dim)),
            ),
            LossCont::Extend { eff, var, var_ty, body, rest } => Lambda::new(
                eff.clone(),
                var.clone(),
                var_ty.clone(),
                Expr::then(rest.eff().clone(), body.clone(), (**rest).clone()),
            ),
        }
    }

    pub fn to_expr(&self, loss_dim: usize) -> Expr {
        self.to_lambda(loss_dim).to_expr()
    }

    /// Classify a lambda back into the loss-continuation grammar, when it fits.
    pub fn from_lambda(lam: &Lambda) -> Option<LossCont> {
        match lam.body.kind() {
            ExprKind::Const(Literal::Loss(v)) if v.is_zero() => {
                Some(LossCont::Zero { eff: lam.eff.clone(), var_ty: lam.var_ty.clone() })
            }
            ExprKind::Then { left, cont, .. } => Some(LossCont::Extend {
                eff: lam.eff.clone(),
                var: lam.var.clone(),
                var_ty: lam.var_ty.clone(),
                body: left.clone(),
                rest: Arc::new(cont.clone()),
            }),
            _ => None,
        }
    }
}

/// A parameterized handler: one clause per operation of its label plus a
/// return clause, all carrying the handler's result effect.
#[derive(Clone, Debug, PartialEq)]
pub struct Handler {
    pub label: EffectLabel,
    pub param_ty: TypeExpr,
    /// Clause values `op ↦ λ^ε z:(par, out, (par,in)→loss!ε, (par,in)→σ'!ε). e`.
    pub op_clauses: Vec<(Name, Lambda)>,
    /// `return ↦ λ^ε z:(par, σ). e`.
    pub return_clause: Lambda,
    pub result_eff: Effect,
}

impl Handler {
    pub fn clause(&self, op: &str) -> Option<&Lambda> {
        self.op_clauses.iter().find(|(n, _)| &**n == op).map(|(_, l)| l)
    }

    pub fn handles(&self, sig: &Signature, op: &str) -> bool {
        sig.lookup_op(op).map(|o| o.label == self.label).unwrap_or(false)
    }

    /// The handled computation's type σ, read off the return clause binder
    /// `(par, σ)`.
    pub fn body_ty(&self) -> Option<TypeExpr> {
        match self.return_clause.var_ty.node() {
            TypeNode::Product(ts) if ts.len() == 2 => Some(ts[1].clone()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    Const(Literal),
    /// `f(e)` for a primitive function `f`.
    Prim(Name, Expr),
    Var(Name),
    Lam(Lambda),
    App(Expr, Expr),
    Tuple(Vec<Expr>),
    /// 1-based projection `e.i`.
    Proj(Expr, usize),
    Inl(TypeExpr, TypeExpr, Expr),
    Inr(TypeExpr, TypeExpr, Expr),
    Cases {
        scrut: Expr,
        left_var: Name,
        left_ty: TypeExpr,
        left: Expr,
        right_var: Name,
        right_ty: TypeExpr,
        right: Expr,
    },
    Zero,
    Succ(Expr),
    Iter(Expr, Expr, Expr),
    Nil(TypeExpr),
    Cons(Expr, Expr),
    Fold(Expr, Expr, Expr),
    OpCall(Name, Expr),
    Loss(Expr),
    Handle {
        handler: Arc<Handler>,
        param: Expr,
        body: Expr,
    },
    /// `e ▷ γ`: run `e`, feed its value to the loss continuation `γ`, and
    /// reify the loss `e` produces into the result.
    Then {
        eff: Effect,
        left: Expr,
        cont: LossCont,
    },
    /// `local^ε(e, γ)`: run `e` under the loss continuation `γ`.
    GLocal {
        eff: Effect,
        body: Expr,
        cont: LossCont,
    },
    /// `reset(e)`: run `e`, discarding the loss it produces.
    Reset(Expr),
}

struct ExprNode {
    kind: ExprKind,
    free: FreeVars,
    is_value: bool,
    ty: OnceLock<TypeExpr>,
}

#[derive(Clone)]
pub struct Expr(Arc<ExprNode>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.kind() == other.kind()
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self.kind(), f)
    }
}

/// Sorted, deduplicated free-variable set.
type FreeVars = Arc<[Name]>;

fn fv_empty() -> FreeVars {
    Arc::from(Vec::new())
}

fn fv_single(n: &Name) -> FreeVars {
    Arc::from(vec![n.clone()])
}

fn fv_union(sets: &[&FreeVars]) -> FreeVars {
    if let [only] = sets {
        return (*only).clone();
    }
    let mut all: Vec<Name> = Vec::new();
    for s in sets {
        for n in s.iter() {
            if !all.contains(n) {
                all.push(n.clone());
            }
        }
    }
    all.sort();
    Arc::from(all)
}

fn fv_minus(set: &FreeVars, var: &Name) -> FreeVars {
    if !fv_contains(set, var) {
        return set.clone();
    }
    Arc::from(set.iter().filter(|n| *n != var).cloned().collect::<Vec<_>>())
}

pub fn fv_contains(set: &FreeVars, var: &Name) -> bool {
    set.binary_search_by(|n| n.as_ref().cmp(var.as_ref())).is_ok()
}

fn lambda_fv(lam: &Lambda) -> FreeVars {
    fv_minus(lam.body.free_vars(), &lam.var)
}

fn losscont_fv(c: &LossCont) -> FreeVars {
    match c {
        LossCont::Zero { .. } => fv_empty(),
        LossCont::Extend { var, body, rest, .. } => {
            let inner = fv_union(&[body.free_vars(), &losscont_fv(rest)]);
            fv_minus(&inner, var)
        }
    }
}

impl Expr {
    pub fn new(kind: ExprKind) -> Expr {
        let free = match &kind {
            ExprKind::Const(_) | ExprKind::Zero | ExprKind::Nil(_) => fv_empty(),
            ExprKind::Var(n) => fv_single(n),
            ExprKind::Prim(_, e)
            | ExprKind::Proj(e, _)
            | ExprKind::Inl(_, _, e)
            | ExprKind::Inr(_, _, e)
            | ExprKind::Succ(e)
            | ExprKind::OpCall(_, e)
            | ExprKind::Loss(e)
            | ExprKind::Reset(e) => e.free_vars().clone(),
            ExprKind::Lam(lam) => lambda_fv(lam),
            ExprKind::App(a, b) | ExprKind::Cons(a, b) => {
                fv_union(&[a.free_vars(), b.free_vars()])
            }
            ExprKind::Tuple(es) => {
                let sets: Vec<&FreeVars> = es.iter().map(|e| e.free_vars()).collect();
                fv_union(&sets)
            }
            ExprKind::Cases { scrut, left_var, left, right_var, right, .. } => fv_union(&[
                scrut.free_vars(),
                &fv_minus(left.free_vars(), left_var),
                &fv_minus(right.free_vars(), right_var),
            ]),
            ExprKind::Iter(a, b, c) | ExprKind::Fold(a, b, c) => {
                fv_union(&[a.free_vars(), b.free_vars(), c.free_vars()])
            }
            ExprKind::Handle { handler, param, body } => {
                let mut sets: Vec<FreeVars> =
                    vec![param.free_vars().clone(), body.free_vars().clone()];
                for (_, cl) in &handler.op_clauses {
                    sets.push(lambda_fv(cl));
                }
                sets.push(lambda_fv(&handler.return_clause));
                let refs: Vec<&FreeVars> = sets.iter().collect();
                fv_union(&refs)
            }
            ExprKind::Then { left, cont, .. } => {
                fv_union(&[left.free_vars(), &losscont_fv(cont)])
            }
            ExprKind::GLocal { body, cont, .. } => {
                fv_union(&[body.free_vars(), &losscont_fv(cont)])
            }
        };
        let is_value = match &kind {
            ExprKind::Const(_) | ExprKind::Var(_) | ExprKind::Lam(_) | ExprKind::Zero
            | ExprKind::Nil(_) => true,
            ExprKind::Tuple(es) => es.iter().all(|e| e.is_value()),
            ExprKind::Inl(_, _, e) | ExprKind::Inr(_, _, e) | ExprKind::Succ(e) => e.is_value(),
            ExprKind::Cons(h, t) => h.is_value() && t.is_value(),
            _ => false,
        };
        Expr(Arc::new(ExprNode { kind, free, is_value, ty: OnceLock::new() }))
    }

    pub fn kind(&self) -> &ExprKind {
        &self.0.kind
    }

    pub fn free_vars(&self) -> &FreeVars {
        &self.0.free
    }

    pub fn is_closed(&self) -> bool {
        self.0.free.is_empty()
    }

    pub fn has_free(&self, var: &Name) -> bool {
        fv_contains(&self.0.free, var)
    }

    /// Type cache for closed subterms; filled by the checker.
    pub fn cached_ty(&self) -> Option<&TypeExpr> {
        self.0.ty.get()
    }

    pub fn cache_ty(&self, ty: TypeExpr) {
        let _ = self.0.ty.set(ty);
    }

    // Constructors --------------------------------------------------------

    pub fn lit(l: Literal) -> Expr {
        Expr::new(ExprKind::Const(l))
    }
    pub fn lit_loss(v: LossVec) -> Expr {
        Expr::lit(Literal::Loss(v))
    }
    pub fn lit_char(c: char) -> Expr {
        Expr::lit(Literal::Char(c))
    }
    pub fn lit_str(s: &str) -> Expr {
        Expr::lit(Literal::Str(Arc::from(s)))
    }
    pub fn var(n: &str) -> Expr {
        Expr::new(ExprKind::Var(name(n)))
    }
    pub fn var_named(n: Name) -> Expr {
        Expr::new(ExprKind::Var(n))
    }
    pub fn lam(l: Lambda) -> Expr {
        Expr::new(ExprKind::Lam(l))
    }
    pub fn app(f: Expr, a: Expr) -> Expr {
        Expr::new(ExprKind::App(f, a))
    }
    pub fn tuple(es: Vec<Expr>) -> Expr {
        Expr::new(ExprKind::Tuple(es))
    }
    pub fn unit() -> Expr {
        Expr::tuple(vec![])
    }
    pub fn proj(e: Expr, i: usize) -> Expr {
        Expr::new(ExprKind::Proj(e, i))
    }
    pub fn inl(l: TypeExpr, r: TypeExpr, e: Expr) -> Expr {
        Expr::new(ExprKind::Inl(l, r, e))
    }
    pub fn inr(l: TypeExpr, r: TypeExpr, e: Expr) -> Expr {
        Expr::new(ExprKind::Inr(l, r, e))
    }
    pub fn bool(b: bool) -> Expr {
        if b {
            Expr::inl(TypeExpr::unit(), TypeExpr::unit(), Expr::unit())
        } else {
            Expr::inr(TypeExpr::unit(), TypeExpr::unit(), Expr::unit())
        }
    }
    pub fn zero() -> Expr {
        Expr::new(ExprKind::Zero)
    }
    pub fn succ(e: Expr) -> Expr {
        Expr::new(ExprKind::Succ(e))
    }
    pub fn nat(n: u64) -> Expr {
        let mut e = Expr::zero();
        for _ in 0..n {
            e = Expr::succ(e);
        }
        e
    }
    pub fn iter(n: Expr, z: Expr, s: Expr) -> Expr {
        Expr::new(ExprKind::Iter(n, z, s))
    }
    pub fn nil(t: TypeExpr) -> Expr {
        Expr::new(ExprKind::Nil(t))
    }
    pub fn cons(h: Expr, t: Expr) -> Expr {
        Expr::new(ExprKind::Cons(h, t))
    }
    pub fn list(elem_ty: TypeExpr, es: Vec<Expr>) -> Expr {
        let mut out = Expr::nil(elem_ty);
        for e in es.into_iter().rev() {
            out = Expr::cons(e, out);
        }
        out
    }
    pub fn fold(l: Expr, z: Expr, c: Expr) -> Expr {
        Expr::new(ExprKind::Fold(l, z, c))
    }
    pub fn prim(n: &str, e: Expr) -> Expr {
        Expr::new(ExprKind::Prim(name(n), e))
    }
    pub fn op_call(op: &str, e: Expr) -> Expr {
        Expr::new(ExprKind::OpCall(name(op), e))
    }
    pub fn loss(e: Expr) -> Expr {
        Expr::new(ExprKind::Loss(e))
    }
    pub fn handle(handler: Arc<Handler>, param: Expr, body: Expr) -> Expr {
        Expr::new(ExprKind::Handle { handler, param, body })
    }
    pub fn then(eff: Effect, left: Expr, cont: LossCont) -> Expr {
        Expr::new(ExprKind::Then { eff, left, cont })
    }
    pub fn glocal(eff: Effect, body: Expr, cont: LossCont) -> Expr {
        Expr::new(ExprKind::GLocal { eff, body, cont })
    }
    pub fn reset(e: Expr) -> Expr {
        Expr::new(ExprKind::Reset(e))
    }
    #[allow(clippy::too_many_arguments)]
    pub fn cases(
        scrut: Expr,
        left_var: Name,
        left_ty: TypeExpr,
        left: Expr,
        right_var: Name,
        right_ty: TypeExpr,
        right: Expr,
    ) -> Expr {
        Expr::new(ExprKind::Cases { scrut, left_var, left_ty, left, right_var, right_ty, right })
    }

    /// `if b then e1 else e2` over the boolean encoding.
    pub fn ite(b: Expr, then_e: Expr, else_e: Expr) -> Expr {
        Expr::cases(
            b,
            name("_t"),
            TypeExpr::unit(),
            then_e,
            name("_f"),
            TypeExpr::unit(),
            else_e,
        )
    }

    // Value predicates -----------------------------------------------------

    /// Values: variables, constants, value tuples, injections/`succ`/`cons`
    /// of values, `zero`, `nil`, and lambdas. Computed at construction.
    pub fn is_value(&self) -> bool {
        self.0.is_value
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self.kind() {
            ExprKind::Inl(l, r, e) if l.is_unit() && r.is_unit() => {
                matches!(e.kind(), ExprKind::Tuple(es) if es.is_empty()).then_some(true)
            }
            ExprKind::Inr(l, r, e) if l.is_unit() && r.is_unit() => {
                matches!(e.kind(), ExprKind::Tuple(es) if es.is_empty()).then_some(false)
            }
            _ => None,
        }
    }

    pub fn as_nat(&self) -> Option<u64> {
        let mut n = 0;
        let mut cur = self;
        loop {
            match cur.kind() {
                ExprKind::Zero => return Some(n),
                ExprKind::Succ(e) => {
                    n += 1;
                    cur = e;
                }
                _ => return None,
            }
        }
    }

    pub fn as_loss(&self) -> Option<&LossVec> {
        match self.kind() {
            ExprKind::Const(Literal::Loss(v)) => Some(v),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Substitution
// ---------------------------------------------------------------------------

static FRESH: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

fn fresh_name(base: &str) -> Name {
    let n = FRESH.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    name(&format!("{base}#{n}"))
}

/// Capture-avoiding substitution `e[v/x]`. Evaluation only ever substitutes
/// closed values, so the renaming path is exercised only by tests that
/// substitute open terms.
pub fn subst(e: &Expr, v: &Expr, x: &Name) -> Expr {
    if !e.has_free(x) {
        return e.clone();
    }
    let sub = |e2: &Expr| subst(e2, v, x);
    let sub_lam = |lam: &Lambda| subst_lambda(lam, v, x);
    match e.kind() {
        ExprKind::Var(n) => {
            if n == x {
                v.clone()
            } else {
                e.clone()
            }
        }
        ExprKind::Const(_) | ExprKind::Zero | ExprKind::Nil(_) => e.clone(),
        ExprKind::Prim(f, a) => Expr::new(ExprKind::Prim(f.clone(), sub(a))),
        ExprKind::Lam(lam) => Expr::lam(sub_lam(lam)),
        ExprKind::App(f, a) => Expr::app(sub(f), sub(a)),
        ExprKind::Tuple(es) => Expr::tuple(es.iter().map(sub).collect()),
        ExprKind::Proj(a, i) => Expr::proj(sub(a), *i),
        ExprKind::Inl(l, r, a) => Expr::inl(l.clone(), r.clone(), sub(a)),
        ExprKind::Inr(l, r, a) => Expr::inr(l.clone(), r.clone(), sub(a)),
        ExprKind::Cases { scrut, left_var, left_ty, left, right_var, right_ty, right } => {
            let (lv, le) = subst_under_binder(left_var, left, v, x);
            let (rv, re) = subst_under_binder(right_var, right, v, x);
            Expr::cases(sub(scrut), lv, left_ty.clone(), le, rv, right_ty.clone(), re)
        }
        ExprKind::Succ(a) => Expr::succ(sub(a)),
        ExprKind::Iter(a, b, c) => Expr::iter(sub(a), sub(b), sub(c)),
        ExprKind::Cons(a, b) => Expr::cons(sub(a), sub(b)),
        ExprKind::Fold(a, b, c) => Expr::fold(sub(a), sub(b), sub(c)),
        ExprKind::OpCall(op, a) => Expr::new(ExprKind::OpCall(op.clone(), sub(a))),
        ExprKind::Loss(a) => Expr::loss(sub(a)),
        ExprKind::Handle { handler, param, body } => {
            let h = Handler {
                label: handler.label.clone(),
                param_ty: handler.param_ty.clone(),
                op_clauses: handler
                    .op_clauses
                    .iter()
                    .map(|(n, cl)| (n.clone(), sub_lam(cl)))
                    .collect(),
                return_clause: sub_lam(&handler.return_clause),
                result_eff: handler.result_eff.clone(),
            };
            Expr::handle(Arc::new(h), sub(param), sub(body))
        }
        ExprKind::Then { eff, left, cont } => {
            Expr::then(eff.clone(), sub(left), subst_losscont(cont, v, x))
        }
        ExprKind::GLocal { eff, body, cont } => {
            Expr::glocal(eff.clone(), sub(body), subst_losscont(cont, v, x))
        }
        ExprKind::Reset(a) => Expr::reset(sub(a)),
    }
}

fn subst_under_binder(binder: &Name, body: &Expr, v: &Expr, x: &Name) -> (Name, Expr) {
    if binder == x || !body.has_free(x) {
        return (binder.clone(), body.clone());
    }
    if v.has_free(binder) {
        let fresh = fresh_name(binder);
        let renamed = subst(body, &Expr::var_named(fresh.clone()), binder);
        (fresh, subst(&renamed, v, x))
    } else {
        (binder.clone(), subst(body, v, x))
    }
}

fn subst_lambda(lam: &Lambda, v: &Expr, x: &Name) -> Lambda {
    let (var, body) = subst_under_binder(&lam.var, &lam.body, v, x);
    Lambda::new(lam.eff.clone(), var, lam.var_ty.clone(), body)
}

fn subst_losscont(c: &LossCont, v: &Expr, x: &Name) -> LossCont {
    match c {
        LossCont::Zero { .. } => c.clone(),
        LossCont::Extend { eff, var, var_ty, body, rest } => {
            let rest2 = subst_losscont(rest, v, x);
            let (var2, body2) = if var == x {
                (var.clone(), body.clone())
            } else {
                subst_under_binder(var, body, v, x)
            };
            LossCont::Extend {
                eff: eff.clone(),
                var: var2,
                var_ty: var_ty.clone(),
                body: body2,
                rest: Arc::new(rest2),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Frames, contexts, and expression analysis
// ---------------------------------------------------------------------------

/// A regular frame `F`: one evaluation position with everything around it.
/// `plug` restores the original expression.
#[derive(Clone, Debug, PartialEq)]
pub enum RegFrame {
    Prim(Name),
    /// Tuple with an evaluated prefix: `(v1, …, vk, □, e_{k+2}, …, en)`.
    Tuple(Vec<Expr>, Vec<Expr>),
    Proj(usize),
    Inl(TypeExpr, TypeExpr),
    Inr(TypeExpr, TypeExpr),
    Cases {
        left_var: Name,
        left_ty: TypeExpr,
        left: Expr,
        right_var: Name,
        right_ty: TypeExpr,
        right: Expr,
    },
    Succ,
    Iter1(Expr, Expr),
    Iter2(Expr, Expr),
    Iter3(Expr, Expr),
    Cons1(Expr),
    Cons2(Expr),
    Fold1(Expr, Expr),
    Fold2(Expr, Expr),
    Fold3(Expr, Expr),
    /// `□ e`
    AppFn(Expr),
    /// `v □`
    AppArg(Expr),
    OpArg(Name),
    Loss,
    /// `handle h ⟨□⟩ body`: the handler parameter position.
    HandleParam(Arc<Handler>, Expr),
}

impl RegFrame {
    pub fn plug(&self, e: Expr) -> Expr {
        match self {
            RegFrame::Prim(f) => Expr::new(ExprKind::Prim(f.clone(), e)),
            RegFrame::Tuple(before, after) => {
                let mut es = before.clone();
                es.push(e);
                es.extend(after.iter().cloned());
                Expr::tuple(es)
            }
            RegFrame::Proj(i) => Expr::proj(e, *i),
            RegFrame::Inl(l, r) => Expr::inl(l.clone(), r.clone(), e),
            RegFrame::Inr(l, r) => Expr::inr(l.clone(), r.clone(), e),
            RegFrame::Cases { left_var, left_ty, left, right_var, right_ty, right } => {
                Expr::cases(
                    e,
                    left_var.clone(),
                    left_ty.clone(),
                    left.clone(),
                    right_var.clone(),
                    right_ty.clone(),
                    right.clone(),
                )
            }
            RegFrame::Succ => Expr::succ(e),
            RegFrame::Iter1(b, c) => Expr::iter(e, b.clone(), c.clone()),
            RegFrame::Iter2(a, c) => Expr::iter(a.clone(), e, c.clone()),
            RegFrame::Iter3(a, b) => Expr::iter(a.clone(), b.clone(), e),
            RegFrame::Cons1(t) => Expr::cons(e, t.clone()),
            RegFrame::Cons2(h) => Expr::cons(h.clone(), e),
            RegFrame::Fold1(b, c) => Expr::fold(e, b.clone(), c.clone()),
            RegFrame::Fold2(a, c) => Expr::fold(a.clone(), e, c.clone()),
            RegFrame::Fold3(a, b) => Expr::fold(a.clone(), b.clone(), e),
            RegFrame::AppFn(arg) => Expr::app(e, arg.clone()),
            RegFrame::AppArg(f) => Expr::app(f.clone(), e),
            RegFrame::OpArg(op) => Expr::new(ExprKind::OpCall(op.clone(), e)),
            RegFrame::Loss => Expr::loss(e),
            RegFrame::HandleParam(h, body) => Expr::handle(h.clone(), e, body.clone()),
        }
    }
}

/// A special frame `S`: the positions that adjust the loss continuation.
#[derive(Clone, Debug, PartialEq)]
pub enum SpecFrame {
    /// `handle h ⟨v⟩ □` with an evaluated parameter.
    HandleBody(Arc<Handler>, Expr),
    /// `□ ▷ λ^ε x:σ. e`
    ThenLeft(Effect, LossCont),
    /// `local^ε(□, γ)`
    GLocal(Effect, LossCont),
    Reset,
}

impl SpecFrame {
    pub fn plug(&self, e: Expr) -> Expr {
        match self {
            SpecFrame::HandleBody(h, v) => Expr::handle(h.clone(), v.clone(), e),
            SpecFrame::ThenLeft(eff, lam) => Expr::then(eff.clone(), e, lam.clone()),
            SpecFrame::GLocal(eff, cont) => Expr::glocal(eff.clone(), e, cont.clone()),
            SpecFrame::Reset => Expr::reset(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Reg(RegFrame),
    Spec(SpecFrame),
}

impl Frame {
    pub fn plug(&self, e: Expr) -> Expr {
        match self {
            Frame::Reg(f) => f.plug(e),
            Frame::Spec(s) => s.plug(e),
        }
    }
}

impl From<RegFrame> for Frame {
    fn from(f: RegFrame) -> Frame {
        Frame::Reg(f)
    }
}

impl From<SpecFrame> for Frame {
    fn from(f: SpecFrame) -> Frame {
        Frame::Spec(f)
    }
}

/// A continuation context `K ::= □ | F[K] | S[K]`, stored outermost-first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContContext {
    pub frames: Vec<Frame>,
}

impl ContContext {
    pub fn hole() -> Self {
        ContContext::default()
    }

    pub fn is_hole(&self) -> bool {
        self.frames.is_empty()
    }

    /// `K[e]`: fill the hole.
    pub fn plug(&self, e: Expr) -> Expr {
        let mut out = e;
        for f in self.frames.iter().rev() {
            out = f.plug(out);
        }
        out
    }

    /// `h_eff(K)`: the multiset of effect labels the context's handle frames
    /// handle.
    pub fn handled_eff(&self) -> Effect {
        let mut eff = Effect::empty();
        for f in &self.frames {
            if let Frame::Spec(SpecFrame::HandleBody(h, _)) = f {
                eff.add(&h.label, 1);
            }
        }
        eff
    }

    /// `h_op(K)`: the operations belonging to any handled label.
    pub fn handled_ops(&self, sig: &Signature) -> Vec<Name> {
        let eff = self.handled_eff();
        let mut out = Vec::new();
        for l in eff.labels() {
            if let Some(ops) = sig.ops_of(l) {
                out.extend(ops.iter().map(|o| o.name.clone()));
            }
        }
        out
    }

    pub fn handles_op(&self, sig: &Signature, op: &str) -> bool {
        match sig.lookup_op(op) {
            Some(o) => self.handled_eff().contains(&o.label),
            None => false,
        }
    }
}

/// The five mutually exclusive shapes of a closed expression.
#[derive(Clone, Debug)]
pub enum ExprForm {
    IsValue(Expr),
    /// `K[op(v)]` with `op` unhandled by `K`.
    IsStuck(ContContext, Name, Expr),
    IsRedex(RedexTag),
    InRegularFrame(RegFrame, Expr),
    InSpecialFrame(SpecFrame, Expr),
}

/// Which reduction rule a redex fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedexTag {
    Prim,
    Proj,
    CasesInl,
    CasesInr,
    IterZero,
    IterSucc,
    FoldNil,
    FoldCons,
    Beta,
    Loss,
    HandleOp,
    HandleReturn,
    ThenValue,
    GLocalValue,
    ResetValue,
}

// One analysis of the sub-expression decides the enclosing form: a terminal
// child completes a redex or extends the stuck context, an active child puts
// the expression in a frame. `on_value` is `None` at positions where a value
// child is impossible (the whole expression would itself be a value).
fn place(frame: Frame, inner: &Expr, sig: &Signature, on_value: Option<RedexTag>) -> ExprForm {
    if inner.is_value() {
        return ExprForm::IsRedex(on_value.expect("value child at a non-redex position"));
    }
    match analyze(inner, sig) {
        ExprForm::IsStuck(k, op, v) => {
            let mut frames = Vec::with_capacity(k.frames.len() + 1);
            frames.push(frame);
            frames.extend(k.frames);
            ExprForm::IsStuck(ContContext { frames }, op, v)
        }
        _ => match frame {
            Frame::Reg(rf) => ExprForm::InRegularFrame(rf, inner.clone()),
            Frame::Spec(sf) => ExprForm::InSpecialFrame(sf, inner.clone()),
        },
    }
}

fn redex_when_value(frame: Frame, inner: &Expr, sig: &Signature, tag: RedexTag) -> ExprForm {
    place(frame, inner, sig, Some(tag))
}

fn frame_when_value(frame: Frame, inner: &Expr, sig: &Signature) -> ExprForm {
    place(frame, inner, sig, None)
}

/// Decompose a closed expression into exactly one of the five forms.
///
/// An operation call with an evaluated argument is stuck relative to the
/// context built so far; a handle frame above it either handles it (making
/// the handle expression a redex) or extends the stuck context.
pub fn analyze(e: &Expr, sig: &Signature) -> ExprForm {
    if e.is_value() {
        return ExprForm::IsValue(e.clone());
    }
    match e.kind() {
        ExprKind::Const(_) | ExprKind::Var(_) | ExprKind::Lam(_) | ExprKind::Zero
        | ExprKind::Nil(_) => unreachable!("values are handled above"),
        ExprKind::Prim(f, a) => {
            redex_when_value(RegFrame::Prim(f.clone()).into(), a, sig, RedexTag::Prim)
        }
        ExprKind::Proj(a, i) => {
            redex_when_value(RegFrame::Proj(*i).into(), a, sig, RedexTag::Proj)
        }
        ExprKind::Inl(l, r, a) => {
            frame_when_value(RegFrame::Inl(l.clone(), r.clone()).into(), a, sig)
        }
        ExprKind::Inr(l, r, a) => {
            frame_when_value(RegFrame::Inr(l.clone(), r.clone()).into(), a, sig)
        }
        ExprKind::Succ(a) => frame_when_value(RegFrame::Succ.into(), a, sig),
        ExprKind::Loss(a) => redex_when_value(RegFrame::Loss.into(), a, sig, RedexTag::Loss),
        ExprKind::OpCall(op, a) => {
            if a.is_value() {
                // `op(v)` alone is stuck at the empty context.
                return ExprForm::IsStuck(ContContext::hole(), op.clone(), a.clone());
            }
            frame_when_value(RegFrame::OpArg(op.clone()).into(), a, sig)
        }
        ExprKind::Cases { scrut, left_var, left_ty, left, right_var, right_ty, right } => {
            let tag = match scrut.kind() {
                ExprKind::Inr(..) => RedexTag::CasesInr,
                _ => RedexTag::CasesInl,
            };
            let frame = RegFrame::Cases {
                left_var: left_var.clone(),
                left_ty: left_ty.clone(),
                left: left.clone(),
                right_var: right_var.clone(),
                right_ty: right_ty.clone(),
                right: right.clone(),
            };
            redex_when_value(frame.into(), scrut, sig, tag)
        }
        ExprKind::Tuple(es) => {
            let k = es.iter().position(|e| !e.is_value()).expect("tuple is not a value");
            let frame = RegFrame::Tuple(es[..k].to_vec(), es[k + 1..].to_vec());
            frame_when_value(frame.into(), &es[k], sig)
        }
        ExprKind::App(f, a) => {
            if !f.is_value() {
                frame_when_value(RegFrame::AppFn(a.clone()).into(), f, sig)
            } else {
                redex_when_value(RegFrame::AppArg(f.clone()).into(), a, sig, RedexTag::Beta)
            }
        }
        ExprKind::Iter(a, b, c) => {
            if !a.is_value() {
                frame_when_value(RegFrame::Iter1(b.clone(), c.clone()).into(), a, sig)
            } else if !b.is_value() {
                frame_when_value(RegFrame::Iter2(a.clone(), c.clone()).into(), b, sig)
            } else {
                let tag = if matches!(a.kind(), ExprKind::Zero) {
                    RedexTag::IterZero
                } else {
                    RedexTag::IterSucc
                };
                redex_when_value(RegFrame::Iter3(a.clone(), b.clone()).into(), c, sig, tag)
            }
        }
        ExprKind::Cons(h, t) => {
            if !h.is_value() {
                frame_when_value(RegFrame::Cons1(t.clone()).into(), h, sig)
            } else {
                frame_when_value(RegFrame::Cons2(h.clone()).into(), t, sig)
            }
        }
        ExprKind::Fold(a, b, c) => {
            if !a.is_value() {
                frame_when_value(RegFrame::Fold1(b.clone(), c.clone()).into(), a, sig)
            } else if !b.is_value() {
                frame_when_value(RegFrame::Fold2(a.clone(), c.clone()).into(), b, sig)
            } else {
                let tag = if matches!(a.kind(), ExprKind::Nil(_)) {
                    RedexTag::FoldNil
                } else {
                    RedexTag::FoldCons
                };
                redex_when_value(RegFrame::Fold3(a.clone(), b.clone()).into(), c, sig, tag)
            }
        }
        ExprKind::Handle { handler, param, body } => {
            if !param.is_value() {
                return frame_when_value(
                    RegFrame::HandleParam(handler.clone(), body.clone()).into(),
                    param,
                    sig,
                );
            }
            let frame = SpecFrame::HandleBody(handler.clone(), param.clone());
            if body.is_value() {
                return ExprForm::IsRedex(RedexTag::HandleReturn);
            }
            match analyze(body, sig) {
                ExprForm::IsStuck(k, op, v) => {
                    if handler.handles(sig, &op) {
                        ExprForm::IsRedex(RedexTag::HandleOp)
                    } else {
                        let mut frames = Vec::with_capacity(k.frames.len() + 1);
                        frames.push(frame.into());
                        frames.extend(k.frames);
                        ExprForm::IsStuck(ContContext { frames }, op, v)
                    }
                }
                _ => ExprForm::InSpecialFrame(frame, body.clone()),
            }
        }
        ExprKind::Then { eff, left, cont } => {
            let frame = SpecFrame::ThenLeft(eff.clone(), cont.clone());
            redex_when_value(frame.into(), left, sig, RedexTag::ThenValue)
        }
        ExprKind::GLocal { eff, body, cont } => {
            let frame = SpecFrame::GLocal(eff.clone(), cont.clone());
            redex_when_value(frame.into(), body, sig, RedexTag::GLocalValue)
        }
        ExprKind::Reset(a) => {
            redex_when_value(SpecFrame::Reset.into(), a, sig, RedexTag::ResetValue)
        }
    }
}

/// Whether `e` is a stuck expression `K[op(v)]` with `op ∉ h_op(K)`.
pub fn is_stuck(e: &Expr, sig: &Signature) -> bool {
    matches!(analyze(e, sig), ExprForm::IsStuck(..))
}

/// Terminal expressions are values and stuck expressions.
pub fn is_terminal(e: &Expr, sig: &Signature) -> bool {
    e.is_value() || is_stuck(e, sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(x: f64) -> Expr {
        Expr::lit_loss(LossVec::scalar(x, 1))
    }

    #[test]
    fn substitution_examples() {
        let x = name("x");
        // Identity substitution.
        assert_eq!(subst(&Expr::var("x"), &Expr::lit_char('a'), &x), Expr::lit_char('a'));
        // Shadowed binders stay untouched.
        let lam = Expr::lam(Lambda::new(
            Effect::empty(),
            x.clone(),
            TypeExpr::loss(),
            Expr::var("x"),
        ));
        assert_eq!(subst(&lam, &lv(3.0), &x), lam);
        // A single free occurrence.
        assert_eq!(
            subst(&Expr::loss(Expr::var("x")), &lv(2.0), &x),
            Expr::loss(lv(2.0))
        );
    }

    #[test]
    fn capture_avoidance_renames() {
        // (λy. x) with x := y must not capture.
        let lam = Lambda::new(Effect::empty(), name("y"), TypeExpr::loss(), Expr::var("x"));
        let out = subst(&Expr::lam(lam), &Expr::var("y"), &name("x"));
        match out.kind() {
            ExprKind::Lam(l) => {
                assert_ne!(&*l.var, "y");
                assert_eq!(l.body, Expr::var("y"));
            }
            k => panic!("expected a lambda, found {k:?}"),
        }
    }

    #[test]
    fn effects_are_multisets() {
        let a = EffectLabel::new("a");
        let b = EffectLabel::new("b");
        let mut e1 = Effect::singleton(a.clone());
        e1.add(&a, 1);
        let e2 = Effect::from_labels([a.clone(), b.clone()]);
        let u = e1.union(&e2);
        assert_eq!(u.count(&a), 3);
        assert_eq!(u.count(&b), 1);
        assert!(Effect::singleton(a.clone()).sub(&e1));
        assert!(!e1.sub(&Effect::singleton(a)));
        assert_eq!(u.total(), 4);
    }

    #[test]
    fn handled_ops_examples() {
        let g = crate::eval::tests::ndet_globals();
        // The empty context handles nothing.
        assert!(ContContext::hole().handled_ops(&g.signature).is_empty());
        // A handle frame contributes its label's operations.
        let h = crate::eval::tests::hmin();
        let mut ctx = ContContext::hole();
        ctx.frames.push(Frame::Spec(SpecFrame::HandleBody(h, Expr::unit())));
        let ops = ctx.handled_ops(&g.signature);
        assert_eq!(ops.len(), 1);
        assert_eq!(&*ops[0], "decide");
        // Special non-handle frames contribute nothing.
        let mut ctx = ContContext::hole();
        ctx.frames.push(Frame::Spec(SpecFrame::Reset));
        assert!(ctx.handled_ops(&g.signature).is_empty());
    }

    #[test]
    fn plug_examples() {
        let e = Expr::op_call("decide", Expr::unit());
        assert_eq!(ContContext::hole().plug(e.clone()), e);
        let mut ctx = ContContext::hole();
        ctx.frames.push(Frame::Reg(RegFrame::Loss));
        assert_eq!(ctx.plug(lv(2.0)), Expr::loss(lv(2.0)));
    }

    #[test]
    fn analysis_examples() {
        let g = crate::eval::tests::ndet_globals();
        // Constants are values.
        assert!(matches!(analyze(&Expr::lit_char('a'), &g.signature), ExprForm::IsValue(_)));
        // An unhandled operation is stuck at the empty context.
        match analyze(&Expr::op_call("decide", Expr::unit()), &g.signature) {
            ExprForm::IsStuck(k, op, v) => {
                assert!(k.is_hole());
                assert_eq!(&*op, "decide");
                assert_eq!(v, Expr::unit());
            }
            f => panic!("expected stuck, found {f:?}"),
        }
        // A value applied to a value is a beta redex.
        let id = Expr::lam(Lambda::new(
            Effect::empty(),
            name("x"),
            TypeExpr::loss(),
            Expr::var("x"),
        ));
        assert!(matches!(
            analyze(&Expr::app(id, lv(2.0)), &g.signature),
            ExprForm::IsRedex(RedexTag::Beta)
        ));
    }

    #[test]
    fn losscont_round_trip() {
        let zero = LossCont::zero(Effect::empty(), TypeExpr::char());
        let as_lam = zero.to_lambda(1);
        assert_eq!(LossCont::from_lambda(&as_lam), Some(zero.clone()));

        let ext = LossCont::Extend {
            eff: Effect::empty(),
            var: name("v"),
            var_ty: TypeExpr::char(),
            body: Expr::loss(lv(1.0)),
            rest: Arc::new(LossCont::zero(Effect::empty(), TypeExpr::unit())),
        };
        let as_lam = ext.to_lambda(1);
        assert_eq!(LossCont::from_lambda(&as_lam), Some(ext));
    }
}
