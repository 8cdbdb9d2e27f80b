//! The selection-monad denotational semantics.
//!
//! Computations denote selection functions `S_ε(X) = (X → R_ε) → W_ε(X)`
//! where `R_ε = F_ε(R)` and `W_ε(X) = F_ε(R × X)` are free-algebra effect
//! trees over the loss monoid. Tree children are demand-computed functions
//! (semantic in-types can be infinite), so equality testing is probe-based
//! and lives in the conformance layer.
//!
//! The semantics is only defined for well-founded signatures; the checked
//! entry points refuse anything else. The recursive interpreters assume
//! type-checked input and treat shape mismatches as bugs.

use std::fmt;
use std::sync::Arc;

use crate::prims::prim_eval;
use crate::syntax::{
    Effect, EffectLabel, Expr, ExprKind, Globals, Handler, Lambda, Literal, LossCont, LossVec,
    Name, TypeExpr,
};
use crate::types::{check_wellfounded, CycleWitness};

// ---------------------------------------------------------------------------
// Semantic values
// ---------------------------------------------------------------------------

pub type FnSem = Arc<dyn Fn(&SemValue) -> SelComp + Send + Sync>;

#[derive(Clone)]
pub enum SemValue {
    ConstV(Literal),
    TupleV(Vec<SemValue>),
    /// `inl` is side 0, `inr` side 1.
    TagV(u8, Arc<SemValue>),
    NatV(u64),
    ListV(Vec<SemValue>),
    FnV(FnSem),
}

impl SemValue {
    pub fn unit() -> SemValue {
        SemValue::TupleV(vec![])
    }

    pub fn bool(b: bool) -> SemValue {
        SemValue::TagV(if b { 0 } else { 1 }, Arc::new(SemValue::unit()))
    }

    pub fn loss(v: LossVec) -> SemValue {
        SemValue::ConstV(Literal::Loss(v))
    }

    pub fn as_loss(&self) -> Option<&LossVec> {
        match self {
            SemValue::ConstV(Literal::Loss(v)) => Some(v),
            _ => None,
        }
    }

    pub fn apply(&self, arg: &SemValue) -> SelComp {
        match self {
            SemValue::FnV(f) => f(arg),
            _ => panic!("applied a non-function semantic value"),
        }
    }

    pub fn is_first_order(&self) -> bool {
        match self {
            SemValue::ConstV(_) | SemValue::NatV(_) => true,
            SemValue::TupleV(vs) | SemValue::ListV(vs) => {
                vs.iter().all(|v| v.is_first_order())
            }
            SemValue::TagV(_, v) => v.is_first_order(),
            SemValue::FnV(_) => false,
        }
    }

    /// Componentwise comparison with a per-loss-component tolerance; `None`
    /// when a function value makes the comparison meaningless.
    pub fn approx_eq(&self, other: &SemValue, tol: f64) -> Option<bool> {
        match (self, other) {
            (SemValue::ConstV(Literal::Loss(a)), SemValue::ConstV(Literal::Loss(b))) => {
                Some(a.approx_eq(b, tol))
            }
            (SemValue::ConstV(a), SemValue::ConstV(b)) => Some(a == b),
            (SemValue::NatV(a), SemValue::NatV(b)) => Some(a == b),
            (SemValue::TagV(s, a), SemValue::TagV(t, b)) => {
                if s != t {
                    Some(false)
                } else {
                    a.approx_eq(b, tol)
                }
            }
            (SemValue::TupleV(a), SemValue::TupleV(b))
            | (SemValue::ListV(a), SemValue::ListV(b)) => {
                if a.len() != b.len() {
                    return Some(false);
                }
                for (x, y) in a.iter().zip(b.iter()) {
                    match x.approx_eq(y, tol) {
                        Some(true) => {}
                        other => return other,
                    }
                }
                Some(true)
            }
            (SemValue::FnV(_), _) | (_, SemValue::FnV(_)) => None,
            _ => Some(false),
        }
    }

    /// Convert a first-order semantic value back into a syntactic value.
    /// The element type pins `nil`'s annotation.
    pub fn to_expr(&self, ty: &TypeExpr) -> Option<Expr> {
        use crate::syntax::TypeNode;
        match (self, ty.node()) {
            (SemValue::ConstV(l), _) => Some(Expr::lit(l.clone())),
            (SemValue::NatV(n), _) => Some(Expr::nat(*n)),
            (SemValue::TupleV(vs), TypeNode::Product(ts)) if vs.len() == ts.len() => {
                let es = vs
                    .iter()
                    .zip(ts.iter())
                    .map(|(v, t)| v.to_expr(t))
                    .collect::<Option<Vec<_>>>()?;
                Some(Expr::tuple(es))
            }
            (SemValue::TagV(0, v), TypeNode::Sum(l, r)) => {
                Some(Expr::inl(l.clone(), r.clone(), v.to_expr(l)?))
            }
            (SemValue::TagV(_, v), TypeNode::Sum(l, r)) => {
                Some(Expr::inr(l.clone(), r.clone(), v.to_expr(r)?))
            }
            (SemValue::ListV(vs), TypeNode::List(t)) => {
                let es = vs.iter().map(|v| v.to_expr(t)).collect::<Option<Vec<_>>>()?;
                Some(Expr::list(t.clone(), es))
            }
            _ => None,
        }
    }
}

impl fmt::Debug for SemValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemValue::ConstV(Literal::Loss(v)) => write!(f, "{v}"),
            SemValue::ConstV(Literal::Char(c)) => write!(f, "'{c}'"),
            SemValue::ConstV(Literal::Str(s)) => write!(f, "{s:?}"),
            SemValue::TupleV(vs) => {
                write!(f, "(")?;
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v:?}")?;
                }
                write!(f, ")")
            }
            SemValue::TagV(0, v) => write!(f, "inl {v:?}"),
            SemValue::TagV(_, v) => write!(f, "inr {v:?}"),
            SemValue::NatV(n) => write!(f, "{n}"),
            SemValue::ListV(vs) => f.debug_list().entries(vs.iter().map(|v| format!("{v:?}"))).finish(),
            SemValue::FnV(_) => write!(f, "<fn>"),
        }
    }
}

// ---------------------------------------------------------------------------
// Effect trees
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeTag {
    pub label: EffectLabel,
    pub op: Name,
    /// Handler execution depth index: `0 < idx ≤ ε(label)`.
    pub idx: u32,
}

pub type Children<X> = Arc<dyn Fn(&SemValue) -> Tree<X> + Send + Sync>;

/// A free-algebra effect tree: leaves carry results, nodes carry an
/// operation call with demand-computed children per in-value.
#[derive(Clone)]
pub enum Tree<X> {
    Leaf(X),
    Node { tag: NodeTag, out: SemValue, children: Children<X> },
}

pub type RTree = Tree<LossVec>;
pub type WLeaf = (LossVec, SemValue);
pub type WTree = Tree<WLeaf>;

impl<X: Clone + Send + Sync + 'static> Tree<X> {
    pub fn map_leaves(
        &self,
        f: Arc<dyn Fn(&X) -> X + Send + Sync>,
    ) -> Tree<X> {
        self.extend(Arc::new({
            let f = f.clone();
            move |x: &X| Tree::Leaf(f(x))
        }))
    }

    /// Homomorphic extension into trees: leaves mapped by `f`, nodes rebuilt
    /// structurally with extended children.
    pub fn extend<Y: Clone + Send + Sync + 'static>(
        &self,
        f: Arc<dyn Fn(&X) -> Tree<Y> + Send + Sync>,
    ) -> Tree<Y> {
        match self {
            Tree::Leaf(x) => f(x),
            Tree::Node { tag, out, children } => {
                let children = children.clone();
                Tree::Node {
                    tag: tag.clone(),
                    out: out.clone(),
                    children: Arc::new(move |v| children(v).extend(f.clone())),
                }
            }
        }
    }

    /// Homomorphic extension into an arbitrary carrier: the node clause sees
    /// the tag, the out-value, and the already-extended children.
    pub fn extend_into<A: 'static>(
        &self,
        leaf: Arc<dyn Fn(&X) -> A + Send + Sync>,
        node: Arc<dyn Fn(&NodeTag, &SemValue, Arc<dyn Fn(&SemValue) -> A + Send + Sync>) -> A + Send + Sync>,
    ) -> A {
        match self {
            Tree::Leaf(x) => leaf(x),
            Tree::Node { tag, out, children } => {
                let children = children.clone();
                let leaf2 = leaf.clone();
                let node2 = node.clone();
                let kids: Arc<dyn Fn(&SemValue) -> A + Send + Sync> =
                    Arc::new(move |v| children(v).extend_into(leaf2.clone(), node2.clone()));
                node(tag, out, kids)
            }
        }
    }
}

impl<X: fmt::Debug> fmt::Debug for Tree<X> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tree::Leaf(x) => write!(f, "Leaf({x:?})"),
            Tree::Node { tag, out, .. } => {
                write!(f, "Node({:?}.{}#{}, {out:?}, ..)", tag.label, tag.op, tag.idx)
            }
        }
    }
}

/// The additive action on writer trees: add `r` at every leaf's loss.
pub fn w_action(r: &LossVec, t: &WTree) -> WTree {
    if r.is_zero() {
        return t.clone();
    }
    let r = r.clone();
    t.map_leaves(Arc::new(move |(s, x): &WLeaf| (r.add(s), x.clone())))
}

/// The additive action on loss trees.
pub fn r_action(r: &LossVec, t: &RTree) -> RTree {
    if r.is_zero() {
        return t.clone();
    }
    let r = r.clone();
    t.map_leaves(Arc::new(move |s: &LossVec| r.add(s)))
}

// ---------------------------------------------------------------------------
// The augmented selection monad
// ---------------------------------------------------------------------------

pub type LossFn = Arc<dyn Fn(&SemValue) -> RTree + Send + Sync>;

/// A denotational computation: a function from loss functions to writer
/// trees.
#[derive(Clone)]
pub struct SelComp(Arc<dyn Fn(&LossFn) -> WTree + Send + Sync>);

impl SelComp {
    pub fn new(f: impl Fn(&LossFn) -> WTree + Send + Sync + 'static) -> Self {
        SelComp(Arc::new(f))
    }

    pub fn run(&self, gamma: &LossFn) -> WTree {
        (self.0)(gamma)
    }
}

/// The constant-zero loss function.
pub fn zero_loss_fn(dim: usize) -> LossFn {
    Arc::new(move |_| Tree::Leaf(LossVec::zero(dim)))
}

/// `η(x) = λγ. (0, x)`.
pub fn sel_unit(x: SemValue, dim: usize) -> SelComp {
    SelComp::new(move |_| Tree::Leaf((LossVec::zero(dim), x.clone())))
}

/// `γ†` on writer trees: `γ†(r, x) = r · γ(x)`, nodes rebuilt.
pub fn w_extend(gamma: &LossFn, t: &WTree) -> RTree {
    let gamma = gamma.clone();
    t.extend(Arc::new(move |(r, x): &WLeaf| r_action(r, &gamma(x))))
}

/// The loss associated to a computation: `ER(F, γ) = γ†(F(γ))`.
pub fn er(comp: &SelComp, gamma: &LossFn) -> RTree {
    w_extend(gamma, &comp.run(gamma))
}

/// Kleisli extension: run `F` against the transformed loss function
/// `λx. ER(f x, γ)`, then continue each leaf with `f x γ`, accumulating the
/// already-produced loss through the writer action.
pub fn sel_bind(comp: SelComp, f: FnSem) -> SelComp {
    SelComp::new(move |gamma: &LossFn| {
        let gamma2: LossFn = {
            let f = f.clone();
            let gamma = gamma.clone();
            Arc::new(move |x: &SemValue| er(&f(x), &gamma))
        };
        let t = comp.run(&gamma2);
        let f = f.clone();
        let gamma = gamma.clone();
        t.extend(Arc::new(move |(r, x): &WLeaf| w_action(r, &f(x).run(&gamma))))
    })
}

/// `δ_ε : F_ε(R) → F_ε(R × R)`, sending `r` to `(0, r)`.
pub fn delta(t: &RTree, dim: usize) -> WTree {
    t.extend(Arc::new(move |r: &LossVec| {
        Tree::Leaf((LossVec::zero(dim), SemValue::loss(r.clone())))
    }))
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

#[derive(Clone, Default)]
pub struct Env {
    bindings: Vec<(Name, SemValue)>,
}

impl Env {
    pub fn empty() -> Env {
        Env::default()
    }

    pub fn bind(&self, x: Name, v: SemValue) -> Env {
        let mut out = self.clone();
        out.bindings.push((x, v));
        out
    }

    pub fn lookup(&self, x: &str) -> Option<&SemValue> {
        self.bindings.iter().rev().find(|(n, _)| &**n == x).map(|(_, v)| v)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DenoteError {
    #[error("signature is not well-founded: cycle {0}")]
    NotWellFounded(CycleWitness),
}

// ---------------------------------------------------------------------------
// Denotation of values, loss functions, expressions, and handlers
// ---------------------------------------------------------------------------

/// Value semantics `V⟦v⟧`.
pub fn denote_value(env: &Env, v: &Expr, globals: &Globals) -> SemValue {
    match v.kind() {
        ExprKind::Var(x) => env
            .lookup(x)
            .unwrap_or_else(|| panic!("unbound variable {x} in value denotation"))
            .clone(),
        ExprKind::Const(l) => SemValue::ConstV(l.clone()),
        ExprKind::Tuple(es) => {
            SemValue::TupleV(es.iter().map(|e| denote_value(env, e, globals)).collect())
        }
        ExprKind::Inl(_, _, e) => SemValue::TagV(0, Arc::new(denote_value(env, e, globals))),
        ExprKind::Inr(_, _, e) => SemValue::TagV(1, Arc::new(denote_value(env, e, globals))),
        ExprKind::Zero => SemValue::NatV(0),
        ExprKind::Succ(e) => match denote_value(env, e, globals) {
            SemValue::NatV(n) => SemValue::NatV(n + 1),
            _ => panic!("succ of a non-numeral value"),
        },
        ExprKind::Nil(_) => SemValue::ListV(vec![]),
        ExprKind::Cons(h, t) => {
            let hv = denote_value(env, h, globals);
            match denote_value(env, t, globals) {
                SemValue::ListV(mut vs) => {
                    vs.insert(0, hv);
                    SemValue::ListV(vs)
                }
                _ => panic!("cons onto a non-list value"),
            }
        }
        ExprKind::Lam(lam) => denote_lambda(env, lam, globals),
        _ => panic!("denote_value applied to a non-value"),
    }
}

fn denote_lambda(env: &Env, lam: &Lambda, globals: &Globals) -> SemValue {
    let env = env.clone();
    let lam = lam.clone();
    let globals = globals.clone();
    SemValue::FnV(Arc::new(move |a: &SemValue| {
        denote_expr(&env.bind(lam.var.clone(), a.clone()), &lam.body, &lam.eff, &globals)
    }))
}

/// The auxiliary loss-function semantics `L⟦λ^ε x:σ. e⟧`: run the body under
/// the constant-zero loss function, keep the returned loss value, and
/// discard the accumulated writer loss.
pub fn denote_loss_lambda(env: &Env, lam: &Lambda, globals: &Globals) -> LossFn {
    let env = env.clone();
    let lam = lam.clone();
    let globals = globals.clone();
    let dim = globals.loss_dim;
    Arc::new(move |a: &SemValue| {
        let comp =
            denote_expr(&env.bind(lam.var.clone(), a.clone()), &lam.body, &lam.eff, &globals);
        let t = comp.run(&zero_loss_fn(dim));
        t.extend(Arc::new(|(_r1, r2): &WLeaf| {
            let v = r2.as_loss().expect("loss-typed body returned a non-loss");
            Tree::Leaf(v.clone())
        }))
    })
}

/// `L⟦γ⟧` for a loss continuation.
pub fn denote_losscont(env: &Env, cont: &LossCont, globals: &Globals) -> LossFn {
    match cont {
        LossCont::Zero { .. } => zero_loss_fn(globals.loss_dim),
        LossCont::Extend { .. } => {
            denote_loss_lambda(env, &cont.to_lambda(globals.loss_dim), globals)
        }
    }
}

/// Expression semantics `⟦e⟧ : Env → S_ε(⟦σ⟧)`; `eff` is the ambient effect
/// of the judgment, which fixes operation depth indices.
pub fn denote_expr(env: &Env, e: &Expr, eff: &Effect, globals: &Globals) -> SelComp {
    let dim = globals.loss_dim;
    if e.is_value() {
        return sel_unit(denote_value(env, e, globals), dim);
    }
    match e.kind() {
        ExprKind::Const(_)
        | ExprKind::Var(_)
        | ExprKind::Lam(_)
        | ExprKind::Zero
        | ExprKind::Nil(_) => unreachable!("values are handled above"),
        ExprKind::Prim(f, a) => {
            let f = f.clone();
            let globals2 = globals.clone();
            bind(env, a, eff, globals, move |av| {
                let arg = av
                    .to_expr(&crate::prims::prim_sig(&f).expect("checked prim").0)
                    .expect("first-order primitive argument");
                let out = prim_eval(&f, &arg, &globals2).expect("total primitive");
                sel_unit(denote_value(&Env::empty(), &out, &globals2), globals2.loss_dim)
            })
        }
        ExprKind::App(e1, e2) => {
            let e2 = e2.clone();
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            bind(env, e1, eff, globals, move |fv| {
                let fv = fv.clone();
                sel_bind(
                    denote_expr(&env2, &e2, &eff2, &globals2),
                    Arc::new(move |av| fv.apply(av)),
                )
            })
        }
        ExprKind::Tuple(es) => denote_tuple(env, es, 0, Vec::new(), eff, globals),
        ExprKind::Proj(a, i) => {
            let i = *i;
            let dim2 = dim;
            bind(env, a, eff, globals, move |av| match av {
                SemValue::TupleV(vs) => sel_unit(vs[i - 1].clone(), dim2),
                _ => panic!("projection from a non-tuple"),
            })
        }
        ExprKind::Inl(_, _, a) => {
            bind(env, a, eff, globals, move |av| {
                sel_unit(SemValue::TagV(0, Arc::new(av.clone())), dim)
            })
        }
        ExprKind::Inr(_, _, a) => {
            bind(env, a, eff, globals, move |av| {
                sel_unit(SemValue::TagV(1, Arc::new(av.clone())), dim)
            })
        }
        ExprKind::Cases { scrut, left_var, left, right_var, right, .. } => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let (lv, le) = (left_var.clone(), left.clone());
            let (rv, re) = (right_var.clone(), right.clone());
            bind(env, scrut, eff, globals, move |sv| match sv {
                SemValue::TagV(0, v) => {
                    denote_expr(&env2.bind(lv.clone(), (**v).clone()), &le, &eff2, &globals2)
                }
                SemValue::TagV(_, v) => {
                    denote_expr(&env2.bind(rv.clone(), (**v).clone()), &re, &eff2, &globals2)
                }
                _ => panic!("cases on a non-sum value"),
            })
        }
        ExprKind::Succ(a) => bind(env, a, eff, globals, move |av| match av {
            SemValue::NatV(n) => sel_unit(SemValue::NatV(n + 1), dim),
            _ => panic!("succ of a non-numeral"),
        }),
        ExprKind::Iter(n, z, s) => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let (z, s) = (z.clone(), s.clone());
            bind(env, n, eff, globals, move |nv| {
                let n = match nv {
                    SemValue::NatV(n) => *n,
                    _ => panic!("iter bound is not a numeral"),
                };
                let env3 = env2.clone();
                let eff3 = eff2.clone();
                let globals3 = globals2.clone();
                let s = s.clone();
                sel_bind(
                    denote_expr(&env2, &z, &eff2, &globals2),
                    Arc::new(move |zv| {
                        let env4 = env3.clone();
                        let eff4 = eff3.clone();
                        let globals4 = globals3.clone();
                        let zv = zv.clone();
                        sel_bind(
                            denote_expr(&env3, &s, &eff3, &globals3),
                            Arc::new(move |sv| {
                                // (φ†)^n applied to η(a).
                                let mut acc = sel_unit(zv.clone(), globals4.loss_dim);
                                for _ in 0..n {
                                    let sv = sv.clone();
                                    acc = sel_bind(acc, Arc::new(move |x| sv.apply(x)));
                                }
                                let _ = (&env4, &eff4);
                                acc
                            }),
                        )
                    }),
                )
            })
        }
        ExprKind::Cons(h, t) => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let t = t.clone();
            bind(env, h, eff, globals, move |hv| {
                let hv = hv.clone();
                let dim2 = globals2.loss_dim;
                sel_bind(
                    denote_expr(&env2, &t, &eff2, &globals2),
                    Arc::new(move |tv| match tv {
                        SemValue::ListV(vs) => {
                            let mut out = vs.clone();
                            out.insert(0, hv.clone());
                            sel_unit(SemValue::ListV(out), dim2)
                        }
                        _ => panic!("cons onto a non-list"),
                    }),
                )
            })
        }
        ExprKind::Fold(l, z, c) => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let (z, c) = (z.clone(), c.clone());
            bind(env, l, eff, globals, move |lv| {
                let elems = match lv {
                    SemValue::ListV(vs) => vs.clone(),
                    _ => panic!("fold over a non-list"),
                };
                let env3 = env2.clone();
                let eff3 = eff2.clone();
                let globals3 = globals2.clone();
                let c = c.clone();
                sel_bind(
                    denote_expr(&env2, &z, &eff2, &globals2),
                    Arc::new(move |zv| {
                        let env4 = env3.clone();
                        let eff4 = eff3.clone();
                        let globals4 = globals3.clone();
                        let zv = zv.clone();
                        let elems = elems.clone();
                        sel_bind(
                            denote_expr(&env3, &c, &eff3, &globals3),
                            Arc::new(move |cv| {
                                // fold(l, η(a), λ elem acc. (φ(elem, ·))†(acc)).
                                let mut acc = sel_unit(zv.clone(), globals4.loss_dim);
                                for elem in elems.iter().rev() {
                                    let cv = cv.clone();
                                    let elem = elem.clone();
                                    acc = sel_bind(
                                        acc,
                                        Arc::new(move |x| {
                                            cv.apply(&SemValue::TupleV(vec![
                                                elem.clone(),
                                                x.clone(),
                                            ]))
                                        }),
                                    );
                                }
                                let _ = (&env4, &eff4);
                                acc
                            }),
                        )
                    }),
                )
            })
        }
        ExprKind::OpCall(op, a) => {
            let op_sig = globals
                .signature
                .lookup_op(op)
                .unwrap_or_else(|| panic!("unknown operation {op}"))
                .clone();
            let idx = eff.count(&op_sig.label);
            assert!(idx > 0, "operation {op} used outside its effect");
            bind(env, a, eff, globals, move |av| {
                let tag = NodeTag {
                    label: op_sig.label.clone(),
                    op: op_sig.name.clone(),
                    idx,
                };
                let out = av.clone();
                SelComp::new(move |_gamma| Tree::Node {
                    tag: tag.clone(),
                    out: out.clone(),
                    children: Arc::new(move |w| Tree::Leaf((LossVec::zero(dim), w.clone()))),
                })
            })
        }
        ExprKind::Loss(a) => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let a = a.clone();
            SelComp::new(move |gamma| {
                let t = denote_expr(&env2, &a, &eff2, &globals2).run(gamma);
                t.extend(Arc::new(move |(r, v): &WLeaf| {
                    let a = v.as_loss().expect("loss of a non-loss value");
                    Tree::Leaf((a.add(r), SemValue::unit()))
                }))
            })
        }
        ExprKind::Handle { handler, param, body } => {
            let ht = denote_handler(env, handler, eff, globals);
            let body_eff = eff.plus_label(&handler.label);
            let body_comp = denote_expr(env, body, &body_eff, globals);
            bind(env, param, eff, globals, move |pv| ht(pv, &body_comp))
        }
        ExprKind::Then { left, cont, .. } => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let left = left.clone();
            let cont = cont.clone();
            SelComp::new(move |_gamma| {
                // The current loss continuation is ignored: the left side is
                // observed through the stored continuation, whose own loss
                // result absorbs the left side's writer loss.
                let lf = denote_losscont(&env2, &cont, &globals2);
                let t1 = denote_expr(&env2, &left, &eff2, &globals2).run(&lf);
                let lam = cont.to_lambda(globals2.loss_dim);
                let env3 = env2.clone();
                let globals3 = globals2.clone();
                t1.extend(Arc::new(move |(r1, a): &WLeaf| {
                    let inner = denote_expr(
                        &env3.bind(lam.var.clone(), a.clone()),
                        &lam.body,
                        &lam.eff,
                        &globals3,
                    )
                    .run(&zero_loss_fn(globals3.loss_dim));
                    let r1 = r1.clone();
                    inner.extend(Arc::new(move |(r2, r3): &WLeaf| {
                        let r3 = r3.as_loss().expect("loss continuation returned a non-loss");
                        Tree::Leaf((r2.clone(), SemValue::loss(r1.add(r3))))
                    }))
                }))
            })
        }
        ExprKind::GLocal { eff: body_eff, body, cont } => {
            let env2 = env.clone();
            let globals2 = globals.clone();
            let body = body.clone();
            let cont = cont.clone();
            let body_eff = body_eff.clone();
            SelComp::new(move |_gamma| {
                let lf = denote_losscont(&env2, &cont, &globals2);
                denote_expr(&env2, &body, &body_eff, &globals2).run(&lf)
            })
        }
        ExprKind::Reset(a) => {
            let env2 = env.clone();
            let eff2 = eff.clone();
            let globals2 = globals.clone();
            let a = a.clone();
            SelComp::new(move |gamma| {
                let t = denote_expr(&env2, &a, &eff2, &globals2).run(gamma);
                t.extend(Arc::new(move |(_r, v): &WLeaf| {
                    Tree::Leaf((LossVec::zero(dim), v.clone()))
                }))
            })
        }
    }
}

/// `let_{S} a = ⟦e⟧ in f(a)`.
fn bind(
    env: &Env,
    e: &Expr,
    eff: &Effect,
    globals: &Globals,
    f: impl Fn(&SemValue) -> SelComp + Send + Sync + 'static,
) -> SelComp {
    sel_bind(denote_expr(env, e, eff, globals), Arc::new(f))
}

fn denote_tuple(
    env: &Env,
    es: &[Expr],
    i: usize,
    acc: Vec<SemValue>,
    eff: &Effect,
    globals: &Globals,
) -> SelComp {
    if i == es.len() {
        return sel_unit(SemValue::TupleV(acc), globals.loss_dim);
    }
    let env2 = env.clone();
    let es2 = es.to_vec();
    let eff2 = eff.clone();
    let globals2 = globals.clone();
    bind(env, &es[i], eff, globals, move |v| {
        let mut acc2 = acc.clone();
        acc2.push(v.clone());
        denote_tuple(&env2, &es2, i + 1, acc2, &eff2, &globals2)
    })
}

/// Handler semantics: a function from a parameter and a handled computation
/// to the handling computation.
pub fn denote_handler(
    env: &Env,
    h: &Arc<Handler>,
    eff: &Effect,
    globals: &Globals,
) -> impl Fn(&SemValue, &SelComp) -> SelComp {
    let env = env.clone();
    let h = h.clone();
    let eff = eff.clone();
    let globals = globals.clone();
    move |p: &SemValue, g: &SelComp| {
        let env = env.clone();
        let h = h.clone();
        let eff = eff.clone();
        let globals = globals.clone();
        let p = p.clone();
        let g = g.clone();
        SelComp::new(move |gamma: &LossFn| {
            let ret = denote_value(&env, &h.return_clause.to_expr(), &globals);

            // Transformed loss function: observe results through the return
            // clause at the current parameter.
            let gamma2: LossFn = {
                let ret = ret.clone();
                let p = p.clone();
                let gamma = gamma.clone();
                Arc::new(move |a: &SemValue| {
                    let comp = ret.apply(&SemValue::TupleV(vec![p.clone(), a.clone()]));
                    er(&comp, &gamma)
                })
            };

            let t = g.run(&gamma2);
            let ext = handler_extension(&env, &h, &eff, &globals, &ret, gamma);
            ext(&t)(&p)
        })
    }
}

/// Per-parameter writer trees: the carrier of the handler's algebra.
type ParamFn = Arc<dyn Fn(&SemValue) -> WTree + Send + Sync>;

/// The homomorphic extension `s†` of the return-clause seed through the
/// handler's εℓ-algebra: forwarded operations stay structural with the
/// parameter threaded into children, the handler's own operations at the
/// top depth index run their clause with the derived delimited and choice
/// continuations.
fn handler_extension(
    env: &Env,
    h: &Arc<Handler>,
    eff: &Effect,
    globals: &Globals,
    ret: &SemValue,
    gamma: &LossFn,
) -> impl Fn(&WTree) -> ParamFn {
    let h = h.clone();
    let eff = eff.clone();
    let globals = globals.clone();
    let ret = ret.clone();
    let gamma = gamma.clone();
    let env = env.clone();
    move |t: &WTree| {
        let h = h.clone();
        let eff = eff.clone();
        let globals = globals.clone();
        let ret = ret.clone();
        let gamma = gamma.clone();
        let env = env.clone();
        let dim = globals.loss_dim;
        let own_idx = eff.count(&h.label) + 1;

        let leaf: Arc<dyn Fn(&WLeaf) -> ParamFn + Send + Sync> = {
            let ret = ret.clone();
            let gamma = gamma.clone();
            Arc::new(move |(r, a): &WLeaf| {
                let ret = ret.clone();
                let gamma = gamma.clone();
                let r = r.clone();
                let a = a.clone();
                Arc::new(move |p: &SemValue| {
                    let comp = ret.apply(&SemValue::TupleV(vec![p.clone(), a.clone()]));
                    w_action(&r, &comp.run(&gamma))
                })
            })
        };

        let node: Arc<
            dyn Fn(&NodeTag, &SemValue, Arc<dyn Fn(&SemValue) -> ParamFn + Send + Sync>) -> ParamFn
                + Send
                + Sync,
        > = {
            let h = h.clone();
            let env = env.clone();
            let globals = globals.clone();
            let gamma = gamma.clone();
            Arc::new(move |tag: &NodeTag, out: &SemValue, kids| {
                if tag.label == h.label && tag.idx == own_idx {
                    // The handler's own operation: run its clause with the
                    // delimited continuation k1 and choice continuation l1.
                    let clause = h
                        .clause(&tag.op)
                        .unwrap_or_else(|| panic!("missing clause for {}", tag.op));
                    let clause_v = denote_value(&env, &clause.to_expr(), &globals);
                    let gamma = gamma.clone();
                    let out = out.clone();
                    Arc::new(move |p: &SemValue| {
                        let k1 = {
                            let kids = kids.clone();
                            SemValue::FnV(Arc::new(move |pa: &SemValue| {
                                let (p2, a) = unpair(pa);
                                let t = kids(&a)(&p2);
                                SelComp::new(move |_gamma1| t.clone())
                            }))
                        };
                        let l1 = {
                            let kids = kids.clone();
                            let gamma = gamma.clone();
                            SemValue::FnV(Arc::new(move |pa: &SemValue| {
                                let (p2, a) = unpair(pa);
                                let t = delta(&w_extend(&gamma, &kids(&a)(&p2)), dim);
                                SelComp::new(move |_gamma1| t.clone())
                            }))
                        };
                        let call = clause_v.apply(&SemValue::TupleV(vec![
                            p.clone(),
                            out.clone(),
                            l1,
                            k1,
                        ]));
                        call.run(&gamma)
                    })
                } else {
                    // Forwarded operation: keep the node, thread the
                    // parameter into the children.
                    let tag = tag.clone();
                    let out = out.clone();
                    Arc::new(move |p: &SemValue| {
                        let kids = kids.clone();
                        let p = p.clone();
                        Tree::Node {
                            tag: tag.clone(),
                            out: out.clone(),
                            children: Arc::new(move |a| kids(a)(&p)),
                        }
                    })
                }
            })
        };

        t.extend_into(leaf, node)
    }
}

fn unpair(v: &SemValue) -> (SemValue, SemValue) {
    match v {
        SemValue::TupleV(vs) if vs.len() == 2 => (vs[0].clone(), vs[1].clone()),
        _ => panic!("continuation argument is not a pair"),
    }
}

// ---------------------------------------------------------------------------
// Checked entry points
// ---------------------------------------------------------------------------

fn require_wf(globals: &Globals) -> Result<(), DenoteError> {
    check_wellfounded(&globals.signature)
        .map(|_| ())
        .map_err(DenoteError::NotWellFounded)
}

/// Denote a closed expression, refusing non-well-founded signatures.
pub fn denote_closed(
    e: &Expr,
    eff: &Effect,
    globals: &Globals,
) -> Result<SelComp, DenoteError> {
    require_wf(globals)?;
    Ok(denote_expr(&Env::empty(), e, eff, globals))
}

/// Denote a loss continuation, refusing non-well-founded signatures.
pub fn denote_losscont_closed(
    cont: &LossCont,
    globals: &Globals,
) -> Result<LossFn, DenoteError> {
    require_wf(globals)?;
    Ok(denote_losscont(&Env::empty(), cont, globals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::tests::{ndet_globals, overview_handled};
    use crate::syntax::Signature;

    fn g1() -> Globals {
        Globals::new(Signature::new(), 1)
    }

    fn lv(x: f64) -> LossVec {
        LossVec::scalar(x, 1)
    }

    fn leaf_of(t: &WTree) -> (LossVec, SemValue) {
        match t {
            Tree::Leaf(l) => l.clone(),
            Tree::Node { .. } => panic!("expected a leaf, found {t:?}"),
        }
    }

    fn rleaf_of(t: &RTree) -> LossVec {
        match t {
            Tree::Leaf(l) => l.clone(),
            Tree::Node { .. } => panic!("expected a leaf, found {t:?}"),
        }
    }

    #[test]
    fn action_laws_on_writer_trees() {
        let v = SemValue::loss(lv(0.0));
        let t: WTree = Tree::Leaf((lv(0.5), v));
        let composed = w_action(&lv(1.0), &w_action(&lv(2.0), &t));
        let (r, _) = leaf_of(&composed);
        assert_eq!(r, lv(3.5));
        // Unit law.
        let (r, _) = leaf_of(&w_action(&lv(0.0), &t));
        assert_eq!(r, lv(0.5));
    }

    #[test]
    fn unit_ignores_the_loss_function() {
        let u = sel_unit(SemValue::ConstV(Literal::Char('a')), 1);
        let z = zero_loss_fn(1);
        let other: LossFn = Arc::new(|_| Tree::Leaf(LossVec::scalar(9.0, 1)));
        let (r1, v1) = leaf_of(&u.run(&z));
        let (r2, v2) = leaf_of(&u.run(&other));
        assert!(r1.is_zero() && r2.is_zero());
        assert_eq!(v1.approx_eq(&v2, 0.0), Some(true));
    }

    #[test]
    fn er_on_unit_is_the_loss_function() {
        let x = SemValue::loss(lv(7.0));
        let gamma: LossFn = Arc::new(|v: &SemValue| {
            Tree::Leaf(v.as_loss().cloned().unwrap_or_else(|| LossVec::scalar(-1.0, 1)))
        });
        let r = er(&sel_unit(x, 1), &gamma);
        assert_eq!(rleaf_of(&r), lv(7.0));
    }

    #[test]
    fn er_of_a_loss_expression() {
        let g = g1();
        let comp = denote_expr(
            &Env::empty(),
            &Expr::loss(Expr::lit_loss(lv(2.0))),
            &Effect::empty(),
            &g,
        );
        let r = er(&comp, &zero_loss_fn(1));
        assert_eq!(rleaf_of(&r), lv(2.0));
    }

    #[test]
    fn sequenced_losses_accumulate() {
        use crate::syntax::{name, Lambda};
        let g = g1();
        // loss(1.0); loss(2.0)
        let e = Expr::app(
            Expr::lam(Lambda::new(
                Effect::empty(),
                name("_u"),
                TypeExpr::unit(),
                Expr::loss(Expr::lit_loss(lv(2.0))),
            )),
            Expr::loss(Expr::lit_loss(lv(1.0))),
        );
        let t = denote_expr(&Env::empty(), &e, &Effect::empty(), &g).run(&zero_loss_fn(1));
        let (r, v) = leaf_of(&t);
        assert_eq!(r, lv(3.0));
        assert_eq!(v.approx_eq(&SemValue::unit(), 0.0), Some(true));
    }

    #[test]
    fn bind_unit_laws_on_probed_loss_functions() {
        let g = g1();
        let x = SemValue::loss(lv(4.0));
        let f: FnSem = {
            let g = g.clone();
            Arc::new(move |v: &SemValue| {
                let doubled = v.as_loss().unwrap().add(v.as_loss().unwrap());
                let _ = &g;
                sel_unit(SemValue::loss(doubled), 1)
            })
        };
        let gamma: LossFn = Arc::new(|v: &SemValue| Tree::Leaf(v.as_loss().unwrap().clone()));
        // Left unit: bind(η x, f) = f x.
        let lhs = sel_bind(sel_unit(x.clone(), 1), f.clone()).run(&gamma);
        let rhs = f(&x).run(&gamma);
        assert_eq!(leaf_of(&lhs).0, leaf_of(&rhs).0);
        assert_eq!(leaf_of(&lhs).1.approx_eq(&leaf_of(&rhs).1, 0.0), Some(true));
        // Right unit: bind(F, η) = F.
        let comp = sel_bind(
            sel_unit(x.clone(), 1),
            Arc::new(|v: &SemValue| sel_unit(v.clone(), 1)),
        );
        let (r, v) = leaf_of(&comp.run(&gamma));
        assert!(r.is_zero());
        assert_eq!(v.approx_eq(&x, 0.0), Some(true));
    }

    #[test]
    fn loss_lambda_keeps_the_returned_value_and_drops_written_loss() {
        use crate::syntax::{name, Lambda};
        let g = g1();
        // λ^{} x:loss. x
        let ident = Lambda::new(Effect::empty(), name("x"), TypeExpr::loss(), Expr::var("x"));
        let lf = denote_loss_lambda(&Env::empty(), &ident, &g);
        assert_eq!(rleaf_of(&lf(&SemValue::loss(lv(5.0)))), lv(5.0));

        // λ^{} x:loss. (loss(9.0); x) — the written 9 is discarded.
        let body = Expr::app(
            Expr::lam(Lambda::new(
                Effect::empty(),
                name("_u"),
                TypeExpr::unit(),
                Expr::var("x"),
            )),
            Expr::loss(Expr::lit_loss(lv(9.0))),
        );
        let lam = Lambda::new(Effect::empty(), name("x"), TypeExpr::loss(), body);
        let lf = denote_loss_lambda(&Env::empty(), &lam, &g);
        assert_eq!(rleaf_of(&lf(&SemValue::loss(lv(5.0)))), lv(5.0));

        // The zero continuation.
        let z = denote_losscont(
            &Env::empty(),
            &LossCont::zero(Effect::empty(), TypeExpr::loss()),
            &g,
        );
        assert_eq!(rleaf_of(&z(&SemValue::loss(lv(5.0)))), lv(0.0));
    }

    #[test]
    fn op_call_denotes_a_node_with_unit_children() {
        let g = ndet_globals();
        let ndet = Effect::singleton(EffectLabel::new("ndet"));
        let comp = denote_expr(
            &Env::empty(),
            &Expr::op_call("decide", Expr::unit()),
            &ndet,
            &g,
        );
        match comp.run(&zero_loss_fn(1)) {
            Tree::Node { tag, out, children } => {
                assert_eq!(tag.label, EffectLabel::new("ndet"));
                assert_eq!(&*tag.op, "decide");
                assert_eq!(tag.idx, 1);
                assert_eq!(out.approx_eq(&SemValue::unit(), 0.0), Some(true));
                for b in [true, false] {
                    let (r, v) = leaf_of(&children(&SemValue::bool(b)));
                    assert!(r.is_zero());
                    assert_eq!(v.approx_eq(&SemValue::bool(b), 0.0), Some(true));
                }
            }
            t => panic!("expected a node, found {t:?}"),
        }
    }

    #[test]
    fn value_lemma_instances() {
        let g = g1();
        let v = Expr::tuple(vec![Expr::lit_loss(lv(2.0)), Expr::lit_char('b')]);
        let comp = denote_expr(&Env::empty(), &v, &Effect::empty(), &g);
        let (r, sv) = leaf_of(&comp.run(&zero_loss_fn(1)));
        assert!(r.is_zero());
        let expected = denote_value(&Env::empty(), &v, &g);
        assert_eq!(sv.approx_eq(&expected, 0.0), Some(true));
    }

    #[test]
    fn overview_denotes_loss_two_and_a() {
        let g = ndet_globals();
        let comp = denote_closed(&overview_handled(), &Effect::empty(), &g).unwrap();
        let (r, v) = leaf_of(&comp.run(&zero_loss_fn(1)));
        assert_eq!(r, lv(2.0));
        assert_eq!(
            v.approx_eq(&SemValue::ConstV(Literal::Char('a')), 0.0),
            Some(true)
        );
    }

    #[test]
    fn non_wellfounded_signatures_are_refused() {
        use crate::syntax::{name, OpSig};
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
                label: cow,
            }],
        )
        .unwrap();
        let g = Globals::new(sig, 1);
        let err = denote_closed(&Expr::unit(), &Effect::empty(), &g);
        assert!(err.is_err());
    }
}
