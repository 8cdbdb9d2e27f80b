//! The primitive function table: first-order total functions `f : σ → τ`.
//!
//! Arithmetic acts componentwise on loss vectors and division follows IEEE
//! semantics (a zero divisor yields inf/nan rather than an error).
//! Comparisons order loss vectors lexicographically, which coincides with
//! the numeric order at dimension one. `lfst`/`lsnd` broadcast a single
//! component across the vector so programs with pair-shaped losses can
//! compare one player's component at a time.

use crate::syntax::{Expr, ExprKind, Globals, Literal, LossVec, TypeExpr};

pub struct PrimDef {
    pub name: &'static str,
    pub arg_ty: fn() -> TypeExpr,
    pub res_ty: fn() -> TypeExpr,
}

fn loss_pair() -> TypeExpr {
    TypeExpr::product(vec![TypeExpr::loss(), TypeExpr::loss()])
}

fn str_pair() -> TypeExpr {
    TypeExpr::product(vec![TypeExpr::str(), TypeExpr::str()])
}

pub const PRIMS: &[PrimDef] = &[
    PrimDef { name: "add", arg_ty: loss_pair, res_ty: TypeExpr::loss },
    PrimDef { name: "sub", arg_ty: loss_pair, res_ty: TypeExpr::loss },
    PrimDef { name: "mul", arg_ty: loss_pair, res_ty: TypeExpr::loss },
    PrimDef { name: "div", arg_ty: loss_pair, res_ty: TypeExpr::loss },
    PrimDef { name: "neg", arg_ty: TypeExpr::loss, res_ty: TypeExpr::loss },
    PrimDef { name: "leq", arg_ty: loss_pair, res_ty: TypeExpr::bool },
    PrimDef { name: "lt", arg_ty: loss_pair, res_ty: TypeExpr::bool },
    PrimDef { name: "eq", arg_ty: loss_pair, res_ty: TypeExpr::bool },
    PrimDef { name: "lfst", arg_ty: TypeExpr::loss, res_ty: TypeExpr::loss },
    PrimDef { name: "lsnd", arg_ty: TypeExpr::loss, res_ty: TypeExpr::loss },
    PrimDef {
        name: "eq_char",
        arg_ty: || TypeExpr::product(vec![TypeExpr::char(), TypeExpr::char()]),
        res_ty: TypeExpr::bool,
    },
    PrimDef { name: "eq_str", arg_ty: str_pair, res_ty: TypeExpr::bool },
    PrimDef { name: "concat", arg_ty: str_pair, res_ty: TypeExpr::str },
    PrimDef { name: "n2l", arg_ty: TypeExpr::nat, res_ty: TypeExpr::loss },
    PrimDef { name: "l2n", arg_ty: TypeExpr::loss, res_ty: TypeExpr::nat },
    PrimDef { name: "str_len", arg_ty: TypeExpr::str, res_ty: TypeExpr::nat },
    PrimDef { name: "str_distinct", arg_ty: TypeExpr::str, res_ty: TypeExpr::nat },
];

pub fn prim_sig(name: &str) -> Option<(TypeExpr, TypeExpr)> {
    PRIMS.iter().find(|p| p.name == name).map(|p| ((p.arg_ty)(), (p.res_ty)()))
}

fn loss_args(arg: &Expr) -> Option<(LossVec, LossVec)> {
    match arg.kind() {
        ExprKind::Tuple(es) if es.len() == 2 => {
            Some((es[0].as_loss()?.clone(), es[1].as_loss()?.clone()))
        }
        _ => None,
    }
}

fn zip_loss(a: &LossVec, b: &LossVec, f: impl Fn(f64, f64) -> f64) -> Expr {
    Expr::lit_loss(LossVec(a.0.iter().zip(b.0.iter()).map(|(x, y)| f(*x, *y)).collect()))
}

// Lexicographic order on the component vectors.
fn lex_cmp(a: &LossVec, b: &LossVec) -> std::cmp::Ordering {
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(ord) => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

fn str_args(arg: &Expr) -> Option<(std::sync::Arc<str>, std::sync::Arc<str>)> {
    match arg.kind() {
        ExprKind::Tuple(es) if es.len() == 2 => match (es[0].kind(), es[1].kind()) {
            (ExprKind::Const(Literal::Str(a)), ExprKind::Const(Literal::Str(b))) => {
                Some((a.clone(), b.clone()))
            }
            _ => None,
        },
        _ => None,
    }
}

/// Apply a primitive to an argument value. Returns `None` when the argument
/// does not have the primitive's input shape (unreachable after checking).
pub fn prim_eval(name: &str, arg: &Expr, globals: &Globals) -> Option<Expr> {
    match name {
        "add" | "sub" | "mul" | "div" => {
            let (a, b) = loss_args(arg)?;
            Some(match name {
                "add" => zip_loss(&a, &b, |x, y| x + y),
                "sub" => zip_loss(&a, &b, |x, y| x - y),
                "mul" => zip_loss(&a, &b, |x, y| x * y),
                _ => zip_loss(&a, &b, |x, y| x / y),
            })
        }
        "neg" => {
            let v = arg.as_loss()?;
            Some(Expr::lit_loss(LossVec(v.0.iter().map(|x| -x).collect())))
        }
        "leq" | "lt" | "eq" => {
            let (a, b) = loss_args(arg)?;
            let ord = lex_cmp(&a, &b);
            Some(Expr::bool(match name {
                "leq" => ord != std::cmp::Ordering::Greater,
                "lt" => ord == std::cmp::Ordering::Less,
                _ => a == b,
            }))
        }
        "lfst" | "lsnd" => {
            let v = arg.as_loss()?;
            let i = if name == "lfst" { 0 } else { 1.min(v.dim() - 1) };
            Some(Expr::lit_loss(LossVec::scalar(v.0[i], v.dim())))
        }
        "eq_char" => match arg.kind() {
            ExprKind::Tuple(es) if es.len() == 2 => match (es[0].kind(), es[1].kind()) {
                (ExprKind::Const(Literal::Char(a)), ExprKind::Const(Literal::Char(b))) => {
                    Some(Expr::bool(a == b))
                }
                _ => None,
            },
            _ => None,
        },
        "eq_str" => {
            let (a, b) = str_args(arg)?;
            Some(Expr::bool(a == b))
        }
        "concat" => {
            let (a, b) = str_args(arg)?;
            Some(Expr::lit_str(&format!("{a}{b}")))
        }
        "n2l" => {
            let n = arg.as_nat()?;
            Some(Expr::lit_loss(LossVec::scalar(n as f64, globals.loss_dim)))
        }
        "l2n" => {
            let v = arg.as_loss()?;
            Some(Expr::nat(v.0[0].max(0.0).floor() as u64))
        }
        "str_len" => match arg.kind() {
            ExprKind::Const(Literal::Str(s)) => Some(Expr::nat(s.chars().count() as u64)),
            _ => None,
        },
        "str_distinct" => match arg.kind() {
            ExprKind::Const(Literal::Str(s)) => {
                let set: std::collections::BTreeSet<char> = s.chars().collect();
                Some(Expr::nat(set.len() as u64))
            }
            _ => None,
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn globals() -> Globals {
        Globals::new(crate::syntax::Signature::new(), 1)
    }

    fn lv(x: f64) -> Expr {
        Expr::lit_loss(LossVec::scalar(x, 1))
    }

    #[test]
    fn arithmetic_is_componentwise() {
        let arg = Expr::tuple(vec![lv(2.0), lv(3.0)]);
        let r = prim_eval("add", &arg, &globals()).unwrap();
        assert_eq!(r.as_loss().unwrap().0[0], 5.0);
        let r = prim_eval("mul", &arg, &globals()).unwrap();
        assert_eq!(r.as_loss().unwrap().0[0], 6.0);
    }

    #[test]
    fn division_by_zero_follows_ieee() {
        let arg = Expr::tuple(vec![lv(1.0), lv(0.0)]);
        let r = prim_eval("div", &arg, &globals()).unwrap();
        assert!(r.as_loss().unwrap().0[0].is_infinite());
    }

    #[test]
    fn comparisons_and_projections() {
        let arg = Expr::tuple(vec![lv(2.0), lv(3.0)]);
        assert_eq!(prim_eval("leq", &arg, &globals()).unwrap().as_bool(), Some(true));
        assert_eq!(prim_eval("lt", &arg, &globals()).unwrap().as_bool(), Some(true));
        assert_eq!(prim_eval("eq", &arg, &globals()).unwrap().as_bool(), Some(false));

        let g2 = Globals::new(crate::syntax::Signature::new(), 2);
        let v = Expr::lit_loss(LossVec::from_vec(vec![7.0, 9.0]));
        let fst = prim_eval("lfst", &v, &g2).unwrap();
        assert_eq!(&*fst.as_loss().unwrap().0, &[7.0, 7.0]);
        let snd = prim_eval("lsnd", &v, &g2).unwrap();
        assert_eq!(&*snd.as_loss().unwrap().0, &[9.0, 9.0]);
    }

    #[test]
    fn string_helpers() {
        let s = Expr::lit_str("aabb");
        assert_eq!(prim_eval("str_len", &s, &globals()).unwrap().as_nat(), Some(4));
        assert_eq!(prim_eval("str_distinct", &s, &globals()).unwrap().as_nat(), Some(2));
        let arg = Expr::tuple(vec![Expr::lit_str("password is "), Expr::lit_str("abc")]);
        let r = prim_eval("concat", &arg, &globals()).unwrap();
        assert!(matches!(r.kind(), ExprKind::Const(Literal::Str(s)) if &**s == "password is abc"));
    }

    #[test]
    fn nat_loss_conversions() {
        let r = prim_eval("n2l", &Expr::nat(3), &globals()).unwrap();
        assert_eq!(r.as_loss().unwrap().0[0], 3.0);
        let r = prim_eval("l2n", &lv(2.9), &globals()).unwrap();
        assert_eq!(r.as_nat(), Some(2));
    }
}
