use bsvie::dsl::{lipschitz_probe, parse, parse_with_vars, Env, EvalError, Expr, ParseError, ProbeBox, Var};
use proptest::prelude::*;

fn corpus() -> Vec<&'static str> {
    include_str!("../../../scenarios/dsl_corpus.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

#[test]
fn corpus_round_trips() {
    let corpus = corpus();
    assert!(corpus.len() >= 30);
    for text in corpus {
        let e = parse(text).unwrap_or_else(|err| panic!("{text}: {err}"));
        let printed = e.to_string();
        let again = parse(&printed).unwrap_or_else(|err| panic!("{printed}: {err}"));
        assert_eq!(again, e, "{text} printed as {printed}");
        assert_eq!(again.to_string(), printed);
    }
}

#[test]
fn documented_shapes() {
    let e = parse("0.5*z + max(y, 0)").unwrap();
    assert_eq!(
        e,
        Expr::add(
            Expr::mul(Expr::lit(0.5), Expr::var(Var::Z)),
            Expr::Max(Box::new(Expr::var(Var::Y)), Box::new(Expr::lit(0.0)))
        )
    );
    assert_eq!(
        parse("-x^2").unwrap(),
        Expr::Neg(Box::new(Expr::Pow(Box::new(Expr::var(Var::X)), Box::new(Expr::lit(2.0)))))
    );
}

fn eval(text: &str, x: f64) -> Result<f64, EvalError> {
    parse(text).unwrap().eval(&Env::new().with(Var::X, x))
}

#[test]
fn documented_values() {
    assert_eq!(eval("exp(0)", 0.0), Ok(1.0));
    assert_eq!(eval("abs(-3) + 2^3", 0.0), Ok(11.0));
}

#[test]
fn error_categories() {
    assert!(matches!(parse("z +"), Err(ParseError::Syntax { offset: 3, .. })));
    assert!(matches!(parse(""), Err(ParseError::Syntax { offset: 0, .. })));
    assert!(matches!(parse("(z"), Err(ParseError::Syntax { .. })));
    assert!(matches!(parse("z w"), Err(ParseError::Syntax { offset: 2, .. })));
    assert!(matches!(parse("1 + foo"), Err(ParseError::UnknownVariable { offset: 4, .. })));
    assert!(matches!(parse("u0"), Err(ParseError::UnknownVariable { .. })));
    assert!(matches!(parse("max(z)"), Err(ParseError::Arity { expected: 2, found: 1, .. })));
    assert!(matches!(parse("abs(z, y)"), Err(ParseError::Arity { expected: 1, found: 2, .. })));
    assert!(matches!(
        parse_with_vars("y + zeta", &[Var::Y]),
        Err(ParseError::UnknownVariable { offset: 4, .. })
    ));

    assert_eq!(eval("1/ (x - x)", 2.0), Err(EvalError::DivisionByZero));
    assert!(matches!(eval("log(x)", 0.0), Err(EvalError::Domain { op: "log", .. })));
    assert!(matches!(eval("sqrt(x)", -1.0), Err(EvalError::Domain { op: "sqrt", .. })));
    assert!(matches!(eval("exp(x)", 1e4), Err(EvalError::NonFinite { .. })));
    assert_eq!(parse("y").unwrap().eval(&Env::<f64>::new()), Err(EvalError::Unbound(Var::Y)));
}

fn lipschitz_box() -> ProbeBox {
    ProbeBox::new()
        .with(Var::T, 0.0, 1.0)
        .with(Var::S, 0.0, 1.0)
        .with(Var::Y, -10.0, 10.0)
        .with(Var::Z, -10.0, 10.0)
        .with(Var::U(0), -10.0, 10.0)
        .with(Var::U(1), -10.0, 10.0)
        .with(Var::X, -3.0, 3.0)
}

#[test]
fn documented_probe_cases() {
    let b = lipschitz_box();
    let r = lipschitz_probe(&parse("z").unwrap(), &b, 500, 1.0, 1);
    assert!(r.passed && r.estimate <= 1.0 + 1e-12);
    let r = lipschitz_probe(&parse("2*z").unwrap(), &b, 500, 1.0, 1);
    assert!(!r.passed && (r.estimate - 2.0).abs() < 1e-9);
    let r = lipschitz_probe(&parse("max(y,0)+0.5*u1").unwrap(), &b, 2000, 1.0, 1);
    assert!(r.passed, "{r:?}");
}

fn var_strategy() -> impl Strategy<Value = Var> {
    prop_oneof![
        Just(Var::T),
        Just(Var::S),
        Just(Var::Y),
        Just(Var::Z),
        (0u8..9).prop_map(Var::U),
        Just(Var::X),
        Just(Var::Xt),
        Just(Var::Zeta),
    ]
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0.0f64..1e6).prop_map(Expr::Lit),
        (0u32..100).prop_map(|k| Expr::Lit(k as f64)),
        var_strategy().prop_map(Expr::Var),
    ];
    leaf.prop_recursive(5, 48, 2, |inner| {
        let b = |e: Expr| Box::new(e);
        prop_oneof![
            inner.clone().prop_map(move |a| Expr::Neg(b(a))),
            inner.clone().prop_map(move |a| Expr::Abs(b(a))),
            inner.clone().prop_map(move |a| Expr::Exp(b(a))),
            inner.clone().prop_map(move |a| Expr::Log(b(a))),
            inner.clone().prop_map(move |a| Expr::Sqrt(b(a))),
            inner.clone().prop_map(move |a| Expr::Indicator(b(a))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Add(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Sub(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Mul(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Div(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Pow(b(a), b(c))),
            (inner.clone(), inner.clone()).prop_map(move |(a, c)| Expr::Max(b(a), b(c))),
            (inner.clone(), inner).prop_map(move |(a, c)| Expr::Min(b(a), b(c))),
        ]
    })
}

proptest! {
    #[test]
    fn printed_trees_parse_back(e in expr_strategy()) {
        let printed = e.to_string();
        let again = parse(&printed).map_err(|err| TestCaseError::fail(format!("{printed}: {err}")))?;
        prop_assert_eq!(again, e);
    }

    #[test]
    fn evaluation_is_deterministic(e in expr_strategy(), vals in proptest::collection::vec(-5.0f64..5.0, 16)) {
        let mut env = Env::new();
        for (v, &a) in Var::all().into_iter().zip(&vals) {
            env.set(v, a);
        }
        let first = e.eval(&env);
        prop_assert_eq!(first.clone(), e.eval(&env));
        if let Ok(v) = first {
            prop_assert!(v.is_finite());
        }
    }

    /// For `a y + b z + c u1 + d u2 + f(t, s, x)` the quotient over the ℓ¹
    /// distance peaks at the largest coefficient magnitude.
    #[test]
    fn probe_is_exact_on_affine(coef in proptest::collection::vec(-5.0f64..5.0, 4), shift in -3.0f64..3.0) {
        let text = format!(
            "{}*y + {}*z + {}*u1 + {}*u2 + {shift}*x + t*s",
            coef[0], coef[1], coef[2], coef[3]
        );
        let e = parse(&text.replace("+ -", "- ")).unwrap();
        let exact = coef.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let r = lipschitz_probe(&e, &lipschitz_box(), 200, exact, 7);
        prop_assert!((r.estimate - exact).abs() <= 1e-12 * exact.max(1.0), "{} vs {}", r.estimate, exact);
        prop_assert!(r.passed);
    }
}
