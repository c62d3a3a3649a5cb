use std::collections::BTreeSet;
use std::fmt;

/// Łukasiewicz connectives on truth values in [0,1].
///
/// Generic over [`Truth`](fuzzy::Truth) so the algebra can be checked in
/// exact arithmetic; the crate itself evaluates on `f64`.
pub mod fuzzy {
    use std::ops::{Add, Sub};

    pub trait Truth: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> {
        const FALSE: Self;
        const TRUE: Self;
    }

    impl Truth for f64 {
        const FALSE: f64 = 0.0;
        const TRUE: f64 = 1.0;
    }

    fn min<T: Truth>(a: T, b: T) -> T {
        if b < a {
            b
        } else {
            a
        }
    }

    fn max<T: Truth>(a: T, b: T) -> T {
        if b > a {
            b
        } else {
            a
        }
    }

    pub fn not<T: Truth>(a: T) -> T {
        T::TRUE - a
    }

    /// `max(0, a + b − 1)`, arranged so that `a ∧ 1` is exactly `a`.
    pub fn and<T: Truth>(a: T, b: T) -> T {
        let (lo, hi) = (min(a, b), max(a, b));
        max(T::FALSE, lo - (T::TRUE - hi))
    }

    pub fn or<T: Truth>(a: T, b: T) -> T {
        min(T::TRUE, a + b)
    }

    pub fn implies<T: Truth>(a: T, b: T) -> T {
        min(T::TRUE, T::TRUE - a + b)
    }

    pub fn iff<T: Truth>(a: T, b: T) -> T {
        min(implies(a, b), implies(b, a))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Atom { predicate: String, variable: String },
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn atom(predicate: &str, variable: &str) -> Self {
        Formula::Atom {
            predicate: predicate.to_string(),
            variable: variable.to_string(),
        }
    }

    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn iff(a: Formula, b: Formula) -> Self {
        Formula::Iff(Box::new(a), Box::new(b))
    }

    /// Evaluates with `atom` supplying the truth of each predicate.
    pub fn eval_with<F: Fn(&str) -> f64 + Copy>(&self, atom: F) -> f64 {
        match self {
            Formula::Atom { predicate, .. } => atom(predicate),
            Formula::Not(a) => fuzzy::not(a.eval_with(atom)),
            Formula::And(a, b) => fuzzy::and(a.eval_with(atom), b.eval_with(atom)),
            Formula::Or(a, b) => fuzzy::or(a.eval_with(atom), b.eval_with(atom)),
            Formula::Implies(a, b) => fuzzy::implies(a.eval_with(atom), b.eval_with(atom)),
            Formula::Iff(a, b) => fuzzy::iff(a.eval_with(atom), b.eval_with(atom)),
        }
    }

    pub fn predicates(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.visit_atoms(&mut |p, _| {
            out.insert(p);
        });
        out
    }

    pub(crate) fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a str, &'a str)) {
        match self {
            Formula::Atom {
                predicate,
                variable,
            } => f(predicate, variable),
            Formula::Not(a) => a.visit_atoms(f),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.visit_atoms(f);
                b.visit_atoms(f);
            }
        }
    }
}

/// Fully parenthesized DSL form, parseable back to the same tree.
impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Atom {
                predicate,
                variable,
            } => write!(f, "{predicate}({variable})"),
            Formula::Not(a) => write!(f, "~{a}"),
            Formula::And(a, b) => write!(f, "({a} & {b})"),
            Formula::Or(a, b) => write!(f, "({a} | {b})"),
            Formula::Implies(a, b) => write!(f, "({a} -> {b})"),
            Formula::Iff(a, b) => write!(f, "({a} <-> {b})"),
        }
    }
}

/// Universally quantified axioms over a single variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Theory {
    pub variable: String,
    pub learnable: Vec<String>,
    pub axioms: Vec<Formula>,
}

impl Theory {
    pub fn predicates(&self) -> BTreeSet<&str> {
        self.axioms.iter().flat_map(|a| a.predicates()).collect()
    }
}

impl fmt::Display for Theory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in &self.learnable {
            writeln!(f, "learnable {name}")?;
        }
        for axiom in &self.axioms {
            writeln!(f, "forall {}: {axiom}", self.variable)?;
        }
        Ok(())
    }
}
