//! Scenario files: TOML checked against a fixed schema before anything runs.
//! Every problem found is reported, not just the first one.

use std::fmt;

use toml::{Table, Value};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Str,
    Bool,
    StrList,
    FloatList,
    IntList,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Float => "a number",
            Kind::Int => "an integer",
            Kind::Str => "a string",
            Kind::Bool => "a boolean",
            Kind::StrList => "a list of strings",
            Kind::FloatList => "a list of numbers",
            Kind::IntList => "a list of integers",
        })
    }
}

struct Key {
    name: &'static str,
    kind: Kind,
    required: bool,
}

const fn req(name: &'static str, kind: Kind) -> Key {
    Key { name, kind, required: true }
}

const fn opt(name: &'static str, kind: Kind) -> Key {
    Key { name, kind, required: false }
}

struct Section {
    name: &'static str,
    keys: &'static [Key],
    /// Nested tables with their own keys.
    children: &'static [Section],
}

use Kind::*;

const SECTIONS: &[Section] = &[
    Section {
        name: "grid",
        keys: &[req("T", Float), req("N", Int)],
        children: &[],
    },
    Section {
        name: "jumps",
        keys: &[req("lambda", Float), req("mark_dist", Str), req("params", FloatList)],
        children: &[],
    },
    Section {
        name: "diffusion",
        keys: &[req("x0", Float), opt("b_expr", Str), opt("sigma_expr", Str)],
        children: &[],
    },
    Section {
        name: "mc",
        keys: &[req("n_paths", Int), req("seed", Int)],
        children: &[],
    },
    Section {
        name: "driver",
        keys: &[req("g_expr", Str), opt("jump_weights", StrList), req("lipschitz_C", Float)],
        children: &[],
    },
    Section {
        name: "psi",
        keys: &[req("expr", Str), opt("sign", Int)],
        children: &[],
    },
    Section {
        name: "solver",
        keys: &[opt("basis_degree", Int), opt("picard_tol", Float), opt("max_iter", Int)],
        children: &[],
    },
    Section {
        name: "linear",
        keys: &[
            opt("alpha_expr", Str),
            opt("alpha_bound", Float),
            opt("beta_expr", Str),
            opt("theta_expr", Str),
            opt("epsilon", Float),
            opt("dominating_expr", Str),
            opt("denominator", Str),
            opt("tol", Float),
        ],
        children: &[],
    },
    Section {
        name: "risk",
        keys: &[
            opt("node", Int),
            opt("convex", Bool),
            opt("shift", Float),
            opt("lambdas", FloatList),
            opt("partner_expr", Str),
            opt("dominating_expr", Str),
            opt("past_nodes", IntList),
            opt("tol_multiplier", Float),
            opt("translation_tol", Float),
            opt("probe_samples", Int),
        ],
        children: &[],
    },
    Section {
        name: "compare",
        keys: &[
            opt("orientation", Str),
            opt("jump_weights", StrList),
            req("lipschitz_C", Float),
            opt("tol_multiplier", Float),
            opt("samples", Int),
        ],
        children: &[
            Section {
                name: "first",
                keys: &[req("g_expr", Str), req("psi_expr", Str)],
                children: &[],
            },
            Section {
                name: "second",
                keys: &[req("g_expr", Str), req("psi_expr", Str)],
                children: &[],
            },
            Section {
                name: "certificate",
                keys: &[req("theta_expr", Str), opt("epsilon", Float), req("dominating_expr", Str)],
                children: &[],
            },
        ],
    },
    Section {
        name: "semimartingale",
        keys: &[
            opt("type", Int),
            opt("f1_expr", Str),
            opt("f2_expr", Str),
            opt("f_expr", Str),
            opt("g_expr", Str),
            opt("lipschitz_C", Float),
            opt("grid_points", Int),
            opt("tol_multiplier", Float),
            opt("refinement", IntList),
        ],
        children: &[],
    },
    Section {
        name: "oracle",
        keys: &[opt("branching", Int), opt("replications", Int), opt("max_leaves", Int)],
        children: &[],
    },
    Section {
        name: "outputs",
        keys: &[opt("dir", Str), opt("paths_csv", Bool)],
        children: &[],
    },
];

/// Sections a subcommand cannot run without.
pub fn required_sections(command: &str) -> &'static [&'static str] {
    match command {
        "solve" | "risk" | "axioms" | "oracle" => &["grid", "diffusion", "mc", "driver", "psi"],
        "solve-linear" => &["grid", "diffusion", "mc", "psi", "linear"],
        "kernel" => &["grid", "linear"],
        "compare" => &["grid", "diffusion", "mc", "compare"],
        "semimartingale" => &["grid", "diffusion", "mc", "semimartingale"],
        _ => &[],
    }
}

fn kind_matches(kind: Kind, v: &Value) -> bool {
    match kind {
        Float => matches!(v, Value::Float(_) | Value::Integer(_)),
        Int => matches!(v, Value::Integer(_)),
        Str => matches!(v, Value::String(_)),
        Bool => matches!(v, Value::Boolean(_)),
        StrList => matches!(v, Value::Array(a) if a.iter().all(|x| x.is_str())),
        FloatList => matches!(v, Value::Array(a) if a.iter().all(|x| matches!(x, Value::Float(_) | Value::Integer(_)))),
        IntList => matches!(v, Value::Array(a) if a.iter().all(|x| x.is_integer())),
    }
}

fn check_section(path: &str, table: &Table, section: &Section, errors: &mut Vec<String>) {
    for (key, value) in table {
        let full = format!("{path}.{key}");
        if let Some(spec) = section.keys.iter().find(|k| k.name == key) {
            if !kind_matches(spec.kind, value) {
                errors.push(format!("{full}: expected {}", spec.kind));
            }
        } else if let Some(child) = section.children.iter().find(|c| c.name == key) {
            match value.as_table() {
                Some(t) => check_section(&full, t, child, errors),
                None => errors.push(format!("{full}: expected a table")),
            }
        } else {
            errors.push(format!("{full}: unknown key"));
        }
    }
    for k in section.keys.iter().filter(|k| k.required) {
        if !table.contains_key(k.name) {
            errors.push(format!("{path}.{}: missing required key", k.name));
        }
    }
    for c in section.children {
        if !table.contains_key(c.name) && c.keys.iter().any(|k| k.required) {
            errors.push(format!("{path}.{}: missing required section", c.name));
        }
    }
}

/// Structural checks: unknown sections and keys, value types, required
/// sections for `command` and required keys inside present sections.
pub fn check_schema(root: &Table, command: &str) -> Vec<String> {
    let mut errors = Vec::new();
    for (name, value) in root {
        if name == "schema_version" {
            match value.as_integer() {
                Some(SCHEMA_VERSION) => {}
                Some(v) => errors.push(format!("schema_version: unsupported version {v}, expected {SCHEMA_VERSION}")),
                None => errors.push("schema_version: expected an integer".into()),
            }
            continue;
        }
        match SECTIONS.iter().find(|s| s.name == name) {
            Some(section) => match value.as_table() {
                Some(t) => check_section(name, t, section, &mut errors),
                None => errors.push(format!("{name}: expected a table")),
            },
            None => errors.push(format!("{name}: unknown section")),
        }
    }
    for name in required_sections(command) {
        if !root.contains_key(*name) {
            errors.push(format!("{name}: missing required section"));
        }
    }
    errors
}

/// Typed read access to a schema-checked table.
#[derive(Clone, Copy)]
pub struct View<'a> {
    table: Option<&'a Table>,
}

impl<'a> View<'a> {
    pub fn root(t: &'a Table) -> Self {
        View { table: Some(t) }
    }

    pub fn get(&self, name: &str) -> View<'a> {
        View {
            table: self.table.and_then(|t| t.get(name)).and_then(Value::as_table),
        }
    }

    pub fn present(&self) -> bool {
        self.table.is_some()
    }

    fn value(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    pub fn has(&self, key: &str) -> bool {
        self.value(key).is_some()
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.value(key).and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> f64 {
        self.f64(key).unwrap_or(default)
    }

    pub fn i64(&self, key: &str) -> Option<i64> {
        self.value(key).and_then(Value::as_integer)
    }

    pub fn i64_or(&self, key: &str, default: i64) -> i64 {
        self.i64(key).unwrap_or(default)
    }

    pub fn str(&self, key: &str) -> Option<&'a str> {
        self.value(key).and_then(Value::as_str)
    }

    pub fn str_or(&self, key: &str, default: &'a str) -> &'a str {
        self.str(key).unwrap_or(default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> bool {
        self.value(key).and_then(Value::as_bool).unwrap_or(default)
    }

    pub fn strs(&self, key: &str) -> Vec<&'a str> {
        self.value(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default()
    }

    pub fn f64s(&self, key: &str) -> Option<Vec<f64>> {
        self.value(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64))).collect())
    }

    pub fn i64s(&self, key: &str) -> Option<Vec<i64>> {
        self.value(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_integer).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Table {
        text.parse().unwrap()
    }

    #[test]
    fn reports_every_problem() {
        let t = parse(
            r#"
            schema_version = 2
            colour = 1
            [grid]
            T = "one"
            extra = 3
            [mc]
            n_paths = 10
            "#,
        );
        let errs = check_schema(&t, "solve");
        for needle in [
            "schema_version",
            "colour: unknown section",
            "grid.T: expected a number",
            "grid.extra: unknown key",
            "grid.N: missing",
            "mc.seed: missing",
            "psi: missing required section",
            "driver: missing required section",
            "diffusion: missing required section",
        ] {
            assert!(errs.iter().any(|e| e.contains(needle)), "{needle} not in {errs:?}");
        }
    }

    #[test]
    fn nested_sections_are_checked() {
        let t = parse(
            r#"
            [compare]
            lipschitz_C = 1
            [compare.first]
            g_expr = "z"
            [compare.third]
            g_expr = "z"
            "#,
        );
        let errs = check_schema(&t, "compare");
        assert!(errs.iter().any(|e| e == "compare.first.psi_expr: missing required key"), "{errs:?}");
        assert!(errs.iter().any(|e| e == "compare.third: unknown key"), "{errs:?}");
        assert!(errs.iter().any(|e| e == "compare.second: missing required section"), "{errs:?}");
    }

    #[test]
    fn integers_are_numbers() {
        let t = parse("[grid]\nT = 1\nN = 4\n");
        assert!(check_schema(&t, "kernel").iter().all(|e| !e.starts_with("grid")));
        assert_eq!(View::root(&t).get("grid").f64("T"), Some(1.0));
    }
}
