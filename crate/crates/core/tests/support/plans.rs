//! Random plan files with a known job count.

use proptest::prelude::*;

#[derive(Clone, Debug)]
pub enum Dom {
    /// lo, hi, step in tenths
    Range(u32, u32, u32),
    Select(Vec<String>),
    Single(String),
}

impl Dom {
    pub fn expected(&self) -> usize {
        match self {
            Dom::Range(lo, hi, step) => ((hi - lo) / step + 1) as usize,
            Dom::Select(v) => v.len(),
            Dom::Single(_) => 1,
        }
    }

    fn line(&self, name: &str) -> String {
        let tenths = |v: u32| format!("{}.{}", v / 10, v % 10);
        match self {
            Dom::Range(lo, hi, step) => {
                format!("parameter {name} range from {} to {} step {}", tenths(*lo), tenths(*hi), tenths(*step))
            }
            Dom::Select(v) => format!("parameter {name} \"label\" select anyof {}", v.join(" ")),
            Dom::Single(v) => format!("parameter {name} single {v}"),
        }
    }
}

pub fn dom() -> impl Strategy<Value = Dom> {
    prop_oneof![
        (0u32..50, 0u32..150, 1u32..25).prop_map(|(lo, span, step)| Dom::Range(lo, lo + span, step)),
        prop::collection::btree_set("[a-z][a-z0-9]{0,4}", 1..6).prop_map(|s| Dom::Select(s.into_iter().collect())),
        "[a-z]{1,6}".prop_map(Dom::Single),
    ]
}

pub fn plan_text(doms: &[Dom]) -> String {
    let mut s = String::from("# generated\n");
    for (i, d) in doms.iter().enumerate() {
        s.push_str(&d.line(&format!("p{i}")));
        s.push('\n');
    }
    s.push_str("task main\n    copy in.dat node:in.dat\n    execute model");
    for i in 0..doms.len() {
        s.push_str(&format!(" -{i} $p{i}"));
    }
    s.push_str("\nendtask\n");
    s
}
