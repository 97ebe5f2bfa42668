//! JSON and CSV file formats.

use std::io::{Read, Write};

use qdecomp_core::envs::GridSpec;
use qdecomp_core::mdp::Outcome;
use qdecomp_core::uncertainty::{UncertaintyMap, VisitationReport};
use qdecomp_core::{ReturnDistribution, TabularMdp, Transition};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    initial_state: usize,
    terminals: Vec<usize>,
    transitions: Vec<RowDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RowDoc {
    s: usize,
    a: usize,
    next: Vec<NextDoc>,
    rewards: Vec<RewardDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NextDoc {
    s2: usize,
    p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RewardDoc {
    s2: usize,
    r: f64,
}

/// Writes `{n_states, n_actions, gamma, initial_state, terminals,
/// transitions: [{s, a, next: [{s2, p}], rewards: [{s2, r}]}]}`.
pub fn write_mdp_json<W: Write>(mdp: &TabularMdp, out: W) -> Result<()> {
    let mut transitions = Vec::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let outcomes = mdp.outcomes(s, a);
            transitions.push(RowDoc {
                s,
                a,
                next: outcomes.iter().map(|o| NextDoc { s2: o.next, p: o.prob }).collect(),
                rewards: outcomes.iter().map(|o| RewardDoc { s2: o.next, r: o.reward }).collect(),
            });
        }
    }
    let doc = MdpDoc {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
        initial_state: mdp.initial_state(),
        terminals: mdp.terminals().iter().copied().collect(),
        transitions,
    };
    serde_json::to_writer_pretty(out, &doc).map_err(|e| RunError::Config(e.to_string()))
}

/// Reads the format of [`write_mdp_json`]. Rows not listed are invalid
/// unless the state is terminal; missing rewards default to 0.
pub fn read_mdp_json<R: Read>(input: R) -> Result<TabularMdp> {
    let doc: MdpDoc = serde_json::from_reader(input).map_err(|e| RunError::Config(e.to_string()))?;
    let na = doc.n_actions;
    let mut kernel: Vec<Vec<Outcome>> = vec![Vec::new(); doc.n_states * na];
    for &t in &doc.terminals {
        for a in 0..na {
            if let Some(row) = kernel.get_mut(t * na + a) {
                *row = vec![Outcome { next: t, prob: 1.0, reward: 0.0 }];
            }
        }
    }
    for row in doc.transitions {
        if row.s >= doc.n_states || row.a >= na {
            return Err(RunError::Config(format!("transition ({}, {}) out of range", row.s, row.a)));
        }
        let outcomes = row
            .next
            .iter()
            .map(|n| {
                let reward = row.rewards.iter().find(|r| r.s2 == n.s2).map_or(0.0, |r| r.r);
                Outcome { next: n.s2, prob: n.p, reward }
            })
            .collect();
        kernel[row.s * na + row.a] = outcomes;
    }
    Ok(TabularMdp::new(doc.n_states, na, doc.gamma, doc.initial_state, doc.terminals, kernel)?)
}

fn csv_error(e: csv::Error) -> RunError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RunError::io("<csv>", io),
        other => RunError::Config(format!("{other:?}")),
    }
}

fn flush<W: Write>(w: csv::Writer<W>) -> Result<()> {
    w.into_inner().map_err(|e| RunError::io("<csv>", e.into_error()))?.flush().map_err(|e| RunError::io("<csv>", e))
}

/// `value,probability` rows in increasing value order.
pub fn write_distribution_csv<W: Write>(dist: &ReturnDistribution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["value", "probability"]).map_err(csv_error)?;
    for &(v, p) in dist.atoms() {
        w.write_record([v.to_string(), p.to_string()]).map_err(csv_error)?;
    }
    flush(w)
}

/// `s,a,r,s2,terminal` rows.
pub fn write_dataset_csv<W: Write>(data: &[Transition], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "a", "r", "s2", "terminal"]).map_err(csv_error)?;
    for t in data {
        w.write_record([
            t.state.to_string(),
            t.action.to_string(),
            t.reward.to_string(),
            t.next_state.to_string(),
            u8::from(t.terminal).to_string(),
        ])
        .map_err(csv_error)?;
    }
    flush(w)
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<Transition>> {
    #[derive(Deserialize)]
    struct Row {
        s: usize,
        a: usize,
        r: f64,
        s2: usize,
        terminal: u8,
    }
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            Ok(Transition { state: row.s, action: row.a, reward: row.r, next_state: row.s2, terminal: row.terminal != 0 })
        })
        .collect()
}

/// `state,row,col,action,epistemic_raw,aleatoric_raw,epistemic_norm,aleatoric_norm,terminal`.
/// `row`/`col` are 1-based grid coordinates (empty without a grid); the
/// normalised columns are empty for an unnormalised map.
pub fn write_map_csv<W: Write>(map: &UncertaintyMap, grid: Option<&GridSpec>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "state",
        "row",
        "col",
        "action",
        "epistemic_raw",
        "aleatoric_raw",
        "epistemic_norm",
        "aleatoric_norm",
        "terminal",
    ])
    .map_err(csv_error)?;
    for e in &map.entries {
        let est = e.estimate;
        let (row, col) = match grid.map(|g| g.cell_of(est.state)) {
            Some(Ok((r, c))) => (r.to_string(), c.to_string()),
            _ => (String::new(), String::new()),
        };
        let (en, an) = match e.normalized {
            Some((en, an)) => (en.to_string(), an.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            est.state.to_string(),
            row,
            col,
            est.action.to_string(),
            est.epistemic.to_string(),
            est.aleatoric.to_string(),
            en,
            an,
            u8::from(e.terminal).to_string(),
        ])
        .map_err(csv_error)?;
    }
    flush(w)
}

/// `state,visits,epistemic` for states with at least one visit.
pub fn write_scatter_csv<W: Write>(report: &VisitationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "visits", "epistemic"]).map_err(csv_error)?;
    for (s, visits, epi) in report.scatter() {
        w.write_record([s.to_string(), visits.to_string(), epi.to_string()]).map_err(csv_error)?;
    }
    flush(w)
}

/// `state,reference_aleatoric,scaled_aleatoric`.
pub fn write_reference_csv<W: Write>(map: &UncertaintyMap, out: W) -> Result<()> {
    let Some(reference) = &map.reference_scale else {
        return Err(RunError::Config("map has no reference attached".into()));
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "reference_aleatoric", "scaled_aleatoric"]).map_err(csv_error)?;
    for (i, e) in map.entries.iter().enumerate() {
        w.write_record([e.estimate.state.to_string(), reference[i].to_string(), map.scaled_aleatoric(i).to_string()])
            .map_err(csv_error)?;
    }
    flush(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qdecomp_core::envs::{build_bandit, build_cliff_grid};

    #[test]
    fn mdp_json_round_trip() {
        for mdp in [build_bandit(0.8, 1.0, -1.0).unwrap(), build_cliff_grid(&GridSpec::cliff_2x6()).unwrap()] {
            let mut buf = Vec::new();
            write_mdp_json(&mdp, &mut buf).unwrap();
            assert_eq!(read_mdp_json(buf.as_slice()).unwrap(), mdp);
        }
    }

    #[test]
    fn mdp_json_rejects_bad_rows() {
        let text = r#"{"n_states": 2, "n_actions": 1, "gamma": 0.9, "initial_state": 0, "terminals": [1],
            "transitions": [{"s": 0, "a": 0, "next": [{"s2": 1, "p": 0.5}], "rewards": []}]}"#;
        assert!(matches!(read_mdp_json(text.as_bytes()), Err(RunError::Core(_))));
        let ok = text.replace("0.5", "1.0");
        let mdp = read_mdp_json(ok.as_bytes()).unwrap();
        assert_eq!(mdp.outcomes(0, 0)[0].reward, 0.0);
        assert!(mdp.is_terminal(1));
    }

    #[test]
    fn distribution_csv() {
        let d = ReturnDistribution::new(vec![(1.0, 0.8), (-1.0, 0.2)], 1e-9).unwrap();
        let mut buf = Vec::new();
        write_distribution_csv(&d, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "value,probability\n-1,0.2\n1,0.8\n");
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = vec![
            Transition { state: 0, action: 3, reward: 0.0, next_state: 5, terminal: false },
            Transition { state: 5, action: 1, reward: -1.0, next_state: 7, terminal: true },
        ];
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s,a,r,s2,terminal\n0,3,0,5,0\n"));
        assert_eq!(read_dataset_csv(buf.as_slice()).unwrap(), data);
    }
}
