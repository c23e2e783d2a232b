//! MATPOWER case-file subset: parsing and exact re-serialization.
//!
//! Supported content: the `baseMVA`, `bus`, `gen`, `branch`, and `gencost`
//! sections of a version-2 case, restricted to the simple branch model — no
//! transformer taps, no phase shift, no line charging, no bus shunts — with
//! polynomial costs of degree ≤ 2. Anything outside the subset is rejected
//! with a line-numbered diagnostic instead of being silently approximated.
//!
//! [`serialize_matpower`] inverts [`parse_matpower`] exactly: for a network
//! that came from a case file, writing and re-parsing reproduces the same
//! in-memory values bit for bit. Unit conversion (MW → p.u., degrees →
//! radians, $/MWh → $/p.u.-h) rounds, so the writer searches the few
//! representable numbers around each back-converted value for one whose
//! conversion lands exactly on the stored per-unit quantity.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{Branch, Bus, Complex, CostCurve, Generator, LoadVector, Network};

const DEG_TO_RAD: f64 = PI / 180.0;
/// Angle-difference bounds stored when the case leaves them unspecified (0, 0).
const ANGLE_FREE: f64 = 2.0 * PI;

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing section `mpc.{0}`")]
    MissingSection(&'static str),
    #[error("line {line}: duplicate bus id {id}")]
    DuplicateBus { line: usize, id: usize },
    #[error("line {line}: reference to unknown bus {id}")]
    UnknownBus { line: usize, id: usize },
    #[error("line {line}: bus section defines no slack bus (type 3)")]
    NoSlack { line: usize },
    #[error("line {line}: second slack bus (id {id}); exactly one expected")]
    ExtraSlack { line: usize, id: usize },
    #[error("line {line}: unsupported feature: {message}")]
    Unsupported { line: usize, message: String },
    #[error("network graph is not connected")]
    Disconnected,
}

struct Row {
    line: usize,
    values: Vec<f64>,
}

struct RawCase {
    name: String,
    base_mva: f64,
    sections: HashMap<&'static str, (usize, Vec<Row>)>,
}

const SECTION_NAMES: [&str; 4] = ["bus", "gen", "branch", "gencost"];

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn scan(text: &str) -> Result<RawCase, ParseError> {
    let mut name = String::from("case");
    let mut base_mva = None;
    let mut sections: HashMap<&'static str, (usize, Vec<Row>)> = HashMap::new();
    let mut current: Option<&'static str> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw_line).trim();
        if line.is_empty() {
            continue;
        }

        if let Some(section) = current {
            if line.starts_with(']') {
                current = None;
                continue;
            }
            let body = line.trim_end_matches(';').trim();
            let mut values = Vec::new();
            for tok in body.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| ParseError::Malformed {
                    line: line_no,
                    message: format!("expected a number, found `{tok}`"),
                })?;
                values.push(v);
            }
            if !values.is_empty() {
                sections.get_mut(section).unwrap().1.push(Row { line: line_no, values });
            }
            continue;
        }

        if let Some(rest) = line.strip_prefix("function") {
            if let Some((_, rhs)) = rest.split_once('=') {
                name = rhs.trim().to_string();
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("mpc.baseMVA") {
            let rhs = rest.trim_start_matches([' ', '\t', '=']).trim_end_matches(';').trim();
            let v: f64 = rhs.parse().map_err(|_| ParseError::Malformed {
                line: line_no,
                message: format!("bad baseMVA value `{rhs}`"),
            })?;
            if !(v > 0.0) {
                return Err(ParseError::Malformed {
                    line: line_no,
                    message: format!("baseMVA must be positive, got {v}"),
                });
            }
            base_mva = Some(v);
            continue;
        }
        for section in SECTION_NAMES {
            let prefix = format!("mpc.{section}");
            if let Some(rest) = line.strip_prefix(prefix.as_str()) {
                let rest = rest.trim_start();
                if rest.starts_with('=') && rest.trim_start_matches(['=', ' ', '\t']).starts_with('[') {
                    if sections.contains_key(section) {
                        return Err(ParseError::Malformed {
                            line: line_no,
                            message: format!("duplicate section `mpc.{section}`"),
                        });
                    }
                    sections.insert(section, (line_no, Vec::new()));
                    current = Some(section);
                    break;
                }
            }
        }
    }

    let base_mva = base_mva.ok_or(ParseError::MissingSection("baseMVA"))?;
    for section in SECTION_NAMES {
        if !sections.contains_key(section) {
            return Err(ParseError::MissingSection(match section {
                "bus" => "bus",
                "gen" => "gen",
                "branch" => "branch",
                _ => "gencost",
            }));
        }
    }
    Ok(RawCase { name, base_mva, sections })
}

fn need(row: &Row, count: usize, what: &str) -> Result<(), ParseError> {
    if row.values.len() < count {
        return Err(ParseError::Malformed {
            line: row.line,
            message: format!("{what} row needs {count} columns, found {}", row.values.len()),
        });
    }
    Ok(())
}

fn as_bus_id(v: f64, line: usize) -> Result<usize, ParseError> {
    if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(ParseError::Malformed {
            line,
            message: format!("bus id must be a positive integer, got {v}"),
        })
    }
}

/// Parse a MATPOWER v2 case into a per-unit [`Network`] and its nominal loads.
pub fn parse_matpower(text: &str) -> Result<(Network, LoadVector), ParseError> {
    let raw = scan(text)?;
    let base = raw.base_mva;

    let (bus_header_line, bus_rows) = &raw.sections["bus"];
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut p_load = Vec::with_capacity(bus_rows.len());
    let mut q_load = Vec::with_capacity(bus_rows.len());
    let mut index_of: HashMap<usize, usize> = HashMap::new();
    let mut slack: Option<usize> = None;

    for row in bus_rows {
        need(row, 13, "bus")?;
        let v = &row.values;
        let id = as_bus_id(v[0], row.line)?;
        if index_of.contains_key(&id) {
            return Err(ParseError::DuplicateBus { line: row.line, id });
        }
        let is_slack = match v[1] as i64 {
            1 | 2 => false,
            3 => {
                if slack.is_some() {
                    return Err(ParseError::ExtraSlack { line: row.line, id });
                }
                slack = Some(buses.len());
                true
            }
            t => {
                return Err(ParseError::Unsupported {
                    line: row.line,
                    message: format!("bus type {t} (only PQ, PV, and slack buses are modeled)"),
                })
            }
        };
        if v[4] != 0.0 || v[5] != 0.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "bus shunt (Gs/Bs must be 0)".into(),
            });
        }
        let (v_max, v_min) = (v[11], v[12]);
        if !(v_min > 0.0 && v_min <= v_max) {
            return Err(ParseError::Malformed {
                line: row.line,
                message: format!("need 0 < Vmin ≤ Vmax, got Vmin={v_min}, Vmax={v_max}"),
            });
        }
        index_of.insert(id, buses.len());
        buses.push(Bus { id, v_min, v_max, is_slack });
        p_load.push(v[2] / base);
        q_load.push(v[3] / base);
    }
    if slack.is_none() {
        return Err(ParseError::NoSlack { line: *bus_header_line });
    }

    let (_, gen_rows) = &raw.sections["gen"];
    let mut generators = Vec::with_capacity(gen_rows.len());
    for row in gen_rows {
        need(row, 10, "gen")?;
        let v = &row.values;
        let id = as_bus_id(v[0], row.line)?;
        let bus = *index_of
            .get(&id)
            .ok_or(ParseError::UnknownBus { line: row.line, id })?;
        if v[7] != 1.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "out-of-service generator (status must be 1)".into(),
            });
        }
        let (q_max, q_min) = (v[3] / base, v[4] / base);
        let (p_max, p_min) = (v[8] / base, v[9] / base);
        if p_min > p_max || q_min > q_max {
            return Err(ParseError::Malformed {
                line: row.line,
                message: "generator bounds must satisfy min ≤ max".into(),
            });
        }
        generators.push(Generator {
            bus,
            p_min,
            p_max,
            q_min,
            q_max,
            cost: CostCurve { c2: 0.0, c1: 0.0, c0: 0.0 },
        });
    }

    let (_, branch_rows) = &raw.sections["branch"];
    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        need(row, 13, "branch")?;
        let v = &row.values;
        let from_id = as_bus_id(v[0], row.line)?;
        let to_id = as_bus_id(v[1], row.line)?;
        let from = *index_of
            .get(&from_id)
            .ok_or(ParseError::UnknownBus { line: row.line, id: from_id })?;
        let to = *index_of
            .get(&to_id)
            .ok_or(ParseError::UnknownBus { line: row.line, id: to_id })?;
        if from == to {
            return Err(ParseError::Malformed {
                line: row.line,
                message: format!("branch connects bus {from_id} to itself"),
            });
        }
        let (r, x) = (v[2], v[3]);
        if r == 0.0 && x == 0.0 {
            return Err(ParseError::Malformed {
                line: row.line,
                message: "branch with zero series impedance".into(),
            });
        }
        if v[4] != 0.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "line charging (branch b must be 0)".into(),
            });
        }
        if v[5] <= 0.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "RATE_A must be a positive thermal limit (0 = unlimited)".into(),
            });
        }
        if v[8] != 0.0 && v[8] != 1.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: format!("off-nominal tap ratio {}", v[8]),
            });
        }
        if v[9] != 0.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: format!("phase-shift angle {}", v[9]),
            });
        }
        if v[10] != 1.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "out-of-service branch (status must be 1)".into(),
            });
        }
        let (angle_min, angle_max) = if v[11] == 0.0 && v[12] == 0.0 {
            (-ANGLE_FREE, ANGLE_FREE)
        } else {
            (v[11] * DEG_TO_RAD, v[12] * DEG_TO_RAD)
        };
        if !(angle_min <= 0.0 && 0.0 <= angle_max) {
            return Err(ParseError::Malformed {
                line: row.line,
                message: "angle-difference bounds must straddle 0".into(),
            });
        }
        branches.push(Branch {
            from,
            to,
            r,
            x,
            admittance: Complex::new(r, x).inv(),
            s_max: v[5] / base,
            angle_min,
            angle_max,
        });
    }

    let (cost_header_line, cost_rows) = &raw.sections["gencost"];
    if cost_rows.len() != generators.len() {
        return Err(ParseError::Malformed {
            line: *cost_header_line,
            message: format!(
                "{} gencost rows for {} generators",
                cost_rows.len(),
                generators.len()
            ),
        });
    }
    let base_sq = base * base;
    for (gen, row) in generators.iter_mut().zip(cost_rows) {
        need(row, 4, "gencost")?;
        let v = &row.values;
        if v[0] != 2.0 {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: "only polynomial cost model 2 is supported".into(),
            });
        }
        let ncost = v[3];
        if ncost.fract() != 0.0 || !(1.0..=3.0).contains(&ncost) {
            return Err(ParseError::Unsupported {
                line: row.line,
                message: format!("polynomial degree must be ≤ 2 (ncost 1–3), got ncost={ncost}"),
            });
        }
        let ncost = ncost as usize;
        need(row, 4 + ncost, "gencost")?;
        let coeffs = &v[4..4 + ncost];
        gen.cost = match ncost {
            3 => CostCurve { c2: coeffs[0] * base_sq, c1: coeffs[1] * base, c0: coeffs[2] },
            2 => CostCurve { c2: 0.0, c1: coeffs[0] * base, c0: coeffs[1] },
            _ => CostCurve { c2: 0.0, c1: 0.0, c0: coeffs[0] },
        };
        if gen.cost.c2 < 0.0 {
            return Err(ParseError::Malformed {
                line: row.line,
                message: "negative quadratic cost coefficient".into(),
            });
        }
    }

    // Connectivity: undirected reachability from the first bus.
    let mut seen = vec![false; buses.len()];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for br in &branches {
            let next = if br.from == i {
                br.to
            } else if br.to == i {
                br.from
            } else {
                continue;
            };
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(ParseError::Disconnected);
    }

    let net = Network {
        name: raw.name,
        base_mva: raw.base_mva,
        buses,
        generators,
        branches,
    };
    let loads = LoadVector { p: p_load, q: q_load };
    Ok((net, loads))
}

fn ulp_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn ulp_down(x: f64) -> f64 {
    -ulp_up(-x)
}

/// Find a number `y` whose image under `map` is exactly `pu`, searching the
/// few representable values around `center`. Among hits, prefer the one with
/// the shortest decimal form so written files stay readable.
fn best_preimage(pu: f64, center: f64, map: impl Fn(f64) -> f64) -> f64 {
    if pu == 0.0 {
        return 0.0;
    }
    let mut candidates = Vec::new();
    let mut y = center;
    for _ in 0..8 {
        if map(y) == pu {
            candidates.push(y);
        }
        y = ulp_up(y);
    }
    y = ulp_down(center);
    for _ in 0..8 {
        if map(y) == pu {
            candidates.push(y);
        }
        y = ulp_down(y);
    }
    candidates
        .into_iter()
        .min_by_key(|c| format!("{c}").len())
        .unwrap_or(center)
}

fn from_div(pu: f64, base: f64) -> f64 {
    best_preimage(pu, pu * base, |y| y / base)
}

fn from_mul(pu: f64, factor: f64) -> f64 {
    best_preimage(pu, pu / factor, |y| y * factor)
}

/// Write a network and its loads back out as a MATPOWER v2 case.
///
/// Values that originated from a case file serialize back exactly; parsing
/// the output reproduces the same `Network` and `LoadVector`.
pub fn serialize_matpower(net: &Network, loads: &LoadVector) -> String {
    use std::fmt::Write;

    let base = net.base_mva;
    let mut out = String::new();
    writeln!(out, "function mpc = {}", net.name).unwrap();
    out.push_str("%% MATPOWER Case Format : Version 2\nmpc.version = '2';\n\n");
    writeln!(out, "%% system MVA base\nmpc.baseMVA = {base};\n").unwrap();

    out.push_str("%% bus data\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin\nmpc.bus = [\n");
    for (i, bus) in net.buses.iter().enumerate() {
        let bus_type = if bus.is_slack { 3 } else { 1 };
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t0\t0\t1\t1\t0\t0\t1\t{}\t{};",
            bus.id,
            bus_type,
            from_div(loads.p[i], base),
            from_div(loads.q[i], base),
            bus.v_max,
            bus.v_min
        )
        .unwrap();
    }
    out.push_str("];\n\n");

    out.push_str("%% generator data\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin\tPc1\tPc2\tQc1min\tQc1max\tQc2min\tQc2max\tramp_agc\tramp_10\tramp_30\tramp_q\tapf\nmpc.gen = [\n");
    for gen in &net.generators {
        writeln!(
            out,
            "\t{}\t0\t0\t{}\t{}\t1\t{}\t1\t{}\t{}\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;",
            net.buses[gen.bus].id,
            from_div(gen.q_max, base),
            from_div(gen.q_min, base),
            base,
            from_div(gen.p_max, base),
            from_div(gen.p_min, base),
        )
        .unwrap();
    }
    out.push_str("];\n\n");

    out.push_str("%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax\nmpc.branch = [\n");
    for br in &net.branches {
        let rate = from_div(br.s_max, base);
        let (angmin, angmax) = if br.angle_min == -ANGLE_FREE && br.angle_max == ANGLE_FREE {
            (0.0, 0.0)
        } else {
            (from_mul(br.angle_min, DEG_TO_RAD), from_mul(br.angle_max, DEG_TO_RAD))
        };
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t0\t{}\t{}\t{}\t0\t0\t1\t{}\t{};",
            net.buses[br.from].id,
            net.buses[br.to].id,
            br.r,
            br.x,
            rate,
            rate,
            rate,
            angmin,
            angmax,
        )
        .unwrap();
    }
    out.push_str("];\n\n");

    out.push_str("%% generator cost data\n%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0\nmpc.gencost = [\n");
    let base_sq = base * base;
    for gen in &net.generators {
        writeln!(
            out,
            "\t2\t0\t0\t3\t{}\t{}\t{};",
            from_mul(gen.cost.c2, base_sq),
            from_mul(gen.cost.c1, base),
            gen.cost.c0,
        )
        .unwrap();
    }
    out.push_str("];\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use proptest::prelude::*;

    #[test]
    fn parses_bundled_case14() {
        let (net, loads) = parse_matpower(cases::CASE14).unwrap();
        assert_eq!(net.name, "case14");
        assert_eq!(net.n_buses(), 14);
        assert_eq!(net.n_generators(), 5);
        assert_eq!(net.n_branches(), 20);
        assert_eq!(net.slack(), 0);
        // The classic case carries 11 active and 11 reactive loads.
        assert_eq!(loads.count_nonzero_p(1e-9), 11);
        assert_eq!(loads.count_nonzero_q(1e-9), 11);
        // p.u. conversion: bus 2 carries 21.7 MW on a 100 MVA base.
        assert!((loads.p[1] - 0.217).abs() < 1e-12);
    }

    #[test]
    fn parses_bundled_case30() {
        let (net, loads) = parse_matpower(cases::CASE30).unwrap();
        assert_eq!(net.n_buses(), 30);
        assert_eq!(net.n_generators(), 6);
        assert_eq!(net.n_branches(), 41);
        assert_eq!(loads.count_nonzero_p(1e-9), 20);
        assert_eq!(loads.count_nonzero_q(1e-9), 20);
    }

    #[test]
    fn parses_minimal_two_bus_case() {
        let (net, loads) = parse_matpower(cases::CASE2).unwrap();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.n_branches(), 1);
        assert_eq!(loads.p[1], 0.5);
        assert_eq!(loads.q[1], 0.1);
        // Unlimited-angle default: ±2π.
        assert_eq!(net.branches[0].angle_min, -(2.0 * std::f64::consts::PI));
    }

    #[test]
    fn missing_gencost_is_named() {
        let text = cases::CASE2.split("mpc.gencost").next().unwrap();
        let err = parse_matpower(text).unwrap_err();
        assert!(matches!(err, ParseError::MissingSection("gencost")), "{err}");
    }

    #[test]
    fn duplicate_bus_id_reports_line() {
        let text = cases::CASE2.replace("\t2\t1\t50\t10", "\t1\t1\t50\t10");
        match parse_matpower(&text).unwrap_err() {
            ParseError::DuplicateBus { id: 1, line } => assert!(line > 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_branch_bus_rejected() {
        let text = cases::CASE2.replace("\t1\t2\t0\t0.1", "\t1\t7\t0\t0.1");
        match parse_matpower(&text).unwrap_err() {
            ParseError::UnknownBus { id: 7, .. } => {}
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn slack_must_be_unique_and_present() {
        let none = cases::CASE2.replace("\t1\t3\t0\t0", "\t1\t1\t0\t0");
        assert!(matches!(parse_matpower(&none).unwrap_err(), ParseError::NoSlack { .. }));
        let two = cases::CASE2.replace("\t2\t1\t50\t10", "\t2\t3\t50\t10");
        assert!(matches!(parse_matpower(&two).unwrap_err(), ParseError::ExtraSlack { id: 2, .. }));
    }

    #[test]
    fn unsupported_features_rejected() {
        // Off-nominal tap ratio on the single branch of the 2-bus case.
        let tap = cases::CASE2.replace("\t9900\t9900\t9900\t0\t0\t1", "\t9900\t9900\t9900\t0.9\t0\t1");
        assert!(matches!(parse_matpower(&tap).unwrap_err(), ParseError::Unsupported { .. }));
        // Bus shunt.
        let shunt = cases::CASE2.replace("\t2\t1\t50\t10\t0\t0", "\t2\t1\t50\t10\t0\t19");
        assert!(matches!(parse_matpower(&shunt).unwrap_err(), ParseError::Unsupported { .. }));
        // Piecewise-linear cost model.
        let pwl = cases::CASE2.replace("\t2\t0\t0\t3\t0.01", "\t1\t0\t0\t3\t0.01");
        assert!(matches!(parse_matpower(&pwl).unwrap_err(), ParseError::Unsupported { .. }));
    }

    #[test]
    fn malformed_token_reports_line_number() {
        let text = cases::CASE2.replace("\t2\t1\t50\t10", "\t2\t1\tfifty\t10");
        let wanted_line = cases::CASE2
            .lines()
            .position(|l| l.contains("\t2\t1\t50\t10"))
            .unwrap()
            + 1;
        match parse_matpower(&text).unwrap_err() {
            ParseError::Malformed { line, message } => {
                assert_eq!(line, wanted_line);
                assert!(message.contains("fifty"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn fixtures_round_trip_exactly() {
        for text in [cases::CASE2, cases::CASE3_STAR, cases::CASE14, cases::CASE30] {
            let (net, loads) = parse_matpower(text).unwrap();
            let written = serialize_matpower(&net, &loads);
            let (net2, loads2) = parse_matpower(&written).unwrap();
            assert_eq!(net, net2);
            assert_eq!(loads, loads2);
        }
    }

    proptest! {
        // Loads drawn on a centesimal grid (two decimals of MW, like real
        // case files) survive write → parse bit-for-bit.
        #[test]
        fn decimal_loads_round_trip(
            raw_p in proptest::collection::vec(-5000i32..20000, 14),
            raw_q in proptest::collection::vec(-5000i32..10000, 14),
        ) {
            let (net, _) = parse_matpower(cases::CASE14).unwrap();
            let loads = crate::grid::LoadVector {
                p: raw_p.iter().map(|&k| f64::from(k) / 100.0 / net.base_mva).collect(),
                q: raw_q.iter().map(|&k| f64::from(k) / 100.0 / net.base_mva).collect(),
            };
            let written = serialize_matpower(&net, &loads);
            let (net2, loads2) = parse_matpower(&written).unwrap();
            prop_assert_eq!(net, net2);
            prop_assert_eq!(loads, loads2);
        }
    }
}
