//! Plain-text checkpoints of fitted parameters.
//!
//! A checkpoint is a sequence of `[name]` sections holding whitespace
//! separated decimals, one matrix row per line. Numbers are written with
//! the shortest representation that parses back to the same `f64`, and
//! parsing never depends on the locale.
//!
//! Sections: `phi_m`, `phi_v` (edge probabilities, `d x d`), `log_psi`
//! (one line), `logit_m`, `logit_v` (the exact log-odds; used on load when
//! present), then `mean_net j` / `logv_net j` for every node. Network
//! sections start with a `dims` line followed by the flat parameter buffer,
//! one weight row or bias vector per line.

use std::fmt::Write as _;

use crate::dag_posterior::VariationalParams;
use crate::error::{Error, Result};
use crate::hnm::HnmParams;
use crate::mlp::MlpParams;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: VariationalParams,
    pub hnm: Option<HnmParams>,
}

fn write_row(out: &mut String, row: &[f64]) {
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

fn write_matrix(out: &mut String, name: &str, d: usize, values: &[f64]) {
    let _ = writeln!(out, "[{name}]");
    for row in values.chunks(d) {
        write_row(out, row);
    }
}

fn write_net(out: &mut String, name: &str, net: &MlpParams) {
    let _ = writeln!(out, "[{name}]");
    let dims = net.dims();
    let _ = writeln!(
        out,
        "dims {}",
        dims.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    );
    for l in 0..net.n_layers() {
        for row in net.weight(l).chunks(dims[l]) {
            write_row(out, row);
        }
        write_row(out, net.bias(l));
    }
}

pub fn to_text(params: &VariationalParams, hnm: Option<&HnmParams>) -> String {
    let d = params.d();
    let mut out = format!("# d {d}\n");
    write_matrix(&mut out, "phi_m", d, &params.phi_m_matrix());
    write_matrix(&mut out, "phi_v", d, &params.phi_v_matrix());
    write_matrix(&mut out, "log_psi", d, params.log_psi());
    write_matrix(&mut out, "logit_m", d, params.logit_m());
    write_matrix(&mut out, "logit_v", d, params.logit_v());
    if let Some(h) = hnm {
        for (j, net) in h.mean_nets().iter().enumerate() {
            write_net(&mut out, &format!("mean_net {j}"), net);
        }
        for (j, net) in h.logv_nets().iter().enumerate() {
            write_net(&mut out, &format!("logv_net {j}"), net);
        }
    }
    out
}

struct Section {
    name: String,
    line: usize,
    dims: Option<Vec<usize>>,
    rows: Vec<Vec<f64>>,
}

impl Section {
    fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')) {
            let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate section [{name}]"),
                });
            }
            sections.push(Section {
                name,
                line,
                dims: None,
                rows: Vec::new(),
            });
            continue;
        }
        let sec = sections.last_mut().ok_or(Error::Parse {
            line,
            msg: "values before the first section header".into(),
        })?;
        if let Some(rest) = body.strip_prefix("dims") {
            let dims: std::result::Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
            sec.dims = Some(dims.map_err(|_| Error::Parse {
                line,
                msg: format!("bad dims line {body:?}"),
            })?);
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
        let row = row.map_err(|_| Error::Parse {
            line,
            msg: format!("bad number in {body:?}"),
        })?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite value {v}"),
            });
        }
        sec.rows.push(row);
    }
    Ok(sections)
}

fn take<'a>(sections: &'a [Section], name: &str) -> Option<&'a Section> {
    sections.iter().find(|s| s.name == name)
}

fn require<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    take(sections, name).ok_or(Error::Parse {
        line: 1,
        msg: format!("missing section [{name}]"),
    })
}

fn as_parse(sec: &Section, e: Error) -> Error {
    Error::Parse {
        line: sec.line,
        msg: format!("section [{}]: {e}", sec.name),
    }
}

pub fn parse(text: &str) -> Result<Checkpoint> {
    let sections = parse_sections(text)?;
    let psi = require(&sections, "log_psi")?;
    let log_psi = psi.flat();
    let d = log_psi.len();
    let params = match (take(&sections, "logit_m"), take(&sections, "logit_v")) {
        (Some(m), Some(v)) => VariationalParams::from_logits(m.flat(), v.flat(), log_psi).map_err(|e| as_parse(m, e))?,
        _ => {
            let m = require(&sections, "phi_m")?;
            let v = require(&sections, "phi_v")?;
            VariationalParams::from_probs(&m.flat(), &v.flat(), &log_psi).map_err(|e| as_parse(m, e))?
        }
    };
    let mut mean = Vec::new();
    let mut logv = Vec::new();
    for (prefix, nets) in [("mean_net", &mut mean), ("logv_net", &mut logv)] {
        for j in 0..d {
            let Some(sec) = take(&sections, &format!("{prefix} {j}")) else {
                break;
            };
            let dims = sec.dims.as_ref().ok_or(Error::Parse {
                line: sec.line,
                msg: format!("section [{}] has no dims line", sec.name),
            })?;
            nets.push(MlpParams::from_flat(dims, sec.flat()).map_err(|e| as_parse(sec, e))?);
        }
    }
    let hnm = match (mean.len(), logv.len()) {
        (0, 0) => None,
        (a, b) if a == d && b == d => Some(HnmParams::from_networks(mean, logv)?),
        (a, b) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected {d} mean and {d} log-variance networks, found {a} and {b}"),
            })
        }
    };
    Ok(Checkpoint { params, hnm })
}
