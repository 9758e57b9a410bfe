//! File formats: state and expansion-table JSON, spectrum/branch/orbit/physical
//! CSV, and SHA-256 digests for the run manifest.
//!
//! CSV floats carry 17 significant digits; JSON floats use the shortest
//! representation that parses back to the same binary64 value.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continuation::{Branch, BranchPoint};
use crate::eigen::EigenPair;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, ModelKind, ModelParams, Observables, StateVector};
use crate::linalg::C64;
use crate::reduced::{LiftedOrbit, Trajectory};
use crate::spectral::{to_physical, ModeGrid};
use crate::ssm::{ExpansionTable, FirstOrder, Monomial, MultiIndex, Resonance, ResonanceEntry, Style, Treatment};

pub const STATE_FORMAT: &str = "channel-ssm/state";
pub const EXPANSION_FORMAT: &str = "channel-ssm/expansion";
pub const FORMAT_VERSION: u32 = 1;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::InvalidParameter(format!("cannot parse {what} from {s:?}")))
}

fn split_re_im(v: &[C64]) -> (Vec<f64>, Vec<f64>) {
    (v.iter().map(|c| c.re).collect(), v.iter().map(|c| c.im).collect())
}

fn join_re_im(re: &[f64], im: &[f64], what: &str) -> Result<Vec<C64>> {
    if re.len() != im.len() {
        return Err(Error::Dimension(format!("{what}: {} real parts but {} imaginary parts", re.len(), im.len())));
    }
    Ok(re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

fn check_format(found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected || version != FORMAT_VERSION {
        return Err(Error::InvalidParameter(format!(
            "expected {expected} version {FORMAT_VERSION}, found {found} version {version}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- states

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub k: f64,
    pub n1: usize,
    pub n2: usize,
    pub params: ModelParams,
    pub f: f64,
    pub c: f64,
    /// Coefficients of modes `0..=n1`, index `(n nfields + field) (n2 + 1) + m`.
    pub coeffs_re: Vec<f64>,
    pub coeffs_im: Vec<f64>,
}

impl StateFile {
    pub fn new(grid: &ModeGrid, params: &ModelParams, state: &StateVector) -> Result<Self> {
        state.check(grid)?;
        let (coeffs_re, coeffs_im) = split_re_im(&state.coeffs);
        Ok(StateFile {
            format: STATE_FORMAT.into(),
            version: FORMAT_VERSION,
            model: ModelKind::from_nfields(grid.nfields)?,
            k: grid.k,
            n1: grid.n1,
            n2: grid.n2,
            params: *params,
            f: state.f,
            c: state.c,
            coeffs_re,
            coeffs_im,
        })
    }

    pub fn grid(&self) -> Result<ModeGrid> {
        ModeGrid::new(self.k, self.n1, self.n2, self.model.nfields())
    }

    pub fn state(&self) -> Result<StateVector> {
        check_format(&self.format, self.version, STATE_FORMAT)?;
        let s = StateVector { coeffs: join_re_im(&self.coeffs_re, &self.coeffs_im, "state")?, f: self.f, c: self.c };
        s.check(&self.grid()?)?;
        Ok(s)
    }
}

pub fn write_state(path: &Path, grid: &ModeGrid, params: &ModelParams, state: &StateVector) -> Result<()> {
    write_json(path, &StateFile::new(grid, params, state)?)
}

pub fn read_state(path: &Path) -> Result<StateFile> {
    let f: StateFile = read_json(path)?;
    f.state()?;
    Ok(f)
}

// ---------------------------------------------------------------- expansion tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialRecord {
    pub alpha: Vec<u32>,
    pub k_re: Vec<f64>,
    pub k_im: Vec<f64>,
    pub r_re: Vec<f64>,
    pub r_im: Vec<f64>,
    pub treatment: Treatment,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonanceRecord {
    pub alpha: Vec<u32>,
    pub s_re: f64,
    pub s_im: f64,
    /// `none`, `internal` or `cross`.
    pub kind: String,
    /// Matched reduced coordinates (internal resonances).
    #[serde(default)]
    pub q: Vec<usize>,
    #[serde(default)]
    pub matched_re: f64,
    #[serde(default)]
    pub matched_im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearRecord {
    pub value_re: f64,
    pub value_im: f64,
    pub mode: Option<i64>,
    pub conjugate_of: Option<usize>,
    pub left_re: Vec<f64>,
    pub left_im: Vec<f64>,
    /// Row of `R_1` (off-diagonal entries are nonzero only for Jordan blocks).
    pub r1_re: Vec<f64>,
    pub r1_im: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionFile {
    pub format: String,
    pub version: u32,
    pub r: usize,
    pub order: usize,
    pub style: Style,
    pub linear: Vec<LinearRecord>,
    pub monomials: Vec<MonomialRecord>,
    pub resonances: Vec<ResonanceRecord>,
}

impl ExpansionFile {
    pub fn from_table(table: &ExpansionTable) -> Self {
        let first = &table.first;
        let linear = (0..table.r)
            .map(|q| {
                let (left_re, left_im) = split_re_im(&first.left[q]);
                let (r1_re, r1_im) = split_re_im(&first.r1[q]);
                LinearRecord {
                    value_re: first.r1[q][q].re,
                    value_im: first.r1[q][q].im,
                    mode: first.modes[q],
                    conjugate_of: first.conjugate_of[q],
                    left_re,
                    left_im,
                    r1_re,
                    r1_im,
                }
            })
            .collect();
        let monomials = table
            .monomials()
            .map(|m| {
                let (k_re, k_im) = split_re_im(&m.k);
                let (r_re, r_im) = split_re_im(&m.r);
                MonomialRecord { alpha: m.alpha.0.clone(), k_re, k_im, r_re, r_im, treatment: m.treatment, residual: m.residual }
            })
            .collect();
        let resonances = table
            .resonance_log
            .iter()
            .map(|e| {
                let (kind, q, matched) = match &e.resonance {
                    Resonance::None => ("none", Vec::new(), C64::default()),
                    Resonance::Internal { q, matched } => ("internal", q.clone(), *matched),
                    Resonance::Cross { matched } => ("cross", Vec::new(), *matched),
                };
                ResonanceRecord {
                    alpha: e.alpha.0.clone(),
                    s_re: e.s.re,
                    s_im: e.s.im,
                    kind: kind.into(),
                    q,
                    matched_re: matched.re,
                    matched_im: matched.im,
                }
            })
            .collect();
        ExpansionFile {
            format: EXPANSION_FORMAT.into(),
            version: FORMAT_VERSION,
            r: table.r,
            order: table.order,
            style: table.style,
            linear,
            monomials,
            resonances,
        }
    }

    pub fn to_table(&self) -> Result<ExpansionTable> {
        check_format(&self.format, self.version, EXPANSION_FORMAT)?;
        let r = self.r;
        if self.linear.len() != r {
            return Err(Error::Dimension(format!("{} linear records for r = {r}", self.linear.len())));
        }
        let mut orders: Vec<Vec<Monomial>> = vec![Vec::new(); self.order];
        for m in &self.monomials {
            let alpha = MultiIndex(m.alpha.clone());
            let j = alpha.order();
            if alpha.dim() != r || j == 0 || j > self.order {
                return Err(Error::Dimension(format!("monomial {alpha} does not fit r = {r}, order {}", self.order)));
            }
            orders[j - 1].push(Monomial {
                alpha,
                k: join_re_im(&m.k_re, &m.k_im, "monomial k")?,
                r: join_re_im(&m.r_re, &m.r_im, "monomial r")?,
                treatment: m.treatment,
                residual: m.residual,
            });
        }
        let mut k1 = Vec::with_capacity(r);
        for q in 0..r {
            let unit = MultiIndex::unit(r, q);
            let m = orders
                .first()
                .and_then(|o| o.iter().find(|m| m.alpha == unit))
                .ok_or(Error::MissingOrder(1))?;
            k1.push(m.k.clone());
        }
        let first = FirstOrder {
            k1,
            left: self.linear.iter().map(|l| join_re_im(&l.left_re, &l.left_im, "left vector")).collect::<Result<_>>()?,
            r1: self.linear.iter().map(|l| join_re_im(&l.r1_re, &l.r1_im, "R1 row")).collect::<Result<_>>()?,
            modes: self.linear.iter().map(|l| l.mode).collect(),
            conjugate_of: self.linear.iter().map(|l| l.conjugate_of).collect(),
        };
        let resonance_log = self
            .resonances
            .iter()
            .map(|e| {
                let matched = C64::new(e.matched_re, e.matched_im);
                let resonance = match e.kind.as_str() {
                    "none" => Resonance::None,
                    "internal" => Resonance::Internal { q: e.q.clone(), matched },
                    "cross" => Resonance::Cross { matched },
                    other => return Err(Error::InvalidParameter(format!("unknown resonance kind {other:?}"))),
                };
                Ok(ResonanceEntry { alpha: MultiIndex(e.alpha.clone()), s: C64::new(e.s_re, e.s_im), resonance })
            })
            .collect::<Result<_>>()?;
        let mut table = ExpansionTable::first_order(first, self.style);
        table.order = self.order;
        table.orders = orders;
        table.resonance_log = resonance_log;
        table.reindex();
        Ok(table)
    }
}

pub fn write_expansion(path: &Path, table: &ExpansionTable) -> Result<()> {
    write_json(path, &ExpansionFile::from_table(table))
}

pub fn read_expansion(path: &Path) -> Result<ExpansionTable> {
    read_json::<ExpansionFile>(path)?.to_table()
}

// ---------------------------------------------------------------- CSV

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Spectrum dump: `re_lambda, im_lambda, in_sigma1, mode, residual`.
pub fn write_spectrum_csv(path: &Path, eigs: &[EigenPair], beta_split: f64) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["re_lambda", "im_lambda", "in_sigma1", "mode", "residual"]).map_err(csv_error)?;
    for p in eigs {
        w.write_record([
            fmt_f64(p.value.re),
            fmt_f64(p.value.im),
            u8::from(p.value.re > beta_split).to_string(),
            p.mode.map_or(String::new(), |m| m.to_string()),
            p.residual.map_or(String::new(), fmt_f64),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `branch.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRow {
    pub param: f64,
    pub tangent_param: f64,
    pub c: f64,
    pub iterations: usize,
    pub residual: f64,
    pub stability: Option<usize>,
    pub observables: Option<Observables>,
}

impl BranchRow {
    /// Phase speed is the last packed unknown of a flow branch point.
    pub fn from_point(p: &BranchPoint) -> Self {
        BranchRow {
            param: p.param,
            tangent_param: p.tangent_param,
            c: p.x.last().copied().unwrap_or(0.0),
            iterations: p.iterations,
            residual: p.residual,
            stability: p.stability,
            observables: p.observables,
        }
    }
}

const BRANCH_HEADER: [&str; 12] =
    ["param", "tangent_param", "c", "iterations", "residual", "unstable", "e", "d", "mwnv", "svf", "t_ratio", "fold_after"];

fn opt_field(x: Option<f64>) -> String {
    x.map_or(String::new(), fmt_f64)
}

/// Branch points in order; `fold_after` marks rows followed by a located fold.
pub fn write_branch_csv(path: &Path, branch: &Branch) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(BRANCH_HEADER).map_err(csv_error)?;
    for (i, p) in branch.points.iter().enumerate() {
        let row = BranchRow::from_point(p);
        let o = row.observables;
        let fold = branch.folds.iter().find(|f| f.after == i).map_or(String::new(), |f| fmt_f64(f.param));
        w.write_record([
            fmt_f64(row.param),
            fmt_f64(row.tangent_param),
            fmt_f64(row.c),
            row.iterations.to_string(),
            fmt_f64(row.residual),
            row.stability.map_or(String::new(), |s| s.to_string()),
            opt_field(o.map(|o| o.e)),
            opt_field(o.map(|o| o.d)),
            opt_field(o.map(|o| o.mwnv)),
            opt_field(o.map(|o| o.svf)),
            opt_field(o.and_then(|o| o.t_ratio)),
            fold,
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_branch_csv(path: &Path) -> Result<Vec<BranchRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_error)?;
    let header: Vec<String> = rd.headers().map_err(csv_error)?.iter().map(String::from).collect();
    if header != BRANCH_HEADER {
        return Err(Error::InvalidParameter(format!("unexpected branch header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let opt = |i: usize| -> Result<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s, BRANCH_HEADER[i]).map(Some)
            }
        };
        let count = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| Error::InvalidParameter(format!("bad {} value {:?}", BRANCH_HEADER[i], &rec[i])))
        };
        let observables = match (opt(6)?, opt(7)?, opt(8)?, opt(9)?) {
            (Some(e), Some(d), Some(mwnv), Some(svf)) => Some(Observables { e, d, mwnv, svf, t_ratio: opt(10)? }),
            _ => None,
        };
        rows.push(BranchRow {
            param: parse_f64(&rec[0], "param")?,
            tangent_param: parse_f64(&rec[1], "tangent_param")?,
            c: parse_f64(&rec[2], "c")?,
            iterations: count(3)?,
            residual: parse_f64(&rec[4], "residual")?,
            stability: if rec[5].is_empty() { None } else { Some(count(5)?) },
            observables,
        });
    }
    Ok(rows)
}

/// Orbit samples: `t, theta<q>_re, theta<q>_im, ..., e, d, mwnv, svf[, t_ratio]`.
pub fn write_orbit_csv(path: &Path, orbit: &LiftedOrbit) -> Result<()> {
    let r = orbit.theta.first().map_or(0, |t| t.len());
    let with_ratio = orbit.observables.iter().all(|o| o.t_ratio.is_some()) && !orbit.observables.is_empty();
    let mut header = vec!["t".to_string()];
    for q in 0..r {
        header.push(format!("theta{q}_re"));
        header.push(format!("theta{q}_im"));
    }
    header.extend(["e", "d", "mwnv", "svf"].map(String::from));
    if with_ratio {
        header.push("t_ratio".into());
    }
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(csv_error)?;
    for ((t, th), o) in orbit.t.iter().zip(&orbit.theta).zip(&orbit.observables) {
        let mut rec = vec![fmt_f64(*t)];
        for z in th {
            rec.push(fmt_f64(z.re));
            rec.push(fmt_f64(z.im));
        }
        rec.extend([o.e, o.d, o.mwnv, o.svf].map(fmt_f64));
        if let (true, Some(tr)) = (with_ratio, o.t_ratio) {
            rec.push(fmt_f64(tr));
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `t` and `theta` columns of an orbit file.
pub fn read_orbit_trajectory(path: &Path) -> Result<Trajectory> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_error)?;
    let r = rd.headers().map_err(csv_error)?.iter().filter(|h| h.starts_with("theta") && h.ends_with("_re")).count();
    let mut out = Trajectory::default();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        out.t.push(parse_f64(&rec[0], "t")?);
        let theta = (0..r)
            .map(|q| Ok(C64::new(parse_f64(&rec[1 + 2 * q], "theta")?, parse_f64(&rec[2 + 2 * q], "theta")?)))
            .collect::<Result<Vec<_>>>()?;
        out.theta.push(theta);
    }
    Ok(out)
}

/// Physical fields on `nx` uniform x1 points times the Gauss-Lobatto x2 points.
pub fn write_physical_csv(path: &Path, model: &FlowModel, state: &StateVector, nx: usize) -> Result<()> {
    let phys = to_physical(&model.grid, &model.cheb, &state.coeffs, nx)?;
    let names = model.kind.field_names();
    let mut header = vec!["x1", "x2"];
    header.extend_from_slice(names);
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(csv_error)?;
    for (i1, x1) in phys.x1.iter().enumerate() {
        for (i2, x2) in phys.x2.iter().enumerate() {
            let mut rec = vec![fmt_f64(*x1), fmt_f64(*x2)];
            rec.extend((0..names.len()).map(|f| fmt_f64(phys.at(f, i1, i2))));
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- digests

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
