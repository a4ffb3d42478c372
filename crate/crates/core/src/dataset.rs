//! Plain-text trial container.
//!
//! ```text
//! SFD 1
//! [metadata]
//! key = value            profile, direction, finger, repetition, dt_ms,
//!                        n_steps, n_units, seed
//! [spikes]
//! unit step              one record per spike, sorted by step then unit
//! [force]
//! f0 f1 f2 f3 f4         one row per step, %MVC
//! [emg]                  optional, one row of 120 samples per step
//! [end]
//! ```
//!
//! Floats are written in shortest round-trip form, so save → load is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dynamics::TimeGrid;
use crate::encoding::{EmgBlock, N_CHANNELS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::signals::{Direction, Finger, ForceTrajectory, SpikeTrainSet, N_FINGERS};
use crate::synthgen::{Profile, SyntheticDataset, Trial};

pub const MAGIC: &str = "SFD";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "sfd";

pub fn trial_to_string(trial: &Trial) -> String {
    let grid = trial.spikes.grid();
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    s.push_str("[metadata]\n");
    let _ = writeln!(s, "profile = {}", trial.profile);
    let _ = writeln!(s, "direction = {}", trial.direction);
    let _ = writeln!(s, "finger = {}", trial.finger);
    let _ = writeln!(s, "repetition = {}", trial.repetition);
    let _ = writeln!(s, "dt_ms = {}", grid.dt_ms);
    let _ = writeln!(s, "n_steps = {}", grid.n_steps);
    let _ = writeln!(s, "n_units = {}", trial.spikes.n_units());
    let _ = writeln!(s, "seed = {}", trial.seed);
    s.push_str("[spikes]\n");
    for (step, units) in trial.spikes.step_lists().iter().enumerate() {
        for u in units {
            let _ = writeln!(s, "{u} {step}");
        }
    }
    s.push_str("[force]\n");
    for row in trial.force.rows() {
        push_row(&mut s, row);
    }
    if let Some(emg) = &trial.emg {
        s.push_str("[emg]\n");
        for t in 0..emg.n_steps() {
            push_row(&mut s, emg.samples().row(t));
        }
    }
    s.push_str("[end]\n");
    s
}

fn push_row(s: &mut String, row: &[f64]) {
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s.push('\n');
}

pub fn save_trial(trial: &Trial, path: &Path) -> Result<()> {
    fs::write(path, trial_to_string(trial))?;
    Ok(())
}

/// One invariant violation. `record` is the 0-based record index within
/// `section`, when the problem belongs to a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub section: String,
    pub record: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: [{}]", self.line, self.section)?;
        if let Some(r) = self.record {
            write!(f, " record {r}")?;
        }
        write!(f, ": {}", self.message)
    }
}

struct Parser {
    violations: Vec<Violation>,
}

impl Parser {
    fn flag(&mut self, line: usize, section: &str, record: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation { line, section: section.to_string(), record, message: message.into() });
    }
}

type Sections<'a> = BTreeMap<&'a str, (usize, Vec<(usize, &'a str)>)>;

fn split_sections<'a>(text: &'a str, p: &mut Parser) -> Option<Sections<'a>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == format!("{MAGIC} {VERSION}") => {}
        Some((n, l)) => {
            p.flag(n, "header", None, format!("expected \"{MAGIC} {VERSION}\", found {l:?}"));
            return None;
        }
        None => {
            p.flag(1, "header", None, "empty file");
            return None;
        }
    }
    let mut sections: Sections<'a> = BTreeMap::new();
    let mut current: Option<&'a str> = None;
    let mut ended = false;
    let mut last_line = 1;
    for (n, l) in lines {
        last_line = n;
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if ended {
            p.flag(n, "end", None, "content after [end]");
            break;
        }
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if name == "end" {
                ended = true;
                continue;
            }
            if !["metadata", "spikes", "force", "emg"].contains(&name) {
                p.flag(n, name, None, "unknown section");
                return None;
            }
            if sections.contains_key(name) {
                p.flag(n, name, None, "duplicate section");
                return None;
            }
            sections.insert(name, (n, Vec::new()));
            current = Some(name);
            continue;
        }
        match current {
            Some(c) => sections.get_mut(c).expect("inserted").1.push((n, l)),
            None => {
                p.flag(n, "header", None, "data before the first section");
                return None;
            }
        }
    }
    if !ended {
        p.flag(last_line, "end", None, "missing [end] marker (truncated file?)");
    }
    for required in ["metadata", "spikes", "force"] {
        if !sections.contains_key(required) {
            p.flag(last_line, required, None, "missing section");
        }
    }
    Some(sections)
}

struct Meta {
    profile: Profile,
    direction: Direction,
    finger: Finger,
    repetition: usize,
    dt_ms: f64,
    n_steps: usize,
    n_units: usize,
    seed: u64,
}

fn parse_meta(lines: &[(usize, &str)], header_line: usize, p: &mut Parser) -> Option<Meta> {
    let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for &(n, l) in lines {
        let Some((k, v)) = l.split_once('=') else {
            p.flag(n, "metadata", None, format!("expected key = value, found {l:?}"));
            continue;
        };
        let k = k.trim();
        if !["profile", "direction", "finger", "repetition", "dt_ms", "n_steps", "n_units", "seed"].contains(&k) {
            p.flag(n, "metadata", None, format!("unknown key {k:?}"));
        }
        kv.insert(k, (n, v.trim()));
    }
    fn get<T: std::str::FromStr>(
        kv: &BTreeMap<&str, (usize, &str)>,
        key: &str,
        header_line: usize,
        p: &mut Parser,
    ) -> Option<T> {
        let Some(&(n, v)) = kv.get(key) else {
            p.flag(header_line, "metadata", None, format!("missing key {key:?}"));
            return None;
        };
        let parsed = v.parse().ok();
        if parsed.is_none() {
            p.flag(n, "metadata", None, format!("invalid value {v:?} for {key:?}"));
        }
        parsed
    }
    let profile = get(&kv, "profile", header_line, p);
    let direction = get(&kv, "direction", header_line, p);
    let finger = get(&kv, "finger", header_line, p);
    let repetition = get(&kv, "repetition", header_line, p);
    let dt_ms: Option<f64> = get(&kv, "dt_ms", header_line, p);
    let n_steps = get(&kv, "n_steps", header_line, p);
    let n_units = get(&kv, "n_units", header_line, p);
    let seed = get(&kv, "seed", header_line, p);
    if let Some(dt) = dt_ms {
        if !(dt > 0.0 && dt.is_finite()) {
            p.flag(kv["dt_ms"].0, "metadata", None, "dt_ms must be positive");
            return None;
        }
    }
    Some(Meta {
        profile: profile?,
        direction: direction?,
        finger: finger?,
        repetition: repetition?,
        dt_ms: dt_ms?,
        n_steps: n_steps?,
        n_units: n_units?,
        seed: seed?,
    })
}

fn parse_rows(
    section: &str,
    lines: &[(usize, &str)],
    header_line: usize,
    n_steps: usize,
    width: usize,
    p: &mut Parser,
) -> Option<Vec<Vec<f64>>> {
    let before = p.violations.len();
    let mut rows = Vec::with_capacity(lines.len());
    for (rec, &(n, l)) in lines.iter().enumerate() {
        let vals: Vec<&str> = l.split_whitespace().collect();
        if vals.len() != width {
            p.flag(n, section, Some(rec), format!("expected {width} columns, found {}", vals.len()));
            continue;
        }
        let parsed: Option<Vec<f64>> = vals.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        match parsed {
            Some(r) => rows.push(r),
            None => p.flag(n, section, Some(rec), "non-numeric or non-finite value"),
        }
    }
    if lines.len() != n_steps {
        let line = lines.last().map_or(header_line, |l| l.0);
        p.flag(line, section, None, format!("expected {n_steps} rows, found {}", lines.len()));
    }
    (p.violations.len() == before).then_some(rows)
}

fn parse_trial(text: &str) -> (Option<Trial>, Vec<Violation>) {
    let mut p = Parser { violations: Vec::new() };
    let trial = parse_inner(text, &mut p);
    let trial = if p.violations.is_empty() { trial } else { None };
    (trial, p.violations)
}

fn parse_inner(text: &str, p: &mut Parser) -> Option<Trial> {
    let sections = split_sections(text, p)?;
    let (mh, ml) = sections.get("metadata")?;
    let meta = parse_meta(ml, *mh, p)?;

    let mut trains = vec![Vec::new(); meta.n_units];
    if let Some((_, lines)) = sections.get("spikes") {
        let mut prev: Option<(u64, u64)> = None;
        for (rec, &(n, l)) in lines.iter().enumerate() {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let parsed = match parts[..] {
                [u, s] => u.parse::<u64>().ok().zip(s.parse::<u64>().ok()),
                _ => None,
            };
            let Some((unit, step)) = parsed else {
                p.flag(n, "spikes", Some(rec), format!("expected \"unit step\", found {l:?}"));
                continue;
            };
            if step >= meta.n_steps as u64 {
                p.flag(n, "spikes", Some(rec), format!("step {step} outside horizon of {} steps", meta.n_steps));
                continue;
            }
            if unit >= meta.n_units as u64 {
                p.flag(n, "spikes", Some(rec), format!("unit {unit} outside 0..{}", meta.n_units));
                continue;
            }
            if let Some(prev) = prev {
                if (step, unit) <= prev {
                    p.flag(n, "spikes", Some(rec), "records not strictly sorted by step then unit");
                }
            }
            prev = Some((step, unit));
            trains[unit as usize].push(step as u32);
        }
    }
    let force = sections
        .get("force")
        .and_then(|(h, l)| parse_rows("force", l, *h, meta.n_steps, N_FINGERS, p));
    let emg = match sections.get("emg") {
        Some((h, l)) => Some(parse_rows("emg", l, *h, meta.n_steps, N_CHANNELS, p)?),
        None => None,
    };
    let force = force?;
    if !p.violations.is_empty() {
        return None;
    }
    let grid = TimeGrid { dt_ms: meta.dt_ms, n_steps: meta.n_steps };
    let built = (|| -> Result<_> {
        let spikes = SpikeTrainSet::new(grid, trains)?;
        let force = ForceTrajectory::new(grid, force.iter().map(|r| std::array::from_fn(|k| r[k])).collect())?;
        let emg = match emg {
            None => None,
            Some(rows) => Some(EmgBlock::new(grid, Matrix::from_vec(rows.len(), N_CHANNELS, rows.concat())?)?),
        };
        Ok((spikes, force, emg))
    })();
    let (spikes, force, emg) = match built {
        Ok(parts) => parts,
        Err(e) => {
            p.flag(0, "file", None, e.to_string());
            return None;
        }
    };
    Some(Trial {
        profile: meta.profile,
        direction: meta.direction,
        finger: meta.finger,
        repetition: meta.repetition,
        seed: meta.seed,
        spikes,
        force,
        emg,
    })
}

pub fn trial_from_str(text: &str) -> Result<Trial> {
    match parse_trial(text) {
        (Some(t), _) => Ok(t),
        (None, v) => Err(Error::Format(v.first().map_or_else(|| "unreadable file".into(), |v| v.to_string()))),
    }
}

pub fn load_trial(path: &Path) -> Result<Trial> {
    let text = fs::read_to_string(path)?;
    trial_from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes one file per trial; returns the paths in trial order.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(ds.trials.len());
    for t in &ds.trials {
        let path = dir.join(t.file_name());
        save_trial(t, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Dataset files of a directory in name order, or the file itself.
pub fn dataset_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .{EXTENSION} files in {}", path.display())));
    }
    Ok(files)
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let trials = dataset_files(path)?.iter().map(|p| load_trial(p)).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { trials })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub files: Vec<FileReport>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.files.iter().all(|f| f.violations.is_empty())
    }

    pub fn n_violations(&self) -> usize {
        self.files.iter().map(|f| f.violations.len()).sum()
    }
}

/// Checks every container invariant of a file or a directory of files.
pub fn validate_dataset(path: &Path) -> Result<ValidationReport> {
    if !path.exists() {
        return Err(Error::Dataset(format!("{} does not exist", path.display())));
    }
    let mut files = Vec::new();
    for f in dataset_files(path)? {
        let text = fs::read_to_string(&f)?;
        files.push(FileReport { path: f, violations: parse_trial(&text).1 });
    }
    Ok(ValidationReport { files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_dataset, SynthConfig};

    fn sample(emg: bool) -> Trial {
        let cfg = SynthConfig { emg, ..Default::default() };
        build_dataset(&"s2-extension".parse().unwrap(), &cfg, 3).unwrap().trials.swap_remove(4)
    }

    #[test]
    fn round_trip_is_exact() {
        for emg in [false, true] {
            let t = sample(emg);
            assert_eq!(trial_from_str(&trial_to_string(&t)).unwrap(), t);
        }
    }

    #[test]
    fn generated_file_validates() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample(false);
        let path = dir.path().join(t.file_name());
        save_trial(&t, &path).unwrap();
        let r = validate_dataset(dir.path()).unwrap();
        assert!(r.is_valid(), "{:?}", r.files[0].violations);
        assert_eq!(load_dataset(dir.path()).unwrap().trials, vec![t]);
    }

    fn spikes_section_start(text: &str) -> usize {
        text.lines().position(|l| l == "[spikes]").unwrap() + 1
    }

    #[test]
    fn out_of_range_step_reports_record() {
        let t = sample(false);
        let text = trial_to_string(&t);
        let start = spikes_section_start(&text);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let unit = lines[start + 3].split(' ').next().unwrap().to_string();
        lines[start + 3] = format!("{unit} 999999");
        let (trial, v) = parse_trial(&lines.join("\n"));
        assert!(trial.is_none());
        assert!(v.iter().any(|v| v.section == "spikes" && v.record == Some(3) && v.message.contains("horizon")), "{v:?}");
    }

    #[test]
    fn four_force_columns_is_a_schema_error() {
        let text = trial_to_string(&sample(false));
        let start = text.lines().position(|l| l == "[force]").unwrap() + 1;
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let row: Vec<&str> = lines[start + 7].split(' ').take(4).collect();
        lines[start + 7] = row.join(" ");
        let (_, v) = parse_trial(&lines.join("\n"));
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].section.as_str(), v[0].record), ("force", Some(7)));
        assert!(v[0].message.contains("expected 5 columns"));
    }

    #[test]
    fn structural_errors() {
        let text = trial_to_string(&sample(false));
        assert!(trial_from_str(&text.replace("SFD 1", "SFD 2")).is_err());
        assert!(trial_from_str(&text.replace("[end]\n", "")).is_err());
        assert!(trial_from_str(&text.replace("n_units", "units")).is_err());
        let start = spikes_section_start(&text);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(start, start + 1);
        let (_, v) = parse_trial(&lines.join("\n"));
        assert!(v.iter().any(|v| v.message.contains("sorted")));
    }

    #[test]
    fn missing_path_is_an_error() {
        assert!(validate_dataset(Path::new("/nonexistent/sfd")).is_err());
    }
}
