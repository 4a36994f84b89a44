//! Column-oriented plot data derived from a finished run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Scatter rows per sampled node.
const SCATTER_PARTICLES: usize = 200;

#[derive(Debug)]
pub struct MissingArtifacts(pub String);

impl std::fmt::Display for MissingArtifacts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifacts: {}", self.0)
    }
}

fn read(dir: &Path, name: &str) -> Option<String> {
    std::fs::read_to_string(dir.join(name)).ok()
}

fn io(e: std::io::Error) -> MissingArtifacts {
    MissingArtifacts(e.to_string())
}

/// Writes `plots/*.dat` (whitespace-separated, header line first) for
/// whichever artifacts exist; returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<String>, MissingArtifacts> {
    if !dir.join("manifest.json").exists() {
        return Err(MissingArtifacts(format!("{} has no manifest.json", dir.display())));
    }
    let out = dir.join("plots");
    std::fs::create_dir_all(&out).map_err(io)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), MissingArtifacts> {
        std::fs::write(out.join(name), body).map_err(io)?;
        written.push(format!("plots/{name}"));
        Ok(())
    };

    if let Some(text) = read(dir, "equilibrium.json") {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| MissingArtifacts(e.to_string()))?;
        let mut body = String::from("iteration residual\n");
        for (k, r) in v["residual_history"].as_array().into_iter().flatten().enumerate() {
            let _ = writeln!(body, "{} {}", k + 1, r);
        }
        emit("residual.dat", body)?;
    }
    if let Some(text) = read(dir, "u_field.csv") {
        emit("u_slices.dat", text.replace(',', " "))?;
    }
    if let Some(text) = read(dir, "density.csv") {
        emit("kde.dat", text.replace(',', " "))?;
    }
    if let (Some(sol), Some(paths)) = (read(dir, "solution.csv"), read(dir, "paths.csv")) {
        emit("yz_scatter.dat", scatter(&sol, &paths))?;
    }
    if written.is_empty() {
        return Err(MissingArtifacts(format!(
            "{} contains none of equilibrium.json, u_field.csv, density.csv, solution.csv",
            dir.display()
        )));
    }
    Ok(written)
}

/// (step, x…, Y, Z…) for the first particles at the first, middle and last
/// backward nodes.
fn scatter(solution: &str, paths: &str) -> String {
    let mut states: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut lines = paths.lines();
    let header = lines.next().unwrap_or_default();
    let xcols: Vec<&str> = header.split(',').skip(3).collect();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (Ok(i), Ok(n)) = (f[0].parse::<usize>(), f[1].parse::<usize>()) else { continue };
        if i < SCATTER_PARTICLES {
            states.insert((i, n), f[3..].iter().map(|s| s.to_string()).collect());
        }
    }
    let mut lines = solution.lines();
    let header = lines.next().unwrap_or_default();
    let zcols: Vec<&str> = header.split(',').skip(4).collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let last = rows.iter().filter_map(|r| r[1].parse::<usize>().ok()).max().unwrap_or(0);
    let nodes = [0, last / 2, last.saturating_sub(1)];
    let mut body = format!("step {} Y {}\n", xcols.join(" "), zcols.join(" "));
    for r in &rows {
        let (Ok(i), Ok(n)) = (r[0].parse::<usize>(), r[1].parse::<usize>()) else { continue };
        if i >= SCATTER_PARTICLES || !nodes.contains(&n) {
            continue;
        }
        if let Some(x) = states.get(&(i, n)) {
            let _ = writeln!(body, "{n} {} {} {}", x.join(" "), r[3], r[4..].join(" "));
        }
    }
    body
}
