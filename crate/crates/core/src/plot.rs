//! SVG figures rendered from run CSVs: batch statistics, loss curves and the
//! test-trajectory rollout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Deserialize;

pub const BATCH_STATS_FILE: &str = "fig_batch_stats.svg";
pub const LOSSES_FILE: &str = "fig_losses.svg";
pub const TRAJECTORIES_FILE: &str = "fig_trajectories.svg";

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("no plottable data in {0}")]
    MissingData(PathBuf),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("rendering {path}: {message}")]
    Render { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Deserialize)]
struct StatsRow {
    setting: String,
    batch_index: usize,
    rho_mean: f64,
    rho_std: f64,
    x_mean: f64,
    x_std: f64,
    y_mean: f64,
    y_std: f64,
    z_mean: f64,
    z_std: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct LossRow {
    setting: String,
    split: String,
    batch_index: usize,
    loss: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct TrajRow {
    setting: String,
    t: usize,
    x_pred: f64,
    y_pred: f64,
    z_pred: f64,
    x_ref: f64,
    y_ref: f64,
    z_ref: f64,
}

/// Everything the figures need, grouped by setting (in first-seen order).
#[derive(Debug, Default)]
struct Tables {
    order: Vec<String>,
    stats: Vec<StatsRow>,
    losses: Vec<LossRow>,
    traj: Vec<TrajRow>,
}

impl Tables {
    fn note(&mut self, setting: &str) {
        if !self.order.iter().any(|s| s == setting) {
            self.order.push(setting.to_string());
        }
    }

    fn is_empty(&self) -> bool {
        self.stats.is_empty() && self.losses.is_empty() && self.traj.is_empty()
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PlotError> {
    let csv_err = |source| PlotError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

/// Rows of a single run's own CSVs, keyed with `label` as the setting.
fn read_run_dir(dir: &Path, label: &str, t: &mut Tables) -> Result<(), PlotError> {
    #[derive(Deserialize)]
    struct Train {
        batch_index: usize,
        train_loss: f64,
        rho_mean: Option<f64>,
        rho_std: Option<f64>,
        x_mean: Option<f64>,
        x_std: Option<f64>,
        y_mean: Option<f64>,
        y_std: Option<f64>,
        z_mean: Option<f64>,
        z_std: Option<f64>,
    }
    #[derive(Deserialize)]
    struct Val {
        batch_index: usize,
        val_loss: f64,
    }
    #[derive(Deserialize)]
    struct Roll {
        t: usize,
        x_pred: f64,
        y_pred: f64,
        z_pred: f64,
        x_ref: f64,
        y_ref: f64,
        z_ref: f64,
    }
    let train = dir.join("train_log.csv");
    if train.is_file() {
        t.note(label);
        for r in read_rows::<Train>(&train)? {
            t.losses.push(LossRow {
                setting: label.into(),
                split: "train".into(),
                batch_index: r.batch_index,
                loss: r.train_loss,
            });
            if let (Some(rho_mean), Some(rho_std), Some(x_mean), Some(x_std), Some(y_mean), Some(y_std), Some(z_mean), Some(z_std)) =
                (r.rho_mean, r.rho_std, r.x_mean, r.x_std, r.y_mean, r.y_std, r.z_mean, r.z_std)
            {
                t.stats.push(StatsRow {
                    setting: label.into(),
                    batch_index: r.batch_index,
                    rho_mean,
                    rho_std,
                    x_mean,
                    x_std,
                    y_mean,
                    y_std,
                    z_mean,
                    z_std,
                });
            }
        }
    }
    let val = dir.join("val_log.csv");
    if val.is_file() {
        t.note(label);
        for r in read_rows::<Val>(&val)? {
            t.losses.push(LossRow {
                setting: label.into(),
                split: "val".into(),
                batch_index: r.batch_index,
                loss: r.val_loss,
            });
        }
    }
    let roll = dir.join("rollout.csv");
    if roll.is_file() {
        t.note(label);
        for r in read_rows::<Roll>(&roll)? {
            t.traj.push(TrajRow {
                setting: label.into(),
                t: r.t,
                x_pred: r.x_pred,
                y_pred: r.y_pred,
                z_pred: r.z_pred,
                x_ref: r.x_ref,
                y_ref: r.y_ref,
                z_ref: r.z_ref,
            });
        }
    }
    Ok(())
}

fn load(dir: &Path) -> Result<Tables, PlotError> {
    let mut t = Tables::default();
    let (stats, losses, traj) = (
        dir.join("batch_stats.csv"),
        dir.join("losses.csv"),
        dir.join("trajectories.csv"),
    );
    if stats.is_file() || losses.is_file() || traj.is_file() {
        if stats.is_file() {
            t.stats = read_rows(&stats)?;
        }
        if losses.is_file() {
            t.losses = read_rows(&losses)?;
        }
        if traj.is_file() {
            t.traj = read_rows(&traj)?;
        }
        let names: Vec<String> = t
            .losses
            .iter()
            .map(|r| r.setting.clone())
            .chain(t.stats.iter().map(|r| r.setting.clone()))
            .chain(t.traj.iter().map(|r| r.setting.clone()))
            .collect();
        names.iter().for_each(|n| t.note(n));
    } else {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        read_run_dir(dir, &label, &mut t)?;
    }
    if t.is_empty() {
        return Err(PlotError::MissingData(dir.to_path_buf()));
    }
    Ok(t)
}

fn color(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    COLORS[i % COLORS.len()]
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

type Res = Result<(), Box<dyn std::error::Error>>;

fn series_panel(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    title: &str,
    series: &[(String, usize, Vec<(f64, f64)>)],
) -> Res {
    let (x0, x1) = range(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 16))
        .margin(8)
        .x_label_area_size(28)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().light_line_style(WHITE).draw()?;
    for (name, ci, pts) in series {
        let c = color(*ci);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(1)))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .label_font(("sans-serif", 11))
        .draw()?;
    Ok(())
}

fn draw_batch_stats(t: &Tables, path: &Path) -> Res {
    let root = SVGBackend::new(path, (1200, 1400)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((4, 2));
    let fields: [(&str, fn(&StatsRow) -> f64); 8] = [
        ("rho mean", |r| r.rho_mean),
        ("rho std", |r| r.rho_std),
        ("x mean", |r| r.x_mean),
        ("x std", |r| r.x_std),
        ("y mean", |r| r.y_mean),
        ("y std", |r| r.y_std),
        ("z mean", |r| r.z_mean),
        ("z std", |r| r.z_std),
    ];
    for (panel, (title, f)) in panels.iter().zip(fields) {
        let series: Vec<_> = t
            .order
            .iter()
            .enumerate()
            .map(|(ci, name)| {
                let pts = t
                    .stats
                    .iter()
                    .filter(|r| &r.setting == name)
                    .map(|r| (r.batch_index as f64, f(r)))
                    .collect();
                (name.clone(), ci, pts)
            })
            .collect();
        series_panel(panel, title, &series)?;
    }
    root.present()?;
    Ok(())
}

fn draw_losses(t: &Tables, path: &Path) -> Res {
    let root = SVGBackend::new(path, (1200, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let positive = t.losses.iter().map(|r| r.loss).filter(|v| v.is_finite() && *v > 0.0);
    let (lo, hi) = positive.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo * 0.8, hi * 1.25) } else { (1e-3, 1.0) };
    let x1 = t.losses.iter().map(|r| r.batch_index).max().unwrap_or(1).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("training (thin) and validation (dots) loss", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(32)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..x1, (lo..hi).log_scale())?;
    chart.configure_mesh().x_desc("batch").y_desc("MSE").draw()?;
    for (ci, name) in t.order.iter().enumerate() {
        let c = color(ci);
        let train = t
            .losses
            .iter()
            .filter(|r| &r.setting == name && r.split == "train" && r.loss > 0.0)
            .map(|r| (r.batch_index as f64, r.loss));
        chart
            .draw_series(LineSeries::new(train, c.mix(0.35).stroke_width(1)))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], c));
        let val: Vec<(f64, f64)> = t
            .losses
            .iter()
            .filter(|r| &r.setting == name && r.split == "val" && r.loss > 0.0)
            .map(|r| (r.batch_index as f64, r.loss))
            .collect();
        chart.draw_series(LineSeries::new(val.iter().copied(), c.stroke_width(2)))?;
        chart.draw_series(val.iter().map(|p| Circle::new(*p, 3, c.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn draw_trajectories(t: &Tables, path: &Path) -> Res {
    let root = SVGBackend::new(path, (1400, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let (left, right) = root.split_horizontally(600);
    let mut by_setting: BTreeMap<&str, Vec<&TrajRow>> = BTreeMap::new();
    for r in &t.traj {
        by_setting.entry(r.setting.as_str()).or_default().push(r);
    }
    let reference: Vec<&TrajRow> = t
        .order
        .iter()
        .find_map(|n| by_setting.get(n.as_str()))
        .cloned()
        .unwrap_or_default();
    let finite = |p: &(f64, f64, f64)| p.0.is_finite() && p.1.is_finite() && p.2.is_finite();

    let (x0, x1) = range(reference.iter().map(|r| r.x_ref));
    let (y0, y1) = range(reference.iter().map(|r| r.y_ref));
    let (z0, z1) = range(reference.iter().map(|r| r.z_ref));
    let mut chart = ChartBuilder::on(&left)
        .caption("reference and predicted trajectories", ("sans-serif", 16))
        .margin(10)
        .build_cartesian_3d(x0..x1, z0..z1, y0..y1)?;
    chart.configure_axes().draw()?;
    let clip = |p: (f64, f64, f64)| {
        (
            p.0.clamp(x0, x1),
            p.2.clamp(z0, z1),
            p.1.clamp(y0, y1),
        )
    };
    chart
        .draw_series(LineSeries::new(
            reference.iter().map(|r| clip((r.x_ref, r.y_ref, r.z_ref))),
            BLACK.stroke_width(1),
        ))?
        .label("reference")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], BLACK));
    for (ci, name) in t.order.iter().enumerate() {
        let Some(rows) = by_setting.get(name.as_str()) else { continue };
        let c = color(ci);
        let pts: Vec<_> = rows
            .iter()
            .map(|r| (r.x_pred, r.y_pred, r.z_pred))
            .take_while(finite)
            .map(clip)
            .collect();
        chart
            .draw_series(LineSeries::new(pts, c.mix(0.7).stroke_width(1)))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;

    let axes: [(&str, fn(&TrajRow) -> (f64, f64)); 3] = [
        ("x", |r| (r.x_pred, r.x_ref)),
        ("y", |r| (r.y_pred, r.y_ref)),
        ("z", |r| (r.z_pred, r.z_ref)),
    ];
    for (panel, (axis, f)) in right.split_evenly((3, 1)).iter().zip(axes) {
        let mut series = vec![(
            "reference".to_string(),
            usize::MAX,
            reference.iter().map(|r| (r.t as f64, f(r).1)).collect::<Vec<_>>(),
        )];
        for (ci, name) in t.order.iter().enumerate() {
            if let Some(rows) = by_setting.get(name.as_str()) {
                let pts = rows
                    .iter()
                    .map(|r| (r.t as f64, f(r).0))
                    .filter(|p| p.1.is_finite())
                    .collect();
                series.push((name.clone(), ci, pts));
            }
        }
        let (ya, yb) = range(series[0].2.iter().map(|p| p.1));
        let half = (yb - ya) / 2.0 * 1.5;
        let mid = (ya + yb) / 2.0;
        let tmax = reference.len().max(2) as f64;
        let mut chart = ChartBuilder::on(panel)
            .caption(axis, ("sans-serif", 14))
            .margin(6)
            .x_label_area_size(24)
            .y_label_area_size(44)
            .build_cartesian_2d(0.0..tmax, (mid - half)..(mid + half))?;
        chart.configure_mesh().light_line_style(WHITE).draw()?;
        for (_, ci, pts) in &series {
            let style = if *ci == usize::MAX {
                BLACK.stroke_width(2)
            } else {
                color(*ci).mix(0.8).stroke_width(1)
            };
            let clipped = pts.iter().map(|&(x, y)| (x, y.clamp(mid - half, mid + half)));
            chart.draw_series(LineSeries::new(clipped, style))?;
        }
    }
    root.present()?;
    Ok(())
}

/// Renders the three figures for `dir` into `out_dir` (defaults to `dir`).
///
/// `dir` is either a suite directory (with `batch_stats.csv`, `losses.csv`,
/// `trajectories.csv`) or a single run directory.
pub fn cmd_plot(dir: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, PlotError> {
    let tables = load(dir)?;
    let out = out_dir.unwrap_or(dir);
    std::fs::create_dir_all(out).map_err(|e| PlotError::Render {
        path: out.to_path_buf(),
        message: e.to_string(),
    })?;
    let jobs: [(&str, fn(&Tables, &Path) -> Res); 3] = [
        (BATCH_STATS_FILE, draw_batch_stats),
        (LOSSES_FILE, draw_losses),
        (TRAJECTORIES_FILE, draw_trajectories),
    ];
    let mut written = Vec::new();
    for (name, draw) in jobs {
        let path = out.join(name);
        draw(&tables, &path).map_err(|e| PlotError::Render {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_missing_data() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_plot(d.path(), None), Err(PlotError::MissingData(_))));
    }

    #[test]
    fn single_run_renders_three_files_deterministically() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(
            d.path().join("train_log.csv"),
            "batch_index,train_loss,rho_mean,rho_std,x_mean,x_std,y_mean,y_std,z_mean,z_std\n\
             1,1.0,50.0,34.0,0.0,8.0,0.0,9.0,25.0,8.0\n2,0.5,,,,,,,,\n3,0.25,49.0,33.0,0.1,8.0,0.0,9.0,25.0,8.0\n",
        )
        .unwrap();
        std::fs::write(d.path().join("val_log.csv"), "batch_index,val_loss\n0,1.2\n3,0.3\n").unwrap();
        std::fs::write(
            d.path().join("rollout.csv"),
            "t,x_pred,y_pred,z_pred,x_ref,y_ref,z_ref\n0,1.0,1.0,1.0,1.0,1.0,1.0\n1,1.1,1.2,1.0,1.1,1.3,1.0\n2,NaN,NaN,NaN,1.3,1.5,1.1\n",
        )
        .unwrap();
        let a = cmd_plot(d.path(), None).unwrap();
        assert_eq!(a.len(), 3);
        let first: Vec<Vec<u8>> = a.iter().map(|p| std::fs::read(p).unwrap()).collect();
        cmd_plot(d.path(), None).unwrap();
        let second: Vec<Vec<u8>> = a.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert!(first.iter().all(|f| f.starts_with(b"<svg")));
    }
}
